//! Float image buffer and the filtering primitives the corruptions share.

use crate::backends::ImageInput;
use crate::error::Result;

/// Row-major `h x w x c` buffer, nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Field {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Border {
    /// `aaa|abcd|ddd`
    Nearest,
    /// `cba|abcd|dcb`
    Reflect,
    /// `dcb|abcd|cba`
    Reflect101,
}

pub(crate) fn border_index(i: isize, n: usize, border: Border) -> usize {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return i as usize;
    }
    if n == 1 {
        return 0;
    }
    match border {
        Border::Nearest => i.clamp(0, n_i - 1) as usize,
        Border::Reflect => {
            let period = 2 * n_i;
            let m = i.rem_euclid(period);
            (if m < n_i { m } else { period - 1 - m }) as usize
        }
        Border::Reflect101 => {
            let period = 2 * n_i - 2;
            let m = i.rem_euclid(period);
            (if m < n_i { m } else { period - m }) as usize
        }
    }
}

impl Field {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_image(img: &ImageInput) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            c: 3,
            data: img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect(),
        }
    }

    /// Quantize back to 8 bits, clamping to [0, 1] first.
    pub fn to_image(&self, like: &ImageInput) -> Result<ImageInput> {
        debug_assert_eq!(self.c, 3);
        let px = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        like.with_pixels(px)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, k: usize) -> usize {
        (y * self.w + x) * self.c + k
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[self.idx(y, x, k)]
    }

    #[inline]
    pub fn get_b(&self, y: isize, x: isize, k: usize, border: Border) -> f64 {
        self.get(border_index(y, self.h, border), border_index(x, self.w, border), k)
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    pub fn clamp01(self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rotate by 180 degrees.
    pub fn rot180(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                for k in 0..self.c {
                    let i = out.idx(y, x, k);
                    out.data[i] = self.get(self.h - 1 - y, self.w - 1 - x, k);
                }
            }
        }
        out
    }
}

/// Normalized sampled Gaussian with radius `round(truncate * sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Correlate along one axis (0 = rows/vertical, 1 = columns/horizontal)
/// with an odd-length centered kernel.
pub(crate) fn correlate_axis(f: &Field, kernel: &[f64], axis: usize, border: Border) -> Field {
    let r = (kernel.len() / 2) as isize;
    let mut out = Field::zeros(f.h, f.w, f.c);
    for y in 0..f.h {
        for x in 0..f.w {
            for k in 0..f.c {
                let mut acc = 0.0;
                for (j, &wt) in kernel.iter().enumerate() {
                    let off = j as isize - r;
                    acc += wt
                        * if axis == 0 {
                            f.get_b(y as isize + off, x as isize, k, border)
                        } else {
                            f.get_b(y as isize, x as isize + off, k, border)
                        };
                }
                let i = out.idx(y, x, k);
                out.data[i] = acc;
            }
        }
    }
    out
}

pub(crate) fn gaussian_blur(f: &Field, sigma: f64, truncate: f64, border: Border) -> Field {
    if sigma <= 0.0 {
        return f.clone();
    }
    let k = gaussian_kernel(sigma, truncate);
    correlate_axis(&correlate_axis(f, &k, 0, border), &k, 1, border)
}

/// Dense 2-D correlation with a square odd-sized kernel.
pub(crate) fn filter2d(f: &Field, kernel: &[f64], size: usize, border: Border) -> Field {
    debug_assert_eq!(kernel.len(), size * size);
    let r = (size / 2) as isize;
    let mut out = Field::zeros(f.h, f.w, f.c);
    for y in 0..f.h {
        for x in 0..f.w {
            for k in 0..f.c {
                let mut acc = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        let wt = kernel[ky * size + kx];
                        if wt != 0.0 {
                            acc += wt
                                * f.get_b(
                                    y as isize + ky as isize - r,
                                    x as isize + kx as isize - r,
                                    k,
                                    border,
                                );
                        }
                    }
                }
                let i = out.idx(y, x, k);
                out.data[i] = acc;
            }
        }
    }
    out
}

pub(crate) fn sample_bilinear(f: &Field, y: f64, x: f64, k: usize, border: Border) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (ty, tx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let a = f.get_b(y0, x0, k, border);
    let b = f.get_b(y0, x0 + 1, k, border);
    let c = f.get_b(y0 + 1, x0, k, border);
    let d = f.get_b(y0 + 1, x0 + 1, k, border);
    (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty
}

/// Magnify by `z >= 1` about the image center, keeping the original size.
pub(crate) fn zoom_center(f: &Field, z: f64) -> Field {
    let cy = (f.h as f64 - 1.0) / 2.0;
    let cx = (f.w as f64 - 1.0) / 2.0;
    let mut out = Field::zeros(f.h, f.w, f.c);
    for y in 0..f.h {
        for x in 0..f.w {
            let sy = cy + (y as f64 - cy) / z;
            let sx = cx + (x as f64 - cx) / z;
            for k in 0..f.c {
                let i = out.idx(y, x, k);
                out.data[i] = sample_bilinear(f, sy, sx, k, Border::Nearest);
            }
        }
    }
    out
}

/// Translate by `(dy, dx)` pixels, replicating the edge into the vacated band.
pub(crate) fn shift(f: &Field, dy: isize, dx: isize) -> Field {
    let mut out = Field::zeros(f.h, f.w, f.c);
    for y in 0..f.h {
        for x in 0..f.w {
            for k in 0..f.c {
                let i = out.idx(y, x, k);
                out.data[i] = f.get_b(y as isize - dy, x as isize - dx, k, Border::Nearest);
            }
        }
    }
    out
}

/// Area-weighted (box) resampling to `nh x nw`.
pub(crate) fn resize_box(f: &Field, nh: usize, nw: usize) -> Field {
    let spans = |n_src: usize, n_dst: usize| -> Vec<Vec<(usize, f64)>> {
        let s = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let (lo, hi) = (i as f64 * s, (i + 1) as f64 * s);
                let mut v = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < n_src {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        v.push((j, overlap / (hi - lo)));
                    }
                    j += 1;
                }
                v
            })
            .collect()
    };
    let ys = spans(f.h, nh);
    let xs = spans(f.w, nw);
    let mut out = Field::zeros(nh, nw, f.c);
    for (y, sy) in ys.iter().enumerate() {
        for (x, sx) in xs.iter().enumerate() {
            for k in 0..f.c {
                let mut acc = 0.0;
                for &(yy, wy) in sy {
                    for &(xx, wx) in sx {
                        acc += wy * wx * f.get(yy, xx, k);
                    }
                }
                let i = out.idx(y, x, k);
                out.data[i] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_modes() {
        let n = 4;
        let got = |b| (-3..7).map(|i| border_index(i, n, b)).collect::<Vec<_>>();
        assert_eq!(got(Border::Nearest), [0, 0, 0, 0, 1, 2, 3, 3, 3, 3]);
        assert_eq!(got(Border::Reflect), [2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(got(Border::Reflect101), [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn kernels_normalize() {
        let k = gaussian_kernel(1.0, 4.0);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_fixed_by_filters() {
        let f = Field {
            h: 5,
            w: 7,
            c: 3,
            data: vec![0.25; 105],
        };
        for g in [
            gaussian_blur(&f, 1.3, 4.0, Border::Reflect),
            zoom_center(&f, 1.2),
            shift(&f, 2, -3),
            resize_box(&resize_box(&f, 2, 3), 5, 7),
        ] {
            assert!(g.data.iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn box_resize_preserves_mean() {
        let f = Field {
            h: 6,
            w: 6,
            c: 1,
            data: (0..36).map(|i| i as f64).collect(),
        };
        let g = resize_box(&f, 4, 4);
        let mean = |x: &Field| x.data.iter().sum::<f64>() / x.data.len() as f64;
        assert!((mean(&f) - mean(&g)).abs() < 1e-9);
    }

    #[test]
    fn shift_replicates_edge() {
        let f = Field {
            h: 1,
            w: 4,
            c: 1,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(shift(&f, 0, 1).data, [1.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift(&f, 0, -2).data, [3.0, 4.0, 4.0, 4.0]);
    }
}
