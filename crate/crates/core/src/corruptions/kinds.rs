//! Per-kind corruption functions and their severity tables.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageReader;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::field::{
    filter2d, gaussian_blur, gaussian_kernel, resize_box, sample_bilinear, shift, zoom_center, Border, Field,
};
use super::textures::{frost_texture, plasma_fractal};
use crate::backends::ImageInput;
use crate::error::Result;

pub(crate) const GAUSSIAN_NOISE: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
pub(crate) const SHOT_NOISE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub(crate) const IMPULSE_NOISE: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
/// (radius, alias blur)
pub(crate) const DEFOCUS_BLUR: [(f64, f64); 5] = [(3.0, 0.1), (4.0, 0.5), (6.0, 0.5), (8.0, 0.5), (10.0, 0.5)];
/// (sigma, max delta, iterations)
pub(crate) const GLASS_BLUR: [(f64, usize, usize); 5] = [(0.7, 1, 2), (0.9, 2, 1), (1.0, 2, 3), (1.1, 3, 2), (1.5, 4, 2)];
/// (radius, sigma)
pub(crate) const MOTION_BLUR: [(usize, f64); 5] = [(10, 3.0), (15, 5.0), (15, 8.0), (15, 12.0), (20, 15.0)];
/// (step, count): zoom factors `1 + step * i` for `i in 0..count`.
pub(crate) const ZOOM_BLUR: [(f64, usize); 5] = [(0.01, 12), (0.01, 16), (0.02, 11), (0.02, 13), (0.03, 11)];
/// (mean, std, zoom, threshold, blur radius, blur sigma, blend)
pub(crate) const SNOW: [(f64, f64, f64, f64, usize, f64, f64); 5] = [
    (0.1, 0.3, 3.0, 0.5, 10, 4.0, 0.8),
    (0.2, 0.3, 2.0, 0.5, 12, 4.0, 0.7),
    (0.55, 0.3, 4.0, 0.9, 12, 8.0, 0.7),
    (0.55, 0.3, 4.5, 0.85, 12, 8.0, 0.65),
    (0.55, 0.3, 2.5, 0.85, 12, 12.0, 0.55),
];
/// (image weight, texture weight)
pub(crate) const FROST: [(f64, f64); 5] = [(1.0, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)];
/// (strength, wibble decay)
pub(crate) const FOG: [(f64, f64); 5] = [(1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)];
pub(crate) const BRIGHTNESS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub(crate) const CONTRAST: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];
pub(crate) const ELASTIC_ALPHA: [f64; 5] = [12.5, 16.25, 21.25, 25.0, 30.0];
pub(crate) const PIXELATE: [f64; 5] = [0.6, 0.5, 0.4, 0.3, 0.25];
pub(crate) const JPEG_QUALITY: [u8; 5] = [25, 18, 15, 10, 7];

fn sev(s: u8) -> usize {
    usize::from(s) - 1
}

pub(crate) fn gaussian_noise(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let n = Normal::new(0.0, GAUSSIAN_NOISE[sev(s)]).expect("positive std");
    let mut x = x;
    x.data.iter_mut().for_each(|v| *v += n.sample(rng));
    x.clamp01()
}

pub(crate) fn shot_noise(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let c = SHOT_NOISE[sev(s)];
    let mut x = x;
    for v in x.data.iter_mut() {
        let lambda = v.clamp(0.0, 1.0) * c;
        *v = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(rng) / c
        } else {
            0.0
        };
    }
    x.clamp01()
}

/// Salt-and-pepper on each channel value independently, half salt half pepper.
pub(crate) fn impulse_noise(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let amount = IMPULSE_NOISE[sev(s)];
    let mut x = x;
    for v in x.data.iter_mut() {
        if rng.random::<f64>() < amount {
            *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
        }
    }
    x
}

fn disk_kernel(radius: f64, alias_blur: f64) -> (Vec<f64>, usize) {
    let (r_int, ksize) = if radius <= 8.0 { (8isize, 3usize) } else { (radius as isize, 5usize) };
    let size = (2 * r_int + 1) as usize;
    let mut k = vec![0.0; size * size];
    for y in -r_int..=r_int {
        for x in -r_int..=r_int {
            if ((x * x + y * y) as f64) <= radius * radius {
                k[(y + r_int) as usize * size + (x + r_int) as usize] = 1.0;
            }
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    // Anti-alias the disk with a small Gaussian of fixed support.
    let g = {
        let half = (ksize / 2) as isize;
        let mut g: Vec<f64> = (-half..=half)
            .map(|i| (-((i * i) as f64) / (2.0 * alias_blur * alias_blur)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    };
    let plane = Field {
        h: size,
        w: size,
        c: 1,
        data: k,
    };
    let blurred = super::field::correlate_axis(
        &super::field::correlate_axis(&plane, &g, 0, Border::Reflect101),
        &g,
        1,
        Border::Reflect101,
    );
    let total: f64 = blurred.data.iter().sum();
    (blurred.data.into_iter().map(|v| v / total).collect(), size)
}

pub(crate) fn defocus_blur(x: Field, s: u8) -> Field {
    let (radius, alias) = DEFOCUS_BLUR[sev(s)];
    let (k, size) = disk_kernel(radius, alias);
    filter2d(&x, &k, size, Border::Reflect101).clamp01()
}

pub(crate) fn glass_blur_min_size(s: u8) -> usize {
    2 * GLASS_BLUR[sev(s)].1 + 2
}

pub(crate) fn glass_blur(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let (sigma, d, iterations) = GLASS_BLUR[sev(s)];
    let quant = |f: Field| f.map(|v| (v.clamp(0.0, 1.0) * 255.0).floor() / 255.0);
    let mut x = quant(gaussian_blur(&x, sigma, 4.0, Border::Nearest));
    let (h, w, d_i) = (x.h, x.w, d as i64);
    for _ in 0..iterations {
        for yy in (d + 1..=h - d).rev() {
            for xx in (d + 1..=w - d).rev() {
                let dx = rng.random_range(-d_i..d_i) as isize;
                let dy = rng.random_range(-d_i..d_i) as isize;
                let (y1, x1) = (yy, xx);
                let y2 = (y1 as isize + dy) as usize;
                let x2 = (x1 as isize + dx) as usize;
                for k in 0..3 {
                    let a = x.idx(y1, x1, k);
                    let b = x.idx(y2, x2, k);
                    x.data.swap(a, b);
                }
            }
        }
    }
    gaussian_blur(&x, sigma, 4.0, Border::Nearest).clamp01()
}

/// One-sided Gaussian-weighted streak along `angle` degrees.
pub(crate) fn motion_streak(x: &Field, radius: usize, sigma: f64, angle: f64) -> Field {
    let width = radius * 2 + 1;
    let mut kernel: Vec<f64> = (0..width)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    let (py, px) = (width as f64 * angle.to_radians().sin(), width as f64 * angle.to_radians().cos());
    let hyp = py.hypot(px);
    let mut out = Field::zeros(x.h, x.w, x.c);
    for (i, &wt) in kernel.iter().enumerate() {
        let dy = -((i as f64 * py / hyp) - 0.5).ceil() as isize;
        let dx = -((i as f64 * px / hyp) - 0.5).ceil() as isize;
        if dy.unsigned_abs() >= x.h || dx.unsigned_abs() >= x.w {
            break;
        }
        let shifted = shift(x, dy, dx);
        out.data.iter_mut().zip(&shifted.data).for_each(|(o, v)| *o += wt * v);
    }
    out
}

pub(crate) fn motion_blur(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let (radius, sigma) = MOTION_BLUR[sev(s)];
    let angle = rng.random_range(-45.0..45.0);
    motion_streak(&x, radius, sigma, angle).clamp01()
}

pub(crate) fn zoom_blur(x: Field, s: u8) -> Field {
    let (step, count) = ZOOM_BLUR[sev(s)];
    let mut acc = x.clone();
    for i in 0..count {
        let z = zoom_center(&x, 1.0 + step * i as f64);
        acc.data.iter_mut().zip(&z.data).for_each(|(a, v)| *a += v);
    }
    let n = (count + 1) as f64;
    acc.map(|v| v / n).clamp01()
}

fn gray(x: &Field, y: usize, xx: usize) -> f64 {
    0.299 * x.get(y, xx, 0) + 0.587 * x.get(y, xx, 1) + 0.114 * x.get(y, xx, 2)
}

pub(crate) fn snow(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let (mean, std, zoom, threshold, radius, sigma, blend) = SNOW[sev(s)];
    let normal = Normal::new(mean, std).expect("positive std");
    let mut layer = Field::zeros(x.h, x.w, 1);
    layer.data.iter_mut().for_each(|v| *v = normal.sample(rng));
    let mut layer = zoom_center(&layer, zoom);
    layer.data.iter_mut().for_each(|v| {
        if *v < threshold {
            *v = 0.0
        }
    });
    let layer = layer.clamp01();
    let angle = rng.random_range(-135.0..-45.0);
    let layer = motion_streak(&layer, radius, sigma, angle).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let flipped = layer.rot180();

    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let g = gray(&x, y, xx) * 1.5 + 0.5;
            let add = layer.get(y, xx, 0) + flipped.get(y, xx, 0);
            for k in 0..3 {
                let v = x.get(y, xx, k);
                let i = out.idx(y, xx, k);
                out.data[i] = blend * v + (1.0 - blend) * v.max(g) + add;
            }
        }
    }
    out.clamp01()
}

pub(crate) fn frost(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let (wx, wf) = FROST[sev(s)];
    let tex = frost_texture(x.h, x.w, rng);
    let mut out = x;
    for y in 0..out.h {
        for xx in 0..out.w {
            let t = tex.get(y, xx, 0);
            for k in 0..3 {
                let i = out.idx(y, xx, k);
                out.data[i] = wx * out.data[i] + wf * t;
            }
        }
    }
    out.clamp01()
}

pub(crate) fn fog(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let (strength, decay) = FOG[sev(s)];
    let n = x.h.max(x.w).next_power_of_two().max(2);
    let plasma = plasma_fractal(n, decay, rng);
    let max_val = x.max();
    let mut out = x;
    for y in 0..out.h {
        for xx in 0..out.w {
            let p = plasma[y * n + xx];
            for k in 0..3 {
                let i = out.idx(y, xx, k);
                out.data[i] += strength * p;
            }
        }
    }
    out.map(|v| v * max_val / (max_val + strength)).clamp01()
}

/// Raise HSV value by `c`, keeping hue and saturation.
pub(crate) fn brightness(x: Field, s: u8) -> Field {
    let c = BRIGHTNESS[sev(s)];
    let mut out = x;
    for p in out.data.chunks_exact_mut(3) {
        let v = p[0].max(p[1]).max(p[2]);
        let v2 = (v + c).clamp(0.0, 1.0);
        if v > 0.0 {
            p.iter_mut().for_each(|ch| *ch *= v2 / v);
        } else {
            p.iter_mut().for_each(|ch| *ch = v2);
        }
    }
    out.clamp01()
}

pub(crate) fn contrast(x: Field, s: u8) -> Field {
    let c = CONTRAST[sev(s)];
    let n = (x.h * x.w) as f64;
    let mut means = [0.0; 3];
    for p in x.data.chunks_exact(3) {
        for k in 0..3 {
            means[k] += p[k] / n;
        }
    }
    let mut out = x;
    for p in out.data.chunks_exact_mut(3) {
        for k in 0..3 {
            p[k] = (p[k] - means[k]) * c + means[k];
        }
    }
    out.clamp01()
}

pub(crate) fn elastic_transform(x: Field, s: u8, rng: &mut ChaCha8Rng) -> Field {
    let alpha = ELASTIC_ALPHA[sev(s)];
    let max_d = x.h as f64 * 0.005;
    let (sig_y, sig_x) = (x.h as f64 * 0.01, x.w as f64 * 0.01);
    let field = |rng: &mut ChaCha8Rng| {
        let mut f = Field::zeros(x.h, x.w, 1);
        if max_d > 0.0 {
            f.data.iter_mut().for_each(|v| *v = rng.random_range(-max_d..=max_d));
        }
        let ky = gaussian_kernel(sig_y.max(1e-6), 3.0);
        let kx = gaussian_kernel(sig_x.max(1e-6), 3.0);
        let f = super::field::correlate_axis(&f, &ky, 0, Border::Reflect);
        super::field::correlate_axis(&f, &kx, 1, Border::Reflect).map(|v| v * alpha)
    };
    let dx = field(rng);
    let dy = field(rng);
    let mut out = Field::zeros(x.h, x.w, x.c);
    for y in 0..x.h {
        for xx in 0..x.w {
            let sy = y as f64 + dy.get(y, xx, 0);
            let sx = xx as f64 + dx.get(y, xx, 0);
            for k in 0..3 {
                let i = out.idx(y, xx, k);
                out.data[i] = sample_bilinear(&x, sy, sx, k, Border::Reflect);
            }
        }
    }
    out.clamp01()
}

pub(crate) fn pixelate_min_size(s: u8) -> usize {
    (1.0 / PIXELATE[sev(s)]).ceil() as usize
}

pub(crate) fn pixelate(x: Field, s: u8) -> Field {
    let c = PIXELATE[sev(s)];
    let nh = ((x.h as f64 * c) as usize).max(1);
    let nw = ((x.w as f64 * c) as usize).max(1);
    resize_box(&resize_box(&x, nh, nw), x.h, x.w).clamp01()
}

pub(crate) fn jpeg_compression(img: &ImageInput, s: u8) -> Result<ImageInput> {
    let quality = JPEG_QUALITY[sev(s)];
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&img.to_rgb_image())?;
    let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
        .decode()?
        .to_rgb8();
    ImageInput::from_rgb_image(img.id.clone(), &decoded)
}
