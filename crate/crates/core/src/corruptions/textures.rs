//! Procedural overlays: diamond-square plasma for fog, seeded frost.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::field::{gaussian_blur, Border, Field};

/// Diamond-square plasma on an `n x n` toroidal grid (`n` a power of two),
/// normalized to [0, 1]. `decay` divides the perturbation amplitude at
/// every octave.
pub(crate) fn plasma_fractal(n: usize, decay: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(n.is_power_of_two() && n >= 2);
    let mut a = vec![0.0f64; n * n];
    let mut step = n;
    let mut wibble = 100.0f64;
    let at = |i: usize, j: usize| i * n + j;
    while step >= 2 {
        let m = n / step;
        let h = step / 2;
        let noisy = |v: f64, rng: &mut ChaCha8Rng| v / 4.0 + wibble * rng.random_range(-wibble..wibble);

        // squares
        let corner = |a: &[f64], i: usize, j: usize| a[at(i * step, j * step)];
        let mut sq = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let col = |jj: usize| corner(&a, i, jj) + corner(&a, (i + 1) % m, jj);
                sq[i * m + j] = col(j) + col((j + 1) % m);
            }
        }
        for i in 0..m {
            for j in 0..m {
                a[at(h + i * step, h + j * step)] = noisy(sq[i * m + j], rng);
            }
        }

        // diamonds
        let dr = |a: &[f64], i: usize, j: usize| a[at(h + i * step, h + j * step)];
        let ul = |a: &[f64], i: usize, j: usize| a[at(i * step, j * step)];
        let mut left = vec![0.0; m * m];
        let mut top = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                left[i * m + j] = dr(&a, i, j) + dr(&a, (i + m - 1) % m, j) + ul(&a, i, j) + ul(&a, i, (j + 1) % m);
                top[i * m + j] = dr(&a, i, j) + dr(&a, i, (j + m - 1) % m) + ul(&a, i, j) + ul(&a, (i + 1) % m, j);
            }
        }
        for i in 0..m {
            for j in 0..m {
                a[at(i * step, h + j * step)] = noisy(left[i * m + j], rng);
            }
        }
        for i in 0..m {
            for j in 0..m {
                a[at(h + i * step, j * step)] = noisy(top[i * m + j], rng);
            }
        }
        step /= 2;
        wibble /= decay;
    }
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    a.iter_mut().for_each(|v| *v -= lo);
    let hi = a.iter().copied().fold(0.0, f64::max);
    if hi > 0.0 {
        a.iter_mut().for_each(|v| *v /= hi);
    }
    a
}

/// Single-channel frost overlay: a dim mottled base with sparse bright
/// needle-shaped crystals.
pub(crate) fn frost_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Field {
    let mut base = Field::zeros(h, w, 1);
    base.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
    let mut tex = gaussian_blur(&base, 2.0, 4.0, Border::Reflect).map(|v| v * 0.12);

    let n_crystals = (h * w / 40).max(1);
    let max_len = (h.min(w) / 6 + 3) as f64;
    for _ in 0..n_crystals {
        let mut y = rng.random_range(0.0..h as f64);
        let mut x = rng.random_range(0.0..w as f64);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(2.0..max_len);
        let value = rng.random_range(0.75..1.0);
        let (dy, dx) = (theta.sin(), theta.cos());
        let mut t = 0.0;
        while t < len {
            let (yi, xi) = (y as isize, x as isize);
            if yi >= 0 && xi >= 0 && (yi as usize) < h && (xi as usize) < w {
                let i = tex.idx(yi as usize, xi as usize, 0);
                tex.data[i] = tex.data[i].max(value);
            }
            y += dy;
            x += dx;
            t += 1.0;
        }
    }
    gaussian_blur(&tex, 0.6, 4.0, Border::Reflect).clamp01()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn plasma_is_normalized_and_seeded() {
        let a = plasma_fractal(32, 2.0, &mut rng_from(4));
        let b = plasma_fractal(32, 2.0, &mut rng_from(4));
        assert_eq!(a, b);
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn frost_is_dark_with_bright_spots() {
        let t = frost_texture(64, 64, &mut rng_from(1));
        let mean = t.data.iter().sum::<f64>() / t.data.len() as f64;
        assert!(mean < 0.2, "{mean}");
        assert!(t.max() > 0.6);
    }
}
