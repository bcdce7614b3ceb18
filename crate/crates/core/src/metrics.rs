//! Image-quality metrics: PSNR, SSIM, RMSE and mask-weighted RMSE.
//!
//! Inputs are tensors in [0, 1]. PSNR uses a peak of 1 (numerically equal
//! to the 8-bit convention); RMSE values are reported on the 0–255 scale.

use crate::compositor::MASK_THRESHOLD;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{mse_f64, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = mse_f64(a, b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Root-mean-square error on the 0–255 scale.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(255.0 * mse_f64(a, b)?.sqrt())
}

/// RMSE (0–255 scale) over pixels whose mask value exceeds
/// [`MASK_THRESHOLD`]; `None` when the mask selects nothing.
pub fn rmse_w(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    a.expect_shape("rmse_w", b.shape())?;
    let [n, c, h, w] = a.shape();
    if mask.shape() != [n, 1, h, w] {
        return Err(shape_err(
            "rmse_w",
            format!("mask {:?} does not match image {:?}", mask.shape(), a.shape()),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask.get(ni, 0, y, x) <= MASK_THRESHOLD {
                    continue;
                }
                for ci in 0..c {
                    let d = a.get(ni, ci, y, x) as f64 - b.get(ni, ci, y, x) as f64;
                    sum += d * d;
                }
                count += c;
            }
        }
    }
    Ok((count > 0).then(|| 255.0 * (sum / count as f64).sqrt()))
}

/// Normalised 1-D Gaussian taps for the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable filtering of an h×w plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape("ssim", b.shape())?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    let plane_len = h * w;
    let mut total = 0.0;
    for (pa, pb) in a.data().chunks(plane_len).zip(b.data().chunks(plane_len)) {
        let fa: Vec<f64> = pa.iter().map(|&v| v as f64).collect();
        let fb: Vec<f64> = pb.iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&fa, h, w, &taps);
        let mu_b = filter_valid(&fb, h, w, &taps);
        let e_aa = filter_valid(&prod(&fa, &fa), h, w, &taps);
        let e_bb = filter_valid(&prod(&fb, &fb), h, w, &taps);
        let e_ab = filter_valid(&prod(&fa, &fb), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = seeded(seed);
        let a = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen());
        let b = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen());
        (a, b)
    }

    #[test]
    fn psnr_of_uniform_difference_is_twenty_db() {
        let a = Tensor::full([1, 3, 8, 8], 0.1f32);
        let b = Tensor::zeros([1, 3, 8, 8]);
        // 0.1f32 is 0.1 + 1.5e-9, which moves the result by ~1.3e-7 dB.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        let a = Tensor::full([1, 3, 8, 8], 0.75f32);
        let b = Tensor::full([1, 3, 8, 8], 0.625f32);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 8.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = Tensor::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_255_scale_formula() {
        let (a, b) = random_pair(1, 16, 16);
        let mse255: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x as f64 * 255.0 - y as f64 * 255.0;
                d * d
            })
            .sum::<f64>()
            / a.len() as f64;
        let want = 10.0 * (255.0f64 * 255.0 / mse255).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn rmse_values() {
        let a = Tensor::full([1, 3, 4, 4], 0.2);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = Tensor::full([1, 3, 4, 4], 0.3);
        assert!((rmse(&a, &b).unwrap() - 25.5).abs() < 1e-4);
    }

    #[test]
    fn rmse_w_cases() {
        let (a, b) = random_pair(2, 8, 8);
        let full = Tensor::full([1, 1, 8, 8], 1.0);
        assert!((rmse_w(&a, &b, &full).unwrap().unwrap() - rmse(&a, &b).unwrap()).abs() < 1e-9);
        assert_eq!(rmse_w(&a, &b, &Tensor::zeros([1, 1, 8, 8])).unwrap(), None);

        // Half mask: differences only outside, then only inside.
        let mask = Tensor::from_fn([1, 1, 8, 8], |_, _, y, _| if y < 4 { 1.0 } else { 0.0 });
        let host = Tensor::full([1, 3, 8, 8], 0.5);
        let outside = Tensor::from_fn([1, 3, 8, 8], |_, _, y, _| if y < 4 { 0.5 } else { 0.9 });
        assert_eq!(rmse_w(&host, &outside, &mask).unwrap(), Some(0.0));
        let d = 0.0625f32;
        let inside = Tensor::from_fn([1, 3, 8, 8], |_, _, y, _| if y < 4 { 0.5 + d } else { 0.5 });
        assert!((rmse_w(&host, &inside, &mask).unwrap().unwrap() - 255.0 * d as f64).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constant_images() {
        let (a, _) = random_pair(3, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = Tensor::zeros([1, 3, 16, 16]);
        let one = Tensor::full([1, 3, 16, 16], 1.0);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
        assert!((want - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 3, 10, 20]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = random_pair(4, 20, 24);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
