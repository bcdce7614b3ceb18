use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalised 1-D Gaussian with `sigma`, half-width `ceil(3·sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Half-sample symmetric reflection: `... b a | a b c ... z | z y ...`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with `sigma = radius` and symmetric boundary
/// reflection. A radius of zero returns the input unchanged.
pub fn gaussian_blur(image: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("blur radius must be >= 0, got {radius}")));
    }
    if radius == 0.0 {
        return Ok(image.clone());
    }
    let taps = gaussian_taps(radius);
    let half = (taps.len() / 2) as isize;
    let [_, _, h, w] = image.shape();
    let mut out = Vec::with_capacity(image.len());
    let mut rows = vec![0.0f64; h * w];
    for plane in image.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * plane[y * w + reflect(x as isize + k as isize - half, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * rows[reflect(y as isize + k as isize - half, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn zero_radius_is_identity() {
        let mut rng = seeded(1);
        let t = Tensor::from_fn([1, 3, 9, 7], |_, _, _, _| rng.gen());
        assert_eq!(gaussian_blur(&t, 0.0).unwrap(), t);
    }

    #[test]
    fn constant_image_is_unchanged() {
        let t = Tensor::full([1, 3, 12, 10], 0.37);
        for r in [0.25, 0.75, 2.0] {
            let b = gaussian_blur(&t, r).unwrap();
            assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn impulse_center_matches_direct_kernel_sum() {
        let mut t = Tensor::zeros([1, 1, 21, 21]);
        t.set(0, 0, 10, 10, 1.0);
        let b = gaussian_blur(&t, 1.0).unwrap();
        let mut total = 0.0;
        for y in -3i32..=3 {
            for x in -3i32..=3 {
                total += (-((x * x + y * y) as f64) / 2.0).exp();
            }
        }
        let want = 1.0 / total;
        assert!((b.get(0, 0, 10, 10) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_mean_and_range() {
        let mut rng = seeded(9);
        let t = Tensor::from_fn([1, 3, 64, 64], |_, _, _, _| rng.gen());
        for r in [0.25, 0.5, 0.75, 1.0, 1.5, 2.0] {
            let b = gaussian_blur(&t, r).unwrap();
            assert!((b.mean_f64() - t.mean_f64()).abs() < 1e-6);
            assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn negative_radius_is_rejected() {
        assert!(gaussian_blur(&Tensor::zeros([1, 1, 4, 4]), -0.5).is_err());
    }

    #[test]
    fn reflection_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
