//! Test images shared by the integration suites.

use equireg::transform::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random bumps inside a disc of radius 0.25 about the centre, zero outside.
pub fn texture(n: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64)> =
        (0..12).map(|_| (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..1.0))).collect();
    Image::from_fn(&[n, n], |x| {
        let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
        if r2 > 0.25f64.powi(2) {
            return 0.0;
        }
        bumps.iter().map(|(a, b, h)| h * (-((x[0] - a).powi(2) + (x[1] - b).powi(2)) / 0.004).exp()).sum::<f64>().min(1.0)
    })
}

/// Gaussian blob of width `w` centred at `c`.
pub fn blob(n: usize, c: [f64; 2], w: f64) -> Image {
    Image::from_fn(&[n, n], |x| (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (w * w)).exp())
}

/// Radially symmetric disc indicator (exactly symmetric under quarter turns).
pub fn disk(n: usize, r: f64) -> Image {
    Image::from_fn(&[n, n], |x| if (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) <= r * r { 1.0 } else { 0.0 })
}

/// Two-channel smooth diffeomorphic image `x -> (x0 + a sin, x1 + a sin)`.
pub fn diffeo(n: usize, a: f64) -> Image {
    use std::f64::consts::PI;
    let one = |x: &[f64], k: usize| x[k] + a * (PI * x[1 - k]).sin() * (PI * x[k]).sin();
    let c0 = Image::from_fn(&[n, n], |x| one(x, 0));
    let c1 = Image::from_fn(&[n, n], |x| one(x, 1));
    let mut v = c0.values().to_vec();
    v.extend_from_slice(c1.values());
    Image::new(equireg::ndgrad::GradGrid::new(vec![2, n, n], v).unwrap()).unwrap()
}

/// Disc of radius 0.4 filled with concentric rings: rotationally symmetric
/// but not flat, so local features still vary along each ring's normal.
pub fn target(n: usize) -> Image {
    Image::from_fn(&[n, n], |x| {
        let r = ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt();
        if r > 0.4 {
            0.0
        } else {
            0.5 + 0.5 * (2.0 * std::f64::consts::PI * r / 0.08).cos()
        }
    })
}
