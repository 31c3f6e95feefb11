mod common;

use common::images::diffeo;
use equireg::attention_reg::{XiF, XIF_SEED};
use equireg::losses::{
    diffusion, gradicon, lncc, rotation_augmented_objective, training_objective, LossConfig, Regularizer,
};
use equireg::ndgrad::{GradGrid, Tape};
use equireg::transform::{compose, make_rotation, make_scale, make_translation, Extrapolation, Image, Transform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn random_image(seed: u64, n: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_values(&[n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lncc_stays_in_range(seed in 0u64..1_000_000) {
        let (a, b) = (random_image(seed, 12), random_image(seed ^ 0xabc, 12));
        let l = lncc(&Tape::new(), &a, &b, 5).unwrap().item();
        prop_assert!((0.0..=2.0).contains(&l), "{}", l);
        let same = lncc(&Tape::new(), &a, &a, 5).unwrap().item();
        prop_assert!(same.abs() < 1e-5, "{}", same);
    }

    #[test]
    fn diffusion_vanishes_on_translations(x in -0.3f64..0.3, y in -0.3f64..0.3) {
        let d = diffusion(&Tape::new(), &make_translation(&[x, y]), &[10, 10], None).unwrap().item();
        prop_assert!(d.abs() < 1e-6, "{}", d);
    }

    #[test]
    fn diffusion_is_non_negative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disp = GradGrid::new(vec![2, 6, 6], (0..72).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap();
        let t = Transform::displacement(disp, Extrapolation::ClipReflect).unwrap();
        prop_assert!(diffusion(&Tape::new(), &t, &[8, 8], None).unwrap().item() >= 0.0);
    }

    #[test]
    fn gradicon_vanishes_for_exact_inverses(angle in -PI..PI, s in 0.6f64..1.6, x in -0.2f64..0.2) {
        let phi = compose(&make_rotation(angle, [0.4, 0.55]), &compose(&make_scale(s, &[0.5, 0.5]), &make_translation(&[x, 0.1])).unwrap()).unwrap();
        let inv = phi.inverse().unwrap();
        let t = Tape::new();
        prop_assert!(gradicon(&t, &phi, &inv, &[10, 10], None).unwrap().item() < 1e-8);
        prop_assert!(gradicon(&t, &inv, &phi, &[10, 10], None).unwrap().item() < 1e-8);
    }
}

#[test]
fn rotation_augmented_objective_matches_plain_for_the_training_free_solver() {
    let n = 32;
    let (m, f) = (diffeo(n, 0.1), diffeo(n, -0.08));
    let xi = XiF::with_params(2, 512, 5.0, 0.5, XIF_SEED);
    let cfg = LossConfig::default();
    let t = Tape::new();
    let plain = training_objective(&t, &xi, &m, &f, &cfg).unwrap().total.item();
    for (kr, kq) in [(1, 0), (2, 3), (3, 1)] {
        let r = make_rotation(kr as f64 * PI / 2.0, [0.5, 0.5]);
        let q = make_rotation(kq as f64 * PI / 2.0, [0.5, 0.5]);
        let rot = rotation_augmented_objective(&t, &xi, &m, &f, &r, &q, &cfg).unwrap().total.item();
        assert!((rot - plain).abs() < 1e-3, "R={kr} Q={kq}: {rot} vs {plain}");
    }
}

#[test]
fn warmup_and_gradicon_objectives_share_similarity() {
    let n = 16;
    let (m, f) = (diffeo(n, 0.1), diffeo(n, -0.08));
    let xi = XiF::new(2);
    let t = Tape::new();
    let warm = training_objective(&t, &xi, &m, &f, &LossConfig { regularizer: Regularizer::Diffusion, ..Default::default() }).unwrap();
    let icon = training_objective(&t, &xi, &m, &f, &LossConfig::default()).unwrap();
    assert_eq!(warm.sim_fwd.item(), icon.sim_fwd.item());
    assert_eq!(warm.sim_bwd.item(), icon.sim_bwd.item());
    assert_ne!(warm.reg.item(), icon.reg.item());
}
