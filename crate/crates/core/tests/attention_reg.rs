mod common;

use common::images::{disk, target, texture};
use equireg::attention_reg::{group_averaged_encode, Encoder, EncoderConfig, RotationGroup, XiF, XiTheta};
use equireg::combinators::RegistrationAlgorithm;
use equireg::equiv::{measure_equivariance, symmetry_witness, EquivMode, EquivSpec, TransformClass};
use equireg::ndgrad::Tape;
use equireg::transform::{coords, make_rotation, make_translation, warp, Image};
use std::f64::consts::PI;

/// Max abs error of the training-free solver on the cosine / wobbly-ramp pair.
fn analytic_error(xi: &XiF) -> f64 {
    let n = 256;
    let moving = Image::from_fn(&[n], |x| (PI * x[0] / 2.0).cos());
    let fixed = Image::from_fn(&[n], |x| x[0] + 0.07 * (3.0 * PI * x[0]).sin());
    let tape = Tape::new();
    let t = xi.register(&tape, &moving, &fixed).unwrap();
    let x = coords(&[n]);
    let y = t.evaluate(&tape, &x).unwrap();
    x.data()
        .iter()
        .zip(y.data())
        .map(|(&x, &y)| {
            let x = x as f64;
            let target = 2.0 / PI * (x + 0.07 * (3.0 * PI * x).sin()).acos();
            (y as f64 - target).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn analytic_example_within_tolerance() {
    let err = analytic_error(&XiF::new(1));
    println!("analytic error {err}");
    assert!(err <= 0.02);
}

fn untrained_xi(seed: u64) -> XiTheta {
    let mut cfg = EncoderConfig::new(2, 1, 32);
    cfg.final_gain = 6.0;
    XiTheta::new(Encoder::new(cfg, seed), 4)
}

#[test]
fn untrained_xi_theta_is_wu_translation_equivariant() {
    let n = 64;
    let (m, f) = (texture(n, 1), texture(n, 2));
    let mut spec = EquivSpec::new(TransformClass::AxisTranslation, EquivMode::Wu, (0..=4).map(|k| k as f64 / n as f64).collect());
    spec.foreground = Some(0.05);
    spec.seed = 3;
    let report = measure_equivariance(&untrained_xi(7), &m, &f, &spec).unwrap();
    assert!(report.worst_max_defect_voxels() <= 2.0, "{:?}", report.rows);
}

#[test]
fn xif_embedding_commutes_with_integer_translations() {
    let n = 32;
    let img = texture(n, 4);
    let xi = XiF::new(1);
    let t = Tape::new();
    let e = xi.embed(&t, &img).unwrap();
    for k in [1usize, 3] {
        let shift = make_translation(&[k as f64 / n as f64, 0.0]);
        let e_then_shift = warp(&t, &Image::new(e.clone()).unwrap(), &shift).unwrap();
        let shift_then_e = xi.embed(&t, &warp(&t, &img, &shift).unwrap()).unwrap();
        // rows whose source stays inside the grid
        let m = xi.phase.len();
        for c in 0..m {
            for i in 0..n - k {
                for j in 0..n {
                    let idx = (c * n + i) * n + j;
                    assert_eq!(e_then_shift.values()[idx], shift_then_e.data()[idx]);
                }
            }
        }
    }
}

#[test]
fn rotation_witness_on_a_disk_is_bounded_away_from_zero() {
    let n = 64;
    let w = make_rotation(PI / 2.0, [0.5, 0.5]);
    for image in [disk(n, 0.3), target(n)] {
        let defect = symmetry_witness(&untrained_xi(1), &image, &w).unwrap();
        assert!(defect > 0.05, "{defect}");
    }
    // the training-free solver only sees intensities, so it sends every
    // level set of a symmetric image to the centre of symmetry
    assert!(symmetry_witness(&XiF::new(1), &disk(n, 0.3), &w).is_err());
    assert!(symmetry_witness(&XiF::new(1), &target(n), &w).is_err());
}

#[test]
fn group_averaged_encoder_commutes_with_half_turns() {
    let enc = Encoder::new(EncoderConfig::new(2, 1, 8), 4);
    let t = Tape::new();
    let x = texture(24, 6).grid;
    let e = |g| group_averaged_encode(&t, &enc, &g, RotationGroup::HalfTurn).unwrap();
    let a = e(t.rot90(&x, 2).unwrap());
    let b = t.rot90(&e(x.clone()), 2).unwrap();
    let gap = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    assert!(gap < 1e-5, "{gap}");
    // the plain encoder is not rotation equivariant
    let plain = t.rot90(&enc.encode(&t, &x).unwrap(), 2).unwrap();
    let raw = enc.encode(&t, &t.rot90(&x, 2).unwrap()).unwrap();
    assert!(raw.data().iter().zip(plain.data()).any(|(p, q)| (p - q).abs() > 1e-3));
}
