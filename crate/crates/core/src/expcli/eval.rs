//! Dice evaluation and the capture-radius study.

use std::fmt::Write as _;

use super::dataset::Pair;
use crate::combinators::{two_step, EquivarianceClass, RegistrationAlgorithm};
use crate::error::{shape_err, Result};
use crate::losses::lncc;
use crate::ndgrad::{GradGrid, Param, Tape};
use crate::transform::{warp, Image, Transform};

/// `2|A∩B| / (|A| + |B|)` of the masks `a > threshold`, `b > threshold`;
/// two empty masks score 1.
pub fn dice(a: &Image, b: &Image, threshold: f32) -> Result<f64> {
    if a.grid.shape() != b.grid.shape() {
        return shape_err(format!("dice of {:?} against {:?}", a.grid.shape(), b.grid.shape()));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (p, q) = (x > threshold, y > threshold);
        inter += (p && q) as usize;
        sa += p as usize;
        sb += q as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Dice of `warp(M, Φ[M,F])` against `F` for every pair.
pub fn evaluate_dice(alg: &dyn RegistrationAlgorithm, pairs: &[Pair], threshold: f32) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let tape = Tape::new();
            let t = alg.register(&tape, &p.moving, &p.fixed)?;
            dice(&warp(&tape, &p.moving, &t)?, &p.fixed, threshold)
        })
        .collect()
}

pub const DICE_CSV_HEADER: &str = "pair_id,dice";

pub fn dice_csv(scores: &[f64]) -> String {
    let mut s = format!("{DICE_CSV_HEADER}\n");
    for (i, d) in scores.iter().enumerate() {
        let _ = writeln!(s, "{i},{d}");
    }
    s
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// `τ[M,F](r) = r + (t, 0, ..)`, ignoring both images.
#[derive(Clone, Debug)]
pub struct FixedTranslationNet {
    pub dim: usize,
    pub t: Param,
}

impl FixedTranslationNet {
    pub fn new(dim: usize, t: f32) -> Self {
        Self { dim, t: Param::new("t", GradGrid::from_vec1(vec![t])) }
    }
}

impl RegistrationAlgorithm for FixedTranslationNet {
    fn name(&self) -> String {
        "FixedTranslation".into()
    }

    fn register(&self, tape: &Tape, _: &Image, _: &Image) -> Result<Transform> {
        let t = tape.param(&self.t);
        let rest = GradGrid::zeros(&[self.dim - 1]);
        let offset = tape.concat_channels(&[&t, &rest])?;
        let mut linear = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            linear[i * self.dim + i] = 1.0;
        }
        Ok(Transform::Affine { linear, offset })
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("t".into(), &self.t)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.t]
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::None
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeRow {
    pub t: f64,
    pub loss_tau: f64,
    pub loss_two: f64,
    pub grad_tau: f64,
    pub grad_two: f64,
}

pub const LANDSCAPE_CSV_HEADER: &str = "t,loss_tau,loss_two,grad_tau,grad_two";

pub fn landscape_csv(rows: &[LandscapeRow]) -> String {
    let mut s = format!("{LANDSCAPE_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.t, r.loss_tau, r.loss_two, r.grad_tau, r.grad_two);
    }
    s
}

fn loss_and_grad(alg: &dyn RegistrationAlgorithm, tau: &FixedTranslationNet, p: &Pair, window: usize) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let t = alg.register(&tape, &p.moving, &p.fixed)?;
    let loss = lncc(&tape, &warp(&tape, &p.moving, &t)?, &p.fixed, window)?;
    let grads = tape.backward(&loss)?;
    let g = grads.param(&tau.t).map_or(0.0, |g| g[0] as f64);
    Ok((loss.item() as f64, g))
}

/// Mean over `pairs` of `LNCC(M ∘ τ[M,F], F)` and
/// `LNCC(M ∘ TwoStep{τ, Φ}[M,F], F)` with their derivatives in `t`.
pub fn capture_radius_study(
    phi: &dyn RegistrationAlgorithm,
    pairs: &[Pair],
    ts: &[f64],
    window: usize,
) -> Result<Vec<LandscapeRow>> {
    let dim = pairs.first().map_or(2, |p| p.fixed.dim());
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let tau = FixedTranslationNet::new(dim, t as f32);
        let two = two_step(Box::new(tau.clone()), phi.box_clone());
        let mut row = LandscapeRow { t, loss_tau: 0.0, loss_two: 0.0, grad_tau: 0.0, grad_two: 0.0 };
        for p in pairs {
            let (l, g) = loss_and_grad(&tau, &tau, p, window)?;
            let (l2, g2) = loss_and_grad(&two, &tau, p, window)?;
            row.loss_tau += l;
            row.grad_tau += g;
            row.loss_two += l2;
            row.grad_two += g2;
        }
        let k = pairs.len().max(1) as f64;
        row.loss_tau /= k;
        row.grad_tau /= k;
        row.loss_two /= k;
        row.grad_two /= k;
        rows.push(row);
    }
    Ok(rows)
}

/// Largest `r` such that every swept `t` with `0 < |t - t0| <= r` has a
/// gradient pointing back towards `t0`: `sign(t - t0) · dL/dt > 0`.
pub fn capture_radius(rows: &[LandscapeRow], t0: f64, grad: impl Fn(&LandscapeRow) -> f64) -> f64 {
    let mut by_dist: Vec<(f64, bool)> = rows
        .iter()
        .filter(|r| (r.t - t0).abs() > 1e-12)
        .map(|r| ((r.t - t0).abs(), (r.t - t0).signum() * grad(r) > 0.0))
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut radius = 0.0;
    let mut i = 0;
    while i < by_dist.len() {
        let d = by_dist[i].0;
        let mut ok = true;
        while i < by_dist.len() && (by_dist[i].0 - d).abs() < 1e-12 {
            ok &= by_dist[i].1;
            i += 1;
        }
        if !ok {
            break;
        }
        radius = d;
    }
    radius
}
