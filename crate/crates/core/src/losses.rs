//! Similarity, regularisers and the symmetric training objective.

use crate::combinators::RegistrationAlgorithm;
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{AdamState, GradGrid, Tape};
use crate::transform::{compose, coords, warp, Image, Transform};

/// Floor added to local variances (and covariance) in LNCC.
pub const LNCC_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    Diffusion,
    GradIcon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f32,
    pub window: usize,
    pub regularizer: Regularizer,
    /// Finite-difference step in domain units; `None` means half a voxel of
    /// the sample grid.
    pub jacobian_step: Option<f32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.5, window: 5, regularizer: Regularizer::GradIcon, jacobian_step: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!("LNCC window must be odd and at least 3, got {}", self.window)));
        }
        Ok(())
    }
}

/// Per-channel box mean over a `window`-wide cube, zero padded.
fn box_mean(tape: &Tape, x: &GradGrid, window: usize) -> Result<GradGrid> {
    let c = x.channels();
    let d = x.spatial().len();
    let taps = window.pow(d as u32);
    let mut shape = vec![c, c];
    shape.extend(std::iter::repeat(window).take(d));
    let mut k = vec![0.0; c * c * taps];
    for ch in 0..c {
        let base = (ch * c + ch) * taps;
        k[base..base + taps].iter_mut().for_each(|v| *v = 1.0 / taps as f32);
    }
    tape.conv(x, &GradGrid::new(shape, k)?, 1)
}

/// `1 - mean((cov + ε) / sqrt((var_a + ε)(var_b + ε)))` with local box
/// statistics. Lies in `[0, 2]`; identical images give exactly 0.
pub fn lncc(tape: &Tape, a: &Image, b: &Image, window: usize) -> Result<GradGrid> {
    if a.grid.shape() != b.grid.shape() {
        return shape_err(format!("LNCC of {:?} against {:?}", a.grid.shape(), b.grid.shape()));
    }
    let (x, y) = (&a.grid, &b.grid);
    let mx = box_mean(tape, x, window)?;
    let my = box_mean(tape, y, window)?;
    let mxx = box_mean(tape, &tape.mul(x, x)?, window)?;
    let myy = box_mean(tape, &tape.mul(y, y)?, window)?;
    let mxy = box_mean(tape, &tape.mul(x, y)?, window)?;
    let var_x = tape.relu(&tape.sub(&mxx, &tape.square(&mx))?);
    let var_y = tape.relu(&tape.sub(&myy, &tape.square(&my))?);
    let cov = tape.sub(&mxy, &tape.mul(&mx, &my)?)?;
    let denom = tape.mul(&tape.add_scalar(&var_x, LNCC_EPS), &tape.add_scalar(&var_y, LNCC_EPS))?;
    let ncc = tape.mul(&tape.add_scalar(&cov, LNCC_EPS), &tape.recip_eps(&tape.sqrt(&denom), 0.0))?;
    Ok(tape.add_scalar(&tape.scale(&tape.mean(&ncc), -1.0), 1.0))
}

fn one_voxel(extents: &[usize]) -> f32 {
    extents.iter().map(|&n| 1.0 / n as f32).fold(f32::INFINITY, f32::min)
}

/// Voxel centres off the outermost layer, so that central differences of
/// one voxel only read centres.
fn inner_centres(tape: &Tape, extents: &[usize]) -> Result<GradGrid> {
    let all = coords(extents);
    if extents.iter().any(|&n| n < 3) {
        return Ok(all);
    }
    let inner: Vec<usize> = extents.iter().map(|&n| n - 2).collect();
    tape.crop_spatial(&all, &vec![1; extents.len()], &inner)
}

/// Mean of `‖J(x) - I‖²_F` over the inner voxel centres of `extents`, with
/// `J` from central differences of one voxel (or `step`).
pub fn diffusion(tape: &Tape, t: &Transform, extents: &[usize], step: Option<f32>) -> Result<GradGrid> {
    let d = t.dim();
    if extents.len() != d {
        return shape_err("diffusion: sample grid dimension mismatch");
    }
    let h = step.unwrap_or_else(|| one_voxel(extents));
    let j = t.jacobian(tape, &inner_centres(tape, extents)?, h)?;
    let minus_identity: Vec<f32> = (0..d * d).map(|i| if i % (d + 1) == 0 { -1.0 } else { 0.0 }).collect();
    let dev = tape.add_channel_bias(&j, &GradGrid::from_vec1(minus_identity))?;
    Ok(tape.scale(&tape.mean(&tape.square(&dev)), (d * d) as f32))
}

/// Diffusion penalty of `forward ∘ backward`.
pub fn gradicon(
    tape: &Tape,
    forward: &Transform,
    backward: &Transform,
    extents: &[usize],
    step: Option<f32>,
) -> Result<GradGrid> {
    diffusion(tape, &compose(forward, backward)?, extents, step)
}

/// Terms of the symmetric objective, each a scalar on the tape.
#[derive(Clone, Debug)]
pub struct Objective {
    pub sim_fwd: GradGrid,
    pub sim_bwd: GradGrid,
    pub reg: GradGrid,
    pub total: GradGrid,
}

/// Objective for given forward (`fixed -> moving`) and backward transforms.
pub fn objective_from_transforms(
    tape: &Tape,
    moving: &Image,
    fixed: &Image,
    forward: &Transform,
    backward: &Transform,
    cfg: &LossConfig,
) -> Result<Objective> {
    let sim_fwd = lncc(tape, &warp(tape, moving, forward)?, fixed, cfg.window)?;
    let sim_bwd = lncc(tape, &warp(tape, fixed, backward)?, moving, cfg.window)?;
    let reg = match cfg.regularizer {
        Regularizer::Diffusion => diffusion(tape, forward, fixed.extents(), cfg.jacobian_step)?,
        Regularizer::GradIcon => gradicon(tape, forward, backward, fixed.extents(), cfg.jacobian_step)?,
    };
    let sim = tape.add(&sim_fwd, &sim_bwd)?;
    let total = tape.add(&sim, &tape.scale(&reg, cfg.lambda))?;
    Ok(Objective { sim_fwd, sim_bwd, reg, total })
}

/// `LNCC(M∘Φ[M,F], F) + LNCC(F∘Φ[F,M], M) + λ·reg`.
pub fn training_objective(
    tape: &Tape,
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    cfg: &LossConfig,
) -> Result<Objective> {
    let forward = alg.register(tape, moving, fixed)?;
    let backward = alg.register(tape, fixed, moving)?;
    objective_from_transforms(tape, moving, fixed, &forward, &backward, cfg)
}

/// `R ∘ Φ[M∘R, F∘Q] ∘ Q⁻¹`, the registration seen through rotated inputs.
pub fn rotated_registration(
    tape: &Tape,
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    r: &Transform,
    q: &Transform,
) -> Result<Transform> {
    let q_inv = q.inverse().ok_or_else(|| Error::Precondition("Q needs an exact inverse".into()))?;
    let phi = alg.register(tape, &warp(tape, moving, r)?, &warp(tape, fixed, q)?)?;
    compose(&compose(r, &phi)?, &q_inv)
}

/// Training objective of the rotation-augmented registration; the backward
/// direction swaps the roles of `R` and `Q`.
pub fn rotation_augmented_objective(
    tape: &Tape,
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    r: &Transform,
    q: &Transform,
    cfg: &LossConfig,
) -> Result<Objective> {
    let forward = rotated_registration(tape, alg, moving, fixed, r, q)?;
    let backward = rotated_registration(tape, alg, fixed, moving, q, r)?;
    objective_from_transforms(tape, moving, fixed, &forward, &backward, cfg)
}

/// Result of per-pair refinement.
pub struct InstanceResult {
    pub transform: Transform,
    /// Objective before each step, then after the last one.
    pub losses: Vec<f32>,
    pub tuned: Box<dyn RegistrationAlgorithm>,
}

/// Adam on the training objective of a single pair, on a copy of the
/// parameters. The best parameters seen (by objective) are kept, so the
/// returned objective never exceeds the initial one.
pub fn instance_optimize(
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    steps: usize,
    lr: f32,
    cfg: &LossConfig,
) -> Result<InstanceResult> {
    let mut work = alg.box_clone();
    let mut best = work.clone();
    let mut best_loss = f32::INFINITY;
    let mut adam = AdamState::new(lr);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let tape = Tape::new();
        let obj = training_objective(&tape, work.as_ref(), moving, fixed, cfg)?;
        let loss = obj.total.item();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("objective became {loss} at instance step {step}")));
        }
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = work.clone();
        }
        if step == steps {
            break;
        }
        let grads = tape.backward(&obj.total)?;
        adam.step(work.params_mut(), &grads)?;
    }
    let transform = best.register(&Tape::new(), moving, fixed)?;
    Ok(InstanceResult { transform, losses, tuned: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinators::Identity;
    use crate::transform::{make_rotation, make_translation};

    fn wave(n: usize) -> Image {
        Image::from_fn(&[n, n], |x| (7.0 * x[0]).sin() + (5.0 * x[1]).cos() * x[0])
    }

    #[test]
    fn lncc_of_identical_images_is_zero() {
        let a = wave(12);
        assert!(lncc(&Tape::new(), &a, &a, 5).unwrap().item().abs() < 1e-6);
        let flat = Image::from_fn(&[8, 8], |_| 0.3);
        assert!(lncc(&Tape::new(), &flat, &flat, 5).unwrap().item().abs() < 1e-6);
    }

    #[test]
    fn lncc_of_negated_image_is_two() {
        let a = wave(12);
        let b = Image::new(Tape::new().scale(&a.grid, -1.0)).unwrap();
        let l = lncc(&Tape::new(), &a, &b, 5).unwrap().item();
        assert!((l - 2.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn diffusion_identities() {
        let t = Tape::new();
        assert!(diffusion(&t, &Transform::identity(2), &[8, 8], None).unwrap().item().abs() < 1e-9);
        assert!(diffusion(&t, &make_translation(&[0.1, -0.2]), &[8, 8], None).unwrap().item().abs() < 1e-6);
        let double = Transform::affine(vec![2.0, 0.0, 0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((diffusion(&t, &double, &[8, 8], None).unwrap().item() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn gradicon_identities() {
        let t = Tape::new();
        let r = make_rotation(0.3, [0.5, 0.5]);
        assert!(gradicon(&t, &r, &r.inverse().unwrap(), &[8, 8], None).unwrap().item() < 1e-8);
        let (f, b) = (make_translation(&[0.1]), make_translation(&[-0.05]));
        assert!(gradicon(&t, &f, &b, &[16], None).unwrap().item() < 1e-8);
    }

    #[test]
    fn identity_objective_is_plain_similarity() {
        let (m, f) = (wave(12), Image::from_fn(&[12, 12], |x| x[0] * x[1]));
        let t = Tape::new();
        let cfg = LossConfig::default();
        let obj = training_objective(&t, &Identity, &m, &f, &cfg).unwrap();
        assert!(obj.reg.item().abs() < 1e-7);
        let plain = lncc(&t, &m, &f, 5).unwrap().item() + lncc(&t, &f, &m, 5).unwrap().item();
        assert!((obj.total.item() - plain).abs() < 1e-6);
        let same = training_objective(&t, &Identity, &m, &m, &cfg).unwrap();
        assert!(same.total.item().abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { window: 4, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
