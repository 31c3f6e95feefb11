//! Empirical equivariance audits: `Φ[I∘W, J∘U]` against `W⁻¹ ∘ Φ[I,J] ∘ U`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combinators::RegistrationAlgorithm;
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{GradGrid, Tape};
use crate::transform::{coords, make_rotation, make_scale, make_translation, warp, Image, Transform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformClass {
    /// Shift by the magnitude along a random unit direction.
    Translation,
    /// Shift by the magnitude along a random signed axis, so multiples of
    /// the voxel size stay on the grid.
    AxisTranslation,
    /// Rotation by ± the magnitude (radians) about the centre; 2D only.
    Rotation,
    /// Scaling by `1 ± magnitude` about the centre.
    Scale,
}

impl TransformClass {
    pub fn label(self) -> &'static str {
        match self {
            TransformClass::Translation => "translation",
            TransformClass::AxisTranslation => "axis-translation",
            TransformClass::Rotation => "rotation",
            TransformClass::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(TransformClass::Translation),
            "axis-translation" => Ok(TransformClass::AxisTranslation),
            "rotation" => Ok(TransformClass::Rotation),
            "scale" => Ok(TransformClass::Scale),
            _ => Err(Error::Config(format!("unknown transform class {s:?}"))),
        }
    }

    /// Largest displacement `max_x |W(x) - x|` over the unit box for a
    /// transform of this class and magnitude.
    fn reach(self, magnitude: f64, dim: usize) -> f64 {
        // centre-to-corner distance
        let radius = (dim as f64).sqrt() / 2.0;
        match self {
            TransformClass::Translation | TransformClass::AxisTranslation => magnitude,
            TransformClass::Rotation => 2.0 * (magnitude / 2.0).sin().abs() * radius,
            TransformClass::Scale => magnitude * radius,
        }
    }

    fn sample(self, magnitude: f64, dim: usize, rng: &mut ChaCha8Rng) -> Result<Transform> {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        match self {
            TransformClass::Translation => {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|a| *a *= magnitude / norm);
                Ok(make_translation(&v))
            }
            TransformClass::AxisTranslation => {
                let mut v = vec![0.0; dim];
                v[rng.random_range(0..dim)] = sign * magnitude;
                Ok(make_translation(&v))
            }
            TransformClass::Rotation => {
                if dim != 2 {
                    return Err(Error::Precondition("rotation audits are 2D only".into()));
                }
                Ok(make_rotation(sign * magnitude, [0.5, 0.5]))
            }
            TransformClass::Scale => {
                let s = 1.0 + sign * magnitude;
                if s <= 0.0 {
                    return Err(Error::Precondition(format!("scale magnitude {magnitude} is not invertible")));
                }
                Ok(make_scale(s, &vec![0.5; dim]))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EquivMode {
    /// Independent `W` and `U`.
    Wu,
    /// `W = U`.
    Uu,
}

impl EquivMode {
    pub fn label(self) -> &'static str {
        match self {
            EquivMode::Wu => "wu",
            EquivMode::Uu => "uu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wu" => Ok(EquivMode::Wu),
            "uu" => Ok(EquivMode::Uu),
            _ => Err(Error::Config(format!("unknown equivariance mode {s:?}"))),
        }
    }
}

/// Sweep specification for [`measure_equivariance`].
#[derive(Clone, Debug, PartialEq)]
pub struct EquivSpec {
    pub class: TransformClass,
    pub mode: EquivMode,
    /// Domain units (radians for rotations).
    pub magnitudes: Vec<f64>,
    pub seed: u64,
    /// In `Wu` mode, keep `U` the identity.
    pub identity_u: bool,
    /// Only score points where some channel of `J∘U` exceeds this value.
    pub foreground: Option<f32>,
}

impl EquivSpec {
    pub fn new(class: TransformClass, mode: EquivMode, magnitudes: Vec<f64>) -> Self {
        Self { class, mode, magnitudes, seed: 0, identity_u: false, foreground: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivRow {
    pub magnitude: f64,
    pub mean_defect: f64,
    pub max_defect: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    pub class: TransformClass,
    pub mode: EquivMode,
    pub seed: u64,
    /// Size of one voxel of the fixed grid in domain units.
    pub voxel: f64,
    pub rows: Vec<EquivRow>,
}

impl EquivReport {
    pub const CSV_HEADER: &'static str = "class,mode,magnitude,mean_defect,max_defect,n_points,seed";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.class.label(),
                self.mode.label(),
                r.magnitude,
                r.mean_defect,
                r.max_defect,
                r.n_points,
                self.seed
            );
        }
        s
    }

    pub fn worst_max_defect(&self) -> f64 {
        self.rows.iter().map(|r| r.max_defect).fold(0.0, f64::max)
    }

    /// Largest per-magnitude maximum defect, in voxels.
    pub fn worst_max_defect_voxels(&self) -> f64 {
        self.worst_max_defect() / self.voxel
    }
}

/// Mean and max defect and the number of scored points.
pub type DefectStats = (f64, f64, usize);

fn is_identity(t: &Transform) -> bool {
    match t {
        Transform::Affine { linear, offset } => {
            let d = offset.len();
            offset.data().iter().all(|&v| v == 0.0)
                && linear.iter().enumerate().all(|(i, &v)| v == if i % (d + 1) == 0 { 1.0 } else { 0.0 })
        }
        Transform::Composite(parts) => parts.iter().all(is_identity),
        _ => false,
    }
}

/// Voxel centres of `extents` at least `margin` away from the boundary,
/// optionally restricted to where `mask` has a channel above `threshold`.
fn interior_points(extents: &[usize], margin: f64, mask: Option<(&Image, f32)>) -> Result<GradGrid> {
    let c = coords(extents);
    let m = c.spatial_len();
    let d = extents.len();
    let mut keep = Vec::new();
    for p in 0..m {
        let inside = (0..d).all(|a| {
            let x = c.data()[a * m + p] as f64;
            x >= margin && x <= 1.0 - margin
        });
        let foreground = match mask {
            None => true,
            Some((img, th)) => (0..img.grid.channels()).any(|ch| img.values()[ch * m + p] > th),
        };
        if inside && foreground {
            keep.push(p);
        }
    }
    if keep.is_empty() {
        return Err(Error::Precondition(format!(
            "margin: no scoring points remain inside a boundary band of {margin:.4}"
        )));
    }
    let mut data = vec![0.0; d * keep.len()];
    for a in 0..d {
        for (i, &p) in keep.iter().enumerate() {
            data[a * keep.len() + i] = c.data()[a * m + p];
        }
    }
    GradGrid::new(vec![d, keep.len()], data)
}

/// Defect `‖Φ[I∘W, J∘U](x) − (W⁻¹∘Φ[I,J]∘U)(x)‖` over `points`. Identity
/// `W` or `U` are not applied at all, so `W = U = id` scores exactly zero
/// for any deterministic algorithm. `W⁻¹` is applied in double precision.
pub fn equivariance_defect(
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    w: &Transform,
    u: &Transform,
    points: &GradGrid,
) -> Result<DefectStats> {
    let tape = Tape::new();
    let w_id = is_identity(w);
    let u_id = is_identity(u);
    let mw = if w_id { moving.clone() } else { warp(&tape, moving, w)? };
    let fu = if u_id { fixed.clone() } else { warp(&tape, fixed, u)? };
    let lhs = alg.register(&tape, &mw, &fu)?.evaluate(&tape, points)?;
    let phi = alg.register(&tape, moving, fixed)?;
    let ux = if u_id { points.clone() } else { u.evaluate(&tape, points)? };
    let rhs = phi.evaluate(&tape, &ux)?;
    let w_inv = if w_id {
        None
    } else {
        Some(w.inverse().ok_or_else(|| Error::Precondition("W must be exactly invertible".into()))?)
    };
    let d = points.channels();
    let m = points.spatial_len();
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    let mut y = vec![0.0; d];
    for p in 0..m {
        for (a, ya) in y.iter_mut().enumerate() {
            *ya = rhs.data()[a * m + p] as f64;
        }
        let r = match &w_inv {
            None => y.clone(),
            Some(t) => apply_f64(t, &y),
        };
        let dist = (0..d)
            .map(|a| {
                let diff = lhs.data()[a * m + p] as f64 - r[a];
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        sum += dist;
        max = max.max(dist);
    }
    Ok((sum / m as f64, max, m))
}

/// Affine maps in double precision; others through the tape.
fn apply_f64(t: &Transform, x: &[f64]) -> Vec<f64> {
    match t {
        Transform::Affine { linear, offset } => {
            let d = x.len();
            (0..d)
                .map(|r| (0..d).map(|c| linear[r * d + c] * x[c]).sum::<f64>() + offset.data()[r] as f64)
                .collect()
        }
        Transform::Composite(parts) => parts.iter().rev().fold(x.to_vec(), |y, t| apply_f64(t, &y)),
        other => other.apply(x).expect("dimension checked"),
    }
}

fn mass(img: &Image) -> f64 {
    img.values().iter().map(|v| v.abs() as f64).sum()
}

/// Runs the sweep of `spec`. The boundary band excluded from scoring is
/// `max(|W|, |U|)` plus the algorithm's boundary radius.
pub fn measure_equivariance(
    alg: &dyn RegistrationAlgorithm,
    moving: &Image,
    fixed: &Image,
    spec: &EquivSpec,
) -> Result<EquivReport> {
    if moving.dim() != fixed.dim() {
        return shape_err("moving and fixed images differ in dimension");
    }
    let d = fixed.dim();
    let n = *fixed.extents().iter().min().expect("spatial axes") as f64;
    let radius = alg.boundary_radius() as f64 / n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.magnitudes.len());
    for &mag in &spec.magnitudes {
        if !(mag >= 0.0) {
            return Err(Error::Precondition(format!("magnitude {mag} must be non-negative")));
        }
        let (w, u) = if mag == 0.0 {
            (Transform::identity(d), Transform::identity(d))
        } else {
            let w = spec.class.sample(mag, d, &mut rng)?;
            let u = match spec.mode {
                EquivMode::Uu => w.clone(),
                EquivMode::Wu if spec.identity_u => Transform::identity(d),
                EquivMode::Wu => spec.class.sample(mag, d, &mut rng)?,
            };
            (w, u)
        };
        let tape = Tape::new();
        for (img, t, what) in [(moving, &w, "moving"), (fixed, &u, "fixed")] {
            if !is_identity(t) && mass(img) > 0.0 && mass(&warp(&tape, img, t)?) < 1e-6 * mass(img) {
                return Err(Error::Precondition(format!(
                    "margin: magnitude {mag} moves the {what} content outside the domain"
                )));
            }
        }
        let reach = if mag == 0.0 { 0.0 } else { spec.class.reach(mag, d) };
        let fu = if is_identity(&u) { fixed.clone() } else { warp(&tape, fixed, &u)? };
        let mask = spec.foreground.map(|th| (&fu, th));
        let points = interior_points(fixed.extents(), reach + radius, mask)?;
        let (mean, max, count) = equivariance_defect(alg, moving, fixed, &w, &u, &points)?;
        rows.push(EquivRow { magnitude: mag, mean_defect: mean, max_defect: max, n_points: count });
    }
    Ok(EquivReport { class: spec.class, mode: spec.mode, seed: spec.seed, voxel: 1.0 / n, rows })
}

/// Max interior deviation of `Φ[I, I∘U]` from `U`, which a `[W,U]`
/// equivariant algorithm with `Φ[I,I] = id` must make vanish.
pub fn guarantee_check(alg: &dyn RegistrationAlgorithm, image: &Image, u: &Transform) -> Result<f64> {
    let tape = Tape::new();
    let d = image.dim();
    let n = *image.extents().iter().min().expect("spatial axes") as f64;
    let reach = (0..d)
        .flat_map(|a| [0.0, 1.0].map(|v| (a, v)))
        .map(|(a, v)| {
            let mut x = vec![0.5; d];
            x[a] = v;
            let y = apply_f64(u, &x);
            y.iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    let points = interior_points(image.extents(), reach + alg.boundary_radius() as f64 / n, None)?;
    let fixed = warp(&tape, image, u)?;
    let got = alg.register(&tape, image, &fixed)?.evaluate(&tape, &points)?;
    let want = u.evaluate(&tape, &points)?;
    Ok(got.max_abs_diff(&want) as f64)
}

/// Tolerance for `I∘W = I` in [`symmetry_witness`], relative to `max |I|`.
pub const SYMMETRY_TOL: f32 = 1e-4;

/// Below this median `|det J|`, `Φ[I, I]` counts as collapsed.
pub const DEGENERATE_DET: f64 = 0.1;

fn median_abs_det(jac: &GradGrid, d: usize) -> f64 {
    let m = jac.spatial_len();
    let mut dets: Vec<f64> = (0..m)
        .map(|p| {
            let mut a: Vec<f64> = (0..d * d).map(|k| jac.data()[k * m + p] as f64).collect();
            let mut det = 1.0;
            for c in 0..d {
                let piv = (c..d).max_by(|&i, &j| a[i * d + c].abs().total_cmp(&a[j * d + c].abs())).expect("rows");
                if a[piv * d + c] == 0.0 {
                    return 0.0;
                }
                if piv != c {
                    for k in 0..d {
                        a.swap(piv * d + k, c * d + k);
                    }
                    det = -det;
                }
                det *= a[c * d + c];
                for r in c + 1..d {
                    let f = a[r * d + c] / a[c * d + c];
                    for k in c..d {
                        a[r * d + k] -= f * a[c * d + k];
                    }
                }
            }
            det.abs()
        })
        .collect();
    dets.sort_by(f64::total_cmp);
    dets[m / 2]
}

/// Mean `[W, id]` defect on a pair `(I, I)` with `I∘W = I`. Here
/// `Φ[I∘W, I] = Φ[I, I]` while equivariance demands `W⁻¹ ∘ Φ[I, I]`, so the
/// defect cannot vanish for a non-trivial `W` as long as `Φ[I, I]` is
/// invertible. An algorithm that collapses `Φ[I, I]` (for example onto the
/// centre of symmetry) escapes the argument; that is reported as a
/// precondition error rather than as a small defect.
pub fn symmetry_witness(alg: &dyn RegistrationAlgorithm, image: &Image, w: &Transform) -> Result<f64> {
    let tape = Tape::new();
    let warped = warp(&tape, image, w)?;
    let scale = image.values().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let err = warped.grid.max_abs_diff(&image.grid);
    if err > SYMMETRY_TOL * scale.max(f32::MIN_POSITIVE) && err > 0.0 {
        return Err(Error::Precondition(format!("image is not symmetric under W (max deviation {err})")));
    }
    let n = *image.extents().iter().min().expect("spatial axes") as f64;
    // both sides register the same pair, so no boundary band is needed
    let points = coords(image.extents());
    let jac = alg.register(&tape, image, image)?.jacobian(&tape, &points, (0.5 / n) as f32)?;
    let typical = median_abs_det(&jac, image.dim());
    if typical < DEGENERATE_DET {
        return Err(Error::Precondition(format!(
            "degenerate: Φ[I, I] is not invertible on this image (median |det J| = {typical:.2e})"
        )));
    }
    let (mean, _, _) = equivariance_defect(alg, image, image, w, &Transform::identity(image.dim()), &points)?;
    Ok(mean)
}
