//! Transforms `[0,1]^D -> R^D`: analytic maps, displacement fields and their
//! compositions, evaluated lazily.

mod image;
mod io;

use std::fmt;
use std::sync::Arc;

pub use image::{coords, padded_coords, warp, Image};
pub use io::{parse_grid, read_grid, serialize_grid, write_grid};

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{GradGrid, PointMap, Tape};

/// How a displacement field is continued outside `[0,1]^D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extrapolation {
    /// `x + d(clip(x))`.
    Clip,
    /// `x + 2 d(clip(x)) - d(reflect(x))`; keeps the Jacobian continuous
    /// across the boundary.
    ClipReflect,
}

#[derive(Clone)]
pub enum Transform {
    /// `x -> A x + b` with a constant row-major `A` and a possibly trainable `b`.
    Affine { linear: Vec<f64>, offset: GradGrid },
    Analytic(Arc<dyn PointMap>),
    /// Identity plus an interpolated `[D, n_1, .., n_D]` offset grid.
    DisplacementField { disp: GradGrid, mode: Extrapolation },
    /// `[phi, psi]` evaluates `phi(psi(x))`.
    Composite(Vec<Transform>),
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Affine { linear, offset } => {
                f.debug_struct("Affine").field("linear", linear).field("offset", &offset.data()).finish()
            }
            Transform::Analytic(m) => f.debug_tuple("Analytic").field(m).finish(),
            Transform::DisplacementField { disp, mode } => f
                .debug_struct("DisplacementField")
                .field("shape", &disp.shape())
                .field("mode", mode)
                .finish(),
            Transform::Composite(parts) => f.debug_list().entries(parts).finish(),
        }
    }
}

fn identity_matrix(d: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        a[i * d + i] = 1.0;
    }
    a
}

impl Transform {
    pub fn identity(d: usize) -> Self {
        Transform::Affine { linear: identity_matrix(d), offset: GradGrid::zeros(&[d]) }
    }

    /// Affine map from a constant matrix and offset.
    pub fn affine(linear: Vec<f64>, offset: &[f64]) -> Result<Self> {
        let d = offset.len();
        if linear.len() != d * d {
            return shape_err(format!("affine map needs a {d}x{d} matrix"));
        }
        Ok(Transform::Affine {
            linear,
            offset: GradGrid::from_vec1(offset.iter().map(|&v| v as f32).collect()),
        })
    }

    pub fn displacement(disp: GradGrid, mode: Extrapolation) -> Result<Self> {
        if disp.channels() != disp.spatial().len() {
            return shape_err(format!("displacement field {:?} needs one channel per axis", disp.shape()));
        }
        Ok(Transform::DisplacementField { disp, mode })
    }

    pub fn dim(&self) -> usize {
        match self {
            Transform::Affine { offset, .. } => offset.len(),
            Transform::Analytic(m) => m.dim(),
            Transform::DisplacementField { disp, .. } => disp.channels(),
            Transform::Composite(parts) => parts.first().map_or(0, Transform::dim),
        }
    }

    /// Maps every point of `points` (`[D, ...]`). Gradients flow to the points
    /// and to any tracked grid inside the transform.
    pub fn evaluate(&self, tape: &Tape, points: &GradGrid) -> Result<GradGrid> {
        if points.channels() != self.dim() {
            return shape_err(format!(
                "{}-dimensional transform evaluated on {}-dimensional points",
                self.dim(),
                points.channels()
            ));
        }
        match self {
            Transform::Affine { linear, offset } => {
                let y = tape.linear_points(points, linear)?;
                tape.add_channel_bias(&y, offset)
            }
            Transform::Analytic(m) => tape.map_points(points, m.as_ref()),
            Transform::DisplacementField { disp, mode } => {
                let clipped = tape.clip01(points);
                let near = tape.grid_sample(disp, &clipped)?;
                match mode {
                    Extrapolation::Clip => tape.add(points, &near),
                    Extrapolation::ClipReflect => {
                        let far = tape.grid_sample(disp, &tape.reflect01(points))?;
                        let d = tape.sub(&tape.scale(&near, 2.0), &far)?;
                        tape.add(points, &d)
                    }
                }
            }
            Transform::Composite(parts) => {
                let mut y = points.clone();
                for t in parts.iter().rev() {
                    y = t.evaluate(tape, &y)?;
                }
                Ok(y)
            }
        }
    }

    /// Evaluates a single point without a tape.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = GradGrid::new(vec![x.len(), 1], x.iter().map(|&v| v as f32).collect())?;
        let y = self.evaluate(&Tape::new(), &p)?;
        Ok(y.data().iter().map(|&v| v as f64).collect())
    }

    /// Finite-difference Jacobian `[D*D, ...]` at `points`, channel `a*D + b`
    /// holding `d phi_a / d x_b`, with step `h` in domain units.
    pub fn jacobian(&self, tape: &Tape, points: &GradGrid, h: f32) -> Result<GradGrid> {
        let d = self.dim();
        if points.channels() != d {
            return shape_err("jacobian: point dimension mismatch");
        }
        let m = points.spatial_len();
        let mut columns = Vec::with_capacity(d);
        for b in 0..d {
            let mut plus = points.to_vec();
            let mut minus = points.to_vec();
            for p in 0..m {
                plus[b * m + p] += h;
                minus[b * m + p] -= h;
            }
            let fp = self.evaluate(tape, &GradGrid::new(points.shape().to_vec(), plus)?)?;
            let fm = self.evaluate(tape, &GradGrid::new(points.shape().to_vec(), minus)?)?;
            columns.push(tape.scale(&tape.sub(&fp, &fm)?, 0.5 / h));
        }
        let mut entries = Vec::with_capacity(d * d);
        for a in 0..d {
            for col in &columns {
                entries.push(tape.select_channels(col, a, 1)?);
            }
        }
        let refs: Vec<&GradGrid> = entries.iter().collect();
        tape.concat_channels(&refs)
    }

    /// Exact inverse of affine, invertible analytic and composite-of-such
    /// transforms; `None` for displacement fields.
    pub fn inverse(&self) -> Option<Transform> {
        match self {
            Transform::Affine { linear, offset } => {
                let d = offset.len();
                let inv = invert(linear, d)?;
                let b: Vec<f64> = offset.data().iter().map(|&v| v as f64).collect();
                let ob: Vec<f64> = (0..d).map(|r| -(0..d).map(|c| inv[r * d + c] * b[c]).sum::<f64>()).collect();
                Transform::affine(inv, &ob).ok()
            }
            Transform::Analytic(m) => m.inverse().map(Transform::Analytic),
            Transform::DisplacementField { .. } => None,
            Transform::Composite(parts) => {
                let inv: Option<Vec<Transform>> = parts.iter().rev().map(Transform::inverse).collect();
                inv.map(Transform::Composite)
            }
        }
    }

    /// Resamples onto a displacement field over a grid of `extents`, with
    /// values exact at voxel centres.
    pub fn to_displacement_field(&self, tape: &Tape, extents: &[usize], mode: Extrapolation) -> Result<Transform> {
        let x = coords(extents);
        let y = self.evaluate(tape, &x)?;
        Transform::displacement(tape.sub(&y, &x)?, mode)
    }
}

/// `outer ∘ inner`.
pub fn compose(outer: &Transform, inner: &Transform) -> Result<Transform> {
    if outer.dim() != inner.dim() {
        return Err(Error::Shape(format!(
            "cannot compose a {}-dimensional transform with a {}-dimensional one",
            outer.dim(),
            inner.dim()
        )));
    }
    let mut parts = Vec::new();
    for t in [outer, inner] {
        match t {
            Transform::Composite(p) => parts.extend(p.iter().cloned()),
            other => parts.push(other.clone()),
        }
    }
    Ok(Transform::Composite(parts))
}

fn invert(a: &[f64], d: usize) -> Option<Vec<f64>> {
    // Gauss-Jordan with partial pivoting
    let mut m = a.to_vec();
    let mut inv = identity_matrix(d);
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| m[i * d + col].abs().total_cmp(&m[j * d + col].abs()))?;
        if m[piv * d + col].abs() < 1e-12 {
            return None;
        }
        for k in 0..d {
            m.swap(col * d + k, piv * d + k);
            inv.swap(col * d + k, piv * d + k);
        }
        let p = m[col * d + col];
        for k in 0..d {
            m[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = m[r * d + col];
                for k in 0..d {
                    m[r * d + k] -= f * m[col * d + k];
                    inv[r * d + k] -= f * inv[col * d + k];
                }
            }
        }
    }
    Some(inv)
}

pub fn make_translation(r: &[f64]) -> Transform {
    Transform::Affine {
        linear: identity_matrix(r.len()),
        offset: GradGrid::from_vec1(r.iter().map(|&v| v as f32).collect()),
    }
}

/// Rotation by `angle` about `center`: `x -> R (x - c) + c` with
/// `R = [[cos, -sin], [sin, cos]]` acting on `(x_0, x_1)`. A quarter turn
/// about `(0.5, 0.5)` sends `(1, 0.5)` to `(0.5, 1)`.
pub fn make_rotation(angle: f64, center: [f64; 2]) -> Transform {
    let (s, c) = angle.sin_cos();
    let linear = vec![c, -s, s, c];
    let offset = [
        center[0] - (c * center[0] - s * center[1]),
        center[1] - (s * center[0] + c * center[1]),
    ];
    Transform::affine(linear, &offset).expect("2x2")
}

/// Isotropic scaling by `s` about `center`.
pub fn make_scale(s: f64, center: &[f64]) -> Transform {
    let d = center.len();
    let mut linear = identity_matrix(d);
    linear.iter_mut().for_each(|v| *v *= s);
    let offset: Vec<f64> = center.iter().map(|c| c - s * c).collect();
    Transform::affine(linear, &offset).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn zero_field_is_identity_everywhere() {
        for mode in [Extrapolation::Clip, Extrapolation::ClipReflect] {
            let t = Transform::displacement(GradGrid::zeros(&[1, 6]), mode).unwrap();
            for x in [-0.4, 0.0, 0.3, 1.0, 1.3] {
                assert!(close(&t.apply(&[x]).unwrap(), &[x], 1e-7));
            }
        }
    }

    #[test]
    fn constant_field_shifts_everywhere() {
        let t = Transform::displacement(GradGrid::full(&[1, 5], 0.2), Extrapolation::ClipReflect).unwrap();
        for x in [-0.5, 0.5, 1.7] {
            assert!(close(&t.apply(&[x]).unwrap(), &[x + 0.2], 1e-6));
        }
    }

    #[test]
    fn translations_add() {
        let t = compose(&make_translation(&[0.1, 0.0]), &make_translation(&[0.2, 0.0])).unwrap();
        assert!(close(&t.apply(&[0.0, 0.0]).unwrap(), &[0.3, 0.0], 1e-7));
    }

    #[test]
    fn quarter_turn_convention() {
        let r = make_rotation(std::f64::consts::FRAC_PI_2, [0.5, 0.5]);
        assert!(close(&r.apply(&[1.0, 0.5]).unwrap(), &[0.5, 1.0], 1e-6));
    }

    #[test]
    fn rotation_and_its_opposite_cancel() {
        let t = compose(&make_rotation(0.7, [0.4, 0.6]), &make_rotation(-0.7, [0.4, 0.6])).unwrap();
        for p in [[0.1, 0.9], [0.5, 0.5], [1.2, -0.3]] {
            assert!(close(&t.apply(&p).unwrap(), &p, 1e-6));
        }
    }

    #[test]
    fn scale_then_inverse() {
        let s = make_scale(0.8, &[0.5, 0.3]);
        let t = compose(&s.inverse().unwrap(), &s).unwrap();
        for p in [[0.1, 0.9], [0.7, 0.2]] {
            assert!(close(&t.apply(&p).unwrap(), &p, 1e-6));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(compose(&Transform::identity(1), &Transform::identity(2)).is_err());
    }

    #[test]
    fn jacobian_of_doubling() {
        let t = Transform::affine(vec![2.0, 0.0, 0.0, 2.0], &[0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let j = t.jacobian(&tape, &coords(&[3, 3]), 1.0 / 6.0).unwrap();
        assert_eq!(j.shape(), &[4, 3, 3]);
        for (ch, e) in [2.0, 0.0, 0.0, 2.0].iter().enumerate() {
            assert!(j.data()[ch * 9..(ch + 1) * 9].iter().all(|v| (v - e).abs() < 1e-5));
        }
    }

    #[test]
    fn jacobian_channel_order() {
        // phi(x) = (x0 + 3 x1, x1)
        let t = Transform::affine(vec![1.0, 3.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        let j = t.jacobian(&Tape::new(), &coords(&[2, 2]), 0.25).unwrap();
        assert!((j.data()[4] - 3.0).abs() < 1e-5);
        assert!(j.data()[8].abs() < 1e-5);
    }

    #[test]
    fn field_inverse_is_unknown() {
        let t = Transform::displacement(GradGrid::zeros(&[1, 4]), Extrapolation::Clip).unwrap();
        assert!(t.inverse().is_none());
    }
}
