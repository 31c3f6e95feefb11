//! Operations on point grids (`[D, ...]`, one coordinate vector per site).

use std::fmt;
use std::sync::Arc;

use super::grid::GradGrid;
use super::tape::Tape;
use crate::error::{shape_err, Result};

/// Smooth map `R^D -> R^D` evaluated outside the tape, with its Jacobian so
/// that gradients can flow through the points.
pub trait PointMap: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn apply(&self, x: &[f64]) -> Vec<f64>;

    /// Row-major `D x D` Jacobian at `x`. The default is a central difference.
    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let h = 1e-5;
        let mut j = vec![0.0; d * d];
        let mut xp = x.to_vec();
        for b in 0..d {
            xp[b] = x[b] + h;
            let fp = self.apply(&xp);
            xp[b] = x[b] - h;
            let fm = self.apply(&xp);
            xp[b] = x[b];
            for a in 0..d {
                j[a * d + b] = (fp[a] - fm[a]) / (2.0 * h);
            }
        }
        j
    }

    /// Exact inverse, when known.
    fn inverse(&self) -> Option<Arc<dyn PointMap>> {
        None
    }
}

impl Tape {
    /// `y = A x` for every point, with a constant row-major `D x D` matrix.
    pub fn linear_points(&self, points: &GradGrid, linear: &[f64]) -> Result<GradGrid> {
        let d = points.channels();
        if linear.len() != d * d {
            return shape_err(format!("{d}-dimensional points need a {d}x{d} matrix"));
        }
        let m = points.spatial_len();
        let a: Vec<f32> = linear.iter().map(|&v| v as f32).collect();
        let x = points.data();
        let mut out = vec![0f32; d * m];
        for r in 0..d {
            for c in 0..d {
                let w = a[r * d + c];
                if w == 0.0 {
                    continue;
                }
                for p in 0..m {
                    out[r * m + p] += w * x[c * m + p];
                }
            }
        }
        Ok(self.record(points.shape().to_vec(), out, &[points], move |g, _| {
            let mut gx = vec![0f32; d * m];
            for r in 0..d {
                for c in 0..d {
                    let w = a[r * d + c];
                    for p in 0..m {
                        gx[c * m + p] += w * g[r * m + p];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Applies an analytic map to every point.
    pub fn map_points(&self, points: &GradGrid, map: &dyn PointMap) -> Result<GradGrid> {
        let d = points.channels();
        if map.dim() != d {
            return shape_err(format!("{}-dimensional map applied to {d}-dimensional points", map.dim()));
        }
        let m = points.spatial_len();
        let x = points.data();
        let mut out = vec![0f32; d * m];
        let tracked = points.node().is_some_and(|n| n.tape == self.id());
        let mut jac = if tracked { Vec::with_capacity(d * d * m) } else { Vec::new() };
        let mut xp = vec![0f64; d];
        for p in 0..m {
            for a in 0..d {
                xp[a] = x[a * m + p] as f64;
            }
            let y = map.apply(&xp);
            for a in 0..d {
                out[a * m + p] = y[a] as f32;
            }
            if tracked {
                jac.extend(map.jacobian(&xp).into_iter().map(|v| v as f32));
            }
        }
        Ok(self.record(points.shape().to_vec(), out, &[points], move |g, _| {
            let mut gx = vec![0f32; d * m];
            for p in 0..m {
                let j = &jac[p * d * d..(p + 1) * d * d];
                for r in 0..d {
                    for c in 0..d {
                        gx[c * m + p] += j[r * d + c] * g[r * m + p];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Square;

    impl PointMap for Square {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] * x[0]]
        }
    }

    #[test]
    fn swap_axes() {
        let t = Tape::new();
        let p = GradGrid::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = t.linear_points(&p, &[0., 1., 1., 0.]).unwrap();
        assert_eq!(y.data(), &[3., 4., 1., 2.]);
    }

    #[test]
    fn mapped_points_carry_jacobian() {
        let t = Tape::new();
        let p = t.leaf(&GradGrid::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let y = t.map_points(&p, &Square).unwrap();
        assert_eq!(y.data(), &[2.25, 4.0]);
        let g = t.backward(&t.sum(&y)).unwrap();
        let gx = g.get(&p).unwrap();
        assert!((gx[0] - 3.0).abs() < 1e-4 && (gx[1] + 4.0).abs() < 1e-4);
    }
}
