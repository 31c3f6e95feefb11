use super::grid::{strides, GradGrid};
use super::tape::Tape;
use crate::error::{shape_err, Error, Result};

/// Slack allowed past the unit box before a sample point counts as outside.
pub const DOMAIN_SLACK: f32 = 1e-5;

/// How points outside `[0,1]^D` are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Outside {
    Reject,
    Zero,
}

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Interpolation stencil for one point: corner offsets into a channel plane,
/// their weights, and per-axis weight derivatives w.r.t. the coordinate.
struct Stencil {
    corners: usize,
    index: [usize; 1 << MAX_DIM],
    weight: [f32; 1 << MAX_DIM],
    dweight: [[f32; 1 << MAX_DIM]; MAX_DIM],
}

fn stencil(x: &[f32], extents: &[usize], st: &[usize]) -> Stencil {
    let d = extents.len();
    let mut lo = [0usize; MAX_DIM];
    let mut frac = [0f32; MAX_DIM];
    let mut slope = [0f32; MAX_DIM];
    for a in 0..d {
        let n = extents[a];
        let u = x[a] * n as f32 - 0.5;
        let max = (n - 1) as f32;
        if n == 1 || u <= 0.0 || u >= max {
            let c = u.clamp(0.0, max);
            lo[a] = (c as usize).min(n.saturating_sub(2));
            frac[a] = if n == 1 { 0.0 } else { c - lo[a] as f32 };
        } else {
            lo[a] = (u.floor() as usize).min(n - 2);
            frac[a] = u - lo[a] as f32;
            slope[a] = n as f32;
        }
    }
    let corners = 1usize << d;
    let mut s = Stencil {
        corners,
        index: [0; 1 << MAX_DIM],
        weight: [0.0; 1 << MAX_DIM],
        dweight: [[0.0; 1 << MAX_DIM]; MAX_DIM],
    };
    for c in 0..corners {
        let mut idx = 0;
        let mut w = 1.0;
        let mut valid = true;
        let mut factors = [0f32; MAX_DIM];
        for a in 0..d {
            let hi = (c >> a) & 1 == 1;
            let i = lo[a] + hi as usize;
            if i >= extents[a] {
                valid = false;
            }
            idx += i.min(extents[a] - 1) * st[a];
            factors[a] = if hi { frac[a] } else { 1.0 - frac[a] };
            w *= factors[a];
        }
        if !valid {
            // single-voxel axis: the upper corner carries no weight
            w = 0.0;
        }
        s.index[c] = idx;
        s.weight[c] = w;
        for a in 0..d {
            let sign = if (c >> a) & 1 == 1 { 1.0 } else { -1.0 };
            let mut dw = if valid { sign * slope[a] } else { 0.0 };
            for b in 0..d {
                if b != a {
                    dw *= factors[b];
                }
            }
            s.dweight[a][c] = dw;
        }
    }
    s
}

impl Stencil {
    fn apply(&self, plane: &[f32]) -> f32 {
        (0..self.corners).map(|c| self.weight[c] * plane[self.index[c]]).sum()
    }

    fn apply_d(&self, axis: usize, plane: &[f32]) -> f32 {
        (0..self.corners).map(|c| self.dweight[axis][c] * plane[self.index[c]]).sum()
    }
}

impl Tape {
    /// Multilinear interpolation of `values` (`[C, n_1, .., n_D]`) at
    /// `points` (`[D, ...]`, coordinates in `[0,1]^D`). Voxel `i` along an
    /// axis of extent `n` sits at `(i + 0.5) / n`; between the outermost
    /// centres and the domain edge the value is held constant.
    ///
    /// Result is `[C, ...]` over the point layout.
    pub fn grid_sample(&self, values: &GradGrid, points: &GradGrid) -> Result<GradGrid> {
        self.sample_impl(values, points, Outside::Reject)
    }

    pub(crate) fn sample_impl(
        &self,
        values: &GradGrid,
        points: &GradGrid,
        outside: Outside,
    ) -> Result<GradGrid> {
        let d = values.spatial().len();
        if d > MAX_DIM {
            return shape_err(format!("at most {MAX_DIM} spatial axes are supported"));
        }
        if points.channels() != d {
            return shape_err(format!(
                "{}-dimensional points cannot sample a {}-dimensional grid",
                points.channels(),
                d
            ));
        }
        let extents = values.spatial().to_vec();
        let st = strides(&extents);
        let plane = values.spatial_len();
        let c = values.channels();
        let m = points.spatial_len();
        let pd = points.data();
        let vd = values.data();

        let mut stencils: Vec<Option<Stencil>> = Vec::with_capacity(m);
        let mut x = vec![0f32; d];
        for p in 0..m {
            let mut inside = true;
            for a in 0..d {
                x[a] = pd[a * m + p];
                if !(x[a] >= -DOMAIN_SLACK && x[a] <= 1.0 + DOMAIN_SLACK) {
                    inside = false;
                }
            }
            if !inside {
                match outside {
                    Outside::Reject => {
                        return Err(Error::Precondition(format!(
                            "sample point {x:?} lies outside the unit box"
                        )))
                    }
                    Outside::Zero => {
                        stencils.push(None);
                        continue;
                    }
                }
            }
            stencils.push(Some(stencil(&x, &extents, &st)));
        }

        let mut out = vec![0f32; c * m];
        for (p, s) in stencils.iter().enumerate() {
            let Some(s) = s else { continue };
            for ch in 0..c {
                let base = ch * plane;
                out[ch * m + p] = s.apply(&vd[base..base + plane]);
            }
        }

        let mut shape = vec![c];
        shape.extend_from_slice(points.spatial());
        let vals = values.data_arc();
        Ok(self.record(shape, out, &[values, points], move |g, needs| {
            let gv = needs[0].then(|| {
                let mut gv = vec![0f32; c * plane];
                for (p, s) in stencils.iter().enumerate() {
                    let Some(s) = s else { continue };
                    for ch in 0..c {
                        let gp = g[ch * m + p];
                        for k in 0..s.corners {
                            gv[ch * plane + s.index[k]] += s.weight[k] * gp;
                        }
                    }
                }
                gv
            });
            let gp = needs[1].then(|| {
                let mut gp = vec![0f32; d * m];
                for (p, s) in stencils.iter().enumerate() {
                    let Some(s) = s else { continue };
                    for a in 0..d {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let base = ch * plane;
                            let dv = s.apply_d(a, &vals[base..base + plane]);
                            acc += dv * g[ch * m + p];
                        }
                        gp[a * m + p] = acc;
                    }
                }
                gp
            });
            vec![gv, gp]
        }))
    }
}
