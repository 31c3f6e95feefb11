//! Elementwise, reduction and shape primitives.

use std::sync::Arc;

use super::grid::{strides, GradGrid};
use super::tape::Tape;
use crate::error::{shape_err, Result};

fn same_shape(a: &GradGrid, b: &GradGrid, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    fn unary(
        &self,
        x: &GradGrid,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + Send + 'static,
    ) -> GradGrid {
        let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
        if !x.is_tracked() {
            return self.record(x.shape().to_vec(), out, &[], |_, _| vec![]);
        }
        let xs = x.data_arc();
        let ys = Arc::new(out.clone());
        self.record(x.shape().to_vec(), out, &[x], move |g, _| {
            let gx = g
                .iter()
                .zip(xs.iter().zip(ys.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, a: &GradGrid, b: &GradGrid) -> Result<GradGrid> {
        same_shape(a, b, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.record(a.shape().to_vec(), out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, a: &GradGrid, b: &GradGrid) -> Result<GradGrid> {
        same_shape(a, b, "sub")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.record(a.shape().to_vec(), out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, a: &GradGrid, b: &GradGrid) -> Result<GradGrid> {
        same_shape(a, b, "mul")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect()),
            ]
        }))
    }

    pub fn scale(&self, x: &GradGrid, c: f32) -> GradGrid {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: &GradGrid, c: f32) -> GradGrid {
        self.unary(x, |v| v + c, |_, _| 1.0)
    }

    pub fn square(&self, x: &GradGrid) -> GradGrid {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sin(&self, x: &GradGrid) -> GradGrid {
        self.unary(x, f32::sin, |x, _| x.cos())
    }

    pub fn leaky_relu(&self, x: &GradGrid, slope: f32) -> GradGrid {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self, x: &GradGrid) -> GradGrid {
        self.leaky_relu(x, 0.0)
    }

    /// Square root of non-negative input; negative entries read as zero.
    pub fn sqrt(&self, x: &GradGrid) -> GradGrid {
        self.unary(
            x,
            |v| v.max(0.0).sqrt(),
            |x, y| if x > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    /// `1 / (x + eps)`.
    pub fn recip_eps(&self, x: &GradGrid, eps: f32) -> GradGrid {
        self.unary(x, |v| 1.0 / (v + eps), |_, y| -y * y)
    }

    /// Clamps every entry to `[0, 1]`.
    pub fn clip01(&self, x: &GradGrid) -> GradGrid {
        self.unary(
            x,
            |v| v.clamp(0.0, 1.0),
            |x, _| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Mirrors entries across the nearest face of `[0, 1]`
    /// (`x < 0 -> -x`, `x > 1 -> 2 - x`), then clamps what is still outside.
    pub fn reflect01(&self, x: &GradGrid) -> GradGrid {
        fn r(v: f32) -> f32 {
            let m = if v < 0.0 {
                -v
            } else if v > 1.0 {
                2.0 - v
            } else {
                v
            };
            m.clamp(0.0, 1.0)
        }
        fn dr(v: f32) -> f32 {
            if v < 0.0 {
                if -v <= 1.0 {
                    -1.0
                } else {
                    0.0
                }
            } else if v > 1.0 {
                if 2.0 - v >= 0.0 {
                    -1.0
                } else {
                    0.0
                }
            } else {
                1.0
            }
        }
        self.unary(x, r, |x, _| dr(x))
    }

    pub fn sum(&self, x: &GradGrid) -> GradGrid {
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let n = x.len();
        self.record(vec![1], vec![s as f32], &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, x: &GradGrid) -> GradGrid {
        let n = x.len();
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        self.record(vec![1], vec![(s / n as f64) as f32], &[x], move |g, _| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: &GradGrid, axis: usize) -> Result<GradGrid> {
        if axis >= x.shape().len() {
            return shape_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
        }
        let shape = x.shape().to_vec();
        let st = strides(&shape);
        let (n, step) = (shape[axis], st[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner = step;
        let mut out = x.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let m = (0..n).map(|k| out[base + k * step]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (out[base + k * step] - m).exp();
                    out[base + k * step] = e;
                    z += e;
                }
                for k in 0..n {
                    out[base + k * step] /= z;
                }
            }
        }
        let ys = Arc::new(out.clone());
        Ok(self.record(shape, out, &[x], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f32 = (0..n).map(|k| g[base + k * step] * ys[base + k * step]).sum();
                    for k in 0..n {
                        let j = base + k * step;
                        gx[j] = ys[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Adds `bias[c]` to every entry of channel `c`.
    pub fn add_channel_bias(&self, x: &GradGrid, bias: &GradGrid) -> Result<GradGrid> {
        let c = x.channels();
        if bias.len() != c {
            return shape_err(format!("bias of {} entries for {} channels", bias.len(), c));
        }
        let m = x.spatial_len();
        let mut out = x.to_vec();
        for (ch, b) in bias.data().iter().enumerate() {
            out[ch * m..(ch + 1) * m].iter_mut().for_each(|v| *v += b);
        }
        Ok(self.record(x.shape().to_vec(), out, &[x, bias], move |g, needs| {
            let gb = needs[1].then(|| (0..c).map(|ch| g[ch * m..(ch + 1) * m].iter().sum()).collect());
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Multiplies channel `c` by `factor[c]`.
    pub fn mul_channel(&self, x: &GradGrid, factor: &GradGrid) -> Result<GradGrid> {
        let c = x.channels();
        if factor.len() != c {
            return shape_err(format!("factor of {} entries for {} channels", factor.len(), c));
        }
        let m = x.spatial_len();
        let mut out = x.to_vec();
        for (ch, f) in factor.data().iter().enumerate() {
            out[ch * m..(ch + 1) * m].iter_mut().for_each(|v| *v *= f);
        }
        let (xd, fd) = (x.data_arc(), factor.data_arc());
        Ok(self.record(x.shape().to_vec(), out, &[x, factor], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.to_vec();
                for ch in 0..c {
                    gx[ch * m..(ch + 1) * m].iter_mut().for_each(|v| *v *= fd[ch]);
                }
                gx
            });
            let gf = needs[1].then(|| {
                (0..c)
                    .map(|ch| {
                        let r = ch * m..(ch + 1) * m;
                        g[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            });
            vec![gx, gf]
        }))
    }

    /// Sums over the channel axis, keeping a single channel.
    pub fn channel_sum(&self, x: &GradGrid) -> GradGrid {
        let c = x.channels();
        let m = x.spatial_len();
        let mut out = vec![0.0; m];
        for ch in 0..c {
            out.iter_mut().zip(&x.data()[ch * m..(ch + 1) * m]).for_each(|(o, v)| *o += v);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        self.record(shape, out, &[x], move |g, _| {
            let mut gx = Vec::with_capacity(c * m);
            for _ in 0..c {
                gx.extend_from_slice(g);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, parts: &[&GradGrid]) -> Result<GradGrid> {
        let first = parts.first().ok_or_else(|| crate::Error::Shape("nothing to concat".into()))?;
        let spatial = first.spatial().to_vec();
        if parts.iter().any(|p| p.spatial() != spatial.as_slice()) {
            return shape_err("concat_channels: spatial extents differ");
        }
        let m: usize = spatial.iter().product();
        let counts: Vec<usize> = parts.iter().map(|p| p.channels()).collect();
        let mut out = Vec::with_capacity(counts.iter().sum::<usize>() * m);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![counts.iter().sum()];
        shape.extend_from_slice(&spatial);
        Ok(self.record(shape, out, parts, move |g, needs| {
            let mut offset = 0;
            counts
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let r = offset..offset + c * m;
                    offset += c * m;
                    need.then(|| g[r].to_vec())
                })
                .collect()
        }))
    }

    /// Channels `start..start + count`.
    pub fn select_channels(&self, x: &GradGrid, start: usize, count: usize) -> Result<GradGrid> {
        if start + count > x.channels() {
            return shape_err("select_channels out of range");
        }
        let m = x.spatial_len();
        let out = x.data()[start * m..(start + count) * m].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = count;
        let total = x.len();
        Ok(self.record(shape, out, &[x], move |g, _| {
            let mut gx = vec![0.0; total];
            gx[start * m..(start + count) * m].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Zero-pads every spatial axis by `pad` on both sides.
    pub fn pad_spatial(&self, x: &GradGrid, pad: usize) -> GradGrid {
        let spatial = x.spatial().to_vec();
        let padded: Vec<usize> = spatial.iter().map(|n| n + 2 * pad).collect();
        let offsets = vec![pad; spatial.len()];
        let mut shape = vec![x.channels()];
        shape.extend_from_slice(&padded);
        let map = window_map(&padded, &offsets, &spatial);
        let c = x.channels();
        let (big, small) = (padded.iter().product::<usize>(), spatial.iter().product::<usize>());
        let mut out = vec![0.0; c * big];
        for ch in 0..c {
            for (i, &j) in map.iter().enumerate() {
                out[ch * big + j] = x.data()[ch * small + i];
            }
        }
        self.record(shape, out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * small];
            for ch in 0..c {
                for (i, &j) in map.iter().enumerate() {
                    gx[ch * small + i] = g[ch * big + j];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Spatial window `offsets..offsets + size` of every channel.
    pub fn crop_spatial(&self, x: &GradGrid, offsets: &[usize], size: &[usize]) -> Result<GradGrid> {
        let spatial = x.spatial().to_vec();
        if offsets.len() != spatial.len()
            || size.len() != spatial.len()
            || offsets.iter().zip(size).zip(&spatial).any(|((o, s), n)| o + s > *n)
        {
            return shape_err(format!("crop {offsets:?}+{size:?} outside {spatial:?}"));
        }
        let map = window_map(&spatial, offsets, size);
        let c = x.channels();
        let (big, small) = (spatial.iter().product::<usize>(), size.iter().product::<usize>());
        let mut out = vec![0.0; c * small];
        for ch in 0..c {
            for (i, &j) in map.iter().enumerate() {
                out[ch * small + i] = x.data()[ch * big + j];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(size);
        Ok(self.record(shape, out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * big];
            for ch in 0..c {
                for (i, &j) in map.iter().enumerate() {
                    gx[ch * big + j] = g[ch * small + i];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour 2x upsampling of every spatial axis.
    pub fn upsample2(&self, x: &GradGrid) -> GradGrid {
        let spatial = x.spatial().to_vec();
        let big: Vec<usize> = spatial.iter().map(|n| 2 * n).collect();
        let src = upsample_map(&spatial);
        let c = x.channels();
        let (nb, ns) = (big.iter().product::<usize>(), spatial.iter().product::<usize>());
        let mut out = vec![0.0; c * nb];
        for ch in 0..c {
            for (j, &i) in src.iter().enumerate() {
                out[ch * nb + j] = x.data()[ch * ns + i];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(&big);
        self.record(shape, out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * ns];
            for ch in 0..c {
                for (j, &i) in src.iter().enumerate() {
                    gx[ch * ns + i] += g[ch * nb + j];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Rotates the two spatial axes of a square grid by `quarter_turns * 90°`
    /// as an exact permutation of voxels.
    pub fn rot90(&self, x: &GradGrid, quarter_turns: i32) -> Result<GradGrid> {
        let sp = x.spatial();
        if sp.len() != 2 || sp[0] != sp[1] {
            return shape_err(format!("rot90 needs a square 2D grid, got {:?}", sp));
        }
        let n = sp[0];
        let k = quarter_turns.rem_euclid(4);
        // out[i][j] = in[src(i, j)]
        let src: Vec<usize> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                let (si, sj) = match k {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                si * n + sj
            })
            .collect();
        let c = x.channels();
        let m = n * n;
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            for (j, &i) in src.iter().enumerate() {
                out[ch * m + j] = x.data()[ch * m + i];
            }
        }
        Ok(self.record(x.shape().to_vec(), out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * m];
            for ch in 0..c {
                for (j, &i) in src.iter().enumerate() {
                    gx[ch * m + i] = g[ch * m + j];
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Flat indices in a grid of extents `outer` for each voxel of the window
/// `offsets..offsets + inner`, in row-major order of the window.
fn window_map(outer: &[usize], offsets: &[usize], inner: &[usize]) -> Vec<usize> {
    let os = strides(outer);
    let n: usize = inner.iter().product();
    let is = strides(inner);
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut j = 0;
            for d in 0..inner.len() {
                let idx = rem / is[d];
                rem %= is[d];
                j += (idx + offsets[d]) * os[d];
            }
            j
        })
        .collect()
}

fn upsample_map(spatial: &[usize]) -> Vec<usize> {
    let big: Vec<usize> = spatial.iter().map(|n| 2 * n).collect();
    let bs = strides(&big);
    let ss = strides(spatial);
    let n: usize = big.iter().product();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut i = 0;
            for d in 0..big.len() {
                let idx = rem / bs[d];
                rem %= bs[d];
                i += (idx / 2) * ss[d];
            }
            i
        })
        .collect()
}
