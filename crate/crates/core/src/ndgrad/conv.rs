//! Same-size dilated correlation with zero padding (the "conv" of deep
//! learning), lowered to a matrix product through an explicit patch matrix.

use std::sync::Arc;

use super::grid::GradGrid;
use super::tape::Tape;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dil: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

fn geometry(input: &GradGrid, kernel: &GradGrid, dilation: usize) -> Result<Geometry> {
    if dilation == 0 {
        return shape_err("dilation must be positive");
    }
    let (h, w) = match input.spatial() {
        [w] => (1, *w),
        [h, w] => (*h, *w),
        other => return shape_err(format!("conv supports 1 or 2 spatial axes, got {other:?}")),
    };
    let ks = kernel.shape();
    let (kh, kw) = match (input.spatial().len(), ks.len()) {
        (1, 3) => (1, ks[2]),
        (2, 4) => (ks[2], ks[3]),
        _ => return shape_err(format!("kernel {:?} does not fit input {:?}", ks, input.shape())),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return shape_err(format!("kernel spatial extents must be odd, got {:?}", &ks[2..]));
    }
    if ks[1] != input.channels() {
        return shape_err(format!(
            "kernel expects {} input channels, input has {}",
            ks[1],
            input.channels()
        ));
    }
    Ok(Geometry { cin: ks[1], cout: ks[0], h, w, kh, kw, dil: dilation })
}

/// Patch matrix `[cin * kh * kw, h * w]`.
fn im2col(x: &[f32], g: &Geometry) -> Vec<f32> {
    let (ch, cw) = ((g.kh / 2 * g.dil) as isize, (g.kw / 2 * g.dil) as isize);
    let p = g.pixels();
    let mut cols = vec![0.0; g.taps() * p];
    for c in 0..g.cin {
        let plane = &x[c * p..(c + 1) * p];
        for ki in 0..g.kh {
            let dy = (ki * g.dil) as isize - ch;
            for kj in 0..g.kw {
                let dx = (kj * g.dil) as isize - cw;
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (x0, x1) = (0.max(-dx) as usize, (g.w as isize).min(g.w as isize - dx).max(0) as usize);
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize || x0 >= x1 {
                        continue;
                    }
                    let src = sy as usize * g.w;
                    let d = &mut dst[y * g.w + x0..y * g.w + x1];
                    let s = &plane[(src as isize + x0 as isize + dx) as usize..(src as isize + x1 as isize + dx) as usize];
                    d.copy_from_slice(s);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f32], g: &Geometry) -> Vec<f32> {
    let (ch, cw) = ((g.kh / 2 * g.dil) as isize, (g.kw / 2 * g.dil) as isize);
    let p = g.pixels();
    let mut x = vec![0.0; g.cin * p];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            let dy = (ki * g.dil) as isize - ch;
            for kj in 0..g.kw {
                let dx = (kj * g.dil) as isize - cw;
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (x0, x1) = (0.max(-dx) as usize, (g.w as isize).min(g.w as isize - dx).max(0) as usize);
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize || x0 >= x1 {
                        continue;
                    }
                    let base = (c * p) as isize + sy * g.w as isize + dx;
                    for xx in x0..x1 {
                        x[(base + xx as isize) as usize] += src[y * g.w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `c[m x n] = a[m x k] * b[k x n]` on row-major buffers, with optional
/// transposition of either operand and accumulation into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the stride pairs above describe in-bounds row-major views of
    // `a` (m x k), `b` (k x n) and `c` (m x n), checked by the assertion.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Correlates `input` (`[cin, ...spatial]`) with `kernel`
    /// (`[cout, cin, ...k]`), zero padding so the spatial extents are kept.
    pub fn conv(&self, input: &GradGrid, kernel: &GradGrid, dilation: usize) -> Result<GradGrid> {
        let g = geometry(input, kernel, dilation)?;
        let cols = im2col(input.data(), &g);
        let mut out = vec![0.0; g.cout * g.pixels()];
        gemm(g.cout, g.taps(), g.pixels(), kernel.data(), false, &cols, false, &mut out, false);
        drop(cols);
        let mut shape = vec![g.cout];
        shape.extend_from_slice(input.spatial());
        let (xd, kd): (Arc<Vec<f32>>, Arc<Vec<f32>>) = (input.data_arc(), kernel.data_arc());
        Ok(self.record(shape, out, &[input, kernel], move |grad, needs| {
            let gx = needs[0].then(|| {
                let mut dcols = vec![0.0; g.taps() * g.pixels()];
                gemm(g.taps(), g.cout, g.pixels(), &kd, true, grad, false, &mut dcols, false);
                col2im(&dcols, &g)
            });
            let gk = needs[1].then(|| {
                let cols = im2col(&xd, &g);
                let mut dk = vec![0.0; g.cout * g.taps()];
                gemm(g.cout, g.pixels(), g.taps(), grad, false, &cols, true, &mut dk, false);
                dk
            });
            vec![gx, gk]
        }))
    }
}
