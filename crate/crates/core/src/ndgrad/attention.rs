use std::sync::Arc;

use super::conv::gemm;
use super::grid::GradGrid;
use super::tape::Tape;
use crate::error::{shape_err, Result};

fn as_tokens(g: &GradGrid) -> (usize, usize) {
    (g.channels(), g.spatial_len())
}

impl Tape {
    /// Dot-product attention in feature-major layout.
    ///
    /// `queries` is `[d, ...]` (one query per spatial position), `keys` is
    /// `[d, ...]` and `values` is `[c, ...]` with the same token count as
    /// `keys`. The result is `[c, ...]` over the query positions:
    /// `out[:, q] = sum_k softmax_k(scale * <Q[:, q], K[:, k]>) V[:, k]`.
    /// No positional embedding and no masking.
    pub fn attention(
        &self,
        queries: &GradGrid,
        keys: &GradGrid,
        values: &GradGrid,
        scale: f32,
    ) -> Result<GradGrid> {
        let (d, nq) = as_tokens(queries);
        let (dk, nk) = as_tokens(keys);
        let (c, nv) = as_tokens(values);
        if d != dk {
            return shape_err(format!("queries have {d} features, keys {dk}"));
        }
        if nk != nv {
            return shape_err(format!("{nk} keys but {nv} values"));
        }
        if !(scale > 0.0) {
            return shape_err("logit scale must be positive");
        }
        // logits [nq, nk] = Q^T K
        let mut probs = vec![0.0; nq * nk];
        gemm(nq, d, nk, queries.data(), true, keys.data(), false, &mut probs, false);
        for row in probs.chunks_mut(nk) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - m) * scale).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        // out [c, nq] = V P^T
        let mut out = vec![0.0; c * nq];
        gemm(c, nk, nq, values.data(), false, &probs, true, &mut out, false);

        let mut shape = vec![c];
        shape.extend_from_slice(queries.spatial());
        let probs = Arc::new(probs);
        let (qd, kd, vd) = (queries.data_arc(), keys.data_arc(), values.data_arc());
        Ok(self.record(shape, out, &[queries, keys, values], move |g, needs| {
            let gv = needs[2].then(|| {
                let mut gv = vec![0.0; c * nk];
                gemm(c, nq, nk, g, false, &probs, false, &mut gv, false);
                gv
            });
            if !needs[0] && !needs[1] {
                return vec![None, None, gv];
            }
            // dP [nq, nk] = G^T V
            let mut ds = vec![0.0; nq * nk];
            gemm(nq, c, nk, g, true, &vd, false, &mut ds, false);
            for (drow, prow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv, p) in drow.iter_mut().zip(prow) {
                    *dv = scale * p * (*dv - dot);
                }
            }
            let gq = needs[0].then(|| {
                // dQ [d, nq] = K dS^T
                let mut gq = vec![0.0; d * nq];
                gemm(d, nk, nq, &kd, false, &ds, true, &mut gq, false);
                gq
            });
            let gk = needs[1].then(|| {
                // dK [d, nk] = Q dS
                let mut gk = vec![0.0; d * nk];
                gemm(d, nq, nk, &qd, false, &ds, false, &mut gk, false);
                gk
            });
            vec![gq, gk, gv]
        }))
    }

    /// Attention weights for the given queries, `[nq, nk]` row-major. Not
    /// recorded; used for inspecting mask compactness.
    pub fn attention_weights(
        &self,
        queries: &GradGrid,
        keys: &GradGrid,
        scale: f32,
    ) -> Result<Vec<f32>> {
        let (d, nq) = as_tokens(queries);
        let (dk, nk) = as_tokens(keys);
        if d != dk {
            return shape_err(format!("queries have {d} features, keys {dk}"));
        }
        let mut probs = vec![0.0; nq * nk];
        gemm(nq, d, nk, queries.data(), true, keys.data(), false, &mut probs, false);
        for row in probs.chunks_mut(nk) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - m) * scale).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(probs)
    }
}
