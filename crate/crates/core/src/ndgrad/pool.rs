use super::grid::{strides, GradGrid};
use super::tape::Tape;
use crate::error::{shape_err, Result};

/// For every input element, the flat index of the output element it feeds.
fn pool_map(shape: &[usize]) -> Vec<usize> {
    let spatial = &shape[1..];
    let half: Vec<usize> = spatial.iter().map(|n| n / 2).collect();
    let out_st = strides(&half);
    let in_st = strides(spatial);
    let plane_in: usize = spatial.iter().product();
    let plane_out: usize = half.iter().product();
    let mut map = Vec::with_capacity(shape[0] * plane_in);
    for c in 0..shape[0] {
        for flat in 0..plane_in {
            let mut o = 0;
            for a in 0..spatial.len() {
                let i = flat / in_st[a] % spatial[a];
                o += i / 2 * out_st[a];
            }
            map.push(c * plane_out + o);
        }
    }
    map
}

impl Tape {
    /// Halves every spatial extent by averaging `2^D` blocks.
    pub fn average_pool2(&self, x: &GradGrid) -> Result<GradGrid> {
        if let Some(n) = x.spatial().iter().find(|n| *n % 2 == 1) {
            return shape_err(format!("average_pool2 needs even extents, got {n} in {:?}", x.shape()));
        }
        if x.spatial().is_empty() {
            return shape_err("average_pool2 needs at least one spatial axis");
        }
        let map = pool_map(x.shape());
        let w = 1.0 / (1usize << x.spatial().len()) as f32;
        let mut shape = vec![x.channels()];
        shape.extend(x.spatial().iter().map(|n| n / 2));
        let mut out = vec![0f32; shape.iter().product()];
        for (v, &o) in x.data().iter().zip(&map) {
            out[o] += v * w;
        }
        Ok(self.record(shape, out, &[x], move |g, _| {
            vec![Some(map.iter().map(|&o| g[o] * w).collect())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_means() {
        let t = Tape::new();
        let x = GradGrid::new(vec![1, 4], vec![1., 3., 5., 7.]).unwrap();
        assert_eq!(t.average_pool2(&x).unwrap().data(), &[2., 6.]);
    }

    #[test]
    fn block_means_2d() {
        let t = Tape::new();
        let x = GradGrid::new(vec![1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = t.average_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.5, 5.5]);
    }

    #[test]
    fn odd_extent_rejected() {
        let t = Tape::new();
        assert!(t.average_pool2(&GradGrid::zeros(&[1, 4, 3])).is_err());
    }
}
