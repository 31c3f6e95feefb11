use super::Transform;
use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{GradGrid, Outside, Tape};

/// Intensity grid `[C, n_1, .., n_D]` over the unit box `[0,1]^D`,
/// independently of resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub grid: GradGrid,
}

impl Image {
    pub fn new(grid: GradGrid) -> Result<Self> {
        if grid.shape().len() < 2 {
            return shape_err("an image needs a channel axis and at least one spatial axis");
        }
        if !grid.all_finite() {
            return Err(Error::Precondition("image intensities must be finite".into()));
        }
        Ok(Self { grid })
    }

    /// Single-channel image from row-major values.
    pub fn from_values(extents: &[usize], values: Vec<f32>) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(extents);
        Self::new(GradGrid::new(shape, values)?)
    }

    /// Samples `f` at the voxel centres.
    pub fn from_fn(extents: &[usize], f: impl Fn(&[f64]) -> f64) -> Self {
        let c = coords(extents);
        let m = c.spatial_len();
        let d = extents.len();
        let mut x = vec![0.0; d];
        let values = (0..m)
            .map(|p| {
                for a in 0..d {
                    x[a] = c.data()[a * m + p] as f64;
                }
                f(&x) as f32
            })
            .collect();
        Self::from_values(extents, values).expect("finite sampled image")
    }

    pub fn dim(&self) -> usize {
        self.grid.spatial().len()
    }

    pub fn extents(&self) -> &[usize] {
        self.grid.spatial()
    }

    pub fn values(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn detach(&self) -> Self {
        Self { grid: self.grid.detach() }
    }
}

/// Voxel-centre coordinates `[D, n_1, .., n_D]`: index `i` along an axis of
/// extent `n` maps to `(i + 0.5) / n`.
pub fn coords(extents: &[usize]) -> GradGrid {
    padded_coords(extents, 0)
}

/// Coordinates of a grid padded by `pad` voxels on every side, continuing
/// the spacing of the unpadded grid (so they extend beyond `[0,1]^D`).
pub fn padded_coords(extents: &[usize], pad: usize) -> GradGrid {
    let d = extents.len();
    let big: Vec<usize> = extents.iter().map(|n| n + 2 * pad).collect();
    let m: usize = big.iter().product();
    let mut data = vec![0f32; d * m];
    let mut idx = vec![0usize; d];
    for p in 0..m {
        let mut r = p;
        for a in (0..d).rev() {
            idx[a] = r % big[a];
            r /= big[a];
        }
        for a in 0..d {
            data[a * m + p] = ((idx[a] as f64 - pad as f64 + 0.5) / extents[a] as f64) as f32;
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(&big);
    GradGrid::new(shape, data).expect("consistent shape")
}

/// `image ∘ t` at the image's own resolution. Points mapped outside the unit
/// box read zero.
pub fn warp(tape: &Tape, image: &Image, t: &Transform) -> Result<Image> {
    if t.dim() != image.dim() {
        return shape_err(format!("{}-dimensional transform warps a {}-dimensional image", t.dim(), image.dim()));
    }
    let x = coords(image.extents());
    let y = t.evaluate(tape, &x)?;
    let grid = tape.sample_impl(&image.grid, &y, Outside::Zero)?;
    Ok(Image { grid })
}
