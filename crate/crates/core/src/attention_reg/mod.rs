//! Coordinate-attention registration.

mod encoder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use encoder::{group_averaged_encode, Encoder, EncoderConfig, RotationGroup};

use crate::combinators::{EquivarianceClass, RegistrationAlgorithm};
use crate::error::{shape_err, Result};
use crate::ndgrad::{GradGrid, Param, Tape};
use crate::transform::{coords, padded_coords, Extrapolation, Image, Transform};

/// Attention with fixed features as queries, moving features as keys and
/// moving coordinates as values. Each fixed voxel is sent to the centre of
/// mass of its attention mask; the result is stored as a displacement field
/// over the fixed grid.
pub fn coordinate_attention(
    tape: &Tape,
    moving_features: &GradGrid,
    fixed_features: &GradGrid,
    moving_coords: &GradGrid,
    scale: f32,
) -> Result<Transform> {
    if moving_features.spatial() != moving_coords.spatial() {
        return shape_err("moving features and coordinates must share a grid");
    }
    let d = moving_coords.channels();
    if fixed_features.spatial().len() != d {
        return shape_err(format!("{d}-dimensional coordinates for a {}D fixed grid", fixed_features.spatial().len()));
    }
    let target = tape.attention(fixed_features, moving_features, moving_coords, scale)?;
    let base = coords(fixed_features.spatial());
    Transform::displacement(tape.sub(&target, &base)?, Extrapolation::ClipReflect)
}

/// Embedding width of the training-free solver.
pub const XIF_CHANNELS: usize = 128;
/// Standard deviation of the embedding frequencies.
pub const XIF_SIGMA: f64 = 250.0;
/// Attention logit scale.
pub const XIF_BETA: f32 = 2.0;
pub const XIF_SEED: u64 = 0x5eed;

/// Training-free solver of `(I^M)^{-1} ∘ I^F` for images that are
/// themselves diffeomorphisms: a pointwise sine embedding
/// `e_k(v) = sin(ω_k·v + b_k)` followed by coordinate attention.
#[derive(Clone, Debug)]
pub struct XiF {
    pub channels: usize,
    /// `[m, C]` row-major.
    pub omega: Vec<f32>,
    pub phase: Vec<f32>,
    pub beta: f32,
}

impl XiF {
    /// Solver for `channels`-valued images with the calibrated constants.
    pub fn new(channels: usize) -> Self {
        Self::with_params(channels, XIF_CHANNELS, XIF_SIGMA, XIF_BETA, XIF_SEED)
    }

    pub fn with_params(channels: usize, m: usize, sigma: f64, beta: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let omega = (0..m * channels).map(|_| normal.sample(&mut rng) as f32).collect();
        let phase = (0..m).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
        Self { channels, omega, phase, beta }
    }

    pub fn embed(&self, tape: &Tape, image: &Image) -> Result<GradGrid> {
        let x = &image.grid;
        if x.channels() != self.channels {
            return shape_err(format!("embedding expects {} channels, image has {}", self.channels, x.channels()));
        }
        let m = self.phase.len();
        let mut kshape = vec![m, self.channels];
        kshape.extend(std::iter::repeat(1).take(image.dim()));
        let kernel = GradGrid::new(kshape, self.omega.clone())?;
        let lin = tape.conv(x, &kernel, 1)?;
        let lin = tape.add_channel_bias(&lin, &GradGrid::from_vec1(self.phase.clone()))?;
        Ok(tape.sin(&lin))
    }
}

impl RegistrationAlgorithm for XiF {
    fn name(&self) -> String {
        "XiF".into()
    }

    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        let km = self.embed(tape, moving)?;
        let qf = self.embed(tape, fixed)?;
        coordinate_attention(tape, &km, &qf, &coords(moving.extents()), self.beta)
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::WuTranslation
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

/// Trainable coordinate-attention registration: zero-pad both images,
/// encode with a shared translation-equivariant encoder, attend from the
/// cropped fixed features to the padded moving features, whose values are
/// coordinates continued into the padding.
#[derive(Clone, Debug)]
pub struct XiTheta {
    pub encoder: Encoder,
    pub pad: usize,
    pub logit_scale: f32,
    pub group: RotationGroup,
}

impl XiTheta {
    pub fn new(encoder: Encoder, pad: usize) -> Self {
        let logit_scale = 1.0 / (encoder.config.width as f32).sqrt();
        Self { encoder, pad, logit_scale, group: RotationGroup::Trivial }
    }

    fn features(&self, tape: &Tape, image: &Image) -> Result<GradGrid> {
        let padded = tape.pad_spatial(&image.grid, self.pad);
        group_averaged_encode(tape, &self.encoder, &padded, self.group)
    }

    fn queries_keys(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<(GradGrid, GradGrid)> {
        if moving.extents() != fixed.extents() {
            return shape_err(format!("image extents differ: {:?} vs {:?}", moving.extents(), fixed.extents()));
        }
        let keys = self.features(tape, moving)?;
        let fixed_all = self.features(tape, fixed)?;
        let offsets = vec![self.pad; fixed.dim()];
        let queries = tape.crop_spatial(&fixed_all, &offsets, fixed.extents())?;
        Ok((queries, keys))
    }

    /// Attention rows `[n_fixed, n_padded_moving]` and the key coordinates,
    /// for inspecting mask shape. Not differentiable.
    pub fn attention_masks(&self, moving: &Image, fixed: &Image) -> Result<(Vec<f32>, GradGrid)> {
        let tape = Tape::new();
        let (q, k) = self.queries_keys(&tape, moving, fixed)?;
        let w = tape.attention_weights(&q, &k, self.logit_scale)?;
        Ok((w, padded_coords(moving.extents(), self.pad)))
    }
}

impl RegistrationAlgorithm for XiTheta {
    fn name(&self) -> String {
        "XiTheta".into()
    }

    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        let (q, k) = self.queries_keys(tape, moving, fixed)?;
        let values = padded_coords(moving.extents(), self.pad);
        coordinate_attention(tape, &k, &q, &values, self.logit_scale)
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        self.encoder.named_params().into_iter().map(|(n, p)| (format!("xi.{n}"), p)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder.kernels.iter_mut().collect()
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::WuTranslation
    }

    fn boundary_radius(&self) -> usize {
        self.encoder.receptive_radius()
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}
