use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::ndgrad::{GradGrid, Param, Tape};

/// Rotation group averaged over by [`group_averaged_encode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationGroup {
    Trivial,
    /// `{id, π}`.
    HalfTurn,
    /// The four quarter turns.
    QuarterTurns,
}

impl RotationGroup {
    fn turns(self) -> &'static [i32] {
        match self {
            RotationGroup::Trivial => &[0],
            RotationGroup::HalfTurn => &[0, 2],
            RotationGroup::QuarterTurns => &[0, 1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub in_channels: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
    pub leaky_slope: f32,
    /// Multiplies the He initialisation of the last layer.
    pub final_gain: f32,
}

impl EncoderConfig {
    pub const DILATIONS: [usize; 6] = [1, 1, 2, 4, 8, 1];

    pub fn new(dim: usize, in_channels: usize, width: usize) -> Self {
        Self {
            dim,
            in_channels,
            width,
            dilations: Self::DILATIONS.to_vec(),
            leaky_slope: 0.2,
            final_gain: 1.0,
        }
    }

    /// Inserts the additional dilation-8 block used by the rotation variant.
    pub fn with_extra_dilation8(mut self) -> Self {
        let last = self.dilations.len() - 1;
        self.dilations.insert(last, 8);
        self
    }
}

/// Bias-free stack of same-size 3-wide convolutions with leaky ReLU.
/// Without biases a zero region away from content encodes to zero.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub kernels: Vec<Param>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config.dilations.len();
        let kernels = (0..layers)
            .map(|l| {
                let cin = if l == 0 { config.in_channels } else { config.width };
                let taps = 3usize.pow(config.dim as u32);
                let mut std = (2.0 / (cin * taps) as f64).sqrt();
                if l + 1 == layers {
                    std *= config.final_gain as f64;
                }
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut shape = vec![config.width, cin];
                shape.extend(std::iter::repeat(3).take(config.dim));
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                Param::new(format!("conv{l}"), GradGrid::new(shape, data).expect("kernel shape"))
            })
            .collect();
        Self { config, kernels }
    }

    /// Sum of dilations: how far a voxel's features see.
    pub fn receptive_radius(&self) -> usize {
        self.config.dilations.iter().sum()
    }

    pub fn encode(&self, tape: &Tape, x: &GradGrid) -> Result<GradGrid> {
        if x.spatial().len() != self.config.dim {
            return shape_err(format!("{}D encoder applied to a {}D grid", self.config.dim, x.spatial().len()));
        }
        let mut h = x.clone();
        for (k, &dil) in self.kernels.iter().zip(&self.config.dilations) {
            h = tape.conv(&h, &tape.param(k), dil)?;
            h = tape.leaky_relu(&h, self.config.leaky_slope);
        }
        Ok(h)
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.kernels.iter().map(|p| (p.name.clone(), p)).collect()
    }
}

/// `E'(I) = 1/|G| Σ_g g⁻¹ E(g I)` over axis-aligned rotations of a square 2D
/// grid. `E'` commutes with every rotation in `G`.
pub fn group_averaged_encode(
    tape: &Tape,
    encoder: &Encoder,
    x: &GradGrid,
    group: RotationGroup,
) -> Result<GradGrid> {
    if group == RotationGroup::Trivial {
        return encoder.encode(tape, x);
    }
    let sp = x.spatial();
    if sp.len() != 2 || sp[0] != sp[1] {
        return shape_err(format!("group averaging needs a square 2D grid, got {sp:?}"));
    }
    let turns = group.turns();
    let mut acc: Option<GradGrid> = None;
    for &k in turns {
        let e = encoder.encode(tape, &tape.rot90(x, k)?)?;
        let back = tape.rot90(&e, -k)?;
        acc = Some(match acc {
            None => back,
            Some(a) => tape.add(&a, &back)?,
        });
    }
    Ok(tape.scale(&acc.expect("non-empty group"), 1.0 / turns.len() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_keeps_extents() {
        let enc = Encoder::new(EncoderConfig::new(2, 1, 4), 0);
        let y = enc.encode(&Tape::new(), &GradGrid::full(&[1, 7, 5], 1.0)).unwrap();
        assert_eq!(y.shape(), &[4, 7, 5]);
        assert_eq!(enc.receptive_radius(), 17);
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        let enc = Encoder::new(EncoderConfig::new(1, 1, 3), 1);
        let y = enc.encode(&Tape::new(), &GradGrid::zeros(&[1, 9])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trivial_group_is_plain_encoder() {
        let enc = Encoder::new(EncoderConfig::new(2, 1, 3), 2);
        let x = GradGrid::new(vec![1, 4, 4], (0..16).map(|v| (v as f32 * 0.7).sin()).collect()).unwrap();
        let t = Tape::new();
        assert_eq!(
            group_averaged_encode(&t, &enc, &x, RotationGroup::Trivial).unwrap(),
            enc.encode(&t, &x).unwrap()
        );
    }

    #[test]
    fn extra_block_goes_before_the_last_layer() {
        let c = EncoderConfig::new(2, 1, 8).with_extra_dilation8();
        assert_eq!(c.dilations, vec![1, 1, 2, 4, 8, 8, 1]);
    }

    #[test]
    fn non_square_rejected() {
        let enc = Encoder::new(EncoderConfig::new(2, 1, 2), 3);
        assert!(group_averaged_encode(&Tape::new(), &enc, &GradGrid::zeros(&[1, 4, 6]), RotationGroup::HalfTurn).is_err());
    }
}
