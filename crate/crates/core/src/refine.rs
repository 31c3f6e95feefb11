//! Displacement-predicting refinement networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::combinators::{EquivarianceClass, RegistrationAlgorithm};
use crate::error::{shape_err, Result};
use crate::ndgrad::{GradGrid, Param, Tape};
use crate::transform::{Extrapolation, Image, Transform};

const SLOPE: f32 = 0.2;

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: Param,
    bias: Param,
}

impl ConvLayer {
    fn new(name: &str, dim: usize, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(dim));
        let n: usize = shape.iter().product();
        let std = gain * (2.0 / (cin * k.pow(dim as u32)) as f64).sqrt();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(rng) as f32).collect()
        };
        Self {
            kernel: Param::new(format!("{name}.w"), GradGrid::new(shape, data).expect("kernel shape")),
            bias: Param::new(format!("{name}.b"), GradGrid::zeros(&[cout])),
        }
    }

    fn forward(&self, tape: &Tape, x: &GradGrid) -> Result<GradGrid> {
        let y = tape.conv(x, &tape.param(&self.kernel), 1)?;
        tape.add_channel_bias(&y, &tape.param(&self.bias))
    }

    fn params(&self) -> [&Param; 2] {
        [&self.kernel, &self.bias]
    }
}

/// Three-level encoder-decoder over the concatenated pair, predicting a
/// displacement: `Φ[M,F](x) = x + U_θ[cat(M,F)](x)`. The last 1x1 layer
/// starts at zero, so a fresh network registers to the identity.
#[derive(Clone, Debug)]
pub struct DisplacementNet {
    dim: usize,
    layers: Vec<ConvLayer>,
}

impl DisplacementNet {
    pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

    /// `in_channels` per image; the network sees both images stacked.
    pub fn new(dim: usize, in_channels: usize, channels: [usize; 3], seed: u64) -> Self {
        Self::with_output_gain(dim, in_channels, channels, seed, 0.0)
    }

    /// As [`new`](Self::new) but with a random output layer scaled by `gain`,
    /// for probing untrained behaviour.
    pub fn with_output_gain(dim: usize, in_channels: usize, channels: [usize; 3], seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = channels;
        let layers = vec![
            ConvLayer::new("enc1a", dim, 2 * in_channels, c1, 3, 1.0, &mut rng),
            ConvLayer::new("enc1b", dim, c1, c1, 3, 1.0, &mut rng),
            ConvLayer::new("enc2", dim, c1, c2, 3, 1.0, &mut rng),
            ConvLayer::new("bottom", dim, c2, c3, 3, 1.0, &mut rng),
            ConvLayer::new("dec2", dim, c3 + c2, c2, 3, 1.0, &mut rng),
            ConvLayer::new("dec1", dim, c2 + c1, c1, 3, 1.0, &mut rng),
            ConvLayer::new("out", dim, c1, dim, 1, gain, &mut rng),
        ];
        Self { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw displacement grid `[D, ...]` for the pair.
    pub fn predict(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<GradGrid> {
        if moving.extents() != fixed.extents() {
            return shape_err(format!("resolutions differ: {:?} vs {:?}", moving.extents(), fixed.extents()));
        }
        if moving.dim() != self.dim {
            return shape_err(format!("{}D network given {}D images", self.dim, moving.dim()));
        }
        if let Some(n) = fixed.extents().iter().find(|n| *n % 4 != 0) {
            return shape_err(format!("extent {n} is not divisible by 4"));
        }
        let l = &self.layers;
        let act = |x: GradGrid| tape.leaky_relu(&x, SLOPE);
        let x = tape.concat_channels(&[&moving.grid, &fixed.grid])?;
        let e1 = act(l[0].forward(tape, &x)?);
        let e1 = act(l[1].forward(tape, &e1)?);
        let e2 = act(l[2].forward(tape, &tape.average_pool2(&e1)?)?);
        let b = act(l[3].forward(tape, &tape.average_pool2(&e2)?)?);
        let d2 = tape.concat_channels(&[&tape.upsample2(&b), &e2])?;
        let d2 = act(l[4].forward(tape, &d2)?);
        let d1 = tape.concat_channels(&[&tape.upsample2(&d2), &e1])?;
        let d1 = act(l[5].forward(tape, &d1)?);
        l[6].forward(tape, &d1)
    }
}

impl RegistrationAlgorithm for DisplacementNet {
    fn name(&self) -> String {
        "DisplacementNet".into()
    }

    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        Transform::displacement(self.predict(tape, moving, fixed)?, Extrapolation::ClipReflect)
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers.iter().flat_map(|l| l.params()).map(|p| (p.name.clone(), p)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect()
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::UuTranslation
    }

    /// Receptive-field radius in full-resolution voxels.
    fn boundary_radius(&self) -> usize {
        // two 3-wide convs at full res, one at half, one at quarter, the
        // decoder convs at half and full, plus pooling footprints
        2 + 2 + 4 + 2 + 1 + 3
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_is_identity() {
        let net = DisplacementNet::new(2, 1, [4, 4, 4], 0);
        let a = Image::from_fn(&[8, 8], |x| x[0] * x[1]);
        let b = Image::from_fn(&[8, 8], |x| x[0]);
        let t = net.register(&Tape::new(), &a, &b).unwrap();
        for p in [[0.2, 0.3], [0.9, 0.1]] {
            let y = t.apply(&p).unwrap();
            assert!((y[0] - p[0]).abs() < 1e-7 && (y[1] - p[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let net = DisplacementNet::new(1, 1, [2, 2, 2], 0);
        let a = Image::from_fn(&[8], |x| x[0]);
        let b = Image::from_fn(&[12], |x| x[0]);
        assert!(net.register(&Tape::new(), &a, &b).is_err());
    }

    #[test]
    fn parameters_are_named_and_ordered() {
        let mut net = DisplacementNet::new(2, 1, [2, 2, 2], 0);
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "enc1a.w");
        assert_eq!(names[13], "out.b");
        assert_eq!(net.params_mut().len(), 14);
    }
}
