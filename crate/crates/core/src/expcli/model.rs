//! Trainable assemblies used by the experiments.

use super::config::Config;
use crate::attention_reg::{Encoder, EncoderConfig, XiTheta};
use crate::combinators::{assemble_carl, downsample, RegistrationAlgorithm};
use crate::error::{Error, Result};
use crate::ndgrad::Param;
use crate::refine::DisplacementNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// `TwoStep{Down{TwoStep{Down{Ξθ}, Ψ₁}}, Ψ₂}`.
    Carl,
    /// The same assembly with a displacement network `Ψ₀` in place of `Ξθ`.
    Displacement,
    /// `Down{Down{Ξθ}}`.
    Attention,
    /// A single full-resolution displacement network.
    Unet,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Carl => "carl",
            ModelKind::Displacement => "displacement",
            ModelKind::Attention => "attention",
            ModelKind::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "carl" => Ok(ModelKind::Carl),
            "displacement" => Ok(ModelKind::Displacement),
            "attention" => Ok(ModelKind::Attention),
            "unet" => Ok(ModelKind::Unet),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    /// Encoder width of `Ξθ`.
    pub width: usize,
    /// Zero padding of `Ξθ`, in coarse voxels.
    pub pad: usize,
    pub final_gain: f32,
    pub unet: [usize; 3],
    /// Whether the final refinement `Ψ₃` is present.
    pub with_final: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Carl,
            in_channels: 1,
            width: 32,
            pad: 4,
            final_gain: 6.0,
            unet: [8, 16, 32],
            with_final: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reads the `model.*` keys and `seed`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let s = cfg.section("model");
        let unet = s.get_list("unet", d.unet.to_vec())?;
        let unet: [usize; 3] =
            unet.try_into().map_err(|_| Error::Config("model.unet needs three channel counts".into()))?;
        let out = Self {
            kind: ModelKind::parse(s.raw("kind").unwrap_or(d.kind.label()))?,
            in_channels: s.get("in_channels", d.in_channels)?,
            width: s.get("width", d.width)?,
            pad: s.get("pad", d.pad)?,
            final_gain: s.get("final_gain", d.final_gain)?,
            unet,
            with_final: s.get("with_final", d.with_final)?,
            seed: cfg.get("seed", d.seed)?,
        };
        if out.width == 0 || out.in_channels == 0 || out.unet.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(out)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("model.kind", self.kind.label());
        c.set("model.in_channels", self.in_channels);
        c.set("model.width", self.width);
        c.set("model.pad", self.pad);
        c.set("model.final_gain", self.final_gain);
        c.set("model.unet", self.unet.map(|v| v.to_string()).join(","));
        c.set("model.with_final", self.with_final);
        c.set("seed", self.seed);
        c
    }
}

/// The parts of an assembly, kept separately so that parameters have stable
/// names (`xi.*`, `psi<k>.*`) when the final refinement is appended.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub xi: Option<XiTheta>,
    pub psis: Vec<DisplacementNet>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Self {
        let seed = config.seed;
        let unet = |k: u64| DisplacementNet::new(2, config.in_channels, config.unet, seed.wrapping_add(101 * (k + 1)));
        let xi = || {
            let mut enc = EncoderConfig::new(2, config.in_channels, config.width);
            enc.final_gain = config.final_gain;
            XiTheta::new(Encoder::new(enc, seed), config.pad)
        };
        let (xi, mut psis) = match config.kind {
            ModelKind::Carl => (Some(xi()), vec![unet(1), unet(2)]),
            ModelKind::Displacement => (None, vec![unet(0), unet(1), unet(2)]),
            ModelKind::Attention => (Some(xi()), vec![]),
            ModelKind::Unet => (None, vec![unet(0)]),
        };
        if config.with_final && matches!(config.kind, ModelKind::Carl | ModelKind::Displacement) {
            psis.push(unet(3));
        }
        Self { config, xi, psis }
    }

    /// Adds the zero-initialised `Ψ₃` (no-op if present or not applicable).
    pub fn append_final(&mut self) {
        if self.config.with_final || !matches!(self.config.kind, ModelKind::Carl | ModelKind::Displacement) {
            return;
        }
        self.config.with_final = true;
        let seed = self.config.seed.wrapping_add(101 * 4);
        self.psis.push(DisplacementNet::new(2, self.config.in_channels, self.config.unet, seed));
    }

    pub fn assemble(&self) -> Box<dyn RegistrationAlgorithm> {
        let boxed = |p: &DisplacementNet| -> Box<dyn RegistrationAlgorithm> { Box::new(p.clone()) };
        match self.config.kind {
            ModelKind::Carl | ModelKind::Displacement => {
                let (first, rest) = match &self.xi {
                    Some(xi) => (Box::new(xi.clone()) as Box<dyn RegistrationAlgorithm>, &self.psis[..]),
                    None => (boxed(&self.psis[0]), &self.psis[1..]),
                };
                assemble_carl(first, rest.iter().map(boxed).collect(), self.config.with_final)
                    .expect("model holds enough refinement networks")
            }
            ModelKind::Attention => {
                let xi = self.xi.as_ref().expect("attention model has Ξθ");
                Box::new(downsample(Box::new(downsample(Box::new(xi.clone())))))
            }
            ModelKind::Unet => boxed(&self.psis[0]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        if let Some(xi) = &self.xi {
            v.extend(xi.named_params());
        }
        let offset = if self.xi.is_some() { 1 } else { 0 };
        for (k, p) in self.psis.iter().enumerate() {
            v.extend(p.named_params().into_iter().map(|(n, q)| (format!("psi{}.{n}", k + offset), q)));
        }
        v
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(xi) = &mut self.xi {
            v.extend(xi.params_mut());
        }
        for p in &mut self.psis {
            v.extend(p.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_stable_when_final_is_appended() {
        let mut m = Model::new(ModelConfig { unet: [2, 2, 2], width: 4, ..Default::default() });
        let before: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        m.append_final();
        let after: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(&after[..before.len()], &before[..]);
        assert!(after.last().unwrap().starts_with("psi3."));
        assert_eq!(m.params_mut().len(), after.len());
        assert_eq!(m.assemble().named_params().len(), after.len());
    }

    #[test]
    fn config_round_trip() {
        let c = ModelConfig { kind: ModelKind::Displacement, with_final: true, ..Default::default() };
        assert_eq!(ModelConfig::from_config(&c.to_config()).unwrap(), c);
    }
}
