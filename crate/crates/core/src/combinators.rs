//! Registration algorithms and the algebra that builds multi-step ones.

use crate::error::{shape_err, Error, Result};
use crate::ndgrad::{Param, Tape};
use crate::transform::{compose, make_translation, warp, Image, Transform};

/// Declared (not proven) equivariance of an algorithm. Advisory metadata; the
/// `equiv` harness measures the real thing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EquivarianceClass {
    /// Independent translations of moving and fixed image.
    WuTranslation,
    /// The same translation applied to both images.
    UuTranslation,
    None,
}

impl EquivarianceClass {
    fn then(self, second: Self) -> Self {
        use EquivarianceClass::*;
        match (self, second) {
            (WuTranslation, WuTranslation | UuTranslation) => WuTranslation,
            (UuTranslation, WuTranslation | UuTranslation) => UuTranslation,
            _ => None,
        }
    }
}

/// Anything mapping a `(moving, fixed)` image pair to a transform from fixed
/// to moving coordinates.
pub trait RegistrationAlgorithm: Send + Sync {
    fn name(&self) -> String;

    /// Gradients reach the algorithm's parameters through `tape`.
    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform>;

    /// Parameters with hierarchical names, in a stable order.
    fn named_params(&self) -> Vec<(String, &Param)> {
        Vec::new()
    }

    /// Same parameters and order as [`named_params`](Self::named_params).
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn equivariance(&self) -> EquivarianceClass;

    /// Width of the boundary band (in input voxels) where boundary effects
    /// void the equivariance argument.
    fn boundary_radius(&self) -> usize {
        0
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm>;
}

impl Clone for Box<dyn RegistrationAlgorithm> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

fn check_pair(moving: &Image, fixed: &Image) -> Result<()> {
    if moving.dim() != fixed.dim() {
        return shape_err(format!("moving image is {}D, fixed image {}D", moving.dim(), fixed.dim()));
    }
    Ok(())
}

/// Always returns the identity.
#[derive(Clone, Debug, Default)]
pub struct Identity;

impl RegistrationAlgorithm for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn register(&self, _: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        check_pair(moving, fixed)?;
        Ok(Transform::identity(fixed.dim()))
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::UuTranslation
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

/// Translation aligning intensity centroids: `x -> x + c_M - c_F`.
#[derive(Clone, Debug, Default)]
pub struct CentroidTranslation;

fn centroid(img: &Image) -> Result<Vec<f64>> {
    let x = crate::transform::coords(img.extents());
    let m = x.spatial_len();
    let d = img.dim();
    let v = &img.values()[..m];
    let mass: f64 = v.iter().map(|&w| w as f64).sum();
    if mass.abs() < 1e-12 {
        return Err(Error::Precondition("centroid of an empty image".into()));
    }
    Ok((0..d)
        .map(|a| (0..m).map(|p| v[p] as f64 * x.data()[a * m + p] as f64).sum::<f64>() / mass)
        .collect())
}

impl RegistrationAlgorithm for CentroidTranslation {
    fn name(&self) -> String {
        "centroid".into()
    }

    fn register(&self, _: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        check_pair(moving, fixed)?;
        let (cm, cf) = (centroid(moving)?, centroid(fixed)?);
        Ok(make_translation(&cm.iter().zip(&cf).map(|(a, b)| a - b).collect::<Vec<_>>()))
    }

    fn equivariance(&self) -> EquivarianceClass {
        EquivarianceClass::WuTranslation
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

/// `TwoStep{Φ,Ψ}[M,F] = Φ[M,F] ∘ Ψ[M ∘ Φ[M,F], F]`.
#[derive(Clone)]
pub struct TwoStep {
    pub first: Box<dyn RegistrationAlgorithm>,
    pub second: Box<dyn RegistrationAlgorithm>,
}

pub fn two_step(first: Box<dyn RegistrationAlgorithm>, second: Box<dyn RegistrationAlgorithm>) -> TwoStep {
    TwoStep { first, second }
}

fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    params.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

impl RegistrationAlgorithm for TwoStep {
    fn name(&self) -> String {
        format!("TwoStep{{{}, {}}}", self.first.name(), self.second.name())
    }

    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        check_pair(moving, fixed)?;
        let phi = self.first.register(tape, moving, fixed)?;
        let warped = warp(tape, moving, &phi)?;
        let psi = self.second.register(tape, &warped, fixed)?;
        compose(&phi, &psi)
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("first", self.first.named_params());
        v.extend(prefixed("second", self.second.named_params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }

    fn equivariance(&self) -> EquivarianceClass {
        self.first.equivariance().then(self.second.equivariance())
    }

    fn boundary_radius(&self) -> usize {
        self.first.boundary_radius().max(self.second.boundary_radius())
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

/// `Downsample{Φ}[A,B] = Φ[avgpool2(A), avgpool2(B)]`; the transform is used
/// as is, since it acts on `[0,1]^D` coordinates.
#[derive(Clone)]
pub struct Downsample {
    pub inner: Box<dyn RegistrationAlgorithm>,
}

pub fn downsample(inner: Box<dyn RegistrationAlgorithm>) -> Downsample {
    Downsample { inner }
}

impl RegistrationAlgorithm for Downsample {
    fn name(&self) -> String {
        format!("Down{{{}}}", self.inner.name())
    }

    fn register(&self, tape: &Tape, moving: &Image, fixed: &Image) -> Result<Transform> {
        check_pair(moving, fixed)?;
        let m = Image::new(tape.average_pool2(&moving.grid)?)?;
        let f = Image::new(tape.average_pool2(&fixed.grid)?)?;
        self.inner.register(tape, &m, &f)
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        prefixed("down", self.inner.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner.params_mut()
    }

    fn equivariance(&self) -> EquivarianceClass {
        self.inner.equivariance()
    }

    fn boundary_radius(&self) -> usize {
        2 * self.inner.boundary_radius()
    }

    fn box_clone(&self) -> Box<dyn RegistrationAlgorithm> {
        Box::new(self.clone())
    }
}

/// `TwoStep{Down{TwoStep{Down{Ξ}, Ψ₁}}, Ψ₂}`, optionally wrapped as
/// `TwoStep{·, Ψ₃}`.
pub fn assemble_carl(
    xi: Box<dyn RegistrationAlgorithm>,
    mut psis: Vec<Box<dyn RegistrationAlgorithm>>,
    include_final: bool,
) -> Result<Box<dyn RegistrationAlgorithm>> {
    let needed = if include_final { 3 } else { 2 };
    if psis.len() < needed {
        return Err(Error::Precondition(format!("assembly needs {needed} refinement networks, got {}", psis.len())));
    }
    let rest = psis.split_off(2);
    let mut it = psis.into_iter();
    let (psi1, psi2) = (it.next().unwrap(), it.next().unwrap());
    let inner = two_step(Box::new(downsample(xi)), psi1);
    let mut alg: Box<dyn RegistrationAlgorithm> = Box::new(two_step(Box::new(downsample(Box::new(inner))), psi2));
    if include_final {
        let psi3 = rest.into_iter().next().unwrap();
        alg = Box::new(two_step(alg, psi3));
    }
    Ok(alg)
}
