//! Procedural retina-like binary masks under random elastic warps.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::Config;
use crate::error::{Error, Result};
use crate::ndgrad::GradGrid;
use crate::transform::{read_grid, write_grid, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    /// Fixed images translated along the first axis.
    Shift,
    /// As `Shift`, with fixed content also scaled down.
    ScaleShift,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Shift => "shift",
            Variant::ScaleShift => "scale-shift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "shift" => Ok(Variant::Shift),
            "scale-shift" => Ok(Variant::ScaleShift),
            _ => Err(Error::Config(format!("unknown dataset variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub variant: Variant,
    pub n_train: usize,
    pub n_test: usize,
    pub resolution: usize,
    /// Smoothing of the random warp field, in voxels.
    pub sigma: f64,
    /// Largest warp displacement, in domain units.
    pub amplitude: f64,
    /// Radius of the annulus, in domain units.
    pub object_radius: f64,
    /// Fixed-image shift as a fraction of the object diameter.
    pub shift_fraction: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            n_train: 64,
            n_test: 16,
            resolution: 64,
            sigma: 16.0,
            amplitude: 0.2,
            object_radius: 0.25,
            shift_fraction: 1.0 / 3.0,
            scale: 0.8,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Reads the `data.*` keys, falling back to defaults.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let s = cfg.section("data");
        let out = Self {
            variant: Variant::parse(s.raw("variant").unwrap_or(d.variant.label()))?,
            n_train: s.get("n_train", d.n_train)?,
            n_test: s.get("n_test", d.n_test)?,
            resolution: s.get("resolution", d.resolution)?,
            sigma: s.get("sigma", d.sigma)?,
            amplitude: s.get("amplitude", d.amplitude)?,
            object_radius: s.get("object_radius", d.object_radius)?,
            shift_fraction: s.get("shift_fraction", d.shift_fraction)?,
            scale: s.get("scale", d.scale)?,
            seed: cfg.get("seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("data.variant", self.variant.label());
        c.set("data.n_train", self.n_train);
        c.set("data.n_test", self.n_test);
        c.set("data.resolution", self.resolution);
        c.set("data.sigma", self.sigma);
        c.set("data.amplitude", self.amplitude);
        c.set("data.object_radius", self.object_radius);
        c.set("data.shift_fraction", self.shift_fraction);
        c.set("data.scale", self.scale);
        c.set("seed", self.seed);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!("resolution {} must be a multiple of 4, at least 8", self.resolution)));
        }
        if !(self.sigma > 0.0) || !(self.amplitude >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::Config("sigma and scale must be positive, amplitude non-negative".into()));
        }
        if !(self.object_radius > 0.0 && self.object_radius < 0.5) {
            return Err(Error::Config("object_radius must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Shift applied to fixed images in whole voxels (zero for `Baseline`).
    pub fn shift_voxels(&self) -> usize {
        match self.variant {
            Variant::Baseline => 0,
            _ => (self.shift_fraction * 2.0 * self.object_radius * self.resolution as f64).round() as usize,
        }
    }

    /// The shift in domain units.
    pub fn shift(&self) -> f64 {
        self.shift_voxels() as f64 / self.resolution as f64
    }
}

/// One moving/fixed pair with the elastic fields that produced it.
#[derive(Clone, Debug)]
pub struct Pair {
    pub moving: Image,
    pub fixed: Image,
    /// `[2, n, n]` displacement sampling the shape for the moving image.
    pub warp_moving: GradGrid,
    pub warp_fixed: GradGrid,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Ring plus curved radial spokes around the centre.
#[derive(Clone, Debug)]
struct Shape {
    radius: f64,
    ring: f64,
    inner: f64,
    spokes: Vec<(f64, f64, f64)>,
    disc: (f64, f64, f64),
}

impl Shape {
    fn random(radius: f64, rng: &mut ChaCha8Rng) -> Self {
        let k = rng.random_range(5..=8);
        let start: f64 = rng.random_range(0.0..TAU);
        let spokes = (0..k)
            .map(|j| {
                let angle = start + TAU * (j as f64 + rng.random_range(-0.3..0.3)) / k as f64;
                let bend = rng.random_range(-3.0..3.0);
                let width = radius * rng.random_range(0.14..0.22);
                (angle, bend, width)
            })
            .collect();
        let disc_angle: f64 = rng.random_range(0.0..TAU);
        let disc_r = radius * rng.random_range(0.3..0.5);
        Self {
            radius,
            ring: radius * rng.random_range(0.14..0.2),
            inner: radius * 0.15,
            spokes,
            disc: (0.5 + disc_r * disc_angle.cos(), 0.5 + disc_r * disc_angle.sin(), radius * 0.16),
        }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
        let r = (dx * dx + dy * dy).sqrt();
        if r > self.radius {
            return false;
        }
        if r >= self.radius - self.ring {
            return true;
        }
        let (cx, cy, cr) = self.disc;
        if (p[0] - cx).powi(2) + (p[1] - cy).powi(2) <= cr * cr {
            return true;
        }
        if r < self.inner {
            return false;
        }
        let phi = dy.atan2(dx);
        self.spokes.iter().any(|&(angle, bend, width)| {
            let mut d = phi - angle - bend * (r - self.inner);
            d = (d + PI).rem_euclid(TAU) - PI;
            (d * r).abs() <= width / 2.0
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of an `n x n` field with clamped borders.
fn smooth(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = k.iter().enumerate().map(|(t, w)| w * field[clamp(i as i64 + t as i64 - r) * n + j]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.iter().enumerate().map(|(t, w)| w * tmp[i * n + clamp(j as i64 + t as i64 - r)]).sum();
        }
    }
    out
}

/// Smoothed Gaussian noise scaled so its largest vector has length
/// `amplitude`; `[2, n, n]` in domain units.
pub fn elastic_field(n: usize, sigma: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut comps = Vec::with_capacity(2);
    for _ in 0..2 {
        let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        comps.push(smooth(&noise, n, sigma));
    }
    let peak = (0..n * n).map(|p| comps[0][p].hypot(comps[1][p])).fold(0.0, f64::max);
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    comps.concat().into_iter().map(|v| v * s).collect()
}

/// Bilinear read of a `[2, n, n]` field at a domain point, clamped to the
/// outermost voxel centres.
fn field_at(field: &[f64], n: usize, p: [f64; 2]) -> [f64; 2] {
    let idx = |x: f64| {
        let u = (x * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 2);
        (i0, u - i0 as f64)
    };
    let ((i, fi), (j, fj)) = (idx(p[0]), idx(p[1]));
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let g = |a: usize, b: usize| field[c * n * n + a * n + b];
        *o = (1.0 - fi) * ((1.0 - fj) * g(i, j) + fj * g(i, j + 1)) + fi * ((1.0 - fj) * g(i + 1, j) + fj * g(i + 1, j + 1));
    }
    out
}

/// Smallest finite-difference Jacobian determinant of `x -> x + field(x)`
/// over the voxel grid.
pub fn min_jacobian_det(field: &[f64], n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let at = |c: usize, i: usize, j: usize| field[c * n * n + i * n + j];
    let mut worst = f64::INFINITY;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let d00 = 1.0 + (at(0, i + 1, j) - at(0, i - 1, j)) / (2.0 * h);
            let d01 = (at(0, i, j + 1) - at(0, i, j - 1)) / (2.0 * h);
            let d10 = (at(1, i + 1, j) - at(1, i - 1, j)) / (2.0 * h);
            let d11 = 1.0 + (at(1, i, j + 1) - at(1, i, j - 1)) / (2.0 * h);
            worst = worst.min(d00 * d11 - d01 * d10);
        }
    }
    worst
}

/// Rasterises `shape ∘ (id + field)` pre-composed with a shift of `offset`
/// voxels along the first axis and a scaling about the centre. Reads outside
/// the box are background.
fn render(shape: &Shape, field: &[f64], n: usize, offset: usize, scale: f64) -> Image {
    let mut v = vec![0.0f32; n * n];
    for i in 0..n.saturating_sub(offset) {
        for j in 0..n {
            let mut y = [(i + offset) as f64 + 0.5, j as f64 + 0.5].map(|c| c / n as f64);
            if scale != 1.0 {
                y = y.map(|c| 0.5 + (c - 0.5) / scale);
                if !y.iter().all(|c| (0.0..=1.0).contains(c)) {
                    continue;
                }
            }
            let d = field_at(field, n, y);
            if shape.contains([y[0] + d[0], y[1] + d[1]]) {
                v[i * n + j] = 1.0;
            }
        }
    }
    Image::from_values(&[n, n], v).expect("finite mask")
}

fn generate_pair(cfg: &DatasetConfig, stream: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n = cfg.resolution;
    let shape = Shape::random(cfg.object_radius, &mut rng);
    let fm = elastic_field(n, cfg.sigma, cfg.amplitude, &mut rng);
    let ff = elastic_field(n, cfg.sigma, cfg.amplitude, &mut rng);
    let moving = render(&shape, &fm, n, 0, 1.0);
    let scale = if cfg.variant == Variant::ScaleShift { cfg.scale } else { 1.0 };
    let fixed = render(&shape, &ff, n, cfg.shift_voxels(), scale);
    let grid = |f: Vec<f64>| GradGrid::new(vec![2, n, n], f.into_iter().map(|v| v as f32).collect()).expect("shape");
    Pair { moving, fixed, warp_moving: grid(fm), warp_fixed: grid(ff) }
}

/// Train pairs use streams `0..`, test pairs streams `1_000_000..`, so the
/// variants of one seed share shapes and warps.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train = (0..cfg.n_train).map(|i| generate_pair(cfg, i as u64)).collect();
    let test = (0..cfg.n_test).map(|i| generate_pair(cfg, 1_000_000 + i as u64)).collect();
    Ok(Dataset { config: cfg.clone(), train, test })
}

const PARTS: [&str; 4] = ["moving", "fixed", "warp_moving", "warp_fixed"];

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Pair]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?}"))),
        }
    }

    /// `dataset.cfg` plus `<split>/<index>_<part>.grid`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("dataset.cfg"), self.config.to_config().to_text())?;
        for (name, pairs) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub)?;
            for (i, p) in pairs.iter().enumerate() {
                let grids = [&p.moving.grid, &p.fixed.grid, &p.warp_moving, &p.warp_fixed];
                for (part, g) in PARTS.iter().zip(grids) {
                    write_grid(sub.join(format!("{i:04}_{part}.grid")), g)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = DatasetConfig::from_config(&Config::load(dir.join("dataset.cfg"))?)?;
        let read = |name: &str, count: usize| -> Result<Vec<Pair>> {
            (0..count)
                .map(|i| {
                    let g = |part: &str| read_grid(dir.join(name).join(format!("{i:04}_{part}.grid")));
                    Ok(Pair {
                        moving: Image::new(g("moving")?)?,
                        fixed: Image::new(g("fixed")?)?,
                        warp_moving: g("warp_moving")?,
                        warp_fixed: g("warp_fixed")?,
                    })
                })
                .collect()
        };
        Ok(Self { train: read("train", config.n_train)?, test: read("test", config.n_test)?, config })
    }
}
