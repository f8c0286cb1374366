//! A seeded, differentiable synthetic generator with analytic semantics.
//!
//! A latent vector is mapped through fixed affine rows to the parameters of
//! `K` soft disks. Every internal layer renders the disks at its own
//! resolution, composites them back-to-front into per-class soft indicator
//! maps, and embeds those indicators into its channels (directly, as linear
//! mixtures plus fixed noise, or, in nonlinear mode, through a saturating
//! nonlinearity and a spatial carrier wave that breaks linear decodability).
//! The output image colours every pixel by a fixed palette weighted by the
//! full-resolution indicators, and [`SyntheticGenerator::analytic_mask`]
//! gives the exact hard labelling.
//!
//! Coordinates live on the square `[-1, 1]²`; a pixel `(y, x)` at resolution
//! `R` sits at `((x + 0.5) / R * 2 - 1, (y + 0.5) / R * 2 - 1)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Map3;

const ANCHOR_RADIUS: f64 = 0.5;
const CENTER_SPREAD: f64 = 0.35;
const MAX_RADIUS: f64 = 2.0;
const RADIUS_BIAS: f64 = -1.8;
const DIST_EPS: f64 = 1e-10;

/// A point in the generator's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Draws a standard-normal latent of dimension `dim` from `seed`.
///
/// With `truncation = Some(ρ)` the vector is rescaled onto the ball of
/// radius `ρ·√dim` whenever it falls outside it.
pub fn sample_latent(dim: usize, seed: u64, truncation: Option<f64>) -> Result<LatentVector> {
    if let Some(rho) = truncation {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "truncation radius must be positive, got {rho}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = LatentVector((0..dim).map(|_| rng.sample(StandardNormal)).collect());
    if let Some(rho) = truncation {
        let limit = rho * (dim as f64).sqrt();
        let norm = z.norm();
        if norm > limit {
            let s = limit / norm;
            z.0.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(z)
}

fn default_sharpness() -> f64 {
    25.0
}

fn default_noise_scale() -> f64 {
    0.05
}

/// Architecture and seed of the synthetic generator.
///
/// Serialized as TOML with the field names below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Ascending, strictly doubling; the last entry is the image size.
    pub layer_resolutions: Vec<usize>,
    /// Channel count `c_i` of every internal layer.
    pub layer_depths: Vec<usize>,
    /// Number of classes `m`, background (index 0) included.
    pub num_classes: usize,
    /// Number of disks `K`.
    pub num_shapes: usize,
    pub seed: u64,
    /// Fraction of channels per layer carrying indicator mixtures.
    pub nuisance_ratio: f64,
    /// Linearly decodable embedding when true.
    pub linear_mode: bool,
    /// Sigmoid sharpness κ of the soft indicators.
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    /// Standard deviation of the fixed per-pixel noise on nuisance channels.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            layer_resolutions: vec![4, 8, 16, 32, 64],
            layer_depths: vec![16; 5],
            num_classes: 5,
            num_shapes: 4,
            seed: 0,
            nuisance_ratio: 0.5,
            linear_mode: true,
            sharpness: default_sharpness(),
            noise_scale: default_noise_scale(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.layer_resolutions.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.layer_depths.len() != self.layer_resolutions.len() {
            return bad(format!(
                "{} depths for {} resolutions",
                self.layer_depths.len(),
                self.layer_resolutions.len()
            ));
        }
        if self.layer_resolutions[0] == 0 {
            return bad("resolutions must be positive".into());
        }
        for pair in self.layer_resolutions.windows(2) {
            if pair[1] != 2 * pair[0] {
                return bad(format!("resolutions must double: {} -> {}", pair[0], pair[1]));
            }
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.num_classes > 256 {
            return bad("num_classes must fit in a byte".into());
        }
        if let Some(c) = self.layer_depths.iter().find(|&&c| c < self.num_classes) {
            return bad(format!("layer depth {c} is below num_classes {}", self.num_classes));
        }
        if self.num_shapes == 0 {
            return bad("num_shapes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.nuisance_ratio) {
            return bad(format!("nuisance_ratio {} outside [0, 1]", self.nuisance_ratio));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return bad("sharpness must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be nonnegative".into());
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        *self.layer_resolutions.last().expect("validated config")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable short digest identifying this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config is always serializable");
        Sha256::digest(&canonical)[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Foreground class painted by disk `k`.
    pub fn shape_class(&self, k: usize) -> usize {
        1 + k % (self.num_classes - 1)
    }

    pub fn class_names(&self) -> Vec<String> {
        const NAMES: [&str; 7] = ["background", "red", "green", "blue", "yellow", "magenta", "cyan"];
        (0..self.num_classes)
            .map(|c| NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
            .collect()
    }

    /// RGB colour of every class, in `[0, 1]`.
    pub fn palette(&self) -> Vec<[f64; 3]> {
        const FIXED: [[f64; 3]; 7] = [
            [0.10, 0.10, 0.12],
            [0.90, 0.20, 0.20],
            [0.20, 0.75, 0.25],
            [0.20, 0.35, 0.90],
            [0.95, 0.85, 0.20],
            [0.85, 0.30, 0.85],
            [0.25, 0.85, 0.90],
        ];
        (0..self.num_classes)
            .map(|c| {
                FIXED.get(c).copied().unwrap_or_else(|| {
                    let hue = (c as f64 * 0.618_033_988_75).fract();
                    hsv_to_rgb(hue, 0.7, 0.85)
                })
            })
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-layer activations plus the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// `x_i` with shape `(c_i, r_i, r_i)`, shallowest first.
    pub layers: Vec<Map3>,
    /// `(3, h, w)` in `[0, 1]`.
    pub image: Map3,
}

impl FeatureStack {
    pub fn output_size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }

    pub fn depths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.channels).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.image.is_finite() && self.layers.iter().all(Map3::is_finite)
    }
}

/// Upstream gradient with respect to a [`FeatureStack`]; absent parts are zero.
#[derive(Debug, Clone, Default)]
pub struct FeatureGrad {
    pub layers: Option<Vec<Map3>>,
    pub image: Option<Map3>,
}

/// Integer class map `Y`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| usize::from(l) >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Boolean membership of class `k`.
    pub fn class_set(&self, k: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == k).collect()
    }
}

/// Static description of one internal layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub depth: usize,
    pub resolution: usize,
}

/// Interface a feature-exposing generator must offer to be probed, segmented
/// and optimized. `backprop` is the reverse-mode contract: given upstream
/// gradients on the stack, return the gradient with respect to `z`.
pub trait FeatureGenerator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn layer_meta(&self) -> Vec<LayerMeta>;
    fn output_size(&self) -> (usize, usize);
    fn num_classes(&self) -> usize;
    fn class_names(&self) -> Vec<String>;
    fn config_hash(&self) -> String;
    fn generate(&self, z: &LatentVector) -> Result<FeatureStack>;
    fn backprop(&self, z: &LatentVector, grad: &FeatureGrad) -> Result<Vec<f64>>;

    /// Same as [`FeatureGenerator::generate`] with any stochastic
    /// per-layer noise redrawn from `noise_seed`. Generators without such
    /// noise ignore the seed.
    fn generate_with_noise(&self, z: &LatentVector, _noise_seed: u64) -> Result<FeatureStack> {
        self.generate(z)
    }
}

/// Labels generated images; the ground-truth side of training and evaluation.
pub trait Segmenter: Send + Sync {
    fn segment(&self, z: &LatentVector, stack: &FeatureStack) -> Result<SemanticMask>;
}

/// Geometry of one disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub center: (f64, f64),
    pub radius: f64,
}

/// Desired disk geometry, for constructing latents in tests and demos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeTarget {
    pub center: (f64, f64),
    /// Clamped into `[1e-12, MAX_RADIUS)`; zero makes the disk vanish.
    pub radius: f64,
}

#[derive(Debug, Clone)]
enum ChannelKind {
    Signal { class: usize, gain: f64 },
    Nuisance { mix: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Channel {
    kind: ChannelKind,
    /// Spatial carrier `cos(2π·(fx·x + fy·y) + φ)`; nonlinear mode only.
    carrier: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
struct LayerPlan {
    resolution: usize,
    channels: Vec<Channel>,
    /// `(c, r, r)`; zero on signal channels.
    noise: Map3,
}

/// The constructed generator. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    cfg: GeneratorConfig,
    /// `3K` rows of length `d`: per disk `(cx, cy, radius)` pre-activations.
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
    anchors: Vec<(f64, f64)>,
    layers: Vec<LayerPlan>,
    palette: Vec<[f64; 3]>,
}

/// Per-pixel disk quantities kept for the backward pass.
struct DiskField {
    /// `s[k][p]`
    soft: Vec<Vec<f64>>,
    /// `dist[k][p]`
    dist: Vec<Vec<f64>>,
    /// offsets `(x - cx, y - cy)`
    offset: Vec<Vec<(f64, f64)>>,
}

impl SyntheticGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let k = cfg.num_shapes;
        let m = cfg.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut rows = Vec::with_capacity(3 * k);
        let mut biases = Vec::with_capacity(3 * k);
        for _ in 0..k {
            for p in 0..3 {
                rows.push((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
                biases.push(if p == 2 { RADIUS_BIAS } else { 0.0 });
            }
        }
        let anchors = (0..k)
            .map(|s| {
                let a = 2.0 * PI * s as f64 / k as f64 + PI / 4.0;
                (ANCHOR_RADIUS * a.cos(), ANCHOR_RADIUS * a.sin())
            })
            .collect();

        let mut layers = Vec::with_capacity(cfg.layer_resolutions.len());
        for (&res, &depth) in cfg.layer_resolutions.iter().zip(&cfg.layer_depths) {
            let wanted = (cfg.nuisance_ratio * depth as f64).round() as usize;
            let nuisance = wanted.min(depth - m);
            let signal = depth - nuisance;
            let mut channels = Vec::with_capacity(depth);
            for j in 0..depth {
                let kind = if j < signal {
                    ChannelKind::Signal {
                        class: j % m,
                        gain: rng.random_range(0.5..1.5),
                    }
                } else {
                    ChannelKind::Nuisance {
                        mix: (0..m).map(|_| rng.sample(StandardNormal)).collect(),
                    }
                };
                let carrier = if cfg.linear_mode {
                    None
                } else {
                    let freq = rng.random_range(1.0..3.0);
                    let angle = rng.random_range(0.0..2.0 * PI);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    Some((0.5 * freq * angle.cos(), 0.5 * freq * angle.sin(), phase))
                };
                channels.push(Channel { kind, carrier });
            }
            let mut noise = Map3::zeros(depth, res, res);
            for j in signal..depth {
                for v in noise.plane_mut(j) {
                    *v = cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
            layers.push(LayerPlan {
                resolution: res,
                channels,
                noise,
            });
        }
        let palette = cfg.palette();
        Ok(Self {
            cfg,
            rows,
            biases,
            anchors,
            layers,
            palette,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn palette(&self) -> &[[f64; 3]] {
        &self.palette
    }

    fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.dim() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.latent_dim,
                actual: z.dim(),
            });
        }
        if !z.is_finite() {
            return Err(Error::InvalidArgument("latent has non-finite entries".into()));
        }
        Ok(())
    }

    fn pre_activations(&self, z: &LatentVector) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(&z.0).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Disk geometry decoded from `z`.
    pub fn shape_params(&self, z: &LatentVector) -> Result<Vec<ShapeParams>> {
        self.check_latent(z)?;
        let pre = self.pre_activations(z);
        Ok(self.decode_shapes(&pre))
    }

    fn decode_shapes(&self, pre: &[f64]) -> Vec<ShapeParams> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(k, &(ax, ay))| ShapeParams {
                center: (
                    ax + CENTER_SPREAD * pre[3 * k].tanh(),
                    ay + CENTER_SPREAD * pre[3 * k + 1].tanh(),
                ),
                radius: MAX_RADIUS * sigmoid(pre[3 * k + 2]),
            })
            .collect()
    }

    /// Minimum-norm latent realising the requested disk geometry.
    pub fn solve_latent(&self, targets: &[ShapeTarget]) -> Result<LatentVector> {
        if targets.len() != self.cfg.num_shapes {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.num_shapes,
                actual: targets.len(),
            });
        }
        let mut rhs = Vec::with_capacity(3 * targets.len());
        for (k, t) in targets.iter().enumerate() {
            let (ax, ay) = self.anchors[k];
            for (c, a) in [(t.center.0, ax), (t.center.1, ay)] {
                let u = (c - a) / CENTER_SPREAD;
                if u.abs() >= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "center coordinate {c} unreachable for disk {k}"
                    )));
                }
                rhs.push(u.atanh());
            }
            let r = (t.radius / MAX_RADIUS).clamp(1e-12, 1.0 - 1e-12);
            rhs.push((r / (1.0 - r)).ln());
        }
        let n = self.rows.len();
        let d = self.cfg.latent_dim;
        let a = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let b = DVector::from_iterator(n, rhs.iter().zip(&self.biases).map(|(t, b)| t - b));
        let svd = a.svd(true, true);
        let z = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::InvalidArgument(format!("latent solve failed: {e}")))?;
        Ok(LatentVector(z.iter().copied().collect()))
    }

    fn pixel_coord(i: usize, res: usize) -> f64 {
        (i as f64 + 0.5) / res as f64 * 2.0 - 1.0
    }

    fn disk_field(&self, shapes: &[ShapeParams], res: usize) -> DiskField {
        let kappa = self.cfg.sharpness;
        let n = res * res;
        let mut soft = vec![vec![0.0; n]; shapes.len()];
        let mut dist = vec![vec![0.0; n]; shapes.len()];
        let mut offset = vec![vec![(0.0, 0.0); n]; shapes.len()];
        for (k, s) in shapes.iter().enumerate() {
            for y in 0..res {
                let py = Self::pixel_coord(y, res);
                for x in 0..res {
                    let px = Self::pixel_coord(x, res);
                    let (dx, dy) = (px - s.center.0, py - s.center.1);
                    let dd = (dx * dx + dy * dy + DIST_EPS).sqrt();
                    let p = y * res + x;
                    soft[k][p] = sigmoid(kappa * (s.radius - dd));
                    dist[k][p] = dd;
                    offset[k][p] = (dx, dy);
                }
            }
        }
        DiskField { soft, dist, offset }
    }

    /// Back-to-front composite of the disks into `m` class indicator planes.
    fn indicators(&self, field: &DiskField, res: usize) -> Map3 {
        let m = self.cfg.num_classes;
        let k = field.soft.len();
        let mut out = Map3::zeros(m, res, res);
        let mut cover = vec![0.0; k];
        for p in 0..res * res {
            let mut above = 1.0;
            for s in (0..k).rev() {
                let sk = field.soft[s][p];
                cover[s] = sk * above;
                above *= 1.0 - sk;
            }
            out.data[p] = above;
            for (s, v) in cover.iter().enumerate() {
                out.data[self.cfg.shape_class(s) * res * res + p] += v;
            }
        }
        out
    }

    fn embed(&self, plan: &LayerPlan, ind: &Map3, noise: &Map3) -> Map3 {
        let res = plan.resolution;
        let n = res * res;
        let mut out = Map3::zeros(plan.channels.len(), res, res);
        for (j, ch) in plan.channels.iter().enumerate() {
            let noise = noise.plane(j);
            for y in 0..res {
                for x in 0..res {
                    let p = y * res + x;
                    let base = match &ch.kind {
                        ChannelKind::Signal { class, gain } => gain * ind.data[class * n + p],
                        ChannelKind::Nuisance { mix } => {
                            let lin: f64 = mix.iter().enumerate().map(|(c, w)| w * ind.data[c * n + p]).sum();
                            if self.cfg.linear_mode {
                                lin
                            } else {
                                (2.0 * lin).tanh()
                            }
                        }
                    };
                    let carrier = ch.carrier.map_or(1.0, |c| carrier_at(c, x, y, res));
                    out.data[j * n + p] = base * carrier + noise[p];
                }
            }
        }
        out
    }

    fn fresh_noise(&self, plan: &LayerPlan, rng: &mut ChaCha8Rng) -> Map3 {
        let mut noise = Map3::zeros(plan.noise.channels, plan.resolution, plan.resolution);
        for (j, ch) in plan.channels.iter().enumerate() {
            if matches!(ch.kind, ChannelKind::Nuisance { .. }) {
                for v in noise.plane_mut(j) {
                    *v = self.cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        noise
    }

    fn generate_inner(&self, z: &LatentVector, noise_seed: Option<u64>) -> Result<FeatureStack> {
        let shapes = self.shape_params(z)?;
        let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut last_ind = None;
        for plan in &self.layers {
            let field = self.disk_field(&shapes, plan.resolution);
            let ind = self.indicators(&field, plan.resolution);
            let layer = match rng.as_mut() {
                Some(r) => self.embed(plan, &ind, &self.fresh_noise(plan, r)),
                None => self.embed(plan, &ind, &plan.noise),
            };
            layers.push(layer);
            last_ind = Some(ind);
        }
        let image = self.render_image(&last_ind.expect("at least one layer"));
        Ok(FeatureStack { layers, image })
    }

    fn render_image(&self, ind: &Map3) -> Map3 {
        let n = ind.plane_len();
        let mut img = Map3::zeros(3, ind.height, ind.width);
        for (c, rgb) in self.palette.iter().enumerate() {
            let plane = ind.plane(c);
            for ch in 0..3 {
                let dst = &mut img.data[ch * n..(ch + 1) * n];
                for (d, v) in dst.iter_mut().zip(plane) {
                    *d += rgb[ch] * v;
                }
            }
        }
        img
    }

    /// Ground-truth labels: the class whose composited full-resolution
    /// indicator reaches 0.5, background where none does.
    pub fn analytic_mask(&self, z: &LatentVector) -> Result<SemanticMask> {
        let shapes = self.shape_params(z)?;
        let res = self.cfg.output_size();
        let ind = self.indicators(&self.disk_field(&shapes, res), res);
        let n = res * res;
        let labels = (0..n)
            .map(|p| {
                let mut best = (0u8, 0.5);
                for c in 1..self.cfg.num_classes {
                    let v = ind.data[c * n + p];
                    if v >= best.1 && (best.0 == 0 || v > best.1) {
                        best = (c as u8, v);
                    }
                }
                best.0
            })
            .collect();
        SemanticMask::new(res, res, labels)
    }

    pub fn boundary_pixels(&self, z: &LatentVector, margin: f64) -> Result<Vec<bool>> {
        let shapes = self.shape_params(z)?;
        let res = self.cfg.output_size();
        let mut out = vec![false; res * res];
        for y in 0..res {
            let py = Self::pixel_coord(y, res);
            for x in 0..res {
                let px = Self::pixel_coord(x, res);
                out[y * res + x] = shapes.iter().any(|s| {
                    let d = ((px - s.center.0).powi(2) + (py - s.center.1).powi(2)).sqrt();
                    (d - s.radius).abs() < margin
                });
            }
        }
        Ok(out)
    }

    /// Back-propagates `d_ind` (per-class indicator gradient at `res`) into
    /// gradients on the `3K` disk parameters `(cx, cy, r)`.
    fn indicator_backward(&self, shapes: &[ShapeParams], res: usize, d_ind: &Map3, d_params: &mut [f64]) {
        let field = self.disk_field(shapes, res);
        let kappa = self.cfg.sharpness;
        let k = shapes.len();
        let n = res * res;
        let mut ds = vec![0.0; k];
        let mut dv = vec![0.0; k];
        for p in 0..n {
            let s: Vec<f64> = (0..k).map(|i| field.soft[i][p]).collect();
            for i in 0..k {
                dv[i] = d_ind.data[self.cfg.shape_class(i) * n + p];
            }
            let dbg = d_ind.data[p];
            for t in 0..k {
                // ∂cover_t/∂s_t
                let mut acc = dv[t] * (t + 1..k).map(|j| 1.0 - s[j]).product::<f64>();
                // covers of disks behind t are shadowed by it
                for i in 0..t {
                    let shade: f64 = (i + 1..k).filter(|&j| j != t).map(|j| 1.0 - s[j]).product();
                    acc -= dv[i] * s[i] * shade;
                }
                let others: f64 = (0..k).filter(|&j| j != t).map(|j| 1.0 - s[j]).product();
                acc -= dbg * others;
                ds[t] = acc;
            }
            for t in 0..k {
                if ds[t] == 0.0 {
                    continue;
                }
                let g = ds[t] * kappa * s[t] * (1.0 - s[t]);
                let (ox, oy) = field.offset[t][p];
                let dd = field.dist[t][p];
                // s = σ(κ(r − |p − c|)), ∂|p − c|/∂c = −(p − c)/|p − c|
                d_params[3 * t] += g * ox / dd;
                d_params[3 * t + 1] += g * oy / dd;
                d_params[3 * t + 2] += g;
            }
        }
    }

    /// Adjoint of [`SyntheticGenerator::embed`] with respect to the indicators.
    fn embed_backward(&self, plan: &LayerPlan, ind: &Map3, grad: &Map3, d_ind: &mut Map3) {
        let res = plan.resolution;
        let n = res * res;
        for (j, ch) in plan.channels.iter().enumerate() {
            let g = grad.plane(j);
            for y in 0..res {
                for x in 0..res {
                    let p = y * res + x;
                    let carrier = ch.carrier.map_or(1.0, |c| carrier_at(c, x, y, res));
                    let up = g[p] * carrier;
                    if up == 0.0 {
                        continue;
                    }
                    match &ch.kind {
                        ChannelKind::Signal { class, gain } => d_ind.data[class * n + p] += gain * up,
                        ChannelKind::Nuisance { mix } => {
                            let scale = if self.cfg.linear_mode {
                                1.0
                            } else {
                                let lin: f64 =
                                    mix.iter().enumerate().map(|(c, w)| w * ind.data[c * n + p]).sum();
                                let t = (2.0 * lin).tanh();
                                2.0 * (1.0 - t * t)
                            };
                            for (c, w) in mix.iter().enumerate() {
                                d_ind.data[c * n + p] += w * scale * up;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl FeatureGenerator for SyntheticGenerator {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn layer_meta(&self) -> Vec<LayerMeta> {
        self.cfg
            .layer_depths
            .iter()
            .zip(&self.cfg.layer_resolutions)
            .map(|(&depth, &resolution)| LayerMeta { depth, resolution })
            .collect()
    }

    fn output_size(&self) -> (usize, usize) {
        let r = self.cfg.output_size();
        (r, r)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn class_names(&self) -> Vec<String> {
        self.cfg.class_names()
    }

    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    fn generate(&self, z: &LatentVector) -> Result<FeatureStack> {
        self.generate_inner(z, None)
    }

    fn generate_with_noise(&self, z: &LatentVector, noise_seed: u64) -> Result<FeatureStack> {
        self.generate_inner(z, Some(noise_seed))
    }

    fn backprop(&self, z: &LatentVector, grad: &FeatureGrad) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let pre = self.pre_activations(z);
        let shapes = self.decode_shapes(&pre);
        let m = self.cfg.num_classes;
        if let Some(gl) = &grad.layers {
            if gl.len() != self.layers.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.layers.len(),
                    actual: gl.len(),
                });
            }
        }
        let mut d_params = vec![0.0; 3 * shapes.len()];
        let last = self.layers.len() - 1;
        for (i, plan) in self.layers.iter().enumerate() {
            let res = plan.resolution;
            let layer_grad = grad.layers.as_ref().map(|g| &g[i]);
            let image_grad = if i == last { grad.image.as_ref() } else { None };
            if layer_grad.is_none() && image_grad.is_none() {
                continue;
            }
            let field = self.disk_field(&shapes, res);
            let ind = self.indicators(&field, res);
            let mut d_ind = Map3::zeros(m, res, res);
            if let Some(g) = layer_grad {
                if g.shape() != (plan.channels.len(), res, res) {
                    return Err(Error::ShapeMismatch(format!("layer {i} gradient {:?}", g.shape())));
                }
                self.embed_backward(plan, &ind, g, &mut d_ind);
            }
            if let Some(g) = image_grad {
                if g.shape() != (3, res, res) {
                    return Err(Error::ShapeMismatch(format!("image gradient {:?}", g.shape())));
                }
                let n = res * res;
                for (c, rgb) in self.palette.iter().enumerate() {
                    for ch in 0..3 {
                        let src = g.plane(ch);
                        let dst = &mut d_ind.data[c * n..(c + 1) * n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += rgb[ch] * s;
                        }
                    }
                }
            }
            self.indicator_backward(&shapes, res, &d_ind, &mut d_params);
        }
        // parameters -> pre-activations -> latent
        let mut dz = vec![0.0; self.cfg.latent_dim];
        for (idx, (row, p)) in self.rows.iter().zip(&pre).enumerate() {
            let local = if idx % 3 == 2 {
                let s = sigmoid(*p);
                MAX_RADIUS * s * (1.0 - s)
            } else {
                let t = p.tanh();
                CENTER_SPREAD * (1.0 - t * t)
            };
            let g = d_params[idx] * local;
            if g != 0.0 {
                for (d, a) in dz.iter_mut().zip(row) {
                    *d += g * a;
                }
            }
        }
        Ok(dz)
    }
}

/// Ground truth from the generator's own geometry.
#[derive(Debug, Clone)]
pub struct AnalyticSegmenter {
    generator: SyntheticGenerator,
}

impl AnalyticSegmenter {
    pub fn new(generator: &SyntheticGenerator) -> Self {
        Self {
            generator: generator.clone(),
        }
    }
}

impl Segmenter for AnalyticSegmenter {
    fn segment(&self, z: &LatentVector, _stack: &FeatureStack) -> Result<SemanticMask> {
        self.generator.analytic_mask(z)
    }
}

fn carrier_at((fx, fy, phase): (f64, f64, f64), x: usize, y: usize, res: usize) -> f64 {
    let px = SyntheticGenerator::pixel_coord(x, res);
    let py = SyntheticGenerator::pixel_coord(y, res);
    (2.0 * PI * (fx * px + fy * py) + phase).cos()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
