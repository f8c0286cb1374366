//! The geometry of pixel features: fair per-class sampling, class centres on
//! the unit sphere, centre-based segmentation, cosine confusion and the
//! hyper-cone decision regions of a linear extractor.
//!
//! A pixel feature is the column of the upsampled concatenated stack `X`,
//! of length `n = Σ c_i`.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{sample_latent, FeatureGenerator, FeatureStack, Segmenter, SemanticMask};
use crate::probes::{upsampled_concat, ProbeWeights, UpsampleMode};
use crate::rng::{derive_indexed, stream_rng};
use crate::tensor::bilinear_pixel;

pub const PAPER_T1: usize = 200;
pub const PAPER_T2: usize = 4000;
pub const DESK_T1: usize = 20;
pub const DESK_T2: usize = 400;
pub const DEFAULT_MAX_IMAGES: usize = 10_000;

const DEGENERATE_NORM: f64 = 1e-9;

/// Feature of pixel `(i, j)`: every layer bilinearly resampled to output
/// size, concatenated along depth.
pub fn pixel_feature(stack: &FeatureStack, i: usize, j: usize) -> Result<Vec<f64>> {
    let (h, w) = stack.output_size();
    if i >= h || j >= w {
        return Err(Error::InvalidArgument(format!("pixel ({i}, {j}) outside {h}x{w} canvas")));
    }
    Ok(stack.layers.iter().flat_map(|x| bilinear_pixel(x, h, w, i, j)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairSampleConfig {
    /// Per-image cap, and the minimum pixel count for a class to contribute.
    pub t1: usize,
    /// Pool capacity.
    pub t2: usize,
    pub max_images: usize,
    pub seed: u64,
}

impl FairSampleConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            t1: PAPER_T1,
            t2: PAPER_T2,
            max_images: DEFAULT_MAX_IMAGES,
            seed,
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self {
            t1: DESK_T1,
            t2: DESK_T2,
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t1 > self.t2 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < T1 <= T2, got T1={} T2={}",
                self.t1, self.t2
            )));
        }
        if self.max_images < self.t2.div_ceil(self.t1) {
            return Err(Error::InvalidArgument(format!(
                "max_images {} cannot fill a pool of {} at {} per image",
                self.max_images, self.t2, self.t1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePool {
    pub dim: usize,
    pub t1: usize,
    pub t2: usize,
    /// `pools[k]` holds class `k`'s feature vectors.
    pub pools: Vec<Vec<Vec<f64>>>,
    /// `(image index, count)` for every contribution to each pool.
    pub contributions: Vec<Vec<(usize, usize)>>,
    pub images_used: usize,
}

impl FeaturePool {
    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }

    pub fn is_complete(&self) -> bool {
        self.pools.iter().all(|p| p.len() == self.t2)
    }
}

/// Per image, every class whose pool is not yet full and which covers at
/// least `T1` pixels contributes `T1` of them, drawn without replacement
/// (the last contribution is truncated to fill the pool exactly). Images are
/// drawn until every pool holds `T2` vectors.
pub fn fair_sample<G, S>(gen: &G, segmenter: &S, cfg: &FairSampleConfig) -> Result<FeaturePool>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
{
    cfg.validate()?;
    let m = gen.num_classes();
    let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.t2); m];
    let mut contributions = vec![Vec::new(); m];
    let mut rng = stream_rng(cfg.seed, "fair-pick");
    let mut dim = 0;
    let mut image = 0;
    while pools.iter().any(|p| p.len() < cfg.t2) {
        if image == cfg.max_images {
            let class = pools.iter().position(|p| p.len() < cfg.t2).unwrap_or(0);
            return Err(Error::StarvedClass {
                class,
                needed: cfg.t1,
                images: image,
            });
        }
        let z = sample_latent(gen.latent_dim(), derive_indexed(cfg.seed, "fair", image as u64), None)?;
        let stack = gen.generate(&z)?;
        let mask = segmenter.segment(&z, &stack)?;
        mask.check_classes(m)?;
        let x = upsampled_concat(&stack, UpsampleMode::Bilinear);
        dim = x.channels;
        let n = x.plane_len();
        for (k, pool) in pools.iter_mut().enumerate() {
            if pool.len() >= cfg.t2 {
                continue;
            }
            let pixels: Vec<usize> = (0..n).filter(|&p| usize::from(mask.labels[p]) == k).collect();
            if pixels.len() < cfg.t1 {
                continue;
            }
            let take = cfg.t1.min(cfg.t2 - pool.len());
            for idx in sample_indices(&mut rng, pixels.len(), take) {
                let p = pixels[idx];
                pool.push((0..x.channels).map(|c| x.data[c * n + p]).collect());
            }
            contributions[k].push((image, take));
        }
        image += 1;
    }
    Ok(FeaturePool {
        dim,
        t1: cfg.t1,
        t2: cfg.t2,
        pools,
        contributions,
        images_used: image,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of the unit-normalized vectors of a pool.
fn mean_direction(pool: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty feature pool".into()));
    }
    let mut mean = vec![0.0; dim];
    for v in pool {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        let len = norm(v);
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidArgument("zero or non-finite vector in feature pool".into()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / len;
        }
    }
    let inv = 1.0 / pool.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// `m` unit vectors on the `n`-sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    pub centers: Vec<Vec<f64>>,
}

impl ClassCenters {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centers.first().map_or(0, Vec::len);
        for (k, c) in centers.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: c.len(),
                });
            }
            if (norm(c) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("center {k} is not unit length")));
            }
        }
        Ok(Self { centers })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// A linear extractor whose concatenated matrix rows are the centres.
    pub fn as_probe(&self, depths: &[usize], class_names: Vec<String>) -> Result<ProbeWeights> {
        let mut probe = ProbeWeights::zeros(self.num_classes(), depths, class_names);
        probe.set_from_concat(&self.centers.concat())?;
        Ok(probe)
    }
}

/// `c_k = normalize(mean(normalize(v)))` over each class pool.
pub fn class_centers(pool: &FeaturePool) -> Result<ClassCenters> {
    let centers = pool
        .pools
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut c = mean_direction(p, pool.dim)?;
            let len = norm(&c);
            if len < DEGENERATE_NORM {
                return Err(Error::DegenerateCenter(k));
            }
            c.iter_mut().for_each(|x| *x /= len);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    Ok(ClassCenters { centers })
}

/// Labels each pixel with the centre of largest cosine similarity; pixels
/// with a zero feature vector are background.
pub fn center_segment(stack: &FeatureStack, centers: &ClassCenters) -> Result<SemanticMask> {
    let x = upsampled_concat(stack, UpsampleMode::Bilinear);
    if x.channels != centers.dim() {
        return Err(Error::DimensionMismatch {
            expected: centers.dim(),
            actual: x.channels,
        });
    }
    let n = x.plane_len();
    let mut labels = vec![0u8; n];
    let mut feature = vec![0.0; x.channels];
    for (p, label) in labels.iter_mut().enumerate() {
        for (c, f) in feature.iter_mut().enumerate() {
            *f = x.data[c * n + p];
        }
        if norm(&feature) == 0.0 {
            continue;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in centers.centers.iter().enumerate() {
            let s = dot(c, &feature);
            if s > best.1 {
                best = (k, s);
            }
        }
        *label = best.0 as u8;
    }
    SemanticMask::new(x.height, x.width, labels)
}

/// Entry `(a, b)` is the mean cosine similarity over all pairs drawn from
/// pools `a` and `b`.
pub fn cosine_confusion(pool: &FeaturePool) -> Result<Vec<Vec<f64>>> {
    // The mean of pairwise cosines factors into a dot product of mean
    // directions.
    let means: Vec<Vec<f64>> = pool
        .pools
        .iter()
        .map(|p| mean_direction(p, pool.dim))
        .collect::<Result<_>>()?;
    let m = means.len();
    let mut out = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a..m {
            let v = dot(&means[a], &means[b]);
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

/// `(mean of diagonal, mean of off-diagonal)` entries.
pub fn diagonal_contrast(matrix: &[Vec<f64>]) -> (f64, f64) {
    let m = matrix.len();
    let diag = (0..m).map(|k| matrix[k][k]).sum::<f64>() / m as f64;
    let off_count = m * m - m;
    let off = if off_count == 0 {
        0.0
    } else {
        (0..m)
            .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| matrix[a][b])
            .sum::<f64>()
            / off_count as f64
    };
    (diag, off)
}

/// Whitespace-separated rows with a header of class names, for heat maps.
pub fn matrix_to_text(matrix: &[Vec<f64>], class_names: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "{}", class_names.join("\t")).unwrap();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", cells.join("\t")).unwrap();
    }
    out
}

/// The class `k` whose region `{x | T^(k)·x > T^(j)·x ∀ j ≠ k}` contains
/// `x`; ties resolve to the lowest index.
pub fn hypercone_classify(t_concat: &[f64], num_classes: usize, x: &[f64]) -> Result<usize> {
    if num_classes == 0 || t_concat.len() != num_classes * x.len() {
        return Err(Error::DimensionMismatch {
            expected: num_classes * x.len(),
            actual: t_concat.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature vector".into()));
    }
    let n = x.len();
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..num_classes {
        let s = dot(&t_concat[k * n..(k + 1) * n], x);
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}
