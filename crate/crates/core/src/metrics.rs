//! Intersection-over-union metrics, probe evaluation and the derived
//! statistics used to compare extractors.
//!
//! Per-class IoU follows the dataset-level convention: for class `k`, the
//! IoU is averaged over the instances whose prediction/ground-truth union
//! for `k` is nonempty, and classes with no such instance are reported as
//! absent and left out of the mIoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{FeatureGenerator, Segmenter, SemanticMask};
use crate::probes::SemanticPredictor;
use crate::rng::derive_indexed;

/// `|A ∩ B| / |A ∪ B|`, or `None` when the union is empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_names: Vec<String>,
    /// `None` marks a class absent from every instance.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: usize,
}

impl ClassReport {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Tab-separated `class<TAB>IoU` rows, `absent` for absent classes.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class\tiou\n");
        for (k, v) in self.per_class.iter().enumerate() {
            let name = self.class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            match v {
                Some(v) => writeln!(out, "{name}\t{v:.6}").unwrap(),
                None => writeln!(out, "{name}\tabsent").unwrap(),
            }
        }
        writeln!(out, "mIoU\t{:.6}", self.miou).unwrap();
        out
    }
}

/// Streaming per-class IoU averaging.
#[derive(Debug, Clone)]
pub struct MiouAccumulator {
    classes: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
    samples: usize,
}

impl MiouAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            sums: vec![0.0; classes],
            counts: vec![0; classes],
            samples: 0,
        }
    }

    pub fn add(&mut self, pred: &SemanticMask, gt: &SemanticMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        pred.check_classes(self.classes)?;
        gt.check_classes(self.classes)?;
        let mut inter = vec![0usize; self.classes];
        let mut union = vec![0usize; self.classes];
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (usize::from(p), usize::from(g));
            if p == g {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[g] += 1;
            }
        }
        for k in 0..self.classes {
            if union[k] > 0 {
                self.sums[k] += inter[k] as f64 / union[k] as f64;
                self.counts[k] += 1;
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self, class_names: Vec<String>) -> ClassReport {
        let per_class: Vec<Option<f64>> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        ClassReport {
            class_names,
            per_class,
            miou,
            samples: self.samples,
        }
    }
}

pub fn miou(preds: &[SemanticMask], gts: &[SemanticMask], classes: usize) -> Result<ClassReport> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            expected: gts.len(),
            actual: preds.len(),
        });
    }
    let mut acc = MiouAccumulator::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.finish((0..classes).map(|k| format!("class{k}")).collect()))
}

/// Scores `probe` against `segmenter` on `n_samples` fresh latents drawn
/// from the `"eval"` stream of `seed` (disjoint from the training stream).
pub fn evaluate_probe<G, S, P>(gen: &G, segmenter: &S, probe: &P, n_samples: usize, seed: u64) -> Result<ClassReport>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let mut acc = MiouAccumulator::new(gen.num_classes());
    for i in 0..n_samples {
        let z = crate::generator::sample_latent(gen.latent_dim(), derive_indexed(seed, "eval", i as u64), None)?;
        let stack = gen.generate(&z)?;
        let gt = segmenter.segment(&z, &stack)?;
        let pred = probe.mask(&stack)?;
        acc.add(&pred, &gt)?;
    }
    Ok(acc.finish(gen.class_names()))
}

/// `(y − y*) / y*`.
pub fn relative_gap(value: f64, best: f64) -> Result<f64> {
    if !(best > 0.0) {
        return Err(Error::InvalidArgument(format!("reference score must be positive, got {best}")));
    }
    Ok((value - best) / best)
}

/// Classes for which at least one report reaches `threshold` IoU.
pub fn select_categories(reports: &[ClassReport], threshold: f64) -> Result<Vec<usize>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to select from".into()))?;
    let classes = first.num_classes();
    if reports.iter().any(|r| r.num_classes() != classes) {
        return Err(Error::ShapeMismatch("reports disagree on the class universe".into()));
    }
    Ok((0..classes)
        .filter(|&k| reports.iter().any(|r| r.per_class[k].is_some_and(|v| v >= threshold)))
        .collect())
}

pub const DEFAULT_SELECTION_THRESHOLD: f64 = 0.10;

/// mIoU of a single prediction against its target.
pub fn pair_miou(target: &SemanticMask, pred: &SemanticMask, classes: usize) -> Result<f64> {
    let mut acc = MiouAccumulator::new(classes);
    acc.add(pred, target)?;
    Ok(acc.finish(Vec::new()).miou)
}

/// Mean over targets `i` and samples `j` of `mIoU(Y_i, mask_ij)`, each
/// target weighted equally.
pub fn scs_agreement(targets: &[SemanticMask], sample_sets: &[Vec<SemanticMask>], classes: usize) -> Result<f64> {
    if targets.len() != sample_sets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            actual: sample_sets.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    let mut total = 0.0;
    for (t, set) in targets.iter().zip(sample_sets) {
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty sample set".into()));
        }
        let mut s = 0.0;
        for pred in set {
            s += pair_miou(t, pred, classes)?;
        }
        total += s / set.len() as f64;
    }
    Ok(total / targets.len() as f64)
}
