//! Supervised training of extractors on generated samples: full
//! supervision with a batch-size schedule, few-shot training from a handful
//! of annotations, and the layer-wise objective
//! `L(S, Y) + Σ_i α·L(u↑(S_i), Y)`.

use serde::{Deserialize, Serialize};

use super::loss::{argmax_mask, cross_entropy_grad};
use super::lse::ProbeWeights;
use super::nse::{NseVariant, NseWeights, DEFAULT_HIDDEN};
use super::SemanticPredictor;
use crate::error::{Error, Result};
use crate::generator::{sample_latent, FeatureGenerator, FeatureStack, LatentVector, Segmenter, SemanticMask};
use crate::metrics::{ClassReport, MiouAccumulator};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_indexed, derive_seed};
use crate::tensor::Map3;

/// Coefficient of every per-layer term in the layer-wise objective.
pub const DEFAULT_LAYER_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPhase {
    /// First epoch of the phase (0-based, inclusive).
    pub start_epoch: usize,
    /// One past the last epoch of the phase.
    pub end_epoch: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Fresh samples drawn per epoch.
    pub epoch_size: usize,
    pub epochs: usize,
    pub phases: Vec<BatchPhase>,
    pub learning_rate: f64,
    /// 0-based epoch from which the learning rate is divided.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub beta_1: f64,
    pub beta_2: f64,
}

impl TrainSchedule {
    /// 50 epochs × 1,024 samples; batch 1 for two epochs, 4 for sixteen,
    /// 64 for the remaining thirty-two; lr 1e-3 divided by 10 at epoch 20.
    pub fn paper() -> Self {
        Self {
            epoch_size: 1024,
            epochs: 50,
            phases: vec![
                BatchPhase {
                    start_epoch: 0,
                    end_epoch: 2,
                    batch_size: 1,
                },
                BatchPhase {
                    start_epoch: 2,
                    end_epoch: 18,
                    batch_size: 4,
                },
                BatchPhase {
                    start_epoch: 18,
                    end_epoch: 50,
                    batch_size: 64,
                },
            ],
            learning_rate: 1e-3,
            lr_drop_epoch: 19,
            lr_drop_factor: 10.0,
            beta_1: 0.9,
            beta_2: 0.999,
        }
    }

    /// 2,048 samples (32 epochs × 64) with the same phase structure.
    pub fn desk() -> Self {
        Self {
            epoch_size: 64,
            epochs: 32,
            phases: vec![
                BatchPhase {
                    start_epoch: 0,
                    end_epoch: 2,
                    batch_size: 1,
                },
                BatchPhase {
                    start_epoch: 2,
                    end_epoch: 12,
                    batch_size: 4,
                },
                BatchPhase {
                    start_epoch: 12,
                    end_epoch: 32,
                    batch_size: 16,
                },
            ],
            learning_rate: 1e-3,
            lr_drop_epoch: 12,
            lr_drop_factor: 10.0,
            beta_1: 0.9,
            beta_2: 0.999,
        }
    }

    /// Same structure with `epoch_size` multiplied by `scale`.
    pub fn scaled(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let max_batch = self.phases.iter().map(|p| p.batch_size).max().unwrap_or(1);
        let size = ((self.epoch_size as f64 * scale).round() as usize).max(max_batch);
        self.epoch_size = size.div_ceil(max_batch) * max_batch;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.epoch_size == 0 {
            return bad("schedule needs at least one epoch and sample".into());
        }
        let mut next = 0;
        for p in &self.phases {
            if p.start_epoch != next || p.end_epoch <= p.start_epoch {
                return bad(format!("phases must partition the epochs; gap or overlap at {}", p.start_epoch));
            }
            if p.batch_size == 0 || self.epoch_size % p.batch_size != 0 {
                return bad(format!("batch size {} does not divide epoch size {}", p.batch_size, self.epoch_size));
            }
            next = p.end_epoch;
        }
        if next != self.epochs {
            return bad(format!("phases cover {next} of {} epochs", self.epochs));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("rates must be positive".into());
        }
        Ok(())
    }

    pub fn batch_size_at(&self, epoch: usize) -> usize {
        self.phases
            .iter()
            .find(|p| (p.start_epoch..p.end_epoch).contains(&epoch))
            .map_or(1, |p| p.batch_size)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    pub fn iterations(&self) -> usize {
        self.phases
            .iter()
            .map(|p| (p.end_epoch - p.start_epoch) * (self.epoch_size / p.batch_size))
            .sum()
    }

    pub fn total_samples(&self) -> usize {
        self.epochs * self.epoch_size
    }

    fn adam(&self, len: usize) -> Adam {
        Adam::new(
            AdamConfig {
                learning_rate: self.learning_rate,
                beta_1: self.beta_1,
                beta_2: self.beta_2,
                ..AdamConfig::default()
            },
            len,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    Lse,
    Nse { variant: NseVariant, hidden: usize },
}

impl ProbeKind {
    /// `"lse"`, `"nse-1"` or `"nse-2"`; NSE kinds use [`DEFAULT_HIDDEN`].
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lse" => Ok(ProbeKind::Lse),
            "nse-1" => Ok(ProbeKind::Nse {
                variant: NseVariant::Nse1,
                hidden: DEFAULT_HIDDEN,
            }),
            "nse-2" => Ok(ProbeKind::Nse {
                variant: NseVariant::Nse2,
                hidden: DEFAULT_HIDDEN,
            }),
            other => Err(Error::InvalidArgument(format!("unknown probe kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Lse => "lse",
            ProbeKind::Nse { variant, .. } => variant.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedProbe {
    Lse(ProbeWeights),
    Nse(NseWeights),
}

impl TrainedProbe {
    pub fn as_lse(&self) -> Option<&ProbeWeights> {
        match self {
            TrainedProbe::Lse(w) => Some(w),
            TrainedProbe::Nse(_) => None,
        }
    }

    pub fn into_lse(self) -> Option<ProbeWeights> {
        match self {
            TrainedProbe::Lse(w) => Some(w),
            TrainedProbe::Nse(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedProbe::Lse(w) => w.param_count(),
            TrainedProbe::Nse(w) => w.param_count(),
        }
    }
}

impl SemanticPredictor for TrainedProbe {
    fn num_classes(&self) -> usize {
        match self {
            TrainedProbe::Lse(w) => w.num_classes,
            TrainedProbe::Nse(w) => w.num_classes,
        }
    }

    fn logits(&self, stack: &FeatureStack) -> Result<Map3> {
        match self {
            TrainedProbe::Lse(w) => w.forward(stack),
            TrainedProbe::Nse(w) => w.forward(stack),
        }
    }

    fn feature_grad(&self, stack: &FeatureStack, grad: &Map3) -> Result<Vec<Map3>> {
        match self {
            TrainedProbe::Lse(w) => SemanticPredictor::feature_grad(w, stack, grad),
            TrainedProbe::Nse(w) => SemanticPredictor::feature_grad(w, stack, grad),
        }
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub probe: TrainedProbe,
    /// Mean batch loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    /// Training mIoU accumulated over each epoch (one entry for few-shot).
    pub train_miou: Vec<f64>,
    pub iterations: usize,
    pub batch_size: usize,
}

/// A differentiable training objective over a parameter vector.
trait Objective {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]);
    /// Adds the gradient of the per-sample loss into `acc`; returns the loss
    /// and the predicted mask.
    fn loss_grad(&self, stack: &FeatureStack, target: &SemanticMask, acc: &mut [f64]) -> Result<(f64, SemanticMask)>;
    fn finish(self) -> TrainedProbe;
}

struct LseObjective {
    weights: ProbeWeights,
    alpha: f64,
}

impl Objective for LseObjective {
    fn params(&self) -> Vec<f64> {
        self.weights.flat()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.weights.set_flat(flat);
    }

    fn loss_grad(&self, stack: &FeatureStack, target: &SemanticMask, acc: &mut [f64]) -> Result<(f64, SemanticMask)> {
        let w = &self.weights;
        let (h, wd) = stack.output_size();
        let per_layer = w.layer_logits(stack)?;
        let ups: Vec<Map3> = per_layer.iter().map(|s| w.upsample.apply(s, h, wd)).collect();
        let mut total = Map3::zeros(w.num_classes, h, wd);
        for u in &ups {
            total.add_assign(u);
        }
        let (mut loss, d_total) = cross_entropy_grad(&total, target)?;
        let mut offset = 0;
        for ((x, u), mat) in stack.layers.iter().zip(&ups).zip(&w.matrices) {
            let mut d_up = d_total.clone();
            if self.alpha > 0.0 {
                let (l, mut g) = cross_entropy_grad(u, target)?;
                loss += self.alpha * l;
                g.scale(self.alpha);
                d_up.add_assign(&g);
            }
            let d_layer = w.upsample.adjoint(&d_up, x.height, x.width);
            x.accumulate_outer(&d_layer, &mut acc[offset..offset + mat.len()]);
            offset += mat.len();
        }
        Ok((loss, argmax_mask(&total)))
    }

    fn finish(mut self) -> TrainedProbe {
        self.weights.quantize_f32();
        TrainedProbe::Lse(self.weights)
    }
}

struct NseObjective {
    weights: NseWeights,
}

impl Objective for NseObjective {
    fn params(&self) -> Vec<f64> {
        self.weights.flat()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.weights.set_flat(flat);
    }

    fn loss_grad(&self, stack: &FeatureStack, target: &SemanticMask, acc: &mut [f64]) -> Result<(f64, SemanticMask)> {
        let (logits, cache) = self.weights.forward_cached(stack)?;
        let (loss, d) = cross_entropy_grad(&logits, target)?;
        let (g, _) = self.weights.backward(stack, &cache, &d);
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += v;
        }
        Ok((loss, argmax_mask(&logits)))
    }

    fn finish(mut self) -> TrainedProbe {
        self.weights.quantize_f32();
        TrainedProbe::Nse(self.weights)
    }
}

fn run_schedule<G, S, O>(gen: &G, segmenter: &S, schedule: &TrainSchedule, mut obj: O, seed: u64) -> Result<TrainOutcome>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
    O: Objective,
{
    schedule.validate()?;
    let mut params = obj.params();
    let mut adam = schedule.adam(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut loss_curve = Vec::with_capacity(schedule.iterations());
    let mut train_miou = Vec::with_capacity(schedule.epochs);
    let mut sample = 0u64;
    for epoch in 0..schedule.epochs {
        adam.set_learning_rate(schedule.lr_at(epoch));
        let batch = schedule.batch_size_at(epoch);
        let mut acc = MiouAccumulator::new(gen.num_classes());
        for _ in 0..schedule.epoch_size / batch {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..batch {
                let z = sample_latent(gen.latent_dim(), derive_indexed(seed, "train", sample), None)?;
                sample += 1;
                let stack = gen.generate(&z)?;
                let target = segmenter.segment(&z, &stack)?;
                let (l, pred) = obj.loss_grad(&stack, &target, &mut grad)?;
                acc.add(&pred, &target)?;
                loss += l;
            }
            let inv = 1.0 / batch as f64;
            loss *= inv;
            loss_curve.push(loss);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: loss_curve.len() - 1,
                    loss,
                    trace: loss_curve,
                });
            }
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grad);
            obj.set_params(&params);
        }
        train_miou.push(acc.finish(Vec::new()).miou);
    }
    let iterations = loss_curve.len();
    Ok(TrainOutcome {
        probe: obj.finish(),
        loss_curve,
        train_miou,
        iterations,
        batch_size: schedule.batch_size_at(schedule.epochs - 1),
    })
}

/// Fully supervised training on freshly sampled latents from the `"train"`
/// stream of `seed`.
pub fn train_full<G, S>(gen: &G, segmenter: &S, schedule: &TrainSchedule, kind: ProbeKind, seed: u64) -> Result<TrainOutcome>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
{
    match kind {
        ProbeKind::Lse => {
            let obj = LseObjective {
                weights: ProbeWeights::for_generator(gen),
                alpha: 0.0,
            };
            run_schedule(gen, segmenter, schedule, obj, seed)
        }
        ProbeKind::Nse { variant, hidden } => {
            let obj = NseObjective {
                weights: NseWeights::for_generator(gen, variant, hidden, derive_seed(seed, "nse-init")),
            };
            run_schedule(gen, segmenter, schedule, obj, seed)
        }
    }
}

/// Training with the additional per-layer cross-entropy terms weighted by
/// `alpha`. With `alpha = 0` this is exactly [`train_full`] for an LSE.
pub fn train_layerwise<G, S>(gen: &G, segmenter: &S, schedule: &TrainSchedule, alpha: f64, seed: u64) -> Result<TrainOutcome>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
{
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
    }
    let obj = LseObjective {
        weights: ProbeWeights::for_generator(gen),
        alpha,
    };
    run_schedule(gen, segmenter, schedule, obj, seed)
}

/// Value of the layer-wise objective for one sample.
pub fn layerwise_loss(probe: &ProbeWeights, stack: &FeatureStack, target: &SemanticMask, alpha: f64) -> Result<f64> {
    let obj = LseObjective {
        weights: probe.clone(),
        alpha,
    };
    let mut scratch = vec![0.0; probe.param_count()];
    Ok(obj.loss_grad(stack, target, &mut scratch)?.0)
}

/// Per-layer reports: layer `i` alone (`argmax u↑(S_i)`) scored against the
/// segmenter on `n_samples` evaluation latents.
pub fn layerwise_reports<G, S>(gen: &G, segmenter: &S, probe: &ProbeWeights, n_samples: usize, seed: u64) -> Result<Vec<ClassReport>>
where
    G: FeatureGenerator + ?Sized,
    S: Segmenter + ?Sized,
{
    let layers = probe.depths.len();
    let mut accs = vec![MiouAccumulator::new(probe.num_classes); layers];
    for i in 0..n_samples {
        let z = sample_latent(gen.latent_dim(), derive_indexed(seed, "eval", i as u64), None)?;
        let stack = gen.generate(&z)?;
        let gt = segmenter.segment(&z, &stack)?;
        let (h, w) = stack.output_size();
        for (acc, s) in accs.iter_mut().zip(probe.layer_logits(&stack)?) {
            acc.add(&argmax_mask(&probe.upsample.apply(&s, h, w)), &gt)?;
        }
    }
    Ok(accs.into_iter().map(|a| a.finish(gen.class_names())).collect())
}

/// Batch size and optimizer steps for a supported shot count.
pub fn fewshot_schedule(shots: usize) -> Result<(usize, usize)> {
    match shots {
        1 => Ok((1, 2000)),
        4 => Ok((4, 2000)),
        8 => Ok((8, 1000)),
        16 => Ok((16, 500)),
        _ => Err(Error::InvalidArgument(format!("unsupported shot count {shots}; use 1, 4, 8 or 16"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotOptions {
    pub seed: u64,
    pub learning_rate: f64,
    /// Fraction of the steps after which the learning rate is divided;
    /// 1.0 (the default) keeps it constant.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Re-sample the generator's per-layer noise for every batch.
    pub resample_noise: bool,
    /// Overrides the step count of the shot schedule.
    pub iterations: Option<usize>,
}

impl Default for FewShotOptions {
    fn default() -> Self {
        let paper = TrainSchedule::paper();
        Self {
            seed: 0,
            learning_rate: paper.learning_rate,
            lr_drop_fraction: 1.0,
            lr_drop_factor: paper.lr_drop_factor,
            resample_noise: false,
            iterations: None,
        }
    }
}

/// Trains an LSE on `annotations` only, every batch holding all of them.
pub fn train_fewshot<G>(gen: &G, annotations: &[(LatentVector, SemanticMask)], shots: usize, options: &FewShotOptions) -> Result<TrainOutcome>
where
    G: FeatureGenerator + ?Sized,
{
    train_fewshot_with_progress(gen, annotations, shots, options, |_| {})
}

/// [`train_fewshot`] reporting the number of finished steps after each one.
pub fn train_fewshot_with_progress<G, F>(
    gen: &G,
    annotations: &[(LatentVector, SemanticMask)],
    shots: usize,
    options: &FewShotOptions,
    mut progress: F,
) -> Result<TrainOutcome>
where
    G: FeatureGenerator + ?Sized,
    F: FnMut(usize),
{
    let (batch, default_steps) = fewshot_schedule(shots)?;
    if annotations.len() != shots {
        return Err(Error::InvalidArgument(format!(
            "{} annotations supplied for {shots}-shot training",
            annotations.len()
        )));
    }
    let (h, w) = gen.output_size();
    for (z, mask) in annotations {
        if z.dim() != gen.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: gen.latent_dim(),
                actual: z.dim(),
            });
        }
        if (mask.height, mask.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "annotation mask {}x{} does not match {h}x{w} canvas",
                mask.height, mask.width
            )));
        }
        mask.check_classes(gen.num_classes())?;
    }
    let steps = options.iterations.unwrap_or(default_steps);
    let mut obj = LseObjective {
        weights: ProbeWeights::for_generator(gen),
        alpha: 0.0,
    };
    let mut params = obj.params();
    let mut adam = Adam::new(AdamConfig::with_lr(options.learning_rate), params.len());
    let drop_at = (options.lr_drop_fraction * steps as f64).round() as usize;
    let mut stacks: Vec<FeatureStack> = annotations
        .iter()
        .map(|(z, _)| gen.generate(z))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut loss_curve = Vec::with_capacity(steps);
    let mut acc = MiouAccumulator::new(gen.num_classes());
    for step in 0..steps {
        if step == drop_at {
            adam.set_learning_rate(options.learning_rate / options.lr_drop_factor);
        }
        if options.resample_noise && step > 0 {
            let noise = derive_indexed(options.seed, "fewshot-noise", step as u64);
            stacks = annotations
                .iter()
                .map(|(z, _)| gen.generate_with_noise(z, noise))
                .collect::<Result<_>>()?;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (stack, (_, mask)) in stacks.iter().zip(annotations) {
            let (l, pred) = obj.loss_grad(stack, mask, &mut grad)?;
            if step + 1 == steps {
                acc.add(&pred, mask)?;
            }
            loss += l;
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        loss_curve.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                trace: loss_curve,
            });
        }
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut params, &grad);
        obj.set_params(&params);
        progress(step + 1);
    }
    Ok(TrainOutcome {
        probe: obj.finish(),
        loss_curve,
        train_miou: vec![acc.finish(Vec::new()).miou],
        iterations: steps,
        batch_size: batch,
    })
}
