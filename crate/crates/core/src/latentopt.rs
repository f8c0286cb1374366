//! Latent-space optimization: semantic and colour image editing, and
//! semantic-conditional sampling.
//!
//! Every loss comes with its reverse-mode gradient with respect to `z`,
//! routed through [`SemanticPredictor::feature_grad`] and
//! [`FeatureGenerator::backprop`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{sample_latent, FeatureGenerator, FeatureGrad, FeatureStack, LatentVector, SemanticMask};
use crate::optim::{Adam, AdamConfig};
use crate::probes::{cross_entropy, cross_entropy_grad, SemanticPredictor};
use crate::rng::derive_indexed;
use crate::tensor::Map3;

pub const SIE_LEARNING_RATE: f64 = 0.01;
pub const SCS_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_ITERATIONS: usize = 50;
pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const N_INIT_FACES: usize = 10;
pub const N_INIT_SCENES: usize = 100;

/// A colour stroke `C` and the binary region `M` it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorStroke {
    pub image: Map3,
    pub region: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EditSpec {
    Color(ColorStroke),
    Semantic { target: SemanticMask },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    /// Weight of `L_s` (semantic mode) or `L_c` (colour mode).
    pub lambda_edit: f64,
    pub lambda_p: f64,
    pub lambda_n: f64,
    pub lambda_z: f64,
    /// Adds `λ_p·L_p` in semantic mode, with `M` the pixels whose target
    /// label differs from the initial segmentation.
    pub semantic_preservation: bool,
    pub n_init: usize,
    /// Norm clamp for SCS candidate latents.
    pub truncation: Option<f64>,
}

impl OptSettings {
    pub fn sie() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            learning_rate: SIE_LEARNING_RATE,
            beta_1: 0.9,
            beta_2: 0.999,
            lambda_edit: 1.0,
            lambda_p: 1.0,
            lambda_n: DEFAULT_LAMBDA,
            lambda_z: DEFAULT_LAMBDA,
            semantic_preservation: false,
            n_init: N_INIT_FACES,
            truncation: None,
        }
    }

    pub fn scs() -> Self {
        Self {
            learning_rate: SCS_LEARNING_RATE,
            ..Self::sie()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let weights = [self.lambda_edit, self.lambda_p, self.lambda_n, self.lambda_z];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("loss coefficients must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta_1) || !(0.0..1.0).contains(&self.beta_2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
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

fn region_weight(region: &[bool], inverted: bool) -> f64 {
    region.iter().filter(|&&r| r != inverted).count() as f64
}

fn masked_sq_error(a: &Map3, b: &Map3, region: &[bool], inverted: bool) -> Result<(f64, Map3)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("images {:?} and {:?}", a.shape(), b.shape())));
    }
    let n = a.plane_len();
    if region.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: region.len(),
        });
    }
    let weight = region_weight(region, inverted);
    if weight == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mut loss = 0.0;
    let mut grad = Map3::zeros(a.channels, a.height, a.width);
    for c in 0..a.channels {
        for (p, &r) in region.iter().enumerate() {
            if r != inverted {
                let i = c * n + p;
                let d = a.data[i] - b.data[i];
                loss += d * d;
                grad.data[i] = 2.0 * d / weight;
            }
        }
    }
    Ok((loss / weight, grad))
}

/// `‖M ⊙ (img − C)‖² / ‖M‖²`.
pub fn color_edit_loss(img: &Map3, stroke: &Map3, region: &[bool]) -> Result<f64> {
    Ok(masked_sq_error(img, stroke, region, false)?.0)
}

pub fn color_edit_loss_grad(img: &Map3, stroke: &Map3, region: &[bool]) -> Result<(f64, Map3)> {
    masked_sq_error(img, stroke, region, false)
}

/// `‖(1 − M) ⊙ (img − img0)‖² / ‖1 − M‖²`.
pub fn preservation_loss(img: &Map3, img0: &Map3, region: &[bool]) -> Result<f64> {
    Ok(masked_sq_error(img, img0, region, true)?.0)
}

pub fn preservation_loss_grad(img: &Map3, img0: &Map3, region: &[bool]) -> Result<(f64, Map3)> {
    masked_sq_error(img, img0, region, true)
}

/// `‖z − z0‖²`.
pub fn neighbor_loss(z: &LatentVector, z0: &LatentVector) -> Result<f64> {
    if z.dim() != z0.dim() {
        return Err(Error::DimensionMismatch {
            expected: z0.dim(),
            actual: z.dim(),
        });
    }
    Ok(z.0.iter().zip(&z0.0).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn neighbor_loss_grad(z: &LatentVector, z0: &LatentVector) -> Result<(f64, Vec<f64>)> {
    let loss = neighbor_loss(z, z0)?;
    Ok((loss, z.0.iter().zip(&z0.0).map(|(a, b)| 2.0 * (a - b)).collect()))
}

/// `‖z‖²`.
pub fn prior_loss(z: &LatentVector) -> f64 {
    z.0.iter().map(|v| v * v).sum()
}

pub fn prior_loss_grad(z: &LatentVector) -> (f64, Vec<f64>) {
    (prior_loss(z), z.0.iter().map(|v| 2.0 * v).collect())
}

fn require_differentiable<P: SemanticPredictor + ?Sized>(predictor: &P) -> Result<()> {
    if predictor.is_differentiable() {
        Ok(())
    } else {
        Err(Error::NonDifferentiable)
    }
}

/// `CE(P(G(z)), Y)`; any predictor may be evaluated.
pub fn semantic_edit_loss<G, P>(predictor: &P, gen: &G, z: &LatentVector, target: &SemanticMask) -> Result<f64>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    let stack = gen.generate(z)?;
    cross_entropy(&predictor.logits(&stack)?, target)
}

/// `L_s` and its gradient with respect to `z`.
pub fn semantic_edit_loss_grad<G, P>(
    predictor: &P,
    gen: &G,
    z: &LatentVector,
    target: &SemanticMask,
) -> Result<(f64, Vec<f64>)>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    require_differentiable(predictor)?;
    let stack = gen.generate(z)?;
    let (loss, d_logits) = cross_entropy_grad(&predictor.logits(&stack)?, target)?;
    let layers = predictor.feature_grad(&stack, &d_logits)?;
    let grad = gen.backprop(
        z,
        &FeatureGrad {
            layers: Some(layers),
            image: None,
        },
    )?;
    Ok((loss, grad))
}

/// `L_c(G(z))` and its gradient with respect to `z`.
pub fn color_edit_loss_grad_z<G>(gen: &G, z: &LatentVector, stroke: &ColorStroke) -> Result<(f64, Vec<f64>)>
where
    G: FeatureGenerator + ?Sized,
{
    let stack = gen.generate(z)?;
    let (loss, d_img) = color_edit_loss_grad(&stack.image, &stroke.image, &stroke.region)?;
    let grad = gen.backprop(
        z,
        &FeatureGrad {
            layers: None,
            image: Some(d_img),
        },
    )?;
    Ok((loss, grad))
}

/// `L_p(G(z), img0)` and its gradient with respect to `z`.
pub fn preservation_loss_grad_z<G>(gen: &G, z: &LatentVector, img0: &Map3, region: &[bool]) -> Result<(f64, Vec<f64>)>
where
    G: FeatureGenerator + ?Sized,
{
    let stack = gen.generate(z)?;
    let (loss, d_img) = preservation_loss_grad(&stack.image, img0, region)?;
    let grad = gen.backprop(
        z,
        &FeatureGrad {
            layers: None,
            image: Some(d_img),
        },
    )?;
    Ok((loss, grad))
}

/// Per-iteration record of an optimization run; entry `i` is evaluated at
/// `z_i`, so both vectors hold `N + 1` values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub total: Vec<f64>,
    /// `L_s`, `L_c` or the SCS cross-entropy alone.
    pub edit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub latent: LatentVector,
    pub trace: OptTrace,
}

/// Everything the composite objective needs that stays fixed across steps.
struct Objective<'a, G: ?Sized, P: ?Sized> {
    gen: &'a G,
    predictor: &'a P,
    z0: &'a LatentVector,
    spec: &'a EditSpec,
    settings: &'a OptSettings,
    img0: Option<Map3>,
    preserve_region: Option<Vec<bool>>,
}

impl<G, P> Objective<'_, G, P>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    /// `(total, edit term, ∂total/∂z)`.
    fn eval(&self, z: &LatentVector, stack: &FeatureStack) -> Result<(f64, f64, Vec<f64>)> {
        let s = self.settings;
        let mut layer_grads = None;
        let mut image_grad: Option<Map3> = None;
        let mut total = 0.0;
        let edit = match self.spec {
            EditSpec::Semantic { target } => {
                let (loss, mut d) = cross_entropy_grad(&self.predictor.logits(stack)?, target)?;
                if s.lambda_edit > 0.0 {
                    d.scale(s.lambda_edit);
                    layer_grads = Some(self.predictor.feature_grad(stack, &d)?);
                }
                loss
            }
            EditSpec::Color(stroke) => {
                let (loss, mut d) = color_edit_loss_grad(&stack.image, &stroke.image, &stroke.region)?;
                d.scale(s.lambda_edit);
                image_grad = Some(d);
                loss
            }
        };
        total += s.lambda_edit * edit;
        if let (Some(img0), Some(region)) = (&self.img0, &self.preserve_region) {
            let (loss, mut d) = preservation_loss_grad(&stack.image, img0, region)?;
            total += s.lambda_p * loss;
            d.scale(s.lambda_p);
            match &mut image_grad {
                Some(g) => g.add_assign(&d),
                None => image_grad = Some(d),
            }
        }
        let mut grad = if layer_grads.is_some() || image_grad.is_some() {
            self.gen.backprop(
                z,
                &FeatureGrad {
                    layers: layer_grads,
                    image: image_grad,
                },
            )?
        } else {
            vec![0.0; z.dim()]
        };
        let (ln, gn) = neighbor_loss_grad(z, self.z0)?;
        let (lz, gz) = prior_loss_grad(z);
        total += s.lambda_n * ln + s.lambda_z * lz;
        for ((g, a), b) in grad.iter_mut().zip(&gn).zip(&gz) {
            *g += s.lambda_n * a + s.lambda_z * b;
        }
        Ok((total, edit, grad))
    }
}

fn check_spec<G, P>(spec: &EditSpec, gen: &G, predictor: &P) -> Result<()>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    let (h, w) = gen.output_size();
    match spec {
        EditSpec::Semantic { target } => {
            require_differentiable(predictor)?;
            if (target.height, target.width) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "target mask {}x{} does not match {h}x{w} canvas",
                    target.height, target.width
                )));
            }
            target.check_classes(gen.num_classes())
        }
        EditSpec::Color(stroke) => {
            if stroke.image.shape() != (3, h, w) {
                return Err(Error::ShapeMismatch(format!("stroke image {:?}", stroke.image.shape())));
            }
            if stroke.region.len() != h * w {
                return Err(Error::DimensionMismatch {
                    expected: h * w,
                    actual: stroke.region.len(),
                });
            }
            if !stroke.region.iter().any(|&r| r) {
                return Err(Error::EmptyMask);
            }
            Ok(())
        }
    }
}

/// Runs `N` Adam steps on the editing objective starting from `z0`:
/// semantic mode minimizes `λ_s·L_s + λ_n·L_n + λ_z·L_z` (plus `λ_p·L_p`
/// when enabled), colour mode `λ_c·L_c + λ_p·L_p + λ_n·L_n + λ_z·L_z`.
pub fn edit_latent<G, P>(z0: &LatentVector, spec: &EditSpec, settings: &OptSettings, gen: &G, predictor: &P) -> Result<EditOutcome>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    edit_latent_with_progress(z0, spec, settings, gen, predictor, |_| {})
}

/// [`edit_latent`] reporting the number of finished steps after each one.
pub fn edit_latent_with_progress<G, P, F>(
    z0: &LatentVector,
    spec: &EditSpec,
    settings: &OptSettings,
    gen: &G,
    predictor: &P,
    mut progress: F,
) -> Result<EditOutcome>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
    F: FnMut(usize),
{
    settings.validate()?;
    check_spec(spec, gen, predictor)?;
    if z0.dim() != gen.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.latent_dim(),
            actual: z0.dim(),
        });
    }
    let stack0 = gen.generate(z0)?;
    let preserve_region = match spec {
        EditSpec::Color(stroke) if settings.lambda_p > 0.0 => {
            Some(stroke.region.clone()).filter(|r| r.iter().any(|&v| !v))
        }
        EditSpec::Semantic { target } if settings.semantic_preservation && settings.lambda_p > 0.0 => {
            let before = predictor.mask(&stack0)?;
            let changed: Vec<bool> = before.labels.iter().zip(&target.labels).map(|(a, b)| a != b).collect();
            Some(changed).filter(|r| r.iter().any(|&v| !v))
        }
        _ => None,
    };
    let objective = Objective {
        gen,
        predictor,
        z0,
        spec,
        settings,
        img0: preserve_region.as_ref().map(|_| stack0.image.clone()),
        preserve_region,
    };
    let mut z = z0.clone();
    let mut adam = settings.adam(z.dim());
    let mut trace = OptTrace::default();
    let mut stack = stack0;
    for step in 0..=settings.iterations {
        let (total, edit, grad) = objective.eval(&z, &stack)?;
        trace.total.push(total);
        trace.edit.push(edit);
        if !total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: total,
                trace: trace.total,
            });
        }
        if step == settings.iterations {
            break;
        }
        adam.step(&mut z.0, &grad);
        stack = gen.generate(&z)?;
        progress(step + 1);
    }
    Ok(EditOutcome { latent: z, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScsInit {
    pub latent: LatentVector,
    pub index: usize,
    /// Matching-pixel count `P_i` of every candidate.
    pub scores: Vec<usize>,
}

/// Picks the candidate whose predicted mask matches `target` on the most
/// pixels; ties resolve to the lowest index.
pub fn scs_select<G, P>(target: &SemanticMask, candidates: &[LatentVector], gen: &G, predictor: &P) -> Result<ScsInit>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("n_init must be at least 1".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for z in candidates {
        let mask = predictor.mask(&gen.generate(z)?)?;
        if (mask.height, mask.width) != (target.height, target.width) {
            return Err(Error::ShapeMismatch("target mask does not match canvas".into()));
        }
        scores.push(mask.labels.iter().zip(&target.labels).filter(|(a, b)| a == b).count());
    }
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(ScsInit {
        latent: candidates[index].clone(),
        index,
        scores,
    })
}

/// Samples `n_init` latents from the `"scs-init"` stream of `seed` and
/// keeps the best match.
pub fn scs_init<G, P>(target: &SemanticMask, n_init: usize, gen: &G, predictor: &P, seed: u64, truncation: Option<f64>) -> Result<ScsInit>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    let candidates = (0..n_init)
        .map(|i| sample_latent(gen.latent_dim(), derive_indexed(seed, "scs-init", i as u64), truncation))
        .collect::<Result<Vec<_>>>()?;
    scs_select(target, &candidates, gen, predictor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScsOutcome {
    pub init: ScsInit,
    pub latent: LatentVector,
    pub trace: OptTrace,
}

/// [`scs_init`] followed by `N` Adam steps on `CE(P(G(z)), Y)`.
pub fn scs_sample<G, P>(target: &SemanticMask, settings: &OptSettings, gen: &G, predictor: &P, seed: u64) -> Result<ScsOutcome>
where
    G: FeatureGenerator + ?Sized,
    P: SemanticPredictor + ?Sized,
{
    settings.validate()?;
    if settings.iterations > 0 {
        require_differentiable(predictor)?;
    }
    target.check_classes(gen.num_classes())?;
    let init = scs_init(target, settings.n_init, gen, predictor, seed, settings.truncation)?;
    let mut z = init.latent.clone();
    let mut adam = settings.adam(z.dim());
    let mut trace = OptTrace::default();
    for step in 0..=settings.iterations {
        let (loss, grad) = if step < settings.iterations {
            semantic_edit_loss_grad(predictor, gen, &z, target)?
        } else {
            (semantic_edit_loss(predictor, gen, &z, target)?, Vec::new())
        };
        trace.total.push(loss);
        trace.edit.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                trace: trace.total,
            });
        }
        if step < settings.iterations {
            adam.step(&mut z.0, &grad);
        }
    }
    Ok(ScsOutcome { init, latent: z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::SyntheticGenerator;
    use crate::probes::ProbeWeights;

    #[test]
    fn color_loss_closed_forms() {
        let c = Map3::zeros(3, 2, 2);
        let mut img = c.clone();
        let full = vec![true; 4];
        assert_eq!(color_edit_loss(&img, &c, &full).unwrap(), 0.0);
        img.data.iter_mut().for_each(|v| *v = 0.2);
        assert!((color_edit_loss(&img, &c, &full).unwrap() - 3.0 * 0.04).abs() < 1e-15);
        let half = vec![true, true, false, false];
        assert!((color_edit_loss(&img, &c, &half).unwrap() - 3.0 * 0.04).abs() < 1e-15);
        assert!(matches!(color_edit_loss(&img, &c, &[false; 4]), Err(Error::EmptyMask)));
    }

    #[test]
    fn preservation_ignores_the_region() {
        let img0 = Map3::zeros(3, 1, 2);
        let mut img = img0.clone();
        img.data[0] = 5.0;
        let region = vec![true, false];
        assert_eq!(preservation_loss(&img, &img0, &region).unwrap(), 0.0);
        img.data[1] = 1.0;
        assert_eq!(preservation_loss(&img, &img0, &region).unwrap(), 1.0);
        assert!(matches!(preservation_loss(&img, &img0, &[true, true]), Err(Error::EmptyMask)));
    }

    #[test]
    fn regularizers() {
        let z = LatentVector(vec![1.0, -2.0]);
        assert_eq!(neighbor_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(prior_loss(&LatentVector(vec![0.0; 3])), 0.0);
        assert_eq!(prior_loss(&z), 5.0);
        assert!(neighbor_loss(&z, &LatentVector(vec![0.0])).is_err());
    }

    #[test]
    fn settings_defaults() {
        let s = OptSettings::sie();
        assert_eq!((s.iterations, s.learning_rate), (50, 0.01));
        assert_eq!((s.lambda_n, s.lambda_z), (1e-3, 1e-3));
        assert_eq!(OptSettings::scs().learning_rate, 1e-3);
        assert_eq!((N_INIT_FACES, N_INIT_SCENES), (10, 100));
        assert!(OptSettings { learning_rate: 0.0, ..s }.validate().is_err());
        assert!(OptSettings { lambda_n: -1.0, ..s }.validate().is_err());
    }

    fn small() -> (SyntheticGenerator, ProbeWeights) {
        let gen = SyntheticGenerator::new(crate::GeneratorConfig {
            latent_dim: 6,
            layer_resolutions: vec![4, 8],
            layer_depths: vec![6, 6],
            ..crate::GeneratorConfig::default()
        })
        .unwrap();
        let mut probe = ProbeWeights::for_generator(&gen);
        let flat: Vec<f64> = (0..probe.flat().len()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        probe.set_flat(&flat);
        (gen, probe)
    }

    #[test]
    fn composite_objective_gradient_matches_differences() {
        let (gen, probe) = small();
        let z0 = sample_latent(6, 3, None).unwrap();
        let target = SemanticMask::new(8, 8, (0..64).map(|p| (p % 5) as u8).collect()).unwrap();
        let stroke = ColorStroke {
            image: Map3::from_vec(3, 8, 8, vec![0.3; 192]),
            region: (0..64).map(|p| p < 20).collect(),
        };
        let settings = OptSettings {
            semantic_preservation: true,
            lambda_p: 0.5,
            lambda_n: 0.2,
            lambda_z: 0.1,
            ..OptSettings::sie()
        };
        for spec in [EditSpec::Semantic { target }, EditSpec::Color(stroke)] {
            let stack0 = gen.generate(&z0).unwrap();
            let region: Vec<bool> = (0..64).map(|p| p % 3 == 0).collect();
            let objective = Objective {
                gen: &gen,
                predictor: &probe,
                z0: &z0,
                spec: &spec,
                settings: &settings,
                img0: Some(stack0.image.clone()),
                preserve_region: Some(region),
            };
            let z = LatentVector(z0.0.iter().map(|v| v + 0.3).collect());
            let f = |z: &LatentVector| objective.eval(z, &gen.generate(z).unwrap()).unwrap().0;
            let (_, _, grad) = objective.eval(&z, &gen.generate(&z).unwrap()).unwrap();
            for i in 0..z.dim() {
                let h = 1e-5;
                let (mut a, mut b) = (z.clone(), z.clone());
                a.0[i] += h;
                b.0[i] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_iterations_return_start() {
        let (gen, probe) = small();
        let z0 = sample_latent(6, 1, None).unwrap();
        let target = SemanticMask::filled(8, 8, 1);
        let settings = OptSettings {
            iterations: 0,
            ..OptSettings::sie()
        };
        let out = edit_latent(&z0, &EditSpec::Semantic { target }, &settings, &gen, &probe).unwrap();
        assert_eq!(out.latent, z0);
        assert_eq!(out.trace.total.len(), 1);
    }

    #[test]
    fn non_differentiable_predictor_refused() {
        let (gen, _) = small();
        let palette = crate::probes::PaletteSegmenter::new(gen.palette().to_vec());
        let z0 = sample_latent(6, 1, None).unwrap();
        let spec = EditSpec::Semantic {
            target: SemanticMask::filled(8, 8, 1),
        };
        assert!(matches!(
            edit_latent(&z0, &spec, &OptSettings::sie(), &gen, &palette),
            Err(Error::NonDifferentiable)
        ));
    }
}
