//! Semantic extractors over feature stacks and their training loops.

pub mod loss;
pub mod lse;
pub mod nse;
pub mod train;

use crate::error::{Error, Result};
use crate::generator::{FeatureStack, SemanticMask};
use crate::tensor::Map3;

pub use loss::{argmax_mask, cross_entropy, cross_entropy_grad};
pub use lse::{upsampled_concat, ProbeWeights, UpsampleMode};
pub use nse::{NseVariant, NseWeights, DEFAULT_HIDDEN};
pub use train::{
    fewshot_schedule, layerwise_loss, layerwise_reports, train_fewshot, train_fewshot_with_progress, train_full, train_layerwise, BatchPhase,
    FewShotOptions, ProbeKind, TrainOutcome, TrainSchedule, TrainedProbe, DEFAULT_LAYER_ALPHA,
};

/// Anything that maps a feature stack to `(m, h, w)` semantic logits.
pub trait SemanticPredictor: Send + Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, stack: &FeatureStack) -> Result<Map3>;

    /// Gradient of a scalar with upstream `grad` on the logits with respect
    /// to each feature layer. Predictors that cannot differentiate return
    /// [`Error::NonDifferentiable`].
    fn feature_grad(&self, _stack: &FeatureStack, _grad: &Map3) -> Result<Vec<Map3>> {
        Err(Error::NonDifferentiable)
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    fn mask(&self, stack: &FeatureStack) -> Result<SemanticMask> {
        Ok(argmax_mask(&self.logits(stack)?))
    }
}

impl SemanticPredictor for ProbeWeights {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, stack: &FeatureStack) -> Result<Map3> {
        self.forward(stack)
    }

    fn feature_grad(&self, stack: &FeatureStack, grad: &Map3) -> Result<Vec<Map3>> {
        self.check_stack(stack)?;
        Ok(ProbeWeights::feature_grad(self, stack, grad))
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

impl SemanticPredictor for NseWeights {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, stack: &FeatureStack) -> Result<Map3> {
        self.forward(stack)
    }

    fn feature_grad(&self, stack: &FeatureStack, grad: &Map3) -> Result<Vec<Map3>> {
        let (_, cache) = self.forward_cached(stack)?;
        Ok(self.backward(stack, &cache, grad).1)
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

/// Segments the rendered image by nearest palette colour. Plays the role of
/// an image-space segmenter: usable for scoring, never for gradients.
#[derive(Debug, Clone)]
pub struct PaletteSegmenter {
    palette: Vec<[f64; 3]>,
}

impl PaletteSegmenter {
    pub fn new(palette: Vec<[f64; 3]>) -> Self {
        Self { palette }
    }
}

impl SemanticPredictor for PaletteSegmenter {
    fn num_classes(&self) -> usize {
        self.palette.len()
    }

    /// One-hot logits (`0` / `1`) of the nearest palette entry.
    fn logits(&self, stack: &FeatureStack) -> Result<Map3> {
        let img = &stack.image;
        let n = img.plane_len();
        let mut out = Map3::zeros(self.palette.len(), img.height, img.width);
        for p in 0..n {
            let rgb = [img.data[p], img.data[n + p], img.data[2 * n + p]];
            let mut best = (0, f64::INFINITY);
            for (k, c) in self.palette.iter().enumerate() {
                let d: f64 = (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            out.data[best.0 * n + p] = 1.0;
        }
        Ok(out)
    }
}
