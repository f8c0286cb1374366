//! The linear semantic extractor: a 1×1 projection of every internal layer,
//! resampled to the output resolution and summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{FeatureGenerator, FeatureStack};
use crate::tensor::{upsample_bilinear, upsample_bilinear_adjoint, upsample_nearest, upsample_nearest_adjoint, Map3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

impl UpsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Nearest => "nearest",
        }
    }

    pub fn apply(self, input: &Map3, height: usize, width: usize) -> Map3 {
        match self {
            UpsampleMode::Bilinear => upsample_bilinear(input, height, width),
            UpsampleMode::Nearest => upsample_nearest(input, height / input.height),
        }
    }

    pub fn adjoint(self, grad: &Map3, height: usize, width: usize) -> Map3 {
        match self {
            UpsampleMode::Bilinear => upsample_bilinear_adjoint(grad, height, width),
            UpsampleMode::Nearest => upsample_nearest_adjoint(grad, grad.height / height),
        }
    }
}

/// Per-layer projection matrices `T_i` of shape `(m, c_i)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub num_classes: usize,
    pub depths: Vec<usize>,
    pub matrices: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub upsample: UpsampleMode,
}

impl ProbeWeights {
    pub fn zeros(num_classes: usize, depths: &[usize], class_names: Vec<String>) -> Self {
        Self {
            num_classes,
            depths: depths.to_vec(),
            matrices: depths.iter().map(|c| vec![0.0; num_classes * c]).collect(),
            class_names,
            upsample: UpsampleMode::Bilinear,
        }
    }

    pub fn for_generator<G: FeatureGenerator + ?Sized>(gen: &G) -> Self {
        let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
        Self::zeros(gen.num_classes(), &depths, gen.class_names())
    }

    /// Total feature depth `n = Σ c_i`.
    pub fn total_depth(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn param_count(&self) -> usize {
        self.num_classes * self.total_depth()
    }

    /// The concatenated `(m, n)` matrix `T = [T_1 … T_{N−1}]`, row-major.
    pub fn concat(&self) -> Vec<f64> {
        let n = self.total_depth();
        let mut out = vec![0.0; self.num_classes * n];
        let mut offset = 0;
        for (mat, &c) in self.matrices.iter().zip(&self.depths) {
            for k in 0..self.num_classes {
                out[k * n + offset..k * n + offset + c].copy_from_slice(&mat[k * c..(k + 1) * c]);
            }
            offset += c;
        }
        out
    }

    /// Inverse of [`ProbeWeights::concat`].
    pub fn set_from_concat(&mut self, t: &[f64]) -> Result<()> {
        let n = self.total_depth();
        if t.len() != self.num_classes * n {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes * n,
                actual: t.len(),
            });
        }
        let mut offset = 0;
        for (mat, &c) in self.matrices.iter_mut().zip(&self.depths) {
            for k in 0..self.num_classes {
                mat[k * c..(k + 1) * c].copy_from_slice(&t[k * n + offset..k * n + offset + c]);
            }
            offset += c;
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.matrices.concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for mat in &mut self.matrices {
            let len = mat.len();
            mat.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ProbeWeights, b: f64) -> Result<ProbeWeights> {
        if self.depths != other.depths || self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch("probe layouts differ".into()));
        }
        let mut out = self.clone();
        for (o, (x, y)) in out.matrices.iter_mut().zip(self.matrices.iter().zip(&other.matrices)) {
            for (v, (p, q)) in o.iter_mut().zip(x.iter().zip(y)) {
                *v = a * p + b * q;
            }
        }
        Ok(out)
    }

    /// Rounds every weight to the nearest `f32`, the archive's storage type.
    pub fn quantize_f32(&mut self) {
        for v in self.matrices.iter_mut().flatten() {
            *v = f64::from(*v as f32);
        }
    }

    pub fn check_stack(&self, stack: &FeatureStack) -> Result<()> {
        let depths = stack.depths();
        if depths != self.depths {
            return Err(Error::ShapeMismatch(format!(
                "probe expects layer depths {:?}, stack has {:?}",
                self.depths, depths
            )));
        }
        let (h, w) = stack.output_size();
        for layer in &stack.layers {
            if layer.height > h || layer.width > w {
                return Err(Error::ShapeMismatch("layer larger than output".into()));
            }
            if self.upsample == UpsampleMode::Nearest && (h % layer.height != 0 || w % layer.width != 0) {
                return Err(Error::ShapeMismatch("nearest upsampling needs integer factors".into()));
            }
        }
        Ok(())
    }

    /// Per-layer logits `S_i = T_i · x_i` at each layer's native resolution.
    pub fn layer_logits(&self, stack: &FeatureStack) -> Result<Vec<Map3>> {
        self.check_stack(stack)?;
        Ok(stack
            .layers
            .iter()
            .zip(&self.matrices)
            .map(|(x, t)| x.project(t, self.num_classes))
            .collect())
    }

    /// `S = Σ_i u↑(T_i · x_i)`.
    pub fn forward(&self, stack: &FeatureStack) -> Result<Map3> {
        let (h, w) = stack.output_size();
        let mut out = Map3::zeros(self.num_classes, h, w);
        for s in self.layer_logits(stack)? {
            out.add_assign(&self.upsample.apply(&s, h, w));
        }
        Ok(out)
    }

    /// `S = T · X` with `X` the concatenation of the upsampled layers.
    pub fn forward_concat(&self, stack: &FeatureStack) -> Result<Map3> {
        self.check_stack(stack)?;
        let x = upsampled_concat(stack, self.upsample);
        Ok(x.project(&self.concat(), self.num_classes))
    }

    /// Gradients of a scalar loss with upstream `grad` (shape `(m, h, w)`)
    /// with respect to each `T_i`, accumulated into `acc` (flat layout of
    /// [`ProbeWeights::flat`]).
    pub fn accumulate_weight_grad(&self, stack: &FeatureStack, grad: &Map3, acc: &mut [f64]) {
        let mut offset = 0;
        for (x, t) in stack.layers.iter().zip(&self.matrices) {
            let g = self.upsample.adjoint(grad, x.height, x.width);
            x.accumulate_outer(&g, &mut acc[offset..offset + t.len()]);
            offset += t.len();
        }
    }

    /// Gradient with respect to every feature layer.
    pub fn feature_grad(&self, stack: &FeatureStack, grad: &Map3) -> Vec<Map3> {
        stack
            .layers
            .iter()
            .zip(self.matrices.iter().zip(&self.depths))
            .map(|(x, (t, &c))| self.upsample.adjoint(grad, x.height, x.width).project_transpose(t, c))
            .collect()
    }
}

/// The `(n, h, w)` tensor `X` of all layers resampled to output size.
pub fn upsampled_concat(stack: &FeatureStack, mode: UpsampleMode) -> Map3 {
    let (h, w) = stack.output_size();
    let ups: Vec<Map3> = stack.layers.iter().map(|x| mode.apply(x, h, w)).collect();
    Map3::concat(&ups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(layers: Vec<Map3>, out: usize) -> FeatureStack {
        FeatureStack {
            layers,
            image: Map3::zeros(3, out, out),
        }
    }

    fn filled(c: usize, r: usize, seed: usize) -> Map3 {
        let data = (0..c * r * r)
            .map(|i| (((i + seed) * 7919 % 1000) as f64) / 500.0 - 1.0)
            .collect();
        Map3::from_vec(c, r, r, data)
    }

    #[test]
    fn identity_probe_returns_features() {
        let x = filled(3, 4, 1);
        let s = stack(vec![x.clone()], 4);
        let mut w = ProbeWeights::zeros(3, &[3], vec![]);
        w.matrices[0] = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        assert_eq!(w.forward(&s).unwrap(), x);
        assert_eq!(w.forward_concat(&s).unwrap(), w.forward(&s).unwrap());
    }

    #[test]
    fn zero_layer_is_annihilated() {
        let s = stack(vec![filled(2, 4, 1), filled(3, 8, 2)], 8);
        let mut w = ProbeWeights::zeros(3, &[2, 3], vec![]);
        w.matrices[0] = vec![0.5, -1.0, 2.0, 0.1, 0.0, 1.0];
        let expected = upsample_bilinear(&s.layers[0].project(&w.matrices[0], 3), 8, 8);
        assert!(w.forward(&s).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn concat_matches_per_layer() {
        let s = stack(vec![filled(2, 4, 3), filled(3, 8, 4)], 8);
        let mut w = ProbeWeights::zeros(3, &[2, 3], vec![]);
        let t: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        w.set_from_concat(&t).unwrap();
        assert_eq!(w.concat(), t);
        let a = w.forward(&s).unwrap();
        let b = w.forward_concat(&s).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn constant_single_pixel_layer() {
        let s = stack(vec![Map3::from_vec(2, 1, 1, vec![2.0, -1.0])], 4);
        let mut w = ProbeWeights::zeros(2, &[2], vec![]);
        w.matrices[0] = vec![1.0, 1.0, 0.5, 3.0];
        let out = w.forward_concat(&s).unwrap();
        assert!(out.plane(0).iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(out.plane(1).iter().all(|v| (*v + 2.0).abs() < 1e-15));
    }

    #[test]
    fn depth_mismatch_rejected() {
        let s = stack(vec![filled(2, 4, 1)], 4);
        let w = ProbeWeights::zeros(3, &[3], vec![]);
        assert!(matches!(w.forward(&s), Err(Error::ShapeMismatch(_))));
        assert!(w.forward_concat(&s).is_err());
    }
}
