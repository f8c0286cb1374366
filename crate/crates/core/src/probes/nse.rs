//! Nonlinear semantic extractors built from 3×3 convolutions and ReLUs.
//!
//! * NSE-1: three convolutions per layer (`c_i → H → H → m`, ReLU between),
//!   each head bilinearly upsampled to output size and summed.
//! * NSE-2: every layer is embedded by a convolution + ReLU (`c_i → H`); a
//!   hidden map starts from the first embedding and, layer by layer, is
//!   nearest-upsampled ×2, convolved, rectified and summed with the next
//!   embedding. A final convolution maps the last hidden state to `m`
//!   logits, bilinearly upsampled to output size if needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{FeatureGenerator, FeatureStack};
use crate::tensor::{
    relu, relu_backward, upsample_bilinear, upsample_bilinear_adjoint, upsample_nearest, upsample_nearest_adjoint,
    Conv3x3, ConvGrad, Map3,
};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NseVariant {
    #[serde(rename = "nse-1")]
    Nse1,
    #[serde(rename = "nse-2")]
    Nse2,
}

impl NseVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            NseVariant::Nse1 => "nse-1",
            NseVariant::Nse2 => "nse-2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NseWeights {
    pub variant: NseVariant,
    pub num_classes: usize,
    pub depths: Vec<usize>,
    pub hidden: usize,
    /// NSE-1: `3` convolutions per layer, in order.
    /// NSE-2: `N` embeddings, then `N − 1` refinements, then the output head.
    pub convs: Vec<Conv3x3>,
}

/// Activations kept from the forward pass.
pub struct NseCache {
    /// Input to every convolution, indexed like `convs`.
    inputs: Vec<Map3>,
    /// Output of every convolution (pre-activation).
    outputs: Vec<Map3>,
}

impl NseWeights {
    /// All-zero network.
    pub fn zeros(variant: NseVariant, num_classes: usize, depths: &[usize], hidden: usize) -> Self {
        let convs = Self::layout(variant, num_classes, depths, hidden)
            .into_iter()
            .map(|(i, o)| Conv3x3::zeros(i, o))
            .collect();
        Self {
            variant,
            num_classes,
            depths: depths.to_vec(),
            hidden,
            convs,
        }
    }

    /// He-initialised weights, zero biases.
    pub fn init(variant: NseVariant, num_classes: usize, depths: &[usize], hidden: usize, seed: u64) -> Self {
        let mut w = Self::zeros(variant, num_classes, depths, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut w.convs {
            let std = (2.0 / (9 * conv.in_channels) as f64).sqrt();
            for v in &mut conv.weight {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    pub fn for_generator<G: FeatureGenerator + ?Sized>(gen: &G, variant: NseVariant, hidden: usize, seed: u64) -> Self {
        let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
        Self::init(variant, gen.num_classes(), &depths, hidden, seed)
    }

    fn layout(variant: NseVariant, m: usize, depths: &[usize], hidden: usize) -> Vec<(usize, usize)> {
        match variant {
            NseVariant::Nse1 => depths
                .iter()
                .flat_map(|&c| [(c, hidden), (hidden, hidden), (hidden, m)])
                .collect(),
            NseVariant::Nse2 => {
                let mut l: Vec<(usize, usize)> = depths.iter().map(|&c| (c, hidden)).collect();
                l.extend(std::iter::repeat_n((hidden, hidden), depths.len().saturating_sub(1)));
                l.push((hidden, m));
                l
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv3x3::param_count).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut o = 0;
        for c in &mut self.convs {
            let (wl, bl) = (c.weight.len(), c.bias.len());
            c.weight.copy_from_slice(&flat[o..o + wl]);
            o += wl;
            c.bias.copy_from_slice(&flat[o..o + bl]);
            o += bl;
        }
    }

    pub fn quantize_f32(&mut self) {
        for c in &mut self.convs {
            for v in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
    }

    fn check(&self, stack: &FeatureStack) -> Result<()> {
        if stack.depths() != self.depths {
            return Err(Error::ShapeMismatch(format!(
                "NSE expects depths {:?}, stack has {:?}",
                self.depths,
                stack.depths()
            )));
        }
        if self.variant == NseVariant::Nse2 {
            for pair in stack.layers.windows(2) {
                if pair[1].height != 2 * pair[0].height || pair[1].width != 2 * pair[0].width {
                    return Err(Error::ShapeMismatch("NSE-2 needs doubling resolutions".into()));
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, stack: &FeatureStack) -> Result<Map3> {
        Ok(self.forward_cached(stack)?.0)
    }

    pub fn forward_cached(&self, stack: &FeatureStack) -> Result<(Map3, NseCache)> {
        self.check(stack)?;
        let (h, w) = stack.output_size();
        let mut cache = NseCache {
            inputs: Vec::with_capacity(self.convs.len()),
            outputs: Vec::with_capacity(self.convs.len()),
        };
        let run = |idx: usize, input: Map3, cache: &mut NseCache| -> Map3 {
            let out = self.convs[idx].forward(&input);
            cache.inputs.push(input);
            cache.outputs.push(out.clone());
            out
        };
        let out = match self.variant {
            NseVariant::Nse1 => {
                let mut sum = Map3::zeros(self.num_classes, h, w);
                for (i, x) in stack.layers.iter().enumerate() {
                    let a = run(3 * i, x.clone(), &mut cache);
                    let b = run(3 * i + 1, relu(&a), &mut cache);
                    let head = run(3 * i + 2, relu(&b), &mut cache);
                    sum.add_assign(&upsample_bilinear(&head, h, w));
                }
                sum
            }
            NseVariant::Nse2 => {
                let n = stack.layers.len();
                let embeds: Vec<Map3> = stack
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, x)| relu(&run(i, x.clone(), &mut cache)))
                    .collect();
                let mut hidden = embeds[0].clone();
                for (i, e) in embeds.iter().enumerate().skip(1) {
                    let refined = run(n + i - 1, upsample_nearest(&hidden, 2), &mut cache);
                    hidden = relu(&refined);
                    hidden.add_assign(e);
                }
                let head = run(2 * n - 1, hidden, &mut cache);
                upsample_bilinear(&head, h, w)
            }
        };
        Ok((out, cache))
    }

    /// Back-propagates `grad` (shape `(m, h, w)`) through a cached forward
    /// pass. Returns the flat parameter gradient and per-layer input
    /// gradients.
    pub fn backward(&self, stack: &FeatureStack, cache: &NseCache, grad: &Map3) -> (Vec<f64>, Vec<Map3>) {
        let mut conv_grads: Vec<Option<ConvGrad>> = vec![None; self.convs.len()];
        let mut back = |idx: usize, g: &Map3| -> Map3 {
            let (gin, gp) = self.convs[idx].backward(&cache.inputs[idx], g);
            conv_grads[idx] = Some(gp);
            gin
        };
        let mut input_grads = Vec::with_capacity(stack.layers.len());
        match self.variant {
            NseVariant::Nse1 => {
                for (i, x) in stack.layers.iter().enumerate() {
                    let g_head = upsample_bilinear_adjoint(grad, x.height, x.width);
                    let g_b = relu_backward(&cache.outputs[3 * i + 1], &back(3 * i + 2, &g_head));
                    let g_a = relu_backward(&cache.outputs[3 * i], &back(3 * i + 1, &g_b));
                    input_grads.push(back(3 * i, &g_a));
                }
            }
            NseVariant::Nse2 => {
                let n = stack.layers.len();
                let last = &stack.layers[n - 1];
                let g_head = upsample_bilinear_adjoint(grad, last.height, last.width);
                let mut g_hidden = back(2 * n - 1, &g_head);
                let mut g_embeds = vec![Map3::zeros(0, 0, 0); n];
                for i in (1..n).rev() {
                    g_embeds[i] = g_hidden.clone();
                    let g_ref = relu_backward(&cache.outputs[n + i - 1], &g_hidden);
                    g_hidden = upsample_nearest_adjoint(&back(n + i - 1, &g_ref), 2);
                }
                g_embeds[0] = g_hidden;
                for (i, g) in g_embeds.iter().enumerate() {
                    let g_pre = relu_backward(&cache.outputs[i], g);
                    input_grads.push(back(i, &g_pre));
                }
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for g in conv_grads {
            let g = g.expect("every convolution is visited");
            flat.extend_from_slice(&g.weight);
            flat.extend_from_slice(&g.bias);
        }
        (flat, input_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::lse::ProbeWeights;

    fn stack(depths: &[usize], res: &[usize], nonneg: bool) -> FeatureStack {
        let layers = depths
            .iter()
            .zip(res)
            .enumerate()
            .map(|(l, (&c, &r))| {
                let data = (0..c * r * r)
                    .map(|i| {
                        let v = ((i * 31 + l * 17) % 23) as f64 / 11.0 - 1.0;
                        if nonneg {
                            v.abs()
                        } else {
                            v
                        }
                    })
                    .collect();
                Map3::from_vec(c, r, r, data)
            })
            .collect();
        let out = *res.last().unwrap();
        FeatureStack {
            layers,
            image: Map3::zeros(3, out, out),
        }
    }

    #[test]
    fn zero_network_outputs_biases() {
        let s = stack(&[3, 4], &[4, 8], false);
        for variant in [NseVariant::Nse1, NseVariant::Nse2] {
            let mut w = NseWeights::zeros(variant, 3, &[3, 4], 5);
            assert!(w.forward(&s).unwrap().data.iter().all(|v| *v == 0.0));
            let last = w.convs.len() - 1;
            w.convs[last].bias = vec![0.5, -1.0, 2.0];
            let out = w.forward(&s).unwrap();
            match variant {
                // each NSE-1 head contributes its bias
                NseVariant::Nse1 => {
                    assert!(out.plane(1).iter().all(|v| (*v + 1.0).abs() < 1e-12));
                }
                NseVariant::Nse2 => {
                    assert!(out.plane(2).iter().all(|v| (*v - 2.0).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn center_tap_nse1_reproduces_linear_probe_on_nonnegative_features() {
        let depths = [3, 4];
        let s = stack(&depths, &[4, 8], true);
        let hidden = 4;
        let m = 2;
        let mut lse = ProbeWeights::zeros(m, &depths, vec![]);
        lse.matrices[0] = vec![0.3, -1.0, 0.5, 1.2, 0.0, -0.4];
        lse.matrices[1] = vec![-0.2, 0.7, 1.0, 0.1, 0.9, -0.3, 0.2, 0.4];
        let mut nse = NseWeights::zeros(NseVariant::Nse1, m, &depths, hidden);
        let center = |conv: &mut Conv3x3, o: usize, i: usize, v: f64| {
            let idx = ((o * conv.in_channels + i) * 3 + 1) * 3 + 1;
            conv.weight[idx] = v;
        };
        for (l, &c) in depths.iter().enumerate() {
            for i in 0..c {
                center(&mut nse.convs[3 * l], i, i, 1.0);
                center(&mut nse.convs[3 * l + 1], i, i, 1.0);
            }
            for k in 0..m {
                for i in 0..c {
                    center(&mut nse.convs[3 * l + 2], k, i, lse.matrices[l][k * c + i]);
                }
            }
        }
        let a = nse.forward(&s).unwrap();
        let b = lse.forward(&s).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn nse1_has_more_parameters_than_lse() {
        let depths = vec![16; 5];
        let lse = ProbeWeights::zeros(5, &depths, vec![]);
        let nse = NseWeights::zeros(NseVariant::Nse1, 5, &depths, DEFAULT_HIDDEN);
        assert!(nse.param_count() > lse.param_count());
    }

    fn check_gradients(variant: NseVariant) {
        let depths = [2, 3, 2];
        let s = stack(&depths, &[2, 4, 8], false);
        let w = NseWeights::init(variant, 3, &depths, 3, 11);
        let g = {
            let data = (0..3 * 64).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
            Map3::from_vec(3, 8, 8, data)
        };
        let loss = |w: &NseWeights, s: &FeatureStack| -> f64 {
            w.forward(s).unwrap().data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let (out, cache) = w.forward_cached(&s).unwrap();
        assert_eq!(out.shape(), (3, 8, 8));
        let (gp, gx) = w.backward(&s, &cache, &g);
        let flat = w.flat();
        let h = 1e-6;
        for idx in (0..flat.len()).step_by(flat.len() / 25 + 1) {
            let mut p = w.clone();
            let mut f = flat.clone();
            f[idx] += h;
            p.set_flat(&f);
            let mut q = w.clone();
            f[idx] -= 2.0 * h;
            q.set_flat(&f);
            let fd = (loss(&p, &s) - loss(&q, &s)) / (2.0 * h);
            assert!((fd - gp[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{variant:?} param {idx}: {fd} vs {}", gp[idx]);
        }
        for l in 0..depths.len() {
            for idx in [0, 5, s.layers[l].data.len() - 1] {
                let mut sp = s.clone();
                sp.layers[l].data[idx] += h;
                let mut sq = s.clone();
                sq.layers[l].data[idx] -= h;
                let fd = (loss(&w, &sp) - loss(&w, &sq)) / (2.0 * h);
                assert!((fd - gx[l].data[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{variant:?} layer {l}");
            }
        }
    }

    #[test]
    fn nse1_gradients() {
        check_gradients(NseVariant::Nse1);
    }

    #[test]
    fn nse2_gradients() {
        check_gradients(NseVariant::Nse2);
    }
}
