#![allow(dead_code)]

use lse_core::probes::ProbeWeights;
use lse_core::{FeatureStack, GeneratorConfig, Map3, SemanticMask, SyntheticGenerator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Three layers up to 16×16; quick enough for finite differences.
pub fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        latent_dim: 8,
        layer_resolutions: vec![4, 8, 16],
        layer_depths: vec![8; 3],
        ..GeneratorConfig::default()
    }
}

pub fn small_gen() -> SyntheticGenerator {
    SyntheticGenerator::new(small_config()).unwrap()
}

pub fn default_gen() -> SyntheticGenerator {
    SyntheticGenerator::new(GeneratorConfig::default()).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Map3 {
    Map3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_stack(rng: &mut ChaCha8Rng, depths: &[usize], resolutions: &[usize]) -> FeatureStack {
    let out = *resolutions.last().unwrap();
    FeatureStack {
        layers: depths.iter().zip(resolutions).map(|(&c, &r)| random_map(rng, c, r, r)).collect(),
        image: random_map(rng, 3, out, out),
    }
}

pub fn random_probe(rng: &mut ChaCha8Rng, classes: usize, depths: &[usize], scale: f64) -> ProbeWeights {
    let mut p = ProbeWeights::zeros(classes, depths, (0..classes).map(|k| format!("c{k}")).collect());
    let flat: Vec<f64> = (0..p.param_count()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    p.set_flat(&flat);
    p
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> SemanticMask {
    SemanticMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect()).unwrap()
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub mod grads {
    use super::*;
    use lse_core::latentopt::{self, ColorStroke};
    use lse_core::probes::{cross_entropy, cross_entropy_grad};
    use lse_core::{sample_latent, FeatureGenerator, LatentVector};

    /// Worst relative error over `points` random points for each checked
    /// gradient, in the order CE∘LSE (w.r.t. T), L_s, L_c, L_p, L_n, L_z.
    pub fn suite(points: usize) -> Vec<(&'static str, f64)> {
        let gen = small_gen();
        let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
        let (h, w) = gen.output_size();
        let m = gen.num_classes();
        let mut worst = vec![("ce_lse_wrt_T", 0.0f64), ("L_s", 0.0), ("L_c", 0.0), ("L_p", 0.0), ("L_n", 0.0), ("L_z", 0.0)];
        let mut r = rng(2024);
        for point in 0..points {
            let z = sample_latent(gen.latent_dim(), 500 + point as u64, None).unwrap();
            let stack = gen.generate(&z).unwrap();
            let probe = random_probe(&mut r, m, &depths, 0.5);
            let target = random_mask(&mut r, h, w, m);

            let (_, d_logits) = cross_entropy_grad(&probe.forward(&stack).unwrap(), &target).unwrap();
            let mut g = vec![0.0; probe.param_count()];
            probe.accumulate_weight_grad(&stack, &d_logits, &mut g);
            let fd = central_difference(
                |t| {
                    let mut p = probe.clone();
                    p.set_flat(t);
                    cross_entropy(&p.forward(&stack).unwrap(), &target).unwrap()
                },
                &probe.flat(),
                1e-5,
            );
            worst[0].1 = worst[0].1.max(vec_rel_err(&g, &fd));

            let zf = |v: &[f64]| LatentVector(v.to_vec());
            let (_, g) = latentopt::semantic_edit_loss_grad(&probe, &gen, &z, &target).unwrap();
            let fd = central_difference(
                |v| latentopt::semantic_edit_loss(&probe, &gen, &zf(v), &target).unwrap(),
                &z.0,
                1e-5,
            );
            worst[1].1 = worst[1].1.max(vec_rel_err(&g, &fd));

            let stroke = ColorStroke {
                image: Map3::from_vec(3, h, w, (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect()),
                region: (0..h * w).map(|_| r.random_bool(0.4)).collect(),
            };
            let (_, g) = latentopt::color_edit_loss_grad_z(&gen, &z, &stroke).unwrap();
            let fd = central_difference(
                |v| {
                    let img = gen.generate(&zf(v)).unwrap().image;
                    latentopt::color_edit_loss(&img, &stroke.image, &stroke.region).unwrap()
                },
                &z.0,
                1e-5,
            );
            worst[2].1 = worst[2].1.max(vec_rel_err(&g, &fd));

            let z_other = sample_latent(gen.latent_dim(), 900 + point as u64, None).unwrap();
            let img0 = gen.generate(&z_other).unwrap().image;
            let (_, g) = latentopt::preservation_loss_grad_z(&gen, &z, &img0, &stroke.region).unwrap();
            let fd = central_difference(
                |v| {
                    let img = gen.generate(&zf(v)).unwrap().image;
                    latentopt::preservation_loss(&img, &img0, &stroke.region).unwrap()
                },
                &z.0,
                1e-5,
            );
            worst[3].1 = worst[3].1.max(vec_rel_err(&g, &fd));

            let (_, g) = latentopt::neighbor_loss_grad(&z, &z_other).unwrap();
            let fd = central_difference(|v| latentopt::neighbor_loss(&zf(v), &z_other).unwrap(), &z.0, 1e-5);
            worst[4].1 = worst[4].1.max(vec_rel_err(&g, &fd));

            let (_, g) = latentopt::prior_loss_grad(&z);
            let fd = central_difference(|v| latentopt::prior_loss(&zf(v)), &z.0, 1e-5);
            worst[5].1 = worst[5].1.max(vec_rel_err(&g, &fd));

        }
        worst
    }
}

pub mod oracles {
    use std::collections::HashSet;

    use super::*;
    use lse_core::metrics;

    fn set_of(mask: &SemanticMask, k: u8) -> HashSet<(usize, usize)> {
        let mut s = HashSet::new();
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) == k {
                    s.insert((y, x));
                }
            }
        }
        s
    }

    pub fn set_iou(a: &HashSet<(usize, usize)>, b: &HashSet<(usize, usize)>) -> Option<f64> {
        let union = a.union(b).count();
        (union > 0).then(|| a.intersection(b).count() as f64 / union as f64)
    }

    /// Nested-loop mIoU over `(pred, gt)` pairs.
    pub fn miou(preds: &[SemanticMask], gts: &[SemanticMask], classes: usize) -> f64 {
        let mut per_class = Vec::new();
        for k in 0..classes as u8 {
            let vals: Vec<f64> = preds
                .iter()
                .zip(gts)
                .filter_map(|(p, g)| set_iou(&set_of(p, k), &set_of(g, k)))
                .collect();
            if !vals.is_empty() {
                per_class.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }

    /// Largest deviation between the library metrics and set-based oracles
    /// over `instances` random small masks.
    pub fn metric_suite(instances: usize) -> f64 {
        let mut r = rng(77);
        let mut worst = 0.0f64;
        let classes = 3;
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..instances {
            let h = r.random_range(1..6);
            let w = r.random_range(1..6);
            let a = random_mask(&mut r, h, w, classes);
            let b = random_mask(&mut r, h, w, classes);
            for k in 0..classes as u8 {
                let lib = metrics::iou(&a.class_set(k), &b.class_set(k)).unwrap();
                let oracle = set_iou(&set_of(&a, k), &set_of(&b, k));
                match (lib, oracle) {
                    (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
            preds.push(a);
            gts.push(b);
        }
        let lib = metrics::miou(&preds, &gts, classes).unwrap().miou;
        worst = worst.max((lib - miou(&preds, &gts, classes)).abs());

        let targets: Vec<SemanticMask> = (0..3).map(|_| random_mask(&mut r, 4, 4, classes)).collect();
        let sets: Vec<Vec<SemanticMask>> =
            (0..3).map(|_| (0..2).map(|_| random_mask(&mut r, 4, 4, classes)).collect()).collect();
        let mut flat = 0.0;
        for (t, set) in targets.iter().zip(&sets) {
            for s in set {
                flat += miou(std::slice::from_ref(s), std::slice::from_ref(t), classes);
            }
        }
        flat /= 6.0;
        let lib = metrics::scs_agreement(&targets, &sets, classes).unwrap();
        worst.max((lib - flat).abs())
    }

    /// Largest max-abs gap between `forward` and `forward_concat` over
    /// `count` random stacks and probes.
    pub fn commutativity(count: usize) -> f64 {
        let mut r = rng(11);
        let mut worst = 0.0f64;
        for _ in 0..count {
            let layers = r.random_range(1..5);
            let base = r.random_range(1..4);
            let resolutions: Vec<usize> = (0..layers).map(|i| base << i).collect();
            let depths: Vec<usize> = (0..layers).map(|_| r.random_range(1..7)).collect();
            let classes = r.random_range(2..6);
            let stack = random_stack(&mut r, &depths, &resolutions);
            let probe = random_probe(&mut r, classes, &depths, 1.0);
            let a = probe.forward(&stack).unwrap();
            let b = probe.forward_concat(&stack).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
        worst
    }
}
