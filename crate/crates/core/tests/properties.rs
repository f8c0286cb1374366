mod common;

use common::*;
use lse_core::geometry;
use lse_core::latentopt;
use lse_core::metrics;
use lse_core::probes::{self, SemanticPredictor};
use lse_core::{sample_latent, FeatureGenerator, Map3, SemanticMask};
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize, classes: u8) -> impl Strategy<Value = SemanticMask> {
    prop::collection::vec(0..classes, h * w).prop_map(move |labels| SemanticMask::new(h, w, labels).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (SemanticMask, SemanticMask)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (mask_strategy(h, w, 4), mask_strategy(h, w, 4)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_pair(), k in 0u8..4) {
        let (sa, sb) = (a.class_set(k), b.class_set(k));
        let x = metrics::iou(&sa, &sb).unwrap();
        prop_assert_eq!(x, metrics::iou(&sb, &sa).unwrap());
        if let Some(v) = x {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if sa.iter().any(|&v| v) {
            prop_assert_eq!(metrics::iou(&sa, &sa).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn miou_is_mean_of_present_classes(pairs in prop::collection::vec(mask_pair(), 1..6)) {
        let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let report = metrics::miou(&preds, &gts, 4).unwrap();
        let present: Vec<f64> = report.per_class.iter().flatten().copied().collect();
        prop_assert!(present.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        prop_assert!((report.miou - mean).abs() < 1e-12);
        prop_assert_eq!(metrics::miou(&gts, &gts, 4).unwrap().miou, 1.0);
    }

    #[test]
    fn cross_entropy_is_finite_and_nonnegative(
        data in prop::collection::vec(-1e4f64..1e4, 3 * 6),
        labels in prop::collection::vec(0u8..3, 6),
    ) {
        let logits = Map3::from_vec(3, 2, 3, data);
        let target = SemanticMask::new(2, 3, labels).unwrap();
        let (loss, grad) = probes::cross_entropy_grad(&logits, &target).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.is_finite());
    }

    #[test]
    fn forward_is_linear_in_weights(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, &[2, 3], &[3, 6]);
        let p = random_probe(&mut r, 3, &[2, 3], 1.0);
        let q = random_probe(&mut r, 3, &[2, 3], 1.0);
        let lhs = p.combine(a, &q, b).unwrap().forward(&stack).unwrap();
        let mut rhs = p.forward(&stack).unwrap();
        rhs.scale(a);
        let mut qs = q.forward(&stack).unwrap();
        qs.scale(b);
        rhs.add_assign(&qs);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn commutativity_on_arbitrary_shapes(
        seed in any::<u64>(),
        base in 1usize..5,
        depths in prop::collection::vec(1usize..5, 1..4),
        classes in 2usize..5,
    ) {
        let mut r = rng(seed);
        let res: Vec<usize> = (0..depths.len()).map(|i| base << i).collect();
        let stack = random_stack(&mut r, &depths, &res);
        let p = random_probe(&mut r, classes, &depths, 2.0);
        prop_assert!(p.forward(&stack).unwrap().max_abs_diff(&p.forward_concat(&stack).unwrap()) < 1e-5);
    }

    #[test]
    fn hypercones_are_scale_invariant(
        t in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(-1.0f64..1.0, 4),
        lambda in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
        prop_assert_eq!(
            geometry::hypercone_classify(&t, 3, &x).unwrap(),
            geometry::hypercone_classify(&t, 3, &scaled).unwrap()
        );
    }

    #[test]
    fn color_loss_ignores_residual_location(
        seed in any::<u64>(),
        delta in -1.0f64..1.0,
        from in 0usize..8,
        to in 0usize..8,
    ) {
        // Region covers the first 8 of 16 pixels; a single residual moves inside it.
        let mut r = rng(seed);
        let base = random_map(&mut r, 3, 4, 4);
        let region: Vec<bool> = (0..16).map(|p| p < 8).collect();
        let moved = |p: usize| {
            let mut m = base.clone();
            m.data[16 + p] += delta;
            m
        };
        let a = latentopt::color_edit_loss(&moved(from), &base, &region).unwrap();
        let b = latentopt::color_edit_loss(&moved(to), &base, &region).unwrap();
        prop_assert!(a >= 0.0 && (a - b).abs() < 1e-12);
        let inv: Vec<bool> = region.iter().map(|v| !v).collect();
        let c = latentopt::preservation_loss(&moved(from), &base, &inv).unwrap();
        let d = latentopt::preservation_loss(&moved(to), &base, &inv).unwrap();
        prop_assert!(c >= 0.0 && (c - d).abs() < 1e-12);
    }

    #[test]
    fn latent_losses_are_nonnegative(seed in any::<u64>()) {
        let z = sample_latent(8, seed, None).unwrap();
        let z0 = sample_latent(8, seed ^ 1, None).unwrap();
        prop_assert!(latentopt::neighbor_loss(&z, &z0).unwrap() >= 0.0);
        prop_assert_eq!(latentopt::neighbor_loss(&z0, &z0).unwrap(), 0.0);
        prop_assert!(latentopt::prior_loss(&z) >= 0.0);
    }

    #[test]
    fn truncation_bounds_the_norm(seed in any::<u64>(), rho in 0.05f64..2.0, dim in 1usize..64) {
        let z = sample_latent(dim, seed, Some(rho)).unwrap();
        prop_assert!(z.norm() <= rho * (dim as f64).sqrt() * (1.0 + 1e-12));
        prop_assert_eq!(sample_latent(dim, seed, None).unwrap(), sample_latent(dim, seed, None).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_stacks_respect_the_config(seed in any::<u64>()) {
        let gen = small_gen();
        let z = sample_latent(gen.latent_dim(), seed, None).unwrap();
        let stack = gen.generate(&z).unwrap();
        prop_assert!(stack.is_finite());
        let meta = gen.layer_meta();
        prop_assert_eq!(stack.layers.len(), meta.len());
        for (x, l) in stack.layers.iter().zip(&meta) {
            prop_assert_eq!(x.shape(), (l.depth, l.resolution, l.resolution));
        }
        prop_assert_eq!(&gen.generate(&z).unwrap().image.data, &stack.image.data);
        let mask = gen.analytic_mask(&z).unwrap();
        prop_assert!(mask.labels.iter().all(|&l| usize::from(l) < gen.num_classes()));
    }

    #[test]
    fn probe_masks_use_valid_labels(seed in any::<u64>()) {
        let gen = small_gen();
        let mut r = rng(seed);
        let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
        let probe = random_probe(&mut r, gen.num_classes(), &depths, 1.0);
        let stack = gen.generate(&sample_latent(gen.latent_dim(), seed, None).unwrap()).unwrap();
        let mask = probe.mask(&stack).unwrap();
        prop_assert_eq!((mask.height, mask.width), gen.output_size());
        prop_assert!(mask.labels.iter().all(|&l| usize::from(l) < gen.num_classes()));
    }

    #[test]
    fn class_centers_are_unit(seed in any::<u64>(), dim in 2usize..10, size in 1usize..30) {
        let mut r = rng(seed);
        let pool = geometry::FeaturePool {
            dim,
            t1: size,
            t2: size,
            pools: (0..3).map(|k| (0..size).map(|_| {
                let mut v = random_map(&mut r, dim, 1, 1).data;
                v[k % dim] += 3.0;
                v
            }).collect()).collect(),
            contributions: vec![vec![(0, size)]; 3],
            images_used: 1,
        };
        let centers = geometry::class_centers(&pool).unwrap();
        for c in &centers.centers {
            let len: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((len - 1.0).abs() < 1e-6);
        }
        let conf = geometry::cosine_confusion(&pool).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                prop_assert!((conf[a][b] - conf[b][a]).abs() < 1e-9);
                prop_assert!(conf[a][b] <= 1.0 + 1e-12);
            }
        }
    }
}
