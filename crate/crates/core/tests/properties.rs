use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dimaf_core::datagen::{tokenize_pathways, Pathway, PathwayMembership};
use dimaf_core::diffgraph::Tensor;
use dimaf_core::explain::{linear_shapley, shapley_blocks, Blocks};
use dimaf_core::losses::{cox_loss, distance_correlation_with, DcForm};
use dimaf_core::model::{Model, ModelConfig, ModelDims};
use dimaf_core::prototype::{fit_gmm, posterior, EmConfig, GlobalPrototypes};
use dimaf_core::train_eval::cosine_lr;

fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenization_of_a_partition_is_lossless(n_genes in 2usize..40, n_path in 1usize..8, seed in any::<u64>()) {
        let n_path = n_path.min(n_genes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut genes: Vec<usize> = (0..n_genes).collect();
        genes.shuffle(&mut rng);
        // Cut the shuffled panel into n_path non-empty groups.
        let mut cuts: Vec<usize> = (1..n_genes).collect();
        cuts.shuffle(&mut rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(n_path - 1).collect();
        cuts.sort_unstable();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(n_genes);
        let pathways: Vec<Pathway> = bounds
            .windows(2)
            .enumerate()
            .map(|(i, w)| Pathway { name: format!("P{i}"), genes: genes[w[0]..w[1]].to_vec() })
            .collect();
        let membership = PathwayMembership::new(n_genes, pathways.clone()).unwrap();
        let expr: Vec<f64> = (0..n_genes).map(|_| rng.random::<f64>()).collect();
        let tokens = tokenize_pathways(&expr, &membership).unwrap();
        let mut back = vec![f64::NAN; n_genes];
        for (p, t) in pathways.iter().zip(&tokens) {
            for (&g, &v) in p.genes.iter().zip(t) {
                back[g] = v;
            }
        }
        prop_assert_eq!(back, expr);
    }

    #[test]
    fn dc_is_bounded_and_symmetric(b in 3usize..40, p in 1usize..5, q in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (tensor(&mut rng, b, p), tensor(&mut rng, b, q));
        for form in [DcForm::Root, DcForm::Squared] {
            let xy = distance_correlation_with(&x, &y, form).unwrap();
            let yx = distance_correlation_with(&y, &x, form).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&xy));
            prop_assert!((xy - yx).abs() <= 1e-12);
        }
    }

    #[test]
    fn dc_ignores_translation_and_scaling(b in 3usize..30, seed in any::<u64>(), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (tensor(&mut rng, b, 3), tensor(&mut rng, b, 2));
        let base = distance_correlation_with(&x, &y, DcForm::Root).unwrap();
        let mut moved = y.clone();
        moved.data_mut().iter_mut().for_each(|v| *v = *v * scale + shift);
        prop_assert!((distance_correlation_with(&x, &moved, DcForm::Root).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn cox_loss_is_shift_invariant(n in 1usize..40, c in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(1..15) as f64).collect();
        let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
        let (a, b) = (cox_loss(&r, &t, &e).unwrap(), cox_loss(&shifted, &t, &e).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn cox_loss_decreases_when_an_event_risk_rises(n in 2usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut e = vec![true; n];
        e[n - 1] = false;
        // Patient 0 has the earliest time; its risk set is everyone.
        let mut up = r.clone();
        up[0] += 0.5;
        prop_assert!(cox_loss(&up, &t, &e).unwrap() < cox_loss(&r, &t, &e).unwrap());
    }

    #[test]
    fn posteriors_are_distributions(k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = tensor(&mut rng, 40, 3);
        let anchors = GlobalPrototypes { means: tensor(&mut rng, k, 3) };
        let fit = fit_gmm(&bag, &anchors, &EmConfig::default()).unwrap();
        for z in bag.iter_rows() {
            let q = posterior(z, &fit.summary);
            prop_assert!(q.iter().all(|v| *v >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for w in fit.log_likelihoods.windows(2) {
            prop_assert!(w[1] - w[0] >= -1e-9);
        }
    }

    #[test]
    fn em_ignores_patch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = tensor(&mut rng, 30, 2);
        let anchors = GlobalPrototypes { means: tensor(&mut rng, 3, 2) };
        let mut order: Vec<usize> = (0..30).collect();
        order.shuffle(&mut rng);
        let a = fit_gmm(&bag, &anchors, &EmConfig::default()).unwrap().summary;
        let b = fit_gmm(&bag.select_rows(&order), &anchors, &EmConfig::default()).unwrap().summary;
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.means.data().iter().zip(b.means.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shapley_is_efficient_and_matches_the_linear_form(seed in 0u64..500) {
        let cfg = ModelConfig { d_emb: 4, d_enc: 2, d_z: 3, n_prototypes: 2, ..Default::default() };
        let m = Model::init(cfg, ModelDims { pathway_sizes: vec![2, 3], patch_dim: 2 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = || -> Blocks { std::array::from_fn(|_| (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()) };
        let (z, base) = (blocks(), blocks());
        let a = shapley_blocks(&m, &z, &base);
        prop_assert!(a.efficiency_gap() <= 1e-9);
        let lin = linear_shapley(&m, &z, &base);
        for (p, q) in a.phi.iter().zip(&lin) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints(lr in 1e-6f64..1.0, total in 2usize..5000) {
        prop_assert_eq!(cosine_lr(lr, 0, total), lr);
        prop_assert!(cosine_lr(lr, total - 1, total) <= 1e-3 * lr);
        for s in 1..total.min(50) {
            prop_assert!(cosine_lr(lr, s, total) <= cosine_lr(lr, s - 1, total));
        }
    }
}
