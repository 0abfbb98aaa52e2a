//! Property tests for the invariants of each module.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use dvbe::amse::{adaptive_lambda, bilinear_pool, target_scale};
use dvbe::autos2v::{
    build_adjacency, cell_edges, cosine_distance, predict_unseen, Arch, ArchParams, CellSpec, OperationKind,
    S2vModel, S2vShape,
};
use dvbe::dataio::{synth_gzsl, ClassId, Domain, SynthConfig};
use dvbe::gate::{calibrate_tau, gated_predict, GateConfig, Outcome};
use dvbe::metrics::{harmonic, mca};
use dvbe::numerics::{softmax, Rng, Tensor};
use dvbe::trainer::{Dvbe, ModelConfig};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn small_model(seed: u64, alpha: ArchParams) -> (S2vModel, Tensor) {
    let mut rng = Rng::new(seed);
    let attrs = rng.uniform_tensor(&[5, 4], 0.1, 1.0);
    let adjacency = build_adjacency(&attrs, 2).unwrap();
    let shape = S2vShape { channels: 3, attr_dim: 4, embed_dim: 6 };
    let model = S2vModel::init(&shape, (0..5).collect(), adjacency, Arch::Continuous(alpha), &mut rng).unwrap();
    (model, attrs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let p = softmax(&Tensor::vector(z).unwrap()).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bilinear_pool_is_symmetric_psd(x in matrix(4, 6, -3.0, 3.0)) {
        let m = bilinear_pool(&x).unwrap();
        let c = 6;
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(m.at(i, j), m.at(j, i));
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, m.data()));
        prop_assert!(eig.eigenvalues.min() >= -1e-10, "eigenvalues {:?}", eig.eigenvalues);
    }

    #[test]
    fn adaptive_lambda_is_bounded_and_increasing(p in 0.0f64..=1.0, q in 0.0f64..=1.0, sigma in 0.05f64..2.0) {
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        let (a, b) = (adaptive_lambda(lo, sigma), adaptive_lambda(hi, sigma));
        prop_assert!(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0);
        prop_assert!(a <= b);
        if hi - lo > 1e-3 && sigma <= 1.0 {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn margin_never_raises_target_logit(lambda in 1e-6f64..=1.0, z in -50.0f64..50.0) {
        prop_assert!(target_scale(lambda, z) * z <= z);
    }

    #[test]
    fn mixed_op_is_linear_in_operation_weights(seed in 0u64..1000, scores in prop::collection::vec(-3.0f64..3.0, 4)) {
        let (model, attrs) = small_model(seed, ArchParams::uniform(2));
        let h = attrs.matmul(&model.proj).unwrap();
        let edge = (0, 1);
        let mut mixed_model = model.clone();
        if let Arch::Continuous(a) = &mut mixed_model.arch {
            a.alpha.insert(edge, Tensor::vector(scores.clone()).unwrap());
        }
        let mixed = mixed_model.mixed_op(&h, edge).unwrap();

        let w = softmax(&Tensor::vector(scores).unwrap()).unwrap();
        let mut expected = Tensor::zeros(h.shape());
        for op in OperationKind::ALL {
            let mut ops: BTreeMap<_, _> = cell_edges(2).into_iter().map(|e| (e, OperationKind::SkipConnection)).collect();
            ops.insert(edge, op);
            let cell = CellSpec { n_nodes: 2, ops };
            let mut single = model.clone();
            single.arch = Arch::Continuous(ArchParams::one_hot(&cell));
            let out = single.mixed_op(&h, edge).unwrap();
            let wo = w.data()[op.index()];
            expected = expected.zip_map(&out, |e, o| e + wo * o).unwrap();
        }
        for (a, b) in mixed.data().iter().zip(expected.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_distance_lies_in_range(
        u in prop::collection::vec(-10.0f64..10.0, 5),
        v in prop::collection::vec(-10.0f64..10.0, 5),
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-6) && v.iter().any(|x| x.abs() > 1e-6));
        let d = cosine_distance(&u, &v).unwrap();
        prop_assert!((0.0..=2.0).contains(&d), "{}", d);
    }

    #[test]
    fn adjacency_ignores_attribute_scale(attrs in matrix(6, 4, 0.05, 1.0), row in 0usize..6, c in 0.01f64..100.0) {
        let base = build_adjacency(&attrs, 3).unwrap();
        let mut scaled = attrs.clone();
        for v in &mut scaled.data_mut()[row * 4..(row + 1) * 4] {
            *v *= c;
        }
        let other = build_adjacency(&scaled, 3).unwrap();
        for (a, b) in base.data().iter().zip(other.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn routing_is_monotone_in_tau(
        entropies in prop::collection::vec(0.0f64..3.0, 1..60),
        t1 in -0.5f64..3.5,
        t2 in -0.5f64..3.5,
    ) {
        let outcomes: Vec<Outcome> = entropies
            .iter()
            .map(|&entropy| Outcome { label: 0, truth: Domain::Seen, entropy, seen_pred: 0, unseen_pred: 1 })
            .collect();
        let seen = |tau: f64| outcomes.iter().filter(|o| o.route(tau).1 == Domain::Seen).count();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(seen(lo) <= seen(hi));
    }

    #[test]
    fn harmonic_mean_properties(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        prop_assert_eq!(harmonic(a, b), harmonic(b, a));
        prop_assert!(harmonic(a, b) <= (a + b) / 2.0 + 1e-12);
        prop_assert!(harmonic(a, b) <= a.max(b) + 1e-12);
        prop_assert!((harmonic(a, a) - a).abs() <= 1e-12);
    }

    #[test]
    fn mca_ignores_per_class_duplication(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 4..40),
        copies in prop::collection::vec(1usize..4, 4),
    ) {
        let (preds, labels): (Vec<ClassId>, Vec<ClassId>) = pairs.iter().copied().unzip();
        let classes: Vec<ClassId> = (0..4).filter(|c| labels.contains(c)).collect();
        let base = mca(&preds, &labels, &classes).unwrap();
        let (mut p2, mut l2) = (Vec::new(), Vec::new());
        for (&p, &l) in preds.iter().zip(&labels) {
            for _ in 0..copies[l as usize] {
                p2.push(p);
                l2.push(l);
            }
        }
        prop_assert!((mca(&p2, &l2, &classes).unwrap() - base).abs() <= 1e-9);
    }

    #[test]
    fn calibrated_tau_is_monotone_and_bounded(
        entropies in prop::collection::vec(0.0f64..4.0, 1..50),
        p in 0.0f64..=100.0,
        q in 0.0f64..=100.0,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let (a, b) = (calibrate_tau(&entropies, lo).unwrap(), calibrate_tau(&entropies, hi).unwrap());
        let min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
        let max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a <= b + 1e-12);
        prop_assert!(min <= a && b <= max);
    }

    #[test]
    fn cell_text_round_trips_in_any_order(seed in 0u64..10_000, n_nodes in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut ops = BTreeMap::new();
        for e in cell_edges(n_nodes) {
            ops.insert(e, OperationKind::ALL[(rng.uniform(0.0, 4.0) as usize).min(3)]);
        }
        for j in 1..=n_nodes {
            if (0..j).all(|i| ops[&(i, j)] == OperationKind::None) {
                ops.insert((0, j), OperationKind::FullyConnected);
            }
        }
        let cell = CellSpec { n_nodes, ops };
        let mut lines: Vec<&str> = Vec::new();
        let text = cell.to_text();
        lines.extend(text.lines());
        rng.shuffle(&mut lines);
        prop_assert_eq!(CellSpec::from_text(&lines.join("\n")).unwrap(), cell);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gate_extremes_match_each_branch(seed in 0u64..100) {
        let ds = synth_gzsl(&SynthConfig { samples_per_class: 6, feat_dims: (2, 2, 8), seed, ..Default::default() }).unwrap();
        let models = Dvbe::init(&ds, &ModelConfig::default(), Some(CellSpec::two_layer_fc()), seed).unwrap();
        let attrs = ds.attribute_matrix();
        let semantic = models.s2v.embed_semantic(&attrs).unwrap();
        let unseen = ds.unseen_ids();
        let open = GateConfig { tau: f64::INFINITY, ..Default::default() };
        let shut = GateConfig { tau: -1.0, ..Default::default() };
        for s in ds.test_seen.iter().chain(&ds.test_unseen) {
            let probs = models.amse.predict_probs(&s.feature).unwrap();
            let seen = gated_predict(&s.feature, &models.amse, &models.s2v, &semantic, &unseen, &open).unwrap();
            prop_assert_eq!(seen.class_id, models.amse.classes[probs.argmax()]);
            prop_assert_eq!(seen.domain, Domain::Seen);
            let gone = gated_predict(&s.feature, &models.amse, &models.s2v, &semantic, &unseen, &shut).unwrap();
            prop_assert_eq!(gone.class_id, predict_unseen(&s.feature, &models.s2v, &attrs, &unseen).unwrap());
            prop_assert_eq!(gone.domain, Domain::Unseen);
        }
    }

    #[test]
    fn forward_passes_are_pure(seed in 0u64..100) {
        let ds = synth_gzsl(&SynthConfig { samples_per_class: 4, feat_dims: (2, 2, 8), seed, ..Default::default() }).unwrap();
        let models = Dvbe::init(&ds, &ModelConfig::default(), None, seed).unwrap();
        let x = &ds.train_seen[0].feature;
        prop_assert_eq!(models.amse.embed(x).unwrap(), models.amse.embed(x).unwrap());
        let attrs = ds.attribute_matrix();
        prop_assert_eq!(models.s2v.embed_semantic(&attrs).unwrap(), models.s2v.embed_semantic(&attrs).unwrap());
    }
}
