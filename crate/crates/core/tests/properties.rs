use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semfed::adapter::{forward_traced, AdapterHyper, AdapterParams, EdgeKind, EncoderSignature, Modality};
use semfed::dataio::{generate_synthetic, FeatureSet, SyntheticSpec};
use semfed::experiment::{prepare, run_experiment_config, ExperimentConfig, METRICS_HEADER};
use semfed::federation::run_round;
use semfed::labeling::batch_confidence;
use semfed::math::{cosine_similarity, norm, Matrix};
use semfed::model::{apply_adam, CodecModel, OptimizerState};
use semfed::skb::Skb;
use semfed::trainer::{
    assess_batch, backward, epoch_batches, total_loss, TrainBatch, TrainConfig,
};

fn sigs(image_dim: usize, text_dim: usize) -> [EncoderSignature; 2] {
    [
        EncoderSignature { modality: Modality::Image, family: 1, dim: image_dim },
        EncoderSignature { modality: Modality::Text, family: 2, dim: text_dim },
    ]
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dims: [EncoderSignature; 2]) -> TrainBatch {
    let ids: Vec<u64> = (0..n as u64).collect();
    let sets = dims
        .iter()
        .map(|&s| {
            let data = (0..n * s.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureSet::new(s, ids.clone(), Matrix::from_vec(n, s.dim, data).unwrap()).unwrap()
        })
        .collect();
    TrainBatch::new(sets).unwrap()
}

fn random_skb(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Skb {
    let protos = Matrix::from_vec(classes, dim, (0..classes * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    Skb::build(&protos, &(0..classes as u32).collect::<Vec<_>>()).unwrap()
}

fn small_model(rng: &mut ChaCha8Rng, dims: [EncoderSignature; 2], hidden: usize, semantic: usize, hyper: AdapterHyper) -> CodecModel {
    CodecModel::shared(AdapterParams::init(&dims, hidden, semantic, hyper, rng).unwrap())
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic.classes = 4;
    cfg.dataset.synthetic.n_per_class = 10;
    cfg.dataset.synthetic.semantic_dim = 8;
    cfg.dataset.synthetic.image_dim = 12;
    cfg.dataset.synthetic.text_dim = 10;
    cfg.federation.n_clients = 3;
    cfg.federation.rounds = 2;
    cfg.federation.speed_range = (0.5, 2.0);
    cfg.adapter.hidden = 8;
    cfg.adapter.k_intra = 3;
    cfg.adapter.k_cross = 3;
    cfg.train.local_epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn trained_adapter_is_modality_invariant_on_clean_data() {
    // One noiseless sample per class, so the loss can reach zero.
    let data = generate_synthetic(&SyntheticSpec {
        classes: 6,
        n_per_class: 1,
        semantic_dim: 8,
        image_dim: 12,
        text_dim: 10,
        noise_sigma: 0.0,
        eval_fraction: 0.0,
        seed: 3,
    })
    .unwrap()
    .dataset;
    let mut text = data.text.clone();
    text.sample_ids = data.image.sample_ids.clone();
    let batch = TrainBatch::new(vec![data.image.clone(), text]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hyper = AdapterHyper { k_intra: 2, k_cross: 2, ..AdapterHyper::default() };
    let mut model = small_model(&mut rng, sigs(12, 10), 32, 8, hyper);
    // Ground-truth anchors as labels: self-labelling may settle two samples
    // on one anchor, where zero loss is unreachable.
    let truth: Vec<u32> = batch.sample_ids().iter().map(|id| data.manifest.class_labels[id]).collect();
    let labels = vec![truth.clone(), truth];
    let mask = vec![true; batch.len()];
    let mut opt = OptimizerState::new(&model);
    let mut cfg = TrainConfig::default();
    cfg.adam.lr = 1e-2;
    let mut last = f64::INFINITY;
    for _ in 0..6000 {
        let (loss, g) = backward(&batch, &model, &data.skb, &labels, &mask, &cfg).unwrap();
        (model, opt) = apply_adam(&model, &g, &opt, &cfg.adam).unwrap();
        last = loss.total;
    }
    assert!(last < 1e-2, "loss {last}");
    let tokens = model.encode(&batch.sets).unwrap();
    for i in 0..batch.len() {
        let c = cosine_similarity(tokens[0].row(i), tokens[1].row(i)).unwrap();
        assert!(c >= 0.99, "pair {i}: cosine {c}");
    }
    let identity: Vec<usize> = (0..batch.len()).collect();
    let conf = batch_confidence(&tokens[0], &tokens[1], &identity).unwrap();
    assert!(conf.iter().all(|&c| c > 0.0), "{conf:?}");
}

#[test]
fn loss_decreases_on_a_frozen_batch() {
    let mut decreased = 0;
    let trials = 20;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = sigs(6, 5);
        let batch = random_batch(&mut rng, 8, dims);
        let skb = random_skb(&mut rng, 3, 4);
        let mut model = small_model(&mut rng, dims, 8, 4, AdapterHyper { k_intra: 3, k_cross: 3, ..AdapterHyper::default() });
        let mut cfg = TrainConfig::default();
        cfg.adam.lr = 1e-3;
        let a = assess_batch(&batch, &model, &skb, 0.0).unwrap();
        let start = total_loss(&batch, &model, &skb, &a.labels, &a.mask, &cfg).unwrap().total;
        let mut opt = OptimizerState::new(&model);
        for _ in 0..50 {
            let (_, g) = backward(&batch, &model, &skb, &a.labels, &a.mask, &cfg).unwrap();
            (model, opt) = apply_adam(&model, &g, &opt, &cfg.adam).unwrap();
        }
        let end = total_loss(&batch, &model, &skb, &a.labels, &a.mask, &cfg).unwrap().total;
        decreased += (end < start) as usize;
    }
    assert!(decreased * 10 >= trials as usize * 9, "{decreased}/{trials}");
}

#[test]
fn round_duration_is_the_slowest_participant() {
    let cfg = tiny_config();
    let prepared = prepare(&cfg).unwrap();
    let fed = cfg.federation_config();
    let (next, summary) = run_round(&prepared.state, &prepared.dataset.skb, &fed).unwrap();
    let train = TrainConfig { seed: fed.seed, ..fed.train.clone() };
    let expected = prepared
        .state
        .clients
        .iter()
        .filter(|c| summary.participants.contains(&c.profile.client_id))
        .map(|c| {
            let batches: usize = (0..train.local_epochs as u64)
                .map(|e| epoch_batches(&c.data, &c.ledger, &train, 1, e).len())
                .sum();
            batches as f64 / c.profile.compute_speed
        })
        .fold(0.0, f64::max);
    assert_eq!(summary.sim_duration, expected);
    assert_eq!(next.round, 1);
}

#[test]
fn results_have_one_row_per_round_and_echo_the_config() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run_experiment_config(&cfg, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len() as u64, cfg.federation.rounds + 2);
    let echo: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config-echo.json")).unwrap()).unwrap();
    assert_eq!(echo, cfg);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], cfg.hash().unwrap());
    assert!(!dir.path().join("metrics.csv.partial").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_respects_degree_bounds_and_unit_tokens(seed in 0u64..10_000, n in 1usize..12, k_intra in 0usize..5, k_cross in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = sigs(5, 4);
        let batch = random_batch(&mut rng, n, dims);
        let hyper = AdapterHyper { k_intra, k_cross, ..AdapterHyper::default() };
        let params = AdapterParams::init(&dims, 16, 3, hyper, &mut rng).unwrap();
        let trace = forward_traced(&batch.sets, &params).unwrap();
        let again = forward_traced(&batch.sets, &params).unwrap();
        let g = trace.graph();
        for i in 0..g.nodes.len() {
            prop_assert!(g.out_degree(i, EdgeKind::Intra) <= k_intra);
            prop_assert!(g.out_degree(i, EdgeKind::Cross) <= k_cross);
        }
        for r in 0..trace.tokens().rows() {
            prop_assert!((norm(trace.tokens().row(r)) - 1.0).abs() < 1e-9);
        }
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(trace.tokens()), bits(again.tokens()));
    }

    #[test]
    fn loss_ignores_sample_ids(seed in 0u64..10_000, offset in 1u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = sigs(5, 4);
        let batch = random_batch(&mut rng, 7, dims);
        let skb = random_skb(&mut rng, 3, 3);
        let model = small_model(&mut rng, dims, 16, 3, AdapterHyper { k_intra: 2, k_cross: 2, ..AdapterHyper::default() });
        let cfg = TrainConfig::default();
        let a = assess_batch(&batch, &model, &skb, 0.2).unwrap();
        let mut renamed = batch.clone();
        // A bijection on ids that scrambles their order.
        let new_ids: Vec<u64> = (0..7u64).map(|i| (6 - i) * 7919 + offset).collect();
        for s in renamed.sets.iter_mut() {
            s.sample_ids = new_ids.clone();
        }
        let l1 = total_loss(&batch, &model, &skb, &a.labels, &a.mask, &cfg).unwrap();
        let l2 = total_loss(&renamed, &model, &skb, &a.labels, &a.mask, &cfg).unwrap();
        prop_assert_eq!(l1, l2);
    }
}
