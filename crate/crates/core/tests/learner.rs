use egcl::error::Error;
use egcl::exemplar::build_dictionary;
use egcl::gradcheck::gradcheck;
use egcl::graph::Graph;
use egcl::learner::*;
use egcl::levels::Level;
use egcl::pipeline::{exemplar_crops, initial_params, run_online, PipelineConfig};
use egcl::rng;
use egcl::synth::{generate_dataset, PyramidFeatures, SceneSpec, SPATIAL};
use egcl::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

const SMALL: [usize; 4] = [2, 2, 3, 3];

fn random_features(seed: u64, channels: [usize; 4]) -> PyramidFeatures {
    let mut r = rng::stream(seed, 0);
    let levels = channels.map(|c| {
        let data = (0..c * SPATIAL * SPATIAL).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::new(vec![c, SPATIAL, SPATIAL], data).unwrap()
    });
    PyramidFeatures::new(levels).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: SMALL,
        hidden: 6,
        embed_dim: 4,
        transform: true,
    }
}

#[test]
fn embeddings_are_unit_and_deterministic() {
    let store = init_params(&ModelConfig::default(), 3).unwrap();
    let again = init_params(&ModelConfig::default(), 3).unwrap();
    assert!(store.bit_eq(&again));
    let f = random_features(1, egcl::synth::DEFAULT_CHANNELS);
    for level in Level::ALL {
        let e = embed(&f, level, &store).unwrap();
        assert_eq!(e.len(), 16);
        let n: f64 = e.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn missing_parameter_is_reported() {
    let mut store = init_params(&small_model(), 0).unwrap();
    store.retain(|k| k != conv_key(Level::P4, 2, "weight"));
    let f = random_features(2, SMALL);
    assert!(embed(&f, Level::P2, &store).is_ok());
    assert!(matches!(embed(&f, Level::P4, &store), Err(Error::MissingParameter(_))));
}

#[test]
fn infer_config_roundtrip() {
    let cfg = small_model();
    let store = init_params(&cfg, 0).unwrap();
    assert_eq!(infer_config(&store).unwrap(), cfg);
    let raw = ModelConfig {
        transform: false,
        ..cfg
    };
    let store = init_params(&raw, 0).unwrap();
    let got = infer_config(&store).unwrap();
    assert!(!got.transform);
    assert_eq!(got.channels, SMALL);
}

fn triplet_loss(g: &mut Graph, store: &egcl::params::ParamStore, cfg: &ContrastiveParams) -> MultiLevelLoss {
    let e = random_features(10, SMALL);
    let p = random_features(11, SMALL);
    let n1 = random_features(12, SMALL);
    let n2 = random_features(13, SMALL);
    let negs = [&n1, &n2];
    let batch = TripletBatch {
        exemplar: &e,
        positive: &p,
        negatives: &negs,
    };
    multilevel_loss(g, store, &batch, cfg).unwrap()
}

#[test]
fn level_weights_select_terms() {
    let store = init_params(&small_model(), 4).unwrap();
    let only_p2 = ContrastiveParams {
        level_weights: [1.0, 0.0, 0.0, 0.0],
        ..Default::default()
    };
    let mut g = Graph::new();
    let l = triplet_loss(&mut g, &store, &only_p2);
    assert_eq!(g.scalar(l.total), g.scalar(l.per_level[0]));
    let grads = g.backward(l.total).unwrap();
    for (key, var) in g.param_vars() {
        let gsum: f64 = grads.get(*var).map_or(0.0, |v| v.iter().map(|x| x.abs()).sum());
        if key.contains(".l2.") {
            assert!(gsum > 0.0, "{key}");
        } else {
            assert_eq!(gsum, 0.0, "{key}");
        }
    }
}

#[test]
fn weighted_sum_matches_hand_arithmetic() {
    let store = init_params(&small_model(), 5).unwrap();
    let cfg = ContrastiveParams::default();
    let mut g = Graph::new();
    let l = triplet_loss(&mut g, &store, &cfg);
    let per = l.per_level.map(|v| g.scalar(v));
    let expect = per[0] + 0.5 * (per[1] + per[2] + per[3]);
    assert!((g.scalar(l.total) - expect).abs() < 1e-12);
}

#[test]
fn doubling_weights_doubles_gradients() {
    let store = init_params(&small_model(), 6).unwrap();
    let base = ContrastiveParams::default();
    let double = ContrastiveParams {
        level_weights: [1.0, 1.0, 1.0, 1.0],
        ..base
    };
    let mut g1 = Graph::new();
    let l1 = triplet_loss(&mut g1, &store, &base);
    let gr1 = g1.backward(l1.total).unwrap();
    let mut g2 = Graph::new();
    let l2 = triplet_loss(&mut g2, &store, &double);
    let gr2 = g2.backward(l2.total).unwrap();
    for (key, var) in g1.param_vars() {
        if key.contains(".l2.") {
            continue;
        }
        let a = gr1.get(*var).unwrap();
        let b = gr2.get(g2.param_vars()[key]).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0), "{key}");
        }
    }
}

#[test]
fn multilevel_loss_gradcheck() {
    let store = init_params(&small_model(), 7).unwrap();
    let cfg = ContrastiveParams::default();
    let report = gradcheck(|g, s| Ok(triplet_loss(g, s, &cfg).total), &store, 1e-6).unwrap();
    assert!(report.checked > 1000);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(2);
    cfg.data.num_scenes = 6;
    cfg.data.eval_scenes = 2;
    cfg.dictionary.k = 4;
    cfg.training.offline_steps = 3;
    cfg.training.online_steps = 3;
    cfg
}

#[test]
fn zero_steps_return_initial_parameters() {
    let mut cfg = tiny_config();
    cfg.training.offline_steps = 0;
    cfg.training.online_steps = 0;
    let data = generate_dataset(&cfg.data).unwrap();
    let dict = build_dictionary(&exemplar_crops(&data), 4, 2).unwrap();
    let init = initial_params(&cfg, true).unwrap();
    let (after, log) = run_online(&init, &data, &dict, &cfg).unwrap();
    assert!(log.is_empty());
    assert!(after.bit_eq(&init));
}

#[test]
fn training_is_replay_exact_and_alpha_zero_is_detection_only() {
    let cfg = tiny_config();
    let data = generate_dataset(&cfg.data).unwrap();
    let dict = build_dictionary(&exemplar_crops(&data), 4, 2).unwrap();
    let init = initial_params(&cfg, true).unwrap();
    let crops: Vec<&PyramidFeatures> = data.train.iter().flat_map(|s| s.pedestrians.iter().map(|p| &p.features)).collect();
    let bg: Vec<&PyramidFeatures> = data.train_negatives().into_iter().map(|p| &p.features).collect();
    let (a, la) = train_offline(&init, &crops, &bg, &dict, &cfg.contrastive, &cfg.training).unwrap();
    let (b, lb) = train_offline(&init, &crops, &bg, &dict, &cfg.contrastive, &cfg.training).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(la, lb);
    // Offline training leaves the detection heads alone.
    let head = head_key(Level::P3, "cls", "weight");
    assert_eq!(a.get(&head).unwrap().data(), init.get(&head).unwrap().data());

    let no_cl = ContrastiveParams {
        alpha: 0.0,
        ..cfg.contrastive
    };
    let (x, lx) = train_online(&a, &data.train, &dict, &no_cl, &cfg.training).unwrap();
    assert!(lx.iter().all(|r| r.total == r.l_det && r.l_cl == [0.0; 4]));
    // Without a contrastive term the projection gets no gradient.
    let proj = proj_key(Level::P2, 1, "weight");
    assert_eq!(x.get(&proj).unwrap().data(), a.get(&proj).unwrap().data());
    let (y, _) = train_online(&a, &data.train, &dict, &cfg.contrastive, &cfg.training).unwrap();
    assert_ne!(y.get(&proj).unwrap().data(), a.get(&proj).unwrap().data());
}

#[test]
fn divergence_is_reported() {
    let cfg = tiny_config();
    let data = generate_dataset(&cfg.data).unwrap();
    let dict = build_dictionary(&exemplar_crops(&data), 4, 2).unwrap();
    let mut poisoned = initial_params(&cfg, true).unwrap();
    for level in Level::ALL {
        *poisoned.get_mut(&head_key(level, "cls", "bias")).unwrap() = Tensor::vector(vec![f64::NAN]);
    }
    let err = run_online(&poisoned, &data, &dict, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err:?}");
}

#[test]
fn loss_csv_has_header_and_rows() {
    let rec = LossRecord {
        phase: Phase::Online,
        step: 3,
        l_det: 0.5,
        l_cl: [1.0, 2.0, 3.0, 4.0],
        total: 5.5,
    };
    let csv = loss_csv(&[rec]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert!(lines[1].starts_with("online,3,"));
    assert_eq!(lines.len(), 2);
}

#[test]
fn default_scene_parameters_are_valid() {
    assert!(SceneSpec::default().validate().is_ok());
}
