//! End-to-end behaviour of data generation, training, inference and scoring
//! on small problems.

use std::fs;
use std::path::Path;

use urpc_core::checkpoint::{load_checkpoint, load_meta};
use urpc_core::data::{
    generate_case, generate_synthetic_dataset, BatchSampler, Case, DatasetManifest, GenerateOptions, LabelMap,
    SamplerConfig,
};
use urpc_core::inference::{sliding_window_predict, InferenceConfig};
use urpc_core::metrics::case_metrics;
use urpc_core::model::{Mode, Network, NetworkConfig};
use urpc_core::tensor::Tensor;
use urpc_core::trainer::{default_grid, read_log, run_ablation, train, Method, TrainConfig, Trainer};
use urpc_core::Error;

fn tiny_net(num_scales: usize) -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        depth: 3,
        num_scales,
        seed: 11,
        ..NetworkConfig::default()
    }
}

fn tiny_train(t_max: usize) -> TrainConfig {
    TrainConfig {
        t_max,
        patch: [16, 16, 16],
        labeled_per_batch: 1,
        unlabeled_per_batch: 1,
        eval_every: 0,
        checkpoint_every: 0,
        eval_stride: Some([16, 16, 16]),
        seed: 5,
        ..TrainConfig::default()
    }
}

fn tiny_dataset(dir: &Path) -> DatasetManifest {
    let opts = GenerateOptions {
        num_cases: 8,
        dims: [24, 24, 24],
        seed: 3,
        num_val: 1,
        num_test: 2,
        labeled_fraction: 0.4,
    };
    generate_synthetic_dataset(&opts, dir).unwrap()
}

#[test]
fn lesion_fraction_is_small_but_present() {
    for seed in 0..50 {
        let (_, y) = generate_case([64, 64, 64], seed).unwrap();
        let lesion = y.data().iter().filter(|&&l| l == 2).count() as f64 / y.data().len() as f64;
        assert!(lesion > 0.0 && lesion < 0.1, "case {seed}: class-2 fraction {lesion}");
    }
}

fn slice_case(id: &str, seed: u64) -> Case {
    let (v, y) = generate_case([16, 64, 64], seed).unwrap();
    Case {
        id: id.into(),
        volume: v.crop([8, 0, 0], [1, 64, 64]).unwrap().normalize().unwrap(),
        labels: Some(y.crop([8, 0, 0], [1, 64, 64]).unwrap()),
    }
}

#[test]
fn planar_supervised_run_halves_the_loss() {
    let cases: Vec<Case> = (0..4).map(|i| slice_case(&format!("s{i}"), 100 + i)).collect();
    let cfg = TrainConfig {
        method: Method::Sl,
        t_max: 200,
        patch: [1, 32, 32],
        unlabeled_per_batch: 0,
        lr0: 0.05,
        ..tiny_train(200)
    };
    let sampler = BatchSampler::from_cases(
        cases,
        Vec::new(),
        SamplerConfig {
            patch: cfg.patch,
            labeled_per_batch: 2,
            unlabeled_per_batch: 0,
            augment: true,
            seed: 1,
        },
    )
    .unwrap();
    let net_cfg = NetworkConfig {
        planar: true,
        base_channels: 8,
        depth: 4,
        num_scales: 1,
        ..NetworkConfig::default()
    };
    let mut trainer = Trainer::with_sampler(Network::new(net_cfg).unwrap(), sampler, cfg).unwrap();
    let logs: Vec<_> = (0..200).map(|_| trainer.step().unwrap()).collect();
    let first = logs[0].sup;
    let last = logs[190..].iter().map(|l| l.sup).sum::<f64>() / 10.0;
    assert!(last <= 0.5 * first, "supervised loss went from {first} to {last}");
}

#[test]
fn zero_consistency_weight_follows_the_supervised_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let urpc = TrainConfig {
        w_max: 0.0,
        ..tiny_train(15)
    };
    let sl = TrainConfig {
        method: Method::Sl,
        ..urpc.clone()
    };
    let mut a = Trainer::new(&m, tiny_net(3), urpc).unwrap();
    let mut b = Trainer::new(&m, tiny_net(3), sl).unwrap();
    assert!(a.uses_unlabeled() && !b.uses_unlabeled());
    for _ in 0..15 {
        let (la, lb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(la.lambda, 0.0);
        assert!(
            (la.sup - lb.sup).abs() <= 1e-4 * lb.sup,
            "step {}: {} vs {}",
            la.step,
            la.sup,
            lb.sup
        );
    }
}

#[test]
fn logged_schedules_match_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        t_ramp: Some(10),
        ..tiny_train(20)
    };
    let out = train(&m, &tiny_net(2), &cfg, &dir.path().join("run")).unwrap();
    let logs = read_log(&out.log_path).unwrap();
    assert_eq!(logs.len(), 20);
    for (t, l) in logs.iter().enumerate() {
        assert_eq!(l.step, t);
        let ramp = (t as f64 / 10.0).min(1.0);
        let lambda = 0.1 * (-5.0 * (1.0 - ramp).powi(2)).exp();
        let lr = 0.1 * (1.0 - t as f64 / 20.0).powf(0.9);
        assert!((l.lambda - lambda).abs() < 1e-12, "λ at {t}: {}", l.lambda);
        assert!((l.lr - lr).abs() < 1e-12, "lr at {t}: {}", l.lr);
        assert!((l.total - (l.sup + l.lambda * (l.unsup_ur + l.unsup_um))).abs() < 1e-9);
    }
}

#[test]
fn every_parameter_moves_each_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let mut trainer = Trainer::new(&m, tiny_net(3), tiny_train(5)).unwrap();
    for _ in 0..3 {
        let before: Vec<Vec<f32>> = trainer.network().params().iter().map(|p| p.value.clone()).collect();
        trainer.step().unwrap();
        for (p, old) in trainer.network().params().iter().zip(&before) {
            assert_ne!(&p.value, old, "{} did not change", p.name);
        }
    }
}

#[test]
fn divergence_stops_the_run_and_keeps_the_last_good_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let cfg = TrainConfig {
        lr0: 1e300,
        checkpoint_every: 1,
        ..tiny_train(10)
    };
    match train(&m, &tiny_net(2), &cfg, &run) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    let last = run.join("checkpoints/last.ckpt");
    let (net, meta) = load_checkpoint::<f32>(&last).unwrap();
    assert_eq!(meta.step, 0);
    let fresh = Network::<f32>::new(tiny_net(2)).unwrap();
    for (a, b) in net.params().iter().zip(fresh.params()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn identical_configs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        eval_every: 50,
        checkpoint_every: 50,
        ..tiny_train(100)
    };
    let read = |name: &str| {
        let out = train(&m, &tiny_net(2), &cfg, &dir.path().join(name)).unwrap();
        (
            fs::read(&out.log_path).unwrap(),
            fs::read(dir.path().join(name).join("val_log.jsonl")).unwrap(),
            fs::read(&out.final_checkpoint).unwrap(),
        )
    };
    let a = read("a");
    let b = read("b");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a.0).unwrap().lines().count(), 100);
    let other = train(
        &m,
        &tiny_net(2),
        &TrainConfig { seed: 6, ..cfg.clone() },
        &dir.path().join("c"),
    )
    .unwrap();
    assert_ne!(fs::read(&other.log_path).unwrap(), b.0);
}

#[test]
fn ablation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path());
    let cfg = TrainConfig {
        eval_every: 4,
        ..tiny_train(8)
    };
    let net = NetworkConfig {
        base_channels: 2,
        depth: 5,
        ..tiny_net(4)
    };
    let run = |name: &str| {
        let results = run_ablation(&m, &net, &cfg, &default_grid(), &dir.path().join(name)).unwrap();
        assert_eq!(results.len(), 7);
        fs::read_to_string(dir.path().join(name).join("ablation.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].starts_with("config,num_scales,rectify,minimize,dsc_class1"));
    assert!(lines[7].starts_with("s4_ur_um,4,true,true,"));
    let meta = load_meta(&dir.path().join("a/s4/checkpoints/final.ckpt")).unwrap();
    assert_eq!(meta.network.num_scales, 4);
}

#[test]
fn single_window_matches_a_direct_forward_pass() {
    let (v, _) = generate_case([16, 16, 16], 9).unwrap();
    let v = v.normalize().unwrap();
    let net = Network::<f64>::new(tiny_net(3)).unwrap();
    let cfg = InferenceConfig {
        patch: [16, 16, 16],
        ..InferenceConfig::default()
    };
    let res = sliding_window_predict(&net, &v, &cfg).unwrap();
    let x = Tensor::from_vec([1, 1, 16, 16, 16], v.data().iter().map(|&x| x as f64).collect()).unwrap();
    let direct = net.forward(&x, &Mode::Eval).unwrap();
    for (a, b) in res.prob.iter().zip(direct.probs[0].data()) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn perfect_and_background_predictors() {
    let (_, y) = generate_case([32, 32, 32], 4).unwrap();
    let perfect = case_metrics("c", &y, &y, 3).unwrap();
    for m in &perfect.classes {
        assert_eq!(m.dsc, 1.0);
        assert_eq!(m.asd, Some(0.0));
    }
    let background = LabelMap::filled(y.dims(), 0);
    let empty = case_metrics("c", &background, &y, 3).unwrap();
    for m in &empty.classes {
        assert_eq!(m.dsc, 0.0);
        assert_eq!(m.asd, None);
        assert!(m.pred_empty && !m.truth_empty);
    }
}
