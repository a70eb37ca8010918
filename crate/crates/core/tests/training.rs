use std::collections::BTreeMap;

use rsfme_core::data::{synthetic_dataset, to_tensor, LabeledSample};
use rsfme_core::training::{
    cross_entropy, cross_entropy_logits, infer_samples, load_checkpoint, lr_schedule, restore,
    save_checkpoint, sgd_step, train, Checkpoint, OptimizerState, Profile, TrainConfig,
    TrainOptions, Trainer,
};
use rsfme_core::{CheckpointError, Error, Model, ModelConfig, ParamStore};
use rsfme_tensor::{grad_check, GradCheckOptions, Graph, Tensor};

fn one_param(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("p", Tensor::scalar(v), true).unwrap();
    s
}

fn grads(v: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
}

#[test]
fn momentum_hand_cases() {
    let mut store = one_param(1.0);
    let mut state = OptimizerState::new(0.1, 0.9);
    sgd_step(&mut store, &grads(0.5), &mut state).unwrap();
    assert!((state.velocity["p"].item() - 0.5).abs() < 1e-15);
    assert!((store.get("p").unwrap().item() - 0.95).abs() < 1e-15);
    sgd_step(&mut store, &grads(0.5), &mut state).unwrap();
    assert!((state.velocity["p"].item() - 0.95).abs() < 1e-15);
    assert!((store.get("p").unwrap().item() - 0.855).abs() < 1e-15);
}

#[test]
fn zero_rate_or_zero_gradient_changes_nothing() {
    let mut store = one_param(2.5);
    sgd_step(&mut store, &grads(0.0), &mut OptimizerState::new(0.1, 0.9)).unwrap();
    assert_eq!(store.get("p").unwrap().item(), 2.5);
    sgd_step(&mut store, &grads(3.0), &mut OptimizerState::new(0.0, 0.9)).unwrap();
    assert_eq!(store.get("p").unwrap().item(), 2.5);
    // μ = 0 is plain gradient descent
    sgd_step(&mut store, &grads(3.0), &mut OptimizerState::new(0.25, 0.0)).unwrap();
    assert_eq!(store.get("p").unwrap().item(), 2.5 - 0.75);
}

#[test]
fn sgd_rejects_shape_mismatch() {
    let mut store = one_param(1.0);
    let g = BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]);
    assert!(sgd_step(&mut store, &g, &mut OptimizerState::new(0.1, 0.9)).is_err());
}

#[test]
fn cross_entropy_closed_forms() {
    let uniform = Tensor::full(&[3, 5], 0.2);
    assert!((cross_entropy(&uniform, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!(
        (cross_entropy_logits(&Tensor::zeros(&[2, 5]), &[1, 2]).unwrap() - 5f64.ln()).abs() < 1e-12
    );
    let onehot = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(cross_entropy(&onehot, &[1]).unwrap(), 0.0);
    // log-sum-exp stays finite for large logits
    let big = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
    assert!((cross_entropy_logits(&big, &[1]).unwrap() - 1000.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
    let labels = [2usize, 0];
    let report = grad_check(
        |g: &mut Graph, v| g.softmax_cross_entropy(v[0], &labels),
        std::slice::from_ref(&logits),
        &GradCheckOptions::with_tolerance(1e-6),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    // and the closed form (softmax - onehot) / B
    let mut g = Graph::new();
    let x = g.leaf(logits.clone());
    let loss = g.softmax_cross_entropy(x, &labels).unwrap();
    let grad = g.backward(loss).unwrap().get(x).unwrap().clone();
    let p = rsfme_tensor::ops::softmax(&logits);
    for r in 0..2 {
        for c in 0..3 {
            let want = (p.at(&[r, c]) - if labels[r] == c { 1.0 } else { 0.0 }) / 2.0;
            assert!((grad.at(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn schedule_is_piecewise_and_non_increasing() {
    let cfg = TrainConfig::profile(Profile::Table2);
    assert_eq!(lr_schedule(0, &cfg), 1e-3);
    assert_eq!(cfg.breakpoint_epochs(), vec![6, 9]);
    let rates: Vec<f64> = (0..cfg.epochs).map(|e| lr_schedule(e, &cfg)).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    assert!((rates[6] - 1e-4).abs() < 1e-18 && (rates[9] - 1e-5).abs() < 1e-18);
    let sec = TrainConfig::profile(Profile::Sec43);
    assert_eq!(lr_schedule(29, &sec), 1e-4);
    assert!((lr_schedule(30, &sec) - 1e-5).abs() < 1e-18);
    assert!((lr_schedule(43, &sec) - 1e-6).abs() < 1e-18);
}

fn overfit_fixture() -> Vec<LabeledSample> {
    synthetic_dataset(2, 4, 32, 17).unwrap()
}

fn tiny_full(seed: u64) -> (Model, ParamStore) {
    Model::build(&ModelConfig::tiny(), seed).unwrap()
}

/// Steps until eval-mode accuracy on the training images reaches 100%.
fn steps_to_memorise(samples: &[LabeledSample], limit: usize) -> (Option<usize>, Vec<f64>) {
    let (model, store) = tiny_full(0);
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::profile(Profile::Table2)
    };
    let mut trainer = Trainer::new(&model, store, cfg);
    let images = to_tensor(samples.iter().map(|s| &s.image)).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut losses = Vec::new();
    for step in 1..=limit {
        losses.push(trainer.step(&images, &labels).unwrap().loss);
        let out = infer_samples(&model, &trainer.store, samples, 16).unwrap();
        if out.predictions == labels {
            return (Some(step), losses);
        }
    }
    (None, losses)
}

#[test]
fn tiny_model_memorises_eight_images() {
    let samples = overfit_fixture();
    let (steps, losses) = steps_to_memorise(&samples, 200);
    assert!(
        steps.is_some(),
        "no memorisation within 200 steps; last loss {:?}",
        losses.last()
    );
    assert!(losses.last().unwrap() < &losses[0]);
    // 20-step moving average of the loss falls until memorisation
    let avg: Vec<f64> = losses
        .windows(20)
        .map(|w| w.iter().sum::<f64>() / 20.0)
        .collect();
    assert!(avg.windows(2).all(|w| w[1] < w[0]), "{avg:?}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let samples = synthetic_dataset(2, 3, 32, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::profile(Profile::Table2)
    };
    let run = || {
        let (model, store) = tiny_full(5);
        let out = train(
            &model,
            store,
            &samples,
            &samples[..2],
            &cfg,
            None,
            &TrainOptions::default(),
        )
        .unwrap();
        (out.log, out.store)
    };
    let (log_a, store_a) = run();
    let (log_b, store_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 4);
    assert!(store_a
        .iter()
        .zip(store_b.iter())
        .all(|(a, b)| a.0 == b.0 && a.1.value == b.1.value));
}

#[test]
fn resumed_run_reproduces_uninterrupted_log() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = synthetic_dataset(2, 3, 32, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 4,
        ..TrainConfig::profile(Profile::Table2)
    };
    let (model, store) = tiny_full(6);
    let full = train(
        &model,
        store.clone(),
        &samples,
        &samples[..2],
        &cfg,
        None,
        &TrainOptions::default(),
    )
    .unwrap();

    let opts = TrainOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        stop_after: Some(1),
        ..TrainOptions::default()
    };
    let first = train(&model, store, &samples, &samples[..2], &cfg, None, &opts).unwrap();
    assert_eq!(first.progress.epoch, 1);
    let ckpt = load_checkpoint(&tmp.path().join("last.ckpt")).unwrap();
    let resumed = train(
        &model,
        ParamStore::new(),
        &samples,
        &samples[..2],
        &cfg,
        Some(&ckpt),
        &TrainOptions::default(),
    )
    .unwrap();
    let stitched: Vec<_> = first.log.iter().chain(&resumed.log).cloned().collect();
    assert_eq!(stitched, full.log);
    for ((n, a), (_, b)) in resumed.store.iter().zip(full.store.iter()) {
        assert_eq!(a.value, b.value, "{n}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("train_log.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,loss,accuracy,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = synthetic_dataset(2, 2, 32, 3).unwrap();
    let (model, store) = tiny_full(7);
    let mut trainer = Trainer::new(&model, store, TrainConfig::profile(Profile::Table2));
    let images = to_tensor(samples.iter().map(|s| &s.image)).unwrap();
    trainer.step(&images, &[0, 0, 1, 1]).unwrap();
    trainer.progress.best_metric = Some(0.75);
    let ckpt = trainer.checkpoint(&rsfme_core::training::config_snapshot(
        &model.cfg,
        &trainer.cfg,
        &Default::default(),
    ));
    let path = tmp.path().join("a.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for (name, t) in &ckpt.tensors {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(&back.tensors[name]), "{name}");
    }
    assert_eq!(back.encode(), ckpt.encode());

    let (model2, store2) = restore(&back).unwrap();
    let before = model.infer(&trainer.store, &images).unwrap();
    let after = model2.infer(&store2, &images).unwrap();
    assert_eq!(before, after);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (model, store) = tiny_full(8);
    let trainer = Trainer::new(&model, store, TrainConfig::profile(Profile::Table2));
    let bytes = trainer.checkpoint("").encode();
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() / 2]),
        Err(CheckpointError::Corrupt(_))
    ));
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"PK\x03\x04");
    assert!(matches!(
        Checkpoint::decode(&foreign),
        Err(CheckpointError::BadMagic(_))
    ));
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::decode(&future),
        Err(CheckpointError::Version { found: 99, .. })
    ));
    assert!(matches!(
        load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn divergence_aborts_the_step() {
    let (model, store) = tiny_full(9);
    let cfg = TrainConfig {
        lr: 1e30,
        ..TrainConfig::profile(Profile::Table2)
    };
    let samples = overfit_fixture();
    let images = to_tensor(samples.iter().map(|s| &s.image)).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut trainer = Trainer::new(&model, store, cfg);
    let mut result = Ok(());
    for _ in 0..5 {
        if let Err(e) = trainer.step(&images, &labels) {
            result = Err(e);
            break;
        }
    }
    assert!(matches!(result, Err(Error::Diverged { .. })), "{result:?}");
}
