//! Cross-entropy loss, SGD with momentum, the piecewise learning-rate
//! schedule, the minibatch training loop and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{ops, Graph, Tensor, TensorError};

use crate::config::{ModelConfig, Settings};
use crate::data::{to_tensor, LabeledSample};
use crate::error::{Error, Result};
use crate::fme::Model;
use crate::nn::apply_norm_updates;
use crate::params::{derive_seed, Ctx, Mode, ParamStore};

/// Hyper-parameter sets: `table2` is α=1e-3, μ=0.9, 10 epochs; `sec43` is
/// α=1e-4, μ=0.95, 50 epochs. Both use batches of 16.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Table2,
    Sec43,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Profile::Table2),
            "sec43" => Ok(Profile::Sec43),
            _ => Err(Error::Config(format!(
                "unknown profile {s:?} (expected table2 or sec43)"
            ))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Table2 => "table2",
            Profile::Sec43 => "sec43",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Breakpoints as fractions of `epochs`.
    pub breakpoints: Vec<f64>,
    pub lr_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let (lr, momentum, epochs) = match p {
            Profile::Table2 => (1e-3, 0.9, 10),
            Profile::Sec43 => (1e-4, 0.95, 50),
        };
        Self {
            profile: p,
            epochs,
            batch_size: 16,
            lr,
            momentum,
            breakpoints: vec![0.6, 0.85],
            lr_factor: 0.1,
            seed: 0,
        }
    }

    /// Applies `train.*` keys on top of the profile named by `train.profile`
    /// (default `table2`).
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let profile = s
            .parsed::<Profile>("train.profile")?
            .unwrap_or(Profile::Table2);
        let mut c = Self::profile(profile);
        if let Some(v) = s.parsed("train.epochs")? {
            c.epochs = v;
        }
        if let Some(v) = s.parsed("train.batch")? {
            c.batch_size = v;
        }
        if let Some(v) = s.parsed("train.lr")? {
            c.lr = v;
        }
        if let Some(v) = s.parsed("train.momentum")? {
            c.momentum = v;
        }
        if let Some(v) = s.parsed("train.lr_factor")? {
            c.lr_factor = v;
        }
        if let Some(v) = s.parsed("train.seed")? {
            c.seed = v;
        }
        if let Some(v) = s.get("train.breakpoints") {
            c.breakpoints = v
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::Config(format!("train.breakpoints: cannot parse {v:?}"))
                    })
                })
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        s.set("train.profile", self.profile.name());
        s.set("train.epochs", self.epochs.to_string());
        s.set("train.batch", self.batch_size.to_string());
        s.set("train.lr", self.lr.to_string());
        s.set("train.momentum", self.momentum.to_string());
        s.set(
            "train.breakpoints",
            self.breakpoints
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        s.set("train.lr_factor", self.lr_factor.to_string());
        s.set("train.seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr >= 0 and 0 <= momentum < 1, got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        if self.breakpoints.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config(
                "breakpoints must be fractions in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Breakpoint epochs, `round(fraction * epochs)` with halves rounded up.
    pub fn breakpoint_epochs(&self) -> Vec<usize> {
        self.breakpoints
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }
}

/// Learning rate for a 0-based epoch: the base rate times `lr_factor` once
/// for every breakpoint at or before `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .breakpoint_epochs()
        .iter()
        .filter(|&&b| epoch >= b)
        .count();
    cfg.lr * cfg.lr_factor.powi(passed as i32)
}

/// Mean `-ln p[label]` over rows of a probability matrix.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let c = probs.dim(1);
    let mut total = 0.0;
    for (row, &l) in probs.data().chunks(c).zip(labels) {
        if row[l] <= 0.0 {
            return Err(Error::Undefined(
                "cross-entropy of a zero-probability label",
            ));
        }
        total -= row[l].ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy from logits via log-sum-exp.
pub fn cross_entropy_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let c = logits.dim(1);
    let lse = ops::logsumexp_rows(logits);
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .zip(&lse)
        .map(|((row, &l), z)| z - row[l])
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(t: &Tensor, labels: &[usize]) -> Result<()> {
    if t.rank() != 2 || t.dim(0) != labels.len() {
        return Err(Error::Config(format!(
            "{} labels for a {:?} batch",
            labels.len(),
            t.shape()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= t.dim(1)) {
        return Err(Error::Data(format!(
            "label {l} out of range for {} classes",
            t.dim(1)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    /// Created as zeros on first use of each parameter.
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }
}

/// Classical momentum: `v <- μ v + g`, `p <- p - α v`, for every named gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "{name}: gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(Error::Config(format!(
                "{name}: velocity shape {:?} is stale",
                v.shape()
            )));
        }
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = state.momentum * *vi + gi;
        }
        let updated = p.zip_map(v, |pi, vi| pi - state.lr * vi)?;
        params.set(name, updated)?;
    }
    Ok(())
}

/// Position in a training run, persisted for resumption.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of optimizer steps taken.
    pub step: u64,
    /// Best validation accuracy so far.
    pub best_metric: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch,split,loss,accuracy,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.8},{:.6},{:e}",
            self.epoch, self.split, self.loss, self.accuracy, self.lr
        )
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Owns the mutable training state for one model.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub store: ParamStore,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub progress: Progress,
}

impl<'m> Trainer<'m> {
    /// Parameters are rounded to single precision so that checkpoints are exact.
    pub fn new(model: &'m Model, mut store: ParamStore, cfg: TrainConfig) -> Self {
        store.round_to_f32();
        Self {
            model,
            store,
            opt: OptimizerState::new(cfg.lr, cfg.momentum),
            cfg,
            progress: Progress::default(),
        }
    }

    /// Continues from a checkpoint's parameters, optimizer state and progress.
    pub fn resume(model: &'m Model, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let (_, mut store) = Model::build(&model.cfg, 0)?;
        store.load_values(&ckpt.tensors)?;
        let opt = ckpt.optimizer.clone().ok_or_else(|| {
            Error::Config("checkpoint has no optimizer state to resume from".into())
        })?;
        Ok(Self {
            model,
            store,
            opt,
            cfg,
            progress: ckpt.progress,
        })
    }

    /// One forward/backward/update on a batch.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepStats> {
        let epoch = self.progress.epoch;
        let step = self.progress.step;
        let diverged = |loss: f64| Error::Diverged {
            epoch,
            step: step as usize,
            loss,
        };
        let mut g = Graph::new();
        let seed = derive_seed(&[self.cfg.seed, DROPOUT_STREAM, step]);
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Train, seed);
        let run = |ctx: &mut Ctx| -> Result<_> {
            let x = ctx.g.constant(images.clone());
            let logits = self.model.logits(ctx, x)?;
            let loss = ctx.g.softmax_cross_entropy(logits, labels)?;
            Ok((logits, loss))
        };
        let (logits, loss) = match run(&mut ctx) {
            Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(f64::NAN)),
            r => r?,
        };
        let loss_value = ctx.g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(diverged(loss_value));
        }
        let correct = ctx
            .g
            .value(logits)
            .argmax_rows()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let grads = match ctx.g.backward(loss) {
            Err(TensorError::NonFinite { .. }) => return Err(diverged(loss_value)),
            r => r?,
        };
        let grads = ctx.param_grads(&grads);
        if grads.values().any(|t| !t.is_finite()) {
            return Err(diverged(loss_value));
        }
        let updates = ctx.take_norm_updates();
        drop(ctx);
        sgd_step(&mut self.store, &grads, &mut self.opt)?;
        apply_norm_updates(&mut self.store, &updates, self.model.cfg.bn_momentum)?;
        self.store.round_to_f32();
        self.progress.step += 1;
        Ok(StepStats {
            loss: loss_value,
            correct,
        })
    }

    /// One pass over `train` in a shuffled order derived from `(seed, epoch)`.
    /// Returns the sample-weighted mean loss and the accuracy.
    pub fn run_epoch(&mut self, train: &[LabeledSample]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Data("empty training partition".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.cfg.seed,
            SHUFFLE_STREAM,
            self.progress.epoch as u64,
        ]));
        order.shuffle(&mut rng);
        self.opt.lr = lr_schedule(self.progress.epoch, &self.cfg);
        let (mut loss, mut correct) = (0.0, 0);
        for batch in order.chunks(self.cfg.batch_size) {
            let images = to_tensor(batch.iter().map(|&i| &train[i].image))?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let s = self.step(&images, &labels)?;
            loss += s.loss * batch.len() as f64;
            correct += s.correct;
        }
        Ok((
            loss / train.len() as f64,
            correct as f64 / train.len() as f64,
        ))
    }

    /// Eval-mode loss and accuracy.
    pub fn evaluate(&self, samples: &[LabeledSample]) -> Result<(f64, f64)> {
        let out = infer_samples(self.model, &self.store, samples, self.cfg.batch_size)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let loss = cross_entropy_logits(&out.logits, &labels)?;
        let correct = out
            .predictions
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok((loss, correct as f64 / samples.len().max(1) as f64))
    }

    pub fn checkpoint(&self, config: &str) -> Checkpoint {
        Checkpoint {
            tensors: self
                .store
                .iter()
                .map(|(k, e)| (k.to_string(), e.value.clone()))
                .collect(),
            optimizer: Some(self.opt.clone()),
            progress: self.progress,
            config: config.to_string(),
        }
    }
}

/// Logits, probabilities, pooled features and predictions for a sample set.
pub struct Inference {
    pub logits: Tensor,
    pub probs: Tensor,
    pub features: Tensor,
    pub predictions: Vec<usize>,
}

pub fn infer_samples(
    model: &Model,
    store: &ParamStore,
    samples: &[LabeledSample],
    batch: usize,
) -> Result<Inference> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut logits = Vec::new();
    let mut features = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let images = to_tensor(chunk.iter().map(|s| &s.image))?;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval, 0);
        let x = ctx.g.constant(images);
        let f = model.features(&mut ctx, x)?;
        let l = model.head.logits_from_pooled(&mut ctx, f)?;
        features.push(ctx.g.value(f).clone());
        logits.push(ctx.g.value(l).clone());
    }
    let logits = ops::concat(&logits.iter().collect::<Vec<_>>(), 0)?;
    let features = ops::concat(&features.iter().collect::<Vec<_>>(), 0)?;
    let probs = ops::softmax(&logits);
    let predictions = logits.argmax_rows();
    Ok(Inference {
        logits,
        probs,
        features,
        predictions,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `best.ckpt`, `last.ckpt` and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans `epochs`).
    pub stop_after: Option<usize>,
    /// Extra keys recorded in the checkpoint's config snapshot.
    pub extra_config: Settings,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<LogRow>,
    pub progress: Progress,
}

/// Full snapshot of model and training settings stored in checkpoints.
pub fn config_snapshot(model: &ModelConfig, train: &TrainConfig, extra: &Settings) -> String {
    let mut s = model.to_settings();
    s.merge(&train.to_settings());
    s.merge(extra);
    s.to_text()
}

/// Trains from scratch, or from `resume` when given. Each epoch logs a train
/// row and, when `validation` is non-empty, a validation row; the checkpoint
/// with the best validation accuracy (train accuracy without a validation
/// set) is kept as `best.ckpt`, the latest as `last.ckpt`.
pub fn train(
    model: &Model,
    store: ParamStore,
    train_set: &[LabeledSample],
    validation: &[LabeledSample],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training partition".into()));
    }
    let mut trainer = match resume {
        Some(c) => Trainer::resume(model, cfg.clone(), c)?,
        None => Trainer::new(model, store, cfg.clone()),
    };
    let snapshot = config_snapshot(&model.cfg, cfg, &opts.extra_config);
    let log_path = opts.out_dir.as_ref().map(|d| d.join("train_log.csv"));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if resume.is_none() {
            let p = log_path.as_ref().expect("set with out_dir");
            std::fs::write(p, format!("{}\n", LogRow::HEADER)).map_err(|e| Error::io(p, e))?;
        }
    }
    let last_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut log = Vec::new();
    while trainer.progress.epoch < last_epoch {
        let epoch = trainer.progress.epoch;
        let (loss, acc) = trainer.run_epoch(train_set)?;
        let lr = trainer.opt.lr;
        let mut rows = vec![LogRow {
            epoch,
            split: "train",
            loss,
            accuracy: acc,
            lr,
        }];
        let mut metric = acc;
        if !validation.is_empty() {
            let (vl, va) = match trainer.evaluate(validation) {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(Error::Diverged {
                        epoch,
                        step: trainer.progress.step as usize,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            };
            rows.push(LogRow {
                epoch,
                split: "val",
                loss: vl,
                accuracy: va,
                lr,
            });
            metric = va;
        }
        trainer.progress.epoch += 1;
        let improved = trainer.progress.best_metric.is_none_or(|b| metric > b);
        if improved {
            trainer.progress.best_metric = Some(metric);
        }
        if let Some(dir) = &opts.out_dir {
            let ckpt = trainer.checkpoint(&snapshot);
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &ckpt)?;
            }
            save_checkpoint(&dir.join("last.ckpt"), &ckpt)?;
            append_log(log_path.as_ref().expect("set with out_dir"), &rows)?;
        }
        for r in &rows {
            log::info!("{}", r.to_csv());
        }
        log.extend(rows);
    }
    Ok(TrainOutcome {
        store: trainer.store,
        log,
        progress: trainer.progress,
    })
}

fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        let _ = writeln!(text, "{}", r.to_csv());
    }
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model recorded in a checkpoint and loads its parameters.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let settings = Settings::parse(&ckpt.config)?;
    // snapshots list every model key, so the default geometry is fully overridden
    let cfg = ModelConfig::from_settings(&settings)?;
    let (model, mut store) = Model::build(&cfg, 0)?;
    store
        .load_values(&ckpt.tensors)
        .map_err(|e| crate::error::CheckpointError::Mismatch(e.to_string()))?;
    Ok((model, store))
}
