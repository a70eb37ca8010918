use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::ValueEnum;
use rayon::prelude::*;
use rsfme_core::data::{
    augment_dataset, holdout_split, load_dataset, load_image, resize, synthetic_dataset, to_tensor,
    AugmentOptions, ImageFormat, LabeledSample, Provenance, ShearAxis, ROUNDS_MAX,
};
use rsfme_core::evaluation::{
    confusion, default_names, feature_projection, features_csv, metrics_csv, pr_csv, pr_curves,
    report, ConfusionMatrix,
};
use rsfme_core::gradcheck::{block_suite, op_suite};
use rsfme_core::training::{
    infer_samples, load_checkpoint, restore, train, Checkpoint, TrainConfig, TrainOptions,
};
use rsfme_core::{Error, Model, ModelConfig, ParamStore, Result, Settings};

use crate::args::{
    AugmentArgs, Axis, Cli, Command, DataArgs, EvalArgs, FeaturesArgs, Format, GradcheckArgs,
    Partition, PredictArgs, SplitArgs, TrainArgs,
};
use crate::resolve::{announce, defaults, layer, required};

const EXIT_NUMERICAL: u8 = 3;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut flags = Settings::new();
    if let Some(s) = cli.seed {
        flags.set("seed", s.to_string());
    }
    if let Some(t) = cli.threads {
        flags.set("threads", t.to_string());
    }
    let file = cli.config.as_deref();
    match cli.command {
        Command::Augment(a) => augment(a, file, flags),
        Command::Split(a) => split(a, file, flags),
        Command::Train(a) => train_cmd(a, file, flags),
        Command::Eval(a) => eval(a, file, flags),
        Command::Predict(a) => predict(a, file, flags),
        Command::Gradcheck(a) => gradcheck(a, file, flags),
        Command::Features(a) => features(a, file, flags),
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn enum_setting<T: ValueEnum>(s: &Settings, key: &str, default: T) -> Result<T> {
    match s.get(key) {
        None => Ok(default),
        Some(v) => {
            T::from_str(v, true).map_err(|_| Error::Config(format!("{key}: unknown value {v:?}")))
        }
    }
}

fn init_threads(s: &Settings) -> Result<()> {
    if let Some(n) = s.parsed::<usize>("threads")? {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn data_flags(d: &DataArgs, flags: &mut Settings) {
    if let Some(p) = &d.data {
        flags.set("data.root", path_str(p));
    }
    if let Some(f) = d.test_fraction {
        flags.set("data.test_fraction", f.to_string());
    }
    if let Some(f) = d.val_fraction {
        flags.set("data.val_fraction", f.to_string());
    }
}

/// Samples and class names from `data.root`, or the seeded synthetic set when
/// no root is configured. Images are resized to `size` when given.
fn load_samples(s: &Settings, size: Option<usize>) -> Result<(Vec<LabeledSample>, Vec<String>)> {
    let (samples, names) = match s.get("data.root") {
        Some(root) => {
            let ds = load_dataset(Path::new(root))?;
            for (p, why) in &ds.skipped {
                log::warn!("skipped {}: {why}", p.display());
            }
            (ds.samples, ds.classes)
        }
        None => {
            let classes: usize = required(s, "data.synthetic_classes")?;
            let per_class: usize = required(s, "data.synthetic_per_class")?;
            let seed: u64 = required(s, "seed")?;
            let side = size.unwrap_or(32) as u32;
            (
                synthetic_dataset(classes, per_class, side, seed)?,
                default_names(classes),
            )
        }
    };
    let samples = match size {
        Some(n) => samples
            .par_iter()
            .map(|x| resize(x, n as u32, n as u32))
            .collect::<Result<Vec<_>>>()?,
        None => samples,
    };
    Ok((samples, names))
}

fn sample_id(s: &LabeledSample) -> String {
    if s.source.as_os_str().is_empty() {
        s.group.clone()
    } else {
        path_str(&s.source)
    }
}

fn partition_indices(
    samples: &[LabeledSample],
    s: &Settings,
    which: Partition,
) -> Result<Vec<usize>> {
    if which == Partition::All {
        return Ok((0..samples.len()).collect());
    }
    let split = holdout_split(
        samples,
        required(s, "data.test_fraction")?,
        required(s, "data.val_fraction")?,
        required(s, "seed")?,
    )?;
    Ok(match which {
        Partition::Train => split.train,
        Partition::Val => split.validation,
        Partition::Test => split.test,
        Partition::All => unreachable!("handled above"),
    })
}

fn augment(a: AugmentArgs, file: Option<&Path>, mut flags: Settings) -> Result<ExitCode> {
    flags.set("data.root", path_str(&a.data));
    if let Some(r) = a.rounds {
        flags.set("augment.rounds", r.to_string());
    }
    if let Some(f) = a.format {
        flags.set("augment.format", format!("{f:?}").to_lowercase());
    }
    if let Some(x) = a.shear_axis {
        flags.set("augment.shear_axis", format!("{x:?}").to_lowercase());
    }
    if let Some(o) = &a.out {
        flags.set("augment.out", path_str(o));
    }
    let mut base = defaults()?;
    base.set("augment.rounds", "20");
    base.set("augment.format", "jpg");
    base.set("augment.shear_axis", "x");
    let mut s = layer(base, file, &flags)?;
    let root: String = required(&s, "data.root")?;
    if s.get("augment.out").is_none() {
        s.set("augment.out", root.clone());
    }
    init_threads(&s)?;
    announce("augment", &s);

    let format = match enum_setting(&s, "augment.format", Format::Jpg)? {
        Format::Jpg => ImageFormat::Jpg,
        Format::Png => ImageFormat::Png,
        Format::Raw => ImageFormat::Raw,
    };
    let shear_axis = match enum_setting(&s, "augment.shear_axis", Axis::X)? {
        Axis::X => ShearAxis::X,
        Axis::Y => ShearAxis::Y,
    };
    let rounds: usize = required(&s, "augment.rounds")?;
    if !(1..=ROUNDS_MAX).contains(&rounds) {
        return Err(Error::Config(format!(
            "augment.rounds must lie in 1..={ROUNDS_MAX}, got {rounds}"
        )));
    }
    let opts = AugmentOptions {
        rounds,
        seed: required(&s, "seed")?,
        out_dir: PathBuf::from(required::<String>(&s, "augment.out")?),
        format,
        shear_axis,
    };
    let ds = load_dataset(Path::new(&root))?;
    for (p, why) in &ds.skipped {
        log::warn!("skipped {}: {why}", p.display());
    }
    let originals: Vec<LabeledSample> = ds
        .samples
        .into_iter()
        .filter(|x| x.provenance == Provenance::Original)
        .collect();
    let made = augment_dataset(&originals, &ds.classes, &opts)?;
    println!(
        "{} originals x {} rounds: wrote {} images under {}",
        originals.len(),
        opts.rounds,
        made.len(),
        opts.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn split(a: SplitArgs, file: Option<&Path>, mut flags: Settings) -> Result<ExitCode> {
    data_flags(&a.data, &mut flags);
    let s = layer(defaults()?, file, &flags)?;
    init_threads(&s)?;
    announce("split", &s);
    let (samples, names) = load_samples(&s, None)?;
    let split = holdout_split(
        &samples,
        required(&s, "data.test_fraction")?,
        required(&s, "data.val_fraction")?,
        required(&s, "seed")?,
    )?;
    let mut part = vec![""; samples.len()];
    for (name, ids) in [
        ("train", &split.train),
        ("val", &split.validation),
        ("test", &split.test),
    ] {
        for &i in ids {
            part[i] = name;
        }
    }
    let mut csv = String::from("index,sample,class,partition\n");
    for (i, x) in samples.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{}", sample_id(x), names[x.label], part[i]);
    }
    emit(a.out.as_deref(), &csv)?;
    for (c, counts) in split.per_class.iter().enumerate() {
        log::info!(
            "{}: train {} val {} test {}",
            names[c],
            counts[0],
            counts[1],
            counts[2]
        );
    }
    eprintln!(
        "# split: train {} val {} test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

/// Keys stored alongside model and trainer settings so a checkpoint can
/// rebuild its data partitions.
fn data_snapshot(s: &Settings) -> Settings {
    let mut out = Settings::new();
    for (k, v) in s.iter() {
        if k == "seed" || k == "model.geometry" || k.starts_with("data.") {
            out.set(k, v);
        }
    }
    out
}

fn train_cmd(a: TrainArgs, file: Option<&Path>, mut flags: Settings) -> Result<ExitCode> {
    data_flags(&a.data, &mut flags);
    if let Some(v) = a.variant {
        flags.set("model.variant", v.name());
    }
    if a.tiny {
        flags.set("model.geometry", "tiny");
    }
    if let Some(p) = a.profile {
        flags.set("train.profile", format!("{p:?}").to_lowercase());
    }
    if let Some(e) = a.epochs {
        flags.set("train.epochs", e.to_string());
    }
    if let Some(b) = a.batch {
        flags.set("train.batch", b.to_string());
    }
    if let Some(n) = a.stop_after_epoch {
        flags.set("train.stop_after", n.to_string());
    }
    if let Some(o) = &a.out {
        flags.set("train.out", path_str(o));
    }
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;

    let mut base = defaults()?;
    base.set("train.out", "rsfme-run");
    if let Some(c) = &resume {
        base.merge(&Settings::parse(&c.config)?);
    }
    let mut s = layer(base, file, &flags)?;
    let seed: u64 = required(&s, "seed")?;
    s.set("train.seed", seed.to_string());
    init_threads(&s)?;

    let image_size = ModelConfig::from_settings(&s)?.image_size;
    let (samples, names) = load_samples(&s, Some(image_size))?;
    s.set("model.classes", names.len().to_string());
    s.set("data.classes", names.join(","));
    let mcfg = ModelConfig::from_settings(&s)?;
    let tcfg = TrainConfig::from_settings(&s)?;
    let mut shown = mcfg.to_settings();
    shown.merge(&tcfg.to_settings());
    shown.merge(&s);
    announce("train", &shown);

    let (model, store) = match &resume {
        Some(c) => {
            let (m, st) = restore(c)?;
            if m.cfg != mcfg {
                return Err(Error::Config(
                    "model settings differ from the checkpoint being resumed".into(),
                ));
            }
            (m, st)
        }
        None => Model::build(&mcfg, seed)?,
    };
    let split = holdout_split(
        &samples,
        required(&s, "data.test_fraction")?,
        required(&s, "data.val_fraction")?,
        seed,
    )?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&split.train), pick(&split.validation));
    let out_dir = PathBuf::from(required::<String>(&s, "train.out")?);
    let opts = TrainOptions {
        out_dir: Some(out_dir.clone()),
        stop_after: s.parsed("train.stop_after")?,
        extra_config: data_snapshot(&s),
    };
    let outcome = train(
        &model,
        store,
        &train_set,
        &val_set,
        &tcfg,
        resume.as_ref(),
        &opts,
    )?;
    println!("{}", rsfme_core::training::LogRow::HEADER);
    for row in &outcome.log {
        println!("{}", row.to_csv());
    }
    eprintln!(
        "# train: {} of {} epochs done, best accuracy {}, checkpoints in {}",
        outcome.progress.epoch,
        tcfg.epochs,
        outcome
            .progress
            .best_metric
            .map_or("-".into(), |m| format!("{m:.4}")),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Model, parameters and the requested partition of the data a checkpoint
/// was trained on (or of `data.root` when overridden).
struct Loaded {
    model: Model,
    store: ParamStore,
    samples: Vec<LabeledSample>,
    names: Vec<String>,
    batch: usize,
}

fn checkpoint_partition(
    command: &str,
    ckpt: &Path,
    data: Option<&Path>,
    partition: Option<Partition>,
    file: Option<&Path>,
    mut flags: Settings,
) -> Result<Loaded> {
    let ckpt = load_checkpoint(ckpt)?;
    let (model, store) = restore(&ckpt)?;
    if let Some(d) = data {
        flags.set("data.root", path_str(d));
    }
    if let Some(p) = partition {
        flags.set("eval.partition", format!("{p:?}").to_lowercase());
    }
    let mut base = defaults()?;
    base.set("eval.partition", "test");
    base.merge(&Settings::parse(&ckpt.config)?);
    let s = layer(base, file, &flags)?;
    init_threads(&s)?;
    announce(command, &s);
    let (all, names) = load_samples(&s, Some(model.cfg.image_size))?;
    if names.len() != model.cfg.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but the checkpoint was trained on {}",
            names.len(),
            model.cfg.classes
        )));
    }
    let which = enum_setting(&s, "eval.partition", Partition::Test)?;
    let ids = partition_indices(&all, &s, which)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("partition {which:?} is empty")));
    }
    let samples = ids.iter().map(|&i| all[i].clone()).collect();
    Ok(Loaded {
        model,
        store,
        samples,
        names,
        batch: s.parsed("train.batch")?.unwrap_or(16),
    })
}

fn eval(a: EvalArgs, file: Option<&Path>, flags: Settings) -> Result<ExitCode> {
    if let Some(m) = &a.matrix {
        let mut s = layer(defaults()?, file, &flags)?;
        s.set("eval.matrix", path_str(m));
        init_threads(&s)?;
        announce("eval", &s);
        let text = std::fs::read_to_string(m).map_err(|e| io_err(m, e))?;
        let cm = ConfusionMatrix::parse(&text)?;
        let r = report(&cm, None)?;
        let csv = metrics_csv(&r);
        print!("{csv}");
        if let Some(dir) = &a.out {
            write_file(&dir.join("metrics.csv"), &csv)?;
            write_file(&dir.join("confusion.txt"), &cm.to_text())?;
        }
        return Ok(ExitCode::SUCCESS);
    }
    let ckpt = a
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("eval needs --matrix or --checkpoint".into()))?;
    let l = checkpoint_partition("eval", ckpt, a.data.as_deref(), a.partition, file, flags)?;
    let inf = infer_samples(&l.model, &l.store, &l.samples, l.batch)?;
    let labels: Vec<usize> = l.samples.iter().map(|x| x.label).collect();
    let cm = confusion(&inf.predictions, &labels, l.names.clone())?;
    let curves = pr_curves(&inf.probs, &labels)?;
    let aucs: Vec<Option<f64>> = curves.iter().map(|c| c.auc).collect();
    let r = report(&cm, Some(&aucs))?;
    let csv = metrics_csv(&r);
    print!("{csv}");
    if let Some(dir) = &a.out {
        write_file(&dir.join("metrics.csv"), &csv)?;
        write_file(&dir.join("pr.csv"), &pr_csv(&l.names, &curves))?;
        write_file(&dir.join("confusion.txt"), &cm.to_text())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs, file: Option<&Path>, flags: Settings) -> Result<ExitCode> {
    let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let (model, store) = restore(&ckpt)?;
    let mut s = layer(Settings::parse(&ckpt.config)?, file, &flags)?;
    s.set("predict.checkpoint", path_str(&a.checkpoint));
    init_threads(&s)?;
    announce("predict", &s);
    let names: Vec<String> = match s.get("data.classes") {
        Some(v) if v.split(',').count() == model.cfg.classes => {
            v.split(',').map(str::to_string).collect()
        }
        _ => default_names(model.cfg.classes),
    };
    let size = model.cfg.image_size as u32;
    let images = a
        .images
        .par_iter()
        .map(|p| Ok(resize(&LabeledSample::new(load_image(p)?, 0, ""), size, size)?.image))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("image,predicted,{}\n", names.join(","));
    for (paths, chunk) in a.images.chunks(16).zip(images.chunks(16)) {
        let probs = model.predict_proba(&store, &to_tensor(chunk)?)?;
        for (r, p) in paths.iter().enumerate() {
            let row: Vec<f64> = (0..names.len()).map(|c| probs.at(&[r, c])).collect();
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(csv, "{},{},{}", p.display(), names[best], cells.join(","));
        }
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs, file: Option<&Path>, mut flags: Settings) -> Result<ExitCode> {
    if let Some(f) = a.fraction {
        flags.set("gradcheck.fraction", f.to_string());
    }
    let mut base = defaults()?;
    base.set("gradcheck.fraction", "0.01");
    let s = layer(base, file, &flags)?;
    if !a.tiny {
        return Err(Error::Config(
            "gradcheck runs on the small check geometries only; pass --tiny".into(),
        ));
    }
    let fraction: f64 = required(&s, "gradcheck.fraction")?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "gradcheck.fraction must lie in (0, 1], got {fraction}"
        )));
    }
    init_threads(&s)?;
    announce("gradcheck", &s);
    let seed: u64 = required(&s, "seed")?;
    let mut results = op_suite(seed)?;
    results.extend(block_suite(seed, fraction)?);
    println!("check,max_rel_error,tolerance,elements,result");
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{},{:.3e},{:.0e},{},{}",
            r.name,
            r.report.max_rel_error,
            r.report.tolerance,
            r.report.checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    eprintln!(
        "# gradcheck: {} of {} checks passed",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERICAL)
    })
}

fn features(a: FeaturesArgs, file: Option<&Path>, flags: Settings) -> Result<ExitCode> {
    let l = checkpoint_partition(
        "features",
        &a.checkpoint,
        a.data.as_deref(),
        a.partition,
        file,
        flags,
    )?;
    let inf = infer_samples(&l.model, &l.store, &l.samples, l.batch)?;
    let projection = feature_projection(&inf.features)?;
    let ids: Vec<String> = l.samples.iter().map(sample_id).collect();
    let labels: Vec<usize> = l.samples.iter().map(|x| x.label).collect();
    emit(a.out.as_deref(), &features_csv(&ids, &labels, &projection))?;
    eprintln!(
        "# features: {} samples, component variances {:.6} and {:.6}",
        ids.len(),
        projection.variances[0],
        projection.variances[1]
    );
    Ok(ExitCode::SUCCESS)
}
