//! Layered settings: built-in defaults, then the config file, then flags.

use std::path::Path;

use rsfme_core::training::TrainConfig;
use rsfme_core::{Error, ModelConfig, Result, Settings};

pub const SEED_ENV: &str = "RSFME_SEED";

/// Keys owned by the command line rather than the model or trainer.
const CLI_KEYS: &[&str] = &[
    "seed",
    "threads",
    "model.geometry",
    "data.root",
    "data.test_fraction",
    "data.val_fraction",
    "data.synthetic_classes",
    "data.synthetic_per_class",
    "data.classes",
    "augment.rounds",
    "augment.format",
    "augment.shear_axis",
    "augment.out",
    "train.out",
    "train.stop_after",
    "eval.partition",
    "gradcheck.fraction",
];

fn known(key: &str) -> bool {
    CLI_KEYS.contains(&key)
        || ModelConfig::full().to_settings().get(key).is_some()
        || TrainConfig::profile(rsfme_core::training::Profile::Table2)
            .to_settings()
            .get(key)
            .is_some()
}

/// Defaults every command starts from. The seed falls back to `RSFME_SEED`.
pub fn defaults() -> Result<Settings> {
    let mut s = Settings::new();
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {v:?} as a seed")))?,
        Err(_) => 0,
    };
    s.set("seed", seed.to_string());
    s.set("data.test_fraction", "0.2");
    s.set("data.val_fraction", "0.2");
    s.set("data.synthetic_classes", "5");
    s.set("data.synthetic_per_class", "8");
    Ok(s)
}

pub fn load_file(path: &Path) -> Result<Settings> {
    let s = Settings::load(path)?;
    if let Some((k, _)) = s.iter().find(|(k, _)| !known(k)) {
        return Err(Error::Config(format!(
            "{}: unknown key {k:?}",
            path.display()
        )));
    }
    Ok(s)
}

/// `base`, overlaid by the config file (if any) and then by `flags`.
pub fn layer(base: Settings, file: Option<&Path>, flags: &Settings) -> Result<Settings> {
    let mut s = base;
    if let Some(p) = file {
        s.merge(&load_file(p)?);
    }
    s.merge(flags);
    Ok(s)
}

pub fn required<T: std::str::FromStr>(s: &Settings, key: &str) -> Result<T> {
    s.parsed(key)?
        .ok_or_else(|| Error::Config(format!("missing required setting {key}")))
}

/// Prints the resolved settings to stderr.
pub fn announce(command: &str, s: &Settings) {
    eprintln!("# rsfme {command}: resolved configuration");
    for line in s.to_text().lines() {
        eprintln!("#   {line}");
    }
}
