//! Line-based `key = value` configuration and the model geometry it resolves to.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs from a config file or the command line. Later
/// entries for the same key win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    entries: Vec<(String, String)>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    i + 1
                ))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.entries {
            self.set(k, v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{key}: cannot parse {v:?} as a comma-separated list"
                ))
            })
        })
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SwinT,
    SwinTSpatial,
    SwinTResidual,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SwinT,
        Variant::SwinTSpatial,
        Variant::SwinTResidual,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SwinT => "swint",
            Variant::SwinTSpatial => "swint+s",
            Variant::SwinTResidual => "swint+r",
            Variant::Full => "rs-fme-swint",
        }
    }

    pub fn has_residual(self) -> bool {
        matches!(self, Variant::SwinTResidual | Variant::Full)
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, Variant::SwinTSpatial | Variant::Full)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected swint, swint+s, swint+r or rs-fme-swint)"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Tiny,
    Full,
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Geometry::Tiny),
            "full" => Ok(Geometry::Full),
            _ => Err(Error::Config(format!(
                "unknown geometry {s:?} (expected tiny or full)"
            ))),
        }
    }
}

/// Everything needed to build a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub residual_channels: Vec<usize>,
    pub spatial_channels: Vec<usize>,
    pub fusion_grid: usize,
    pub classes: usize,
    pub dropout: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// 224×224 input, 16-pixel patches, D = 768.
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            image_size: 224,
            channels: 3,
            patch: 16,
            dim: 768,
            depth: 4,
            heads: 4,
            window: 7,
            shift: 3,
            residual_channels: vec![64, 96, 160, 256],
            spatial_channels: vec![32, 64, 96, 128, 160],
            fusion_grid: 14,
            classes: 5,
            dropout: 0.5,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// 32×32 input on a 4×4 token grid with narrow branches.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 32,
            depth: 2,
            heads: 2,
            window: 2,
            shift: 1,
            residual_channels: vec![8, 12, 20, 32],
            spatial_channels: vec![4, 8, 12, 16, 20],
            fusion_grid: 4,
            ..Self::full()
        }
    }

    pub fn for_geometry(g: Geometry) -> Self {
        match g {
            Geometry::Tiny => Self::tiny(),
            Geometry::Full => Self::full(),
        }
    }

    /// Applies `model.*`, `swint.*`, `residual.*`, `spatial.*` and `branches.*`
    /// keys on top of the profile named by `model.geometry` (default full).
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let geometry = s
            .parsed::<Geometry>("model.geometry")?
            .unwrap_or(Geometry::Full);
        let mut c = Self::for_geometry(geometry);
        for (k, v) in s.iter() {
            c.apply(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "model.variant" => self.variant = v.parse()?,
            "model.dropout" => self.dropout = num(key, v)?,
            "model.classes" => self.classes = num(key, v)?,
            "model.image_size" => self.image_size = num(key, v)?,
            "swint.depth" => self.depth = num(key, v)?,
            "swint.dim" => self.dim = num(key, v)?,
            "swint.heads" => self.heads = num(key, v)?,
            "swint.window" => self.window = num(key, v)?,
            "swint.shift" => self.shift = num(key, v)?,
            "swint.patch" => self.patch = num(key, v)?,
            "residual.channels" => self.residual_channels = parse_list(key, v)?,
            "spatial.channels" => self.spatial_channels = parse_list(key, v)?,
            "branches.fusion_grid" => self.fusion_grid = num(key, v)?,
            _ => {}
        }
        Ok(())
    }

    pub fn token_grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.depth == 0 {
            return bad("swint.depth must be at least 1".into());
        }
        if self.window == 0 || self.shift >= self.window {
            return bad(format!(
                "need 0 <= shift < window, got shift {} window {}",
                self.shift, self.window
            ));
        }
        if self.classes < 2 {
            return bad(format!(
                "model.classes must be at least 2, got {}",
                self.classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.dropout
            ));
        }
        if self.fusion_grid != self.token_grid() {
            return bad(format!(
                "branches.fusion_grid {} must equal the token grid {}",
                self.fusion_grid,
                self.token_grid()
            ));
        }
        if self.residual_channels.len() != 4 || self.residual_channels.contains(&0) {
            return bad("residual.channels needs four positive entries".into());
        }
        if self.spatial_channels.len() != 5 || self.spatial_channels.contains(&0) {
            return bad("spatial.channels needs five positive entries".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        s.set("model.variant", self.variant.name());
        s.set("model.dropout", self.dropout.to_string());
        s.set("model.classes", self.classes.to_string());
        s.set("model.image_size", self.image_size.to_string());
        s.set("swint.patch", self.patch.to_string());
        s.set("swint.dim", self.dim.to_string());
        s.set("swint.depth", self.depth.to_string());
        s.set("swint.heads", self.heads.to_string());
        s.set("swint.window", self.window.to_string());
        s.set("swint.shift", self.shift.to_string());
        s.set("residual.channels", join(&self.residual_channels));
        s.set("spatial.channels", join(&self.spatial_channels));
        s.set("branches.fusion_grid", self.fusion_grid.to_string());
        s
    }
}
