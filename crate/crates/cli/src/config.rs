//! Run configuration: a TOML (or JSON) file merged with `--set key=value`
//! overrides and explicit flags.
//!
//! Precedence, highest first: explicit flags, `--set` overrides, the config
//! file, `ROBUST_ADAPT_SEED` (seed only), built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use robust_adapt::trainer::{Method, SweepGrid, TrainConfig};
use robust_adapt::Error;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ROBUST_ADAPT_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunMethod {
    LinearProbe,
    AdapterErm,
    #[default]
    AdapterContrastive,
    /// Weight-space blend of a trained probe with the zero-shot head.
    Wiseft,
    /// DFR, larger inferred group subsampled.
    DfrSub,
    /// DFR, smaller inferred group upsampled.
    DfrUp,
    /// Nearest training sample lookup.
    Tip,
}

impl RunMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMethod::LinearProbe => "linear-probe",
            RunMethod::AdapterErm => "adapter-erm",
            RunMethod::AdapterContrastive => "adapter-contrastive",
            RunMethod::Wiseft => "wiseft",
            RunMethod::DfrSub => "dfr-sub",
            RunMethod::DfrUp => "dfr-up",
            RunMethod::Tip => "tip",
        }
    }

    /// The trainer method behind this run.
    pub fn trainer_method(self) -> Method {
        match self {
            RunMethod::AdapterErm => Method::AdapterErm,
            RunMethod::AdapterContrastive => Method::AdapterContrastive,
            _ => Method::LinearProbe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle directory.
    pub bundle: Option<PathBuf>,
    pub method: RunMethod,
    /// Output directory for reports and checkpoints.
    pub out: PathBuf,
    /// WiSE-FT mixing weight.
    pub alpha: f32,
    /// Zero-shot head temperature.
    pub zeroshot_temperature: f32,
    /// Print a WG / Avg / Gap table to stdout.
    pub table: bool,
    pub train: TrainConfig,
    pub grid: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            method: RunMethod::default(),
            out: PathBuf::from("runs/latest"),
            alpha: 0.5,
            zeroshot_temperature: 0.01,
            table: false,
            train: TrainConfig::default(),
            grid: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn bundle(&self) -> Result<&Path> {
        self.bundle
            .as_deref()
            .ok_or_else(|| Error::Config("no bundle given (use --bundle or `bundle = ...`)".into()).into())
    }

    /// TOML rendering. Goes through JSON so `f32` fields print in their
    /// shortest form rather than widened to `f64`.
    pub fn to_toml(&self) -> Result<String> {
        let mut json: serde_json::Value = serde_json::from_str(&serde_json::to_string(self)?)?;
        drop_nulls(&mut json);
        let value = toml::Value::try_from(json)?;
        Ok(toml::to_string_pretty(&value)?)
    }
}

fn drop_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(drop_nulls);
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(drop_nulls),
        _ => {}
    }
}

fn parse_file(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value = if is_json {
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::Value::try_from(json).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        text.parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    Ok(value)
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!(Error::Config(format!("bad override key `{key}`")));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

fn has_path(root: &toml::Value, key: &str) -> bool {
    key.split('.')
        .try_fold(root, |node, part| node.get(part))
        .is_some()
}

/// Loads `file` (if any), applies `overrides`, and fills the seed from the
/// environment when neither set it.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root = match file {
        Some(p) => parse_file(p)?,
        None => toml::Value::Table(toml::Table::new()),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        set_path(&mut root, key.trim(), parse_scalar(raw.trim()))?;
    }
    let seed_given = has_path(&root, "train.seed");
    let mut cfg: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if !seed_given {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.train.seed = raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
                .map_err(|e| Error::Config(format!("{e:#}")))?;
        }
    }
    Ok(cfg)
}
