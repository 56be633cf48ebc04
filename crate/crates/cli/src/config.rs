//! Config loading, flag overrides and dataset sources.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use modeconnect::dataio::{load_idx, SyntheticSpec};
use modeconnect::netcore::Dataset;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

/// Values given by the common flags.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub grid_points: Option<usize>,
    pub breakpoints: Option<usize>,
    pub adjust_cap: Option<usize>,
}

/// A subcommand's config document.
pub trait RunConfig: DeserializeOwned + Serialize {
    /// Config keys the common flags may set. A `seeds` entry means
    /// `--seed S` sets `seeds` to `[S]`.
    const KEYS: &'static [&'static str];

    fn out(&self) -> &Path;

    fn validate(&self) -> Result<(), ConfigError> {
        Ok(())
    }
}

fn override_entries(o: &Overrides) -> Vec<(&'static str, &'static str, Value)> {
    let mut v = Vec::new();
    if let Some(s) = o.seed {
        v.push(("--seed", "seed", Value::from(s)));
    }
    if let Some(p) = &o.out {
        v.push(("--out", "out", Value::from(p.to_string_lossy().into_owned())));
    }
    if let Some(n) = o.grid_points {
        v.push(("--grid-points", "grid_points", Value::from(n)));
    }
    if let Some(n) = o.breakpoints {
        v.push(("--breakpoints", "breakpoints", Value::from(n)));
    }
    if let Some(n) = o.adjust_cap {
        v.push(("--adjust-cap", "adjust_cap", Value::from(n)));
    }
    v
}

/// Applies flag overrides to a parsed config document.
pub fn apply_overrides(
    doc: &mut Map<String, Value>,
    o: &Overrides,
    keys: &[&str],
    command: &str,
) -> Result<(), ConfigError> {
    for (flag, key, value) in override_entries(o) {
        if key == "seed" && keys.contains(&"seeds") {
            doc.insert("seeds".into(), Value::Array(vec![value]));
        } else if keys.contains(&key) {
            doc.insert(key.into(), value);
        } else {
            return Err(ConfigError(format!("{flag} does not apply to {command}")));
        }
    }
    Ok(())
}

/// Reads the config (if any), applies the flags, validates, creates the
/// output directory and writes the resolved config into it.
pub fn load<T: RunConfig>(path: Option<&Path>, o: &Overrides, command: &str) -> anyhow::Result<T> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))? {
                Value::Object(m) => m,
                _ => return Err(ConfigError::new(format!("{} must hold a JSON object", p.display())).into()),
            }
        }
        None => Map::new(),
    };
    apply_overrides(&mut doc, o, T::KEYS, command)?;
    let cfg: T = serde_json::from_value(Value::Object(doc)).map_err(|e| ConfigError(format!("{command}: {e}")))?;
    cfg.validate()?;
    let out = cfg.out();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    Ok(cfg)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Where the train and test splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// A directory with the four MNIST-named IDX files, optionally gzipped.
    Idx {
        dir: PathBuf,
        /// Keep only the first this many training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs generated on the fly.
    Synthetic {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        test_per_class: usize,
        std: f64,
        #[serde(default = "default_radius")]
        center_radius: f64,
        seed: u64,
    },
}

pub fn default_radius() -> f64 {
    4.0
}

fn find_idx(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if plain.is_file() {
        Ok(plain)
    } else if gz.is_file() {
        Ok(gz)
    } else {
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("neither {} nor {} exists", plain.display(), gz.display()),
        ))
        .context("locating IDX data")
    }
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < d.len() => d.head(n),
        _ => d,
    }
}

impl DataSource {
    /// Train and test splits with a common class count.
    pub fn load(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DataSource::Idx {
                dir,
                train_limit,
                test_limit,
            } => {
                let train = load_idx(find_idx(dir, TRAIN_IMAGES)?, find_idx(dir, TRAIN_LABELS)?)?;
                let test = load_idx(find_idx(dir, TEST_IMAGES)?, find_idx(dir, TEST_LABELS)?)?;
                (limit(train, *train_limit), limit(test, *test_limit))
            }
            DataSource::Synthetic { test_per_class, .. } => {
                modeconnect::dataio::gen_synthetic_split(&self.synthetic_spec().expect("synthetic"), *test_per_class)?
            }
        };
        if train.dim() != test.dim() {
            return Err(ConfigError(format!(
                "train features have dimension {}, test features {}",
                train.dim(),
                test.dim()
            ))
            .into());
        }
        let classes = train.classes().max(test.classes());
        let widen = |d: Dataset| Dataset::new(d.features().clone(), d.labels().to_vec(), classes);
        Ok((widen(train)?, widen(test)?))
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DataSource::Synthetic {
                classes,
                dim,
                samples_per_class,
                std,
                center_radius,
                seed,
                ..
            } => Some(SyntheticSpec {
                classes,
                dim,
                samples_per_class,
                std,
                center_radius,
                seed,
            }),
            DataSource::Idx { .. } => None,
        }
    }
}

pub fn default_grid_points() -> usize {
    25
}

pub fn default_breakpoints() -> usize {
    16
}

pub fn default_adjust_cap() -> usize {
    4096
}

pub fn default_rcond() -> f64 {
    modeconnect::ndmath::DEFAULT_RCOND
}

pub fn check_positive(name: &str, value: usize) -> Result<(), ConfigError> {
    if value == 0 {
        Err(ConfigError(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}
