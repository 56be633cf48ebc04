//! `train`: seeded endpoint models with their training curves.

use std::path::{Path, PathBuf};

use modeconnect::ndmath::Rng;
use modeconnect::netcore::{
    accuracy, forward, init_weights, save_checkpoint, train_sgd_from, Dataset, MlpSpec, TrainConfig, TrainOutcome,
};
use serde::{Deserialize, Serialize};

use crate::config::{check_positive, write_json, ConfigError, DataSource, RunConfig};
use crate::report::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizer {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        let d = TrainConfig::default();
        Optimizer {
            lr: d.lr,
            batch: d.batch,
            epochs: d.epochs,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_positive("batch", self.batch)?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ConfigError(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub data: DataSource,
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub out: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig for TrainRun {
    const KEYS: &'static [&'static str] = &["seeds", "out"];

    fn out(&self) -> &Path {
        &self.out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        validate_hidden(&self.hidden)?;
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds must not be empty"));
        }
        self.optimizer.validate()
    }
}

pub fn validate_hidden(hidden: &[usize]) -> Result<(), ConfigError> {
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(ConfigError(format!(
            "hidden must list at least one positive width, got {hidden:?}"
        )));
    }
    Ok(())
}

pub fn architecture(data: &Dataset, hidden: &[usize]) -> modeconnect::Result<MlpSpec> {
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(data.classes());
    MlpSpec::new(sizes)
}

/// SGD from a He initialization; both the start and the batch order
/// derive from `seed`.
pub fn train_model(data: &Dataset, hidden: &[usize], seed: u64, opt: &Optimizer) -> modeconnect::Result<TrainOutcome> {
    let spec = architecture(data, hidden)?;
    let init = init_weights(&spec, &mut Rng::new(seed).fork(0));
    let cfg = TrainConfig {
        lr: opt.lr,
        batch: opt.batch,
        epochs: opt.epochs,
        seed,
    };
    train_sgd_from(init, data, &cfg)
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("model-seed{seed}.json")
}

#[derive(Serialize)]
struct ModelSummary {
    seed: u64,
    checkpoint: String,
    train_accuracy: f64,
    test_accuracy: f64,
}

pub fn run(cfg: TrainRun) -> anyhow::Result<()> {
    let (train, test) = cfg.data.load()?;
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = train_model(&train, &cfg.hidden, seed, &cfg.optimizer)?;
        let w = outcome.weights;
        let name = checkpoint_name(seed);
        save_checkpoint(&w, cfg.out.join(&name))?;
        let mut curve = Table::new("training curve", &["epoch", "loss", "accuracy"]);
        for e in &outcome.curve {
            curve.row(&[&e.epoch, &e.loss, &e.accuracy]);
        }
        curve.write(&cfg.out.join(format!("curve-seed{seed}.csv")))?;
        let spec = w.spec();
        let s = ModelSummary {
            seed,
            checkpoint: name,
            train_accuracy: accuracy(&forward(&spec, &w, train.features())?, train.labels())?,
            test_accuracy: accuracy(&forward(&spec, &w, test.features())?, test.labels())?,
        };
        println!(
            "seed {seed}: train accuracy {:.4}, test accuracy {:.4}",
            s.train_accuracy, s.test_accuracy
        );
        summary.push(s);
    }
    write_json(&cfg.out.join("train-summary.json"), &summary)
}
