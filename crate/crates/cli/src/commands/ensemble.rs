//! `ensemble`: weight-adjustment ensembles of the first K members for every
//! K, next to the independent ensemble of the unmodified members.

use std::path::{Path, PathBuf};

use modeconnect::ensemble::{build_wa_ensemble, independent_probabilities, save_ensemble, EnsembleConfig};
use modeconnect::netcore::{accuracy, cross_entropy, load_checkpoint, Dataset, WeightVector};
use serde::{Deserialize, Serialize};

use crate::config::{check_positive, default_adjust_cap, default_rcond, ConfigError, DataSource, RunConfig};
use crate::report::Table;

/// Slack allowed in the check that the ensemble loss is at most the mean
/// loss of its adjusted members.
pub const JENSEN_TOLERANCE: f64 = 1e-12;

fn default_split() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleRun {
    pub data: DataSource,
    /// Member checkpoints; the first one supplies the shared backbone.
    pub members: Vec<PathBuf>,
    /// Number of trailing layers each member keeps.
    #[serde(default = "default_split")]
    pub split: usize,
    #[serde(default = "default_adjust_cap")]
    pub adjust_cap: usize,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    pub out: PathBuf,
}

impl RunConfig for EnsembleRun {
    const KEYS: &'static [&'static str] = &["out", "adjust_cap"];

    fn out(&self) -> &Path {
        &self.out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.members.is_empty() {
            return Err(ConfigError::new("members must not be empty"));
        }
        check_positive("split", self.split)?;
        check_positive("adjust_cap", self.adjust_cap)
    }
}

/// One table row: the K-member ensemble evaluated on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub members: usize,
    pub split: &'static str,
    pub wa_accuracy: f64,
    pub wa_loss: f64,
    pub mean_member_loss: f64,
    pub max_member_loss: f64,
    pub jensen_holds: bool,
    pub independent_accuracy: f64,
    pub best_member_accuracy: f64,
}

pub fn evaluate_members(
    models: &[WeightVector],
    cfg: &EnsembleConfig,
    train: &Dataset,
    splits: &[(&'static str, &Dataset)],
) -> anyhow::Result<Vec<EnsembleRow>> {
    let e = build_wa_ensemble(models, cfg, train.features())?;
    let mut rows = Vec::new();
    for &(name, data) in splits {
        let (x, y) = (data.features(), data.labels());
        let member_logits = e.member_logits(x)?;
        let losses = member_logits
            .iter()
            .map(|l| cross_entropy(l, y))
            .collect::<modeconnect::Result<Vec<_>>>()?;
        let mean_member_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let max_member_loss = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logits = e.predict(x)?;
        let wa_loss = cross_entropy(&logits, y)?;
        let best_member_accuracy = models
            .iter()
            .map(|m| accuracy(&modeconnect::netcore::forward(&m.spec(), m, x)?, y))
            .collect::<modeconnect::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        rows.push(EnsembleRow {
            members: models.len(),
            split: name,
            wa_accuracy: accuracy(&logits, y)?,
            wa_loss,
            mean_member_loss,
            max_member_loss,
            jensen_holds: wa_loss <= mean_member_loss + JENSEN_TOLERANCE,
            independent_accuracy: accuracy(&independent_probabilities(models, x)?, y)?,
            best_member_accuracy,
        });
    }
    Ok(rows)
}

pub fn run(cfg: EnsembleRun) -> anyhow::Result<()> {
    let (train, test) = cfg.data.load()?;
    let models = cfg
        .members
        .iter()
        .map(load_checkpoint)
        .collect::<modeconnect::Result<Vec<_>>>()?;
    let ec = EnsembleConfig {
        split: cfg.split,
        backbone: 0,
        rcond: cfg.rcond,
        adjust_cap: cfg.adjust_cap,
    };
    let mut table = Table::new(
        "ensemble",
        &[
            "members",
            "split",
            "wa_accuracy",
            "wa_loss",
            "mean_member_loss",
            "max_member_loss",
            "jensen_holds",
            "independent_accuracy",
            "best_member_accuracy",
        ],
    );
    let mut violated = false;
    for k in 1..=models.len() {
        for r in evaluate_members(&models[..k], &ec, &train, &[("train", &train), ("test", &test)])? {
            table.row(&[
                &r.members,
                &r.split,
                &r.wa_accuracy,
                &r.wa_loss,
                &r.mean_member_loss,
                &r.max_member_loss,
                &r.jensen_holds,
                &r.independent_accuracy,
                &r.best_member_accuracy,
            ]);
            println!(
                "{} members, {}: WA accuracy {:.4}, independent {:.4}, best member {:.4}, loss {:.6} <= {:.6}: {}",
                r.members,
                r.split,
                r.wa_accuracy,
                r.independent_accuracy,
                r.best_member_accuracy,
                r.wa_loss,
                r.mean_member_loss,
                r.jensen_holds
            );
            violated |= !r.jensen_holds;
        }
    }
    table.write(&cfg.out.join("ensemble.csv"))?;
    let full = build_wa_ensemble(&models, &ec, train.features())?;
    save_ensemble(&full, cfg.out.join("ensemble.json"))?;
    if violated {
        eprintln!("warning: an ensemble loss exceeded the mean member loss");
    }
    Ok(())
}
