//! `sweep`: endpoint pairs trained across widths or depths, every method
//! evaluated on each pair, worst test accuracy aggregated over repetitions.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use modeconnect::connect_wa::WaConfig;
use modeconnect::methods::{connect, ConnectInputs, Method};
use modeconnect::netcore::{save_checkpoint, Dataset};
use modeconnect::paths::{evaluate, PathSummary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_model, Optimizer};
use crate::config::{
    check_positive, default_adjust_cap, default_breakpoints, default_grid_points, default_rcond, ConfigError,
    DataSource, RunConfig,
};
use crate::report::{mean_std, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Values are widths of a single hidden layer.
    Width,
    /// Values are numbers of hidden layers of `width` units.
    Depth,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Width => "width",
            Axis::Depth => "depth",
        }
    }
}

fn default_width() -> usize {
    128
}

fn default_repetitions() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub data: DataSource,
    pub axis: Axis,
    pub values: Vec<usize>,
    pub methods: Vec<Method>,
    /// Hidden width used along the depth axis.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Endpoint pairs per value; pair `r` uses seeds `seed + 2r` and `seed + 2r + 1`.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_breakpoints")]
    pub breakpoints: usize,
    #[serde(default = "default_adjust_cap")]
    pub adjust_cap: usize,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    /// Also write the trained endpoint checkpoints.
    #[serde(default)]
    pub save_models: bool,
    pub out: PathBuf,
}

impl RunConfig for SweepRun {
    const KEYS: &'static [&'static str] = &["seed", "out", "grid_points", "breakpoints", "adjust_cap"];

    fn out(&self) -> &Path {
        &self.out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.values.is_empty() || self.methods.is_empty() {
            return Err(ConfigError::new("values and methods must not be empty"));
        }
        for &v in &self.values {
            check_positive(&format!("{} value", self.axis.name()), v)?;
        }
        check_positive("width", self.width)?;
        check_positive("repetitions", self.repetitions)?;
        if self.grid_points < 2 {
            return Err(ConfigError(format!(
                "grid_points must be >= 2, got {}",
                self.grid_points
            )));
        }
        self.optimizer.validate()?;
        self.wa_config().validate().map_err(|e| ConfigError(e.to_string()))?;
        let deep = self.axis == Axis::Depth && self.values.iter().any(|&v| v > 1);
        for &m in &self.methods {
            if m.flow_origin().is_some() {
                return Err(ConfigError(format!(
                    "method {m} needs a trained model set; run it with connect"
                )));
            }
            if m == Method::Ot && deep {
                return Err(ConfigError::new(
                    "method ot connects one-hidden networks only; use ot-wa or ot-bfly",
                ));
            }
        }
        Ok(())
    }
}

impl SweepRun {
    fn wa_config(&self) -> WaConfig {
        WaConfig {
            breakpoints: self.breakpoints,
            rcond: self.rcond,
            adjust_cap: self.adjust_cap,
        }
    }

    fn hidden(&self, value: usize) -> Vec<usize> {
        match self.axis {
            Axis::Width => vec![value],
            Axis::Depth => vec![self.width; value],
        }
    }
}

struct Cell {
    value: usize,
    repetition: usize,
    seeds: [u64; 2],
    summaries: Vec<PathSummary>,
}

fn run_cell(cfg: &SweepRun, train: &Dataset, test: &Dataset, value: usize, repetition: usize) -> anyhow::Result<Cell> {
    let base = cfg.seed.wrapping_add(2 * repetition as u64);
    let seeds = [base, base.wrapping_add(1)];
    let hidden = cfg.hidden(value);
    let a = train_model(train, &hidden, seeds[0], &cfg.optimizer)?.weights;
    let b = train_model(train, &hidden, seeds[1], &cfg.optimizer)?.weights;
    if cfg.save_models {
        for (w, s) in [(&a, seeds[0]), (&b, seeds[1])] {
            save_checkpoint(
                w,
                cfg.out.join(format!("model-{}{value}-seed{s}.json", cfg.axis.name())),
            )?;
        }
    }
    let inputs = ConnectInputs {
        adjust_features: Some(Arc::new(train.features().clone())),
        wa: cfg.wa_config(),
        flow: None,
    };
    let spec = a.spec();
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let path = connect(m, &a, &b, &inputs)?;
            Ok(evaluate(&path, &spec, test, cfg.grid_points)?.summary)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Cell {
        value,
        repetition,
        seeds,
        summaries,
    })
}

pub fn run(cfg: SweepRun) -> anyhow::Result<()> {
    let (train, test) = cfg.data.load()?;
    let jobs: Vec<(usize, usize)> = cfg
        .values
        .iter()
        .flat_map(|&v| (0..cfg.repetitions).map(move |r| (v, r)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(v, r)| run_cell(&cfg, &train, &test, v, r))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let axis = cfg.axis.name();
    let mut detail = Table::new(
        "sweep cells",
        &[
            "axis",
            "value",
            "method",
            "repetition",
            "seed_a",
            "seed_b",
            "worst_accuracy",
            "worst_loss",
            "argworst_global_t",
            "endpoint_a_accuracy",
            "endpoint_b_accuracy",
        ],
    );
    for c in &cells {
        for s in &c.summaries {
            detail.row(&[
                &axis,
                &c.value,
                &s.method,
                &c.repetition,
                &c.seeds[0],
                &c.seeds[1],
                &s.worst_accuracy,
                &s.worst_loss,
                &s.argworst_global_t,
                &s.endpoints_accuracy[0],
                &s.endpoints_accuracy[1],
            ]);
        }
    }
    detail.write(&cfg.out.join("sweep-cells.csv"))?;

    let mut table = Table::new(
        "sweep",
        &[
            "axis",
            "value",
            "method",
            "repetitions",
            "worst_accuracy_mean",
            "worst_accuracy_std",
            "endpoint_accuracy_mean",
            "endpoint_accuracy_std",
        ],
    );
    for &v in &cfg.values {
        let group: Vec<&Cell> = cells.iter().filter(|c| c.value == v).collect();
        let endpoints: Vec<f64> = group.iter().flat_map(|c| c.summaries[0].endpoints_accuracy).collect();
        let (em, es) = mean_std(&endpoints);
        for (i, m) in cfg.methods.iter().enumerate() {
            let worst: Vec<f64> = group.iter().map(|c| c.summaries[i].worst_accuracy).collect();
            let (wm, ws) = mean_std(&worst);
            table.row(&[&axis, &v, m, &group.len(), &wm, &ws, &em, &es]);
            println!("{axis} {v} {m}: worst test accuracy {wm:.4} ± {ws:.4} (endpoints {em:.4} ± {es:.4})");
        }
    }
    table.write(&cfg.out.join("sweep.csv"))
}
