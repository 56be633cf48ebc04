//! `connect`: build a path between two checkpoints and evaluate it on the
//! train and test splits.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use modeconnect::connect_learnable::load_flow;
use modeconnect::connect_learnable::{
    save_flow, train_bijection, train_flow_nll, BijectionConfig, CouplingFlow, FlowConfig, FlowFit, FlowOrigin,
    FlowTrainConfig, ModelSet,
};
use modeconnect::connect_wa::WaConfig;
use modeconnect::methods::{connect, ConnectInputs, Method};
use modeconnect::netcore::{load_checkpoint, particle_dim, Dataset, WeightVector};
use modeconnect::paths::{evaluate, ConnectionPath, PathReport};
use serde::{Deserialize, Serialize};

use crate::config::{
    check_positive, default_adjust_cap, default_breakpoints, default_grid_points, default_rcond, ConfigError,
    DataSource, RunConfig,
};
use crate::report::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NllSettings {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub whiten: bool,
}

impl Default for NllSettings {
    fn default() -> Self {
        let d = FlowTrainConfig::default();
        NllSettings {
            lr: d.lr,
            steps: d.steps,
            batch: d.batch,
            whiten: d.whiten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BijectionSettings {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub midpoint_only: bool,
}

impl Default for BijectionSettings {
    fn default() -> Self {
        let d = BijectionConfig::default();
        BijectionSettings {
            lr: d.lr,
            steps: d.steps,
            batch: d.batch,
            midpoint_only: d.midpoint_only,
        }
    }
}

/// Where the flow of an `rnvp-*` method comes from: a saved flow, or one
/// trained here on the particles of a model set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model_set: Vec<PathBuf>,
    pub layers: usize,
    pub hidden: usize,
    pub scale_bound: f64,
    pub nll: NllSettings,
    pub bijection: BijectionSettings,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let d = FlowConfig::default();
        FlowSettings {
            checkpoint: None,
            model_set: Vec::new(),
            layers: d.layers,
            hidden: d.hidden,
            scale_bound: d.scale_bound,
            nll: NllSettings::default(),
            bijection: BijectionSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectRun {
    pub data: DataSource,
    pub method: Method,
    pub endpoints: [PathBuf; 2],
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_breakpoints")]
    pub breakpoints: usize,
    #[serde(default = "default_adjust_cap")]
    pub adjust_cap: usize,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    /// Seeds flow initialization and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSettings>,
    pub out: PathBuf,
}

impl RunConfig for ConnectRun {
    const KEYS: &'static [&'static str] = &["seed", "out", "grid_points", "breakpoints", "adjust_cap"];

    fn out(&self) -> &Path {
        &self.out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_points < 2 {
            return Err(ConfigError(format!(
                "grid_points must be >= 2, got {}",
                self.grid_points
            )));
        }
        self.wa_config().validate().map_err(|e| ConfigError(e.to_string()))?;
        match (self.method.flow_origin(), &self.flow) {
            (None, Some(_)) => Err(ConfigError(format!(
                "flow settings do not apply to method {}",
                self.method
            ))),
            (Some(_), None) => Err(ConfigError(format!(
                "method {} needs flow settings with a checkpoint or a model set",
                self.method
            ))),
            (Some(origin), Some(f)) => {
                let needed = if origin == FlowOrigin::Bijection { 2 } else { 1 };
                if f.checkpoint.is_none() && f.model_set.len() < needed {
                    return Err(ConfigError(format!(
                        "method {} trains its flow on a model set of at least {needed} checkpoints",
                        self.method
                    )));
                }
                check_positive("flow layers", f.layers)?;
                check_positive("flow hidden", f.hidden)?;
                check_positive("flow nll batch", f.nll.batch)?;
                check_positive("flow bijection batch", f.bijection.batch)
            }
            (None, None) => Ok(()),
        }
    }
}

impl ConnectRun {
    pub fn wa_config(&self) -> WaConfig {
        WaConfig {
            breakpoints: self.breakpoints,
            rcond: self.rcond,
            adjust_cap: self.adjust_cap,
        }
    }
}

fn flow_curve(fit: &FlowFit, out: &Path) -> anyhow::Result<()> {
    let mut t = Table::new("flow training curve", &["step", "loss"]);
    for (i, l) in fit.curve.iter().enumerate() {
        t.row(&[&(i + 1), l]);
    }
    t.write(&out.join("flow-curve.csv"))
}

/// Loads or trains the flow for an `rnvp-*` method on hidden layer 1.
fn obtain_flow(cfg: &ConnectRun, settings: &FlowSettings, train: &Dataset) -> anyhow::Result<CouplingFlow> {
    if let Some(path) = &settings.checkpoint {
        return Ok(load_flow(path)?);
    }
    let members = settings
        .model_set
        .iter()
        .map(load_checkpoint)
        .collect::<modeconnect::Result<Vec<_>>>()?;
    let seeds = (0..members.len() as u64).collect();
    let set = ModelSet::new(members, seeds)?;
    let particles = set.particles(1)?;
    let dim = particle_dim(&set.members()[0], 1)?;
    let mut flow = CouplingFlow::new(
        dim,
        &FlowConfig {
            layers: settings.layers,
            hidden: settings.hidden,
            scale_bound: settings.scale_bound,
            seed: cfg.seed,
        },
    )?;
    let fit = match cfg.method {
        Method::RnvpFlow => {
            let n = settings.nll;
            let tc = FlowTrainConfig {
                lr: n.lr,
                steps: n.steps,
                batch: n.batch,
                seed: cfg.seed.wrapping_add(1),
                whiten: n.whiten,
            };
            train_flow_nll(&flow, &particles, &tc)?
        }
        _ => {
            flow.fit_whitening(&particles)?;
            let b = settings.bijection;
            let bc = BijectionConfig {
                lr: b.lr,
                steps: b.steps,
                batch: b.batch,
                seed: cfg.seed.wrapping_add(2),
                midpoint_only: b.midpoint_only,
            };
            train_bijection(&flow, &set, 1, train, &bc)?
        }
    };
    println!(
        "{}: flow loss {:.6} -> {:.6} over {} steps",
        cfg.method,
        fit.initial_loss,
        fit.final_loss,
        fit.curve.len()
    );
    flow_curve(&fit, &cfg.out)?;
    save_flow(&fit.flow, cfg.out.join("flow.json"))?;
    Ok(fit.flow)
}

/// Builds the configured path between the two loaded endpoints.
pub fn build_path(
    cfg: &ConnectRun,
    a: &WeightVector,
    b: &WeightVector,
    train: &Dataset,
) -> anyhow::Result<ConnectionPath> {
    let mut inputs = ConnectInputs {
        wa: cfg.wa_config(),
        ..ConnectInputs::default()
    };
    if matches!(cfg.method, Method::Scaffold(_)) {
        inputs.adjust_features = Some(Arc::new(train.features().clone()));
    }
    if let Some(settings) = &cfg.flow {
        inputs.flow = Some(Arc::new(obtain_flow(cfg, settings, train)?));
    }
    let path = connect(cfg.method, a, b, &inputs)?;
    path.validate(a, b)?;
    Ok(path)
}

pub fn run(cfg: ConnectRun) -> anyhow::Result<()> {
    let (train, test) = cfg.data.load()?;
    let a = load_checkpoint(&cfg.endpoints[0])?;
    let b = load_checkpoint(&cfg.endpoints[1])?;
    a.same_architecture(&b)?;
    let spec = a.spec();
    if spec.input_dim() != train.dim() || spec.output_dim() < train.classes() {
        return Err(ConfigError(format!(
            "checkpoints take {} features and predict {} classes; the data has {} features and {} classes",
            spec.input_dim(),
            spec.output_dim(),
            train.dim(),
            train.classes()
        ))
        .into());
    }
    let path = build_path(&cfg, &a, &b, &train)?;
    for (split, data) in [("train", &train), ("test", &test)] {
        let report: PathReport = evaluate(&path, &spec, data, cfg.grid_points)?;
        report.write_csv(cfg.out.join(format!("path-{split}.csv")))?;
        report.write_summary(cfg.out.join(format!("summary-{split}.json")))?;
        let s = &report.summary;
        println!(
            "{} {split}: worst accuracy {:.4} at global t {:.3}, endpoints {:.4} / {:.4}, {} legs",
            s.method,
            s.worst_accuracy,
            s.argworst_global_t,
            s.endpoints_accuracy[0],
            s.endpoints_accuracy[1],
            path.leg_count()
        );
    }
    Ok(())
}
