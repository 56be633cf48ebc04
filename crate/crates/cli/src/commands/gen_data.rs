//! `gen-data`: a synthetic blob dataset written as IDX files.

use std::path::{Path, PathBuf};

use modeconnect::dataio::{gen_synthetic_split, write_idx, IdxArray, IdxData, SyntheticSpec};
use modeconnect::netcore::Dataset;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataRun {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub std: f64,
    #[serde(default = "crate::config::default_radius")]
    pub center_radius: f64,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}

impl GenDataRun {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            std: self.std,
            center_radius: self.center_radius,
            seed: self.seed,
        }
    }
}

impl RunConfig for GenDataRun {
    const KEYS: &'static [&'static str] = &["seed", "out"];

    fn out(&self) -> &Path {
        &self.out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.classes > 256 {
            return Err(ConfigError(format!(
                "IDX labels are bytes, so at most 256 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

fn write_split(d: &Dataset, images: &Path, labels: &Path) -> modeconnect::Result<()> {
    let x = d.features();
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for j in 0..x.cols() {
        for i in 0..x.rows() {
            data.push(x.get(i, j));
        }
    }
    write_idx(
        &IdxArray {
            dims: vec![d.len(), d.dim()],
            data: IdxData::F64(data),
        },
        images,
    )?;
    write_idx(
        &IdxArray {
            dims: vec![d.len()],
            data: IdxData::U8(d.labels().iter().map(|&l| l as u8).collect()),
        },
        labels,
    )
}

pub fn run(cfg: GenDataRun) -> anyhow::Result<()> {
    let (train, test) = gen_synthetic_split(&cfg.spec(), cfg.test_per_class)?;
    write_split(&train, &cfg.out.join(TRAIN_IMAGES), &cfg.out.join(TRAIN_LABELS))?;
    write_split(&test, &cfg.out.join(TEST_IMAGES), &cfg.out.join(TEST_LABELS))?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        cfg.out.display()
    );
    Ok(())
}
