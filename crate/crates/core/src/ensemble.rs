//! WA(n) ensembles: every member's layer `L − n + 1` is re-expressed on the
//! features of one shared backbone, so the backbone runs once per batch and
//! only the last `n` layers are evaluated per member. Member logits are
//! averaged.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connect_wa::{adjust_layer, cap_columns};
use crate::error::{Error, Result};
use crate::ndmath::{softmax_columns, Matrix, DEFAULT_RCOND};
use crate::netcore::{affine, forward_trace, read_json, relu, write_json, WeightVector};

pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// `n` in WA(n): the number of trailing layers computed per member.
    pub split: usize,
    /// Index of the member that provides the backbone.
    pub backbone: usize,
    pub rcond: f64,
    pub adjust_cap: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            split: 1,
            backbone: 0,
            rcond: DEFAULT_RCOND,
            adjust_cap: 4096,
        }
    }
}

#[derive(Debug)]
pub struct WaEnsemble {
    split: usize,
    backbone_index: usize,
    /// Backbone layers `1 … L − n`.
    backbone: Vec<Matrix>,
    /// Per member: adjusted layer `L − n + 1`.
    adjusted: Vec<Matrix>,
    /// Per member: layers `L − n + 2 … L`.
    heads: Vec<Vec<Matrix>>,
    backbone_evals: AtomicUsize,
}

impl Clone for WaEnsemble {
    fn clone(&self) -> Self {
        WaEnsemble {
            split: self.split,
            backbone_index: self.backbone_index,
            backbone: self.backbone.clone(),
            adjusted: self.adjusted.clone(),
            heads: self.heads.clone(),
            backbone_evals: AtomicUsize::new(0),
        }
    }
}

/// Applies dense ReLU layers; the final layer stays linear when `last`.
fn run_layers(layers: &[Matrix], mut h: Matrix, last: bool) -> Result<Matrix> {
    for (i, w) in layers.iter().enumerate() {
        let z = affine(w, &h)?;
        h = if last && i + 1 == layers.len() { z } else { relu(&z) };
    }
    Ok(h)
}

pub fn build_wa_ensemble(models: &[WeightVector], cfg: &EnsembleConfig, x: &Matrix) -> Result<WaEnsemble> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("an ensemble needs at least one model"))?;
    for m in &models[1..] {
        first.same_architecture(m)?;
    }
    let depth = first.depth();
    if cfg.split == 0 || cfg.split > depth {
        return Err(Error::invalid(format!("split {} out of range 1..={depth}", cfg.split)));
    }
    if cfg.backbone >= models.len() {
        return Err(Error::invalid(format!(
            "backbone index {} for {} models",
            cfg.backbone,
            models.len()
        )));
    }
    if cfg.adjust_cap == 0 {
        return Err(Error::invalid("adjust_cap must be positive"));
    }
    let a = depth - cfg.split + 1;
    let x = cap_columns(x, cfg.adjust_cap);
    let feats = |w: &WeightVector| -> Result<Matrix> {
        let trace = forward_trace(w, &x)?;
        Ok(trace.layer_input(&x, a - 1).clone())
    };
    let shared = feats(&models[cfg.backbone])?;
    let adjusted = models
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            if k == cfg.backbone {
                // F_k = F_1: keep the layer as is rather than round-tripping
                // it through the pseudo-inverse
                Ok(m.layers()[a - 1].clone())
            } else {
                adjust_layer(&m.layers()[a - 1], &feats(m)?, &shared, cfg.rcond)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WaEnsemble {
        split: cfg.split,
        backbone_index: cfg.backbone,
        backbone: models[cfg.backbone].layers()[..a - 1].to_vec(),
        adjusted,
        heads: models.iter().map(|m| m.layers()[a..].to_vec()).collect(),
        backbone_evals: AtomicUsize::new(0),
    })
}

impl WaEnsemble {
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn backbone_index(&self) -> usize {
        self.backbone_index
    }

    pub fn members(&self) -> usize {
        self.adjusted.len()
    }

    pub fn adjusted(&self) -> &[Matrix] {
        &self.adjusted
    }

    /// Layers computed per member (the adjusted layer plus the head).
    pub fn member_layers(&self) -> usize {
        self.split
    }

    /// How many times the backbone has been run.
    pub fn backbone_evaluations(&self) -> usize {
        self.backbone_evals.load(Ordering::Relaxed)
    }

    fn input_dim(&self) -> usize {
        self.backbone.first().unwrap_or(&self.adjusted[0]).cols() - 1
    }

    fn backbone_features(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            return Err(Error::shape(
                "ensemble input",
                format!("{} features, ensemble expects {}", x.rows(), self.input_dim()),
            ));
        }
        self.backbone_evals.fetch_add(1, Ordering::Relaxed);
        run_layers(&self.backbone, x.clone(), false)
    }

    fn member_from_features(&self, k: usize, f: &Matrix) -> Result<Matrix> {
        let z = affine(&self.adjusted[k], f)?;
        if self.heads[k].is_empty() {
            Ok(z)
        } else {
            run_layers(&self.heads[k], relu(&z), true)
        }
    }

    /// Logits of every adjusted member, sharing one backbone pass.
    pub fn member_logits(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let f = self.backbone_features(x)?;
        (0..self.members())
            .into_par_iter()
            .map(|k| self.member_from_features(k, &f))
            .collect()
    }

    /// Mean of the adjusted members' logits.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let logits = self.member_logits(x)?;
        let mut sum = logits[0].clone();
        for l in &logits[1..] {
            sum.axpy(1.0, l)?;
        }
        Ok(sum.scale(1.0 / logits.len() as f64))
    }

    /// For WA(1), the single network whose last layer is the mean of the
    /// adjusted last layers; it computes the same logits as [`predict`].
    ///
    /// [`predict`]: WaEnsemble::predict
    pub fn averaged_network(&self) -> Result<WeightVector> {
        if self.split != 1 {
            return Err(Error::invalid(format!(
                "weight averaging needs split 1, this ensemble has split {}",
                self.split
            )));
        }
        let mut avg = self.adjusted[0].clone();
        for m in &self.adjusted[1..] {
            avg.axpy(1.0, m)?;
        }
        let mut layers = self.backbone.clone();
        layers.push(avg.scale(1.0 / self.members() as f64));
        WeightVector::new(layers)
    }
}

pub fn ensemble_predict(e: &WaEnsemble, x: &Matrix) -> Result<Matrix> {
    e.predict(x)
}

/// Mean of the members' softmax probabilities, for the baseline ensemble
/// of unmodified models.
pub fn independent_probabilities(models: &[WeightVector], x: &Matrix) -> Result<Matrix> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("an ensemble needs at least one model"))?;
    for m in &models[1..] {
        first.same_architecture(m)?;
    }
    let probs = models
        .par_iter()
        .map(|m| Ok(softmax_columns(&forward_trace(m, x)?.logits)))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = probs[0].clone();
    for p in &probs[1..] {
        sum.axpy(1.0, p)?;
    }
    Ok(sum.scale(1.0 / probs.len() as f64))
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format_version: u32,
    split: usize,
    backbone_index: usize,
    backbone: Vec<Matrix>,
    adjusted: Vec<Matrix>,
    heads: Vec<Vec<Matrix>>,
}

pub fn save_ensemble(e: &WaEnsemble, path: impl AsRef<Path>) -> Result<()> {
    write_json(
        &EnsembleFile {
            format_version: ENSEMBLE_VERSION,
            split: e.split,
            backbone_index: e.backbone_index,
            backbone: e.backbone.clone(),
            adjusted: e.adjusted.clone(),
            heads: e.heads.clone(),
        },
        path.as_ref(),
    )
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<WaEnsemble> {
    let f: EnsembleFile = read_json(path.as_ref())?;
    if f.format_version != ENSEMBLE_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported ensemble version {}", f.format_version),
        });
    }
    if f.adjusted.is_empty() || f.heads.len() != f.adjusted.len() || f.split == 0 {
        return Err(Error::shape(
            "ensemble checkpoint",
            "member lists disagree or are empty",
        ));
    }
    for (adj, head) in f.adjusted.iter().zip(&f.heads) {
        if head.len() + 1 != f.split {
            return Err(Error::shape(
                "ensemble checkpoint",
                format!("head of {} layers for split {}", head.len(), f.split),
            ));
        }
        let mut layers = f.backbone.clone();
        layers.push(adj.clone());
        layers.extend(head.iter().cloned());
        WeightVector::new(layers)?;
    }
    Ok(WaEnsemble {
        split: f.split,
        backbone_index: f.backbone_index,
        backbone: f.backbone,
        adjusted: f.adjusted,
        heads: f.heads,
        backbone_evals: AtomicUsize::new(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{sample_gaussian, Rng};
    use crate::netcore::{cross_entropy, forward, init_weights, MlpSpec};

    fn models(sizes: &[usize], count: usize, seed: u64) -> Vec<WeightVector> {
        let spec = MlpSpec::new(sizes.to_vec()).unwrap();
        let mut rng = Rng::new(seed);
        (0..count).map(|_| init_weights(&spec, &mut rng)).collect()
    }

    #[test]
    fn single_member_predicts_like_the_model() {
        let ms = models(&[4, 9, 6, 3], 1, 1);
        let x = sample_gaussian(&mut Rng::new(2), 4, 20, 0.0, 1.0);
        for split in 1..=3 {
            let cfg = EnsembleConfig {
                split,
                ..EnsembleConfig::default()
            };
            let e = build_wa_ensemble(&ms, &cfg, &x).unwrap();
            let want = forward(&ms[0].spec(), &ms[0], &x).unwrap();
            assert!(e.predict(&x).unwrap().max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    #[test]
    fn identical_members_keep_their_weights() {
        let one = models(&[4, 8, 3], 1, 3);
        let ms = vec![one[0].clone(), one[0].clone(), one[0].clone()];
        let x = sample_gaussian(&mut Rng::new(4), 4, 50, 0.0, 1.0);
        let e = build_wa_ensemble(&ms, &EnsembleConfig::default(), &x).unwrap();
        for adj in e.adjusted() {
            assert!(adj.max_abs_diff(&one[0].layers()[1]).unwrap() < 1e-6);
        }
    }

    #[test]
    fn averaged_last_layer_gives_the_same_logits() {
        let ms = models(&[4, 8, 3], 3, 5);
        let x = sample_gaussian(&mut Rng::new(6), 4, 30, 0.0, 1.0);
        let e = build_wa_ensemble(&ms, &EnsembleConfig::default(), &x).unwrap();
        let avg = e.averaged_network().unwrap();
        let got = forward(&avg.spec(), &avg, &x).unwrap();
        let logits = e.member_logits(&x).unwrap();
        let mut mean = Matrix::zeros(3, 30);
        for l in &logits {
            mean.axpy(1.0 / 3.0, l).unwrap();
        }
        assert!(got.max_abs_diff(&mean).unwrap() < 1e-9);
        assert!(got.max_abs_diff(&e.predict(&x).unwrap()).unwrap() < 1e-9);
        let deeper = build_wa_ensemble(
            &ms,
            &EnsembleConfig {
                split: 2,
                ..EnsembleConfig::default()
            },
            &x,
        )
        .unwrap();
        assert!(deeper.averaged_network().is_err());
    }

    #[test]
    fn ensemble_loss_never_exceeds_the_worst_member() {
        let ms = models(&[5, 10, 4], 3, 7);
        let mut rng = Rng::new(8);
        let x = sample_gaussian(&mut rng, 5, 40, 0.0, 1.0);
        let labels: Vec<usize> = (0..40).map(|_| rng.index(4)).collect();
        let e = build_wa_ensemble(&ms, &EnsembleConfig::default(), &x).unwrap();
        let ens = cross_entropy(&e.predict(&x).unwrap(), &labels).unwrap();
        let losses: Vec<f64> = e
            .member_logits(&x)
            .unwrap()
            .iter()
            .map(|l| cross_entropy(l, &labels).unwrap())
            .collect();
        let mean = losses.iter().sum::<f64>() / 3.0;
        let max = losses.iter().cloned().fold(f64::MIN, f64::max);
        assert!(ens <= mean + 1e-12 && mean <= max);
    }

    #[test]
    fn backbone_runs_once_per_batch() {
        let ms = models(&[4, 8, 8, 3], 5, 9);
        let x = sample_gaussian(&mut Rng::new(10), 4, 20, 0.0, 1.0);
        let e = build_wa_ensemble(&ms, &EnsembleConfig::default(), &x).unwrap();
        assert_eq!(e.backbone_evaluations(), 0);
        e.predict(&x).unwrap();
        assert_eq!(e.backbone_evaluations(), 1);
        e.predict(&x).unwrap();
        assert_eq!(e.backbone_evaluations(), 2);
    }

    #[test]
    fn deeper_splits_compute_more_layers_per_member() {
        let ms = models(&[4, 8, 8, 8, 3], 2, 11);
        let x = sample_gaussian(&mut Rng::new(12), 4, 20, 0.0, 1.0);
        let counts: Vec<usize> = (1..=4)
            .map(|split| {
                build_wa_ensemble(
                    &ms,
                    &EnsembleConfig {
                        split,
                        ..EnsembleConfig::default()
                    },
                    &x,
                )
                .unwrap()
                .member_layers()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn invalid_inputs_are_errors() {
        let ms = models(&[4, 8, 3], 2, 13);
        let x = sample_gaussian(&mut Rng::new(14), 4, 10, 0.0, 1.0);
        assert!(build_wa_ensemble(&[], &EnsembleConfig::default(), &x).is_err());
        assert!(build_wa_ensemble(
            &ms,
            &EnsembleConfig {
                split: 3,
                ..EnsembleConfig::default()
            },
            &x
        )
        .is_err());
        assert!(build_wa_ensemble(
            &ms,
            &EnsembleConfig {
                backbone: 2,
                ..EnsembleConfig::default()
            },
            &x
        )
        .is_err());
        let other = models(&[4, 9, 3], 1, 15);
        assert!(build_wa_ensemble(&[ms[0].clone(), other[0].clone()], &EnsembleConfig::default(), &x).is_err());
        let e = build_wa_ensemble(&ms, &EnsembleConfig::default(), &x).unwrap();
        assert!(e.predict(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn independent_probabilities_are_a_distribution() {
        let ms = models(&[4, 8, 3], 3, 16);
        let x = sample_gaussian(&mut Rng::new(17), 4, 10, 0.0, 1.0);
        let p = independent_probabilities(&ms, &x).unwrap();
        for j in 0..10 {
            let s: f64 = p.column(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let ms = models(&[4, 8, 6, 3], 3, 18);
        let x = sample_gaussian(&mut Rng::new(19), 4, 15, 0.0, 1.0);
        let e = build_wa_ensemble(
            &ms,
            &EnsembleConfig {
                split: 2,
                backbone: 1,
                ..EnsembleConfig::default()
            },
            &x,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        save_ensemble(&e, &path).unwrap();
        let back = load_ensemble(&path).unwrap();
        assert_eq!(back.backbone_index(), 1);
        assert_eq!(back.predict(&x).unwrap(), e.predict(&x).unwrap());
    }
}
