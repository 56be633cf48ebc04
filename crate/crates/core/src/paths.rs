//! Multi-leg paths in weight space and their evaluation on a dataset.
//!
//! A [`ConnectionPath`] is a chain of [`PathLeg`]s, each a map from
//! `t ∈ [0, 1]` to a [`WeightVector`]. Every leg returns its stored endpoint
//! weights at `t = 0` and `t = 1`, so endpoints and leg boundaries are exact.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::{
    accuracy, affine, cross_entropy, forward, forward_trace, from_particle_matrix, particle_matrix, relu, Dataset,
    MlpSpec, WeightVector,
};

/// Default number of grid points per leg.
pub const DEFAULT_POINTS_PER_LEG: usize = 25;

pub type LegFn = dyn Fn(f64) -> Result<WeightVector> + Send + Sync;

/// Descriptive data attached to a leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegMeta {
    pub method: String,
    /// Weight layers (1-based) that move along this leg.
    pub layers: Vec<usize>,
    /// Scaffold stage the leg belongs to.
    pub stage: usize,
}

impl LegMeta {
    pub fn new(method: impl Into<String>, layers: Vec<usize>, stage: usize) -> Self {
        LegMeta {
            method: method.into(),
            layers,
            stage,
        }
    }
}

/// Exchange of two neurons of hidden layer `layer` of `base`, with the
/// other neurons held in the arrangement `order` (position `p` holds
/// neuron `order[p]` of `base`).
#[derive(Clone)]
pub struct SwapSpec {
    pub base: Arc<WeightVector>,
    pub layer: usize,
    pub order: Arc<Vec<usize>>,
    pub i: usize,
    pub j: usize,
}

#[derive(Clone)]
pub enum LegKind {
    Closed {
        start: Arc<WeightVector>,
        end: Arc<WeightVector>,
        eval: Arc<LegFn>,
    },
    Polyline(Vec<Arc<WeightVector>>),
    Swap(SwapSpec),
}

#[derive(Clone)]
pub struct PathLeg {
    kind: LegKind,
    meta: LegMeta,
}

impl fmt::Debug for PathLeg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            LegKind::Closed { .. } => "closed".to_string(),
            LegKind::Polyline(b) => format!("polyline({})", b.len()),
            LegKind::Swap(s) => format!("swap({}, {})", s.i, s.j),
        };
        write!(f, "PathLeg({kind}, {:?})", self.meta)
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("path parameter t = {t} outside [0, 1]")));
    }
    Ok(())
}

impl PathLeg {
    /// Closed-form leg; `eval` is only called for `0 < t < 1`.
    pub fn closed(start: Arc<WeightVector>, end: Arc<WeightVector>, eval: Arc<LegFn>, meta: LegMeta) -> Result<Self> {
        start.same_architecture(&end)?;
        Ok(PathLeg {
            kind: LegKind::Closed { start, end, eval },
            meta,
        })
    }

    /// Straight segment.
    pub fn linear(start: Arc<WeightVector>, end: Arc<WeightVector>, meta: LegMeta) -> Result<Self> {
        let (a, b) = (start.clone(), end.clone());
        Self::closed(start, end, Arc::new(move |t| a.lerp(&b, t)), meta)
    }

    /// Piecewise-linear curve through uniformly spaced breakpoints.
    pub fn polyline(breakpoints: Vec<Arc<WeightVector>>, meta: LegMeta) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::invalid("a polyline needs at least 2 breakpoints"));
        }
        for b in &breakpoints[1..] {
            breakpoints[0].same_architecture(b)?;
        }
        Ok(PathLeg {
            kind: LegKind::Polyline(breakpoints),
            meta,
        })
    }

    pub fn swap(spec: SwapSpec, meta: LegMeta) -> Result<Self> {
        let n = particle_matrix(&spec.base, spec.layer)?.rows();
        if spec.order.len() != n || spec.i >= n || spec.j >= n {
            return Err(Error::invalid(format!(
                "swap ({}, {}) with arrangement of {} among {n} neurons",
                spec.i,
                spec.j,
                spec.order.len()
            )));
        }
        Ok(PathLeg {
            kind: LegKind::Swap(spec),
            meta,
        })
    }

    pub fn kind(&self) -> &LegKind {
        &self.kind
    }

    pub fn meta(&self) -> &LegMeta {
        &self.meta
    }

    pub fn set_stage(&mut self, stage: usize) {
        self.meta.stage = stage;
    }

    pub fn eval(&self, t: f64) -> Result<WeightVector> {
        check_t(t)?;
        match &self.kind {
            LegKind::Closed { start, end, eval } => {
                if t == 0.0 {
                    Ok((**start).clone())
                } else if t == 1.0 {
                    Ok((**end).clone())
                } else {
                    eval(t)
                }
            }
            LegKind::Polyline(bps) => {
                let segs = bps.len() - 1;
                let s = t * segs as f64;
                let seg = (s.floor() as usize).min(segs - 1);
                let u = s - seg as f64;
                if u == 0.0 {
                    Ok((*bps[seg]).clone())
                } else if u == 1.0 {
                    Ok((*bps[seg + 1]).clone())
                } else {
                    bps[seg].lerp(&bps[seg + 1], u)
                }
            }
            LegKind::Swap(s) => swap_point(s, t),
        }
    }
}

/// Weights of a swap leg at `t`, built from the base particles so that the
/// endpoints are exact permutations of `base`.
fn swap_point(s: &SwapSpec, t: f64) -> Result<WeightVector> {
    let p = particle_matrix(&s.base, s.layer)?;
    let mut order = (*s.order).clone();
    if t == 1.0 {
        order.swap(s.i, s.j);
    }
    let mut arranged = p.select_rows(&order);
    if t > 0.0 && t < 1.0 && s.i != s.j {
        let (a, b) = (s.order[s.i], s.order[s.j]);
        for (c, (&x, &y)) in p.row(a).iter().zip(p.row(b)).enumerate() {
            arranged.set(s.i, c, (1.0 - t) * x + t * y);
            arranged.set(s.j, c, (1.0 - t) * y + t * x);
        }
    }
    from_particle_matrix(&s.base, s.layer, &arranged)
}

#[derive(Debug, Clone)]
pub struct ConnectionPath {
    method: String,
    legs: Vec<PathLeg>,
}

impl ConnectionPath {
    pub fn new(method: impl Into<String>, legs: Vec<PathLeg>) -> Result<Self> {
        if legs.is_empty() {
            return Err(Error::invalid("a path needs at least one leg"));
        }
        Ok(ConnectionPath {
            method: method.into(),
            legs,
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn legs(&self) -> &[PathLeg] {
        &self.legs
    }

    pub fn into_legs(self) -> Vec<PathLeg> {
        self.legs
    }

    pub fn leg_count(&self) -> usize {
        self.legs.len()
    }

    /// Number of distinct scaffold stages.
    pub fn stage_count(&self) -> usize {
        let mut stages: Vec<usize> = self.legs.iter().map(|l| l.meta.stage).collect();
        stages.dedup();
        stages.len()
    }

    pub fn eval_point(&self, leg: usize, t: f64) -> Result<WeightVector> {
        self.legs
            .get(leg)
            .ok_or_else(|| Error::invalid(format!("leg {leg} out of range 0..{}", self.legs.len())))?
            .eval(t)
    }

    pub fn start(&self) -> Result<WeightVector> {
        self.eval_point(0, 0.0)
    }

    pub fn end(&self) -> Result<WeightVector> {
        self.eval_point(self.legs.len() - 1, 1.0)
    }

    /// Checks exact attainment of both endpoints and exact continuity at
    /// every leg boundary.
    pub fn validate(&self, a: &WeightVector, b: &WeightVector) -> Result<()> {
        if &self.start()? != a {
            return Err(Error::invalid(format!(
                "{}: path does not start at the first endpoint",
                self.method
            )));
        }
        if &self.end()? != b {
            return Err(Error::invalid(format!(
                "{}: path does not end at the second endpoint",
                self.method
            )));
        }
        for i in 1..self.legs.len() {
            if self.legs[i - 1].eval(1.0)? != self.legs[i].eval(0.0)? {
                return Err(Error::invalid(format!(
                    "{}: discontinuity between legs {} and {i}",
                    self.method,
                    i - 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub leg: usize,
    pub t: f64,
    pub global_t: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub method: String,
    pub worst_accuracy: f64,
    pub worst_loss: f64,
    pub argworst_global_t: f64,
    pub endpoints_accuracy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub points: Vec<GridPoint>,
    pub summary: PathSummary,
}

pub const PATH_CSV_HEADER: &str = "# modeconnect path report v1";

impl PathReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(PATH_CSV_HEADER);
        out.push_str("\nleg,t,global_t,loss,accuracy\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{},{}\n", p.leg, p.t, p.global_t, p.loss, p.accuracy));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Cached activations of a swap base: output changes inside a swap leg
/// only through the two moving neurons.
struct SwapCache {
    /// Input to the swapped layer.
    input: Matrix,
    /// Activations of the swapped layer, one row per neuron.
    hidden: Matrix,
    /// Pre-activation of the following layer.
    z_next: Matrix,
}

impl SwapCache {
    fn build(base: &WeightVector, k: usize, x: &Matrix) -> Result<Self> {
        let trace = forward_trace(base, x)?;
        let input = trace.layer_input(x, k - 1).clone();
        let hidden = trace.hidden[k - 1].clone();
        let z_next = if k + 1 == base.depth() {
            trace.logits
        } else {
            affine(&base.layers()[k], &hidden)?
        };
        Ok(SwapCache { input, hidden, z_next })
    }

    fn logits(&self, s: &SwapSpec, t: f64) -> Result<Matrix> {
        let base = &s.base;
        let k = s.layer;
        let mut z = self.z_next.clone();
        let (a, b) = (s.order[s.i], s.order[s.j]);
        if s.i != s.j && t > 0.0 && t < 1.0 {
            let wk = &base.layers()[k - 1];
            let wn = &base.layers()[k];
            let fan_in = wk.cols() - 1;
            let ra = wk.row(a);
            let rb = wk.row(b);
            let mixed = Matrix::from_fn(2, fan_in + 1, |r, c| {
                let (x, y) = if r == 0 { (ra[c], rb[c]) } else { (rb[c], ra[c]) };
                (1.0 - t) * x + t * y
            });
            let h_mixed = relu(&affine(&mixed, &self.input)?);
            let n = z.cols();
            for o in 0..z.rows() {
                let (ca, cb) = (wn.get(o, a), wn.get(o, b));
                let ci = (1.0 - t) * ca + t * cb;
                let cj = (1.0 - t) * cb + t * ca;
                let (ha, hb) = (self.hidden.row(a), self.hidden.row(b));
                let (hi, hj) = (h_mixed.row(0), h_mixed.row(1));
                let row = z.row_mut(o);
                for q in 0..n {
                    row[q] += ci * hi[q] + cj * hj[q] - ca * ha[q] - cb * hb[q];
                }
            }
        }
        let mut h = z;
        for layer in &base.layers()[k + 1..] {
            h = affine(layer, &relu(&h))?;
        }
        Ok(h)
    }
}

/// Loss and accuracy at every grid point of every leg. Consecutive legs
/// share their boundary point, so the report has
/// `legs · points_per_leg − (legs − 1)` rows.
pub fn evaluate(path: &ConnectionPath, spec: &MlpSpec, data: &Dataset, points_per_leg: usize) -> Result<PathReport> {
    if points_per_leg < 2 {
        return Err(Error::invalid(format!(
            "points_per_leg must be >= 2, got {points_per_leg}"
        )));
    }
    let x = data.features();
    let mut caches: HashMap<(usize, usize), SwapCache> = HashMap::new();
    for leg in &path.legs {
        if let LegKind::Swap(s) = &leg.kind {
            s.base.check_spec(spec)?;
            let key = (Arc::as_ptr(&s.base) as usize, s.layer);
            if let std::collections::hash_map::Entry::Vacant(e) = caches.entry(key) {
                e.insert(SwapCache::build(&s.base, s.layer, x)?);
            }
        }
    }

    let mut grid = Vec::new();
    for (l, _) in path.legs.iter().enumerate() {
        for j in usize::from(l > 0)..points_per_leg {
            let t = j as f64 / (points_per_leg - 1) as f64;
            grid.push((l, t));
        }
    }
    let points: Vec<GridPoint> = grid
        .par_iter()
        .map(|&(l, t)| {
            let leg = &path.legs[l];
            let logits = match &leg.kind {
                LegKind::Swap(s) => caches[&(Arc::as_ptr(&s.base) as usize, s.layer)].logits(s, t)?,
                _ => forward(spec, &leg.eval(t)?, x)?,
            };
            Ok(GridPoint {
                leg: l,
                t,
                global_t: l as f64 + t,
                loss: cross_entropy(&logits, data.labels())?,
                accuracy: accuracy(&logits, data.labels())?,
            })
        })
        .collect::<Result<_>>()?;

    let mut worst = 0;
    for (i, p) in points.iter().enumerate() {
        if p.accuracy < points[worst].accuracy {
            worst = i;
        }
    }
    let summary = PathSummary {
        method: path.method.clone(),
        worst_accuracy: points[worst].accuracy,
        worst_loss: points.iter().map(|p| p.loss).fold(f64::NEG_INFINITY, f64::max),
        argworst_global_t: points[worst].global_t,
        endpoints_accuracy: [points[0].accuracy, points[points.len() - 1].accuracy],
    };
    Ok(PathReport { points, summary })
}

/// Full-forward evaluation of one point, bypassing the swap shortcut.
pub fn logits_at(path: &ConnectionPath, spec: &MlpSpec, x: &Matrix, leg: usize, t: f64) -> Result<Matrix> {
    forward(spec, &path.eval_point(leg, t)?, x)
}

/// Pre-activation of the layer after a swap, for tests of the shortcut.
#[doc(hidden)]
pub fn swap_shortcut_logits(leg: &PathLeg, x: &Matrix, t: f64) -> Result<Option<Matrix>> {
    match &leg.kind {
        LegKind::Swap(s) => Ok(Some(SwapCache::build(&s.base, s.layer, x)?.logits(s, t)?)),
        _ => Ok(None),
    }
}
