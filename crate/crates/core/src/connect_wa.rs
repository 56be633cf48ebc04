//! Weight adjustment: while one layer moves along a base connection, the
//! next layer is re-solved by least squares so the subnetwork keeps
//! reproducing the first endpoint's outputs. Deeper networks are connected
//! through hybrid intermediate points whose lower layers already come from
//! the second endpoint.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connect_direct::{arc_connect, arc_rows, endpoint_center, estimate_center, linear_connect, CenterSource};
use crate::connect_ot::{ot_connect, solve_assignment, squared_distance_cost, unpermute_legs};
use crate::error::{Error, Result};
use crate::ndmath::{pseudo_inverse, Matrix, DEFAULT_RCOND};
use crate::netcore::{affine, forward_trace, permute_hidden, relu, ForwardTrace, WeightVector};
use crate::paths::{ConnectionPath, LegMeta, PathLeg};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaConfig {
    /// Number of `t` values, evenly spaced over `[0, 1]`, where the next
    /// layer is solved.
    pub breakpoints: usize,
    pub rcond: f64,
    /// At most this many adjustment samples are used (evenly strided).
    pub adjust_cap: usize,
}

impl Default for WaConfig {
    fn default() -> Self {
        WaConfig {
            breakpoints: 16,
            rcond: DEFAULT_RCOND,
            adjust_cap: 4096,
        }
    }
}

impl WaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.breakpoints < 2 || self.adjust_cap == 0 || self.rcond.is_nan() || self.rcond < 0.0 {
            return Err(Error::invalid(format!(
                "need breakpoints >= 2, adjust_cap >= 1 and rcond >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn breakpoint_times(&self) -> Vec<f64> {
        let m = self.breakpoints - 1;
        (0..=m)
            .map(|i| if i == m { 1.0 } else { i as f64 / m as f64 })
            .collect()
    }
}

/// At most `cap` columns of `x`, taken at evenly spaced indices.
pub fn cap_columns(x: &Matrix, cap: usize) -> Matrix {
    let n = x.cols();
    if n <= cap {
        return x.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    x.select_cols(&idx)
}

/// `target · [h; 1]⁺`: the affine layer whose output on `h` is closest to
/// `target` in the least-squares sense, with the minimum norm among ties.
pub fn solve_next_layer(target: &Matrix, h: &Matrix, rcond: f64) -> Result<Matrix> {
    if target.cols() != h.cols() {
        return Err(Error::shape(
            "solve_next_layer",
            format!("target has {} samples, features have {}", target.cols(), h.cols()),
        ));
    }
    let pinv = pseudo_inverse(&h.append_ones_row(), rcond)?;
    target.matmul(&pinv)
}

/// `W [X^A; 1] [X^B; 1]⁺`: re-expresses the layer `W`, fed by features
/// `X^A`, as a layer fed by `X^B` with (approximately) the same output.
pub fn adjust_layer(w_next_a: &Matrix, x_prev_a: &Matrix, x_prev_b: &Matrix, rcond: f64) -> Result<Matrix> {
    if x_prev_a.cols() != x_prev_b.cols() {
        return Err(Error::shape(
            "adjust_layer",
            format!("{} and {} samples", x_prev_a.cols(), x_prev_b.cols()),
        ));
    }
    if x_prev_b.rows() + 1 != w_next_a.cols() {
        return Err(Error::shape(
            "adjust_layer",
            format!(
                "{}x{} weights for {}-dimensional features",
                w_next_a.rows(),
                w_next_a.cols(),
                x_prev_b.rows()
            ),
        ));
    }
    let target = affine(w_next_a, x_prev_a)?;
    solve_next_layer(&target, x_prev_b, rcond)
}

/// `Θ_k^{AB}`: layers below `k` from `B`, layer `k` adjusted onto `B`'s
/// features, layers above `k` from `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediatePoint {
    pub weights: WeightVector,
    pub k: usize,
}

/// Forward traces of both endpoints on the adjustment features.
struct Activations {
    x: Matrix,
    a: ForwardTrace,
    b: ForwardTrace,
}

impl Activations {
    fn new(a: &WeightVector, b: &WeightVector, x: Matrix) -> Result<Self> {
        a.same_architecture(b)?;
        let ta = forward_trace(a, &x)?;
        let tb = forward_trace(b, &x)?;
        Ok(Activations { x, a: ta, b: tb })
    }

    /// `X_j^A`.
    fn a_features(&self, j: usize) -> &Matrix {
        self.a.layer_input(&self.x, j)
    }

    /// `X_j^B`.
    fn b_features(&self, j: usize) -> &Matrix {
        self.b.layer_input(&self.x, j)
    }
}

fn intermediate(acts: &Activations, a: &WeightVector, b: &WeightVector, k: usize, rcond: f64) -> Result<WeightVector> {
    let depth = a.depth();
    if k < 2 || k > depth {
        return Err(Error::invalid(format!(
            "intermediate layer {k} out of range 2..={depth}"
        )));
    }
    let adjusted = adjust_layer(
        &a.layers()[k - 1],
        acts.a_features(k - 1),
        acts.b_features(k - 1),
        rcond,
    )?;
    let layers = (1..=depth)
        .map(|j| match j.cmp(&k) {
            std::cmp::Ordering::Less => b.layers()[j - 1].clone(),
            std::cmp::Ordering::Equal => adjusted.clone(),
            std::cmp::Ordering::Greater => a.layers()[j - 1].clone(),
        })
        .collect();
    WeightVector::new(layers)
}

pub fn build_intermediate(
    a: &WeightVector,
    b: &WeightVector,
    k: usize,
    x: &Matrix,
    rcond: f64,
) -> Result<IntermediatePoint> {
    let acts = Activations::new(a, b, x.clone())?;
    Ok(IntermediatePoint {
        weights: intermediate(&acts, a, b, k, rcond)?,
        k,
    })
}

/// How the moving layer travels inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaBase {
    Linear,
    Arc,
    Ot,
}

impl WaBase {
    pub fn name(self) -> &'static str {
        match self {
            WaBase::Linear => "linear",
            WaBase::Arc => "arc",
            WaBase::Ot => "ot",
        }
    }
}

/// Multilayer scaffold variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaffoldMethod {
    /// Base connection of one layer's rows plus adjustment of the next.
    Wa(WaBase),
    /// Base connection of whole particles between intermediate points.
    Butterfly(WaBase),
}

impl ScaffoldMethod {
    pub const ALL: [ScaffoldMethod; 6] = [
        ScaffoldMethod::Wa(WaBase::Linear),
        ScaffoldMethod::Wa(WaBase::Arc),
        ScaffoldMethod::Wa(WaBase::Ot),
        ScaffoldMethod::Butterfly(WaBase::Linear),
        ScaffoldMethod::Butterfly(WaBase::Arc),
        ScaffoldMethod::Butterfly(WaBase::Ot),
    ];

    pub fn base(self) -> WaBase {
        match self {
            ScaffoldMethod::Wa(b) | ScaffoldMethod::Butterfly(b) => b,
        }
    }

    /// Stages of an `L`-layer path: `L` with adjustment, `L − 1` without.
    pub fn stage_count(self, depth: usize) -> usize {
        match self {
            ScaffoldMethod::Wa(_) => depth,
            ScaffoldMethod::Butterfly(_) => depth - 1,
        }
    }
}

impl fmt::Display for ScaffoldMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaffoldMethod::Wa(b) => write!(f, "{}-wa", b.name()),
            ScaffoldMethod::Butterfly(b) => write!(f, "{}-bfly", b.name()),
        }
    }
}

impl FromStr for ScaffoldMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaffoldMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scaffold method '{s}'")))
    }
}

/// One adjustment stage at layer `j`: from `start` (layer `j` about to move,
/// layer `j + 1` still `A`'s) to `end` (layer `j` equal to `B`'s, layer
/// `j + 1` adjusted). Returns the adjust-in leg, the breakpoint polyline,
/// and for the OT base the swap legs restoring `end`'s neuron order.
#[allow(clippy::too_many_arguments)]
fn wa_stage(
    start: Arc<WeightVector>,
    end: Arc<WeightVector>,
    j: usize,
    base: WaBase,
    cfg: &WaConfig,
    input: &Matrix,
    target: &Matrix,
    stage: usize,
    method: &str,
) -> Result<Vec<PathLeg>> {
    let w_from = &start.layers()[j - 1];
    let mut order = None;
    let (w_to, last) = match base {
        WaBase::Ot => {
            let pi = solve_assignment(&squared_distance_cost(w_from, &end.layers()[j - 1])?)?.pi;
            let last = Arc::new(permute_hidden(&end, j, &pi)?);
            order = Some(pi);
            (last.layers()[j - 1].clone(), last)
        }
        _ => (end.layers()[j - 1].clone(), end.clone()),
    };
    let mu = match base {
        WaBase::Arc => estimate_center(&[w_from, &w_to], CenterSource::EndpointParticles)?.mu,
        _ => Vec::new(),
    };
    let moving = |t: f64| match base {
        WaBase::Arc => arc_rows(w_from, &w_to, &mu, t),
        _ => w_from.lerp(&w_to, t),
    };

    let times = cfg.breakpoint_times();
    let inner = &times[..times.len() - 1];
    let mut points: Vec<Arc<WeightVector>> = inner
        .par_iter()
        .map(|&t| {
            let solve = || -> Result<WeightVector> {
                let wj = moving(t)?;
                let h = relu(&affine(&wj, input)?);
                let next = solve_next_layer(target, &h, cfg.rcond)?;
                start.with_layer(j, wj)?.with_layer(j + 1, next)
            };
            solve()
                .map(Arc::new)
                .map_err(|e| Error::AtBreakpoint { t, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    points.push(last);

    let mut legs = vec![
        PathLeg::linear(
            start.clone(),
            points[0].clone(),
            LegMeta::new(format!("{method}-adjust"), vec![j + 1], stage),
        )?,
        PathLeg::polyline(points, LegMeta::new(method, vec![j, j + 1], stage))?,
    ];
    if let Some(pi) = order {
        legs.extend(unpermute_legs(
            end,
            j,
            &pi,
            &LegMeta::new(format!("{method}-swap"), vec![j, j + 1], stage),
        )?);
    }
    Ok(legs)
}

/// Weight-adjusted connection of a one-hidden-layer pair: the hidden layer
/// follows `base` while the output layer is re-solved at every breakpoint to
/// reproduce `A`'s logits on `x`.
pub fn wa_connect_one_hidden(
    a: &WeightVector,
    b: &WeightVector,
    base: WaBase,
    cfg: &WaConfig,
    x: &Matrix,
) -> Result<ConnectionPath> {
    if a.depth() != 2 {
        return Err(Error::invalid(format!(
            "one-hidden connection needs 2 weight layers, got {}",
            a.depth()
        )));
    }
    wa_connect_multilayer(a, b, ScaffoldMethod::Wa(base), cfg, x)
}

/// Chains `Θ^A → Θ₂^{AB} → … → Θ_L^{AB} → Θ^B` (adjustment variants) or
/// `Θ^A → Θ₂^{AB} → … → Θ_{L−1}^{AB} → Θ^B` (butterfly variants). Stage `j`
/// treats layers `j` and `j + 1` as a one-hidden subnetwork.
pub fn wa_connect_multilayer(
    a: &WeightVector,
    b: &WeightVector,
    method: ScaffoldMethod,
    cfg: &WaConfig,
    x: &Matrix,
) -> Result<ConnectionPath> {
    cfg.validate()?;
    a.same_architecture(b)?;
    let depth = a.depth();
    if depth < 2 {
        return Err(Error::invalid("the scaffold needs at least one hidden layer"));
    }
    let acts = Activations::new(a, b, cap_columns(x, cfg.adjust_cap))?;
    let name = method.to_string();
    let last_point = match method {
        ScaffoldMethod::Wa(_) => depth,
        ScaffoldMethod::Butterfly(_) => depth - 1,
    };
    let mut points = vec![Arc::new(a.clone())];
    for k in 2..=last_point {
        points.push(Arc::new(intermediate(&acts, a, b, k, cfg.rcond)?));
    }
    points.push(Arc::new(b.clone()));

    let mut legs = Vec::new();
    for (s, pair) in points.windows(2).enumerate() {
        let (start, end) = (pair[0].clone(), pair[1].clone());
        let j = s + 1;
        let stage_legs = match method {
            ScaffoldMethod::Wa(base) if j < depth => {
                let target = affine(&a.layers()[j], acts.a_features(j))?;
                wa_stage(start, end, j, base, cfg, acts.b_features(j - 1), &target, s, &name)?
            }
            ScaffoldMethod::Wa(_) => vec![PathLeg::linear(
                start,
                end,
                LegMeta::new(format!("{name}-last"), vec![depth], s),
            )?],
            ScaffoldMethod::Butterfly(base) => {
                let path = match base {
                    WaBase::Linear => linear_connect(&start, &end)?,
                    WaBase::Arc => arc_connect(&start, &end, j, &endpoint_center(&start, &end, j)?)?,
                    WaBase::Ot => ot_connect(&start, &end, j)?.0,
                };
                path.into_legs()
                    .into_iter()
                    .map(|mut leg| {
                        leg.set_stage(s);
                        leg
                    })
                    .collect()
            }
        };
        legs.extend(stage_legs);
    }
    ConnectionPath::new(name, legs)
}
