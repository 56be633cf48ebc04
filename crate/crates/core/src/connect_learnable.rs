//! Learned particle maps for the ν-connection. `ν` is an affine coupling
//! flow (RealNVP style) over particle space, trained either by maximum
//! likelihood on particles of trained models or directly on the network loss
//! along the path it induces.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connect_direct::{arc_coefficients, nu_connect_named, ParticleMap};
use crate::error::{Error, Result};
use crate::ndmath::{sample_gaussian, Matrix, Rng, Tape, Var};
use crate::netcore::{particle_dim, particle_matrix, read_json, write_json, Dataset, WeightVector};
use crate::paths::ConnectionPath;

pub const FLOW_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub layers: usize,
    /// Width of both hidden layers of every subnet.
    pub hidden: usize,
    /// Scales are `bound · tanh(raw)`.
    pub scale_bound: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 6,
            hidden: 64,
            scale_bound: 2.0,
            seed: 0,
        }
    }
}

/// How a flow's parameters were obtained; decides the connection's name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowOrigin {
    Untrained,
    Nll,
    Bijection,
}

impl FlowOrigin {
    pub fn method_name(self) -> &'static str {
        match self {
            FlowOrigin::Untrained => "rnvp",
            FlowOrigin::Nll => "rnvp-flow",
            FlowOrigin::Bijection => "rnvp-bijection",
        }
    }
}

/// Per-coordinate affine preprocessing `z = (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Whitening {
    pub fn identity(dim: usize) -> Self {
        Whitening {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations of `x` (one sample
    /// per row). Constant coordinates get std 1.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid("cannot fit whitening to zero samples"));
        }
        x.ensure_finite("whitening samples")?;
        let mean = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for r in x.row_iter() {
            for ((v, a), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (a - m) * (a - m);
            }
        }
        let n = x.rows() as f64;
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Whitening { mean, std })
    }

    /// `log |det|` of the whitening map.
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// One coupling layer. Coordinates with `mask = true` pass through and feed
/// the subnet; the others are scaled and shifted.
///
/// Subnet: `h₁ = relu(x_m w1 + b1)`, `h₂ = relu(h₁ w2 + b2)`,
/// `[s_raw | t] = h₂ w3 + b3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

impl CouplingLayer {
    fn params(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    fn mask_row(&self, pass: bool) -> Matrix {
        let v: Vec<f64> = self.mask.iter().map(|&m| if m == pass { 1.0 } else { 0.0 }).collect();
        Matrix::row_vector(&v)
    }

    /// Masked scale and shift for a batch, zero on the pass-through
    /// coordinates.
    fn scale_shift(&self, x: &Matrix, bound: f64) -> Result<(Matrix, Matrix)> {
        let d = self.mask.len();
        let mut xm = x.clone();
        for i in 0..xm.rows() {
            for (v, &m) in xm.row_mut(i).iter_mut().zip(&self.mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        let mut h = xm.matmul(&self.w1)?;
        add_row_bias(&mut h, &self.b1);
        h.map_inplace(|v| v.max(0.0));
        let mut h = h.matmul(&self.w2)?;
        add_row_bias(&mut h, &self.b2);
        h.map_inplace(|v| v.max(0.0));
        let mut raw = h.matmul(&self.w3)?;
        add_row_bias(&mut raw, &self.b3);
        let n = x.rows();
        let mut s = Matrix::zeros(n, d);
        let mut t = Matrix::zeros(n, d);
        for i in 0..n {
            let r = raw.row(i);
            for j in (0..d).filter(|&j| !self.mask[j]) {
                s.set(i, j, bound * r[j].tanh());
                t.set(i, j, r[d + j]);
            }
        }
        Ok((s, t))
    }
}

fn add_row_bias(m: &mut Matrix, b: &Matrix) {
    for i in 0..m.rows() {
        for (v, bj) in m.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bj;
        }
    }
}

/// `ν = couplings ∘ whitening`, acting on batches with one particle per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    dim: usize,
    scale_bound: f64,
    origin: FlowOrigin,
    whitening: Whitening,
    layers: Vec<CouplingLayer>,
}

impl CouplingFlow {
    /// Identity-initialized flow: subnet output layers are zero, so every
    /// scale and shift starts at zero. Masks alternate between the first
    /// and second half of the coordinates.
    pub fn new(dim: usize, config: &FlowConfig) -> Result<Self> {
        if dim == 0 || config.layers == 0 || config.hidden == 0 {
            return Err(Error::invalid(format!(
                "flow needs positive dim, layers and width, got dim={dim} {config:?}"
            )));
        }
        if !(config.scale_bound > 0.0 && config.scale_bound.is_finite()) {
            return Err(Error::invalid(format!(
                "scale bound must be > 0, got {}",
                config.scale_bound
            )));
        }
        let mut rng = Rng::new(config.seed);
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|l| CouplingLayer {
                mask: (0..dim).map(|j| (j < dim / 2) == (l % 2 == 0)).collect(),
                w1: sample_gaussian(&mut rng, dim, h, 0.0, (2.0 / dim as f64).sqrt()),
                b1: Matrix::zeros(1, h),
                w2: sample_gaussian(&mut rng, h, h, 0.0, (2.0 / h as f64).sqrt()),
                b2: Matrix::zeros(1, h),
                w3: Matrix::zeros(h, 2 * dim),
                b3: Matrix::zeros(1, 2 * dim),
            })
            .collect();
        Ok(CouplingFlow {
            dim,
            scale_bound: config.scale_bound,
            origin: FlowOrigin::Untrained,
            whitening: Whitening::identity(dim),
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale_bound(&self) -> f64 {
        self.scale_bound
    }

    pub fn origin(&self) -> FlowOrigin {
        self.origin
    }

    pub fn set_origin(&mut self, origin: FlowOrigin) {
        self.origin = origin;
    }

    pub fn whitening(&self) -> &Whitening {
        &self.whitening
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn set_whitening(&mut self, w: Whitening) -> Result<()> {
        if w.mean.len() != self.dim || w.std.len() != self.dim {
            return Err(Error::shape(
                "whitening",
                format!("{}/{} entries for dimension {}", w.mean.len(), w.std.len(), self.dim),
            ));
        }
        if w.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || w.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("whitening needs finite means and positive stds"));
        }
        self.whitening = w;
        Ok(())
    }

    /// Refits the whitening constants to `particles`.
    pub fn fit_whitening(&mut self, particles: &Matrix) -> Result<()> {
        self.check_dim(particles)?;
        self.whitening = Whitening::fit(particles)?;
        Ok(())
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::shape(
                "flow input",
                format!("particles of dimension {}, flow has {}", x.cols(), self.dim),
            ));
        }
        Ok(())
    }

    /// `(ν(x), log |det ∂ν/∂x|)` per row.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_dim(x)?;
        let w = &self.whitening;
        let mut y = Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - w.mean[j]) / w.std[j]);
        y.ensure_finite("whitened flow input")?;
        let mut logdet = vec![w.log_det(); x.rows()];
        for (l, layer) in self.layers.iter().enumerate() {
            let (s, t) = layer.scale_shift(&y, self.scale_bound)?;
            for (i, ld) in logdet.iter_mut().enumerate() {
                let (sr, tr) = (s.row(i), t.row(i));
                *ld += sr.iter().sum::<f64>();
                for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                    *v = *v * sr[j].exp() + tr[j];
                }
            }
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("output of coupling layer {}", l + 1)));
            }
        }
        Ok((y, logdet))
    }

    /// `ν⁻¹(y)`, each coupling inverted exactly in reverse order.
    pub fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        self.check_dim(y)?;
        y.ensure_finite("flow inverse input")?;
        let mut x = y.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (s, t) = layer.scale_shift(&x, self.scale_bound)?;
            for i in 0..x.rows() {
                let (sr, tr) = (s.row(i), t.row(i));
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    *v = (*v - tr[j]) * (-sr[j]).exp();
                }
            }
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("inverse of coupling layer {}", l + 1)));
            }
        }
        let w = &self.whitening;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) * w.std[j] + w.mean[j]
        }))
    }

    /// Mean negative log-likelihood under a standard normal base density.
    pub fn nll(&self, x: &Matrix) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::invalid("NLL of an empty batch"));
        }
        let (y, logdet) = self.forward(x)?;
        let mut total = 0.0;
        for (r, ld) in y.row_iter().zip(&logdet) {
            total += 0.5 * r.iter().map(|v| v * v).sum::<f64>() - ld;
        }
        Ok(total / x.rows() as f64 + 0.5 * self.dim as f64 * LN_2PI)
    }

    fn param_count(&self) -> usize {
        self.layers.len() * 6
    }

    fn apply_update(&mut self, mut f: impl FnMut(usize, &mut Matrix) -> Result<()>) -> Result<()> {
        let mut idx = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                f(idx, p)?;
                idx += 1;
            }
        }
        Ok(())
    }
}

impl ParticleMap for CouplingFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(CouplingFlow::forward(self, x)?.0)
    }

    fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        CouplingFlow::inverse(self, y)
    }
}

pub fn flow_forward(flow: &CouplingFlow, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    flow.forward(x)
}

pub fn flow_inverse(flow: &CouplingFlow, y: &Matrix) -> Result<Matrix> {
    flow.inverse(y)
}

#[derive(Serialize, Deserialize)]
struct FlowFile {
    format_version: u32,
    #[serde(flatten)]
    flow: CouplingFlow,
}

pub fn save_flow(flow: &CouplingFlow, path: impl AsRef<Path>) -> Result<()> {
    write_json(
        &FlowFile {
            format_version: FLOW_VERSION,
            flow: flow.clone(),
        },
        path.as_ref(),
    )
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<CouplingFlow> {
    let file: FlowFile = read_json(path.as_ref())?;
    if file.format_version != FLOW_VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported flow version {}", file.format_version),
        });
    }
    let f = file.flow;
    let d = f.dim;
    let bad = f.whitening.mean.len() != d
        || f.whitening.std.len() != d
        || f.layers.iter().any(|l| {
            let h = l.w2.rows();
            l.mask.len() != d
                || l.w1.shape() != (d, h)
                || l.b1.shape() != (1, h)
                || l.w2.shape() != (h, h)
                || l.b2.shape() != (1, h)
                || l.w3.shape() != (h, 2 * d)
                || l.b3.shape() != (1, 2 * d)
        });
    if bad || f.layers.is_empty() {
        return Err(Error::shape(
            "flow checkpoint",
            format!("inconsistent shapes for dimension {d}"),
        ));
    }
    Ok(f)
}

/// Trainable leaves for every subnet parameter, in layer order.
fn record_params(tape: &mut Tape, flow: &CouplingFlow) -> Vec<[Var; 6]> {
    flow.layers
        .iter()
        .map(|l| l.params().map(|p| tape.leaf(p.clone())))
        .collect()
}

fn record_coupling(
    tape: &mut Tape,
    layer: &CouplingLayer,
    p: &[Var; 6],
    x: Var,
    bound: f64,
    invert: bool,
) -> Result<(Var, Var)> {
    let d = layer.mask.len();
    let pass = tape.constant(layer.mask_row(true));
    let free = tape.constant(layer.mask_row(false));
    let xm = tape.mul_row(x, pass)?;
    let h = tape.matmul(xm, p[0])?;
    let h = tape.add_row(h, p[1])?;
    let h = tape.relu(h);
    let h = tape.matmul(h, p[2])?;
    let h = tape.add_row(h, p[3])?;
    let h = tape.relu(h);
    let raw = tape.matmul(h, p[4])?;
    let raw = tape.add_row(raw, p[5])?;
    let s = tape.slice_cols(raw, 0, d)?;
    let s = tape.tanh(s);
    let s = tape.scale(s, bound);
    let s = tape.mul_row(s, free)?;
    let t = tape.slice_cols(raw, d, 2 * d)?;
    let t = tape.mul_row(t, free)?;
    let y = if invert {
        let diff = tape.sub(x, t)?;
        let neg = tape.scale(s, -1.0);
        let e = tape.exp(neg);
        tape.mul(diff, e)?
    } else {
        let e = tape.exp(s);
        let scaled = tape.mul(x, e)?;
        tape.add(scaled, t)?
    };
    Ok((y, s))
}

/// Records `ν(x)`; returns the output and the summed coupling log-dets over
/// the whole batch (the whitening term is a constant and is left out).
fn record_forward(tape: &mut Tape, flow: &CouplingFlow, params: &[[Var; 6]], x: Var) -> Result<(Var, Var)> {
    let w = &flow.whitening;
    let inv_std: Vec<f64> = w.std.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = w.mean.iter().zip(&w.std).map(|(m, s)| -m / s).collect();
    let inv_std = tape.constant(Matrix::row_vector(&inv_std));
    let shift = tape.constant(Matrix::row_vector(&shift));
    let y = tape.mul_row(x, inv_std)?;
    let mut y = tape.add_row(y, shift)?;
    let mut logdet = tape.constant(Matrix::zeros(1, 1));
    for (layer, p) in flow.layers.iter().zip(params) {
        let (out, s) = record_coupling(tape, layer, p, y, flow.scale_bound, false)?;
        let ls = tape.sum(s);
        logdet = tape.add(logdet, ls)?;
        y = out;
    }
    Ok((y, logdet))
}

fn record_inverse(tape: &mut Tape, flow: &CouplingFlow, params: &[[Var; 6]], y: Var) -> Result<Var> {
    let mut x = y;
    for (layer, p) in flow.layers.iter().zip(params).rev() {
        x = record_coupling(tape, layer, p, x, flow.scale_bound, true)?.0;
    }
    let w = &flow.whitening;
    let std = tape.constant(Matrix::row_vector(&w.std));
    let mean = tape.constant(Matrix::row_vector(&w.mean));
    let x = tape.mul_row(x, std)?;
    tape.add_row(x, mean)
}

/// Mean NLL of a batch on the tape, without the constant terms.
fn record_nll(tape: &mut Tape, flow: &CouplingFlow, params: &[[Var; 6]], x: &Matrix) -> Result<Var> {
    let n = x.rows() as f64;
    let xv = tape.constant(x.clone());
    let (y, logdet) = record_forward(tape, flow, params, xv)?;
    let sq = tape.mul(y, y)?;
    let sq = tape.sum(sq);
    let sq = tape.scale(sq, 0.5 / n);
    let ld = tape.scale(logdet, 1.0 / n);
    tape.sub(sq, ld)
}

fn nll_constant(flow: &CouplingFlow) -> f64 {
    0.5 * flow.dim as f64 * LN_2PI - flow.whitening.log_det()
}

/// Cycles through shuffled epochs of `0..n`.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.order.len();
        if size >= n {
            return (0..n).collect();
        }
        if self.pos + size > n {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Refit the whitening constants to the training particles first.
    pub whiten: bool,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            lr: 1e-3,
            steps: 500,
            batch: 256,
            seed: 0,
            whiten: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowFit {
    pub flow: CouplingFlow,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Minibatch loss of every step.
    pub curve: Vec<f64>,
}

fn check_steps(lr: f64, batch: usize) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) || batch == 0 {
        return Err(Error::invalid(format!(
            "learning rate must be finite and >= 0 and batch > 0, got lr={lr} batch={batch}"
        )));
    }
    Ok(())
}

/// Minibatch SGD on the negative log-likelihood of `particles` (one per
/// row). `initial_loss` is the NLL of the flow as passed in and
/// `final_loss` that of the result, both on the full training set; a final
/// value above the initial one is an error.
pub fn train_flow_nll(flow: &CouplingFlow, particles: &Matrix, config: &FlowTrainConfig) -> Result<FlowFit> {
    check_steps(config.lr, config.batch)?;
    if particles.rows() == 0 {
        return Err(Error::invalid("flow training needs at least one particle"));
    }
    let initial = flow.nll(particles)?;
    let mut f = flow.clone();
    if config.whiten {
        f.fit_whitening(particles)?;
    }
    let mut rng = Rng::new(config.seed);
    let mut sampler = BatchSampler::new(particles.rows());
    let mut curve = Vec::with_capacity(config.steps);
    let constant = nll_constant(&f);
    for step in 1..=config.steps {
        let idx = sampler.next(config.batch, &mut rng);
        let batch = particles.select_rows(&idx);
        let mut tape = Tape::new();
        let params = record_params(&mut tape, &f);
        let loss = record_nll(&mut tape, &f, &params, &batch)?;
        let value = tape.scalar(loss) + constant;
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                loss: value,
            });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let flat: Vec<Var> = params.iter().flatten().copied().collect();
        f.apply_update(|i, p| p.axpy(-config.lr, &grads.wrt(flat[i])))?;
    }
    let final_loss = f.nll(particles)?;
    if final_loss.is_nan() || final_loss > initial {
        return Err(Error::Divergence {
            epoch: config.steps,
            loss: final_loss,
        });
    }
    f.origin = FlowOrigin::Nll;
    Ok(FlowFit {
        flow: f,
        initial_loss: initial,
        final_loss,
        curve,
    })
}

/// Trained endpoint models from one pipeline, with the seeds that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    members: Vec<WeightVector>,
    seeds: Vec<u64>,
}

impl ModelSet {
    pub fn new(members: Vec<WeightVector>, seeds: Vec<u64>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::invalid("empty model set"))?;
        if seeds.len() != members.len() {
            return Err(Error::invalid(format!(
                "{} seeds for {} models",
                seeds.len(),
                members.len()
            )));
        }
        for m in &members[1..] {
            first.same_architecture(m)?;
        }
        Ok(ModelSet { members, seeds })
    }

    pub fn members(&self) -> &[WeightVector] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Particles of hidden layer `k` of every member, stacked.
    pub fn particles(&self, k: usize) -> Result<Matrix> {
        let ps = self
            .members
            .iter()
            .map(|m| particle_matrix(m, k))
            .collect::<Result<Vec<_>>>()?;
        Matrix::vstack(&ps.iter().collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BijectionConfig {
    /// Adam step size.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Train at `t = 0.5` only instead of `t ~ U(0, 1)`.
    pub midpoint_only: bool,
}

impl Default for BijectionConfig {
    fn default() -> Self {
        BijectionConfig {
            lr: 1e-3,
            steps: 300,
            batch: 256,
            seed: 0,
            midpoint_only: true,
        }
    }
}

/// Cross-entropy of the network at `ψ(t)` on a batch, recorded on the tape.
/// Parameters outside the particles of layer `k` are the straight-line
/// interpolation between the endpoints.
#[allow(clippy::too_many_arguments)]
fn record_path_loss(
    tape: &mut Tape,
    flow: &CouplingFlow,
    params: &[[Var; 6]],
    a: &WeightVector,
    b: &WeightVector,
    k: usize,
    t: f64,
    x: &Matrix,
    labels: Arc<[usize]>,
) -> Result<Var> {
    let pa = tape.constant(particle_matrix(a, k)?);
    let pb = tape.constant(particle_matrix(b, k)?);
    let (ya, _) = record_forward(tape, flow, params, pa)?;
    let (yb, _) = record_forward(tape, flow, params, pb)?;
    let (c, s) = arc_coefficients(t);
    let ya = tape.scale(ya, c);
    let yb = tape.scale(yb, s);
    let u = tape.add(ya, yb)?;
    let p = record_inverse(tape, flow, params, u)?;

    let rest = a.lerp(b, t)?;
    let fan_in = rest.layers()[k - 1].cols() - 1;
    let d = flow.dim;
    let bias = tape.slice_cols(p, 0, 1)?;
    let incoming = tape.slice_cols(p, 1, 1 + fan_in)?;
    let outgoing = tape.slice_cols(p, 1 + fan_in, d)?;
    let outgoing = tape.transpose(outgoing);

    let depth = rest.depth();
    let mut h = tape.constant(x.clone());
    for (j, w) in rest.layers().iter().enumerate() {
        let layer = j + 1;
        let cols = w.cols() - 1;
        let (lin, b) = if layer == k {
            (incoming, bias)
        } else if layer == k + 1 {
            (outgoing, tape.constant(w.slice_cols(cols, cols + 1)?))
        } else {
            (
                tape.constant(w.slice_cols(0, cols)?),
                tape.constant(w.slice_cols(cols, cols + 1)?),
            )
        };
        let z = tape.matmul(lin, h)?;
        let z = tape.add_col(z, b)?;
        h = if layer == depth { z } else { tape.relu(z) };
    }
    tape.cross_entropy(h, labels)
}

/// Adam on the flow parameters, minimizing the network cross-entropy at
/// `ψ_W(t, Θ^A, Θ^B)` for random ordered pairs of distinct members. The
/// whitening constants are kept as given. `initial_loss` and `final_loss`
/// are the mean minibatch losses of the first and last (up to) ten steps.
pub fn train_bijection(
    flow: &CouplingFlow,
    set: &ModelSet,
    k: usize,
    data: &Dataset,
    config: &BijectionConfig,
) -> Result<FlowFit> {
    check_steps(config.lr, config.batch)?;
    if set.len() < 2 {
        return Err(Error::invalid(format!(
            "bijection training samples two distinct models, the set has {}",
            set.len()
        )));
    }
    let d = particle_dim(&set.members[0], k)?;
    if d != flow.dim {
        return Err(Error::shape(
            "train_bijection",
            format!("flow of dimension {} for particles of dimension {d}", flow.dim),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("bijection training needs data"));
    }
    let input = set.members[0].layers()[0].cols() - 1;
    if data.dim() != input {
        return Err(Error::shape(
            "train_bijection",
            format!("data of dimension {} for networks with {input} inputs", data.dim()),
        ));
    }

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut f = flow.clone();
    let mut m1: Vec<Matrix> = Vec::with_capacity(f.param_count());
    f.apply_update(|_, p| {
        m1.push(Matrix::zeros(p.rows(), p.cols()));
        Ok(())
    })?;
    let mut m2 = m1.clone();
    let mut rng = Rng::new(config.seed);
    let mut sampler = BatchSampler::new(data.len());
    let mut curve = Vec::with_capacity(config.steps);
    let n = set.len();
    for step in 1..=config.steps {
        let ia = rng.index(n);
        let mut ib = rng.index(n - 1);
        if ib >= ia {
            ib += 1;
        }
        let t = if config.midpoint_only { 0.5 } else { rng.uniform() };
        let idx = sampler.next(config.batch, &mut rng);
        let x = data.features().select_cols(&idx);
        let labels: Arc<[usize]> = idx.iter().map(|&i| data.labels()[i]).collect();

        let mut tape = Tape::new();
        let params = record_params(&mut tape, &f);
        let loss = record_path_loss(
            &mut tape,
            &f,
            &params,
            &set.members[ia],
            &set.members[ib],
            k,
            t,
            &x,
            labels,
        )?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                loss: value,
            });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let flat: Vec<Var> = params.iter().flatten().copied().collect();
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        f.apply_update(|i, p| {
            let g = grads.wrt(flat[i]);
            let (m, v) = (&mut m1[i], &mut m2[i]);
            for (((pv, gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= config.lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
            Ok(())
        })?;
    }
    let window = curve.len().min(10);
    let mean = |s: &[f64]| {
        if s.is_empty() {
            f64::NAN
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    f.origin = FlowOrigin::Bijection;
    Ok(FlowFit {
        initial_loss: mean(&curve[..window]),
        final_loss: mean(&curve[curve.len() - window..]),
        flow: f,
        curve,
    })
}

/// ν-connection with a trained flow. The flow holds no per-pair state, so
/// one flow serves every pair from the pipeline it was trained on.
pub fn connect_with_flow(
    a: &WeightVector,
    b: &WeightVector,
    k: usize,
    flow: Arc<CouplingFlow>,
) -> Result<ConnectionPath> {
    let name = flow.origin.method_name();
    nu_connect_named(a, b, k, flow, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connect_direct::{arc_connect, CenterEstimate, CenterSource};
    use crate::dataio::{gen_synthetic, SyntheticSpec};
    use crate::netcore::{cross_entropy, forward, init_weights, MlpSpec};

    fn small(dim: usize, layers: usize, hidden: usize, seed: u64) -> CouplingFlow {
        CouplingFlow::new(
            dim,
            &FlowConfig {
                layers,
                hidden,
                scale_bound: 2.0,
                seed,
            },
        )
        .unwrap()
    }

    /// Perturbs every subnet parameter so scales and shifts are clearly
    /// non-zero while the flow stays well conditioned.
    fn randomized(dim: usize, seed: u64) -> CouplingFlow {
        let mut f = small(dim, 6, 16, seed);
        let mut rng = Rng::new(seed + 100);
        let out_std = 0.5 / (16f64).sqrt();
        for l in f.layers_mut() {
            for v in l.w3.as_mut_slice() {
                *v = out_std * rng.normal();
            }
            for b in [&mut l.b1, &mut l.b2, &mut l.b3] {
                for v in b.as_mut_slice() {
                    *v = 0.1 * rng.normal();
                }
            }
        }
        f.set_whitening(Whitening {
            mean: (0..dim).map(|_| rng.normal()).collect(),
            std: (0..dim).map(|_| 0.5 + rng.uniform()).collect(),
        })
        .unwrap();
        f
    }

    /// `ln |det J|` by Gaussian elimination with partial pivoting.
    fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut acc = 0.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            acc += a[c][c].abs().ln();
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for j in c..n {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
        acc
    }

    #[test]
    fn zero_initialized_flow_is_identity() {
        let f = small(5, 6, 8, 1);
        let x = sample_gaussian(&mut Rng::new(2), 7, 5, 0.0, 3.0);
        let (y, ld) = f.forward(&x).unwrap();
        assert_eq!(y, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        assert_eq!(f.inverse(&x).unwrap(), x);
    }

    #[test]
    fn masks_alternate_and_cover_every_coordinate() {
        let f = small(5, 2, 4, 1);
        let (m0, m1) = (&f.layers()[0].mask, &f.layers()[1].mask);
        assert!(m0.iter().zip(m1).all(|(a, b)| a != b));
    }

    #[test]
    fn round_trip_is_exact_to_1e8() {
        for dim in [4, 16] {
            let f = randomized(dim, dim as u64);
            let x = sample_gaussian(&mut Rng::new(3), 1000, dim, 0.0, 2.0);
            let (y, _) = f.forward(&x).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() > 0.1);
            let back = f.inverse(&y).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err < 1e-8, "dim {dim}: {err}, |y| {}", y.max_abs());
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for seed in 0..5 {
            let f = randomized(4, seed);
            let x = sample_gaussian(&mut Rng::new(seed + 9), 3, 4, 0.0, 1.0);
            let (_, ld) = f.forward(&x).unwrap();
            let h = 1e-6;
            for i in 0..x.rows() {
                let mut jac = vec![vec![0.0; 4]; 4];
                for c in 0..4 {
                    let bump = |d: f64| {
                        let mut p = Matrix::row_vector(x.row(i));
                        p.set(0, c, p.get(0, c) + d);
                        f.forward(&p).unwrap().0
                    };
                    let (up, dn) = (bump(h), bump(-h));
                    for (r, row) in jac.iter_mut().enumerate() {
                        row[c] = (up.get(0, r) - dn.get(0, r)) / (2.0 * h);
                    }
                }
                let fd = log_abs_det(jac);
                assert!((fd - ld[i]).abs() < 1e-5, "{fd} vs {}", ld[i]);
            }
        }
    }

    #[test]
    fn constant_log2_scale_is_halved_by_the_inverse() {
        let mut f = small(4, 1, 3, 0);
        let target = 2f64.ln();
        let raw = (target / f.scale_bound()).atanh();
        for j in 0..4 {
            f.layers_mut()[0].b3.set(0, j, raw);
        }
        let y = Matrix::from_rows(&[[1.0, 2.0, 8.0, -6.0]]).unwrap();
        let x = f.inverse(&y).unwrap();
        let mask = &f.layers()[0].mask;
        for j in 0..4 {
            let want = if mask[j] { y.get(0, j) } else { y.get(0, j) / 2.0 };
            assert!((x.get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_nll_on_standard_normal_is_the_entropy() {
        let d = 4;
        let f = small(d, 6, 8, 0);
        let x = sample_gaussian(&mut Rng::new(4), 20000, d, 0.0, 1.0);
        let want = 0.5 * d as f64 * (LN_2PI + 1.0);
        let got = f.nll(&x).unwrap();
        assert!((got - want).abs() < 0.01 * want, "{got} vs {want}");
    }

    #[test]
    fn nll_via_logdet_matches_nll_via_jacobian() {
        let f = randomized(3, 7);
        let x = sample_gaussian(&mut Rng::new(8), 4, 3, 0.0, 1.0);
        let via_logdet = f.nll(&x).unwrap();
        let h = 1e-6;
        let mut total = 0.0;
        for i in 0..x.rows() {
            let p = Matrix::row_vector(x.row(i));
            let y = f.forward(&p).unwrap().0;
            let mut jac = vec![vec![0.0; 3]; 3];
            for c in 0..3 {
                let mut up = p.clone();
                up.set(0, c, up.get(0, c) + h);
                let mut dn = p.clone();
                dn.set(0, c, dn.get(0, c) - h);
                let (u, d) = (f.forward(&up).unwrap().0, f.forward(&dn).unwrap().0);
                for (r, row) in jac.iter_mut().enumerate() {
                    row[c] = (u.get(0, r) - d.get(0, r)) / (2.0 * h);
                }
            }
            let sq: f64 = y.as_slice().iter().map(|v| v * v).sum();
            total += 0.5 * sq + 1.5 * LN_2PI - log_abs_det(jac);
        }
        assert!((total / 4.0 - via_logdet).abs() < 1e-4);
    }

    #[test]
    fn tape_forward_and_inverse_match_plain() {
        let f = randomized(5, 3);
        let x = sample_gaussian(&mut Rng::new(5), 6, 5, 0.0, 1.0);
        let mut tape = Tape::new();
        let params = record_params(&mut tape, &f);
        let xv = tape.constant(x.clone());
        let (y, ld) = record_forward(&mut tape, &f, &params, xv).unwrap();
        let (py, pld) = f.forward(&x).unwrap();
        assert!(tape.value(y).max_abs_diff(&py).unwrap() < 1e-12);
        let want: f64 = pld.iter().sum::<f64>() - 6.0 * f.whitening().log_det();
        assert!((tape.scalar(ld) - want).abs() < 1e-10);
        let back = record_inverse(&mut tape, &f, &params, y).unwrap();
        let err = tape.value(back).max_abs_diff(&x).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut f = randomized(3, 11);
        for l in f.layers_mut() {
            l.w3.map_inplace(|v| 0.3 * v);
        }
        let x = sample_gaussian(&mut Rng::new(12), 5, 3, 0.0, 1.0);
        let mut tape = Tape::new();
        let params = record_params(&mut tape, &f);
        let loss = record_nll(&mut tape, &f, &params, &x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (l, p) in params.iter().enumerate() {
            for (which, &v) in p.iter().enumerate() {
                let g = grads.wrt(v);
                for idx in (0..g.len()).step_by(7) {
                    let bump = |d: f64| {
                        let mut ff = f.clone();
                        ff.layers_mut()[l].params_mut()[which].as_mut_slice()[idx] += d;
                        ff.nll(&x).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = g.as_slice()[idx];
                    assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "{a} vs {fd}");
                }
            }
        }
    }

    fn shifted_gaussian(n: usize, seed: u64) -> Matrix {
        sample_gaussian(&mut Rng::new(seed), n, 2, 3.0, 1.0)
    }

    #[test]
    fn nll_training_maps_shifted_gaussian_to_the_origin() {
        let x = shifted_gaussian(2000, 21);
        let f = small(2, 6, 64, 5);
        let cfg = FlowTrainConfig {
            steps: 500,
            batch: 100,
            seed: 6,
            ..FlowTrainConfig::default()
        };
        let fit = train_flow_nll(&f, &x, &cfg).unwrap();
        assert!(fit.final_loss < fit.initial_loss);
        assert_eq!(fit.flow.origin(), FlowOrigin::Nll);
        let z = fit.flow.forward(&x).unwrap().0;
        for m in z.column_means() {
            assert!(m.abs() < 0.2, "{m}");
        }
    }

    #[test]
    fn nll_training_without_whitening_still_descends() {
        let x = shifted_gaussian(2000, 21);
        let f = small(2, 6, 64, 5);
        let cfg = FlowTrainConfig {
            lr: 1e-4,
            steps: 300,
            batch: 100,
            seed: 6,
            whiten: false,
        };
        let fit = train_flow_nll(&f, &x, &cfg).unwrap();
        assert_eq!(fit.flow.whitening(), &Whitening::identity(2));
        assert!(fit.final_loss < fit.initial_loss - 1.0);
    }

    #[test]
    fn nll_training_with_whitening_is_deterministic() {
        let x = shifted_gaussian(500, 22);
        let f = small(2, 2, 8, 5);
        let cfg = FlowTrainConfig {
            steps: 50,
            ..FlowTrainConfig::default()
        };
        let a = train_flow_nll(&f, &x, &cfg).unwrap();
        let b = train_flow_nll(&f, &x, &cfg).unwrap();
        assert_eq!(a.flow, b.flow);
        assert!(a.final_loss < a.initial_loss);
        assert!(train_flow_nll(&f, &Matrix::zeros(0, 2), &cfg).is_err());
    }

    fn blob_models(count: usize, seed: u64) -> (Dataset, ModelSet) {
        let data = gen_synthetic(&SyntheticSpec {
            classes: 2,
            dim: 2,
            samples_per_class: 100,
            std: 1.5,
            center_radius: 2.0,
            seed,
        })
        .unwrap();
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let seeds: Vec<u64> = (0..count as u64).map(|i| seed * 100 + i).collect();
        let members = seeds
            .iter()
            .map(|&s| {
                let cfg = crate::netcore::TrainConfig {
                    lr: 0.05,
                    batch: 16,
                    epochs: 5,
                    seed: s,
                };
                crate::netcore::train_sgd(&spec, &data, &cfg).unwrap()
            })
            .collect();
        (data, ModelSet::new(members, seeds).unwrap())
    }

    #[test]
    fn bijection_with_zero_rate_keeps_the_flow() {
        let (data, set) = blob_models(3, 1);
        let mut f = small(1 + 2 + 2, 2, 8, 0);
        f.fit_whitening(&set.particles(1).unwrap()).unwrap();
        let before = set.clone();
        let cfg = BijectionConfig {
            lr: 0.0,
            steps: 5,
            batch: 32,
            ..BijectionConfig::default()
        };
        let fit = train_bijection(&f, &set, 1, &data, &cfg).unwrap();
        assert_eq!(fit.flow.layers(), f.layers());
        assert_eq!(fit.flow.whitening(), f.whitening());
        assert_eq!(set, before);
    }

    #[test]
    fn bijection_needs_two_models_and_matching_dims() {
        let (data, set) = blob_models(2, 2);
        let f = small(5, 2, 8, 0);
        let one = ModelSet::new(vec![set.members()[0].clone()], vec![0]).unwrap();
        assert!(train_bijection(&f, &one, 1, &data, &BijectionConfig::default()).is_err());
        assert!(train_bijection(&small(4, 2, 8, 0), &set, 1, &data, &BijectionConfig::default()).is_err());
    }

    #[test]
    fn bijection_path_loss_matches_plain_evaluation() {
        let (data, set) = blob_models(2, 3);
        let f = randomized(5, 4);
        let (a, b) = (&set.members()[0], &set.members()[1]);
        let mut tape = Tape::new();
        let params = record_params(&mut tape, &f);
        let labels: Arc<[usize]> = data.labels().into();
        let loss = record_path_loss(&mut tape, &f, &params, a, b, 1, 0.3, data.features(), labels).unwrap();
        let flow = Arc::new(f);
        let path = connect_with_flow(a, b, 1, flow).unwrap();
        let w = path.eval_point(0, 0.3).unwrap();
        let spec = w.spec();
        let plain = cross_entropy(&forward(&spec, &w, data.features()).unwrap(), data.labels()).unwrap();
        assert!(
            (tape.scalar(loss) - plain).abs() < 1e-9 * plain.max(1.0),
            "{} vs {plain}",
            tape.scalar(loss)
        );
    }

    #[test]
    fn bijection_training_lowers_the_training_midpoint_loss() {
        let (data, set) = blob_models(4, 5);
        let mut f = small(5, 4, 16, 0);
        f.fit_whitening(&set.particles(1).unwrap()).unwrap();
        let cfg = BijectionConfig {
            lr: 3e-3,
            steps: 150,
            batch: 200,
            seed: 1,
            midpoint_only: true,
        };
        let fit = train_bijection(&f, &set, 1, &data, &cfg).unwrap();
        assert_eq!(fit.flow.origin(), FlowOrigin::Bijection);
        assert!(
            fit.final_loss < fit.initial_loss,
            "{} vs {}",
            fit.final_loss,
            fit.initial_loss
        );
        let again = train_bijection(&f, &set, 1, &data, &cfg).unwrap();
        assert_eq!(again.flow, fit.flow);
    }

    #[test]
    fn swapped_endpoints_traverse_the_reversed_path() {
        let (_, set) = blob_models(2, 6);
        let (a, b) = (&set.members()[0], &set.members()[1]);
        let flow = Arc::new(randomized(5, 8));
        let ab = connect_with_flow(a, b, 1, flow.clone()).unwrap();
        let ba = connect_with_flow(b, a, 1, flow).unwrap();
        for t in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            let d = ab
                .eval_point(0, t)
                .unwrap()
                .max_abs_diff(&ba.eval_point(0, 1.0 - t).unwrap())
                .unwrap();
            assert!(d < 1e-9, "t={t}: {d}");
        }
        assert_eq!(ab.start().unwrap(), *a);
        assert_eq!(ab.end().unwrap(), *b);
        assert_eq!(ab.method(), "rnvp");
    }

    #[test]
    fn whitened_identity_flow_is_the_arc_around_the_whitening_mean() {
        let spec = MlpSpec::new(vec![3, 6, 2]).unwrap();
        let mut rng = Rng::new(9);
        let a = init_weights(&spec, &mut rng);
        let b = init_weights(&spec, &mut rng);
        let mut f = small(1 + 3 + 2, 6, 8, 0);
        let pa = particle_matrix(&a, 1).unwrap();
        let pb = particle_matrix(&b, 1).unwrap();
        f.fit_whitening(&Matrix::vstack(&[&pa, &pb]).unwrap()).unwrap();
        let center = CenterEstimate {
            mu: f.whitening().mean.clone(),
            source: CenterSource::EndpointParticles,
        };
        let arc = arc_connect(&a, &b, 1, &center).unwrap();
        let nu = connect_with_flow(&a, &b, 1, Arc::new(f)).unwrap();
        for t in [0.2, 0.5, 0.8] {
            let d = arc
                .eval_point(0, t)
                .unwrap()
                .max_abs_diff(&nu.eval_point(0, t).unwrap())
                .unwrap();
            assert!(d < 1e-12, "{d}");
        }
    }

    #[test]
    fn flow_checkpoint_round_trip_is_exact() {
        let mut f = randomized(4, 13);
        f.origin = FlowOrigin::Nll;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.json");
        save_flow(&f, &path).unwrap();
        let back = load_flow(&path).unwrap();
        assert_eq!(back, f);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\":1") && text.contains("\"whitening\""));
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_flow(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_dimension_and_bad_config_are_errors() {
        let f = small(4, 2, 4, 0);
        assert!(f.forward(&Matrix::zeros(2, 3)).is_err());
        assert!(f.inverse(&Matrix::zeros(2, 5)).is_err());
        assert!(CouplingFlow::new(0, &FlowConfig::default()).is_err());
        let bad = FlowConfig {
            scale_bound: 0.0,
            ..FlowConfig::default()
        };
        assert!(CouplingFlow::new(3, &bad).is_err());
    }
}
