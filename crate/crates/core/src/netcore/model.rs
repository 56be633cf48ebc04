use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{gemm, Matrix};

/// Layer sizes `(d₀, d₁, …, d_L)` of a dense network with ReLU hidden
/// layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(format!(
                "a network needs at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.depth()]
    }

    /// Shape of `W_k` (1-based), bias column included.
    pub fn layer_shape(&self, k: usize) -> (usize, usize) {
        (self.layer_sizes[k], self.layer_sizes[k - 1] + 1)
    }
}

/// Weights of every layer. Layer `k` is `d_k × (d_{k−1} + 1)`; its last
/// column is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    layers: Vec<Matrix>,
}

impl WeightVector {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a weight vector needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() + 1 {
                return Err(Error::shape(
                    format!("layer {}", k + 2),
                    format!(
                        "{} columns but layer {} has {} outputs",
                        pair[1].cols(),
                        k + 1,
                        pair[0].rows()
                    ),
                ));
            }
        }
        if let Some((k, m)) = layers.iter().enumerate().find(|(_, m)| m.cols() == 0) {
            return Err(Error::shape(
                format!("layer {}", k + 1),
                format!("{m:?} has no bias column"),
            ));
        }
        Ok(WeightVector { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (1..=spec.depth())
            .map(|k| {
                let (r, c) = spec.layer_shape(k);
                Matrix::zeros(r, c)
            })
            .collect();
        WeightVector { layers }
    }

    /// Layers in order, `layers()[k-1] = W_k`.
    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.layers[0].cols() - 1];
        sizes.extend(self.layers.iter().map(Matrix::rows));
        MlpSpec { layer_sizes: sizes }
    }

    pub fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        if self.depth() != spec.depth() {
            return Err(Error::shape(
                "weights",
                format!("{} layers for an architecture with {}", self.depth(), spec.depth()),
            ));
        }
        for (k, m) in self.layers.iter().enumerate() {
            let want = spec.layer_shape(k + 1);
            if m.shape() != want {
                return Err(Error::shape(
                    format!("layer {}", k + 1),
                    format!("{}x{}, expected {}x{}", m.rows(), m.cols(), want.0, want.1),
                ));
            }
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &WeightVector) -> Result<()> {
        self.check_spec(&other.spec())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }

    /// `(1 − t)·self + t·other`, layer by layer.
    pub fn lerp(&self, other: &WeightVector, t: f64) -> Result<WeightVector> {
        self.same_architecture(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.lerp(b, t))
            .collect::<Result<_>>()?;
        Ok(WeightVector { layers })
    }

    pub fn max_abs_diff(&self, other: &WeightVector) -> Result<f64> {
        self.same_architecture(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    /// Euclidean norm of the concatenated parameters.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Copy with layer `k` (1-based) replaced.
    pub fn with_layer(&self, k: usize, m: Matrix) -> Result<WeightVector> {
        let old = self
            .layers
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("layer {k} out of range 1..={}", self.depth())))?;
        if old.shape() != m.shape() {
            return Err(Error::shape(
                format!("layer {k}"),
                format!("{}x{} replacing {}x{}", m.rows(), m.cols(), old.rows(), old.cols()),
            ));
        }
        let mut layers = self.layers.clone();
        layers[k - 1] = m;
        Ok(WeightVector { layers })
    }
}

/// Features `d₀ × N` (one column per sample) and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.cols() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} samples but {} labels", features.cols(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_cols(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministic subsample of at most `cap` samples taken at evenly
    /// spaced positions `⌊i·N/cap⌋`.
    pub fn stride_subsample(&self, cap: usize) -> Dataset {
        let n = self.len();
        if cap >= n {
            return self.clone();
        }
        let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// `W [x; 1]` without materializing the augmented input.
pub(crate) fn affine(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    let d = x.rows();
    if w.cols() != d + 1 {
        return Err(Error::shape(
            "affine",
            format!("{}x{} weights on {d}-dimensional input", w.rows(), w.cols()),
        ));
    }
    let mut z = if d == 0 {
        Matrix::zeros(w.rows(), x.cols())
    } else {
        gemm(&w.slice_cols(0, d)?, false, x, false)?
    };
    for i in 0..z.rows() {
        let b = w.get(i, d);
        z.row_mut(i).iter_mut().for_each(|v| *v += b);
    }
    Ok(z)
}

/// Hidden activations `X₁ … X_{L−1}` and output logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Input to layer `k + 1`, i.e. `X_k`; `X₀` is the network input.
    pub fn layer_input<'a>(&'a self, x: &'a Matrix, k: usize) -> &'a Matrix {
        if k == 0 {
            x
        } else {
            &self.hidden[k - 1]
        }
    }
}

fn check_input(w: &WeightVector, x: &Matrix) -> Result<()> {
    let d0 = w.layers[0].cols() - 1;
    if x.rows() != d0 {
        return Err(Error::shape(
            "layer 1",
            format!("input has {} features, weights expect {d0}", x.rows()),
        ));
    }
    Ok(())
}

/// Forward pass keeping every hidden activation.
pub fn forward_trace(w: &WeightVector, x: &Matrix) -> Result<ForwardTrace> {
    check_input(w, x)?;
    let mut hidden = Vec::with_capacity(w.depth() - 1);
    let last = w.depth() - 1;
    for (k, layer) in w.layers.iter().enumerate().take(last) {
        let input = if k == 0 { x } else { &hidden[k - 1] };
        let z = affine(layer, input)?;
        hidden.push(relu(&z));
    }
    let input = if last == 0 { x } else { &hidden[last - 1] };
    let logits = affine(&w.layers[last], input)?;
    Ok(ForwardTrace { hidden, logits })
}

/// Logits `W_L φ(… φ(W₁ [x; 1]) …)`, one column per sample.
pub fn forward(spec: &MlpSpec, w: &WeightVector, x: &Matrix) -> Result<Matrix> {
    w.check_spec(spec)?;
    check_input(w, x)?;
    let mut h: Option<Matrix> = None;
    for (k, layer) in w.layers.iter().enumerate() {
        let z = affine(layer, h.as_ref().unwrap_or(x))?;
        h = Some(if k + 1 == w.depth() { z } else { relu(&z) });
    }
    Ok(h.expect("at least one layer"))
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() < 2 {
        return Err(Error::invalid(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.rows()
        )));
    }
    if logits.cols() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit columns for {} labels", logits.cols(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.rows()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            logits.rows()
        )));
    }
    Ok(())
}

/// `−log softmax(z)[label]` for every column.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let (r, n) = logits.shape();
    let mut col = vec![0.0; r];
    let mut out = Vec::with_capacity(n);
    for (j, &label) in labels.iter().enumerate() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = logits.get(i, j);
        }
        let (arg, max) = col.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) },
        );
        // log Σ exp(z − max) = log1p(Σ_{i≠arg} exp(z_i − max)) keeps
        // saturated losses accurate far below machine epsilon
        let rest: f64 = col
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        out.push((max - col[label]) + rest.ln_1p());
    }
    Ok(out)
}

/// Mean cross-entropy of column-wise logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let losses = per_sample_cross_entropy(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Fraction of columns whose first maximal logit is the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.cols() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} logit columns for {} labels", logits.cols(), labels.len()),
        ));
    }
    let mut best = vec![(0usize, f64::NEG_INFINITY); logits.cols()];
    for i in 0..logits.rows() {
        for (b, &v) in best.iter_mut().zip(logits.row(i)) {
            if v > b.1 {
                *b = (i, v);
            }
        }
    }
    let hits = best.iter().zip(labels).filter(|((i, _), &l)| *i == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{sample_gaussian, Rng};
    use crate::netcore::init_weights;

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = MlpSpec::new(vec![3, 5, 4]).unwrap();
        let w = WeightVector::zeros(&spec);
        let x = sample_gaussian(&mut Rng::new(1), 3, 7, 0.0, 1.0);
        assert_eq!(forward(&spec, &w, &x).unwrap(), Matrix::zeros(4, 7));
    }

    #[test]
    fn hand_computed_one_hidden_net() {
        let spec = MlpSpec::new(vec![1, 1, 1]).unwrap();
        let w = WeightVector::new(vec![
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[[2.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[3.0]]).unwrap();
        assert_eq!(forward(&spec, &w, &x).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn forward_errors_name_the_layer() {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let w = WeightVector::zeros(&spec);
        let err = forward(&spec, &w, &Matrix::zeros(5, 1)).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        let other = MlpSpec::new(vec![2, 4, 2]).unwrap();
        let err = forward(&other, &w, &Matrix::zeros(2, 1)).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn inconsistent_layers_are_rejected() {
        let r = WeightVector::new(vec![Matrix::zeros(3, 3), Matrix::zeros(2, 3)]);
        assert!(r.is_err());
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1]).is_err());
    }

    #[test]
    fn trace_matches_forward() {
        let spec = MlpSpec::new(vec![4, 6, 5, 3]).unwrap();
        let w = init_weights(&spec, &mut Rng::new(2));
        let x = sample_gaussian(&mut Rng::new(3), 4, 9, 0.0, 1.0);
        let trace = forward_trace(&w, &x).unwrap();
        assert_eq!(trace.hidden.len(), 2);
        assert_eq!(trace.logits, forward(&spec, &w, &x).unwrap());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let z = Matrix::zeros(10, 4);
        let l = cross_entropy(&z, &[0, 3, 9, 2]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_gives_tiny_loss() {
        let mut z = Matrix::zeros(10, 1);
        z.set(4, 0, 50.0);
        let l = cross_entropy(&z, &[4]).unwrap();
        assert!(l < 1e-20 && l > 0.0, "{l}");
    }

    #[test]
    fn bad_labels_are_rejected() {
        let z = Matrix::zeros(3, 2);
        assert!(cross_entropy(&z, &[0, 3]).is_err());
        assert!(cross_entropy(&Matrix::zeros(1, 1), &[0]).is_err());
        assert!(cross_entropy(&z, &[0]).is_err());
    }

    #[test]
    fn cross_entropy_is_midpoint_convex() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let a = sample_gaussian(&mut rng, 5, 8, 0.0, 3.0);
            let b = sample_gaussian(&mut rng, 5, 8, 0.0, 3.0);
            let labels: Vec<usize> = (0..8).map(|_| rng.index(5)).collect();
            let mid = a.lerp(&b, 0.5).unwrap();
            let lm = cross_entropy(&mid, &labels).unwrap();
            let la = cross_entropy(&a, &labels).unwrap();
            let lb = cross_entropy(&b, &labels).unwrap();
            assert!(lm <= 0.5 * (la + lb) + 1e-12);
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.2], [0.0, 2.0, 0.1]]).unwrap();
        assert!((accuracy(&z, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stride_subsample_is_deterministic_and_capped() {
        let x = Matrix::from_fn(1, 10, |_, j| j as f64);
        let d = Dataset::new(x, (0..10).map(|i| i % 2).collect(), 2).unwrap();
        let s = d.stride_subsample(4);
        assert_eq!(s.features().as_slice(), &[0.0, 2.0, 5.0, 7.0]);
        assert_eq!(d.stride_subsample(20).len(), 10);
    }
}
