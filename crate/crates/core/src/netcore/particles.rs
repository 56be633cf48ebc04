//! Per-neuron view of a hidden layer. Neuron `i` of hidden layer `k` is the
//! particle `θ = (b, l, c)`: its bias, its incoming weights (row `i` of `W_k`
//! without the bias) and its outgoing weights (column `i` of `W_{k+1}`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub bias: f64,
    pub incoming: Vec<f64>,
    pub outgoing: Vec<f64>,
}

impl Particle {
    /// `D = 1 + fan-in + fan-out`.
    pub fn dim(&self) -> usize {
        1 + self.incoming.len() + self.outgoing.len()
    }

    /// Flat coordinates `(b, l, c)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.bias);
        v.extend_from_slice(&self.incoming);
        v.extend_from_slice(&self.outgoing);
        v
    }

    pub fn from_slice(v: &[f64], fan_in: usize) -> Result<Particle> {
        if v.len() < 1 + fan_in {
            return Err(Error::shape(
                "particle",
                format!("{} coordinates cannot hold fan-in {fan_in}", v.len()),
            ));
        }
        Ok(Particle {
            bias: v[0],
            incoming: v[1..1 + fan_in].to_vec(),
            outgoing: v[1 + fan_in..].to_vec(),
        })
    }
}

fn check_hidden(w: &WeightVector, k: usize) -> Result<()> {
    if k == 0 || k >= w.depth() {
        return Err(Error::invalid(format!(
            "hidden layer {k} out of range 1..={}",
            w.depth().saturating_sub(1)
        )));
    }
    Ok(())
}

/// Particle dimension at hidden layer `k`.
pub fn particle_dim(w: &WeightVector, k: usize) -> Result<usize> {
    check_hidden(w, k)?;
    let l = &w.layers()[k - 1];
    Ok(l.cols() + w.layers()[k].rows())
}

/// All particles of hidden layer `k` as the rows of an `n × D` matrix.
pub fn particle_matrix(w: &WeightVector, k: usize) -> Result<Matrix> {
    check_hidden(w, k)?;
    let (wk, wn) = (&w.layers()[k - 1], &w.layers()[k]);
    let fan_in = wk.cols() - 1;
    let fan_out = wn.rows();
    let mut p = Matrix::zeros(wk.rows(), 1 + fan_in + fan_out);
    for i in 0..wk.rows() {
        let row = wk.row(i);
        let dst = p.row_mut(i);
        dst[0] = row[fan_in];
        dst[1..=fan_in].copy_from_slice(&row[..fan_in]);
        for o in 0..fan_out {
            dst[1 + fan_in + o] = wn.get(o, i);
        }
    }
    Ok(p)
}

/// Inverse of [`particle_matrix`]: writes the particles into a copy of
/// `template`, keeping every other parameter (including the bias of layer
/// `k + 1`) from the template.
pub fn from_particle_matrix(template: &WeightVector, k: usize, p: &Matrix) -> Result<WeightVector> {
    check_hidden(template, k)?;
    let (wk, wn) = (&template.layers()[k - 1], &template.layers()[k]);
    let fan_in = wk.cols() - 1;
    let fan_out = wn.rows();
    if p.rows() == 0 {
        return Err(Error::invalid("empty particle set"));
    }
    if p.rows() != wk.rows() || p.cols() != 1 + fan_in + fan_out {
        return Err(Error::shape(
            format!("particles of hidden layer {k}"),
            format!(
                "{}x{}, expected {}x{}",
                p.rows(),
                p.cols(),
                wk.rows(),
                1 + fan_in + fan_out
            ),
        ));
    }
    let mut new_k = wk.clone();
    let mut new_n = wn.clone();
    for i in 0..p.rows() {
        let src = p.row(i);
        let row = new_k.row_mut(i);
        row[fan_in] = src[0];
        row[..fan_in].copy_from_slice(&src[1..=fan_in]);
        for o in 0..fan_out {
            new_n.set(o, i, src[1 + fan_in + o]);
        }
    }
    let mut layers = template.layers().to_vec();
    layers[k - 1] = new_k;
    layers[k] = new_n;
    WeightVector::new(layers)
}

pub fn to_particles(w: &WeightVector, k: usize) -> Result<Vec<Particle>> {
    let p = particle_matrix(w, k)?;
    let fan_in = w.layers()[k - 1].cols() - 1;
    p.row_iter().map(|r| Particle::from_slice(r, fan_in)).collect()
}

pub fn from_particles(particles: &[Particle], template: &WeightVector, k: usize) -> Result<WeightVector> {
    if particles.is_empty() {
        return Err(Error::invalid("empty particle set"));
    }
    let d = particle_dim(template, k)?;
    if let Some(bad) = particles.iter().find(|p| p.dim() != d) {
        return Err(Error::shape(
            "particle",
            format!("dimension {} at hidden layer {k}, expected {d}", bad.dim()),
        ));
    }
    let fan_in = template.layers()[k - 1].cols() - 1;
    if let Some(bad) = particles.iter().find(|p| p.incoming.len() != fan_in) {
        return Err(Error::shape(
            "particle",
            format!("fan-in {} at hidden layer {k}, expected {fan_in}", bad.incoming.len()),
        ));
    }
    let rows: Vec<Vec<f64>> = particles.iter().map(Particle::to_vec).collect();
    from_particle_matrix(template, k, &Matrix::from_rows(&rows)?)
}

/// Reorders the neurons of hidden layer `k`: position `p` receives neuron
/// `order[p]`.
pub fn permute_hidden(w: &WeightVector, k: usize, order: &[usize]) -> Result<WeightVector> {
    check_hidden(w, k)?;
    let n = w.layers()[k - 1].rows();
    let mut seen = vec![false; n];
    if order.len() != n || !order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true)) {
        return Err(Error::invalid(format!("not a permutation of {n} neurons")));
    }
    let mut layers = w.layers().to_vec();
    layers[k - 1] = w.layers()[k - 1].select_rows(order);
    let next = &w.layers()[k];
    let mut cols: Vec<usize> = order.to_vec();
    cols.push(n);
    layers[k] = next.select_cols(&cols);
    WeightVector::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{sample_gaussian, Rng};
    use crate::netcore::{forward, init_weights, MlpSpec};
    use proptest::prelude::*;

    fn random_net(sizes: &[usize], seed: u64) -> (MlpSpec, WeightVector) {
        let spec = MlpSpec::new(sizes.to_vec()).unwrap();
        let mut rng = Rng::new(seed);
        let mut w = init_weights(&spec, &mut rng);
        // non-zero biases so the bias slot is exercised
        for m in w.layers_mut() {
            let c = m.cols() - 1;
            for i in 0..m.rows() {
                m.set(i, c, rng.normal());
            }
        }
        (spec, w)
    }

    #[test]
    fn mnist_sized_particles_have_dimension_795() {
        let spec = MlpSpec::new(vec![784, 16, 10]).unwrap();
        let w = init_weights(&spec, &mut Rng::new(1));
        let ps = to_particles(&w, 1).unwrap();
        assert_eq!(ps.len(), 16);
        assert!(ps.iter().all(|p| p.dim() == 795));
    }

    #[test]
    fn layout_is_bias_incoming_outgoing() {
        let w = WeightVector::new(vec![
            Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap(),
            Matrix::from_rows(&[[7.0, 8.0, 9.0]]).unwrap(),
        ])
        .unwrap();
        let ps = to_particles(&w, 1).unwrap();
        assert_eq!(ps[0].to_vec(), vec![3.0, 1.0, 2.0, 7.0]);
        assert_eq!(ps[1].to_vec(), vec![6.0, 4.0, 5.0, 8.0]);
    }

    #[test]
    fn round_trip_is_exact_in_every_hidden_layer() {
        let (_, w) = random_net(&[5, 7, 6, 3], 2);
        for k in 1..=2 {
            let ps = to_particles(&w, k).unwrap();
            assert_eq!(from_particles(&ps, &w, k).unwrap(), w);
        }
    }

    #[test]
    fn out_of_range_layer_and_bad_particles_are_errors() {
        let (_, w) = random_net(&[3, 4, 2], 3);
        assert!(to_particles(&w, 0).is_err());
        assert!(to_particles(&w, 2).is_err());
        assert!(from_particles(&[], &w, 1).is_err());
        let mut ps = to_particles(&w, 1).unwrap();
        ps[1].outgoing.push(0.0);
        assert!(from_particles(&ps, &w, 1).is_err());
    }

    #[test]
    fn particle_permutation_leaves_logits_unchanged() {
        let (spec, w) = random_net(&[6, 9, 4], 4);
        let x = sample_gaussian(&mut Rng::new(5), 6, 20, 0.0, 1.0);
        let base = forward(&spec, &w, &x).unwrap();
        let mut ps = to_particles(&w, 1).unwrap();
        Rng::new(6).shuffle(&mut ps);
        let permuted = from_particles(&ps, &w, 1).unwrap();
        let out = forward(&spec, &permuted, &x).unwrap();
        assert!(out.max_abs_diff(&base).unwrap() < 1e-9);
    }

    #[test]
    fn permute_hidden_matches_particle_shuffle() {
        let (_, w) = random_net(&[3, 5, 2], 7);
        let order = vec![2, 0, 4, 1, 3];
        let a = permute_hidden(&w, 1, &order).unwrap();
        let p = particle_matrix(&w, 1).unwrap().select_rows(&order);
        let b = from_particle_matrix(&w, 1, &p).unwrap();
        assert_eq!(a, b);
        assert!(permute_hidden(&w, 1, &[0, 0, 1, 2, 3]).is_err());
    }

    proptest! {
        #[test]
        fn injected_particles_are_extracted_unchanged(seed in 0u64..1000, n in 1usize..6, fan_in in 1usize..5, fan_out in 1usize..4) {
            let (_, w) = random_net(&[fan_in, n, fan_out], seed);
            let p = sample_gaussian(&mut Rng::new(seed + 1), n, 1 + fan_in + fan_out, 0.0, 2.0);
            let injected = from_particle_matrix(&w, 1, &p).unwrap();
            prop_assert_eq!(particle_matrix(&injected, 1).unwrap(), p);
        }
    }
}
