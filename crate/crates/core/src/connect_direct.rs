//! Closed-form connections: the straight line, the arc around a common
//! center, and the arc taken in the coordinates of an invertible map `ν`.
//!
//! For particles `X`, `Y` drawn from the same centered Gaussian, the arc
//! `μ + cos(πt/2)(X − μ) + sin(πt/2)(Y − μ)` has that same distribution for
//! every `t`, while the line shrinks its covariance by `(1 − t)² + t²`.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::{from_particle_matrix, particle_matrix, WeightVector};
use crate::paths::{ConnectionPath, LegMeta, PathLeg};

/// `(1 − t)x + ty`.
pub fn linear_point(x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// `μ + cos(πt/2)(x − μ) + sin(πt/2)(y − μ)`.
pub fn arc_point(x: &[f64], y: &[f64], mu: &[f64], t: f64) -> Vec<f64> {
    let (c, s) = arc_coefficients(t);
    x.iter()
        .zip(y)
        .zip(mu)
        .map(|((a, b), m)| m + c * (a - m) + s * (b - m))
        .collect()
}

/// `(cos(πt/2), sin(πt/2))`, exact at the endpoints.
pub fn arc_coefficients(t: f64) -> (f64, f64) {
    if t == 0.0 {
        (1.0, 0.0)
    } else if t == 1.0 {
        (0.0, 1.0)
    } else {
        let a = FRAC_PI_2 * t;
        (a.cos(), a.sin())
    }
}

fn all_layers(w: &WeightVector) -> Vec<usize> {
    (1..=w.depth()).collect()
}

/// Straight segment between the two weight vectors.
pub fn linear_connect(a: &WeightVector, b: &WeightVector) -> Result<ConnectionPath> {
    a.same_architecture(b)?;
    let leg = PathLeg::linear(
        Arc::new(a.clone()),
        Arc::new(b.clone()),
        LegMeta::new("linear", all_layers(a), 0),
    )?;
    ConnectionPath::new("linear", vec![leg])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterSource {
    EndpointParticles,
    ModelSet,
    Zero,
}

/// Common center `μ` of the particle distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterEstimate {
    pub mu: Vec<f64>,
    pub source: CenterSource,
}

impl CenterEstimate {
    pub fn zero(dim: usize) -> Self {
        CenterEstimate {
            mu: vec![0.0; dim],
            source: CenterSource::Zero,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Coordinate-wise mean over every row of every supplied particle matrix.
pub fn estimate_center(sets: &[&Matrix], source: CenterSource) -> Result<CenterEstimate> {
    let dim = sets
        .first()
        .map(|m| m.cols())
        .ok_or_else(|| Error::invalid("no particle sets given"))?;
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for m in sets {
        if m.cols() != dim {
            return Err(Error::shape(
                "estimate_center",
                format!("particles of dimension {} and {dim}", m.cols()),
            ));
        }
        for r in m.row_iter() {
            sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        count += m.rows();
    }
    if count == 0 {
        return Err(Error::invalid("no particles to average"));
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(CenterEstimate { mu: sum, source })
}

/// Applies the arc formula to corresponding rows.
pub fn arc_rows(x: &Matrix, y: &Matrix, mu: &[f64], t: f64) -> Result<Matrix> {
    x.expect_same_shape(y, "arc")?;
    if mu.len() != x.cols() {
        return Err(Error::shape(
            "arc center",
            format!("dimension {} for rows of length {}", mu.len(), x.cols()),
        ));
    }
    let (c, s) = arc_coefficients(t);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (xr, yr) = (x.row(i), y.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            let m = mu[j];
            *o = m + c * (xr[j] - m) + s * (yr[j] - m);
        }
    }
    Ok(out)
}

/// Default one-hidden center: mean over both endpoints' particles.
pub fn endpoint_center(a: &WeightVector, b: &WeightVector, k: usize) -> Result<CenterEstimate> {
    let (pa, pb) = (particle_matrix(a, k)?, particle_matrix(b, k)?);
    estimate_center(&[&pa, &pb], CenterSource::EndpointParticles)
}

/// Arc over the particles of hidden layer `k`. Parameters outside the
/// particles (the bias of layer `k + 1` and all other layers) move on a
/// straight line.
pub fn arc_connect(a: &WeightVector, b: &WeightVector, k: usize, center: &CenterEstimate) -> Result<ConnectionPath> {
    a.same_architecture(b)?;
    let pa = Arc::new(particle_matrix(a, k)?);
    let pb = Arc::new(particle_matrix(b, k)?);
    if center.dim() != pa.cols() {
        return Err(Error::shape(
            "arc center",
            format!("dimension {} for particles of dimension {}", center.dim(), pa.cols()),
        ));
    }
    let (wa, wb) = (Arc::new(a.clone()), Arc::new(b.clone()));
    let mu = center.mu.clone();
    let (sa, sb) = (wa.clone(), wb.clone());
    let eval = move |t: f64| {
        let p = arc_rows(&pa, &pb, &mu, t)?;
        from_particle_matrix(&sa.lerp(&sb, t)?, k, &p)
    };
    let leg = PathLeg::closed(wa, wb, Arc::new(eval), LegMeta::new("arc", all_layers(a), 0))?;
    ConnectionPath::new("arc", vec![leg])
}

/// Per-layer centers of the weight-matrix rows (bias entry included), each
/// the mean over both endpoints' rows.
pub fn row_centers(a: &WeightVector, b: &WeightVector) -> Result<Vec<CenterEstimate>> {
    a.same_architecture(b)?;
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(la, lb)| estimate_center(&[la, lb], CenterSource::EndpointParticles))
        .collect()
}

/// Arc applied to every weight-matrix row simultaneously, one center per
/// layer.
pub fn arc_connect_rows(a: &WeightVector, b: &WeightVector, centers: &[CenterEstimate]) -> Result<ConnectionPath> {
    a.same_architecture(b)?;
    if centers.len() != a.depth() {
        return Err(Error::shape(
            "arc centers",
            format!("{} centers for {} layers", centers.len(), a.depth()),
        ));
    }
    for (k, (c, l)) in centers.iter().zip(a.layers()).enumerate() {
        if c.dim() != l.cols() {
            return Err(Error::shape(
                format!("arc center of layer {}", k + 1),
                format!("dimension {} for rows of length {}", c.dim(), l.cols()),
            ));
        }
    }
    let (wa, wb) = (Arc::new(a.clone()), Arc::new(b.clone()));
    let mus: Vec<Vec<f64>> = centers.iter().map(|c| c.mu.clone()).collect();
    let (sa, sb) = (wa.clone(), wb.clone());
    let eval = move |t: f64| {
        let layers = sa
            .layers()
            .iter()
            .zip(sb.layers())
            .zip(&mus)
            .map(|((x, y), mu)| arc_rows(x, y, mu, t))
            .collect::<Result<Vec<_>>>()?;
        WeightVector::new(layers)
    };
    let leg = PathLeg::closed(wa, wb, Arc::new(eval), LegMeta::new("arc", all_layers(a), 0))?;
    ConnectionPath::new("arc", vec![leg])
}

/// Invertible map on particle space; batches hold one particle per row.
pub trait ParticleMap: Send + Sync {
    fn dim(&self) -> usize;
    fn forward(&self, x: &Matrix) -> Result<Matrix>;
    fn inverse(&self, y: &Matrix) -> Result<Matrix>;
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl ParticleMap for IdentityMap {
    fn dim(&self) -> usize {
        self.0
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
    fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        Ok(y.clone())
    }
}

/// `ν(x) = x − μ`.
#[derive(Debug, Clone)]
pub struct ShiftMap(pub Vec<f64>);

impl ParticleMap for ShiftMap {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.0[j]))
    }
    fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        Ok(Matrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j) + self.0[j]))
    }
}

/// `ν⁻¹(cos(πt/2)ν(X) + sin(πt/2)ν(Y))` over the particles of hidden layer
/// `k`, with the endpoints returned exactly.
pub fn nu_connect(a: &WeightVector, b: &WeightVector, k: usize, nu: Arc<dyn ParticleMap>) -> Result<ConnectionPath> {
    nu_connect_named(a, b, k, nu, "nu")
}

pub(crate) fn nu_connect_named(
    a: &WeightVector,
    b: &WeightVector,
    k: usize,
    nu: Arc<dyn ParticleMap>,
    method: &str,
) -> Result<ConnectionPath> {
    a.same_architecture(b)?;
    let pa = particle_matrix(a, k)?;
    if nu.dim() != pa.cols() {
        return Err(Error::shape(
            "nu_connect",
            format!("map of dimension {} for particles of dimension {}", nu.dim(), pa.cols()),
        ));
    }
    let ya = Arc::new(nu.forward(&pa)?);
    let yb = Arc::new(nu.forward(&particle_matrix(b, k)?)?);
    ya.ensure_finite("nu(first endpoint particles)")?;
    yb.ensure_finite("nu(second endpoint particles)")?;
    let (wa, wb) = (Arc::new(a.clone()), Arc::new(b.clone()));
    let (sa, sb) = (wa.clone(), wb.clone());
    let eval = move |t: f64| {
        let (c, s) = arc_coefficients(t);
        let mut u = ya.scale(c);
        u.axpy(s, &yb)?;
        let p = nu.inverse(&u)?;
        p.ensure_finite("inverse map along the path")?;
        from_particle_matrix(&sa.lerp(&sb, t)?, k, &p)
    };
    let leg = PathLeg::closed(wa, wb, Arc::new(eval), LegMeta::new(method, all_layers(a), 0))?;
    ConnectionPath::new(method, vec![leg])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::{sample_gaussian, Rng};
    use crate::netcore::{init_weights, MlpSpec};

    fn pair(seed: u64) -> (WeightVector, WeightVector) {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let mut rng = Rng::new(seed);
        let mut a = init_weights(&spec, &mut rng);
        let mut b = init_weights(&spec, &mut rng);
        for w in [&mut a, &mut b] {
            for m in w.layers_mut() {
                let c = m.cols() - 1;
                for i in 0..m.rows() {
                    m.set(i, c, rng.normal());
                }
            }
        }
        (a, b)
    }

    fn pairs_cov(f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Matrix {
        let mut rng = Rng::new(17);
        let x = sample_gaussian(&mut rng, 20000, 10, 0.0, 1.0);
        let y = sample_gaussian(&mut rng, 20000, 10, 0.0, 1.0);
        let rows: Vec<Vec<f64>> = (0..20000).map(|i| f(x.row(i), y.row(i))).collect();
        Matrix::from_rows(&rows).unwrap().row_covariance()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(linear_point(&[1.0, 0.0], &[0.0, 1.0], 0.5), vec![0.5, 0.5]);
        let p = arc_point(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], 0.5);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p[0] - h).abs() < 1e-15 && (p[1] - h).abs() < 1e-15);
        assert_eq!(arc_point(&[1.0, 2.0], &[3.0, 4.0], &[0.5, 0.5], 0.0), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_midpoint_halves_the_covariance() {
        let cov = pairs_cov(|x, y| linear_point(x, y, 0.5));
        let err = cov.sub(&Matrix::identity(10).scale(0.5)).unwrap().frobenius_norm();
        assert!(err < 0.05 * 10f64.sqrt(), "{err}");
    }

    #[test]
    fn arc_preserves_the_covariance() {
        let mu = vec![0.0; 10];
        for t in [0.25, 0.5, 0.75] {
            let cov = pairs_cov(|x, y| arc_point(x, y, &mu, t));
            let err = cov.sub(&Matrix::identity(10)).unwrap().frobenius_norm();
            assert!(err < 0.05 * 10f64.sqrt(), "t={t}: {err}");
        }
    }

    #[test]
    fn center_examples() {
        let v = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        let nv = v.scale(-1.0);
        let c = estimate_center(&[&v, &nv], CenterSource::EndpointParticles).unwrap();
        assert_eq!(c.mu, vec![0.0; 3]);
        assert_eq!(estimate_center(&[&v], CenterSource::Zero).unwrap().mu, v.row(0));
        assert!(estimate_center(&[&v, &Matrix::zeros(1, 2)], CenterSource::Zero).is_err());
        assert!(estimate_center(&[], CenterSource::Zero).is_err());
    }

    #[test]
    fn center_matches_brute_force_sum() {
        let mut rng = Rng::new(3);
        let a = sample_gaussian(&mut rng, 13, 4, 1.0, 2.0);
        let b = sample_gaussian(&mut rng, 7, 4, -1.0, 2.0);
        let c = estimate_center(&[&a, &b], CenterSource::EndpointParticles).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..13 {
                s += a.get(i, j);
            }
            for i in 0..7 {
                s += b.get(i, j);
            }
            assert!((c.mu[j] - s / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn paths_hit_endpoints_exactly() {
        let (a, b) = pair(1);
        let c = endpoint_center(&a, &b, 1).unwrap();
        for path in [
            linear_connect(&a, &b).unwrap(),
            arc_connect(&a, &b, 1, &c).unwrap(),
            arc_connect_rows(&a, &b, &row_centers(&a, &b).unwrap()).unwrap(),
            nu_connect(&a, &b, 1, Arc::new(IdentityMap(c.dim()))).unwrap(),
        ] {
            path.validate(&a, &b).unwrap();
        }
    }

    #[test]
    fn arc_differs_from_linear_inside() {
        let (a, b) = pair(2);
        let c = CenterEstimate::zero(endpoint_center(&a, &b, 1).unwrap().dim());
        let arc = arc_connect(&a, &b, 1, &c).unwrap().eval_point(0, 0.5).unwrap();
        let lin = linear_connect(&a, &b).unwrap().eval_point(0, 0.5).unwrap();
        assert!(arc.max_abs_diff(&lin).unwrap() > 1e-3);
    }

    #[test]
    fn identity_and_shift_maps_reduce_to_arc() {
        let (a, b) = pair(3);
        let c = endpoint_center(&a, &b, 1).unwrap();
        let d = c.dim();
        let arc0 = arc_connect(&a, &b, 1, &CenterEstimate::zero(d)).unwrap();
        let arc_mu = arc_connect(&a, &b, 1, &c).unwrap();
        let id = nu_connect(&a, &b, 1, Arc::new(IdentityMap(d))).unwrap();
        let shift = nu_connect(&a, &b, 1, Arc::new(ShiftMap(c.mu.clone()))).unwrap();
        for t in [0.1, 0.5, 0.8] {
            let x = id.eval_point(0, t).unwrap();
            assert!(x.max_abs_diff(&arc0.eval_point(0, t).unwrap()).unwrap() < 1e-12);
            let y = shift.eval_point(0, t).unwrap();
            assert!(y.max_abs_diff(&arc_mu.eval_point(0, t).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (a, _) = pair(4);
        let other = init_weights(&MlpSpec::new(vec![3, 6, 2]).unwrap(), &mut Rng::new(1));
        assert!(linear_connect(&a, &other).is_err());
        assert!(arc_connect(&a, &a, 1, &CenterEstimate::zero(3)).is_err());
        assert!(nu_connect(&a, &a, 1, Arc::new(IdentityMap(2))).is_err());
    }

    #[test]
    fn non_finite_map_output_is_an_error() {
        struct Bad;
        impl ParticleMap for Bad {
            fn dim(&self) -> usize {
                6
            }
            fn forward(&self, x: &Matrix) -> Result<Matrix> {
                Ok(x.map(|_| f64::NAN))
            }
            fn inverse(&self, y: &Matrix) -> Result<Matrix> {
                Ok(y.clone())
            }
        }
        let (a, b) = pair(5);
        assert!(nu_connect(&a, &b, 1, Arc::new(Bad)).is_err());
    }
}
