use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{Matrix, Rng};
use crate::netcore::Dataset;

/// Isotropic Gaussian blobs, one per class, with centers drawn at random
/// on a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub std: f64,
    #[serde(default = "default_radius")]
    pub center_radius: f64,
    pub seed: u64,
}

fn default_radius() -> f64 {
    4.0
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid(format!(
                "synthetic data needs >= 2 classes and positive dim/samples, got {self:?}"
            )));
        }
        if self.std.is_nan() || self.std < 0.0 || self.center_radius.is_nan() || self.center_radius <= 0.0 {
            return Err(Error::invalid(format!(
                "std must be >= 0 and center radius > 0, got {} and {}",
                self.std, self.center_radius
            )));
        }
        Ok(())
    }
}

const CENTER_TRIES: usize = 64;

fn sphere_point(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x * spec.center_radius / norm).collect();
        }
    }
}

/// Random sphere points, each resampled (up to a fixed budget) until it lies
/// at least one radius away from the earlier centers. In low dimension this
/// keeps two classes from landing on top of each other.
fn centers(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..CENTER_TRIES {
            let c = sphere_point(spec, rng);
            let gap = out
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, c));
            }
            if gap >= spec.center_radius {
                break;
            }
        }
        out.push(best.expect("at least one candidate").1);
    }
    out
}

fn draw(spec: &SyntheticSpec, centers: &[Vec<f64>], per_class: usize, rng: &mut Rng) -> Result<Dataset> {
    let n = per_class * spec.classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    rng.shuffle(&mut labels);
    let mut x = Matrix::zeros(spec.dim, n);
    for (j, &c) in labels.iter().enumerate() {
        for (i, mu) in centers[c].iter().enumerate() {
            x.set(i, j, mu + spec.std * rng.normal());
        }
    }
    Dataset::new(x, labels, spec.classes)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c = centers(spec, &mut rng);
    draw(spec, &c, spec.samples_per_class, &mut rng)
}

/// Train set as [`gen_synthetic`] plus a test set from the same blobs,
/// drawn further along the same stream.
pub fn gen_synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c = centers(spec, &mut rng);
    let train = draw(spec, &c, spec.samples_per_class, &mut rng)?;
    let test = draw(spec, &c, test_per_class.max(1), &mut rng)?;
    Ok((train, test))
}
