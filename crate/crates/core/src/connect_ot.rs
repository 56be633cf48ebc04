//! Optimal-transport connection. The neurons of `A` are matched to the
//! neurons of `B` by an exact minimum-cost assignment, `A` moves in a straight
//! line onto the matched (reordered) copy of `B`, and the order is then
//! repaired by a sequence of output-preserving pairwise swaps.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;
use crate::netcore::{particle_matrix, permute_hidden, WeightVector};
use crate::paths::{ConnectionPath, LegMeta, PathLeg, SwapSpec};

/// Row `i` is matched to column `pi[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pi: Vec<usize>,
    pub cost: f64,
}

/// Exact linear assignment by shortest augmenting paths with potentials
/// (Hungarian method), `O(n³)`. `+∞` entries are allowed and avoided
/// whenever a finite assignment exists.
pub fn solve_assignment(cost: &Matrix) -> Result<Matching> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape(
            "solve_assignment",
            format!("cost matrix must be square, got {}x{}", n, cost.cols()),
        ));
    }
    if cost.as_slice().iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(Error::invalid("cost matrix contains NaN or -inf"));
    }
    if n == 0 {
        return Ok(Matching {
            pi: Vec::new(),
            cost: 0.0,
        });
    }
    // any assignment through a replaced entry costs more than every finite one
    let max_abs = cost
        .as_slice()
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let big = 2.0 * n as f64 * max_abs.max(1.0) + 1.0;
    let a = |i: usize, j: usize| {
        let v = cost.get(i - 1, j - 1);
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pi = vec![0; n];
    for j in 1..=n {
        pi[p[j] - 1] = j - 1;
    }
    let total = pi.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Matching { pi, cost: total })
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn squared_distance_cost(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "transport cost",
            format!("particles of dimension {} and {}", a.cols(), b.cols()),
        ));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum()
    }))
}

/// Ordered transpositions of array positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSchedule {
    pub transpositions: Vec<(usize, usize)>,
}

impl SwapSchedule {
    /// Applies the swaps in order to `arr`.
    pub fn apply(&self, arr: &mut [usize]) {
        for &(i, j) in &self.transpositions {
            arr.swap(i, j);
        }
    }
}

fn check_permutation(pi: &[usize]) -> Result<()> {
    let mut seen = vec![false; pi.len()];
    for &x in pi {
        if x >= pi.len() || std::mem::replace(&mut seen[x], true) {
            return Err(Error::invalid(format!("{pi:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Swaps that turn the identity arrangement into `pi` (so that afterwards
/// position `p` holds `pi[p]`). Cycles are handled in increasing order of
/// their smallest element; a cycle of length `m` costs `m − 1` swaps.
pub fn permutation_to_swaps(pi: &[usize]) -> Result<SwapSchedule> {
    check_permutation(pi)?;
    let n = pi.len();
    let mut arr: Vec<usize> = (0..n).collect();
    let mut pos: Vec<usize> = (0..n).collect();
    let mut visited = vec![false; n];
    let mut transpositions = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        let mut c = start;
        while !visited[c] {
            visited[c] = true;
            c = pi[c];
        }
        let mut p = start;
        loop {
            let q = pos[pi[p]];
            if q == p {
                break;
            }
            transpositions.push((p, q));
            let (x, y) = (arr[p], arr[q]);
            arr.swap(p, q);
            pos[x] = q;
            pos[y] = p;
            p = q;
        }
    }
    Ok(SwapSchedule { transpositions })
}

/// Number of cycles of a permutation.
pub fn cycle_count(pi: &[usize]) -> usize {
    let mut visited = vec![false; pi.len()];
    let mut cycles = 0;
    for s in 0..pi.len() {
        if !visited[s] {
            cycles += 1;
            let mut c = s;
            while !visited[c] {
                visited[c] = true;
                c = pi[c];
            }
        }
    }
    cycles
}

/// Leg exchanging neurons `i` and `j` of hidden layer `k`.
pub fn swap_leg(w: &WeightVector, k: usize, i: usize, j: usize) -> Result<PathLeg> {
    let n = particle_matrix(w, k)?.rows();
    PathLeg::swap(
        SwapSpec {
            base: Arc::new(w.clone()),
            layer: k,
            order: Arc::new((0..n).collect()),
            i,
            j,
        },
        LegMeta::new("swap", vec![k, k + 1], 0),
    )
}

/// Swap legs taking `base` with its hidden layer `k` arranged as `arr`
/// (position `p` holds neuron `arr[p]`) back to `base` itself.
pub fn unpermute_legs(base: Arc<WeightVector>, k: usize, arr: &[usize], meta: &LegMeta) -> Result<Vec<PathLeg>> {
    check_permutation(arr)?;
    let inverse = {
        let mut inv = vec![0; arr.len()];
        for (p, &x) in arr.iter().enumerate() {
            inv[x] = p;
        }
        inv
    };
    // applying the schedule of arr⁻¹ to arr yields the identity
    let schedule = permutation_to_swaps(&inverse)?;
    let mut current = arr.to_vec();
    let mut legs = Vec::with_capacity(schedule.transpositions.len());
    for &(i, j) in &schedule.transpositions {
        legs.push(PathLeg::swap(
            SwapSpec {
                base: base.clone(),
                layer: k,
                order: Arc::new(current.clone()),
                i,
                j,
            },
            meta.clone(),
        )?);
        current.swap(i, j);
    }
    debug_assert!(current.iter().enumerate().all(|(p, &x)| p == x));
    Ok(legs)
}

/// Two-stage optimal-transport path at hidden layer `k`: a straight leg
/// from `A` onto `B` with its neurons reordered by the optimal matching,
/// then swap legs restoring `B`'s order. Parameters outside the particles
/// travel to `B`'s values on the first leg.
pub fn ot_connect(a: &WeightVector, b: &WeightVector, k: usize) -> Result<(ConnectionPath, Matching)> {
    a.same_architecture(b)?;
    let pa = particle_matrix(a, k)?;
    let pb = particle_matrix(b, k)?;
    let matching = solve_assignment(&squared_distance_cost(&pa, &pb)?)?;
    let base = Arc::new(b.clone());
    let target = Arc::new(permute_hidden(b, k, &matching.pi)?);
    let layers = (1..=a.depth()).collect::<Vec<_>>();
    let mut legs = vec![PathLeg::linear(
        Arc::new(a.clone()),
        target,
        LegMeta::new("ot-transport", layers, 0),
    )?];
    legs.extend(unpermute_legs(
        base,
        k,
        &matching.pi,
        &LegMeta::new("ot-swap", vec![k, k + 1], 0),
    )?);
    Ok((ConnectionPath::new("ot", legs)?, matching))
}

/// Particle matrix of `w` at layer `k` after `ot_connect`'s first leg.
pub fn transported_particles(b: &WeightVector, k: usize, matching: &Matching) -> Result<Matrix> {
    Ok(particle_matrix(b, k)?.select_rows(&matching.pi))
}
