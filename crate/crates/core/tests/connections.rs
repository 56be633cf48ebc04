use std::sync::Arc;

use modeconnect::dataio::{gen_synthetic_split, SyntheticSpec};
use modeconnect::ensemble::{build_wa_ensemble, EnsembleConfig};
use modeconnect::methods::{connect, ConnectInputs, Method};
use modeconnect::ndmath::{Matrix, Rng};
use modeconnect::netcore::{
    cross_entropy, forward, init_weights, train_sgd_from, Dataset, MlpSpec, TrainConfig, WeightVector,
};
use modeconnect::paths::evaluate;
use proptest::prelude::*;

fn blobs() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        classes: 3,
        dim: 4,
        samples_per_class: 60,
        std: 1.0,
        center_radius: 4.0,
        seed: 5,
    };
    gen_synthetic_split(&spec, 30).unwrap()
}

fn trained(spec: &MlpSpec, data: &Dataset, seed: u64) -> WeightVector {
    let init = init_weights(spec, &mut Rng::new(seed));
    let cfg = TrainConfig {
        lr: 0.05,
        batch: 16,
        epochs: 15,
        seed,
    };
    train_sgd_from(init, data, &cfg).unwrap().weights
}

/// Plain loop forward pass: ReLU hidden layers, bias in the last column.
fn naive_logits(w: &WeightVector, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = w.layers().len();
    for (k, m) in w.layers().iter().enumerate() {
        let mut z: Vec<f64> = (0..m.rows())
            .map(|i| (0..h.len()).map(|j| m.get(i, j) * h[j]).sum::<f64>() + m.get(i, h.len()))
            .collect();
        if k + 1 < n {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    h
}

fn naive_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn every_direct_and_scaffold_method_joins_the_endpoints() {
    let (train, test) = blobs();
    let spec = MlpSpec::new(vec![4, 12, 3]).unwrap();
    let a = trained(&spec, &train, 1);
    let b = trained(&spec, &train, 2);
    let inputs = ConnectInputs {
        adjust_features: Some(Arc::new(train.features().clone())),
        ..ConnectInputs::default()
    };
    for method in Method::ALL.into_iter().filter(|m| m.flow_origin().is_none()) {
        let path = connect(method, &a, &b, &inputs).unwrap();
        path.validate(&a, &b).unwrap();
        let report = evaluate(&path, &spec, &test, 5).unwrap();
        let s = &report.summary;
        assert_eq!(s.method, method.to_string());
        assert!(s.worst_accuracy <= s.endpoints_accuracy[0].min(s.endpoints_accuracy[1]));
        let worst = report.points.iter().map(|p| p.accuracy).fold(1.0, f64::min);
        assert_eq!(worst, s.worst_accuracy, "{method}");
    }
}

#[test]
fn linear_path_points_match_hand_interpolation() {
    let (train, test) = blobs();
    let spec = MlpSpec::new(vec![4, 8, 6, 3]).unwrap();
    let a = trained(&spec, &train, 3);
    let b = trained(&spec, &train, 4);
    let path = connect(Method::Linear, &a, &b, &ConnectInputs::default()).unwrap();
    for t in [0.0, 0.3, 0.5, 1.0] {
        let w = path.eval_point(0, t).unwrap();
        for (k, m) in w.layers().iter().enumerate() {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let want = (1.0 - t) * a.layers()[k].get(i, j) + t * b.layers()[k].get(i, j);
                    assert!((m.get(i, j) - want).abs() <= 1e-12);
                }
            }
        }
        let logits = forward(&spec, &w, test.features()).unwrap();
        let mut total = 0.0;
        for s in 0..test.len() {
            let z = naive_logits(&w, &test.features().column(s));
            for (c, v) in z.iter().enumerate() {
                assert!((logits.get(c, s) - v).abs() <= 1e-9);
            }
            total += naive_loss(&z, test.labels()[s]);
        }
        let loss = cross_entropy(&logits, test.labels()).unwrap();
        assert!((loss - total / test.len() as f64).abs() <= 1e-9);
    }
}

#[test]
fn averaged_logit_ensemble_is_no_worse_than_its_members_on_average() {
    let (train, test) = blobs();
    let spec = MlpSpec::new(vec![4, 10, 10, 3]).unwrap();
    let models: Vec<WeightVector> = (10..14).map(|s| trained(&spec, &train, s)).collect();
    let ens = build_wa_ensemble(&models, &EnsembleConfig::default(), train.features()).unwrap();
    for data in [&train, &test] {
        let members = ens.member_logits(data.features()).unwrap();
        let n = data.len();
        let mut member_mean = 0.0;
        let mut avg_loss = 0.0;
        for s in 0..n {
            let label = data.labels()[s];
            let per: Vec<Vec<f64>> = members.iter().map(|m| m.column(s)).collect();
            member_mean += per.iter().map(|z| naive_loss(z, label)).sum::<f64>() / per.len() as f64;
            let avg: Vec<f64> = (0..3)
                .map(|c| per.iter().map(|z| z[c]).sum::<f64>() / per.len() as f64)
                .collect();
            avg_loss += naive_loss(&avg, label);
        }
        assert!(avg_loss / n as f64 <= member_mean / n as f64 + 1e-12);
        let pred = ens.predict(data.features()).unwrap();
        let loss = cross_entropy(&pred, data.labels()).unwrap();
        assert!((loss - avg_loss / n as f64).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_matches_log_sum_exp(
        z in prop::collection::vec(-30.0f64..30.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let logits = Matrix::from_vec(4, 3, z).unwrap();
        let want: f64 = (0..3).map(|s| naive_loss(&logits.column(s), labels[s])).sum::<f64>() / 3.0;
        let got = cross_entropy(&logits, &labels).unwrap();
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn path_endpoints_are_the_networks(seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let a = init_weights(&spec, &mut Rng::new(seed_a));
        let b = init_weights(&spec, &mut Rng::new(seed_b + 1000));
        for m in [Method::Linear, Method::Arc, Method::Ot] {
            let path = connect(m, &a, &b, &ConnectInputs::default()).unwrap();
            prop_assert!(path.start().unwrap().max_abs_diff(&a).unwrap() <= 1e-12);
            prop_assert!(path.end().unwrap().max_abs_diff(&b).unwrap() <= 1e-12);
        }
    }
}
