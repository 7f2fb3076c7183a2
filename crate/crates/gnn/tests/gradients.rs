//! Analytic gradients of every training loss against central differences on
//! random small graphs.

mod common;

use abin_core::seed::rng_from_seed;
use abin_gnn::{GaanModel, GaeModel, GcnModel, GnnHyperparams, GraphData};
use ndarray::Array2;
use rand::Rng;

const H: f64 = 1e-6;

fn agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks `picks` random parameter entries; returns how many were checked.
fn check_entries(
    rng: &mut impl Rng,
    params: &[Array2<f64>],
    picks: usize,
    loss: impl Fn(&[Array2<f64>]) -> (f64, Vec<Array2<f64>>),
) -> usize {
    let (_, grads) = loss(params);
    for _ in 0..picks {
        let k = rng.random_range(0..params.len());
        let (r, c) = (rng.random_range(0..params[k].nrows()), rng.random_range(0..params[k].ncols()));
        let at = |delta: f64| {
            let mut p = params.to_vec();
            p[k][[r, c]] += delta;
            loss(&p).0
        };
        let numeric = (at(H) - at(-H)) / (2.0 * H);
        let analytic = grads[k][[r, c]];
        assert!(agrees(analytic, numeric), "param {k} [{r},{c}]: analytic {analytic} numeric {numeric}");
    }
    picks
}

fn random_hp(rng: &mut impl Rng, seed: u64) -> GnnHyperparams {
    GnnHyperparams {
        layers: rng.random_range(1..=3),
        hidden_dim: rng.random_range(2..=6),
        noise_dim: Some(rng.random_range(1..=4)),
        dropout: if rng.random::<bool>() { 0.3 } else { 0.0 },
        seed,
        ..GnnHyperparams::gaan()
    }
}

#[test]
fn training_losses_match_finite_differences() {
    let mut rng = rng_from_seed(2024);
    let mut checks = 0;
    for case in 0..30u64 {
        let n = rng.random_range(4..10);
        let d = rng.random_range(1..5);
        let ag = common::random_graph(&mut rng, n, d, 0.4);
        let mut g = GraphData::from_graph(&ag).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        g.labels = Some(labels.clone());
        let train: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.7).chain([0, 1]).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let train_labels: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
        let hp = random_hp(&mut rng, case);
        let epoch = rng.random_range(0..50);

        let gcn = GcnModel::init(&hp, d);
        checks += check_entries(&mut rng, &gcn.params, 4, |p| gcn.loss_and_grads(p, &g, &train, &train_labels, epoch));

        let gae = GaeModel::init(&hp, d);
        checks += check_entries(&mut rng, &gae.params, 4, |p| gae.loss_and_grads(p, &g, &train, epoch));

        let gaan = GaanModel::init(&hp, d).unwrap();
        checks += check_entries(&mut rng, &gaan.params, 4, |p| gaan.d_loss_and_grads(p, &g, &train, epoch));
        checks += check_entries(&mut rng, &gaan.params, 4, |p| gaan.g_loss_and_grads(p, &g, &train, epoch));
    }
    assert!(checks >= 200, "{checks}");
}
