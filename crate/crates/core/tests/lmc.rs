mod common;

use common::*;
use lmc_core::backward::{backward_sgd_gradients, full_gradients};
use lmc_core::graph::{Graph, NormalizedAdjacency};
use lmc_core::lmc::{
    beta_for, forward_compensated, lmc_step, BetaSchedule, Engine, Estimator, EstimatorMode,
    HistoricalStore, ScoreKind, TouchLog,
};
use lmc_core::model::{init_glorot, ModelParams};
use lmc_core::partition::{enumerate_batches, partition_bfs, MiniBatch, Partition};
use lmc_core::LmcError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn setup(seed: u64, layers: usize) -> (Graph, NormalizedAdjacency, Partition, ModelParams) {
    let g = sbm(3, 10, 0.35, 0.06, 3, 0.5, seed);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 5, seed).unwrap();
    let mut dims = vec![3];
    dims.extend(std::iter::repeat_n(6, layers));
    dims.push(2);
    let params = init_glorot(&dims, seed).unwrap();
    (g, adj, p, params)
}

/// A store with random history, as after some training.
fn noisy_store(params: &ModelParams, n: usize, seed: u64) -> HistoricalStore {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.txt");
    let zeros = HistoricalStore::zeros(&params.dims(), n);
    zeros.write_snapshot(&path).unwrap();
    let mut r = rng(seed);
    let text = std::fs::read_to_string(&path).unwrap();
    let noisy: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(k, line)| {
            if k < 4 {
                line.to_string()
            } else {
                line.split(' ')
                    .map(|_| format!("{}", rand::Rng::random_range(&mut r, -1.0..1.0)))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        })
        .collect();
    std::fs::write(&path, noisy.join("\n")).unwrap();
    HistoricalStore::read_snapshot(&path).unwrap()
}

/// `h^l_i` computed from scratch: neighbors in the batch use `fresh`, boundary
/// neighbors use `hat`, anything else is skipped.
fn brute_aggregate(
    i: usize,
    adj: &NormalizedAdjacency,
    batch: &MiniBatch,
    fresh: &DMatrix<f64>,
    hat: &DMatrix<f64>,
) -> DVector<f64> {
    let mut acc = DVector::zeros(fresh.nrows());
    for (j, a) in adj.row(i) {
        if let Ok(p) = batch.in_batch().binary_search(&j) {
            acc += a * fresh.column(p);
        } else if let Ok(q) = batch.boundary().binary_search(&j) {
            acc += a * hat.column(q);
        }
    }
    acc
}

#[test]
fn compensated_forward_matches_brute_force() {
    let (g, adj, p, params) = setup(3, 3);
    let sched = BetaSchedule::new(0.7, ScoreKind::Linear).unwrap();
    for batch in enumerate_batches(&p, &g, 2).unwrap() {
        let before = noisy_store(&params, g.num_nodes(), 9);
        let mut store = before.clone();
        let betas: Vec<f64> = batch
            .boundary()
            .iter()
            .map(|&i| beta_for(i, &batch, &g, &sched))
            .collect();
        let (state, temp) = forward_compensated(
            &mut store,
            &batch,
            &g,
            &adj,
            &params,
            &betas,
            &mut TouchLog::disabled(),
        )
        .unwrap();
        for l in 1..=params.num_layers() {
            let theta = &params.theta[l - 1];
            let last = l == params.num_layers();
            let act = |z: DVector<f64>| if last { z } else { z.map(|x| x.max(0.0)) };
            for (q, &i) in batch.boundary().iter().enumerate() {
                let agg = brute_aggregate(
                    i,
                    &adj,
                    &batch,
                    &state.embeddings[l - 1],
                    &temp.h_hat[l - 1],
                );
                let h_tilde = act(theta * agg);
                assert!((temp.h_tilde[l - 1].column(q) - &h_tilde).amax() < 1e-13);
                let b = betas[q];
                let hat = before.embeddings(l).column(i) * (1.0 - b) + &h_tilde * b;
                assert!((temp.h_hat[l].column(q) - hat).amax() < 1e-13);
            }
            for (k, &i) in batch.in_batch().iter().enumerate() {
                let agg = brute_aggregate(
                    i,
                    &adj,
                    &batch,
                    &state.embeddings[l - 1],
                    &temp.h_hat[l - 1],
                );
                assert!((state.embeddings[l].column(k) - act(theta * agg)).amax() < 1e-13);
            }
        }
    }
}

#[test]
fn store_writes_only_touch_batch_columns() {
    let (g, adj, p, params) = setup(4, 3);
    let sched = BetaSchedule::default_for(5, 2);
    let mut est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
    *est.store_mut().unwrap() = noisy_store(&params, g.num_nodes(), 4);
    for batch in enumerate_batches(&p, &g, 2).unwrap() {
        let before = est.store().unwrap().clone();
        est.estimate(&batch, &g, &adj, &params, &sched, &mut TouchLog::disabled())
            .unwrap();
        let after = est.store().unwrap();
        let layers = params.num_layers();
        for i in 0..g.num_nodes() {
            let inside = batch.in_batch().binary_search(&i).is_ok();
            for l in 1..=layers {
                let same = after.embeddings(l).column(i) == before.embeddings(l).column(i)
                    && after.preactivations(l).column(i) == before.preactivations(l).column(i);
                if !inside {
                    assert!(same, "node {i} outside the batch was written at layer {l}");
                }
            }
            for l in 1..layers {
                if !inside {
                    assert_eq!(after.aux(l).column(i), before.aux(l).column(i));
                }
            }
        }
    }
}

#[test]
fn full_batch_estimators_agree() {
    let (g, adj, _, params) = setup(5, 2);
    let whole = partition_bfs(&g, 1, 5).unwrap();
    let batch = enumerate_batches(&whole, &g, 1).unwrap().remove(0);
    assert!(batch.boundary().is_empty());
    let exact = full_gradients(&g, &adj, &params).unwrap();
    let sched = BetaSchedule::default_for(1, 1);
    for mode in [
        EstimatorMode::Lmc,
        EstimatorMode::Gas,
        EstimatorMode::Cluster,
        EstimatorMode::BackwardSgd,
    ] {
        let mut est = Estimator::new(mode, &params, g.num_nodes());
        let e = est
            .estimate(&batch, &g, &adj, &params, &sched, &mut TouchLog::disabled())
            .unwrap();
        assert!(e.grads.max_abs_diff(&exact) <= 1e-12, "{mode}");
    }
    let bsgd = backward_sgd_gradients(&g, &adj, &params, &batch).unwrap();
    assert!(bsgd.max_abs_diff(&exact) <= 1e-12);
}

#[test]
fn cluster_with_every_cluster_is_exact() {
    let (g, adj, p, params) = setup(6, 2);
    let batch = enumerate_batches(&p, &g, p.num_clusters())
        .unwrap()
        .remove(0);
    let mut est = Estimator::new(EstimatorMode::Cluster, &params, g.num_nodes());
    let e = est
        .estimate(
            &batch,
            &g,
            &adj,
            &params,
            &BetaSchedule::zero(),
            &mut TouchLog::disabled(),
        )
        .unwrap();
    assert!(
        e.grads
            .max_abs_diff(&full_gradients(&g, &adj, &params).unwrap())
            <= 1e-12
    );
}

#[test]
fn warm_started_lmc_with_exact_history_is_backward_sgd() {
    let (g, adj, p, params) = setup(7, 3);
    for batch in enumerate_batches(&p, &g, 2).unwrap() {
        let mut est = Estimator::warm_started(EstimatorMode::Lmc, &g, &adj, &params).unwrap();
        let e = est
            .estimate(
                &batch,
                &g,
                &adj,
                &params,
                &BetaSchedule::zero(),
                &mut TouchLog::disabled(),
            )
            .unwrap();
        let reference = backward_sgd_gradients(&g, &adj, &params, &batch).unwrap();
        assert!(
            e.grads.max_abs_diff(&reference) < 1e-12,
            "batch {:?}",
            batch.cluster_ids
        );
    }
}

#[test]
fn zero_learning_rate_keeps_params() {
    let (g, adj, p, params) = setup(8, 2);
    let est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
    let mut engine = Engine::new(
        &g,
        &adj,
        &p,
        params.clone(),
        est,
        BetaSchedule::default_for(5, 2),
        2,
        1,
    )
    .unwrap();
    for _ in 0..5 {
        lmc_step(&mut engine, 0.0).unwrap();
    }
    assert_eq!(engine.params(), &params);
    assert_eq!(engine.iteration(), 5);
}

#[test]
fn lmc_step_requires_lmc_mode() {
    let (g, adj, p, params) = setup(8, 2);
    let est = Estimator::new(EstimatorMode::Gas, &params, g.num_nodes());
    let mut engine = Engine::new(&g, &adj, &p, params, est, BetaSchedule::zero(), 2, 1).unwrap();
    assert!(lmc_step(&mut engine, 0.1).is_err());
}

#[test]
fn runs_are_deterministic() {
    let (g, adj, p, params) = setup(9, 2);
    let run = || {
        let est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
        let mut engine = Engine::new(
            &g,
            &adj,
            &p,
            params.clone(),
            est,
            BetaSchedule::default_for(5, 2),
            2,
            44,
        )
        .unwrap();
        let losses: Vec<u64> = (0..30)
            .map(|_| engine.step(0.2).unwrap().loss.to_bits())
            .collect();
        (losses, engine.params().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn huge_step_size_reports_divergence() {
    let (g, adj, p, params) = setup(10, 2);
    let est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
    let mut engine = Engine::new(
        &g,
        &adj,
        &p,
        params,
        est,
        BetaSchedule::default_for(5, 2),
        2,
        2,
    )
    .unwrap();
    let err = (0..200)
        .find_map(|_| engine.step(1e150).err())
        .expect("divergence");
    assert!(matches!(err, LmcError::Divergence { .. }), "{err}");
}

#[test]
fn store_snapshot_round_trip() {
    let (g, _, _, params) = setup(11, 3);
    let store = noisy_store(&params, g.num_nodes(), 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    store.write_snapshot(&path).unwrap();
    assert_eq!(HistoricalStore::read_snapshot(&path).unwrap(), store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn temporaries_stay_between_history_and_incomplete_values(seed in 0u64..5000, alpha in 0.0f64..=1.0) {
        let (g, adj, p, params) = setup(seed, 2);
        let sched = BetaSchedule::new(alpha, ScoreKind::TwoXMinusSquare).unwrap();
        let batch = enumerate_batches(&p, &g, 1).unwrap().remove((seed % 5) as usize);
        let before = noisy_store(&params, g.num_nodes(), seed);
        let mut store = before.clone();
        let betas: Vec<f64> = batch.boundary().iter().map(|&i| beta_for(i, &batch, &g, &sched)).collect();
        let (_, temp) = forward_compensated(&mut store, &batch, &g, &adj, &params, &betas, &mut TouchLog::disabled()).unwrap();
        for l in 1..=params.num_layers() {
            for (q, &i) in batch.boundary().iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&betas[q]));
                for r in 0..temp.h_hat[l].nrows() {
                    let (h0, h1) = (before.embeddings(l)[(r, i)], temp.h_tilde[l - 1][(r, q)]);
                    let v = temp.h_hat[l][(r, q)];
                    prop_assert!(v >= h0.min(h1) - 1e-12 && v <= h0.max(h1) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn touches_stay_inside_the_closure(seed in 0u64..5000, c in 1usize..4) {
        let (g, adj, p, params) = setup(seed, 2);
        let sched = BetaSchedule::default_for(5, c);
        let mut est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
        for batch in enumerate_batches(&p, &g, c).unwrap().iter().take(4) {
            let mut touches = TouchLog::enabled();
            est.estimate(batch, &g, &adj, &params, &sched, &mut touches).unwrap();
            prop_assert!(touches.nodes().iter().all(|i| batch.halo.contains(*i)));
        }
    }
}
