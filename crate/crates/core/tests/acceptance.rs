//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lmc_core::backward::{
    backward_sgd_gradients, exact_pass, finite_diff_gradients, full_gradients, GradientSet,
};
use lmc_core::experiment::{run_grad_error, run_training, GradErrorSettings, TrainSettings};
use lmc_core::graph::{Graph, NormalizedAdjacency};
use lmc_core::lmc::{BetaSchedule, Engine, Estimator, EstimatorMode, ScoreKind, TouchLog};
use lmc_core::model::{accuracy, init_glorot, predict, ModelParams};
use lmc_core::partition::{enumerate_batches, partition_bfs, MiniBatch, Partition};
use nalgebra::DMatrix;
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|x| x.to_bits()).collect()
}

fn grad_bits(g: &GradientSet) -> Vec<u64> {
    g.matrices().flat_map(bits).collect()
}

fn params_bits(p: &ModelParams) -> Vec<u64> {
    p.matrices().flat_map(bits).collect()
}

fn store_bits(est: &Estimator) -> Vec<u64> {
    let store = est.store().expect("history-based mode");
    let layers = store.num_layers();
    let mut out = Vec::new();
    for l in 1..=layers {
        out.extend(bits(store.embeddings(l)));
        out.extend(bits(store.preactivations(l)));
    }
    for l in 1..layers {
        out.extend(bits(store.aux(l)));
    }
    out
}

fn max_param_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.matrices()
        .zip(b.matrices())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let instances = 24;
    for inst in 0..instances {
        let mut rng = rng(1000 + inst);
        let layers = 1 + (inst as usize % 3);
        let n = rng.random_range(4..=30);
        let classes = rng.random_range(2..=4);
        let mut dims = vec![rng.random_range(1..=8)];
        dims.extend((0..layers).map(|_| rng.random_range(2..=8)));
        dims.push(classes);
        let g = random_graph(n, 0.15, dims[0], classes, &mut rng);
        let adj = adjacency(&g);
        let params = smooth_params(&g, &adj, &dims, 7 + inst, 1e-4);
        let exact = full_gradients(&g, &adj, &params).map_err(|e| e.to_string())?;
        let fd = finite_diff_gradients(&g, &adj, &params, 1e-5).map_err(|e| e.to_string())?;
        for (k, (a, f)) in exact.matrices().zip(fd.matrices()).enumerate() {
            let err = if a.norm() < 1e-8 {
                (a - f).amax()
            } else {
                lmc_core::backward::relative_error(f, a)
            };
            worst = worst.max(err);
            check(err <= 1e-6, || {
                format!("instance {inst} (n={n}, L={layers}) block {k}: relative error {err:.3e}")
            })?;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{instances} instances, worst block error {worst:.2e}, {elapsed:.1?}"
    ))
}

fn unbiasedness() -> Outcome {
    let g = sbm24(11);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 4, 11).map_err(|e| e.to_string())?;
    let params = init_glorot(&[4, 8, 8, 2], 11).map_err(|e| e.to_string())?;
    let exact = full_gradients(&g, &adj, &params).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for c in 1..=3 {
        let batches = enumerate_batches(&p, &g, c).map_err(|e| e.to_string())?;
        let grads = batches
            .iter()
            .map(|b| backward_sgd_gradients(&g, &adj, &params, b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let mean = GradientSet::mean(&grads).ok_or("no batches")?;
        let diff = mean.max_abs_diff(&exact);
        worst = worst.max(diff);
        check(diff <= 1e-10, || {
            format!("c={c}: max entry difference {diff:.3e}")
        })?;
    }
    Ok(format!("c in 1..=3, max entry difference {worst:.2e}"))
}

fn degenerate_equivalence() -> Outcome {
    let g = sbm(3, 10, 0.4, 0.05, 4, 0.5, 21);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 1, 21).map_err(|e| e.to_string())?;
    let params = init_glorot(&[4, 8, 8, 2], 21).map_err(|e| e.to_string())?;
    let sched = BetaSchedule::default_for(1, 1);
    let make = |mode| {
        let est = Estimator::new(mode, &params, g.num_nodes());
        Engine::new(&g, &adj, &p, params.clone(), est, sched, 1, 5)
    };
    let mut lmc = make(EstimatorMode::Lmc).map_err(|e| e.to_string())?;
    let mut full = make(EstimatorMode::FullBatch).map_err(|e| e.to_string())?;
    let (mut grad_worst, mut traj_worst) = (0.0f64, 0.0f64);
    for step in 1..=50 {
        let a = lmc.step(0.3).map_err(|e| e.to_string())?;
        let b = full.step(0.3).map_err(|e| e.to_string())?;
        let gd = a.estimate.grads.max_abs_diff(&b.estimate.grads);
        let pd = max_param_diff(lmc.params(), full.params());
        grad_worst = grad_worst.max(gd);
        traj_worst = traj_worst.max(pd);
        check(gd <= 1e-12, || {
            format!("step {step}: gradient difference {gd:.3e}")
        })?;
        check(pd <= 1e-10, || {
            format!("step {step}: parameter difference {pd:.3e}")
        })?;
    }
    Ok(format!(
        "50 steps, gradient diff {grad_worst:.1e}, trajectory diff {traj_worst:.1e}"
    ))
}

fn mode_identity() -> Outcome {
    let g = sbm(3, 20, 0.25, 0.04, 4, 0.4, 31);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 6, 31).map_err(|e| e.to_string())?;
    let params = init_glorot(&[4, 8, 8, 2], 31).map_err(|e| e.to_string())?;
    let gas_est = Estimator::new(EstimatorMode::Gas, &params, g.num_nodes());
    let cf_est = Estimator::new(EstimatorMode::LmcForwardOnly, &params, g.num_nodes());
    let zero_alpha =
        BetaSchedule::new(0.0, ScoreKind::TwoXMinusSquare).map_err(|e| e.to_string())?;
    let mut gas = Engine::new(
        &g,
        &adj,
        &p,
        params.clone(),
        gas_est,
        BetaSchedule::default_for(6, 2),
        2,
        8,
    )
    .map_err(|e| e.to_string())?;
    let mut cf =
        Engine::new(&g, &adj, &p, params, cf_est, zero_alpha, 2, 8).map_err(|e| e.to_string())?;
    for step in 1..=100 {
        let a = gas.step(0.2).map_err(|e| e.to_string())?;
        let b = cf.step(0.2).map_err(|e| e.to_string())?;
        check(a.batch == b.batch, || {
            format!("step {step}: batches differ")
        })?;
        check(
            grad_bits(&a.estimate.grads) == grad_bits(&b.estimate.grads),
            || format!("step {step}: gradients differ"),
        )?;
        check(a.loss.to_bits() == b.loss.to_bits(), || {
            format!("step {step}: losses differ")
        })?;
        check(
            params_bits(gas.params()) == params_bits(cf.params()),
            || format!("step {step}: parameters differ"),
        )?;
        check(
            store_bits(gas.estimator()) == store_bits(cf.estimator()),
            || format!("step {step}: historical stores differ"),
        )?;
    }
    Ok("100 steps, gradients, losses, parameters and stores bitwise equal".into())
}

/// Per-layer `||H_bar^l - H^l||` and `||V_bar^l - V^l||` against the exact pass.
fn history_errors(
    est: &Estimator,
    exact: &lmc_core::backward::ExactPass,
    layers: usize,
) -> Vec<f64> {
    let store = est.store().unwrap();
    let mut errs: Vec<f64> = (1..=layers)
        .map(|l| (store.embeddings(l) - &exact.state.embeddings[l]).norm())
        .collect();
    errs.extend((1..layers).map(|l| (store.aux(l) - exact.aux.layer(l)).norm()));
    errs
}

fn contraction() -> Outcome {
    let g = sbm24(41);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 4, 41).map_err(|e| e.to_string())?;
    let layers = 3;
    let params = init_glorot(&[4, 8, 8, 8, 2], 41).map_err(|e| e.to_string())?;
    let exact = exact_pass(&g, &adj, &params).map_err(|e| e.to_string())?;
    let sched = BetaSchedule::new(0.0, ScoreKind::TwoXMinusSquare).map_err(|e| e.to_string())?;
    let batches = enumerate_batches(&p, &g, 1).map_err(|e| e.to_string())?;
    let mut est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
    let mut prev = history_errors(&est, &exact, layers);
    let mut converged_at = None;
    for sweep in 1..=60 {
        for batch in &batches {
            est.estimate(batch, &g, &adj, &params, &sched, &mut TouchLog::disabled())
                .map_err(|e| e.to_string())?;
        }
        let errs = history_errors(&est, &exact, layers);
        for (k, (now, before)) in errs.iter().zip(&prev).enumerate() {
            check(now <= before, || {
                format!("sweep {sweep}: error {k} rose from {before:.3e} to {now:.3e}")
            })?;
        }
        if converged_at.is_none() && errs.iter().all(|&e| e < 1e-8) {
            converged_at = Some(sweep);
        }
        prev = errs;
    }
    let sweep = converged_at.ok_or_else(|| format!("errors after 60 sweeps: {prev:?}"))?;
    Ok(format!(
        "non-increasing over 60 sweeps, below 1e-8 for every layer after sweep {sweep}"
    ))
}

fn error_ordering() -> Outcome {
    let start = Instant::now();
    let modes = [
        EstimatorMode::Lmc,
        EstimatorMode::Gas,
        EstimatorMode::Cluster,
    ];
    let mut totals = [0.0; 3];
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let g = sbm600(seed);
        let adj = adjacency(&g);
        let p = partition_bfs(&g, 8, seed).map_err(|e| e.to_string())?;
        let params = init_glorot(&[8, 16, 16, 2], seed).map_err(|e| e.to_string())?;
        let settings = GradErrorSettings {
            batch_clusters: 2,
            lr: 0.05,
            iterations: 220,
            sched: BetaSchedule::default_for(8, 2),
            sampler_seed: seed + 1,
            warm_start: false,
            warmup: 20,
            measure_every: 1,
        };
        let summary = run_grad_error(&g, &adj, &p, params, &modes, &settings, &mut |_| Ok(()))
            .map_err(|e| e.to_string())?;
        for (t, s) in totals.iter_mut().zip(&summary) {
            check(s.measured_steps == 200, || {
                format!("{} measured {} steps", s.mode, s.measured_steps)
            })?;
            *t += s.rel_err_mean / seeds.len() as f64;
        }
    }
    let [lmc, gas, cluster] = totals;
    let elapsed = start.elapsed();
    let detail = format!(
        "LMC {lmc:.4}, GAS {gas:.4}, Cluster {cluster:.4}, LMC/GAS {:.3}",
        lmc / gas
    );
    check(lmc < gas && lmc < cluster, || {
        format!("ordering violated: {detail}")
    })?;
    check(lmc / gas <= 0.95, || format!("ratio too large: {detail}"))?;
    check(elapsed < Duration::from_secs(600), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{detail}, {elapsed:.1?}"))
}

fn test_accuracy(g: &Graph, adj: &NormalizedAdjacency, params: &ModelParams) -> f64 {
    let splits = lmc_core::experiment::Splits::from_graph(g);
    let state = exact_pass(g, adj, params).unwrap().state;
    accuracy(&predict(&state, params), g, &splits.test)
}

fn convergence() -> Outcome {
    let g = sbm600(7);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 8, 7).map_err(|e| e.to_string())?;
    let init = init_glorot(&[8, 16, 16, 2], 7).map_err(|e| e.to_string())?;
    let iterations = 400;
    let run = |mode: EstimatorMode, c: usize, p: &Partition| {
        let settings = TrainSettings {
            mode,
            batch_clusters: c,
            lr: 0.5,
            iterations,
            sched: BetaSchedule::default_for(p.num_clusters(), c),
            sampler_seed: 8,
            eval_every: iterations,
            warm_start: false,
        };
        run_training(&g, &adj, p, init.clone(), &settings, &mut |_| Ok(()))
    };
    let lmc = run(EstimatorMode::Lmc, 2, &p).map_err(|e| e.to_string())?;
    let whole = partition_bfs(&g, 1, 7).map_err(|e| e.to_string())?;
    let gd = run(EstimatorMode::FullBatch, 1, &whole).map_err(|e| e.to_string())?;
    let acc_lmc = test_accuracy(&g, &adj, &lmc.params);
    let acc_gd = test_accuracy(&g, &adj, &gd.params);
    let norm0 = full_gradients(&g, &adj, &init)
        .map_err(|e| e.to_string())?
        .norm();
    let norm_end = full_gradients(&g, &adj, &lmc.params)
        .map_err(|e| e.to_string())?
        .norm();
    let detail = format!(
        "test acc LMC {acc_lmc:.4} vs GD {acc_gd:.4}, grad norm {norm0:.3e} -> {norm_end:.3e} ({:.3}x)",
        norm_end / norm0
    );
    check(acc_lmc >= acc_gd - 0.02, || {
        format!("accuracy gap: {detail}")
    })?;
    check(norm_end <= 0.1 * norm0, || {
        format!("gradient norm: {detail}")
    })?;
    Ok(detail)
}

fn locality() -> Outcome {
    let g = sbm(3, 12, 0.35, 0.04, 4, 0.5, 51);
    let far = sbm(2, 15, 0.3, 0.1, 4, 0.5, 52);
    let big = g.disjoint_union(&far).map_err(|e| e.to_string())?;
    let adj = adjacency(&g);
    let adj_big = adjacency(&big);
    let p = partition_bfs(&g, 6, 51).map_err(|e| e.to_string())?;
    let params = init_glorot(&[4, 8, 8, 2], 51).map_err(|e| e.to_string())?;
    let layers = params.num_layers();
    let sched = BetaSchedule::default_for(6, 2);
    let batches = enumerate_batches(&p, &g, 2).map_err(|e| e.to_string())?;
    let mut steps = 0;
    for mode in [
        EstimatorMode::Lmc,
        EstimatorMode::LmcForwardOnly,
        EstimatorMode::Gas,
        EstimatorMode::Cluster,
    ] {
        let mut small_est = Estimator::new(mode, &params, g.num_nodes());
        let mut big_est = Estimator::new(mode, &params, big.num_nodes());
        for round in 0..2 {
            for batch in &batches {
                let big_batch =
                    MiniBatch::from_nodes(&big, batch.in_batch(), batch.cluster_ids.clone(), 6, 2)
                        .map_err(|e| e.to_string())?;
                let mut t_small = TouchLog::enabled();
                let mut t_big = TouchLog::enabled();
                small_est
                    .estimate(batch, &g, &adj, &params, &sched, &mut t_small)
                    .map_err(|e| e.to_string())?;
                big_est
                    .estimate(&big_batch, &big, &adj_big, &params, &sched, &mut t_big)
                    .map_err(|e| e.to_string())?;
                let closure = &batch.halo.closure;
                let tag = || format!("{mode} round {round} batch {:?}", batch.cluster_ids);
                check(
                    t_small
                        .nodes()
                        .iter()
                        .all(|i| closure.binary_search(i).is_ok()),
                    || format!("{}: touched a node outside the closure", tag()),
                )?;
                check(
                    t_big.nodes() == t_small.nodes() && t_big.events() == t_small.events(),
                    || format!("{}: touches changed with a far component", tag()),
                )?;
                let bound = closure.len() * (layers + 1) * 8;
                check(t_small.events() <= bound, || {
                    format!("{}: {} touches above {bound}", tag(), t_small.events())
                })?;
                steps += 1;
            }
        }
    }
    Ok(format!(
        "{steps} steps across 4 modes, no touch outside the closure, counts independent of n"
    ))
}

fn ablation() -> Outcome {
    let g = sbm(3, 16, 0.3, 0.05, 4, 0.5, 61);
    let adj = adjacency(&g);
    let p = partition_bfs(&g, 6, 61).map_err(|e| e.to_string())?;
    let params = init_glorot(&[4, 8, 8, 8, 2], 61).map_err(|e| e.to_string())?;
    let sched = BetaSchedule::default_for(6, 2);
    let lmc_est = Estimator::new(EstimatorMode::Lmc, &params, g.num_nodes());
    let mut cf = Estimator::new(EstimatorMode::LmcForwardOnly, &params, g.num_nodes());
    let mut engine =
        Engine::new(&g, &adj, &p, params, lmc_est, sched, 2, 62).map_err(|e| e.to_string())?;
    let mut differing = 0;
    for step in 1..=60 {
        let batch = engine.sample().map_err(|e| e.to_string())?;
        let current = engine.params().clone();
        let other = cf
            .estimate(
                &batch,
                &g,
                &adj,
                &current,
                &sched,
                &mut TouchLog::disabled(),
            )
            .map_err(|e| e.to_string())?;
        let report = engine.step_on(batch, 0.2).map_err(|e| e.to_string())?;
        let (a, b) = (
            report.estimate.temp.as_ref().unwrap(),
            other.temp.as_ref().unwrap(),
        );
        let fwd_equal = a.h_hat == b.h_hat
            && a.h_tilde == b.h_tilde
            && a.z_tilde == b.z_tilde
            && a.z_hat == b.z_hat;
        check(fwd_equal, || {
            format!("step {step}: forward temporaries differ")
        })?;
        let (sa, sb) = (engine.estimator().store().unwrap(), cf.store().unwrap());
        for l in 1..=current.num_layers() {
            check(
                bits(sa.embeddings(l)) == bits(sb.embeddings(l))
                    && bits(sa.preactivations(l)) == bits(sb.preactivations(l)),
                || format!("step {step}: forward cache of layer {l} differs"),
            )?;
        }
        if !report.batch.boundary().is_empty() {
            check(
                grad_bits(&report.estimate.grads) != grad_bits(&other.grads),
                || format!("step {step}: gradients equal despite a nonempty boundary"),
            )?;
            differing += 1;
        }
    }
    Ok(format!("60 steps: forward caches bitwise equal, gradients differ on all {differing} boundary steps"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("exact unbiasedness", unbiasedness),
        ("degenerate equivalence", degenerate_equivalence),
        ("mode identity", mode_identity),
        ("contraction of historical values", contraction),
        ("gradient error ordering", error_ordering),
        ("convergence", convergence),
        ("locality", locality),
        ("ablation semantics", ablation),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
