//! Training and gradient-error runs with CSV metric rows.

use std::time::Instant;

use crate::backward::exact_pass;
use crate::error::{LmcError, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::lmc::{BetaSchedule, Engine, Estimator, EstimatorMode, TouchLog};
use crate::model::{accuracy, predict, ModelParams};
use crate::partition::Partition;

pub const TRAIN_HEADER: &str =
    "iteration,epoch,train_loss,full_batch_loss,train_acc,val_acc,test_acc,\
rel_err_mean,rel_err_layers,grad_norm,nodes_touched,wall_time_ms";

pub const GRAD_ERROR_HEADER: &str = "iteration,mode,rel_err_mean,rel_err_layers,nodes_touched";

/// Node splits used for accuracy: the labeled nodes train, the unlabeled ones
/// alternate between validation and test by ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn from_graph(g: &Graph) -> Self {
        let mut val = Vec::new();
        let mut test = Vec::new();
        let unlabeled = (0..g.num_nodes()).filter(|&i| !g.is_labeled(i));
        for (k, i) in unlabeled.enumerate() {
            if k % 2 == 0 {
                val.push(i);
            } else {
                test.push(i);
            }
        }
        Self {
            train: g.labeled_nodes(),
            val,
            test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub mode: EstimatorMode,
    pub batch_clusters: usize,
    pub lr: f64,
    pub iterations: usize,
    pub sched: BetaSchedule,
    pub sampler_seed: u64,
    /// Steps between metric rows; the last step always gets one.
    pub eval_every: usize,
    /// Fill the historical store with exact values before the first step.
    pub warm_start: bool,
}

impl TrainSettings {
    fn validate(&self, partition: &Partition) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LmcError::invalid(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if self.eval_every == 0 {
            return Err(LmcError::invalid("eval_every must be >= 1"));
        }
        let b = partition.num_clusters();
        if self.batch_clusters == 0 || self.batch_clusters > b {
            return Err(LmcError::invalid(format!(
                "need 1 <= c <= B, got c={}, B={b}",
                self.batch_clusters
            )));
        }
        Ok(())
    }
}

/// Evaluation cadence of one epoch, `ceil(B / c)` steps.
pub fn epoch_steps(num_clusters: usize, batch_clusters: usize) -> usize {
    num_clusters.div_ceil(batch_clusters.max(1)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: f64,
    /// Mean cross-entropy of the labeled batch nodes at the step.
    pub train_loss: f64,
    pub full_batch_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub rel_err_mean: f64,
    pub rel_err_layers: Vec<f64>,
    /// Full-batch gradient norm after the step.
    pub grad_norm: f64,
    pub nodes_touched: usize,
    pub wall_time_ms: f64,
}

fn join_layers(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.train_loss,
            self.full_batch_loss,
            self.train_acc,
            self.val_acc,
            self.test_acc,
            self.rel_err_mean,
            join_layers(&self.rel_err_layers),
            self.grad_norm,
            self.nodes_touched,
            self.wall_time_ms,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
}

fn estimator_for(
    mode: EstimatorMode,
    warm_start: bool,
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
) -> Result<Estimator> {
    if warm_start {
        Estimator::warm_started(mode, g, adj, params)
    } else {
        Ok(Estimator::new(mode, params, g.num_nodes()))
    }
}

/// Runs `settings.iterations` steps from `init`, handing each metric row to
/// `sink` as soon as it is computed. A divergent step returns
/// [`LmcError::Divergence`] after the earlier rows have been emitted.
pub fn run_training(
    g: &Graph,
    adj: &NormalizedAdjacency,
    partition: &Partition,
    init: ModelParams,
    settings: &TrainSettings,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    settings.validate(partition)?;
    let splits = Splits::from_graph(g);
    let estimator = estimator_for(settings.mode, settings.warm_start, g, adj, &init)?;
    let mut engine = Engine::new(
        g,
        adj,
        partition,
        init,
        estimator,
        settings.sched,
        settings.batch_clusters,
        settings.sampler_seed,
    )?
    .with_touch_tracking(true);

    let start = Instant::now();
    let steps_per_epoch = partition.num_clusters() as f64 / settings.batch_clusters as f64;
    let mut rows = Vec::new();
    for k in 1..=settings.iterations {
        let evaluate = k % settings.eval_every == 0 || k == settings.iterations;
        let exact_before = if evaluate {
            Some(exact_pass(g, adj, engine.params())?.grads)
        } else {
            None
        };
        let report = engine.step(settings.lr)?;
        let Some(exact) = exact_before else {
            continue;
        };
        let after = exact_pass(g, adj, engine.params())?;
        if !after.loss.is_finite() {
            return Err(LmcError::Divergence { iteration: k });
        }
        let predictions = predict(&after.state, engine.params());
        let rel_err_layers = report.estimate.grads.relative_errors(&exact);
        let row = MetricsRow {
            iteration: k,
            epoch: k as f64 / steps_per_epoch,
            train_loss: report.loss,
            full_batch_loss: after.loss,
            train_acc: accuracy(&predictions, g, &splits.train),
            val_acc: accuracy(&predictions, g, &splits.val),
            test_acc: accuracy(&predictions, g, &splits.test),
            rel_err_mean: mean(&rel_err_layers),
            rel_err_layers,
            grad_norm: after.grads.norm(),
            nodes_touched: report.touches.nodes().len(),
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(TrainOutcome {
        params: engine.params().clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradErrorRow {
    pub iteration: usize,
    pub mode: EstimatorMode,
    pub rel_err_layers: Vec<f64>,
    pub nodes_touched: usize,
}

impl GradErrorRow {
    pub fn rel_err_mean(&self) -> f64 {
        mean(&self.rel_err_layers)
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration,
            self.mode,
            self.rel_err_mean(),
            join_layers(&self.rel_err_layers),
            self.nodes_touched
        )
    }
}

/// Over-steps averages of one mode's measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct GradErrorSummary {
    pub mode: EstimatorMode,
    pub measured_steps: usize,
    pub rel_err_mean: f64,
    pub rel_err_layers: Vec<f64>,
    pub nodes_touched: f64,
}

impl GradErrorSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "summary,{},{},{},{}",
            self.mode,
            self.rel_err_mean,
            join_layers(&self.rel_err_layers),
            self.nodes_touched
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradErrorSettings {
    pub batch_clusters: usize,
    pub lr: f64,
    pub iterations: usize,
    pub sched: BetaSchedule,
    pub sampler_seed: u64,
    pub warm_start: bool,
    /// Steps before the first measurement.
    pub warmup: usize,
    pub measure_every: usize,
}

/// Trains with the first of `modes`. Every listed estimator runs on each
/// sampled batch at the current parameters, so history-based modes keep
/// their own stores up to date; after `warmup` steps, every
/// `measure_every`-th step compares each estimate with the exact gradient.
pub fn run_grad_error(
    g: &Graph,
    adj: &NormalizedAdjacency,
    partition: &Partition,
    init: ModelParams,
    modes: &[EstimatorMode],
    settings: &GradErrorSettings,
    sink: &mut dyn FnMut(&GradErrorRow) -> Result<()>,
) -> Result<Vec<GradErrorSummary>> {
    let Some((&lead, others)) = modes.split_first() else {
        return Err(LmcError::invalid("grad-error needs at least one mode"));
    };
    if modes.contains(&EstimatorMode::FullBatch) {
        return Err(LmcError::invalid(
            "FullBatch is the reference, not a grad-error mode",
        ));
    }
    if settings.measure_every == 0 {
        return Err(LmcError::invalid("measure_every must be >= 1"));
    }
    let train = TrainSettings {
        mode: lead,
        batch_clusters: settings.batch_clusters,
        lr: settings.lr,
        iterations: settings.iterations,
        sched: settings.sched,
        sampler_seed: settings.sampler_seed,
        eval_every: 1,
        warm_start: settings.warm_start,
    };
    train.validate(partition)?;

    let mut side = others
        .iter()
        .map(|&m| estimator_for(m, settings.warm_start, g, adj, &init))
        .collect::<Result<Vec<_>>>()?;
    let lead_estimator = estimator_for(lead, settings.warm_start, g, adj, &init)?;
    let mut engine = Engine::new(
        g,
        adj,
        partition,
        init,
        lead_estimator,
        settings.sched,
        settings.batch_clusters,
        settings.sampler_seed,
    )?
    .with_touch_tracking(true);

    let mut sums: Vec<(usize, Vec<f64>, f64)> = vec![(0, Vec::new(), 0.0); modes.len()];
    let mut record = |slot: usize, row: &GradErrorRow| {
        let (count, layers, touched) = &mut sums[slot];
        if layers.is_empty() {
            *layers = vec![0.0; row.rel_err_layers.len()];
        }
        for (acc, e) in layers.iter_mut().zip(&row.rel_err_layers) {
            *acc += e;
        }
        *count += 1;
        *touched += row.nodes_touched as f64;
    };

    for k in 1..=settings.iterations {
        let measure =
            k > settings.warmup && (k - settings.warmup).is_multiple_of(settings.measure_every);
        let batch = engine.sample()?;
        let exact = if measure {
            Some(exact_pass(g, adj, engine.params())?.grads)
        } else {
            None
        };

        let mut side_rows = Vec::with_capacity(side.len());
        for est in side.iter_mut() {
            let mut touches = TouchLog::enabled();
            let e = est.estimate(
                &batch,
                g,
                adj,
                engine.params(),
                &settings.sched,
                &mut touches,
            )?;
            if !e.grads.is_finite() {
                return Err(LmcError::Divergence { iteration: k });
            }
            side_rows.push((est.mode(), e.grads, touches.nodes().len()));
        }

        let report = engine.step_on(batch, settings.lr)?;
        let Some(exact) = exact else {
            continue;
        };
        let lead_row = (lead, report.estimate.grads, report.touches.nodes().len());
        for (slot, (mode, grads, touched)) in std::iter::once(lead_row).chain(side_rows).enumerate()
        {
            let row = GradErrorRow {
                iteration: k,
                mode,
                rel_err_layers: grads.relative_errors(&exact),
                nodes_touched: touched,
            };
            sink(&row)?;
            record(slot, &row);
        }
    }

    Ok(modes
        .iter()
        .zip(sums)
        .map(|(&mode, (count, layers, touched))| {
            let denom = count.max(1) as f64;
            let rel_err_layers: Vec<f64> = layers.iter().map(|s| s / denom).collect();
            GradErrorSummary {
                mode,
                measured_steps: count,
                rel_err_mean: mean(&rel_err_layers),
                rel_err_layers,
                nodes_touched: touched / denom,
            }
        })
        .collect())
}
