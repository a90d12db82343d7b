use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::GradientSet;
use crate::error::{LmcError, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::lmc::beta::BetaSchedule;
use crate::lmc::estimator::{Estimate, Estimator, EstimatorMode};
use crate::lmc::store::TouchLog;
use crate::model::ModelParams;
use crate::partition::{sample_batch, MiniBatch, Partition};

/// Plain SGD step `p <- p - eta * g` on every parameter matrix.
pub fn sgd_update(params: &mut ModelParams, grads: &GradientSet, eta: f64) {
    for (p, g) in params.matrices_mut().zip(grads.matrices()) {
        *p -= g * eta;
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub batch: MiniBatch,
    pub estimate: Estimate,
    pub touches: TouchLog,
}

/// Training state for one estimator: parameters, history, batch sampler.
pub struct Engine<'a> {
    graph: &'a Graph,
    adj: &'a NormalizedAdjacency,
    partition: &'a Partition,
    params: ModelParams,
    estimator: Estimator,
    sched: BetaSchedule,
    batch_clusters: usize,
    rng: ChaCha8Rng,
    iteration: usize,
    track_touches: bool,
}

impl<'a> Engine<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &'a Graph,
        adj: &'a NormalizedAdjacency,
        partition: &'a Partition,
        params: ModelParams,
        estimator: Estimator,
        sched: BetaSchedule,
        batch_clusters: usize,
        sampler_seed: u64,
    ) -> Result<Self> {
        if batch_clusters == 0 || batch_clusters > partition.num_clusters() {
            return Err(LmcError::invalid(format!(
                "need 1 <= c <= B, got c={batch_clusters}, B={}",
                partition.num_clusters()
            )));
        }
        if partition.num_nodes() != graph.num_nodes() {
            return Err(LmcError::invalid("partition does not cover the graph"));
        }
        Ok(Self {
            graph,
            adj,
            partition,
            params,
            estimator,
            sched,
            batch_clusters,
            rng: ChaCha8Rng::seed_from_u64(sampler_seed),
            iteration: 0,
            track_touches: false,
        })
    }

    /// Records per-step node touches in each [`StepReport`].
    pub fn with_touch_tracking(mut self, on: bool) -> Self {
        self.track_touches = on;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn mode(&self) -> EstimatorMode {
        self.estimator.mode()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sample(&mut self) -> Result<MiniBatch> {
        sample_batch(
            self.partition,
            self.graph,
            self.batch_clusters,
            &mut self.rng,
        )
    }

    /// Estimates the gradient on `batch` and applies one SGD step.
    pub fn step_on(&mut self, batch: MiniBatch, eta: f64) -> Result<StepReport> {
        let iteration = self.iteration + 1;
        let mut touches = if self.track_touches {
            TouchLog::enabled()
        } else {
            TouchLog::disabled()
        };
        let estimate = self.estimator.estimate(
            &batch,
            self.graph,
            self.adj,
            &self.params,
            &self.sched,
            &mut touches,
        )?;
        if !estimate.loss.is_finite() || !estimate.grads.is_finite() {
            return Err(LmcError::Divergence { iteration });
        }
        sgd_update(&mut self.params, &estimate.grads, eta);
        self.iteration = iteration;
        Ok(StepReport {
            iteration,
            loss: estimate.loss,
            grad_norm: estimate.grads.norm(),
            batch,
            estimate,
            touches,
        })
    }

    /// Samples a batch, estimates, and updates the parameters.
    pub fn step(&mut self, eta: f64) -> Result<StepReport> {
        let batch = self.sample()?;
        self.step_on(batch, eta)
    }
}

/// One iteration of local-message-compensation training.
pub fn lmc_step(engine: &mut Engine<'_>, eta: f64) -> Result<StepReport> {
    if engine.mode() != EstimatorMode::Lmc {
        return Err(LmcError::invalid(format!(
            "lmc_step on an engine running {}",
            engine.mode()
        )));
    }
    engine.step(eta)
}
