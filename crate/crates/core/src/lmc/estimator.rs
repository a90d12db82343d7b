use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::backward::{
    backward_chain, backward_sgd_from_pass, exact_pass, theta_gradient, GradientSet,
};
use crate::error::{LmcError, Result};
use crate::graph::{induced_adjacency, Graph, NormalizedAdjacency};
use crate::lmc::beta::{boundary_betas, BetaSchedule};
use crate::lmc::compensated::{backward_compensated, forward_compensated, TempValues};
use crate::lmc::store::{HistoricalStore, TouchLog};
use crate::model::{forward_on, node_head, scaled_output_grad, LayerState, ModelParams};
use crate::partition::MiniBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorMode {
    FullBatch,
    BackwardSgd,
    Cluster,
    Gas,
    Lmc,
    LmcForwardOnly,
}

impl EstimatorMode {
    pub const ALL: [EstimatorMode; 6] = [
        EstimatorMode::FullBatch,
        EstimatorMode::BackwardSgd,
        EstimatorMode::Cluster,
        EstimatorMode::Gas,
        EstimatorMode::Lmc,
        EstimatorMode::LmcForwardOnly,
    ];

    /// Whether the mode keeps a historical store between steps.
    pub fn uses_history(self) -> bool {
        matches!(
            self,
            EstimatorMode::Gas | EstimatorMode::Lmc | EstimatorMode::LmcForwardOnly
        )
    }
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorMode::FullBatch => "FullBatch",
            EstimatorMode::BackwardSgd => "BackwardSGD",
            EstimatorMode::Cluster => "Cluster",
            EstimatorMode::Gas => "GAS",
            EstimatorMode::Lmc => "LMC",
            EstimatorMode::LmcForwardOnly => "LMC_ForwardOnly",
        };
        f.write_str(s)
    }
}

impl FromStr for EstimatorMode {
    type Err = LmcError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        match key.as_str() {
            "fullbatch" | "full" => Ok(EstimatorMode::FullBatch),
            "backwardsgd" => Ok(EstimatorMode::BackwardSgd),
            "cluster" => Ok(EstimatorMode::Cluster),
            "gas" => Ok(EstimatorMode::Gas),
            "lmc" => Ok(EstimatorMode::Lmc),
            "lmcforwardonly" | "lmccf" => Ok(EstimatorMode::LmcForwardOnly),
            _ => Err(LmcError::invalid(format!("unknown estimator mode {s:?}"))),
        }
    }
}

/// Gradient estimate for one batch plus the batch's training loss.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub grads: GradientSet,
    /// Mean cross-entropy over the labeled nodes the estimator trained on.
    pub loss: f64,
    /// Boundary temporaries of the compensated modes.
    pub temp: Option<TempValues>,
}

/// `loss_scale * sum_j (softmax - onehot) h_j^T` over the labeled batch nodes,
/// together with their mean cross-entropy.
fn output_head_terms(
    h: &DMatrix<f64>,
    ids: &[usize],
    g: &Graph,
    params: &ModelParams,
    batch: &MiniBatch,
) -> (DMatrix<f64>, f64) {
    let mut dw = DMatrix::zeros(params.w_out.nrows(), params.w_out.ncols());
    let mut loss = 0.0;
    for &j in &batch.labeled_in_batch {
        let p = ids.binary_search(&j).expect("labeled batch node indexed");
        let head = node_head(&params.w_out, h.column(p), g.label(j));
        loss += head.loss;
        dw.ger(1.0, &head.dlogits, &h.column(p), 1.0);
    }
    let mean_loss = if batch.labeled_in_batch.is_empty() {
        0.0
    } else {
        loss / batch.labeled_in_batch.len() as f64
    };
    (dw * batch.loss_scale(), mean_loss)
}

fn batch_gradients(
    state: &LayerState,
    aux: &crate::backward::AuxVars,
    g: &Graph,
    params: &ModelParams,
    batch: &MiniBatch,
) -> (GradientSet, f64) {
    let layers = params.num_layers();
    let cols = state.index.len();
    let theta = (1..=layers)
        .map(|l| {
            theta_gradient(
                state.z(l),
                aux.layer(l),
                state.agg(l),
                0..cols,
                l == layers,
                batch.theta_scale(),
            )
        })
        .collect();
    let (w_out, loss) = output_head_terms(state.output(), state.index.ids(), g, params, batch);
    (GradientSet { theta, w_out }, loss)
}

/// Cluster-GCN style estimate: both passes run on the subgraph induced by the
/// batch with subgraph-degree normalization; no historical values.
pub fn cluster_gradients(
    batch: &MiniBatch,
    g: &Graph,
    params: &ModelParams,
    touches: &mut TouchLog,
) -> Result<Estimate> {
    let ids = batch.in_batch();
    let adj = induced_adjacency(g, ids);
    let mut x = DMatrix::zeros(g.feature_dim(), ids.len());
    for (k, &i) in ids.iter().enumerate() {
        touches.touch(i);
        x.set_column(k, &g.features().column(i));
    }
    let mut state = forward_on(&adj, &x, params)?;
    state.index = crate::model::NodeIndex::new(ids.to_vec());

    let scale = 1.0 / g.num_labeled() as f64;
    let h = state.output();
    let mut v_top = DMatrix::zeros(h.nrows(), h.ncols());
    for (k, &i) in ids.iter().enumerate() {
        if g.is_labeled(i) {
            let head = node_head(&params.w_out, h.column(k), g.label(i));
            v_top.set_column(k, &scaled_output_grad(&params.w_out, &head, scale));
        }
    }
    let aux = backward_chain(&adj, &state, params, v_top)?;
    let (grads, loss) = batch_gradients(&state, &aux, g, params, batch);
    Ok(Estimate {
        grads,
        loss,
        temp: None,
    })
}

/// Gradient estimate of `mode` on `batch` at `params`. History-based modes need
/// `store`; the others ignore it.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradients(
    mode: EstimatorMode,
    store: Option<&mut HistoricalStore>,
    batch: &MiniBatch,
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
    sched: &BetaSchedule,
    touches: &mut TouchLog,
) -> Result<Estimate> {
    match mode {
        EstimatorMode::FullBatch => {
            let n = g.num_nodes();
            for i in 0..n {
                touches.touch(i);
            }
            let pass = exact_pass(g, adj, params)?;
            Ok(Estimate {
                grads: pass.grads,
                loss: pass.loss,
                temp: None,
            })
        }
        EstimatorMode::BackwardSgd => {
            for i in 0..g.num_nodes() {
                touches.touch(i);
            }
            let pass = exact_pass(g, adj, params)?;
            let grads = backward_sgd_from_pass(&pass, g, params, batch);
            let h = pass.state.output();
            let loss = if batch.labeled_in_batch.is_empty() {
                0.0
            } else {
                batch
                    .labeled_in_batch
                    .iter()
                    .map(|&j| node_head(&params.w_out, h.column(j), g.label(j)).loss)
                    .sum::<f64>()
                    / batch.labeled_in_batch.len() as f64
            };
            Ok(Estimate {
                grads,
                loss,
                temp: None,
            })
        }
        EstimatorMode::Cluster => cluster_gradients(batch, g, params, touches),
        EstimatorMode::Gas | EstimatorMode::Lmc | EstimatorMode::LmcForwardOnly => {
            let store = store
                .ok_or_else(|| LmcError::invalid(format!("{mode} needs a historical store")))?;
            let betas = match mode {
                EstimatorMode::Gas => vec![0.0; batch.boundary().len()],
                _ => boundary_betas(batch, g, sched),
            };
            let compensate = mode == EstimatorMode::Lmc;
            let (state, mut temp) =
                forward_compensated(store, batch, g, adj, params, &betas, touches)?;
            let aux = backward_compensated(
                store, batch, g, adj, params, &state, &mut temp, compensate, touches,
            )?;
            let (grads, loss) = batch_gradients(&state, &aux, g, params, batch);
            Ok(Estimate {
                grads,
                loss,
                temp: Some(temp),
            })
        }
    }
}

/// An estimator mode together with the historical store it owns.
#[derive(Debug, Clone)]
pub struct Estimator {
    mode: EstimatorMode,
    store: Option<HistoricalStore>,
}

impl Estimator {
    /// Zero-initialized history for modes that keep one.
    pub fn new(mode: EstimatorMode, params: &ModelParams, num_nodes: usize) -> Self {
        let store = mode
            .uses_history()
            .then(|| HistoricalStore::zeros(&params.dims(), num_nodes));
        Self { mode, store }
    }

    /// History filled with exact values at `params`.
    pub fn warm_started(
        mode: EstimatorMode,
        g: &Graph,
        adj: &NormalizedAdjacency,
        params: &ModelParams,
    ) -> Result<Self> {
        let store = if mode.uses_history() {
            Some(HistoricalStore::warm_start(g, adj, params)?)
        } else {
            None
        };
        Ok(Self { mode, store })
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn store(&self) -> Option<&HistoricalStore> {
        self.store.as_ref()
    }

    pub fn store_mut(&mut self) -> Option<&mut HistoricalStore> {
        self.store.as_mut()
    }

    pub fn estimate(
        &mut self,
        batch: &MiniBatch,
        g: &Graph,
        adj: &NormalizedAdjacency,
        params: &ModelParams,
        sched: &BetaSchedule,
        touches: &mut TouchLog,
    ) -> Result<Estimate> {
        minibatch_gradients(
            self.mode,
            self.store.as_mut(),
            batch,
            g,
            adj,
            params,
            sched,
            touches,
        )
    }
}
