//! Compensated forward and backward passes over the batch closure.
//!
//! In-batch nodes are recomputed from fresh in-batch values plus temporary
//! values of their out-of-batch neighbors (the compensation messages), and the
//! results are written to the historical store. Boundary nodes get temporary
//! values: a convex combination of their stored historical value and an
//! incomplete up-to-date value that only sees messages from inside the closure.
//! Nothing outside the closure is ever read or written.

use nalgebra::{DMatrix, DVector};

use crate::backward::{backward_messages, AuxVars};
use crate::error::{LmcError, Result};
use crate::graph::{Graph, Halo, NormalizedAdjacency};
use crate::lmc::store::{HistoricalStore, TouchLog};
use crate::model::{
    activate, axpy, node_head, scaled_output_grad, LayerState, ModelParams, NodeIndex,
};
use crate::partition::MiniBatch;

/// Temporary values of the boundary nodes; columns follow `batch.boundary()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TempValues {
    pub betas: Vec<f64>,
    /// `h_hat[l]` for `l = 0..=L`; layer 0 is the input features.
    pub h_hat: Vec<DMatrix<f64>>,
    /// `h_tilde[l - 1]` for `l = 1..=L`.
    pub h_tilde: Vec<DMatrix<f64>>,
    /// Preactivations behind `h_tilde`.
    pub z_tilde: Vec<DMatrix<f64>>,
    /// `(1 - beta) z_bar + beta z_tilde`; the backward pass differentiates the
    /// boundary activations at these points.
    pub z_hat: Vec<DMatrix<f64>>,
    /// `v_hat[l - 1]` for `l = 1..=L`; empty until a compensated backward pass runs.
    pub v_hat: Vec<DMatrix<f64>>,
    /// `v_tilde[l - 1]` for `l = 1..L`.
    pub v_tilde: Vec<DMatrix<f64>>,
}

#[derive(Clone, Copy)]
enum Slot {
    InBatch(usize),
    Boundary(usize),
    Outside,
}

fn locate(halo: &Halo, node: usize) -> Slot {
    if let Ok(p) = halo.in_batch.binary_search(&node) {
        Slot::InBatch(p)
    } else if let Ok(q) = halo.boundary.binary_search(&node) {
        Slot::Boundary(q)
    } else {
        Slot::Outside
    }
}

fn gather_columns(m: &DMatrix<f64>, ids: &[usize], touches: &mut TouchLog) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), ids.len());
    for (k, &i) in ids.iter().enumerate() {
        touches.touch(i);
        out.set_column(k, &m.column(i));
    }
    out
}

fn scatter_columns(
    src: &DMatrix<f64>,
    dst: &mut DMatrix<f64>,
    ids: &[usize],
    touches: &mut TouchLog,
) {
    for (k, &i) in ids.iter().enumerate() {
        touches.touch(i);
        dst.set_column(i, &src.column(k));
    }
}

/// `(1 - beta) * historical + beta * incomplete`
#[inline]
fn convex(
    historical: nalgebra::DVectorView<f64>,
    incomplete: &DVector<f64>,
    beta: f64,
) -> DVector<f64> {
    historical * (1.0 - beta) + incomplete * beta
}

/// Forward pass with local message compensation. Returns the in-batch state
/// (embeddings equal to the freshly written historical values) and the
/// boundary temporaries.
pub fn forward_compensated(
    store: &mut HistoricalStore,
    batch: &MiniBatch,
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
    betas: &[f64],
    touches: &mut TouchLog,
) -> Result<(LayerState, TempValues)> {
    store.check_dims(params)?;
    if g.feature_dim() != params.theta[0].ncols() {
        return Err(LmcError::dims("features do not match the first layer"));
    }
    let halo = &batch.halo;
    let in_ids = &halo.in_batch;
    let bd_ids = &halo.boundary;
    if betas.len() != bd_ids.len() {
        return Err(LmcError::dims(format!(
            "{} betas for {} boundary nodes",
            betas.len(),
            bd_ids.len()
        )));
    }
    let layers = params.num_layers();

    let mut h_in = vec![gather_columns(g.features(), in_ids, touches)];
    let mut h_hat = vec![gather_columns(g.features(), bd_ids, touches)];
    let h_bar_bd: Vec<DMatrix<f64>> = (1..=layers)
        .map(|l| gather_columns(store.embeddings(l), bd_ids, touches))
        .collect();
    let z_bar_bd: Vec<DMatrix<f64>> = (1..=layers)
        .map(|l| gather_columns(store.preactivations(l), bd_ids, touches))
        .collect();

    let mut z_in = Vec::with_capacity(layers);
    let mut agg_in = Vec::with_capacity(layers);
    let mut h_tilde = Vec::with_capacity(layers);
    let mut z_tilde = Vec::with_capacity(layers);
    let mut z_hat = Vec::with_capacity(layers);

    for l in 1..=layers {
        let theta = &params.theta[l - 1];
        let last = l == layers;
        let d_in = theta.ncols();
        let prev_in = &h_in[l - 1];
        let prev_bd = &h_hat[l - 1];

        let mut h_l = DMatrix::zeros(theta.nrows(), in_ids.len());
        let mut z_l = DMatrix::zeros(theta.nrows(), in_ids.len());
        let mut a_l = DMatrix::zeros(d_in, in_ids.len());
        for (p, &i) in in_ids.iter().enumerate() {
            touches.touch(i);
            let mut agg = DVector::zeros(d_in);
            for (j, a) in adj.row(i) {
                match locate(halo, j) {
                    Slot::InBatch(q) => axpy(&mut agg, a, prev_in.column(q)),
                    Slot::Boundary(q) => axpy(&mut agg, a, prev_bd.column(q)),
                    Slot::Outside => {
                        return Err(LmcError::invalid(format!(
                            "neighbor {j} of in-batch node {i} missing from halo"
                        )))
                    }
                }
            }
            let z = theta * &agg;
            h_l.set_column(p, &activate(&z, last));
            z_l.set_column(p, &z);
            a_l.set_column(p, &agg);
        }

        let mut ht_l = DMatrix::zeros(theta.nrows(), bd_ids.len());
        let mut zt_l = DMatrix::zeros(theta.nrows(), bd_ids.len());
        let mut hh_l = DMatrix::zeros(theta.nrows(), bd_ids.len());
        let mut zh_l = DMatrix::zeros(theta.nrows(), bd_ids.len());
        for (q, &i) in bd_ids.iter().enumerate() {
            touches.touch(i);
            let mut agg = DVector::zeros(d_in);
            for (j, a) in adj.row(i) {
                match locate(halo, j) {
                    Slot::InBatch(p) => axpy(&mut agg, a, prev_in.column(p)),
                    Slot::Boundary(r) => axpy(&mut agg, a, prev_bd.column(r)),
                    Slot::Outside => {}
                }
            }
            let z = theta * &agg;
            let h = activate(&z, last);
            hh_l.set_column(q, &convex(h_bar_bd[l - 1].column(q), &h, betas[q]));
            zh_l.set_column(q, &convex(z_bar_bd[l - 1].column(q), &z, betas[q]));
            ht_l.set_column(q, &h);
            zt_l.set_column(q, &z);
        }

        scatter_columns(&h_l, store.embeddings_mut(l), in_ids, touches);
        scatter_columns(&z_l, store.preactivations_mut(l), in_ids, touches);

        h_in.push(h_l);
        z_in.push(z_l);
        agg_in.push(a_l);
        h_hat.push(hh_l);
        h_tilde.push(ht_l);
        z_tilde.push(zt_l);
        z_hat.push(zh_l);
    }

    Ok((
        LayerState {
            index: NodeIndex::new(in_ids.clone()),
            embeddings: h_in,
            preactivations: z_in,
            aggregated: agg_in,
        },
        TempValues {
            betas: betas.to_vec(),
            h_hat,
            h_tilde,
            z_tilde,
            z_hat,
            v_hat: Vec::new(),
            v_tilde: Vec::new(),
        },
    ))
}

/// Loss-gradient column for each node of `ids`, zero for unlabeled nodes.
fn top_aux(
    h: &DMatrix<f64>,
    ids: &[usize],
    g: &Graph,
    params: &ModelParams,
    scale: f64,
    touches: &mut TouchLog,
) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(h.nrows(), ids.len());
    for (k, &i) in ids.iter().enumerate() {
        touches.touch(i);
        if g.is_labeled(i) {
            let head = node_head(&params.w_out, h.column(k), g.label(i));
            v.set_column(k, &scaled_output_grad(&params.w_out, &head, scale));
        }
    }
    v
}

/// Backward pass over the closure. With `compensate` off, messages from
/// boundary nodes are dropped and no boundary temporaries are computed.
///
/// Returns the in-batch auxiliary variables; `V̄^l` for `l < L` is also
/// written to the store, and `temp.v_hat`/`temp.v_tilde` are filled.
#[allow(clippy::too_many_arguments)]
pub fn backward_compensated(
    store: &mut HistoricalStore,
    batch: &MiniBatch,
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
    state: &LayerState,
    temp: &mut TempValues,
    compensate: bool,
    touches: &mut TouchLog,
) -> Result<AuxVars> {
    store.check_dims(params)?;
    let halo = &batch.halo;
    let in_ids = &halo.in_batch;
    let bd_ids = &halo.boundary;
    let layers = params.num_layers();
    if state.index.ids() != in_ids.as_slice() || temp.h_hat.len() != layers + 1 {
        return Err(LmcError::invalid(
            "forward state does not belong to this batch",
        ));
    }
    let scale = 1.0 / g.num_labeled() as f64;

    let mut v_in = vec![DMatrix::zeros(0, 0); layers];
    v_in[layers - 1] = top_aux(state.output(), in_ids, g, params, scale, touches);
    let mut v_hat = vec![DMatrix::zeros(0, 0); layers];
    let mut v_tilde = vec![DMatrix::zeros(0, 0); layers.saturating_sub(1)];
    let v_bar_bd: Vec<DMatrix<f64>> = if compensate {
        v_hat[layers - 1] = top_aux(&temp.h_hat[layers], bd_ids, g, params, scale, touches);
        (1..layers)
            .map(|l| gather_columns(store.aux(l), bd_ids, touches))
            .collect()
    } else {
        Vec::new()
    };

    for l in (1..layers).rev() {
        let theta = &params.theta[l];
        let last = l + 1 == layers;
        let msg_in = backward_messages(theta, state.z(l + 1), &v_in[l], last);
        let msg_bd = if compensate {
            Some(backward_messages(theta, &temp.z_hat[l], &v_hat[l], last))
        } else {
            None
        };
        let d = theta.ncols();

        let mut v_l = DMatrix::zeros(d, in_ids.len());
        for (p, &i) in in_ids.iter().enumerate() {
            touches.touch(i);
            let mut acc = DVector::zeros(d);
            for (j, a) in adj.row(i) {
                match (locate(halo, j), &msg_bd) {
                    (Slot::InBatch(q), _) => axpy(&mut acc, a, msg_in.column(q)),
                    (Slot::Boundary(q), Some(bd)) => axpy(&mut acc, a, bd.column(q)),
                    (Slot::Boundary(_), None) => {}
                    (Slot::Outside, _) => {
                        return Err(LmcError::invalid(format!(
                            "neighbor {j} of in-batch node {i} missing from halo"
                        )))
                    }
                }
            }
            v_l.set_column(p, &acc);
        }

        if let Some(bd) = &msg_bd {
            let mut vt_l = DMatrix::zeros(d, bd_ids.len());
            let mut vh_l = DMatrix::zeros(d, bd_ids.len());
            for (q, &i) in bd_ids.iter().enumerate() {
                touches.touch(i);
                let mut acc = DVector::zeros(d);
                for (j, a) in adj.row(i) {
                    match locate(halo, j) {
                        Slot::InBatch(p) => axpy(&mut acc, a, msg_in.column(p)),
                        Slot::Boundary(r) => axpy(&mut acc, a, bd.column(r)),
                        Slot::Outside => {}
                    }
                }
                vh_l.set_column(q, &convex(v_bar_bd[l - 1].column(q), &acc, temp.betas[q]));
                vt_l.set_column(q, &acc);
            }
            v_hat[l - 1] = vh_l;
            v_tilde[l - 1] = vt_l;
        }

        scatter_columns(&v_l, store.aux_mut(l), in_ids, touches);
        v_in[l - 1] = v_l;
    }

    if compensate {
        temp.v_hat = v_hat;
        temp.v_tilde = v_tilde;
    } else {
        temp.v_hat.clear();
        temp.v_tilde.clear();
    }
    Ok(AuxVars { v: v_in })
}
