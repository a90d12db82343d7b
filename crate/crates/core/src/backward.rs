//! Exact backward pass as message passing over auxiliary variables
//! `V^l = dL/dH^l`, the unbiased backward-SGD estimator and a central
//! finite-difference oracle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{LmcError, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::model::{
    axpy, forward_full, full_loss, loss_and_output_grad, masked_delta, LayerState, ModelParams,
};
use crate::partition::MiniBatch;

/// `v[l - 1]` holds `V^l` for `l = 1..=L`, one column per indexed node.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxVars {
    pub v: Vec<DMatrix<f64>>,
}

impl AuxVars {
    pub fn layer(&self, l: usize) -> &DMatrix<f64> {
        &self.v[l - 1]
    }
}

/// Gradients for every `theta_l` and for `w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub theta: Vec<DMatrix<f64>>,
    pub w_out: DMatrix<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            theta: params
                .theta
                .iter()
                .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
                .collect(),
            w_out: DMatrix::zeros(params.w_out.nrows(), params.w_out.ncols()),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.theta.iter().chain([&self.w_out])
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Euclidean norm of all entries together.
    pub fn norm(&self) -> f64 {
        self.matrices()
            .map(|m| m.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// `||g_l - exact_l|| / ||exact_l||` for each `theta_l`.
    pub fn relative_errors(&self, exact: &GradientSet) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&exact.theta)
            .map(|(g, e)| relative_error(g, e))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        self.matrices()
            .zip(other.matrices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Entrywise mean of several gradient sets.
    pub fn mean(sets: &[GradientSet]) -> Option<GradientSet> {
        let first = sets.first()?;
        let mut acc = first.clone();
        for s in &sets[1..] {
            for (a, b) in acc.theta.iter_mut().zip(&s.theta) {
                *a += b;
            }
            acc.w_out += &s.w_out;
        }
        let k = sets.len() as f64;
        for t in &mut acc.theta {
            *t /= k;
        }
        acc.w_out /= k;
        Some(acc)
    }

    /// Column-major flattening in declared order (`theta_1 .. theta_L, w_out`).
    pub fn to_vec(&self) -> Vec<f64> {
        self.matrices().flat_map(vectorize).collect()
    }

    /// One `layer,row,col,value` record per entry. `theta_l` uses layer `l`;
    /// `w_out` uses layer `L + 1`.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = String::from("layer,row,col,value\n");
        for (k, m) in self.matrices().enumerate() {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    writeln!(out, "{},{},{},{}", k + 1, r, c, m[(r, c)]).unwrap();
                }
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub fn relative_error(approx: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    let denom = exact.norm();
    let diff = (approx - exact).norm();
    if denom == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / denom
    }
}

/// Column-major vectorization: `A[(i, j)]` lands at `i + j * nrows`.
pub fn vectorize(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// `theta_l^T (sigma'(z_j^l) ⊙ V_j^l)` for every column `j`: the message a
/// node sends back to each of its neighbors through layer `l`.
pub(crate) fn backward_messages(
    theta: &DMatrix<f64>,
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
    last_layer: bool,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(theta.ncols(), v.ncols());
    for j in 0..v.ncols() {
        let delta = masked_delta(z.column(j), v.column(j), last_layer);
        out.set_column(j, &theta.tr_mul(&delta));
    }
    out
}

/// `V^l` from `V^{l+1}`:
/// `V_i^l = sum_{j in N(i) + i} a_ji theta_{l+1}^T (sigma'(z_j^{l+1}) ⊙ V_j^{l+1})`.
///
/// `l` indexes the output layer, so `l` ranges over `1..L`.
pub fn backward_layer(
    adj: &NormalizedAdjacency,
    state: &LayerState,
    params: &ModelParams,
    v_next: &DMatrix<f64>,
    l: usize,
) -> Result<DMatrix<f64>> {
    let layers = params.num_layers();
    if l == 0 || l >= layers {
        return Err(LmcError::invalid(format!(
            "backward layer {l} outside 1..{layers}"
        )));
    }
    let z_next = state.z(l + 1);
    if v_next.shape() != z_next.shape() || v_next.ncols() != adj.num_nodes() {
        return Err(LmcError::dims(format!(
            "V^{} has shape {:?}, expected {:?}",
            l + 1,
            v_next.shape(),
            z_next.shape()
        )));
    }
    let messages = backward_messages(&params.theta[l], z_next, v_next, l + 1 == layers);
    let mut v = DMatrix::zeros(params.theta[l].ncols(), adj.num_nodes());
    for i in 0..adj.num_nodes() {
        let mut acc = DVector::zeros(v.nrows());
        for (j, a) in adj.row(i) {
            axpy(&mut acc, a, messages.column(j));
        }
        v.set_column(i, &acc);
    }
    Ok(v)
}

/// Runs the backward recursion from `V^L` down to `V^1`.
pub fn backward_chain(
    adj: &NormalizedAdjacency,
    state: &LayerState,
    params: &ModelParams,
    v_top: DMatrix<f64>,
) -> Result<AuxVars> {
    let layers = params.num_layers();
    let mut v = vec![v_top];
    for l in (1..layers).rev() {
        let next = backward_layer(adj, state, params, &v[0], l)?;
        v.insert(0, next);
    }
    Ok(AuxVars { v })
}

/// `scale * sum_j (sigma'(z_j^l) ⊙ V_j^l) agg_j^T` over the given columns.
pub(crate) fn theta_gradient(
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
    agg: &DMatrix<f64>,
    columns: impl Iterator<Item = usize>,
    last_layer: bool,
    scale: f64,
) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(z.nrows(), agg.nrows());
    for j in columns {
        let delta = masked_delta(z.column(j), v.column(j), last_layer);
        g.ger(1.0, &delta, &agg.column(j), 1.0);
    }
    g * scale
}

/// Everything produced by one exact full-graph pass.
pub struct ExactPass {
    pub state: LayerState,
    pub aux: AuxVars,
    pub loss: f64,
    pub grads: GradientSet,
}

pub fn exact_pass(g: &Graph, adj: &NormalizedAdjacency, params: &ModelParams) -> Result<ExactPass> {
    let state = forward_full(g, adj, params)?;
    let labeled = g.labeled_nodes();
    let head = loss_and_output_grad(&state, params, g, &labeled, 1.0 / labeled.len() as f64)?;
    let aux = backward_chain(adj, &state, params, head.dl_dh)?;
    let layers = params.num_layers();
    let n = adj.num_nodes();
    let theta = (1..=layers)
        .map(|l| {
            theta_gradient(
                state.z(l),
                aux.layer(l),
                state.agg(l),
                0..n,
                l == layers,
                1.0,
            )
        })
        .collect();
    Ok(ExactPass {
        loss: head.loss,
        grads: GradientSet {
            theta,
            w_out: head.dl_dw,
        },
        state,
        aux,
    })
}

/// Exact gradient of the full objective.
pub fn full_gradients(
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
) -> Result<GradientSet> {
    Ok(exact_pass(g, adj, params)?.grads)
}

/// Backward SGD: exact embeddings and auxiliary variables from the whole
/// graph, summed over the batch only and reweighted by the sampling weights.
pub fn backward_sgd_gradients(
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
    batch: &MiniBatch,
) -> Result<GradientSet> {
    let pass = exact_pass(g, adj, params)?;
    Ok(backward_sgd_from_pass(&pass, g, params, batch))
}

pub(crate) fn backward_sgd_from_pass(
    pass: &ExactPass,
    g: &Graph,
    params: &ModelParams,
    batch: &MiniBatch,
) -> GradientSet {
    let layers = params.num_layers();
    let state = &pass.state;
    let theta = (1..=layers)
        .map(|l| {
            theta_gradient(
                state.z(l),
                pass.aux.layer(l),
                state.agg(l),
                batch.in_batch().iter().copied(),
                l == layers,
                batch.theta_scale(),
            )
        })
        .collect();
    let h = state.output();
    let mut w_out = DMatrix::zeros(params.w_out.nrows(), params.w_out.ncols());
    for &j in &batch.labeled_in_batch {
        let head = crate::model::node_head(&params.w_out, h.column(j), g.label(j));
        w_out.ger(1.0, &head.dlogits, &h.column(j), 1.0);
    }
    GradientSet {
        theta,
        w_out: w_out * batch.loss_scale(),
    }
}

/// Central differences `(L(p + h) - L(p - h)) / 2h` for every scalar parameter.
pub fn finite_diff_gradients(
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
    step: f64,
) -> Result<GradientSet> {
    if step.is_nan() || step <= 0.0 {
        return Err(LmcError::invalid("finite-difference step must be positive"));
    }
    let mut probe = params.clone();
    let mut out = GradientSet::zeros_like(params);
    let targets: Vec<&mut DMatrix<f64>> = out.theta.iter_mut().chain([&mut out.w_out]).collect();
    for (k, target) in targets.into_iter().enumerate() {
        for idx in 0..target.len() {
            let original = matrix_mut(&mut probe, k)[idx];
            matrix_mut(&mut probe, k)[idx] = original + step;
            let plus = full_loss(g, adj, &probe)?;
            matrix_mut(&mut probe, k)[idx] = original - step;
            let minus = full_loss(g, adj, &probe)?;
            matrix_mut(&mut probe, k)[idx] = original;
            target[idx] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

fn matrix_mut(params: &mut ModelParams, k: usize) -> &mut DMatrix<f64> {
    if k < params.theta.len() {
        &mut params.theta[k]
    } else {
        &mut params.w_out
    }
}
