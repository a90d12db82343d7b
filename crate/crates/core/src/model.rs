//! GCN forward pass, softmax cross-entropy output head and parameter
//! initialization.
//!
//! Layer `l` computes, for every node `i`,
//! `z_i = theta_l * sum_{j in N(i) + i} a_ij h_j`, `h_i = relu(z_i)`, with the
//! last layer left linear. The output head maps `h_i^L` to logits via `w_out`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LmcError, Result};
use crate::graph::{Graph, NormalizedAdjacency};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `theta[l - 1]` maps dimension `d_{l-1}` to `d_l`.
    pub theta: Vec<DMatrix<f64>>,
    /// `[C × d_L]`
    pub w_out: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<DMatrix<f64>>, w_out: DMatrix<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(LmcError::invalid("model needs at least one layer"));
        }
        for (l, pair) in theta.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(LmcError::dims(format!(
                    "theta{} outputs {} but theta{} expects {}",
                    l + 1,
                    pair[0].nrows(),
                    l + 2,
                    pair[1].ncols()
                )));
            }
        }
        if w_out.ncols() != theta.last().unwrap().nrows() {
            return Err(LmcError::dims("w_out does not match the last layer width"));
        }
        Ok(Self { theta, w_out })
    }

    pub fn num_layers(&self) -> usize {
        self.theta.len()
    }

    /// `(d_0, ..., d_L, C)`
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.theta[0].ncols()];
        dims.extend(self.theta.iter().map(|t| t.nrows()));
        dims.push(self.w_out.nrows());
        dims
    }

    pub fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain([&self.w_out])
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            theta: self.theta.iter().map(|t| t * factor).collect(),
            w_out: &self.w_out * factor,
        }
    }

    /// All matrices in declared order: `theta_1 .. theta_L, w_out`.
    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.theta.iter().chain([&self.w_out])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut DMatrix<f64>> {
        self.theta.iter_mut().chain([&mut self.w_out])
    }

    /// Text checkpoint: a header with `L` and the dims, then every matrix
    /// row-major, one row per line.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "lmc-params 1").unwrap();
        writeln!(out, "layers {}", self.num_layers()).unwrap();
        let dims: Vec<String> = self.dims().iter().map(usize::to_string).collect();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        for m in self.matrices() {
            write_matrix(&mut out, m);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut reader = MatrixReader::new(&text, path);
        reader.expect_line("lmc-params 1")?;
        let layers = reader.keyed_usizes("layers")?;
        let dims = reader.keyed_usizes("dims")?;
        if layers.len() != 1 || dims.len() != layers[0] + 2 {
            return Err(reader.error("header does not match dims"));
        }
        let theta = (0..layers[0])
            .map(|l| reader.matrix(dims[l + 1], dims[l]))
            .collect::<Result<Vec<_>>>()?;
        let w_out = reader.matrix(dims[layers[0] + 1], dims[layers[0]])?;
        Self::new(theta, w_out)
    }
}

pub(crate) fn write_matrix(out: &mut String, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

/// Line cursor over the checkpoint and snapshot text formats.
pub(crate) struct MatrixReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    file: String,
    line: usize,
}

impl<'a> MatrixReader<'a> {
    pub(crate) fn new(text: &'a str, path: &Path) -> Self {
        Self {
            lines: text.lines().enumerate(),
            file: path.display().to_string(),
            line: 0,
        }
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> LmcError {
        LmcError::Parse {
            file: self.file.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((idx, line)) => {
                self.line = idx + 1;
                Ok(line.trim())
            }
            None => Err(self.error("unexpected end of file")),
        }
    }

    pub(crate) fn expect_line(&mut self, expected: &str) -> Result<()> {
        let line = self.next_line()?;
        if line != expected {
            return Err(self.error(format!("expected {expected:?}")));
        }
        Ok(())
    }

    pub(crate) fn keyed_usizes(&mut self, key: &str) -> Result<Vec<usize>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.error(format!("expected key {key:?}")));
        }
        parts
            .map(|t| {
                t.parse()
                    .map_err(|_| self.error(format!("bad integer {t:?}")))
            })
            .collect()
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let line = self.next_line()?;
            let values = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| self.error(format!("bad real {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != cols {
                return Err(self.error(format!("expected {cols} values, found {}", values.len())));
            }
            for (c, v) in values.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Ok(m)
    }
}

/// One Glorot-uniform `[fan_out × fan_in]` matrix, filled row-major.
pub fn glorot_matrix<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    DMatrix::from_row_slice(fan_out, fan_in, &values)
}

/// Glorot-uniform parameters for dims `(d_0, ..., d_L, C)`.
pub fn init_glorot(dims: &[usize], seed: u64) -> Result<ModelParams> {
    if dims.len() < 3 {
        return Err(LmcError::invalid(
            "dims must list d_0, at least one layer width, and C",
        ));
    }
    if dims.contains(&0) {
        return Err(LmcError::invalid("dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims.len() - 2;
    let theta = (0..layers)
        .map(|l| glorot_matrix(dims[l + 1], dims[l], &mut rng))
        .collect();
    let w_out = glorot_matrix(dims[layers + 1], dims[layers], &mut rng);
    ModelParams::new(theta, w_out)
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// ReLU derivative with `relu'(0) = 0`.
#[inline]
pub fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Applies the layer activation (ReLU, or identity on the last layer).
pub(crate) fn activate(z: &DVector<f64>, last_layer: bool) -> DVector<f64> {
    if last_layer {
        z.clone()
    } else {
        z.map(relu)
    }
}

/// `sigma'(z) ⊙ v` with the last-layer derivative fixed to one.
pub(crate) fn masked_delta(
    z: nalgebra::DVectorView<f64>,
    v: nalgebra::DVectorView<f64>,
    last_layer: bool,
) -> DVector<f64> {
    if last_layer {
        v.into_owned()
    } else {
        v.zip_map(&z, |v, z| relu_grad(z) * v)
    }
}

/// `acc += a * x`
#[inline]
pub(crate) fn axpy(acc: &mut DVector<f64>, a: f64, x: nalgebra::DVectorView<f64>) {
    acc.axpy(a, &x, 1.0);
}

/// Sorted node ids backing the columns of a per-node matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeIndex {
    ids: Vec<usize>,
}

impl NodeIndex {
    pub fn new(mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn all(n: usize) -> Self {
        Self {
            ids: (0..n).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.ids.binary_search(&node).ok()
    }
}

/// Per-layer embeddings and cached intermediates over an explicit node index.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub index: NodeIndex,
    /// `embeddings[l]` for `l = 0..=L`; layer 0 holds the input features.
    pub embeddings: Vec<DMatrix<f64>>,
    /// `preactivations[l - 1]` is `z^l` for `l = 1..=L`.
    pub preactivations: Vec<DMatrix<f64>>,
    /// `aggregated[l - 1]` is the normalized neighborhood sum fed to `theta_l`.
    pub aggregated: Vec<DMatrix<f64>>,
}

impl LayerState {
    pub fn num_layers(&self) -> usize {
        self.preactivations.len()
    }

    pub fn output(&self) -> &DMatrix<f64> {
        self.embeddings.last().unwrap()
    }

    pub fn z(&self, l: usize) -> &DMatrix<f64> {
        &self.preactivations[l - 1]
    }

    pub fn agg(&self, l: usize) -> &DMatrix<f64> {
        &self.aggregated[l - 1]
    }
}

pub struct LayerOutput {
    pub embeddings: DMatrix<f64>,
    pub preactivations: DMatrix<f64>,
    pub aggregated: DMatrix<f64>,
}

/// One message-passing layer over every node of `adj`.
pub fn layer_forward(
    adj: &NormalizedAdjacency,
    h_prev: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    last_layer: bool,
) -> Result<LayerOutput> {
    let n = adj.num_nodes();
    if h_prev.ncols() != n {
        return Err(LmcError::dims(format!(
            "embedding matrix has {} columns for {n} nodes",
            h_prev.ncols()
        )));
    }
    if theta.ncols() != h_prev.nrows() {
        return Err(LmcError::dims(format!(
            "theta expects {} inputs, embeddings have {}",
            theta.ncols(),
            h_prev.nrows()
        )));
    }
    let mut embeddings = DMatrix::zeros(theta.nrows(), n);
    let mut preactivations = DMatrix::zeros(theta.nrows(), n);
    let mut aggregated = DMatrix::zeros(h_prev.nrows(), n);
    for i in 0..n {
        let mut agg = DVector::zeros(h_prev.nrows());
        for (j, a) in adj.row(i) {
            axpy(&mut agg, a, h_prev.column(j));
        }
        let z = theta * &agg;
        embeddings.set_column(i, &activate(&z, last_layer));
        preactivations.set_column(i, &z);
        aggregated.set_column(i, &agg);
    }
    Ok(LayerOutput {
        embeddings,
        preactivations,
        aggregated,
    })
}

/// Exact forward pass of every node of `adj` from input features `x`.
pub fn forward_on(
    adj: &NormalizedAdjacency,
    x: &DMatrix<f64>,
    params: &ModelParams,
) -> Result<LayerState> {
    let layers = params.num_layers();
    let mut embeddings = vec![x.clone()];
    let mut preactivations = Vec::with_capacity(layers);
    let mut aggregated = Vec::with_capacity(layers);
    for (l, theta) in params.theta.iter().enumerate() {
        let out = layer_forward(adj, &embeddings[l], theta, l + 1 == layers)?;
        embeddings.push(out.embeddings);
        preactivations.push(out.preactivations);
        aggregated.push(out.aggregated);
    }
    Ok(LayerState {
        index: NodeIndex::all(adj.num_nodes()),
        embeddings,
        preactivations,
        aggregated,
    })
}

pub fn forward_full(
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &ModelParams,
) -> Result<LayerState> {
    if g.feature_dim() != params.theta[0].ncols() {
        return Err(LmcError::dims(format!(
            "features have {} dims, first layer expects {}",
            g.feature_dim(),
            params.theta[0].ncols()
        )));
    }
    forward_on(adj, g.features(), params)
}

/// Cross-entropy terms for a single node.
pub struct NodeHead {
    pub loss: f64,
    /// `softmax(logits) - one_hot(y)`
    pub dlogits: DVector<f64>,
}

pub fn node_head(w_out: &DMatrix<f64>, h: nalgebra::DVectorView<f64>, y: usize) -> NodeHead {
    let logits = w_out * h;
    let max = logits.max();
    let exp = logits.map(|v| (v - max).exp());
    let total = exp.sum();
    let loss = total.ln() + max - logits[y];
    let mut dlogits = exp / total;
    dlogits[y] -= 1.0;
    NodeHead { loss, dlogits }
}

/// `scale * w_out^T (softmax - one_hot)` for one node: its column of `dL/dH^L`.
pub(crate) fn scaled_output_grad(
    w_out: &DMatrix<f64>,
    head: &NodeHead,
    scale: f64,
) -> DVector<f64> {
    w_out.tr_mul(&head.dlogits) * scale
}

pub struct OutputGrad {
    pub loss: f64,
    /// `[d_L × n_active]`, zero outside `node_set`.
    pub dl_dh: DMatrix<f64>,
    /// Shaped like `w_out`.
    pub dl_dw: DMatrix<f64>,
}

/// Scaled softmax cross-entropy over `node_set` and its gradients with
/// respect to the last-layer embeddings and the output weights.
pub fn loss_and_output_grad(
    state: &LayerState,
    params: &ModelParams,
    g: &Graph,
    node_set: &[usize],
    scale: f64,
) -> Result<OutputGrad> {
    let h = state.output();
    let mut dl_dh = DMatrix::zeros(h.nrows(), h.ncols());
    let mut dl_dw = DMatrix::zeros(params.w_out.nrows(), params.w_out.ncols());
    let mut loss = 0.0;
    for &j in node_set {
        let pos = state
            .index
            .position(j)
            .ok_or_else(|| LmcError::invalid(format!("node {j} is not in the indexed set")))?;
        if !g.is_labeled(j) {
            return Err(LmcError::invalid(format!("node {j} is not labeled")));
        }
        let head = node_head(&params.w_out, h.column(pos), g.label(j));
        loss += head.loss;
        dl_dh.set_column(pos, &scaled_output_grad(&params.w_out, &head, scale));
        dl_dw.ger(1.0, &head.dlogits, &h.column(pos), 1.0);
    }
    Ok(OutputGrad {
        loss: loss * scale,
        dl_dh,
        dl_dw: dl_dw * scale,
    })
}

/// Full objective: mean cross-entropy over the labeled nodes.
pub fn full_loss(g: &Graph, adj: &NormalizedAdjacency, params: &ModelParams) -> Result<f64> {
    let state = forward_full(g, adj, params)?;
    let h = state.output();
    let labeled = g.labeled_nodes();
    let total: f64 = labeled
        .iter()
        .map(|&j| node_head(&params.w_out, h.column(j), g.label(j)).loss)
        .sum();
    Ok(total / labeled.len() as f64)
}

/// Argmax class per node of `state`.
pub fn predict(state: &LayerState, params: &ModelParams) -> Vec<usize> {
    let logits = &params.w_out * state.output();
    logits.column_iter().map(|col| col.argmax().0).collect()
}

/// Fraction of `nodes` whose prediction matches the label; `0` for an empty set.
pub fn accuracy(predictions: &[usize], g: &Graph, nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&i| predictions[i] == g.label(i))
        .count();
    hits as f64 / nodes.len() as f64
}
