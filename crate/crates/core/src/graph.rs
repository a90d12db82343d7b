//! Graph storage, GCN adjacency normalization, halo extraction and synthetic
//! data generation.
//!
//! Node embeddings and features are stored column-per-node: a `[d × n]`
//! matrix whose `i`-th column belongs to node `i`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LmcError, Result};

/// Standard deviation of the Gaussian noise added to SBM one-hot features.
pub const SBM_FEATURE_NOISE: f64 = 0.5;

/// Immutable undirected graph in CSR layout with node features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
    labeled_mask: Vec<bool>,
    num_labeled: usize,
    num_classes: usize,
}

impl Graph {
    /// Builds a validated graph. Edges are symmetrized and deduplicated;
    /// self-loops are dropped since the normalization adds them back.
    pub fn new(
        n: usize,
        edges: &[(usize, usize)],
        features: DMatrix<f64>,
        labels: Vec<usize>,
        labeled_mask: Vec<bool>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(LmcError::invalid("graph must have at least one node"));
        }
        if features.ncols() != n {
            return Err(LmcError::FeatureRowMismatch {
                expected: n,
                found: features.ncols(),
            });
        }
        if labels.len() != n || labeled_mask.len() != n {
            return Err(LmcError::LabelRowMismatch {
                expected: n,
                found: labels.len().min(labeled_mask.len()),
            });
        }
        if !labeled_mask.iter().any(|&m| m) {
            return Err(LmcError::invalid("graph needs at least one labeled node"));
        }

        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            for id in [u, v] {
                if id >= n {
                    return Err(LmcError::NodeOutOfRange { id, n });
                }
            }
            if u == v {
                continue;
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }

        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adjacency {
            list.sort_unstable();
            list.dedup();
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }

        let num_classes = labels.iter().max().map_or(0, |&c| c + 1);
        let num_labeled = labeled_mask.iter().filter(|&&m| m).count();
        Ok(Self {
            offsets,
            neighbors,
            features,
            labels,
            labeled_mask,
            num_labeled,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Sorted neighbor list of `node` (self excluded).
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn is_labeled(&self, node: usize) -> bool {
        self.labeled_mask[node]
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.labeled_mask[i])
            .collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.num_labeled
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Every undirected edge once, as `(u, v)` with `u < v`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    /// Places `other` after `self` with node ids shifted by `self.num_nodes()`.
    pub fn disjoint_union(&self, other: &Graph) -> Result<Graph> {
        if self.feature_dim() != other.feature_dim() {
            return Err(LmcError::dims("feature dimensions differ"));
        }
        let n0 = self.num_nodes();
        let n = n0 + other.num_nodes();
        let mut edges: Vec<(usize, usize)> = self.edges().collect();
        edges.extend(other.edges().map(|(u, v)| (u + n0, v + n0)));
        let features = DMatrix::from_fn(self.feature_dim(), n, |r, c| {
            if c < n0 {
                self.features[(r, c)]
            } else {
                other.features[(r, c - n0)]
            }
        });
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        let mask = self
            .labeled_mask
            .iter()
            .chain(&other.labeled_mask)
            .copied()
            .collect();
        Graph::new(n, &edges, features, labels, mask)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(LmcError::invalid("permutation length differs from n"));
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        let mut features = DMatrix::zeros(self.feature_dim(), n);
        let mut labels = vec![0; n];
        let mut mask = vec![false; n];
        for i in 0..n {
            features.set_column(perm[i], &self.features.column(i));
            labels[perm[i]] = self.labels[i];
            mask[perm[i]] = self.labeled_mask[i];
        }
        Graph::new(n, &edges, features, labels, mask)
    }

    /// Writes the three plain-text files read by [`load_graph`].
    pub fn write_files(&self, edges: &Path, features: &Path, labels: &Path) -> Result<()> {
        let mut out = String::new();
        for (u, v) in self.edges() {
            writeln!(out, "{u} {v}").unwrap();
        }
        fs::write(edges, out)?;

        let mut out = String::new();
        for col in self.features.column_iter() {
            let row: Vec<String> = col.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        fs::write(features, out)?;

        let mut out = String::new();
        for (y, m) in self.labels.iter().zip(&self.labeled_mask) {
            writeln!(out, "{},{}", y, u8::from(*m)).unwrap();
        }
        fs::write(labels, out)?;
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> LmcError {
    LmcError::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a graph from an edge list, a feature file and a label file.
///
/// The node count is the number of lines in the label file.
pub fn load_graph(edge_list: &Path, features: &Path, labels: &Path) -> Result<Graph> {
    let label_text = fs::read_to_string(labels)?;
    let mut ys = Vec::new();
    let mut mask = Vec::new();
    for (idx, line) in label_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (class, flag) = line
            .split_once(',')
            .ok_or_else(|| parse_err(labels, idx + 1, "expected \"class_id,flag\""))?;
        let class: usize = class
            .trim()
            .parse()
            .map_err(|_| parse_err(labels, idx + 1, format!("bad class id {class:?}")))?;
        let flag = match flag.trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(labels, idx + 1, format!("bad flag {other:?}"))),
        };
        ys.push(class);
        mask.push(flag);
    }
    let n = ys.len();

    let feature_text = fs::read_to_string(features)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in feature_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(features, idx + 1, format!("bad real {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    features,
                    idx + 1,
                    format!("expected {} values, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(LmcError::FeatureRowMismatch {
            expected: n,
            found: rows.len(),
        });
    }
    let d_x = rows.first().map_or(0, Vec::len);
    let feature_matrix = DMatrix::from_fn(d_x, n, |r, c| rows[c][r]);

    let edge_text = fs::read_to_string(edge_list)?;
    let mut edges = Vec::new();
    for (idx, line) in edge_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next_id = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| parse_err(edge_list, idx + 1, "expected \"u v\""))?;
            tok.parse()
                .map_err(|_| parse_err(edge_list, idx + 1, format!("bad node id {tok:?}")))
        };
        let u = next_id()?;
        let v = next_id()?;
        if parts.next().is_some() {
            return Err(parse_err(edge_list, idx + 1, "trailing tokens"));
        }
        edges.push((u, v));
    }

    Graph::new(n, &edges, feature_matrix, ys, mask)
}

/// Self-loop-augmented symmetric normalization
/// `a_ij = 1 / sqrt((deg(i) + 1) (deg(j) + 1))`.
///
/// Each row lists the closed neighborhood of a node (self included) in
/// ascending node order, which fixes the summation order of every
/// aggregation built on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    coeffs: Vec<f64>,
    diag: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.diag.len()
    }

    /// `(j, a_ij)` for `j` in the closed neighborhood of `i`, ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.coeffs[range].iter().copied())
    }

    pub fn self_coeff(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn coeff(&self, i: usize, j: usize) -> Option<f64> {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.cols[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| self.coeffs[range.start + k])
    }
}

/// GCN coefficient for a pair of nodes with (self-loop-free) degrees `di`, `dj`.
pub fn gcn_coeff(di: usize, dj: usize) -> f64 {
    1.0 / (((di + 1) * (dj + 1)) as f64).sqrt()
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.neighbors.len() + n);
    let mut coeffs = Vec::with_capacity(g.neighbors.len() + n);
    let mut diag = Vec::with_capacity(n);
    offsets.push(0);
    for i in 0..n {
        let di = g.degree(i);
        let mut self_done = false;
        for &j in g.neighbors(i) {
            if !self_done && j > i {
                cols.push(i);
                coeffs.push(gcn_coeff(di, di));
                self_done = true;
            }
            cols.push(j);
            coeffs.push(gcn_coeff(di, g.degree(j)));
        }
        if !self_done {
            cols.push(i);
            coeffs.push(gcn_coeff(di, di));
        }
        diag.push(gcn_coeff(di, di));
        offsets.push(cols.len());
    }
    NormalizedAdjacency {
        offsets,
        cols,
        coeffs,
        diag,
    }
}

/// Adjacency of the subgraph induced by sorted `nodes`, renormalized with
/// degrees counted inside the subgraph. Row `k` belongs to `nodes[k]` and
/// column indices are local positions.
pub fn induced_adjacency(g: &Graph, nodes: &[usize]) -> NormalizedAdjacency {
    let local: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&i| {
            g.neighbors(i)
                .iter()
                .filter_map(|j| nodes.binary_search(j).ok())
                .collect()
        })
        .collect();
    let mut offsets = vec![0];
    let mut cols = Vec::new();
    let mut coeffs = Vec::new();
    let mut diag = Vec::with_capacity(nodes.len());
    for (k, nb) in local.iter().enumerate() {
        let dk = nb.len();
        let mut row: Vec<usize> = nb.iter().copied().chain([k]).collect();
        row.sort_unstable();
        for j in row {
            cols.push(j);
            coeffs.push(gcn_coeff(dk, local[j].len()));
        }
        diag.push(gcn_coeff(dk, dk));
        offsets.push(cols.len());
    }
    NormalizedAdjacency {
        offsets,
        cols,
        coeffs,
        diag,
    }
}

/// In-batch node set together with its one-hop out-of-batch neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Halo {
    pub in_batch: Vec<usize>,
    pub boundary: Vec<usize>,
    pub closure: Vec<usize>,
}

impl Halo {
    pub fn contains_in_batch(&self, node: usize) -> bool {
        self.in_batch.binary_search(&node).is_ok()
    }

    pub fn contains_boundary(&self, node: usize) -> bool {
        self.boundary.binary_search(&node).is_ok()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.closure.binary_search(&node).is_ok()
    }
}

/// One-hop halo of `in_batch`. Only neighbor lists of in-batch nodes are read.
pub fn halo_of(g: &Graph, in_batch: &[usize]) -> Result<Halo> {
    if in_batch.is_empty() {
        return Err(LmcError::invalid("in-batch node set is empty"));
    }
    let n = g.num_nodes();
    let mut batch: Vec<usize> = in_batch.to_vec();
    batch.sort_unstable();
    batch.dedup();
    if let Some(&id) = batch.iter().find(|&&id| id >= n) {
        return Err(LmcError::NodeOutOfRange { id, n });
    }
    let boundary: BTreeSet<usize> = batch
        .iter()
        .flat_map(|&i| g.neighbors(i).iter().copied())
        .filter(|j| batch.binary_search(j).is_err())
        .collect();
    let boundary: Vec<usize> = boundary.into_iter().collect();
    let mut closure: Vec<usize> = batch.iter().chain(&boundary).copied().collect();
    closure.sort_unstable();
    Ok(Halo {
        in_batch: batch,
        boundary,
        closure,
    })
}

/// Parameters of the stochastic-block-model generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub classes: usize,
    pub label_fraction: f64,
    pub seed: u64,
}

/// Stochastic block model. Node `i` sits in block `i / nodes_per_block` and has
/// class `block % classes`; its features are `one_hot(class)` plus Gaussian noise.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Graph> {
    for (name, p) in [("p_in", cfg.p_in), ("p_out", cfg.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(LmcError::invalid(format!(
                "{name} = {p} is not a probability"
            )));
        }
    }
    let n = cfg.blocks * cfg.nodes_per_block;
    if n == 0 {
        return Err(LmcError::invalid("SBM has zero nodes"));
    }
    if cfg.classes == 0 || n < cfg.classes {
        return Err(LmcError::invalid("need at least one node per class"));
    }
    if cfg.feature_dim < cfg.classes {
        return Err(LmcError::invalid(
            "feature_dim must be at least the class count",
        ));
    }
    if !(cfg.label_fraction > 0.0 && cfg.label_fraction <= 1.0) {
        return Err(LmcError::invalid("label_fraction must lie in (0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = |i: usize| i / cfg.nodes_per_block;

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block(u) == block(v) {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| block(i) % cfg.classes).collect();
    let noise = Normal::new(0.0, SBM_FEATURE_NOISE).expect("valid sigma");
    let mut features = DMatrix::zeros(cfg.feature_dim, n);
    for i in 0..n {
        for r in 0..cfg.feature_dim {
            let one_hot = if r == labels[i] { 1.0 } else { 0.0 };
            features[(r, i)] = one_hot + noise.sample(&mut rng);
        }
    }

    let num_labeled = ((cfg.label_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut mask = vec![false; n];
    for &i in &order[..num_labeled] {
        mask[i] = true;
    }

    Graph::new(n, &edges, features, labels, mask)
}
