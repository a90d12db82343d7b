use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::backward::exact_pass;
use crate::error::{LmcError, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::model::{write_matrix, MatrixReader, ModelParams};

/// Per-node historical embeddings `H̄^l` (with their preactivations) for
/// `l = 1..=L` and historical auxiliary variables `V̄^l` for `l = 1..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalStore {
    h: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl HistoricalStore {
    /// Zero-initialized store for `n` nodes and layer widths `dims = (d_0, ..., d_L, C)`.
    pub fn zeros(dims: &[usize], n: usize) -> Self {
        let layers = dims.len() - 2;
        let h: Vec<_> = (1..=layers).map(|l| DMatrix::zeros(dims[l], n)).collect();
        let v = (1..layers).map(|l| DMatrix::zeros(dims[l], n)).collect();
        Self { z: h.clone(), h, v }
    }

    /// Store filled with the exact values at `params`.
    pub fn warm_start(g: &Graph, adj: &NormalizedAdjacency, params: &ModelParams) -> Result<Self> {
        let pass = exact_pass(g, adj, params)?;
        let layers = params.num_layers();
        Ok(Self {
            h: pass.state.embeddings[1..].to_vec(),
            z: pass.state.preactivations.clone(),
            v: pass.aux.v[..layers - 1].to_vec(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.h.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.h[0].ncols()
    }

    /// `H̄^l`, `l = 1..=L`.
    pub fn embeddings(&self, l: usize) -> &DMatrix<f64> {
        &self.h[l - 1]
    }

    /// Cached preactivations aligned with `H̄^l`.
    pub fn preactivations(&self, l: usize) -> &DMatrix<f64> {
        &self.z[l - 1]
    }

    /// `V̄^l`, `l = 1..L`.
    pub fn aux(&self, l: usize) -> &DMatrix<f64> {
        &self.v[l - 1]
    }

    pub(crate) fn embeddings_mut(&mut self, l: usize) -> &mut DMatrix<f64> {
        &mut self.h[l - 1]
    }

    pub(crate) fn preactivations_mut(&mut self, l: usize) -> &mut DMatrix<f64> {
        &mut self.z[l - 1]
    }

    pub(crate) fn aux_mut(&mut self, l: usize) -> &mut DMatrix<f64> {
        &mut self.v[l - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.h
            .iter()
            .chain(&self.z)
            .chain(&self.v)
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Snapshot: header with `L`, layer widths and `n`, then `H̄`, `z̄` for each
    /// layer and `V̄` for each inner layer, row-major.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "lmc-store 1").unwrap();
        writeln!(out, "layers {}", self.num_layers()).unwrap();
        let widths: Vec<String> = self.h.iter().map(|m| m.nrows().to_string()).collect();
        writeln!(out, "widths {}", widths.join(" ")).unwrap();
        writeln!(out, "nodes {}", self.num_nodes()).unwrap();
        for m in self.h.iter().chain(&self.z).chain(&self.v) {
            write_matrix(&mut out, m);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut reader = MatrixReader::new(&text, path);
        reader.expect_line("lmc-store 1")?;
        let layers = reader.keyed_usizes("layers")?;
        let widths = reader.keyed_usizes("widths")?;
        let nodes = reader.keyed_usizes("nodes")?;
        if layers.len() != 1 || nodes.len() != 1 || widths.len() != layers[0] || layers[0] == 0 {
            return Err(reader.error("inconsistent store header"));
        }
        let n = nodes[0];
        let h = widths
            .iter()
            .map(|&d| reader.matrix(d, n))
            .collect::<Result<Vec<_>>>()?;
        let z = widths
            .iter()
            .map(|&d| reader.matrix(d, n))
            .collect::<Result<Vec<_>>>()?;
        let v = widths[..widths.len() - 1]
            .iter()
            .map(|&d| reader.matrix(d, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h, z, v })
    }

    pub(crate) fn check_dims(&self, params: &ModelParams) -> Result<()> {
        let dims = params.dims();
        let ok = self.num_layers() == params.num_layers()
            && self
                .h
                .iter()
                .enumerate()
                .all(|(l, m)| m.nrows() == dims[l + 1]);
        if ok {
            Ok(())
        } else {
            Err(LmcError::dims("historical store does not match model dims"))
        }
    }
}

/// Node-level access log for one step: every feature read, store read, store
/// write and per-node update kernel records the node it touched.
#[derive(Debug, Clone, Default)]
pub struct TouchLog {
    enabled: bool,
    events: usize,
    nodes: BTreeSet<usize>,
}

impl TouchLog {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    #[inline]
    pub(crate) fn touch(&mut self, node: usize) {
        if self.enabled {
            self.events += 1;
            self.nodes.insert(node);
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Total number of recorded node accesses.
    pub fn events(&self) -> usize {
        self.events
    }

    /// Distinct nodes touched.
    pub fn nodes(&self) -> &BTreeSet<usize> {
        &self.nodes
    }

    pub fn clear(&mut self) {
        self.events = 0;
        self.nodes.clear();
    }
}
