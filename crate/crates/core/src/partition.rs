//! Balanced BFS partitioning, cluster-union mini-batch sampling and the
//! sampling-weight normalization of the mini-batch gradients.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LmcError, Result};
use crate::graph::{halo_of, Graph, Halo};

/// Upper bound on the number of batches [`enumerate_batches`] will build.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

/// Disjoint cover of the node set by `B` clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    clusters: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition from a per-node cluster assignment. Every cluster id
    /// in `0..num_clusters` must be used.
    pub fn from_assignment(assignment: Vec<usize>, num_clusters: usize) -> Result<Self> {
        let mut clusters = vec![Vec::new(); num_clusters];
        for (node, &c) in assignment.iter().enumerate() {
            if c >= num_clusters {
                return Err(LmcError::invalid(format!(
                    "node {node} assigned to cluster {c}, but only {num_clusters} clusters"
                )));
            }
            clusters[c].push(node);
        }
        if let Some(empty) = clusters.iter().position(Vec::is_empty) {
            return Err(LmcError::invalid(format!("cluster {empty} is empty")));
        }
        Ok(Self {
            assignment,
            clusters,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster(&self, id: usize) -> &[usize] {
        &self.clusters[id]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Line `k` holds the cluster id of node `k`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in &self.assignment {
            writeln!(out, "{c}").unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut assignment = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let c: usize = line.parse().map_err(|_| LmcError::Parse {
                file: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad cluster id {line:?}"),
            })?;
            assignment.push(c);
        }
        let b = assignment.iter().max().map_or(0, |&c| c + 1);
        Self::from_assignment(assignment, b)
    }
}

/// Deterministic balanced partition by repeated breadth-first growth.
///
/// Each region starts at the lowest-id unassigned node and grows until it
/// holds `ceil(remaining / remaining_parts)` nodes; when its frontier runs dry
/// the growth restarts from the next lowest unassigned node. The seed only
/// shuffles the order in which a node's unassigned neighbors join the frontier.
pub fn partition_bfs(g: &Graph, num_clusters: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes();
    if num_clusters == 0 || num_clusters > n {
        return Err(LmcError::invalid(format!(
            "cluster count {num_clusters} must lie in 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![usize::MAX; n];
    let mut next_start = 0;
    let mut remaining = n;

    for part in 0..num_clusters {
        let target = remaining.div_ceil(num_clusters - part);
        let mut size = 0;
        let mut queue = VecDeque::new();
        while size < target {
            let Some(u) = queue.pop_front() else {
                while assignment[next_start] != usize::MAX {
                    next_start += 1;
                }
                assignment[next_start] = part;
                size += 1;
                queue.push_back(next_start);
                continue;
            };
            let mut fresh: Vec<usize> = g
                .neighbors(u)
                .iter()
                .copied()
                .filter(|&v| assignment[v] == usize::MAX)
                .collect();
            fresh.shuffle(&mut rng);
            for v in fresh {
                if size == target {
                    break;
                }
                assignment[v] = part;
                size += 1;
                queue.push_back(v);
            }
        }
        remaining -= size;
    }
    Partition::from_assignment(assignment, num_clusters)
}

/// A sampled union of clusters with its halo and sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub cluster_ids: Vec<usize>,
    pub halo: Halo,
    pub labeled_in_batch: Vec<usize>,
    /// `b |V_B| / (c |V|)`
    pub w_theta: f64,
    /// `b |V_LB| / (c |V_L|)`
    pub w_loss: f64,
    pub num_nodes: usize,
    pub num_labeled: usize,
}

impl MiniBatch {
    /// Batch over an explicit node set, weighted as if it were `c` of `b`
    /// uniformly drawn clusters.
    pub fn from_nodes(
        g: &Graph,
        nodes: &[usize],
        cluster_ids: Vec<usize>,
        b: usize,
        c: usize,
    ) -> Result<Self> {
        if c == 0 || c > b {
            return Err(LmcError::invalid(format!(
                "need 1 <= c <= B, got c={c}, B={b}"
            )));
        }
        let halo = halo_of(g, nodes)?;
        let labeled_in_batch: Vec<usize> = halo
            .in_batch
            .iter()
            .copied()
            .filter(|&i| g.is_labeled(i))
            .collect();
        let n = g.num_nodes();
        let n_l = g.num_labeled();
        let ratio = b as f64 / c as f64;
        Ok(Self {
            cluster_ids,
            w_theta: ratio * halo.in_batch.len() as f64 / n as f64,
            w_loss: ratio * labeled_in_batch.len() as f64 / n_l as f64,
            halo,
            labeled_in_batch,
            num_nodes: n,
            num_labeled: n_l,
        })
    }

    fn from_clusters(p: &Partition, g: &Graph, mut ids: Vec<usize>, c: usize) -> Result<Self> {
        ids.sort_unstable();
        let nodes: Vec<usize> = ids
            .iter()
            .flat_map(|&b| p.cluster(b).iter().copied())
            .collect();
        Self::from_nodes(g, &nodes, ids, p.num_clusters(), c)
    }

    pub fn in_batch(&self) -> &[usize] {
        &self.halo.in_batch
    }

    pub fn boundary(&self) -> &[usize] {
        &self.halo.boundary
    }

    /// Multiplier applied to in-batch sums for the `theta` gradients.
    pub fn theta_scale(&self) -> f64 {
        self.w_theta * (self.num_nodes as f64 / self.halo.in_batch.len() as f64)
    }

    /// Multiplier applied to in-batch labeled sums for the output-layer gradient.
    pub fn loss_scale(&self) -> f64 {
        if self.labeled_in_batch.is_empty() {
            0.0
        } else {
            self.w_loss / self.labeled_in_batch.len() as f64
        }
    }
}

/// Draws `c` distinct clusters uniformly without replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    p: &Partition,
    g: &Graph,
    c: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    let b = p.num_clusters();
    if c == 0 || c > b {
        return Err(LmcError::invalid(format!(
            "need 1 <= c <= B, got c={c}, B={b}"
        )));
    }
    let ids = rand::seq::index::sample(rng, b, c).into_vec();
    MiniBatch::from_clusters(p, g, ids, c)
}

/// Number of `c`-subsets of `b` items.
pub fn binomial(b: usize, c: usize) -> u128 {
    if c > b {
        return 0;
    }
    let c = c.min(b - c);
    (0..c).fold(1u128, |acc, i| acc * (b - i) as u128 / (i + 1) as u128)
}

/// Every `c`-combination of clusters as a batch, in lexicographic order.
pub fn enumerate_batches(p: &Partition, g: &Graph, c: usize) -> Result<Vec<MiniBatch>> {
    let b = p.num_clusters();
    if c == 0 || c > b {
        return Err(LmcError::invalid(format!(
            "need 1 <= c <= B, got c={c}, B={b}"
        )));
    }
    let count = binomial(b, c);
    if count > ENUMERATION_GUARD {
        return Err(LmcError::CombinatorialGuard {
            count,
            limit: ENUMERATION_GUARD,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut combo: Vec<usize> = (0..c).collect();
    loop {
        out.push(MiniBatch::from_clusters(p, g, combo.clone(), c)?);
        // advance to the next combination
        let Some(k) = (0..c).rev().find(|&k| combo[k] < b - c + k) else {
            break;
        };
        combo[k] += 1;
        for m in (k + 1)..c {
            combo[m] = combo[m - 1] + 1;
        }
    }
    Ok(out)
}
