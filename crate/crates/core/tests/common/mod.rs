#![allow(dead_code)]

use lmc_core::graph::{generate_sbm, normalize_adjacency, Graph, NormalizedAdjacency, SbmConfig};
use lmc_core::model::{forward_full, init_glorot, ModelParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sbm(
    blocks: usize,
    per_block: usize,
    p_in: f64,
    p_out: f64,
    d: usize,
    label_fraction: f64,
    seed: u64,
) -> Graph {
    generate_sbm(&SbmConfig {
        blocks,
        nodes_per_block: per_block,
        p_in,
        p_out,
        feature_dim: d,
        classes: 2,
        label_fraction,
        seed,
    })
    .unwrap()
}

/// The 24-node graph used by the enumeration and contraction checks.
pub fn sbm24(seed: u64) -> Graph {
    sbm(4, 6, 0.5, 0.08, 4, 0.5, seed)
}

/// The 600-node two-block graph used by the error and convergence runs.
pub fn sbm600(seed: u64) -> Graph {
    sbm(2, 300, 0.03, 0.005, 8, 0.3, seed)
}

/// Erdos-Renyi graph with Gaussian features and random labels.
pub fn random_graph(n: usize, p: f64, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let x = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
    mask[0] = true;
    Graph::new(n, &edges, x, labels, mask).unwrap()
}

/// Smallest `|z|` over every preactivation of the network.
pub fn min_abs_preactivation(g: &Graph, adj: &NormalizedAdjacency, params: &ModelParams) -> f64 {
    let state = forward_full(g, adj, params).unwrap();
    state
        .preactivations
        .iter()
        .flat_map(|z| z.iter().copied())
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

/// Glorot parameters scaled by 0.5, reseeded until every preactivation is at
/// least `margin` away from the ReLU kink.
pub fn smooth_params(
    g: &Graph,
    adj: &NormalizedAdjacency,
    dims: &[usize],
    seed: u64,
    margin: f64,
) -> ModelParams {
    for attempt in 0..1000u64 {
        let params = init_glorot(dims, seed.wrapping_mul(1000).wrapping_add(attempt))
            .unwrap()
            .scaled(0.5);
        if min_abs_preactivation(g, adj, &params) >= margin {
            return params;
        }
    }
    panic!("no parameter draw cleared the ReLU kink margin");
}

pub fn adjacency(g: &Graph) -> NormalizedAdjacency {
    normalize_adjacency(g)
}

pub fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
