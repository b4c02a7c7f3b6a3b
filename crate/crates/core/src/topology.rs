//! Reference topologies and shapes used by scenario templates and tests.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::graph::DiGraph;

/// Sensing edges `(i, j)` of the six-agent reference network: a directed
/// ring `0 → 1 → … → 5 → 0` (in the direction of information flow) with
/// four chords. Strongly connected; the Laplacian has simple eigenvalues.
pub const SIX_AGENT_EDGES: [(usize, usize); 10] =
    [(1, 0), (2, 1), (3, 2), (4, 3), (5, 4), (0, 5), (2, 0), (4, 1), (5, 2), (3, 5)];

/// The six-agent reference network with unit weights.
pub fn six_agent() -> DiGraph {
    DiGraph::new(6, SIX_AGENT_EDGES.iter().map(|&(i, j)| (i, j, 1.0))).expect("reference edges are valid")
}

/// Desired shape for the six-agent network: a triangular prism.
pub fn six_agent_prism() -> Vec<Vector3<f64>> {
    let s = num_traits::Float::sqrt(3.0f64) / 2.0;
    alloc::vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(-0.5, s, 0.0),
        Vector3::new(-0.5, -s, 0.0),
        Vector3::new(1.0, 0.0, 1.5),
        Vector3::new(-0.5, s, 1.5),
        Vector3::new(-0.5, -s, 1.5),
    ]
}

/// Points spaced along a gentle helix; a non-degenerate shape for any `n`.
pub fn helix(n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|k| {
            let a = k as f64 * 1.1;
            Vector3::new(num_traits::Float::cos(a), num_traits::Float::sin(a), 0.4 * k as f64)
        })
        .collect()
}
