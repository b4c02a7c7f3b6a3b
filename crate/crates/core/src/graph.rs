//! Directed weighted interaction graphs and their Laplacians.
//!
//! An edge `(i, j, a)` records that agent `i` senses agent `j` with weight
//! `a`, i.e. `j` belongs to the neighbor set of `i`. Information therefore
//! flows from `j` to `i`. A graph has a rooted-out branch when some vertex can
//! push information to every other vertex along edges taken in that direction.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};
// Shadowed by inherent methods whenever std is linked into the build.
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

/// Relative tolerance used to decide that a Laplacian eigenvalue is zero.
pub const ZERO_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("a graph needs at least one vertex")]
    Empty,
    #[error("edge ({i}, {j}) references a vertex outside 0..{n}")]
    VertexOutOfRange { i: usize, j: usize, n: usize },
    #[error("self-loop on vertex {0}")]
    SelfLoop(usize),
    #[error("edge ({i}, {j}) has non-positive or non-finite weight {weight}")]
    InvalidWeight { i: usize, j: usize, weight: f64 },
    #[error("duplicate edge ({i}, {j})")]
    DuplicateEdge { i: usize, j: usize },
    #[error("zero eigenvalue of the Laplacian is not simple (multiplicity {multiplicity})")]
    NoRootedOutBranch { multiplicity: usize },
    #[error("eigenvalue iteration did not converge")]
    EigenSolve,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// The sensing agent.
    pub i: usize,
    /// The sensed neighbor, `j ∈ N_i`.
    pub j: usize,
    pub weight: f64,
}

/// Immutable directed weighted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DiGraph {
    n: usize,
    edges: Vec<Edge>,
    // neighbors[i] = indices into `edges` with edge.i == i
    neighbors: Vec<Vec<usize>>,
}

impl DiGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut out = Vec::new();
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = vec![false; n * n];
        for (i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(GraphError::VertexOutOfRange { i, j, n });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !(weight.is_finite() && weight > 0.0) {
                return Err(GraphError::InvalidWeight { i, j, weight });
            }
            if core::mem::replace(&mut seen[i * n + j], true) {
                return Err(GraphError::DuplicateEdge { i, j });
            }
            neighbors[i].push(out.len());
            out.push(Edge { i, j, weight });
        }
        Ok(Self { n, edges: out, neighbors })
    }

    /// Graph on `n` vertices with every ordered pair connected by a unit edge.
    pub fn complete(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j, 1.0))))
    }

    /// Directed chain where information flows `0 → 1 → … → n-1`
    /// (vertex `k` senses vertex `k-1`).
    pub fn chain(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (1..n).map(|k| (k, k - 1, 1.0)))
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `i` (the agents `i` senses) with their weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.neighbors[i].iter().map(move |&e| (self.edges[e].j, self.edges[e].weight))
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.neighbors(i).find(|&(k, _)| k == j).map(|(_, w)| w)
    }

    /// Same edge set with new weights, given in edge order.
    pub fn reweighted(&self, weights: &[f64]) -> Result<Self, GraphError> {
        assert_eq!(weights.len(), self.edges.len(), "one weight per edge");
        Self::new(self.n, self.edges.iter().zip(weights).map(|(e, &w)| (e.i, e.j, w)))
    }

    /// Vertices reachable from `root` following the direction of information flow.
    pub fn influenced_by(&self, root: usize) -> Vec<bool> {
        let mut downstream = vec![Vec::new(); self.n];
        for e in &self.edges {
            downstream[e.j].push(e.i);
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &downstream[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen
    }

    /// A vertex that reaches every other vertex, if one exists.
    pub fn root(&self) -> Option<usize> {
        (0..self.n).find(|&r| self.influenced_by(r).iter().all(|&s| s))
    }
}

/// Checks whether some vertex has directed paths to all others.
pub fn has_rooted_out_branch(g: &DiGraph) -> bool {
    g.root().is_some()
}

/// Graph Laplacian: `l_ii = Σ_{k∈N_i} a_ik`, `l_ij = -a_ij` for `j ∈ N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(DMatrix<f64>);

impl Laplacian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn spectrum(&self) -> Result<Vec<Complex<f64>>, GraphError> {
        eigenvalues(&self.0)
    }
}

/// Eigenvalues of a dense square matrix.
///
/// The real Schur iteration stalls on some matrices with repeated eigenvalues
/// when deflating at machine precision, so this deflates at a slightly looser
/// threshold and caps the iteration count.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, GraphError> {
    for eps in [1e-14, 1e-12] {
        if let Some(schur) = Schur::try_new(m.clone(), eps, 10_000) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(GraphError::EigenSolve)
}

pub fn laplacian(g: &DiGraph) -> Laplacian {
    let mut l = DMatrix::zeros(g.n, g.n);
    for e in &g.edges {
        l[(e.i, e.j)] -= e.weight;
        l[(e.i, e.i)] += e.weight;
    }
    Laplacian(l)
}

/// Number of eigenvalues with `|λ| <= ZERO_EIGEN_TOL · max|λ|`.
pub fn zero_eigenvalue_multiplicity(spectrum: &[Complex<f64>]) -> usize {
    let scale = spectrum.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max);
    spectrum.iter().filter(|z| z.re.hypot(z.im) <= ZERO_EIGEN_TOL * scale).count()
}

/// Spectral form of the rooted-out-branch condition: exactly one zero
/// eigenvalue and every other eigenvalue in the open right half-plane.
pub fn spectrum_certifies_rooted_branch(spectrum: &[Complex<f64>]) -> bool {
    let scale = spectrum.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max);
    let tol = ZERO_EIGEN_TOL * scale;
    let zeros = spectrum.iter().filter(|z| z.re.hypot(z.im) <= tol).count();
    zeros == 1 && spectrum.iter().filter(|z| z.re.hypot(z.im) > tol).all(|z| z.re > 0.0)
}

/// Smallest real part among the nonzero eigenvalues; the consensus rate.
pub fn algebraic_connectivity(spectrum: &[Complex<f64>]) -> Option<f64> {
    let scale = spectrum.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max);
    spectrum.iter().filter(|z| z.re.hypot(z.im) > ZERO_EIGEN_TOL * scale).map(|z| z.re).reduce(f64::min)
}

/// Left eigenvector `w` of the zero eigenvalue, `w L = 0`, scaled so that
/// its entries sum to one.
pub fn zero_eigen_left_vector(l: &Laplacian) -> Result<DVector<f64>, GraphError> {
    let n = l.dim();
    let multiplicity = zero_eigenvalue_multiplicity(&l.spectrum()?);
    if multiplicity != 1 {
        return Err(GraphError::NoRootedOutBranch { multiplicity });
    }
    // Stack Lᵀ w = 0 with 1ᵀ w = 1 and solve in the least-squares sense.
    let mut a = DMatrix::zeros(n + 1, n);
    a.view_mut((0, 0), (n, n)).copy_from(&l.0.transpose());
    a.row_mut(n).fill(1.0);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let svd = a.svd(true, true);
    let mut w = svd.solve(&rhs, f64::EPSILON).expect("both singular factors were requested");
    // Entries are nonnegative in exact arithmetic; clear round-off below zero.
    for x in w.iter_mut() {
        if *x < 0.0 && x.abs() < 1e-12 {
            *x = 0.0;
        }
    }
    Ok(w)
}
