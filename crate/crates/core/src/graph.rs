//! KNN channel graphs: adjacency, degree and Laplacian.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Per-sample channel graph. `adjacency` is binary and symmetric with a
/// zero diagonal; self-loops are only added by the encoder-facing views.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGraph {
    pub adjacency: Tensor,
    pub degree: Vec<usize>,
    pub laplacian: Tensor,
    pub node_features: Tensor,
}

/// Symmetric KNN adjacency over the rows of `features [C × F]` by
/// Euclidean distance. Ties go to the lower node index; an edge exists if
/// either endpoint picked the other.
pub fn knn_adjacency(features: &Tensor, k: usize) -> Result<Tensor> {
    if features.rank() != 2 {
        bail!(Shape, "features must be [nodes x dims], got {:?}", features.shape());
    }
    let c = features.dim(0);
    if k < 1 || k + 1 > c {
        bail!(Config, "k = {k} outside 1..={} for {c} nodes", c.saturating_sub(1));
    }
    if !features.is_finite() {
        bail!(Validation, "graph features must be finite");
    }
    let mut adj = Tensor::zeros(&[c, c]);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(c - 1);
    for i in 0..c {
        cand.clear();
        let fi = features.row(i);
        for j in (0..c).filter(|&j| j != i) {
            let d2: f64 = fi.iter().zip(features.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2, j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &cand[..k] {
            adj.set2(i, j, 1.0);
            adj.set2(j, i, 1.0);
        }
    }
    Ok(adj)
}

/// Assembles `A`, `D` and `L = D − A` from the KNN adjacency of `features`.
pub fn build_graph(features: &Tensor, k: usize) -> Result<ChannelGraph> {
    let adjacency = knn_adjacency(features, k)?;
    Ok(ChannelGraph::from_adjacency(adjacency, features.clone()))
}

impl ChannelGraph {
    /// Builds degrees and Laplacian for a given binary adjacency.
    pub fn from_adjacency(adjacency: Tensor, node_features: Tensor) -> Self {
        let c = adjacency.dim(0);
        let degree: Vec<usize> = (0..c).map(|i| adjacency.row(i).iter().filter(|&&v| v != 0.0).count()).collect();
        let mut laplacian = adjacency.map(|v| -v);
        for (i, &d) in degree.iter().enumerate() {
            laplacian.set2(i, i, d as f64);
        }
        Self { adjacency, degree, laplacian, node_features }
    }

    pub fn n_nodes(&self) -> usize {
        self.degree.len()
    }

    pub fn degree_matrix(&self) -> Tensor {
        let c = self.n_nodes();
        let mut d = Tensor::zeros(&[c, c]);
        for (i, &v) in self.degree.iter().enumerate() {
            d.set2(i, i, v as f64);
        }
        d
    }

    /// Whether `j ∈ N_i ∪ {i}`.
    pub fn is_linked(&self, i: usize, j: usize) -> bool {
        i == j || self.adjacency.at2(i, j) != 0.0
    }

    /// Degrees counting the added self-loop.
    pub fn degrees_with_self_loops(&self) -> Vec<usize> {
        self.degree.iter().map(|d| d + 1).collect()
    }

    /// Per-edge coefficients `1/√(d̃_i d̃_j)` over `N_i ∪ {i}`, zero elsewhere.
    pub fn gcn_coefficients(&self) -> Tensor {
        let c = self.n_nodes();
        let d = self.degrees_with_self_loops();
        let mut out = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                if self.is_linked(i, j) {
                    out.set2(i, j, 1.0 / libm::sqrt((d[i] * d[j]) as f64));
                }
            }
        }
        out
    }

    /// Row-major `[C × C]` neighbourhood mask including self-loops.
    pub fn attention_mask(&self) -> Vec<bool> {
        let c = self.n_nodes();
        (0..c * c).map(|idx| self.is_linked(idx / c, idx % c)).collect()
    }

    /// Text dump of `A`, one row per line.
    pub fn adjacency_text(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::new();
        for i in 0..self.n_nodes() {
            let row: Vec<&str> = self.adjacency.row(i).iter().map(|&v| if v != 0.0 { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// Stacked per-sample graph operands for a batch.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `[N × C × C]` GCN coefficients.
    pub coefficients: Tensor,
    /// `[N × C × C]` neighbourhood mask.
    pub mask: Vec<bool>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[ChannelGraph]) -> Result<Self> {
        let coeffs: Vec<Tensor> = graphs.iter().map(ChannelGraph::gcn_coefficients).collect();
        let coefficients = Tensor::stack(&coeffs)?;
        let mask = graphs.iter().flat_map(ChannelGraph::attention_mask).collect();
        Ok(Self { coefficients, mask })
    }

    pub fn single(graph: &ChannelGraph) -> Result<Self> {
        Self::from_graphs(core::slice::from_ref(graph))
    }
}
