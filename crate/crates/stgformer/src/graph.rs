//! Road graph, normalized operators, and parameter-free graph propagation.
//!
//! Two operator kinds are supported: the SGC-style normalized adjacency with
//! self-loops (default) and the rescaled Laplacian `2L/lambda_max - I`. Both
//! are symmetric, which the tape's sparse multiply relies on.

use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Result, StgError};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Undirected weighted sensor graph.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    pub n_nodes: usize,
    /// Distinct undirected edges (src < dst, weight > 0), excluding self-loops.
    pub edges: Vec<(usize, usize, f64)>,
    /// Symmetric N x N adjacency with zero diagonal.
    pub adjacency: Tensor,
    /// Count of asymmetric entries found in directed input before symmetrization.
    pub asymmetric_input_entries: usize,
}

impl RoadGraph {
    /// Build from possibly-directed weighted edges; symmetrized by max(A, A^T).
    pub fn from_edges(n_nodes: usize, raw: &[(usize, usize, f64)]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(StgError::Contract("graph must have at least one node".into()));
        }
        let mut adj = Tensor::zeros(&[n_nodes, n_nodes]);
        for &(s, d, w) in raw {
            if s >= n_nodes || d >= n_nodes {
                return Err(StgError::Data(format!(
                    "edge ({s}, {d}) references node outside 0..{n_nodes}"
                )));
            }
            if w < 0.0 {
                return Err(StgError::Data(format!("edge ({s}, {d}) has negative weight {w}")));
            }
            if s == d {
                continue; // diagonal stays zero before self-loop injection
            }
            adj.data[s * n_nodes + d] = adj.data[s * n_nodes + d].max(w);
        }
        let mut asym = 0usize;
        for i in 0..n_nodes {
            for j in (i + 1)..n_nodes {
                let a = adj.data[i * n_nodes + j];
                let b = adj.data[j * n_nodes + i];
                if a != b {
                    asym += 1;
                    let m = a.max(b);
                    adj.data[i * n_nodes + j] = m;
                    adj.data[j * n_nodes + i] = m;
                }
            }
        }
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in (i + 1)..n_nodes {
                let w = adj.data[i * n_nodes + j];
                if w > 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
        Ok(Self { n_nodes, edges, adjacency: adj, asymmetric_input_entries: asym })
    }

    /// Build from a dense adjacency tensor (STGT input path).
    pub fn from_adjacency(adj: &Tensor) -> Result<Self> {
        if adj.rank() != 2 || adj.shape[0] != adj.shape[1] {
            return Err(StgError::Shape(format!("adjacency must be square, got {:?}", adj.shape)));
        }
        let n = adj.shape[0];
        let mut raw = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = adj.data[i * n + j];
                if w != 0.0 && i != j {
                    raw.push((i, j, w));
                }
            }
        }
        Self::from_edges(n, &raw)
    }

    /// Parse the edge-list text format: header `nodes=<N>`, then
    /// `src dst weight` lines with 0-based indices.
    pub fn from_edge_list_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| StgError::Data(format!("{}: {e}", path.display())))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| StgError::Data(format!("{}: empty graph file", path.display())))?
            .map_err(StgError::Io)?;
        let n: usize = header
            .trim()
            .strip_prefix("nodes=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                StgError::Data(format!("{}:1: expected `nodes=<N>` header", path.display()))
            })?;
        let mut raw = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(StgError::Io)?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = || -> Option<(usize, usize, f64)> {
                if parts.len() != 3 {
                    return None;
                }
                Some((parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?))
            };
            let (s, d, w) = parse().ok_or_else(|| {
                StgError::Data(format!("{}:{}: bad edge line `{line}`", path.display(), lineno + 2))
            })?;
            raw.push((s, d, w));
        }
        Self::from_edges(n, &raw)
    }

    pub fn write_edge_list(&self) -> String {
        let mut out = format!("nodes={}\n", self.n_nodes);
        for &(s, d, w) in &self.edges {
            out.push_str(&format!("{s} {d} {w}\n"));
        }
        out
    }

    /// Distinct undirected edge count, used by the FLOPs module.
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    fn degrees(&self, with_self_loops: bool) -> Vec<f64> {
        let n = self.n_nodes;
        (0..n)
            .map(|i| {
                let mut d: f64 = (0..n).map(|j| self.adjacency.data[i * n + j]).sum();
                if with_self_loops {
                    d += 1.0;
                }
                d
            })
            .collect()
    }

    /// Symmetric normalized Laplacian `L = D^{-1/2} (D - A) D^{-1/2}`.
    ///
    /// Fails with a degenerate-degree error naming the first isolated node.
    pub fn normalized_laplacian(&self) -> Result<Tensor> {
        let n = self.n_nodes;
        let deg = self.degrees(false);
        if let Some(node) = deg.iter().position(|&d| d <= 0.0) {
            return Err(StgError::Data(format!(
                "node {node} is isolated (degree 0); cannot normalize without self-loops"
            )));
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut l = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let a = self.adjacency.data[i * n + j];
                let v = if i == j { 1.0 } else { 0.0 } - inv_sqrt[i] * a * inv_sqrt[j];
                l.data[i * n + j] = v;
            }
        }
        Ok(l)
    }
}

/// Largest eigenvalue of a symmetric matrix by power iteration.
///
/// Shifts by the trace-scaled identity so the dominant eigenvalue of the
/// iterated matrix is the one largest in value, not magnitude.
pub fn lambda_max(l: &Tensor) -> Result<f64> {
    if l.rank() != 2 || l.shape[0] != l.shape[1] {
        return Err(StgError::Shape(format!("lambda_max needs a square matrix, got {:?}", l.shape)));
    }
    let n = l.shape[0];
    // Gershgorin bound on |lambda| gives a safe positive shift.
    let bound = (0..n)
        .map(|i| (0..n).map(|j| l.data[i * n + j].abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1.0);
    // iterate M = L + bound*I; eigenvalues shift by +bound, order preserved
    let cap = 10_000;
    let tol = 1e-9;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0) * 1e-3).collect();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut rayleigh_prev = f64::INFINITY;
    for _ in 0..cap {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += l.data[i * n + j] * v[j];
            }
            w[i] = acc + bound * v[i];
        }
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - bound;
        let wn = norm(&w);
        if wn == 0.0 {
            // matrix annihilated the iterate: shifted spectrum has a zero, lambda = -bound
            return Ok(-bound);
        }
        for (x, y) in v.iter_mut().zip(&w) {
            *x = y / wn;
        }
        if (rayleigh - rayleigh_prev).abs() <= tol * rayleigh.abs().max(1.0) {
            return Ok(rayleigh);
        }
        rayleigh_prev = rayleigh;
    }
    Err(StgError::Estimation { iterations: cap, last: rayleigh_prev })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// `P = D~^{-1/2} (A + I) D~^{-1/2}`, eigenvalues in [-1, 1].
    SgcAdjacency,
    /// `P = 2L/lambda_max - I` for the normalized Laplacian L.
    RescaledLaplacian,
}

impl std::str::FromStr for OperatorKind {
    type Err = StgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgc_adjacency" | "sgc" => Ok(Self::SgcAdjacency),
            "rescaled_laplacian" | "laplacian" => Ok(Self::RescaledLaplacian),
            other => Err(StgError::Config(format!("unknown operator kind `{other}`"))),
        }
    }
}

/// Normalized propagation operator in CSR form, immutable and shareable.
#[derive(Debug, Clone)]
pub struct PropagationOperator {
    pub kind: OperatorKind,
    pub matrix: Arc<CsrMatrix>,
    pub n_nodes: usize,
    /// lambda_max of L, cached at build time for the rescaled kind.
    pub lambda_max: Option<f64>,
}

impl PropagationOperator {
    pub fn build(graph: &RoadGraph, kind: OperatorKind) -> Result<Self> {
        let n = graph.n_nodes;
        let dense = match kind {
            OperatorKind::SgcAdjacency => {
                let deg = graph.degrees(true); // A + I degrees, always > 0
                let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
                let mut p = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        let a = graph.adjacency.data[i * n + j] + if i == j { 1.0 } else { 0.0 };
                        p.data[i * n + j] = inv_sqrt[i] * a * inv_sqrt[j];
                    }
                }
                p
            }
            OperatorKind::RescaledLaplacian => {
                let l = graph.normalized_laplacian()?;
                let lmax = lambda_max(&l)?;
                let mut p = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        p.data[i * n + j] =
                            2.0 * l.data[i * n + j] / lmax - if i == j { 1.0 } else { 0.0 };
                    }
                }
                p
            }
        };
        let lmax = match kind {
            OperatorKind::RescaledLaplacian => Some(lambda_max(&graph.normalized_laplacian()?)?),
            OperatorKind::SgcAdjacency => None,
        };
        let csr = CsrMatrix::from_dense(&dense)?;
        debug_assert!(csr.is_symmetric(1e-12));
        Ok(Self { kind, matrix: Arc::new(csr), n_nodes: n, lambda_max: lmax })
    }

    /// Stacked propagation orders `[X_0, X_1, ..., X_K]` with `X_k = P X_{k-1}`,
    /// applied along the node axis of a `[T, N, C]` tensor. Parameter-free.
    pub fn propagate(&self, x_emb: &Tensor, k: usize) -> Result<Vec<Tensor>> {
        if x_emb.rank() != 3 || x_emb.shape[1] != self.n_nodes {
            return Err(StgError::Contract(format!(
                "propagation expects [T, {}, C], got {:?}",
                self.n_nodes, x_emb.shape
            )));
        }
        let mut orders = Vec::with_capacity(k + 1);
        orders.push(x_emb.clone());
        for _ in 0..k {
            let (next, _) = self.matrix.apply_tnc(orders.last().unwrap())?;
            orders.push(next);
        }
        Ok(orders)
    }
}
