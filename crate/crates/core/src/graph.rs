//! Areal adjacency graphs and the quantities derived from them.
//!
//! Nodes are 0-based internally. The text format is 1-based:
//!
//! ```text
//! # comment
//! n 3
//! 1 2
//! 2 3
//! ```
//!
//! Weights are binary contiguity (`w_ij = 1` for neighbours), so the
//! Laplacian is `Q = D - W` with `D = diag(d_i)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative cutoff below which a Laplacian eigenvalue is treated as zero.
pub const NULL_EIGEN_RTOL: f64 = 1e-10;

/// Undirected 0/1 adjacency structure over `n` areas.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    labels: Option<Vec<String>>,
}

impl AdjacencyGraph {
    /// Builds a graph from 0-based pairs. Duplicates (in either orientation)
    /// collapse; self-loops and out-of-range indices are rejected.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut set = BTreeSet::new();
        for (i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) out of range for n = {n}"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop on node {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(Self {
            n,
            edges,
            neighbors,
            labels: None,
        })
    }

    /// Parses the line-oriented edge-list format. A `n <count>` header must
    /// precede the edges; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut n: Option<usize> = None;
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "n" {
                if n.is_some() {
                    return Err(parse_err(line_no, "duplicate `n` header"));
                }
                if toks.len() != 2 {
                    return Err(parse_err(line_no, "expected `n <count>`"));
                }
                let count: usize = toks[1]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad node count `{}`", toks[1])))?;
                if count == 0 {
                    return Err(parse_err(line_no, "node count must be positive"));
                }
                n = Some(count);
                continue;
            }
            let Some(count) = n else {
                return Err(parse_err(line_no, "edge before `n <count>` header"));
            };
            if toks.len() != 2 {
                return Err(parse_err(line_no, format!("expected `i j`, got `{line}`")));
            }
            let mut ends = [0usize; 2];
            for (slot, tok) in ends.iter_mut().zip(&toks) {
                let v: usize = tok
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad node index `{tok}`")))?;
                if v == 0 || v > count {
                    return Err(parse_err(
                        line_no,
                        format!("node index {v} out of range 1..={count}"),
                    ));
                }
                *slot = v - 1;
            }
            if ends[0] == ends[1] {
                return Err(parse_err(line_no, format!("self-loop on node {}", ends[0] + 1)));
            }
            pairs.push((ends[0], ends[1]));
        }
        let n = n.ok_or_else(|| parse_err(1, "missing `n <count>` header"))?;
        Self::new(n, pairs)
    }

    /// Rook-adjacency lattice, nodes numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let idx = |r: usize, c: usize| r * cols + c;
        let mut pairs = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    pairs.push((idx(r, c), idx(r, c + 1)));
                }
                if r + 1 < rows {
                    pairs.push((idx(r, c), idx(r + 1, c)));
                }
            }
        }
        Self::new(rows * cols, pairs)
    }

    /// Attaches node labels (one per node, in node order).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Length {
                what: "node labels",
                expected: self.n,
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Reads a label file: one label per non-empty line.
    pub fn parse_labels(text: &str) -> Vec<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Unique edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of node `i`, falling back to its 1-based index.
    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => (i + 1).to_string(),
        }
    }

    /// Serializes to the 1-based edge-list format.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n {}\n", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{} {}", i + 1, j + 1);
        }
        out
    }

    pub fn connected_components(&self) -> Components {
        let mut label = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &w in &self.neighbors[v] {
                    if label[w] == usize::MAX {
                        label[w] = count;
                        stack.push(w);
                    }
                }
            }
            count += 1;
        }
        Components { labels: label, count }
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components().count == 1
    }

    /// `Q = D - W` in coordinate form.
    pub fn laplacian(&self) -> SparsePrecision {
        let mut entries = Vec::with_capacity(self.n + 2 * self.edges.len());
        for i in 0..self.n {
            entries.push((i, i, self.degree(i) as f64));
            for &j in &self.neighbors[i] {
                entries.push((i, j, -1.0));
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        SparsePrecision {
            n: self.n,
            entries,
            symmetric: true,
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Connected-component labelling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    /// Component index per node, numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub count: usize,
}

/// Symmetric precision matrix in coordinate form, rows sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    symmetric: bool,
}

impl SparsePrecision {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// `c * Q`, e.g. the scaled structure matrix `h Q`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, c * v)).collect(),
            symmetric: self.symmetric,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    /// `x' Q x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, j, v)| x[i] * v * x[j]).sum()
    }
}

/// Eigendecomposition of a graph Laplacian with the null space identified.
///
/// Eigenvalues are sorted ascending; for a connected graph the first one is
/// the (numerically) zero eigenvalue with the constant eigenvector.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    null_dim: usize,
}

impl LaplacianSpectrum {
    pub fn new(q: &SparsePrecision) -> Self {
        let eig = SymmetricEigen::new(q.to_dense());
        let n = q.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        let lmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cutoff = NULL_EIGEN_RTOL * lmax;
        let null_dim = if lmax == 0.0 {
            n
        } else {
            values.iter().filter(|v| **v < cutoff).count()
        };
        Self {
            values,
            vectors,
            null_dim,
        }
    }

    pub fn of_graph(g: &AdjacencyGraph) -> Self {
        Self::new(&g.laplacian())
    }

    /// Like [`LaplacianSpectrum::of_graph`] but rejects graphs whose Laplacian
    /// has more than one null direction.
    pub fn connected(g: &AdjacencyGraph) -> Result<Self> {
        let s = Self::of_graph(g);
        s.require_single_null()?;
        Ok(s)
    }

    pub fn require_single_null(&self) -> Result<()> {
        if self.null_dim != 1 {
            return Err(Error::Disconnected {
                components: self.null_dim,
            });
        }
        Ok(())
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Number of eigenvalues below the relative null cutoff.
    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    /// Diagonal of the Moore-Penrose pseudo-inverse.
    pub fn pinv_diag(&self) -> Vec<f64> {
        let n = self.values.len();
        let mut diag = vec![0.0; n];
        for k in self.null_dim..n {
            let inv = 1.0 / self.values[k];
            for (i, d) in diag.iter_mut().enumerate() {
                let v = self.vectors[(i, k)];
                *d += inv * v * v;
            }
        }
        diag
    }

    /// Full Moore-Penrose pseudo-inverse.
    pub fn pinv(&self) -> DMatrix<f64> {
        let n = self.values.len();
        let mut out = DMatrix::zeros(n, n);
        for k in self.null_dim..n {
            let v = self.vectors.column(k);
            out += (&v * v.transpose()) / self.values[k];
        }
        out
    }
}

/// Diagonal of the pseudo-inverse of a connected graph Laplacian.
pub fn generalized_inverse_diag(q: &SparsePrecision) -> Result<Vec<f64>> {
    let spec = LaplacianSpectrum::new(q);
    spec.require_single_null()?;
    Ok(spec.pinv_diag())
}

/// Geometric mean of the generalized-inverse diagonal of `Q`; rescaling the
/// structured effect by it gives unit generalized variance.
pub fn scaling_factor(g: &AdjacencyGraph) -> Result<f64> {
    let diag = generalized_inverse_diag(&g.laplacian())?;
    Ok(geometric_mean(&diag))
}

pub(crate) fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}
