//! Banded LDL' factorization with selected inversion, for precisions whose
//! sparsity follows the adjacency graph.
//!
//! Nodes are renumbered by reverse Cuthill-McKee so the bandwidth stays
//! small on planar maps. Factorization and the band of the inverse (which
//! contains every graph edge) then cost `O(n bw^2)`.

use std::collections::VecDeque;

use crate::graph::AdjacencyGraph;

/// Reverse Cuthill-McKee renumbering of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BandOrdering {
    /// `pos[i]` is the banded index of node `i`.
    pos: Vec<usize>,
    bw: usize,
}

impl BandOrdering {
    pub(crate) fn new(g: &AdjacencyGraph) -> Self {
        let n = g.n();
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut by_degree: Vec<usize> = (0..n).collect();
        by_degree.sort_by_key(|&i| (g.degree(i), i));
        for &start in &by_degree {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = g.neighbors(v).iter().copied().filter(|&j| !seen[j]).collect();
                next.sort_by_key(|&j| (g.degree(j), j));
                for j in next {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        order.reverse();
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let bw = g.edges().iter().map(|&(i, j)| pos[i].abs_diff(pos[j])).max().unwrap_or(0);
        Self { pos, bw }
    }

    #[cfg(test)]
    fn bandwidth(&self) -> usize {
        self.bw
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (r, c) = (self.pos[i].max(self.pos[j]), self.pos[i].min(self.pos[j]));
        r * (self.bw + 1) + (r - c)
    }
}

/// `A = L D L'` in band storage, with the band of `A^-1` on request.
#[derive(Debug, Clone)]
pub(crate) struct BandLdl<'a> {
    ord: &'a BandOrdering,
    /// Row-major band: entry `(r, r - k)` at `r * (bw + 1) + k`; `k = 0` unused.
    l: Vec<f64>,
    d: Vec<f64>,
}

impl<'a> BandLdl<'a> {
    /// Factorizes the symmetric matrix with diagonal `diag` and off-diagonal
    /// entries `offdiag[e]` on `g.edges()[e]`. `None` unless positive
    /// definite.
    pub(crate) fn factor(ord: &'a BandOrdering, g: &AdjacencyGraph, diag: &[f64], offdiag: &[f64]) -> Option<Self> {
        let n = diag.len();
        let w = ord.bw + 1;
        let mut a = vec![0.0; n * w];
        for (i, &v) in diag.iter().enumerate() {
            a[ord.pos[i] * w] = v;
        }
        for (&(i, j), &v) in g.edges().iter().zip(offdiag) {
            a[ord.idx(i, j)] = v;
        }
        let mut d = vec![0.0; n];
        for c in 0..n {
            for r in c..n.min(c + w) {
                let lo = r.saturating_sub(ord.bw);
                let mut s = a[r * w + (r - c)];
                for k in lo..c {
                    s -= a[r * w + (r - k)] * a[c * w + (c - k)] * d[k];
                }
                if r == c {
                    if !(s > 0.0 && s.is_finite()) {
                        return None;
                    }
                    d[c] = s;
                } else {
                    a[r * w + (r - c)] = s / d[c];
                }
            }
        }
        Some(Self { ord, l: a, d })
    }

    pub(crate) fn log_det(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    /// Band of the inverse by the Takahashi recurrences.
    pub(crate) fn selected_inverse(&self) -> SelectedInverse<'a> {
        let n = self.d.len();
        let bw = self.ord.bw;
        let w = bw + 1;
        let l = &self.l;
        let mut s = vec![0.0; n * w];
        let get = |s: &[f64], a: usize, b: usize| {
            let (r, c) = (a.max(b), a.min(b));
            s[r * w + (r - c)]
        };
        for i in (0..n).rev() {
            let hi = (n - 1).min(i + bw);
            for j in (i + 1..=hi).rev() {
                let mut v = 0.0;
                for k in i + 1..=hi {
                    v -= l[k * w + (k - i)] * get(&s, j, k);
                }
                s[j * w + (j - i)] = v;
            }
            let mut v = 1.0 / self.d[i];
            for k in i + 1..=hi {
                v -= l[k * w + (k - i)] * s[k * w + (k - i)];
            }
            s[i * w] = v;
        }
        SelectedInverse { ord: self.ord, s }
    }
}

/// Entries of `A^-1` inside the band (every diagonal entry and graph edge).
#[derive(Debug, Clone)]
pub(crate) struct SelectedInverse<'a> {
    ord: &'a BandOrdering,
    s: Vec<f64>,
}

impl SelectedInverse<'_> {
    pub(crate) fn diag(&self, i: usize) -> f64 {
        self.s[self.ord.pos[i] * (self.ord.bw + 1)]
    }

    /// `(A^-1)_ij` for an edge `i ~ j` (or `i == j`).
    pub(crate) fn get(&self, i: usize, j: usize) -> f64 {
        self.s[self.ord.idx(i, j)]
    }
}
