//! Conditional autoregressive (CAR) priors: intrinsic kernel, exact samplers
//! and validity checks for the precision matrices built on a graph.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{AdjacencyGraph, LaplacianSpectrum};

/// Unnormalized intrinsic-CAR log kernel `-1/2 sum_{i~j} (u_i - u_j)^2`,
/// i.e. `-1/2 u'Qu`.
pub fn icar_kernel(u: &[f64], g: &AdjacencyGraph) -> Result<f64> {
    if u.len() != g.n() {
        return Err(Error::Length {
            what: "icar_kernel input",
            expected: g.n(),
            got: u.len(),
        });
    }
    Ok(icar_kernel_unchecked(u, g))
}

pub(crate) fn icar_kernel_unchecked(u: &[f64], g: &AdjacencyGraph) -> f64 {
    -0.5 * g
        .edges()
        .iter()
        .map(|&(i, j)| {
            let d = u[i] - u[j];
            d * d
        })
        .sum::<f64>()
}

/// Adds the gradient of `scale * icar_kernel(u)` into `grad`.
pub(crate) fn icar_kernel_grad(u: &[f64], g: &AdjacencyGraph, scale: f64, grad: &mut [f64]) {
    for &(i, j) in g.edges() {
        let d = scale * (u[i] - u[j]);
        grad[i] -= d;
        grad[j] += d;
    }
}

/// Exact sampler for the scaled intrinsic CAR `N(0, (hQ)^-)`.
///
/// Draws `sum_k z_k v_k` over the non-null eigenpairs `(l_k, v_k)` of `Q` with
/// `z_k ~ N(0, 1 / (h l_k))`, so every draw is orthogonal to the constants.
#[derive(Debug, Clone)]
pub struct ScaledIcarSampler {
    spectrum: LaplacianSpectrum,
    h: f64,
}

impl ScaledIcarSampler {
    pub fn new(g: &AdjacencyGraph, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("scaling factor must be positive, got {h}")));
        }
        Ok(Self {
            spectrum: LaplacianSpectrum::connected(g)?,
            h,
        })
    }

    pub fn from_spectrum(spectrum: LaplacianSpectrum, h: f64) -> Result<Self> {
        spectrum.require_single_null()?;
        Ok(Self { spectrum, h })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let vals = self.spectrum.values();
        let vecs = self.spectrum.vectors();
        let n = vals.len();
        let mut out = DVector::zeros(n);
        for k in self.spectrum.null_dim()..n {
            let z: f64 = rng.sample(StandardNormal);
            out.axpy(z / (self.h * vals[k]).sqrt(), &vecs.column(k), 1.0);
        }
        // remove round-off drift along the constant direction
        let mean = out.mean();
        out.iter().map(|v| v - mean).collect()
    }
}

/// One draw from `N(0, (hQ)^-)`.
pub fn sample_icar_scaled<R: Rng + ?Sized>(
    g: &AdjacencyGraph,
    h: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(ScaledIcarSampler::new(g, h)?.sample(rng))
}

/// Proper CAR parameters: precision `(D - alpha W) / sigma_b^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcarParams {
    alpha: f64,
    sigma_b: f64,
}

impl PcarParams {
    pub fn new(alpha: f64, sigma_b: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!("PCAR alpha must be in [0, 1), got {alpha}")));
        }
        if !(sigma_b > 0.0 && sigma_b.is_finite()) {
            return Err(Error::invalid(format!("PCAR sigma_b must be positive, got {sigma_b}")));
        }
        Ok(Self { alpha, sigma_b })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_b
    }
}

/// `D - alpha W` as a dense matrix.
pub fn pcar_precision(g: &AdjacencyGraph, alpha: f64) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = g.degree(i) as f64;
    }
    for &(i, j) in g.edges() {
        m[(i, j)] = -alpha;
        m[(j, i)] = -alpha;
    }
    m
}

/// Exact sampler for `N(0, sigma_b^2 (D - alpha W)^-1)` via a Cholesky factor
/// `L L' = D - alpha W`: solving `L' x = z` gives `Cov(x) = (L L')^-1`.
#[derive(Debug, Clone)]
pub struct PcarSampler {
    chol_upper: DMatrix<f64>,
    sigma_b: f64,
}

impl PcarSampler {
    pub fn new(g: &AdjacencyGraph, params: PcarParams) -> Result<Self> {
        if (0..g.n()).any(|i| g.degree(i) == 0) {
            return Err(Error::invalid("PCAR requires every node to have a neighbour"));
        }
        let chol = Cholesky::new(pcar_precision(g, params.alpha)).ok_or_else(|| {
            Error::Numerical("Cholesky factorization of D - alpha W failed".into())
        })?;
        Ok(Self {
            chol_upper: chol.l().transpose(),
            sigma_b: params.sigma_b,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.chol_upper.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = self
            .chol_upper
            .solve_upper_triangular(&z)
            .expect("triangular factor has a positive diagonal");
        x.iter().map(|v| v * self.sigma_b).collect()
    }
}

pub fn sample_pcar<R: Rng + ?Sized>(
    g: &AdjacencyGraph,
    params: PcarParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(PcarSampler::new(g, params)?.sample(rng))
}

/// Leroux precision `(1 - lambda) I + lambda Q`.
pub fn leroux_precision(g: &AdjacencyGraph, lambda: f64) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 - lambda + lambda * g.degree(i) as f64;
    }
    for &(i, j) in g.edges() {
        m[(i, j)] = -lambda;
        m[(j, i)] = -lambda;
    }
    m
}

/// Congdon precision: diagonal `kappa_i (1 - lambda + lambda d_i)`,
/// off-diagonal `-lambda w_ij kappa_i kappa_j`.
pub fn congdon_precision(g: &AdjacencyGraph, lambda: f64, kappa: &[f64]) -> DMatrix<f64> {
    let n = g.n();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = kappa[i] * (1.0 - lambda + lambda * g.degree(i) as f64);
    }
    for &(i, j) in g.edges() {
        let v = -lambda * kappa[i] * kappa[j];
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    m
}

/// Outcome of a diagonal-dominance check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityCheck {
    /// Whether the sufficient condition holds.
    pub valid: bool,
    /// Node attaining the tightest bound, if any node constrains `lambda`.
    pub binding_node: Option<usize>,
    /// Tightest upper bound on `lambda` (infinite when unconstrained).
    pub bound: f64,
    /// `bound - lambda`; positive when the condition holds.
    pub margin: f64,
}

fn dominance_check(lambda: f64, denominators: impl Iterator<Item = f64>) -> ValidityCheck {
    let mut bound = f64::INFINITY;
    let mut binding = None;
    for (i, den) in denominators.enumerate() {
        // a non-positive denominator places no upper limit on lambda
        if den > 0.0 {
            let b = 1.0 / den;
            if b < bound {
                bound = b;
                binding = Some(i);
            }
        }
    }
    ValidityCheck {
        valid: lambda < bound,
        binding_node: binding,
        bound,
        margin: bound - lambda,
    }
}

/// Sufficient diagonal-dominance condition for the Congdon precision:
/// `lambda < min_i 1 / (1 - d_i + sum_{j~i} kappa_j)`. Not necessary.
pub fn check_congdon_validity(
    lambda: f64,
    kappa: &[f64],
    g: &AdjacencyGraph,
) -> Result<ValidityCheck> {
    if kappa.len() != g.n() {
        return Err(Error::Length {
            what: "kappa",
            expected: g.n(),
            got: kappa.len(),
        });
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid(format!("lambda must be in (0, 1), got {lambda}")));
    }
    if kappa.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::invalid("kappa must be positive"));
    }
    Ok(dominance_check(
        lambda,
        (0..g.n()).map(|i| {
            let s: f64 = g.neighbors(i).iter().map(|&j| kappa[j]).sum();
            1.0 - g.degree(i) as f64 + s
        }),
    ))
}

/// Diagnostic for the scale-mixture BYM2 covariance: sufficient condition
/// `lambda < min_i 1 / (1 - P_ii + sum_{j != i} |P_ij|)` with `P = (hQ)^-`.
pub fn check_mixture_covariance_validity(
    lambda: f64,
    g: &AdjacencyGraph,
    h: f64,
) -> Result<ValidityCheck> {
    let spec = LaplacianSpectrum::connected(g)?;
    let p = spec.pinv() / h;
    let n = g.n();
    Ok(dominance_check(
        lambda,
        (0..n).map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| p[(i, j)].abs()).sum();
            1.0 - p[(i, i)] + off
        }),
    ))
}
