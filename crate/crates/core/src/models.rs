//! The five fittable areal-count models as differentiable log-posteriors.
//!
//! Every model shares the Poisson likelihood
//! `y_i ~ Poisson(E_i exp(beta0 + x_i beta + b_i))` and differs in how the
//! latent effects `b` are built:
//!
//! | kind          | latent effect                                              |
//! |---------------|------------------------------------------------------------|
//! | `Bym2`        | `b = sigma (sqrt(1-lambda) theta + sqrt(lambda) u*)`       |
//! | `Bym2Gamma`   | as BYM2, divided by `sqrt(kappa)`, `kappa ~ Gamma(nu/2, nu/2)` |
//! | `Bym2LogCar`  | as BYM2, divided by `sqrt(kappa)`, `kappa = exp(-nu/2 + sqrt(nu) z)` |
//! | `Leroux`      | `b ~ N(0, sigma^2 [(1-lambda) I + lambda Q]^-1)`           |
//! | `Congdon`     | `b ~ N(0, sigma^2 Q_C^-1)` with `kappa` in mean and variance |
//!
//! Sampling happens on an unconstrained vector: `log` for `sigma`, `kappa`
//! and `nu`, `logit` for `lambda`, identity elsewhere. The log-posterior
//! includes the log-Jacobians of those maps.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Exp};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::band::{BandLdl, BandOrdering};
use crate::car::{icar_kernel_grad, icar_kernel_unchecked};
use crate::error::{Error, Result};
use crate::graph::{scaling_factor, AdjacencyGraph, LaplacianSpectrum};
use crate::sampler::Target;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bym2,
    Leroux,
    Congdon,
    Bym2Gamma,
    #[serde(rename = "bym2-logcar")]
    Bym2LogCar,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Bym2,
        ModelKind::Leroux,
        ModelKind::Congdon,
        ModelKind::Bym2Gamma,
        ModelKind::Bym2LogCar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bym2 => "bym2",
            ModelKind::Leroux => "leroux",
            ModelKind::Congdon => "congdon",
            ModelKind::Bym2Gamma => "bym2-gamma",
            ModelKind::Bym2LogCar => "bym2-logcar",
        }
    }

    /// Whether the model carries per-area scale-mixture parameters.
    pub fn has_kappa(self) -> bool {
        matches!(
            self,
            ModelKind::Congdon | ModelKind::Bym2Gamma | ModelKind::Bym2LogCar
        )
    }

    /// Whether the latent effect is the BYM2 `theta`/`u*` decomposition.
    pub fn is_bym2_family(self) -> bool {
        matches!(
            self,
            ModelKind::Bym2 | ModelKind::Bym2Gamma | ModelKind::Bym2LogCar
        )
    }

    fn gamma_mixing(self) -> bool {
        matches!(self, ModelKind::Congdon | ModelKind::Bym2Gamma)
    }

    /// Default prior mean of the mixing hyperparameter.
    pub fn default_mu_nu(self) -> f64 {
        match self {
            ModelKind::Bym2LogCar => 0.3,
            _ => 4.0,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model `{s}` (expected one of bym2, leroux, congdon, bym2-gamma, bym2-logcar)"
                ))
            })
    }
}

/// Model choice plus prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of covariates.
    pub p: usize,
    /// Prior mean of `nu` (Gamma mixing) or `nu_kappa` (log-CAR mixing).
    pub mu_nu: f64,
    pub beta_prior_sd: f64,
    pub sigma_prior_sd: f64,
    /// Soft sum-to-zero constraint sd is `factor * n`.
    pub soft_constraint_sd_factor: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, p: usize) -> Self {
        Self {
            kind,
            p,
            mu_nu: kind.default_mu_nu(),
            beta_prior_sd: 10.0,
            sigma_prior_sd: 1.0,
            soft_constraint_sd_factor: 0.001,
        }
    }

    /// Central `level` interval of the exponential prior on `nu`.
    pub fn nu_prior_interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid(format!("interval level must lie in (0, 1), got {level}")));
        }
        let d = Exp::new(1.0 / self.mu_nu).map_err(|e| Error::invalid(format!("mu_nu: {e}")))?;
        let tail = 0.5 * (1.0 - level);
        Ok((d.inverse_cdf(tail), d.inverse_cdf(1.0 - tail)))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu_nu", self.mu_nu),
            ("beta_prior_sd", self.beta_prior_sd),
            ("sigma_prior_sd", self.sigma_prior_sd),
            ("soft_constraint_sd_factor", self.soft_constraint_sd_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Counts, offsets, covariates and the graph they live on.
#[derive(Debug, Clone)]
pub struct ObservedData {
    y: Vec<u64>,
    offsets: Vec<f64>,
    log_offsets: Vec<f64>,
    /// Row-major `n x p`.
    x: Vec<f64>,
    p: usize,
    graph: Arc<AdjacencyGraph>,
    h: f64,
    lap_eigenvalues: Vec<f64>,
    ln_y_factorial: Vec<f64>,
}

impl ObservedData {
    /// `covariates[i]` is the covariate row of area `i` (may be empty).
    pub fn new(
        graph: Arc<AdjacencyGraph>,
        y: Vec<u64>,
        offsets: Vec<f64>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let h = scaling_factor(&graph)?;
        let spec = LaplacianSpectrum::of_graph(&graph);
        Self::with_spectrum(graph, y, offsets, covariates, h, spec.values().as_slice().to_vec())
    }

    pub(crate) fn with_spectrum(
        graph: Arc<AdjacencyGraph>,
        y: Vec<u64>,
        offsets: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        h: f64,
        lap_eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        let n = graph.n();
        for (what, len) in [("y", y.len()), ("offsets", offsets.len()), ("covariates", covariates.len())] {
            if len != n {
                return Err(Error::Length { what, expected: n, got: len });
            }
        }
        if let Some(i) = offsets.iter().position(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::invalid(format!(
                "offset of area {} must be positive, got {}",
                i + 1,
                offsets[i]
            )));
        }
        let p = covariates.first().map_or(0, Vec::len);
        if covariates.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("covariate rows have differing lengths"));
        }
        let x: Vec<f64> = covariates.into_iter().flatten().collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariates must be finite"));
        }
        Ok(Self {
            ln_y_factorial: y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).collect(),
            log_offsets: offsets.iter().map(|e| e.ln()).collect(),
            y,
            offsets,
            x,
            p,
            graph,
            h,
            lap_eigenvalues,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> &Arc<AdjacencyGraph> {
        &self.graph
    }

    /// BYM2 scaling factor of the graph.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Same graph and covariates with new counts; reuses the precomputed
    /// graph quantities.
    pub fn with_counts(&self, y: Vec<u64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Length { what: "y", expected: self.n(), got: y.len() });
        }
        Ok(Self {
            ln_y_factorial: y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).collect(),
            y,
            ..self.clone()
        })
    }
}

/// A point in parameter space on the constrained scale. Blocks that do not
/// belong to `kind` are empty / `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub kind: ModelKind,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    /// Unstructured effects (BYM2 family).
    pub theta: Vec<f64>,
    /// Scaled structured effects (BYM2 family).
    pub u_star: Vec<f64>,
    /// Directly parameterized latent effects (Leroux, Congdon).
    pub b: Vec<f64>,
    /// Scale-mixture parameters. Derived from `z` and `nu` for log-CAR.
    pub kappa: Vec<f64>,
    /// Standardized log-CAR innovations.
    pub z: Vec<f64>,
    pub nu: Option<f64>,
}

/// Offsets of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub kind: ModelKind,
    pub n: usize,
    pub p: usize,
    pub beta0: usize,
    pub beta: Range<usize>,
    pub log_sigma: usize,
    pub logit_lambda: usize,
    pub theta: Range<usize>,
    pub u_star: Range<usize>,
    pub b: Range<usize>,
    pub log_kappa: Range<usize>,
    pub z: Range<usize>,
    pub log_nu: Option<usize>,
    pub dim: usize,
}

impl Layout {
    pub fn new(kind: ModelKind, n: usize, p: usize) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let beta0 = take(1).start;
        let beta = take(p);
        let log_sigma = take(1).start;
        let logit_lambda = take(1).start;
        let bym2 = kind.is_bym2_family();
        let theta = take(if bym2 { n } else { 0 });
        let u_star = take(if bym2 { n } else { 0 });
        let b = take(if bym2 { 0 } else { n });
        let log_kappa = take(if kind.gamma_mixing() { n } else { 0 });
        let z = take(if kind == ModelKind::Bym2LogCar { n } else { 0 });
        let log_nu = kind.has_kappa().then(|| take(1).start);
        Self {
            kind,
            n,
            p,
            beta0,
            beta,
            log_sigma,
            logit_lambda,
            theta,
            u_star,
            b,
            log_kappa,
            z,
            log_nu,
            dim: at,
        }
    }

    /// Names of the unconstrained coordinates.
    pub fn unconstrained_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        names[self.beta0] = "beta0".into();
        for (k, i) in self.beta.clone().enumerate() {
            names[i] = format!("beta[{}]", k + 1);
        }
        names[self.log_sigma] = "log_sigma".into();
        names[self.logit_lambda] = "logit_lambda".into();
        for (prefix, r) in [
            ("theta", &self.theta),
            ("u_star", &self.u_star),
            ("b", &self.b),
            ("log_kappa", &self.log_kappa),
            ("z", &self.z),
        ] {
            for (k, i) in r.clone().enumerate() {
                names[i] = format!("{prefix}[{}]", k + 1);
            }
        }
        if let Some(i) = self.log_nu {
            names[i] = "log_nu".into();
        }
        names
    }
}

/// Log-posterior broken into its additive pieces (unconstrained scale; each
/// prior term carries the log-Jacobian of its own transform).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogPosteriorTerms {
    pub loglik: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// `theta` + `u*` priors (BYM2 family) or the Leroux/Congdon joint density.
    pub latent: f64,
    pub soft_constraint: f64,
    /// Gamma prior for `kappa` or the log-CAR prior for `z`.
    pub kappa: f64,
    pub nu: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.loglik
            + self.beta
            + self.sigma
            + self.lambda
            + self.latent
            + self.soft_constraint
            + self.kappa
            + self.nu
    }
}

/// Normal log-density of `sum(v)` at zero with sd `factor * n`.
pub fn soft_sum_to_zero_logterm(v: &[f64], n: usize, factor: f64) -> f64 {
    let sd = factor * n as f64;
    let s: f64 = v.iter().sum();
    normal_lpdf(s, sd)
}

fn normal_lpdf(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (x / sd) * (x / sd)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A model bound to its data; evaluates the log-posterior and its gradient
/// over the unconstrained vector.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    data: Arc<ObservedData>,
    layout: Layout,
    /// Fill-reducing order for the Congdon precision.
    band: Option<BandOrdering>,
}

/// Constrained values shared by the evaluation paths.
struct Unpacked<'a> {
    beta0: f64,
    beta: &'a [f64],
    sigma: f64,
    lambda: f64,
    logit_lambda: f64,
    log_sigma: f64,
    kappa: Vec<f64>,
    log_kappa: Vec<f64>,
    nu: f64,
    log_nu: f64,
}

impl Model {
    pub fn new(spec: ModelSpec, data: Arc<ObservedData>) -> Result<Self> {
        spec.validate()?;
        if spec.p != data.p() {
            return Err(Error::invalid(format!(
                "model expects {} covariates, data has {}",
                spec.p,
                data.p()
            )));
        }
        let layout = Layout::new(spec.kind, data.n(), spec.p);
        let band = (spec.kind == ModelKind::Congdon).then(|| BandOrdering::new(&data.graph));
        Ok(Self { spec, data, layout, band })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &ObservedData {
        &self.data
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    fn unpack<'a>(&self, x: &'a [f64]) -> Unpacked<'a> {
        let l = &self.layout;
        let log_sigma = x[l.log_sigma];
        let logit_lambda = x[l.logit_lambda];
        let (log_nu, nu) = match l.log_nu {
            Some(i) => (x[i], x[i].exp()),
            None => (0.0, 0.0),
        };
        let log_kappa: Vec<f64> = match self.spec.kind {
            ModelKind::Bym2Gamma | ModelKind::Congdon => x[l.log_kappa.clone()].to_vec(),
            ModelKind::Bym2LogCar => {
                let rt = nu.sqrt();
                x[l.z.clone()].iter().map(|z| -0.5 * nu + rt * z).collect()
            }
            _ => Vec::new(),
        };
        Unpacked {
            beta0: x[l.beta0],
            beta: &x[l.beta.clone()],
            sigma: log_sigma.exp(),
            lambda: logistic(logit_lambda),
            logit_lambda,
            log_sigma,
            kappa: log_kappa.iter().map(|v| v.exp()).collect(),
            log_kappa,
            nu,
            log_nu,
        }
    }

    /// Latent effects `b` from an unconstrained vector.
    pub fn latent_from_unconstrained(&self, x: &[f64]) -> Vec<f64> {
        let u = self.unpack(x);
        self.latent_inner(x, &u)
    }

    fn latent_inner(&self, x: &[f64], u: &Unpacked<'_>) -> Vec<f64> {
        let l = &self.layout;
        if !self.spec.kind.is_bym2_family() {
            return x[l.b.clone()].to_vec();
        }
        let w_un = (1.0 - u.lambda).sqrt();
        let w_st = u.lambda.sqrt();
        let theta = &x[l.theta.clone()];
        let ustar = &x[l.u_star.clone()];
        (0..l.n)
            .map(|i| {
                let scale = if u.kappa.is_empty() {
                    u.sigma
                } else {
                    u.sigma * (-0.5 * u.log_kappa[i]).exp()
                };
                scale * (w_un * theta[i] + w_st * ustar[i])
            })
            .collect()
    }

    fn linear_predictor(&self, u: &Unpacked<'_>, b: &[f64]) -> Vec<f64> {
        let d = &*self.data;
        (0..d.n())
            .map(|i| {
                let xb: f64 = d.covariate_row(i).iter().zip(u.beta).map(|(a, c)| a * c).sum();
                d.log_offsets[i] + u.beta0 + xb + b[i]
            })
            .collect()
    }

    /// Pointwise Poisson log-likelihood, `-log y!` included.
    pub fn pointwise_loglik(&self, x: &[f64]) -> Vec<f64> {
        let u = self.unpack(x);
        let b = self.latent_inner(x, &u);
        let eta = self.linear_predictor(&u, &b);
        let d = &*self.data;
        eta.iter()
            .enumerate()
            .map(|(i, e)| d.y[i] as f64 * e - e.exp() - d.ln_y_factorial[i])
            .collect()
    }

    /// Log-posterior terms at an unconstrained point.
    pub fn terms(&self, x: &[f64]) -> LogPosteriorTerms {
        self.evaluate(x, None)
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None).total()
    }

    /// Log-posterior and its gradient; the gradient is overwritten.
    pub fn log_posterior_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad)).total()
    }

    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> LogPosteriorTerms {
        debug_assert_eq!(x.len(), self.layout.dim);
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let l = &self.layout;
        let d = &*self.data;
        let s = &self.spec;
        let n = l.n;
        let u = self.unpack(x);
        let b = self.latent_inner(x, &u);
        let eta = self.linear_predictor(&u, &b);
        let mut t = LogPosteriorTerms::default();

        // likelihood; resid_i = d loglik / d b_i = d loglik / d eta_i
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let mu = eta[i].exp();
            t.loglik += d.y[i] as f64 * eta[i] - mu - d.ln_y_factorial[i];
            resid[i] = d.y[i] as f64 - mu;
        }

        // regression coefficients
        let bsd = s.beta_prior_sd;
        t.beta += normal_lpdf(u.beta0, bsd);
        for &bk in u.beta {
            t.beta += normal_lpdf(bk, bsd);
        }

        // sigma ~ N+(0, sd), log transform
        let ssd = s.sigma_prior_sd;
        t.sigma = std::f64::consts::LN_2 + normal_lpdf(u.sigma, ssd) + u.log_sigma;

        // lambda ~ U(0, 1), logit transform: log lambda + log(1 - lambda)
        t.lambda = -softplus(-u.logit_lambda) - softplus(u.logit_lambda);

        if let Some(g) = grad.as_deref_mut() {
            let rsum: f64 = resid.iter().sum();
            g[l.beta0] = rsum - u.beta0 / (bsd * bsd);
            for (k, gi) in l.beta.clone().enumerate() {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += resid[i] * d.covariate_row(i)[k];
                }
                g[gi] = acc - u.beta[k] / (bsd * bsd);
            }
            g[l.log_sigma] = -u.sigma * u.sigma / (ssd * ssd) + 1.0;
            g[l.logit_lambda] = 1.0 - 2.0 * u.lambda;
        }

        match s.kind {
            ModelKind::Bym2 | ModelKind::Bym2Gamma | ModelKind::Bym2LogCar => {
                self.bym2_terms(x, &u, &b, &resid, &mut t, grad.as_deref_mut());
            }
            ModelKind::Leroux => self.leroux_terms(&u, &b, &resid, &mut t, grad.as_deref_mut()),
            ModelKind::Congdon => self.congdon_terms(&u, &b, &resid, &mut t, grad.as_deref_mut()),
        }

        if s.kind.gamma_mixing() {
            // kappa_i ~ Gamma(nu/2, nu/2) on log kappa (Jacobian folded in)
            let a = 0.5 * u.nu;
            let base = a * a.ln() - ln_gamma(a);
            let mut dnu = 0.0;
            for i in 0..n {
                t.kappa += base + a * u.log_kappa[i] - a * u.kappa[i];
                dnu += 0.5 * (a.ln() + 1.0 - digamma(a) + u.log_kappa[i] - u.kappa[i]);
            }
            if let Some(g) = grad.as_deref_mut() {
                for (i, gi) in l.log_kappa.clone().enumerate() {
                    g[gi] += a - a * u.kappa[i];
                }
                g[l.log_nu.unwrap()] += u.nu * dnu;
            }
        }
        if s.kind.has_kappa() {
            // nu ~ Exp(1 / mu_nu), log transform
            t.nu = -s.mu_nu.ln() - u.nu / s.mu_nu + u.log_nu;
            if let Some(g) = grad.as_deref_mut() {
                g[l.log_nu.unwrap()] += 1.0 - u.nu / s.mu_nu;
            }
        }
        t
    }

    fn bym2_terms(
        &self,
        x: &[f64],
        u: &Unpacked<'_>,
        b: &[f64],
        resid: &[f64],
        t: &mut LogPosteriorTerms,
        grad: Option<&mut [f64]>,
    ) {
        let l = &self.layout;
        let d = &*self.data;
        let n = l.n;
        let h = d.h;
        let theta = &x[l.theta.clone()];
        let ustar = &x[l.u_star.clone()];
        let sd = self.spec.soft_constraint_sd_factor * n as f64;

        t.latent = -0.5 * LN_2PI * n as f64 - 0.5 * theta.iter().map(|v| v * v).sum::<f64>()
            + h * icar_kernel_unchecked(ustar, &d.graph);
        let usum: f64 = ustar.iter().sum();
        t.soft_constraint = normal_lpdf(usum, sd);

        let logcar = self.spec.kind == ModelKind::Bym2LogCar;
        let z = &x[l.z.clone()];
        let zsum: f64 = z.iter().sum();
        if logcar {
            t.kappa = h * icar_kernel_unchecked(z, &d.graph);
            t.soft_constraint += normal_lpdf(zsum, sd);
        }

        let Some(g) = grad else { return };
        let w_un = (1.0 - u.lambda).sqrt();
        let w_st = u.lambda.sqrt();
        // d w_un / d logit = -lambda sqrt(1-lambda) / 2, d w_st / d logit = sqrt(lambda) (1-lambda) / 2
        let dw_un = -0.5 * u.lambda * w_un;
        let dw_st = 0.5 * w_st * (1.0 - u.lambda);
        let mut g_sigma = 0.0;
        let mut g_lambda = 0.0;
        let mut g_lognu = 0.0;
        let rt_nu = u.nu.sqrt();
        for i in 0..n {
            let scale = if u.kappa.is_empty() {
                u.sigma
            } else {
                u.sigma * (-0.5 * u.log_kappa[i]).exp()
            };
            let r = resid[i];
            g[l.theta.start + i] += r * scale * w_un - theta[i];
            g[l.u_star.start + i] += r * scale * w_st;
            g_sigma += r * b[i];
            g_lambda += r * scale * (dw_un * theta[i] + dw_st * ustar[i]);
            match self.spec.kind {
                ModelKind::Bym2Gamma => g[l.log_kappa.start + i] += -0.5 * r * b[i],
                ModelKind::Bym2LogCar => {
                    // log kappa_i = -nu/2 + sqrt(nu) z_i
                    g[l.z.start + i] += -0.5 * r * b[i] * rt_nu;
                    g_lognu += -0.5 * r * b[i] * (-0.5 * u.nu + 0.5 * rt_nu * z[i]);
                }
                _ => {}
            }
        }
        g[l.log_sigma] += g_sigma;
        g[l.logit_lambda] += g_lambda;
        if let Some(i) = l.log_nu {
            g[i] += g_lognu;
        }

        let ug = &mut g[l.u_star.clone()];
        icar_kernel_grad(ustar, &d.graph, h, ug);
        let c = -usum / (sd * sd);
        ug.iter_mut().for_each(|v| *v += c);

        if logcar {
            let zg = &mut g[l.z.clone()];
            icar_kernel_grad(z, &d.graph, h, zg);
            let c = -zsum / (sd * sd);
            zg.iter_mut().for_each(|v| *v += c);
        }
    }

    fn leroux_terms(
        &self,
        u: &Unpacked<'_>,
        b: &[f64],
        resid: &[f64],
        t: &mut LogPosteriorTerms,
        grad: Option<&mut [f64]>,
    ) {
        let l = &self.layout;
        let d = &*self.data;
        let n = l.n as f64;
        let lam = u.lambda;
        let ss: f64 = b.iter().map(|v| v * v).sum();
        let edge_ss = -2.0 * icar_kernel_unchecked(b, &d.graph);
        let quad = (1.0 - lam) * ss + lam * edge_ss;
        let logdet: f64 = d
            .lap_eigenvalues
            .iter()
            .map(|e| (1.0 - lam + lam * e.max(0.0)).ln())
            .sum();
        let s2 = u.sigma * u.sigma;
        t.latent = -0.5 * n * LN_2PI - n * u.log_sigma + 0.5 * logdet - 0.5 * quad / s2;

        let Some(g) = grad else { return };
        let bg = &mut g[l.b.clone()];
        for (i, gi) in bg.iter_mut().enumerate() {
            *gi += resid[i] - (1.0 - lam) * b[i] / s2;
        }
        icar_kernel_grad(b, &d.graph, lam / s2, bg);
        g[l.log_sigma] += -n + quad / s2;
        let dlogdet: f64 = d
            .lap_eigenvalues
            .iter()
            .map(|e| (e.max(0.0) - 1.0) / (1.0 - lam + lam * e.max(0.0)))
            .sum();
        let dlam = 0.5 * dlogdet - 0.5 * (edge_ss - ss) / s2;
        g[l.logit_lambda] += dlam * lam * (1.0 - lam);
    }

    fn congdon_terms(
        &self,
        u: &Unpacked<'_>,
        b: &[f64],
        resid: &[f64],
        t: &mut LogPosteriorTerms,
        grad: Option<&mut [f64]>,
    ) {
        let l = &self.layout;
        let d = &*self.data;
        let graph = &*d.graph;
        let nn = l.n;
        let n = nn as f64;
        let lam = u.lambda;
        let kappa = &u.kappa;
        let a: Vec<f64> = (0..nn)
            .map(|i| 1.0 - lam + lam * graph.degree(i) as f64)
            .collect();
        let diag: Vec<f64> = (0..nn).map(|i| kappa[i] * a[i]).collect();
        let off: Vec<f64> = graph.edges().iter().map(|&(i, j)| -lam * kappa[i] * kappa[j]).collect();
        let band = self.band.as_ref().expect("Congdon models carry a band ordering");
        let Some(ldl) = BandLdl::factor(band, graph, &diag, &off) else {
            // not positive definite: divergent state
            t.latent = f64::NEG_INFINITY;
            if let Some(g) = grad {
                g.iter_mut().for_each(|v| *v = f64::NAN);
            }
            return;
        };
        let logdet = ldl.log_det();
        // neighbour sums sum_{j~i} kappa_j b_j
        let nb: Vec<f64> = (0..nn)
            .map(|i| graph.neighbors(i).iter().map(|&j| kappa[j] * b[j]).sum())
            .collect();
        let diag_part: f64 = (0..nn).map(|i| kappa[i] * a[i] * b[i] * b[i]).sum();
        let edge_part: f64 = graph
            .edges()
            .iter()
            .map(|&(i, j)| kappa[i] * kappa[j] * b[i] * b[j])
            .sum();
        let quad = diag_part - 2.0 * lam * edge_part;
        let s2 = u.sigma * u.sigma;
        t.latent = -0.5 * n * LN_2PI - n * u.log_sigma + 0.5 * logdet - 0.5 * quad / s2;

        let Some(g) = grad else { return };
        let inv = ldl.selected_inverse();
        for i in 0..nn {
            let dquad_db = 2.0 * kappa[i] * a[i] * b[i] - 2.0 * lam * kappa[i] * nb[i];
            g[l.b.start + i] += resid[i] - 0.5 * dquad_db / s2;
        }
        g[l.log_sigma] += -n + quad / s2;

        // lambda
        let dquad_dlam: f64 = (0..nn)
            .map(|i| kappa[i] * (graph.degree(i) as f64 - 1.0) * b[i] * b[i])
            .sum::<f64>()
            - 2.0 * edge_part;
        let mut dlogdet_dlam: f64 = (0..nn)
            .map(|i| inv.diag(i) * kappa[i] * (graph.degree(i) as f64 - 1.0))
            .sum();
        for &(i, j) in graph.edges() {
            dlogdet_dlam -= 2.0 * inv.get(i, j) * kappa[i] * kappa[j];
        }
        g[l.logit_lambda] += (0.5 * dlogdet_dlam - 0.5 * dquad_dlam / s2) * lam * (1.0 - lam);

        // kappa, chained through log kappa
        for k in 0..nn {
            let mut dlogdet = inv.diag(k) * a[k];
            let mut cross = 0.0;
            for &j in graph.neighbors(k) {
                dlogdet -= 2.0 * lam * inv.get(k, j) * kappa[j];
                cross += kappa[j] * b[j];
            }
            let dquad = a[k] * b[k] * b[k] - 2.0 * lam * b[k] * cross;
            g[l.log_kappa.start + k] += kappa[k] * (0.5 * dlogdet - 0.5 * dquad / s2);
        }
    }

    /// Maps an unconstrained vector to the constrained parameter state.
    pub fn to_state(&self, x: &[f64]) -> Result<ParameterState> {
        if x.len() != self.layout.dim {
            return Err(Error::Length {
                what: "unconstrained vector",
                expected: self.layout.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite unconstrained vector".into()));
        }
        let l = &self.layout;
        let u = self.unpack(x);
        Ok(ParameterState {
            kind: self.spec.kind,
            beta0: u.beta0,
            beta: u.beta.to_vec(),
            sigma: u.sigma,
            lambda: u.lambda,
            theta: x[l.theta.clone()].to_vec(),
            u_star: x[l.u_star.clone()].to_vec(),
            b: x[l.b.clone()].to_vec(),
            kappa: u.kappa,
            z: x[l.z.clone()].to_vec(),
            nu: l.log_nu.map(|_| u.nu),
        })
    }

    /// Inverse of [`Model::to_state`]. For log-CAR models `kappa` is ignored
    /// (it is a function of `z` and `nu`).
    pub fn to_unconstrained(&self, s: &ParameterState) -> Result<Vec<f64>> {
        let l = &self.layout;
        if s.kind != self.spec.kind {
            return Err(Error::invalid(format!(
                "state is for {} but model is {}",
                s.kind, self.spec.kind
            )));
        }
        let check = |what: &'static str, got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(Error::Length { what, expected, got })
            }
        };
        check("beta", s.beta.len(), l.beta.len())?;
        check("theta", s.theta.len(), l.theta.len())?;
        check("u_star", s.u_star.len(), l.u_star.len())?;
        check("b", s.b.len(), l.b.len())?;
        if s.kind.gamma_mixing() {
            check("kappa", s.kappa.len(), l.n)?;
        }
        check("z", s.z.len(), l.z.len())?;
        if !(s.sigma > 0.0) || !(s.lambda > 0.0 && s.lambda < 1.0) {
            return Err(Error::invalid("sigma must be > 0 and lambda in (0, 1)"));
        }
        let mut x = vec![0.0; l.dim];
        x[l.beta0] = s.beta0;
        x[l.beta.clone()].copy_from_slice(&s.beta);
        x[l.log_sigma] = s.sigma.ln();
        x[l.logit_lambda] = (s.lambda / (1.0 - s.lambda)).ln();
        x[l.theta.clone()].copy_from_slice(&s.theta);
        x[l.u_star.clone()].copy_from_slice(&s.u_star);
        x[l.b.clone()].copy_from_slice(&s.b);
        for (i, k) in l.log_kappa.clone().zip(&s.kappa) {
            if !(*k > 0.0) {
                return Err(Error::invalid("kappa must be positive"));
            }
            x[i] = k.ln();
        }
        x[l.z.clone()].copy_from_slice(&s.z);
        if let Some(i) = l.log_nu {
            let nu = s.nu.ok_or_else(|| Error::invalid("nu missing from state"))?;
            if !(nu > 0.0) {
                return Err(Error::invalid("nu must be positive"));
            }
            x[i] = nu.ln();
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(x)
    }

    /// Names of the constrained output columns, in [`Model::constrained`] order.
    pub fn output_names(&self) -> Vec<String> {
        let l = &self.layout;
        let n = l.n;
        let mut names = vec!["beta0".to_string()];
        names.extend((1..=l.p).map(|k| format!("beta[{k}]")));
        names.push("sigma".into());
        names.push("lambda".into());
        if l.log_nu.is_some() {
            names.push("nu".into());
        }
        let mut block = |prefix: &str, present: bool| {
            if present {
                names.extend((1..=n).map(|i| format!("{prefix}[{i}]")));
            }
        };
        block("theta", self.spec.kind.is_bym2_family());
        block("u_star", self.spec.kind.is_bym2_family());
        block("z", self.spec.kind == ModelKind::Bym2LogCar);
        block("kappa", self.spec.kind.has_kappa());
        block("b", true);
        names
    }

    /// Constrained view of `x` matching [`Model::output_names`].
    pub fn constrained(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let u = self.unpack(x);
        let mut out = Vec::with_capacity(l.dim + 2 * l.n);
        out.push(u.beta0);
        out.extend_from_slice(u.beta);
        out.push(u.sigma);
        out.push(u.lambda);
        if l.log_nu.is_some() {
            out.push(u.nu);
        }
        if self.spec.kind.is_bym2_family() {
            out.extend_from_slice(&x[l.theta.clone()]);
            out.extend_from_slice(&x[l.u_star.clone()]);
        }
        if self.spec.kind == ModelKind::Bym2LogCar {
            out.extend_from_slice(&x[l.z.clone()]);
        }
        out.extend_from_slice(&u.kappa);
        out.extend(self.latent_inner(x, &u));
        out
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Target for Model {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_grad(x, grad)
    }

    fn output_names(&self) -> Vec<String> {
        Model::output_names(self)
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.constrained(x)
    }

    fn pointwise_loglik(&self, x: &[f64]) -> Vec<f64> {
        Model::pointwise_loglik(self, x)
    }
}

/// Latent effects implied by a constrained state.
pub fn latent_effects(state: &ParameterState) -> Vec<f64> {
    if !state.kind.is_bym2_family() {
        return state.b.clone();
    }
    let w_un = (1.0 - state.lambda).sqrt();
    let w_st = state.lambda.sqrt();
    state
        .theta
        .iter()
        .zip(&state.u_star)
        .enumerate()
        .map(|(i, (t, u))| {
            let k = if state.kind == ModelKind::Bym2 { 1.0 } else { state.kappa[i] };
            state.sigma / k.sqrt() * (w_un * t + w_st * u)
        })
        .collect()
}

/// Log-posterior at a constrained state (Jacobians of the unconstrained
/// transforms included).
pub fn log_posterior(state: &ParameterState, spec: &ModelSpec, data: &Arc<ObservedData>) -> Result<f64> {
    let m = Model::new(spec.clone(), Arc::clone(data))?;
    let x = m.to_unconstrained(state)?;
    let v = m.log_posterior(&x);
    if !v.is_finite() {
        return Err(Error::Numerical("log-posterior is not finite (divergent state)".into()));
    }
    Ok(v)
}

/// Gradient with respect to the unconstrained coordinates.
pub fn grad_log_posterior(
    state: &ParameterState,
    spec: &ModelSpec,
    data: &Arc<ObservedData>,
) -> Result<Vec<f64>> {
    let m = Model::new(spec.clone(), Arc::clone(data))?;
    let x = m.to_unconstrained(state)?;
    let mut g = vec![0.0; x.len()];
    m.log_posterior_grad(&x, &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("gradient is not finite (divergent state)".into()));
    }
    Ok(g)
}

/// Unconstrained vector for a state.
pub fn transform_to_unconstrained(
    state: &ParameterState,
    spec: &ModelSpec,
    data: &Arc<ObservedData>,
) -> Result<Vec<f64>> {
    Model::new(spec.clone(), Arc::clone(data))?.to_unconstrained(state)
}

pub fn transform_from_unconstrained(
    x: &[f64],
    spec: &ModelSpec,
    data: &Arc<ObservedData>,
) -> Result<ParameterState> {
    Model::new(spec.clone(), Arc::clone(data))?.to_state(x)
}
