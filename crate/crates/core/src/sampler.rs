//! Hamiltonian Monte Carlo with dual-averaging step size and a diagonal
//! metric estimated during warmup.
//!
//! Each transition integrates a leapfrog trajectory of `L ~ U{1..L_max}`
//! steps, where `L_max = integration_time / step_size` (capped at
//! `max_leapfrog`). Warmup runs in three phases:
//!
//! ```text
//! [ fast: step size | slow windows: step size + metric | fast: step size ]
//!       15%                    75% (doubling)                   10%
//! ```
//!
//! Each slow window ends by replacing the metric with the regularized draw
//! variances of that window; the last window spans the second half of the
//! adaptation phase. The metric and step size are frozen after warmup.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hamiltonian error beyond which a transition counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;
const INIT_RADIUS: f64 = 2.0;

/// A differentiable log-density over `R^dim`.
///
/// Implementations must be pure: chains call into the same target
/// concurrently.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(x)` and overwrites `grad` with its gradient. A
    /// non-finite return marks the point as divergent.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Names of the recorded (constrained) quantities.
    fn output_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Recorded quantities for an unconstrained point.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    /// Pointwise log-likelihood, stored with each kept draw.
    fn pointwise_loglik(&self, _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    /// Upper end of the jittered trajectory length, in time units of the
    /// adapted metric.
    pub integration_time: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            iterations: 20_000,
            warmup: 10_000,
            thin: 10,
            target_accept: 0.8,
            max_leapfrog: 1024,
            integration_time: std::f64::consts::PI,
            seed: 20_152_016,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::config("chains", "must be at least 1"));
        }
        if self.warmup >= self.iterations {
            return Err(Error::config("warmup", "must be smaller than iterations"));
        }
        if self.thin == 0 {
            return Err(Error::config("thin", "must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("target_accept", "must lie in (0, 1)"));
        }
        if self.max_leapfrog == 0 {
            return Err(Error::config("max_leapfrog", "must be at least 1"));
        }
        if !(self.integration_time > 0.0 && self.integration_time.is_finite()) {
            return Err(Error::config("integration_time", "must be positive"));
        }
        Ok(())
    }

    /// Kept draws per chain.
    pub fn kept_draws(&self) -> usize {
        (self.iterations - self.warmup) / self.thin
    }
}

/// Per-chain adaptation and transition statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    /// Mean acceptance statistic over post-warmup iterations.
    pub mean_accept: f64,
    pub divergences: usize,
    /// Total leapfrog steps taken, warmup included.
    pub leapfrog_steps: u64,
    pub inv_metric: Vec<f64>,
}

/// Kept draws of every chain, on the constrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    /// `chains x kept x names.len()`.
    draws: Vec<Vec<Vec<f64>>>,
    /// `chains x kept x n_obs`.
    loglik: Vec<Vec<Vec<f64>>>,
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn new(
        names: Vec<String>,
        draws: Vec<Vec<Vec<f64>>>,
        loglik: Vec<Vec<Vec<f64>>>,
        stats: Vec<ChainStats>,
    ) -> Result<Self> {
        if draws.len() != loglik.len() {
            return Err(Error::invalid("draws and log-likelihood chain counts differ"));
        }
        let kept = draws.first().map_or(0, Vec::len);
        for (c, (d, l)) in draws.iter().zip(&loglik).enumerate() {
            if d.len() != kept || (!l.is_empty() && l.len() != kept) {
                return Err(Error::invalid(format!("chain {c} has a ragged number of draws")));
            }
            if d.iter().any(|row| row.len() != names.len()) {
                return Err(Error::invalid(format!("chain {c} has rows of the wrong width")));
            }
        }
        Ok(Self {
            names,
            draws,
            loglik,
            stats,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn chains(&self) -> usize {
        self.draws.len()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of one parameter, per chain.
    pub fn chain_values(&self, param: usize) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|c| c.iter().map(|row| row[param]).collect())
            .collect()
    }

    /// Draws of one parameter, chains concatenated.
    pub fn pooled(&self, param: usize) -> Vec<f64> {
        self.draws
            .iter()
            .flat_map(|c| c.iter().map(move |row| row[param]))
            .collect()
    }

    pub fn chain_draws(&self, chain: usize) -> &[Vec<f64>] {
        &self.draws[chain]
    }

    /// Pointwise log-likelihood rows, chains concatenated (`S x n`).
    pub fn loglik_matrix(&self) -> Vec<Vec<f64>> {
        self.loglik.iter().flatten().cloned().collect()
    }

    pub fn has_loglik(&self) -> bool {
        self.loglik.iter().any(|c| c.iter().any(|r| !r.is_empty()))
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }

    /// CSV with header `chain,draw,<names...>,log_lik[1..n]` (1-based chain
    /// and draw numbers).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n_obs = self
            .loglik
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend((1..=n_obs).map(|i| format!("log_lik[{i}]")));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for (c, chain) in self.draws.iter().enumerate() {
            for (s, row) in chain.iter().enumerate() {
                rec.clear();
                rec.push((c + 1).to_string());
                rec.push((s + 1).to_string());
                rec.extend(row.iter().map(|v| v.to_string()));
                if n_obs > 0 {
                    rec.extend(self.loglik[c][s].iter().map(|v| v.to_string()));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`PosteriorDraws::write_csv`]. Chain
    /// statistics are not stored in the CSV and come back empty.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header.len() < 2 || header[0] != "chain" || header[1] != "draw" {
            return Err(Error::invalid("draws CSV must start with `chain,draw`"));
        }
        let ll_start = header
            .iter()
            .position(|h| h.starts_with("log_lik["))
            .unwrap_or(header.len());
        let names = header[2..ll_start].to_vec();
        let mut draws: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut loglik: Vec<Vec<Vec<f64>>> = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    line: k + 2,
                    msg: format!("bad number `{s}`"),
                })
            };
            let chain: usize = rec[0].parse().map_err(|_| Error::Parse {
                line: k + 2,
                msg: format!("bad chain `{}`", &rec[0]),
            })?;
            if chain == 0 {
                return Err(Error::Parse { line: k + 2, msg: "chain numbers start at 1".into() });
            }
            while draws.len() < chain {
                draws.push(Vec::new());
                loglik.push(Vec::new());
            }
            let row = (2..ll_start).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let ll = (ll_start..rec.len()).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            draws[chain - 1].push(row);
            loglik[chain - 1].push(ll);
        }
        Self::new(names, draws, loglik, Vec::new())
    }
}

/// Runs `config.chains` chains, in parallel, and merges them by chain index.
///
/// Chain `c` draws from the ChaCha8 stream `(seed, c)`, so results are
/// reproducible and independent of scheduling.
pub fn hmc_run<T: Target>(
    target: &T,
    config: &SamplerConfig,
    init: Option<&[f64]>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if let Some(x0) = init {
        if x0.len() != target.dim() {
            return Err(Error::Length {
                what: "initial point",
                expected: target.dim(),
                got: x0.len(),
            });
        }
    }
    let results: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            run_chain(target, config, init, &mut rng)
        })
        .collect();
    let mut draws = Vec::with_capacity(config.chains);
    let mut loglik = Vec::with_capacity(config.chains);
    let mut stats = Vec::with_capacity(config.chains);
    for r in results {
        let out = r?;
        draws.push(out.draws);
        loglik.push(out.loglik);
        stats.push(out.stats);
    }
    PosteriorDraws::new(target.output_names(), draws, loglik, stats)
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    loglik: Vec<Vec<f64>>,
    stats: ChainStats,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl Point {
    fn at<T: Target>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_grad(&q, &mut grad);
        Self { q, grad, logp }
    }

    fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

fn initial_point<T: Target, R: Rng>(target: &T, init: Option<&[f64]>, rng: &mut R) -> Result<Point> {
    if let Some(x0) = init {
        let p = Point::at(target, x0.to_vec());
        if p.is_finite() {
            return Ok(p);
        }
    }
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..target.dim())
            .map(|_| rng.random_range(-INIT_RADIUS..INIT_RADIUS))
            .collect();
        let p = Point::at(target, q);
        if p.is_finite() {
            return Ok(p);
        }
    }
    Err(Error::Init {
        attempts: INIT_ATTEMPTS,
    })
}

/// Nesterov dual averaging of `log(step)` toward a target acceptance rate.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            target,
            h_bar: 0.0,
            log_step: step.ln(),
            log_step_bar: 0.0,
            count: 0.0,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        self.log_step = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = m.powf(-Self::KAPPA);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
        self.log_step.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
struct VarianceWindow {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceWindow {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Variances shrunk toward `1e-3`, as in Stan's diagonal adaptation.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup iterations (0-based) at which a slow window closes.
fn window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 20 {
        return Vec::new();
    }
    let init = (0.15 * warmup as f64).ceil() as usize;
    let term = (0.1 * warmup as f64).ceil() as usize;
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = ((slow_end - init) / 15).max(5);
    while start < slow_end {
        let mut end = start + size;
        // fold a short remainder into the current window
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end - 1);
        start = end;
        size *= 2;
    }
    ends
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(v, m)| v * v * m).sum::<f64>()
}

fn sample_momentum<R: Rng>(inv_metric: &[f64], rng: &mut R) -> Vec<f64> {
    inv_metric
        .iter()
        .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
        .collect()
}

struct Transition {
    point: Point,
    accept: f64,
    divergent: bool,
    steps: usize,
}

fn transition<T: Target, R: Rng>(
    target: &T,
    current: &Point,
    step: f64,
    n_steps: usize,
    inv_metric: &[f64],
    rng: &mut R,
) -> Transition {
    let mut p = sample_momentum(inv_metric, rng);
    let h0 = -current.logp + kinetic(&p, inv_metric);
    let mut q = current.q.clone();
    let mut grad = current.grad.clone();
    let mut logp = current.logp;
    let mut taken = 0;
    let mut divergent = false;
    for _ in 0..n_steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * g;
        }
        for ((qi, pi), m) in q.iter_mut().zip(&p).zip(inv_metric) {
            *qi += step * m * pi;
        }
        logp = target.log_density_grad(&q, &mut grad);
        taken += 1;
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            divergent = true;
            break;
        }
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * g;
        }
        let h = -logp + kinetic(&p, inv_metric);
        if !(h - h0 <= DIVERGENCE_THRESHOLD) {
            divergent = true;
            break;
        }
    }
    if divergent {
        return Transition {
            point: current.clone(),
            accept: 0.0,
            divergent,
            steps: taken,
        };
    }
    let h1 = -logp + kinetic(&p, inv_metric);
    let accept = (h0 - h1).exp().min(1.0);
    let accept = if accept.is_nan() { 0.0 } else { accept };
    let u: f64 = rng.random();
    let point = if u < accept {
        Point { q, grad, logp }
    } else {
        current.clone()
    };
    Transition {
        point,
        accept,
        divergent: false,
        steps: taken,
    }
}

/// Doubles or halves the step until a single leapfrog step's acceptance
/// crosses one half.
fn initial_step<T: Target, R: Rng>(target: &T, start: &Point, inv_metric: &[f64], rng: &mut R) -> f64 {
    let mut step = 1.0;
    let accept_at = |step: f64, rng: &mut R| transition(target, start, step, 1, inv_metric, rng).accept;
    let a0 = accept_at(step, rng);
    let up = a0 > 0.5;
    for _ in 0..60 {
        let next = if up { step * 2.0 } else { step * 0.5 };
        let a = accept_at(next, rng);
        if up && a < 0.5 {
            break;
        }
        step = next;
        if !up && a > 0.5 {
            break;
        }
    }
    step
}

fn trajectory_cap(config: &SamplerConfig, step: f64) -> usize {
    ((config.integration_time / step).round() as usize).clamp(1, config.max_leapfrog)
}

fn run_chain<T: Target, R: Rng>(
    target: &T,
    config: &SamplerConfig,
    init: Option<&[f64]>,
    rng: &mut R,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut current = initial_point(target, init, rng)?;
    let mut inv_metric = vec![1.0; dim];
    let mut step = initial_step(target, &current, &inv_metric, rng);
    let mut da = DualAveraging::new(step, config.target_accept);
    let ends = window_ends(config.warmup);
    let slow_start = if ends.is_empty() {
        usize::MAX
    } else {
        (0.15 * config.warmup as f64).ceil() as usize
    };
    let mut window = VarianceWindow::new(dim);
    let mut next_end = 0;

    let kept = config.kept_draws();
    let mut draws = Vec::with_capacity(kept);
    let mut loglik = Vec::with_capacity(kept);
    let mut divergences = 0;
    let mut leapfrog_steps = 0u64;
    let mut accept_sum = 0.0;

    for it in 0..config.iterations {
        let cap = trajectory_cap(config, step);
        let n_steps = rng.random_range(1..=cap);
        let tr = transition(target, &current, step, n_steps, &inv_metric, rng);
        leapfrog_steps += tr.steps as u64;
        current = tr.point;

        if it < config.warmup {
            step = da.update(tr.accept);
            if it >= slow_start && next_end < ends.len() {
                window.push(&current.q);
                if it == ends[next_end] {
                    inv_metric = window.regularized();
                    window = VarianceWindow::new(dim);
                    next_end += 1;
                    step = initial_step(target, &current, &inv_metric, rng);
                    da = DualAveraging::new(step, config.target_accept);
                }
            }
            if it + 1 == config.warmup {
                step = da.final_step();
            }
            continue;
        }

        if tr.divergent {
            divergences += 1;
        }
        accept_sum += tr.accept;
        let k = it - config.warmup;
        if (k + 1) % config.thin == 0 && draws.len() < kept {
            draws.push(target.constrain(&current.q));
            loglik.push(target.pointwise_loglik(&current.q));
        }
    }

    Ok(ChainOutput {
        draws,
        loglik,
        stats: ChainStats {
            step_size: step,
            mean_accept: accept_sum / (config.iterations - config.warmup) as f64,
            divergences,
            leapfrog_steps,
            inv_metric,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl Target for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    struct NanEverywhere;

    impl Target for NanEverywhere {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_grad(&self, _x: &[f64], _grad: &mut [f64]) -> f64 {
            f64::NAN
        }
    }

    fn small_config() -> SamplerConfig {
        SamplerConfig {
            chains: 2,
            iterations: 600,
            warmup: 300,
            thin: 1,
            seed: 7,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn defaults_mirror_study_settings() {
        let c = SamplerConfig::default();
        assert_eq!((c.chains, c.iterations, c.warmup, c.thin), (2, 20_000, 10_000, 10));
        assert_eq!(c.kept_draws(), 1000);
        assert_eq!(c.seed, 20_152_016);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SamplerConfig { warmup: 600, ..small_config() },
            SamplerConfig { thin: 0, ..small_config() },
            SamplerConfig { chains: 0, ..small_config() },
            SamplerConfig { target_accept: 1.0, ..small_config() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn kept_draw_count_and_shape() {
        let cfg = SamplerConfig { thin: 7, ..small_config() };
        let d = hmc_run(&StdNormal(3), &cfg, None).unwrap();
        assert_eq!(d.chains(), 2);
        assert_eq!(d.kept_per_chain(), 300 / 7);
        assert_eq!(d.names()[0], "x[1]");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = hmc_run(&StdNormal(2), &small_config(), None).unwrap();
        let b = hmc_run(&StdNormal(2), &small_config(), None).unwrap();
        assert_eq!(a, b);
        let c = hmc_run(&StdNormal(2), &SamplerConfig { seed: 8, ..small_config() }, None).unwrap();
        assert_ne!(a.chain_draws(0), c.chain_draws(0));
    }

    #[test]
    fn chains_use_independent_streams() {
        let one = hmc_run(&StdNormal(2), &SamplerConfig { chains: 1, ..small_config() }, None).unwrap();
        let two = hmc_run(&StdNormal(2), &small_config(), None).unwrap();
        assert_eq!(one.chain_draws(0), two.chain_draws(0));
        assert_ne!(two.chain_draws(0), two.chain_draws(1));
    }

    #[test]
    fn init_failure_is_reported() {
        assert!(matches!(
            hmc_run(&NanEverywhere, &small_config(), None),
            Err(Error::Init { attempts: 100 })
        ));
    }

    #[test]
    fn windows_cover_the_slow_phase() {
        let ends = window_ends(1000);
        assert_eq!(*ends.last().unwrap(), 899);
        assert!(ends.windows(2).all(|w| w[0] < w[1]));
        assert!(window_ends(10).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let d = hmc_run(&StdNormal(2), &SamplerConfig { iterations: 320, ..small_config() }, None).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = PosteriorDraws::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.names(), d.names());
        assert_eq!(back.chain_draws(1), d.chain_draws(1));
    }
}
