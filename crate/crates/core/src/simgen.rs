//! Simulation studies: generate shared latent effects once, draw Poisson
//! replicates, fit each requested model to each replicate and tabulate WAIC,
//! outlier-flag frequencies and interval coverage.
//!
//! Randomness is keyed by `(seed, stream)`: stream 0 draws the shared
//! quantities, stream `r + 1` draws the counts of replicate `r`, and the fits
//! of replicate `r` use sampler seed `seed + r + 1`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::car::{PcarParams, PcarSampler, ScaledIcarSampler};
use crate::diagnostics::{posterior_summary, Waic};
use crate::error::{Error, Result};
use crate::fit::fit;
use crate::graph::{scaling_factor, AdjacencyGraph};
use crate::io::{Dataset, Exposure};
use crate::models::{latent_effects, ModelKind, ModelSpec, ObservedData, ParameterState};
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    /// Proper CAR effects, some areas shifted upwards, regression on `x`.
    ContaminatedPcar,
    /// Effects drawn from the BYM2-Gamma prior.
    FromBym2Gamma,
    /// Effects drawn from the BYM2-logCAR prior.
    FromBym2Logcar,
    /// Proper CAR effects without contamination.
    NoOutliers,
}

impl Protocol {
    fn is_pcar(self) -> bool {
        matches!(self, Protocol::ContaminatedPcar | Protocol::NoOutliers)
    }

    /// The fitted model whose parameters the generator shares, if any.
    pub fn generating_model(self) -> Option<ModelKind> {
        match self {
            Protocol::FromBym2Gamma => Some(ModelKind::Bym2Gamma),
            Protocol::FromBym2Logcar => Some(ModelKind::Bym2LogCar),
            _ => None,
        }
    }
}

/// Either a file (edge list, optional labels) or a regular lattice.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// `[rows, cols]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice: Option<[usize; 2]>,
}

/// Generator parameters. Unset values take protocol defaults; values that do
/// not apply to the protocol must stay unset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Gamma mixing degrees of freedom.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Log-CAR mixing variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_kappa: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    #[default]
    Positive,
    Negative,
    /// Each area gets an independent fair-coin sign.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Contamination {
    /// 1-based area indices.
    pub nodes: Vec<usize>,
    pub low: f64,
    pub high: f64,
    pub sign: Sign,
}

impl Default for Contamination {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            low: 1.0,
            high: 2.0,
            sign: Sign::Positive,
        }
    }
}

/// Offsets and covariates: read from a dataset file (its counts are
/// ignored) or drawn once as `E ~ U(expected_low, expected_high)` rounded
/// and `x ~ U(covariate_low, covariate_high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub expected_low: f64,
    pub expected_high: f64,
    pub covariate_low: f64,
    pub covariate_high: f64,
}

impl Default for ExposureSource {
    fn default() -> Self {
        Self {
            data: None,
            expected_low: 50.0,
            expected_high: 500.0,
            covariate_low: 0.3,
            covariate_high: 0.8,
        }
    }
}

fn default_replicates() -> usize {
    100
}

fn default_seed() -> u64 {
    SamplerConfig::default().seed
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub protocol: Protocol,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    pub graph: GraphSource,
    #[serde(default)]
    pub generator: Generator,
    #[serde(default)]
    pub contamination: Contamination,
    #[serde(default)]
    pub exposure: ExposureSource,
    /// `sampler.seed` is ignored; fits derive their seed from `seed`.
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn check_positive(field: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(Error::config(field, format!("must be positive, got {v}"))),
        _ => Ok(()),
    }
}

impl StudyConfig {
    /// Parses, fills every protocol default and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config("study", e.message().to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// The fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("study configuration serializes")
    }

    fn resolve(&mut self) -> Result<()> {
        let g = &mut self.generator;
        let misplaced = |name: &str, set: bool| -> Result<()> {
            if set {
                Err(Error::config(
                    &format!("generator.{name}"),
                    format!("does not apply to protocol {:?}", self.protocol),
                ))
            } else {
                Ok(())
            }
        };
        g.beta0.get_or_insert(-0.1);
        match self.protocol {
            Protocol::ContaminatedPcar | Protocol::NoOutliers => {
                misplaced("lambda", g.lambda.is_some())?;
                misplaced("sigma", g.sigma.is_some())?;
                misplaced("nu", g.nu.is_some())?;
                misplaced("nu_kappa", g.nu_kappa.is_some())?;
                let contaminated = self.protocol == Protocol::ContaminatedPcar;
                g.alpha.get_or_insert(0.7);
                g.sigma_b.get_or_insert(if contaminated { 0.7f64.sqrt() } else { 0.2f64.sqrt() });
                g.beta.get_or_insert_with(|| if contaminated { vec![-4.0] } else { Vec::new() });
            }
            Protocol::FromBym2Gamma | Protocol::FromBym2Logcar => {
                misplaced("alpha", g.alpha.is_some())?;
                misplaced("sigma_b", g.sigma_b.is_some())?;
                let gamma = self.protocol == Protocol::FromBym2Gamma;
                misplaced("nu_kappa", gamma && g.nu_kappa.is_some())?;
                misplaced("nu", !gamma && g.nu.is_some())?;
                g.lambda.get_or_insert(0.8);
                g.sigma.get_or_insert(0.3);
                g.beta.get_or_insert_with(Vec::new);
                if gamma {
                    g.nu.get_or_insert(4.0);
                } else {
                    g.nu_kappa.get_or_insert(0.3);
                }
            }
        }
        if self.protocol != Protocol::ContaminatedPcar && !self.contamination.nodes.is_empty() {
            return Err(Error::config("contamination.nodes", "only the CONTAMINATED_PCAR protocol contaminates"));
        }
        self.sampler.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "list at least one model"));
        }
        let src = &self.graph;
        if src.path.is_some() == src.lattice.is_some() {
            return Err(Error::config("graph", "give exactly one of path or lattice"));
        }
        if src.labels.is_some() && src.path.is_none() {
            return Err(Error::config("graph.labels", "labels need a graph path"));
        }
        if let Some([r, c]) = src.lattice {
            if r == 0 || c == 0 || r * c < 2 {
                return Err(Error::config("graph.lattice", "need at least two cells"));
            }
        }
        let g = &self.generator;
        if let Some(a) = g.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::config("generator.alpha", format!("must lie in [0, 1), got {a}")));
            }
        }
        if let Some(l) = g.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("generator.lambda", format!("must lie in [0, 1], got {l}")));
            }
        }
        check_positive("generator.sigma_b", g.sigma_b)?;
        check_positive("generator.sigma", g.sigma)?;
        check_positive("generator.nu", g.nu)?;
        check_positive("generator.nu_kappa", g.nu_kappa)?;
        let finite = g.beta0.iter().chain(g.beta.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("generator.beta", "coefficients must be finite"));
        }
        let c = &self.contamination;
        if !(c.low.is_finite() && c.high.is_finite() && c.low >= 0.0 && c.low < c.high) {
            return Err(Error::config("contamination", "need 0 <= low < high"));
        }
        let mut sorted = c.nodes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != c.nodes.len() {
            return Err(Error::config("contamination.nodes", "nodes are listed twice"));
        }
        let e = &self.exposure;
        if !(e.expected_low > 0.0 && e.expected_low < e.expected_high && e.expected_high.is_finite()) {
            return Err(Error::config("exposure", "need 0 < expected_low < expected_high"));
        }
        if !(e.covariate_low < e.covariate_high && e.covariate_low.is_finite() && e.covariate_high.is_finite()) {
            return Err(Error::config("exposure", "need covariate_low < covariate_high"));
        }
        self.sampler.validate()
    }

    /// Reads the graph and exposure files; relative paths resolve against
    /// `base`.
    pub fn load_inputs(&self, base: &Path) -> Result<StudyInputs> {
        let read = |p: &Path| std::fs::read_to_string(base.join(p));
        let mut graph = match (&self.graph.path, self.graph.lattice) {
            (Some(p), _) => AdjacencyGraph::parse(&read(p)?)?,
            (None, Some([r, c])) => AdjacencyGraph::lattice(r, c)?,
            (None, None) => return Err(Error::config("graph", "give exactly one of path or lattice")),
        };
        if let Some(p) = &self.graph.labels {
            graph = graph.with_labels(AdjacencyGraph::parse_labels(&read(p)?))?;
        }
        let exposure = match &self.exposure.data {
            Some(p) => Some(Dataset::read(std::fs::File::open(base.join(p))?)?),
            None => None,
        };
        StudyInputs::new(graph, exposure)
    }
}

/// Graph and optional exposure dataset of a study.
#[derive(Debug, Clone)]
pub struct StudyInputs {
    pub graph: Arc<AdjacencyGraph>,
    pub exposure: Option<Dataset>,
}

impl StudyInputs {
    pub fn new(graph: AdjacencyGraph, exposure: Option<Dataset>) -> Result<Self> {
        if !graph.is_connected() {
            return Err(Error::Disconnected {
                components: graph.connected_components().count,
            });
        }
        if let Some(d) = &exposure {
            if d.n() != graph.n() {
                return Err(Error::Length { what: "exposure rows", expected: graph.n(), got: d.n() });
            }
        }
        Ok(Self { graph: Arc::new(graph), exposure })
    }
}

/// Quantities shared by every replicate of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTruth {
    pub ids: Vec<String>,
    pub offsets: Vec<f64>,
    pub covariates: Vec<Vec<f64>>,
    /// Latent effects entering the Poisson mean.
    pub b: Vec<f64>,
    /// Latent effects before contamination (PCAR protocols).
    pub b_clean: Option<Vec<f64>>,
    pub contaminated: Vec<bool>,
    pub theta: Option<Vec<f64>>,
    pub u_star: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub kappa: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStudy {
    pub truth: SimulatedTruth,
    /// Counts of each replicate.
    pub counts: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

impl SimulatedStudy {
    pub fn dataset(&self, replicate: usize) -> Dataset {
        Dataset {
            ids: self.truth.ids.clone(),
            y: self.counts[replicate].clone(),
            exposure: Exposure::Expected(self.truth.offsets.clone()),
            covariates: self.truth.covariates.clone(),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shared_exposure(cfg: &StudyConfig, inputs: &StudyInputs, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = inputs.graph.n();
    let p = cfg.generator.beta.as_ref().map_or(0, Vec::len);
    match &inputs.exposure {
        Some(d) => {
            if d.p() != p {
                return Err(Error::config(
                    "generator.beta",
                    format!("has {p} coefficients but the exposure file has {} covariates", d.p()),
                ));
            }
            Ok((d.offsets()?, d.covariates.clone()))
        }
        None => {
            let e = &cfg.exposure;
            let offsets = (0..n)
                .map(|_| rng.random_range(e.expected_low..e.expected_high).round().max(1.0))
                .collect();
            let covariates = (0..n)
                .map(|_| (0..p).map(|_| rng.random_range(e.covariate_low..e.covariate_high)).collect())
                .collect();
            Ok((offsets, covariates))
        }
    }
}

fn ids(g: &AdjacencyGraph) -> Vec<String> {
    (0..g.n()).map(|i| g.label(i)).collect()
}

fn replicate_counts(cfg: &StudyConfig, truth: &SimulatedTruth) -> Result<Vec<Vec<u64>>> {
    let beta0 = cfg.generator.beta0.unwrap_or_default();
    let beta = cfg.generator.beta.clone().unwrap_or_default();
    let means: Vec<f64> = (0..truth.b.len())
        .map(|i| {
            let xb: f64 = beta.iter().zip(&truth.covariates[i]).map(|(b, x)| b * x).sum();
            truth.offsets[i] * (beta0 + xb + truth.b[i]).exp()
        })
        .collect();
    if let Some(m) = means.iter().find(|m| !(**m > 0.0 && m.is_finite() && **m < 1e12)) {
        return Err(Error::Numerical(format!("Poisson mean {m} is out of range")));
    }
    let dists: Vec<Poisson<f64>> = means
        .iter()
        .map(|&m| Poisson::new(m).map_err(|e| Error::Numerical(e.to_string())))
        .collect::<Result<_>>()?;
    Ok((0..cfg.replicates)
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, r as u64 + 1);
            dists.iter().map(|d| d.sample(&mut rng) as u64).collect()
        })
        .collect())
}

/// Proper CAR effects, optionally contaminated, shared across replicates.
pub fn generate_contaminated_study(cfg: &StudyConfig, inputs: &StudyInputs) -> Result<SimulatedStudy> {
    if !cfg.protocol.is_pcar() {
        return Err(Error::config("protocol", "expected CONTAMINATED_PCAR or NO_OUTLIERS"));
    }
    let g = &inputs.graph;
    let n = g.n();
    let c = &cfg.contamination;
    if let Some(&bad) = c.nodes.iter().find(|&&i| i == 0 || i > n) {
        return Err(Error::config("contamination.nodes", format!("node {bad} is not in 1..={n}")));
    }
    let mut warnings = Vec::new();
    if cfg.protocol == Protocol::ContaminatedPcar && c.nodes.is_empty() {
        warnings.push("contamination list is empty; the study has no outliers".to_string());
    }
    let mut rng = stream_rng(cfg.seed, 0);
    let (offsets, covariates) = shared_exposure(cfg, inputs, &mut rng)?;
    let params = PcarParams::new(cfg.generator.alpha.unwrap_or(0.7), cfg.generator.sigma_b.unwrap_or(1.0))?;
    let clean = PcarSampler::new(g, params)?.sample(&mut rng);
    let mut b = clean.clone();
    let mut contaminated = vec![false; n];
    for &node in &c.nodes {
        let shift = rng.random_range(c.low..c.high);
        let sign = match c.sign {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
            Sign::Random => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        b[node - 1] += sign * shift;
        contaminated[node - 1] = true;
    }
    let truth = SimulatedTruth {
        ids: ids(g),
        offsets,
        covariates,
        b,
        b_clean: Some(clean),
        contaminated,
        theta: None,
        u_star: None,
        z: None,
        kappa: None,
    };
    let counts = replicate_counts(cfg, &truth)?;
    Ok(SimulatedStudy { truth, counts, warnings })
}

fn bym2_mixture(cfg: &StudyConfig, inputs: &StudyInputs, logcar: bool) -> Result<SimulatedStudy> {
    let g = &inputs.graph;
    let n = g.n();
    let gen = &cfg.generator;
    let mut rng = stream_rng(cfg.seed, 0);
    let (offsets, covariates) = shared_exposure(cfg, inputs, &mut rng)?;
    let icar = ScaledIcarSampler::new(g, scaling_factor(g)?)?;
    let theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let u_star = icar.sample(&mut rng);
    let (kind, kappa, z) = if logcar {
        let nu_k = gen.nu_kappa.unwrap_or(0.3);
        let z = icar.sample(&mut rng);
        let kappa: Vec<f64> = z.iter().map(|zi| (-nu_k / 2.0 + nu_k.sqrt() * zi).exp()).collect();
        (ModelKind::Bym2LogCar, kappa, Some(z))
    } else {
        let nu = gen.nu.unwrap_or(4.0);
        let gamma = Gamma::new(nu / 2.0, 2.0 / nu).map_err(|e| Error::invalid(e.to_string()))?;
        (ModelKind::Bym2Gamma, (0..n).map(|_| gamma.sample(&mut rng)).collect(), None)
    };
    let state = ParameterState {
        kind,
        beta0: gen.beta0.unwrap_or(-0.1),
        beta: gen.beta.clone().unwrap_or_default(),
        sigma: gen.sigma.unwrap_or(0.3),
        lambda: gen.lambda.unwrap_or(0.8),
        theta: theta.clone(),
        u_star: u_star.clone(),
        b: Vec::new(),
        kappa: kappa.clone(),
        z: z.clone().unwrap_or_default(),
        nu: gen.nu.or(gen.nu_kappa),
    };
    let truth = SimulatedTruth {
        ids: ids(g),
        offsets,
        covariates,
        b: latent_effects(&state),
        b_clean: None,
        contaminated: vec![false; n],
        theta: Some(theta),
        u_star: Some(u_star),
        z,
        kappa: Some(kappa),
    };
    let counts = replicate_counts(cfg, &truth)?;
    Ok(SimulatedStudy { truth, counts, warnings: Vec::new() })
}

/// Effects drawn once from the BYM2-Gamma prior.
pub fn generate_from_bym2_gamma(cfg: &StudyConfig, inputs: &StudyInputs) -> Result<SimulatedStudy> {
    if cfg.protocol != Protocol::FromBym2Gamma {
        return Err(Error::config("protocol", "expected FROM_BYM2_GAMMA"));
    }
    bym2_mixture(cfg, inputs, false)
}

/// Effects drawn once from the BYM2-logCAR prior.
pub fn generate_from_bym2_logcar(cfg: &StudyConfig, inputs: &StudyInputs) -> Result<SimulatedStudy> {
    if cfg.protocol != Protocol::FromBym2Logcar {
        return Err(Error::config("protocol", "expected FROM_BYM2_LOGCAR"));
    }
    bym2_mixture(cfg, inputs, true)
}

pub fn simulate(cfg: &StudyConfig, inputs: &StudyInputs) -> Result<SimulatedStudy> {
    match cfg.protocol {
        Protocol::ContaminatedPcar | Protocol::NoOutliers => generate_contaminated_study(cfg, inputs),
        Protocol::FromBym2Gamma => generate_from_bym2_gamma(cfg, inputs),
        Protocol::FromBym2Logcar => generate_from_bym2_logcar(cfg, inputs),
    }
}

/// Generating values of the parameters with a coverage check.
pub fn true_values(cfg: &StudyConfig) -> Vec<(String, f64)> {
    let g = &cfg.generator;
    let mut out = vec![("beta0".to_string(), g.beta0.unwrap_or(-0.1))];
    if cfg.protocol.generating_model().is_some() {
        out.extend(g.beta.iter().flatten().enumerate().map(|(k, b)| (format!("beta[{}]", k + 1), *b)));
        out.push(("lambda".into(), g.lambda.unwrap_or(0.8)));
        out.push(("sigma".into(), g.sigma.unwrap_or(0.3)));
        out.push(("nu".into(), g.nu.or(g.nu_kappa).unwrap_or(f64::NAN)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub param: String,
    pub truth: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub waic: Waic,
    pub max_rhat: Option<f64>,
    pub divergences: usize,
    /// Outlier flags for models with `kappa`.
    pub flagged: Option<Vec<bool>>,
    pub coverage: Vec<Coverage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateFit {
    pub replicate: usize,
    pub model: ModelKind,
    /// Sampler or model failures are recorded, not fatal.
    pub outcome: std::result::Result<FitSummary, String>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub study: SimulatedStudy,
    pub fits: Vec<ReplicateFit>,
}

/// Sampler configuration for the fits of replicate `r`.
pub fn replicate_sampler(cfg: &StudyConfig, replicate: usize) -> SamplerConfig {
    SamplerConfig {
        seed: cfg.seed.wrapping_add(replicate as u64 + 1),
        ..cfg.sampler.clone()
    }
}

fn fit_replicate(
    cfg: &StudyConfig,
    base: &ObservedData,
    counts: &[u64],
    replicate: usize,
    kind: ModelKind,
) -> Result<FitSummary> {
    let data = Arc::new(base.with_counts(counts.to_vec())?);
    let spec = ModelSpec::new(kind, data.p());
    let f = fit(spec, data, &replicate_sampler(cfg, replicate))?;
    let truths = true_values(cfg);
    let mut coverage = Vec::new();
    for (param, truth) in truths {
        let shared = cfg.protocol.generating_model() == Some(kind);
        if param != "beta0" && !shared {
            continue;
        }
        let Some(k) = f.draws.index_of(&param) else { continue };
        let s = posterior_summary(&f.draws.pooled(k))?;
        coverage.push(Coverage {
            param,
            truth,
            mean: s.mean,
            lower: s.lower,
            upper: s.upper,
            covered: s.lower <= truth && truth <= s.upper,
        });
    }
    Ok(FitSummary {
        waic: f.report.waic,
        max_rhat: f.report.max_rhat(),
        divergences: f.report.divergences,
        flagged: f.report.outliers.as_ref().map(|o| o.iter().map(|f| f.flagged).collect()),
        coverage,
    })
}

/// Simulates the study and fits every model to every replicate, in
/// parallel. Results are ordered by replicate, then by model.
pub fn run_study(cfg: &StudyConfig, inputs: &StudyInputs) -> Result<StudyReport> {
    cfg.validate()?;
    let study = simulate(cfg, inputs)?;
    let base = ObservedData::new(
        Arc::clone(&inputs.graph),
        study.counts[0].clone(),
        study.truth.offsets.clone(),
        study.truth.covariates.clone(),
    )?;
    let jobs: Vec<(usize, ModelKind)> = (0..cfg.replicates)
        .flat_map(|r| cfg.models.iter().map(move |&m| (r, m)))
        .collect();
    let fits = jobs
        .into_par_iter()
        .map(|(r, kind)| ReplicateFit {
            replicate: r,
            model: kind,
            outcome: fit_replicate(cfg, &base, &study.counts[r], r, kind).map_err(|e| e.to_string()),
        })
        .collect();
    Ok(StudyReport {
        config: cfg.clone(),
        study,
        fits,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| v.to_string())
}

impl StudyReport {
    fn successes(&self, model: ModelKind) -> impl Iterator<Item = (usize, &FitSummary)> {
        self.fits
            .iter()
            .filter(move |f| f.model == model)
            .filter_map(|f| f.outcome.as_ref().ok().map(|s| (f.replicate, s)))
    }

    pub fn failures(&self) -> usize {
        self.fits.iter().filter(|f| f.outcome.is_err()).count()
    }

    pub fn waic(&self, replicate: usize, model: ModelKind) -> Option<f64> {
        self.successes(model).find(|(r, _)| *r == replicate).map(|(_, s)| s.waic.waic)
    }

    /// Share of successful fits flagging each area; `None` for models
    /// without `kappa` or without successful fits.
    pub fn detection_frequency(&self, model: ModelKind) -> Option<Vec<f64>> {
        let flags: Vec<&Vec<bool>> = self.successes(model).filter_map(|(_, s)| s.flagged.as_ref()).collect();
        if flags.is_empty() {
            return None;
        }
        let n = flags[0].len();
        Some(
            (0..n)
                .map(|i| flags.iter().filter(|f| f[i]).count() as f64 / flags.len() as f64)
                .collect(),
        )
    }

    /// Covered count and number of successful fits for one parameter.
    pub fn coverage(&self, model: ModelKind, param: &str) -> (usize, usize) {
        let rows: Vec<bool> = self
            .successes(model)
            .filter_map(|(_, s)| s.coverage.iter().find(|c| c.param == param).map(|c| c.covered))
            .collect();
        (rows.iter().filter(|c| **c).count(), rows.len())
    }

    /// `replicate,model,status,waic,p_waic,lppd,max_rhat,divergences`.
    pub fn write_waic_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "model", "status", "waic", "p_waic", "lppd", "max_rhat", "divergences"])?;
        for f in &self.fits {
            let r = (f.replicate + 1).to_string();
            match &f.outcome {
                Ok(s) => w.write_record([
                    r,
                    f.model.to_string(),
                    "ok".into(),
                    s.waic.waic.to_string(),
                    s.waic.p_waic.to_string(),
                    s.waic.lppd.to_string(),
                    fmt_opt(s.max_rhat),
                    s.divergences.to_string(),
                ])?,
                Err(e) => w.write_record([
                    r,
                    f.model.to_string(),
                    format!("failed: {e}"),
                    "NA".into(),
                    "NA".into(),
                    "NA".into(),
                    "NA".into(),
                    "NA".into(),
                ])?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `id,contaminated,<model>...` with flag frequencies per `kappa` model.
    pub fn write_detection_csv<W: Write>(&self, out: W) -> Result<()> {
        let cols: Vec<(ModelKind, Vec<f64>)> = self
            .config
            .models
            .iter()
            .filter_map(|&m| self.detection_frequency(m).map(|d| (m, d)))
            .collect();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "contaminated".into()];
        header.extend(cols.iter().map(|(m, _)| m.to_string()));
        w.write_record(&header)?;
        let t = &self.study.truth;
        for i in 0..t.ids.len() {
            let mut row = vec![t.ids[i].clone(), t.contaminated[i].to_string()];
            row.extend(cols.iter().map(|(_, d)| d[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `replicate,model,param,truth,mean,lower,upper,covered`.
    pub fn write_coverage_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "model", "param", "truth", "mean", "lower", "upper", "covered"])?;
        for f in &self.fits {
            let Ok(s) = &f.outcome else { continue };
            for c in &s.coverage {
                w.write_record([
                    (f.replicate + 1).to_string(),
                    f.model.to_string(),
                    c.param.clone(),
                    c.truth.to_string(),
                    c.mean.to_string(),
                    c.lower.to_string(),
                    c.upper.to_string(),
                    c.covered.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Shared generated quantities: `id,E,x..,b,b_clean,kappa,contaminated`.
    pub fn write_truth_csv<W: Write>(&self, out: W) -> Result<()> {
        let t = &self.study.truth;
        let p = t.covariates.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "E".into()];
        header.extend((1..=p).map(|k| format!("x{k}")));
        header.extend(["b".into(), "b_clean".into(), "kappa".into(), "contaminated".into()]);
        w.write_record(&header)?;
        for i in 0..t.ids.len() {
            let mut row = vec![t.ids[i].clone(), t.offsets[i].to_string()];
            row.extend(t.covariates[i].iter().map(f64::to_string));
            row.push(t.b[i].to_string());
            row.push(fmt_opt(t.b_clean.as_ref().map(|v| v[i])));
            row.push(fmt_opt(t.kappa.as_ref().map(|v| v[i])));
            row.push(t.contaminated[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate text: mean WAIC per model, coverage rates, most-flagged
    /// areas, then the resolved configuration.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol = {:?}", self.config.protocol);
        let _ = writeln!(s, "replicates = {}", self.config.replicates);
        let _ = writeln!(s, "failed_fits = {}", self.failures());
        for w in &self.study.warnings {
            let _ = writeln!(s, "warning = {w:?}");
        }
        let _ = writeln!(s, "\n[waic_mean]");
        for &m in &self.config.models {
            let v: Vec<f64> = self.successes(m).map(|(_, f)| f.waic.waic).collect();
            if !v.is_empty() {
                let _ = writeln!(s, "{m} = {:.2}", v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        let truths = true_values(&self.config);
        let mut cov = String::new();
        for &m in &self.config.models {
            for (param, _) in &truths {
                let (hit, total) = self.coverage(m, param);
                if total > 0 {
                    let _ = writeln!(cov, "{m}.{param} = \"{hit}/{total}\"");
                }
            }
        }
        if !cov.is_empty() {
            let _ = writeln!(s, "\n[coverage]\n{}", cov.trim_end());
        }
        let mut det = String::new();
        for &m in &self.config.models {
            let Some(freq) = self.detection_frequency(m) else { continue };
            let t = &self.study.truth;
            let flagged: Vec<String> = (0..freq.len())
                .filter(|&i| freq[i] > 0.0)
                .map(|i| format!("{}:{:.2}", t.ids[i], freq[i]))
                .collect();
            let _ = writeln!(det, "{m} = \"{}\"", flagged.join(" "));
        }
        if !det.is_empty() {
            let _ = writeln!(s, "\n[detection]\n{}", det.trim_end());
        }
        let _ = writeln!(s, "\n[config]\n{}", self.config.to_toml().trim_end());
        s
    }
}
