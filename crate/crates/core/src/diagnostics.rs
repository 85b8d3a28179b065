//! Post-fit analysis: WAIC, posterior summaries, outlier flags, SMRs.

use std::fmt::Write as _;
use std::io::Write;

use crate::convergence::{ess_bulk_chains, split_rhat_chains};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::models::Model;
use crate::sampler::PosteriorDraws;

/// Minimum number of draws for a quantile-based summary.
pub const MIN_SUMMARY_DRAWS: usize = 40;

/// R-hat above which a fit is reported as not converged.
pub const RHAT_WARN: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waic {
    pub waic: f64,
    pub p_waic: f64,
    pub lppd: f64,
}

/// WAIC from an `S x n` pointwise log-likelihood matrix.
///
/// `lppd = sum_i log mean_s exp(l_si)` (log-sum-exp), `p_W = sum_i Var_s(l_si)`
/// with divisor `S - 1`, and `waic = -2 (lppd - p_W)`.
pub fn waic(loglik: &[Vec<f64>]) -> Result<Waic> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::InsufficientDraws { need: 2, got: s });
    }
    let n = loglik[0].len();
    if loglik.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("log-likelihood rows have different lengths"));
    }
    let sf = s as f64;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for i in 0..n {
        let col = loglik.iter().map(|r| r[i]);
        let max = col.clone().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col.clone().map(|v| (v - max).exp()).sum();
        lppd += max + (sum_exp / sf).ln();
        let mean = col.clone().sum::<f64>() / sf;
        p_waic += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (sf - 1.0);
    }
    Ok(Waic {
        waic: -2.0 * (lppd - p_waic),
        p_waic,
        lppd,
    })
}

/// Type-7 quantile (linear interpolation between order statistics) of
/// sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean and central 95% interval.
pub fn posterior_summary(values: &[f64]) -> Result<Summary> {
    if values.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InsufficientDraws {
            need: MIN_SUMMARY_DRAWS,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        lower: quantile_sorted(&sorted, 0.025),
        upper: quantile_sorted(&sorted, 0.975),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierFlag {
    /// Upper bound of the central 95% interval of `kappa_i`.
    pub kappa_upper: f64,
    /// `kappa_upper < 1`.
    pub flagged: bool,
}

/// Flags area `i` when the 97.5% quantile of its `kappa` draws is below 1.
/// `kappa` is `S x n`.
pub fn detect_outliers(kappa: &[Vec<f64>]) -> Result<Vec<OutlierFlag>> {
    let Some(first) = kappa.first() else {
        return Err(Error::InsufficientDraws { need: 1, got: 0 });
    };
    let n = first.len();
    if kappa.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("kappa rows have different lengths"));
    }
    (0..n)
        .map(|i| {
            let mut col: Vec<f64> = kappa.iter().map(|r| r[i]).collect();
            if col.iter().any(|k| !(*k > 0.0)) {
                return Err(Error::invalid(format!("kappa draws of area {} must be positive", i + 1)));
            }
            col.sort_by(f64::total_cmp);
            let upper = quantile_sorted(&col, 0.975);
            Ok(OutlierFlag {
                kappa_upper: upper,
                flagged: upper < 1.0,
            })
        })
        .collect()
}

/// Standardized morbidity ratios `y / E`.
pub fn smr(y: &[u64], offsets: &[f64]) -> Result<Vec<f64>> {
    if y.len() != offsets.len() {
        return Err(Error::Length {
            what: "offsets",
            expected: y.len(),
            got: offsets.len(),
        });
    }
    y.iter()
        .zip(offsets)
        .map(|(&c, &e)| {
            if e > 0.0 {
                Ok(c as f64 / e)
            } else {
                Err(Error::invalid(format!("offset must be positive, got {e}")))
            }
        })
        .collect()
}

/// Expected counts by indirect standardization: `E_i = P_i sum(y) / sum(P)`.
pub fn offsets_from_population(population: &[f64], y: &[u64]) -> Result<Vec<f64>> {
    if population.len() != y.len() {
        return Err(Error::Length {
            what: "population",
            expected: y.len(),
            got: population.len(),
        });
    }
    if population.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::invalid("population sizes must be positive"));
    }
    let total: u64 = y.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no cases observed; offsets are degenerate"));
    }
    let rate = total as f64 / population.iter().sum::<f64>();
    Ok(population.iter().map(|p| p * rate).collect())
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub summary: Summary,
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
}

/// Everything reported about a single fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: String,
    pub params: Vec<ParamRow>,
    pub waic: Waic,
    /// Present only for models with scale-mixture parameters.
    pub outliers: Option<Vec<OutlierFlag>>,
    pub latent_mean: Vec<f64>,
    pub divergences: usize,
    pub area_ids: Vec<String>,
    pub draws_per_chain: usize,
    pub chains: usize,
}

/// Names of the scalar (non per-area) parameters.
pub fn is_hyperparameter(name: &str) -> bool {
    !name.contains('[') || name.starts_with("beta[")
}

impl FitReport {
    pub fn new(model: &Model, draws: &PosteriorDraws) -> Result<Self> {
        Self::from_parts(&model.kind().to_string(), model.data().graph(), draws)
    }

    /// Builds the report from draws alone (names identify the blocks).
    pub fn from_parts(model: &str, graph: &AdjacencyGraph, draws: &PosteriorDraws) -> Result<Self> {
        let n = graph.n();
        let mut params = Vec::with_capacity(draws.names().len());
        for (k, name) in draws.names().iter().enumerate() {
            let chains = draws.chain_values(k);
            let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
            params.push(ParamRow {
                name: name.clone(),
                summary: posterior_summary(&pooled)?,
                rhat: split_rhat_chains(&chains).ok(),
                ess_bulk: ess_bulk_chains(&chains).ok(),
            });
        }
        let waic = waic(&draws.loglik_matrix())?;
        let block = |prefix: &str| -> Option<Vec<usize>> {
            let idx: Vec<usize> = (1..=n)
                .filter_map(|i| draws.index_of(&format!("{prefix}[{i}]")))
                .collect();
            (idx.len() == n).then_some(idx)
        };
        let outliers = match block("kappa") {
            Some(idx) => {
                let s = draws.chains() * draws.kept_per_chain();
                let mut mat = vec![vec![0.0; n]; s];
                for (i, &k) in idx.iter().enumerate() {
                    for (row, v) in mat.iter_mut().zip(draws.pooled(k)) {
                        row[i] = v;
                    }
                }
                Some(detect_outliers(&mat)?)
            }
            None => None,
        };
        let latent_mean = block("b")
            .map(|idx| idx.iter().map(|&k| params[k].summary.mean).collect())
            .unwrap_or_default();
        Ok(Self {
            model: model.to_string(),
            params,
            waic,
            outliers,
            latent_mean,
            divergences: draws.divergences(),
            area_ids: (0..n).map(|i| graph.label(i)).collect(),
            draws_per_chain: draws.kept_per_chain(),
            chains: draws.chains(),
        })
    }

    pub fn param(&self, name: &str) -> Option<&ParamRow> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Largest finite R-hat over all parameters.
    pub fn max_rhat(&self) -> Option<f64> {
        self.params
            .iter()
            .filter_map(|p| p.rhat)
            .filter(|r| r.is_finite())
            .fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.params
            .iter()
            .filter_map(|p| p.ess_bulk)
            .fold(None, |m, r| Some(m.map_or(r, |m: f64| m.min(r))))
    }

    pub fn converged(&self) -> bool {
        self.max_rhat().is_none_or(|r| r <= RHAT_WARN)
    }

    pub fn flagged_ids(&self) -> Vec<&str> {
        match &self.outliers {
            Some(flags) => flags
                .iter()
                .zip(&self.area_ids)
                .filter(|(f, _)| f.flagged)
                .map(|(_, id)| id.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    /// Key-value report with a hyperparameter table. `config` is echoed
    /// verbatim under `[config]`.
    pub fn render_text(&self, config: &str) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "chains = {}", self.chains);
        let _ = writeln!(s, "draws_per_chain = {}", self.draws_per_chain);
        let _ = writeln!(s, "\n[config]\n{}", config.trim_end());
        let _ = writeln!(s, "\n[waic]");
        let _ = writeln!(s, "waic = {}", self.waic.waic);
        let _ = writeln!(s, "p_w = {}", self.waic.p_waic);
        let _ = writeln!(s, "lppd = {}", self.waic.lppd);
        let _ = writeln!(s, "\n[convergence]");
        let _ = writeln!(s, "max_rhat = {}", opt(self.max_rhat()));
        let _ = writeln!(s, "min_ess_bulk = {}", opt(self.min_ess()));
        let _ = writeln!(s, "divergences = {}", self.divergences);
        let _ = writeln!(s, "converged = {}", self.converged());
        let _ = writeln!(s, "\n[parameters]");
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>12} {:>12} {:>8} {:>10}",
            "name", "mean", "q2.5", "q97.5", "rhat", "ess_bulk"
        );
        for p in self.params.iter().filter(|p| is_hyperparameter(&p.name)) {
            let _ = writeln!(
                s,
                "{:<12} {:>12.5} {:>12.5} {:>12.5} {:>8} {:>10}",
                p.name,
                p.summary.mean,
                p.summary.lower,
                p.summary.upper,
                opt(p.rhat),
                p.ess_bulk.map_or("NA".into(), |v| format!("{v:.0}")),
            );
        }
        if self.outliers.is_some() {
            let _ = writeln!(s, "\n[outliers]");
            let _ = writeln!(s, "flagged = {}", self.flagged_ids().join(", "));
        }
        s
    }

    /// `name,mean,q2.5,q97.5,rhat,ess_bulk` for every recorded quantity.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "mean", "q2.5", "q97.5", "rhat", "ess_bulk"])?;
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        for p in &self.params {
            w.write_record([
                p.name.clone(),
                p.summary.mean.to_string(),
                p.summary.lower.to_string(),
                p.summary.upper.to_string(),
                opt(p.rhat),
                opt(p.ess_bulk),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `id,kappa_mean,kappa_upper,outlier`; errors for models without kappa.
    pub fn write_outliers_csv<W: Write>(&self, out: W) -> Result<()> {
        let flags = self
            .outliers
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("model {} has no kappa parameters", self.model)))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "kappa_mean", "kappa_upper", "outlier"])?;
        for (i, f) in flags.iter().enumerate() {
            let mean = self
                .param(&format!("kappa[{}]", i + 1))
                .map_or(f64::NAN, |p| p.summary.mean);
            w.write_record([
                self.area_ids[i].clone(),
                mean.to_string(),
                f.kappa_upper.to_string(),
                f.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `id,b_mean`.
    pub fn write_latent_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "b_mean"])?;
        for (id, m) in self.area_ids.iter().zip(&self.latent_mean) {
            w.write_record([id.clone(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
