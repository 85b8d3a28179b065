//! One model fit end to end: sampler run plus report.

use std::sync::Arc;

use crate::diagnostics::FitReport;
use crate::error::Result;
use crate::models::{Model, ModelSpec, ObservedData};
use crate::sampler::{hmc_run, PosteriorDraws, SamplerConfig};

#[derive(Debug)]
pub struct Fit {
    pub model: Model,
    pub draws: PosteriorDraws,
    pub report: FitReport,
}

pub fn fit(spec: ModelSpec, data: Arc<ObservedData>, config: &SamplerConfig) -> Result<Fit> {
    spec.validate()?;
    config.validate()?;
    let model = Model::new(spec, data)?;
    let draws = hmc_run(&model, config, None)?;
    let report = FitReport::new(&model, &draws)?;
    Ok(Fit { model, draws, report })
}
