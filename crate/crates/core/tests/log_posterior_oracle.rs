//! Log-posterior terms against frozen arbitrary-precision values produced
//! by `tests/oracle/log_posterior_terms.py` (mpmath, 60 digits, dense
//! determinants and an explicit pseudo-inverse).

use std::sync::Arc;

use scalemix::models::LogPosteriorTerms;
use scalemix::{AdjacencyGraph, Model, ModelKind, ModelSpec, ObservedData};

const REL: f64 = 1e-10;

fn data() -> Arc<ObservedData> {
    let g = AdjacencyGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3)]).unwrap();
    let x = [0.31, 0.45, 0.52, 0.68, 0.77].iter().map(|v| vec![*v]).collect();
    Arc::new(
        ObservedData::new(Arc::new(g), vec![3, 0, 7, 2, 5], vec![2.0, 1.5, 4.0, 3.0, 2.5], x)
            .unwrap(),
    )
}

fn state(m: &Model) -> Vec<f64> {
    let l = m.layout();
    let mut x: Vec<f64> = (0..m.dim())
        .map(|k| 0.7 * (1.3 * k as f64 + 0.4).sin())
        .collect();
    for r in [l.u_star.clone(), l.z.clone()] {
        if !r.is_empty() {
            let mean = x[r.clone()].iter().sum::<f64>() / r.len() as f64;
            x[r].iter_mut().for_each(|v| *v -= mean);
        }
    }
    if m.kind() == ModelKind::Congdon {
        for i in l.log_kappa.clone() {
            x[i] *= 0.5;
        }
    }
    x
}

fn close(name: &str, got: f64, want: f64) {
    let tol = REL * want.abs().max(1.0);
    assert!((got - want).abs() <= tol, "{name}: {got} vs {want}");
}

fn compare(kind: ModelKind, want: LogPosteriorTerms) {
    let m = Model::new(ModelSpec::new(kind, 1), data()).unwrap();
    let t = m.terms(&state(&m));
    close("loglik", t.loglik, want.loglik);
    close("beta", t.beta, want.beta);
    close("sigma", t.sigma, want.sigma);
    close("lambda", t.lambda, want.lambda);
    close("latent", t.latent, want.latent);
    close("soft_constraint", t.soft_constraint, want.soft_constraint);
    close("kappa", t.kappa, want.kappa);
    close("nu", t.nu, want.nu);
    close("total", m.log_posterior(&state(&m)), want.total());
}

const BETA: f64 = -6.4458281144643964137;
const SIGMA: f64 = -0.73622531177459927969;
const LAMBDA: f64 = -1.487400771279111838;

#[test]
fn scaling_factor_matches_oracle() {
    close("h", data().h(), 0.36214874992246093412);
}

#[test]
fn bym2_terms() {
    compare(
        ModelKind::Bym2,
        LogPosteriorTerms {
            loglik: -21.076851114103986324,
            beta: BETA,
            sigma: SIGMA,
            lambda: LAMBDA,
            latent: -5.7565791130301069241,
            soft_constraint: 4.3793788333433639357,
            kappa: 0.0,
            nu: 0.0,
        },
    );
}

#[test]
fn leroux_terms() {
    compare(
        ModelKind::Leroux,
        LogPosteriorTerms {
            loglik: -15.571708090906545805,
            beta: BETA,
            sigma: SIGMA,
            lambda: LAMBDA,
            latent: -5.131949031450968508,
            soft_constraint: 0.0,
            kappa: 0.0,
            nu: 0.0,
        },
    );
}

#[test]
fn congdon_terms() {
    compare(
        ModelKind::Congdon,
        LogPosteriorTerms {
            loglik: -15.571708090906545805,
            beta: BETA,
            sigma: SIGMA,
            lambda: LAMBDA,
            latent: -5.235332137880772414,
            soft_constraint: 0.0,
            kappa: -7.7170844450521769233,
            nu: -1.7694852349301760238,
        },
    );
}

#[test]
fn bym2_gamma_terms() {
    compare(
        ModelKind::Bym2Gamma,
        LogPosteriorTerms {
            loglik: -19.14112674373784755,
            beta: BETA,
            sigma: SIGMA,
            lambda: LAMBDA,
            latent: -5.7565791130301069241,
            soft_constraint: 4.3793788333433639357,
            kappa: -7.4747023892914415653,
            nu: -1.6535455725943685799,
        },
    );
}

#[test]
fn bym2_logcar_terms() {
    compare(
        ModelKind::Bym2LogCar,
        LogPosteriorTerms {
            loglik: -23.725615842002409411,
            beta: BETA,
            sigma: SIGMA,
            lambda: LAMBDA,
            latent: -5.7565791130301069241,
            soft_constraint: 8.7587576666867278713,
            kappa: -0.50496743130039789913,
            nu: -2.0767612404441266374,
        },
    );
}
