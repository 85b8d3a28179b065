//! Analytic gradients against central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalemix::{AdjacencyGraph, Model, ModelKind, ModelSpec, ObservedData};

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-5;
const ATOL: f64 = 1e-7;

fn dataset(g: AdjacencyGraph, p: usize, seed: u64) -> Arc<ObservedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.n();
    let y = (0..n).map(|_| rng.random_range(0..12u64)).collect();
    let e = (0..n).map(|_| rng.random_range(1.0..6.0)).collect();
    let x = (0..n).map(|_| (0..p).map(|_| rng.random_range(0.3..0.8)).collect()).collect();
    Arc::new(ObservedData::new(Arc::new(g), y, e, x).unwrap())
}

/// Central differences, compared coordinate-wise. Returns the worst
/// normalized discrepancy.
fn check(model: &Model, x: &[f64]) -> Result<(), String> {
    let mut grad = vec![0.0; x.len()];
    let f0 = model.log_posterior_grad(x, &mut grad);
    if !f0.is_finite() {
        return Err("non-finite log-posterior".into());
    }
    let names = model.layout().unconstrained_names();
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + STEP;
        let fp = model.log_posterior(&xp);
        xp[i] = x[i] - STEP;
        let fm = model.log_posterior(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * STEP);
        let tol = ATOL.max(RTOL * fd.abs().max(grad[i].abs()));
        if (fd - grad[i]).abs() > tol {
            return Err(format!("{}: analytic {} vs fd {}", names[i], grad[i], fd));
        }
    }
    Ok(())
}

/// Uniform(-1, 1) coordinates with the intrinsic-CAR blocks centred, as they
/// are in the typical set under the soft sum-to-zero constraint. Congdon
/// states whose precision is not positive definite are redrawn.
fn random_state(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = model.layout();
    loop {
        let mut x: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in [l.u_star.clone(), l.z.clone()] {
            if r.is_empty() {
                continue;
            }
            let mean = x[r.clone()].iter().sum::<f64>() / r.len() as f64;
            x[r].iter_mut().for_each(|v| *v -= mean);
        }
        if model.log_posterior(&x).is_finite() {
            return x;
        }
    }
}

fn run(g: AdjacencyGraph, label: &str) {
    let data = dataset(g, 1, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in ModelKind::ALL {
        let m = Model::new(ModelSpec::new(kind, 1), Arc::clone(&data)).unwrap();
        for s in 0..20 {
            let x = random_state(&m, &mut rng);
            if let Err(e) = check(&m, &x) {
                panic!("{label} {kind} state {s}: {e}");
            }
        }
    }
}

#[test]
fn toy_graph_gradients_match_finite_differences() {
    let g = AdjacencyGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3)]).unwrap();
    run(g, "toy");
}

#[test]
fn lattice_gradients_match_finite_differences() {
    run(AdjacencyGraph::lattice(10, 10).unwrap(), "lattice");
}
