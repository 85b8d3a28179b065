//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use scalemix::car::{congdon_precision, leroux_precision};
use scalemix::convergence::{ess_bulk_chains, split_rhat_chains};
use scalemix::graph::scaling_factor;
use scalemix::models::{latent_effects, log_posterior};
use scalemix::simgen::{run_study, simulate, StudyConfig, StudyInputs};
use scalemix::{
    hmc_run, AdjacencyGraph, Model, ModelKind, ModelSpec, ObservedData, ParameterState, SamplerConfig, Target,
};
use statrs::distribution::{ContinuousCDF, Exp, Gamma as GammaDist, Continuous, Normal, StudentsT};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_graph() -> AdjacencyGraph {
    AdjacencyGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3)]).unwrap()
}

fn random_data(g: AdjacencyGraph, seed: u64) -> Arc<ObservedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.n();
    let y = (0..n).map(|_| rng.random_range(0..12u64)).collect();
    let e = (0..n).map(|_| rng.random_range(1.0..6.0)).collect();
    let x = (0..n).map(|_| vec![rng.random_range(0.3..0.8)]).collect();
    Arc::new(ObservedData::new(Arc::new(g), y, e, x).unwrap())
}

// 1 -----------------------------------------------------------------------

fn fd_check(m: &Model, x: &[f64]) -> Result<(), String> {
    const STEP: f64 = 1e-5;
    let mut grad = vec![0.0; x.len()];
    m.log_posterior_grad(x, &mut grad);
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + STEP;
        let fp = m.log_posterior(&xp);
        xp[i] = x[i] - STEP;
        let fm = m.log_posterior(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * STEP);
        let tol = 1e-7_f64.max(1e-5 * fd.abs().max(grad[i].abs()));
        if (fd - grad[i]).abs() > tol {
            return Err(format!("{} coordinate {i}: analytic {} vs fd {fd}", m.kind(), grad[i]));
        }
    }
    Ok(())
}

fn centred_state(m: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = m.layout();
    loop {
        let mut x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in [l.u_star.clone(), l.z.clone()] {
            if !r.is_empty() {
                let mean = x[r.clone()].iter().sum::<f64>() / r.len() as f64;
                x[r].iter_mut().for_each(|v| *v -= mean);
            }
        }
        if m.log_posterior(&x).is_finite() {
            return x;
        }
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut checked = 0;
    for (label, g) in [("toy", toy_graph()), ("lattice", AdjacencyGraph::lattice(10, 10).unwrap())] {
        let data = random_data(g, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for kind in ModelKind::ALL {
            let m = Model::new(ModelSpec::new(kind, 1), Arc::clone(&data)).unwrap();
            for _ in 0..20 {
                let x = centred_state(&m, &mut rng);
                fd_check(&m, &x).map_err(|e| format!("{label}: {e}"))?;
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("{checked} states agree, {secs:.1} s"))
}

// 2 -----------------------------------------------------------------------

fn random_connected(rng: &mut ChaCha8Rng) -> AdjacencyGraph {
    let n = rng.random_range(2..=30);
    let mut edges = BTreeSet::new();
    for k in 1..n {
        edges.insert((rng.random_range(0..k), k));
    }
    for _ in 0..rng.random_range(0..2 * n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    AdjacencyGraph::new(n, edges).unwrap()
}

/// Geometric mean of the pseudo-inverse diagonal, by SVD of the dense
/// Laplacian.
fn svd_scaling_factor(g: &AdjacencyGraph) -> f64 {
    let n = g.n();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for &(i, j) in g.edges() {
        q[(i, j)] -= 1.0;
        q[(j, i)] -= 1.0;
        q[(i, i)] += 1.0;
        q[(j, j)] += 1.0;
    }
    let pinv = q.pseudo_inverse(1e-9).unwrap();
    ((0..n).map(|i| pinv[(i, i)].ln()).sum::<f64>() / n as f64).exp()
}

fn scaling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..25 {
        let g = random_connected(&mut rng);
        let h = scaling_factor(&g).map_err(|e| e.to_string())?;
        let want = svd_scaling_factor(&g);
        worst = worst.max((h - want).abs() / want);
    }
    let two = scaling_factor(&AdjacencyGraph::new(2, [(0, 1)]).unwrap()).unwrap();
    let three = scaling_factor(&AdjacencyGraph::new(3, [(0, 1), (1, 2)]).unwrap()).unwrap();
    let exact3 = (50.0_f64 / 729.0).cbrt();
    let err2 = (two - 0.25).abs();
    let err3 = (three - exact3).abs();
    ensure(
        worst < 1e-8 && err2 < 1e-12 && err3 < 1e-12,
        format!("random max rel err {worst:.1e}, 2-node err {err2:.1e}, 3-node err {err3:.1e}"),
    )
}

// 3 -----------------------------------------------------------------------

fn base_state(kind: ModelKind, n: usize, rng: &mut ChaCha8Rng) -> ParameterState {
    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = u.iter().sum::<f64>() / n as f64;
    u.iter_mut().for_each(|v| *v -= mean);
    ParameterState {
        kind,
        beta0: -0.2,
        beta: vec![0.4],
        sigma: 0.7,
        lambda: 0.6,
        theta: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        u_star: u,
        b: Vec::new(),
        kappa: Vec::new(),
        z: Vec::new(),
        nu: None,
    }
}

fn reductions() -> Outcome {
    let mut worst = 0.0_f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in [toy_graph(), AdjacencyGraph::lattice(4, 5).unwrap()] {
        let n = g.n();
        let data = random_data(g.clone(), 31);
        for nu in [0.5, 4.0, 17.0] {
            let bym2 = base_state(ModelKind::Bym2, n, &mut rng);
            let gamma = ParameterState {
                kind: ModelKind::Bym2Gamma,
                kappa: vec![1.0; n],
                nu: Some(nu),
                ..bym2.clone()
            };
            let spec = ModelSpec::new(ModelKind::Bym2Gamma, 1);
            let diff = log_posterior(&gamma, &spec, &data).unwrap()
                - log_posterior(&bym2, &ModelSpec::new(ModelKind::Bym2, 1), &data).unwrap();
            // kappa ~ Gamma(nu/2, rate nu/2) at 1 (log-Jacobian 0), nu ~ Exp
            // with log-Jacobian log nu.
            let k = GammaDist::new(nu / 2.0, nu / 2.0).unwrap().ln_pdf(1.0) * n as f64;
            let v = Exp::new(1.0 / spec.mu_nu).unwrap().ln_pdf(nu) + nu.ln();
            worst = worst.max((diff - (k + v)).abs());

            // log-CAR with z = sqrt(nu)/2 everywhere gives kappa = 1.
            let z = vec![nu.sqrt() / 2.0; n];
            let logcar = ParameterState {
                kind: ModelKind::Bym2LogCar,
                z,
                kappa: vec![1.0; n],
                nu: Some(nu),
                ..bym2.clone()
            };
            let ml = Model::new(ModelSpec::new(ModelKind::Bym2LogCar, 1), Arc::clone(&data)).unwrap();
            let mb = Model::new(ModelSpec::new(ModelKind::Bym2, 1), Arc::clone(&data)).unwrap();
            let ll = ml.terms(&ml.to_unconstrained(&logcar).unwrap()).loglik;
            let lb = mb.terms(&mb.to_unconstrained(&bym2).unwrap()).loglik;
            worst = worst.max((ll - lb).abs() / lb.abs().max(1.0));
        }
        for lambda in [0.0, 0.3, 0.9, 1.0] {
            if congdon_precision(&g, lambda, &vec![1.0; n]) != leroux_precision(&g, lambda) {
                return Err(format!("Q_C(kappa = 1) differs from Leroux at lambda {lambda}"));
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let leroux = ParameterState {
            kind: ModelKind::Leroux,
            theta: Vec::new(),
            u_star: Vec::new(),
            b,
            ..base_state(ModelKind::Leroux, n, &mut rng)
        };
        let congdon = ParameterState {
            kind: ModelKind::Congdon,
            kappa: vec![1.0; n],
            nu: Some(4.0),
            ..leroux.clone()
        };
        let mc = Model::new(ModelSpec::new(ModelKind::Congdon, 1), Arc::clone(&data)).unwrap();
        let mr = Model::new(ModelSpec::new(ModelKind::Leroux, 1), Arc::clone(&data)).unwrap();
        let lc = mc.terms(&mc.to_unconstrained(&congdon).unwrap()).latent;
        let lr = mr.terms(&mr.to_unconstrained(&leroux).unwrap()).latent;
        worst = worst.max((lc - lr).abs() / lr.abs().max(1.0));
    }
    ensure(
        worst < 1e-10,
        format!("prior-term and latent-density identities hold to {worst:.1e}; Q_C(kappa = 1) equals Leroux exactly"),
    )
}

// 4 -----------------------------------------------------------------------

fn heavy_tail() -> Outcome {
    const N: usize = 100_000;
    const BLOCK: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gamma = Gamma::new(2.0, 0.5).unwrap();
    let mut b = Vec::with_capacity(N);
    for _ in 0..N / BLOCK {
        let state = ParameterState {
            kind: ModelKind::Bym2Gamma,
            beta0: 0.0,
            beta: Vec::new(),
            sigma: 1.0,
            lambda: 0.0,
            theta: (0..BLOCK).map(|_| rng.sample(StandardNormal)).collect(),
            u_star: vec![0.0; BLOCK],
            b: Vec::new(),
            kappa: (0..BLOCK).map(|_| gamma.sample(&mut rng)).collect(),
            z: Vec::new(),
            nu: Some(4.0),
        };
        b.extend(latent_effects(&state));
    }
    b.sort_by(f64::total_cmp);
    let t4 = StudentsT::new(0.0, 1.0, 4.0).unwrap();
    let d = ks_statistic(&b, |x| t4.cdf(x));
    let crit = 1.628 / (N as f64).sqrt();
    ensure(d < crit, format!("KS D = {d:.5} vs 1% critical {crit:.5}"))
}

fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

// 5 -----------------------------------------------------------------------

/// Every node of a torus has the same pseudo-inverse diagonal, so each
/// standardized log-CAR innovation has unit variance exactly.
fn torus(rows: usize, cols: usize) -> AdjacencyGraph {
    let id = |r: usize, c: usize| (r % rows) * cols + c % cols;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            edges.push((id(r, c), id(r, c + 1)));
            edges.push((id(r, c), id(r + 1, c)));
        }
    }
    AdjacencyGraph::new(rows * cols, edges).unwrap()
}

fn logcar_moments() -> Outcome {
    let inputs = StudyInputs::new(torus(10, 10), None).unwrap();
    let mut kappa = Vec::new();
    for seed in 0..1000 {
        let cfg = StudyConfig::from_toml(&format!(
            "protocol = \"FROM_BYM2_LOGCAR\"\nreplicates = 1\nseed = {seed}\nmodels = [\"bym2-logcar\"]\n[graph]\nlattice = [10, 10]\n"
        ))
        .unwrap();
        let study = simulate(&cfg, &inputs).map_err(|e| e.to_string())?;
        kappa.extend(study.truth.kappa.unwrap());
    }
    let n = kappa.len() as f64;
    let mean = kappa.iter().sum::<f64>() / n;
    let var = kappa.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 0.3_f64.exp_m1();
    let rel_mean = (mean - 1.0).abs();
    let rel_var = (var - want).abs() / want;
    ensure(
        rel_mean < 0.02 && rel_var < 0.10,
        format!("{n} draws: mean {mean:.4}, var {var:.4} (target {want:.4}, rel err {rel_var:.3})"),
    )
}

// 6 -----------------------------------------------------------------------

fn prior_intervals() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (kind, want) in [(ModelKind::Bym2Gamma, (0.1013, 14.756)), (ModelKind::Bym2LogCar, (0.0076, 1.107))] {
        let (lo, hi) = ModelSpec::new(kind, 0).nu_prior_interval(0.95).map_err(|e| e.to_string())?;
        ok &= (lo - want.0).abs() < 1e-3 && (hi - want.1).abs() < 1e-3;
        lines.push(format!("{kind} [{lo:.4}, {hi:.3}]"));
    }
    ensure(ok, lines.join(", "))
}

// 7-9 ---------------------------------------------------------------------

const DESK_SAMPLER: &str = "[sampler]\nchains = 2\niterations = 4000\nwarmup = 2000\nthin = 2\n";

fn desk_study(body: &str) -> Result<scalemix::simgen::StudyReport, String> {
    let text = format!("replicates = 10\n{body}\n[graph]\nlattice = [10, 10]\n{DESK_SAMPLER}");
    let cfg = StudyConfig::from_toml(&text).map_err(|e| e.to_string())?;
    let inputs = cfg.load_inputs(std::path::Path::new(".")).map_err(|e| e.to_string())?;
    run_study(&cfg, &inputs).map_err(|e| e.to_string())
}

fn recovery() -> Outcome {
    let t0 = Instant::now();
    let r = desk_study("protocol = \"FROM_BYM2_GAMMA\"\nmodels = [\"bym2-gamma\"]")?;
    let (b0, nb0) = r.coverage(ModelKind::Bym2Gamma, "beta0");
    let (nu, nnu) = r.coverage(ModelKind::Bym2Gamma, "nu");
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    ensure(
        r.failures() == 0 && nb0 == 10 && b0 >= 8 && nu >= 7 && mins < 30.0,
        format!("beta0 covered {b0}/{nb0}, nu covered {nu}/{nnu}, {} failed fits, {mins:.1} min", r.failures()),
    )
}

fn contamination() -> Outcome {
    let nodes = [12, 17, 45, 72, 77];
    let r = desk_study(&format!(
        "protocol = \"CONTAMINATED_PCAR\"\nmodels = [\"bym2\", \"bym2-gamma\"]\n[contamination]\nnodes = {nodes:?}"
    ))?;
    let freq = r.detection_frequency(ModelKind::Bym2Gamma).ok_or("no successful BYM2-Gamma fits")?;
    let per_node: Vec<String> = nodes.iter().map(|&i| format!("{i}:{:.1}", freq[i - 1])).collect();
    let detected = nodes.iter().all(|&i| freq[i - 1] >= 0.8);
    let clean: Vec<f64> = (1..=freq.len()).filter(|i| !nodes.contains(i)).map(|i| freq[i - 1]).collect();
    let fp = clean.iter().sum::<f64>() / clean.len() as f64;
    let wins = (0..10)
        .filter(|&k| match (r.waic(k, ModelKind::Bym2Gamma), r.waic(k, ModelKind::Bym2)) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        })
        .count();
    ensure(
        r.failures() == 0 && detected && fp <= 0.02 && wins >= 9,
        format!(
            "detection {}, false-positive rate {:.3}, WAIC(bym2-gamma) < WAIC(bym2) in {wins}/10, {} failed fits",
            per_node.join(" "),
            fp,
            r.failures()
        ),
    )
}

fn specificity() -> Outcome {
    let r = desk_study("protocol = \"NO_OUTLIERS\"\nmodels = [\"bym2-gamma\"]")?;
    let freq = r.detection_frequency(ModelKind::Bym2Gamma).ok_or("no successful BYM2-Gamma fits")?;
    let rate = freq.iter().sum::<f64>() / freq.len() as f64;
    ensure(
        r.failures() == 0 && rate <= 0.01,
        format!("flagged share of node-replicates {rate:.4}, {} failed fits", r.failures()),
    )
}

// 10 ----------------------------------------------------------------------

/// Zero-mean normal with the given precision matrix.
struct Gaussian {
    precision: Vec<Vec<f64>>,
}

impl Target for Gaussian {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (i, row) in self.precision.iter().enumerate() {
            grad[i] = -row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            lp += 0.5 * x[i] * grad[i];
        }
        lp
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn calibration() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let cfg = SamplerConfig {
        chains: 2,
        iterations: 4000,
        warmup: 2000,
        thin: 1,
        seed: 10,
        ..SamplerConfig::default()
    };

    let draws = hmc_run(&Gaussian { precision: vec![vec![1.0, 0.0], vec![0.0, 1.0]] }, &cfg, None)
        .map_err(|e| e.to_string())?;
    for k in 0..2 {
        let (m, s) = mean_sd(&draws.pooled(k));
        let rhat = split_rhat_chains(&draws.chain_values(k)).map_err(|e| e.to_string())?;
        ok &= m.abs() < 0.05 && (s - 1.0).abs() < 0.05 && rhat < 1.01;
        notes.push(format!("x{} mean {m:.3} sd {s:.3} rhat {rhat:.4}", k + 1));
    }
    let accept: Vec<f64> = draws.stats.iter().map(|s| s.mean_accept).collect();

    let rho: f64 = 0.9;
    let det = 1.0 - rho * rho;
    let target = Gaussian { precision: vec![vec![1.0 / det, -rho / det], vec![-rho / det, 1.0 / det]] };
    let draws = hmc_run(&target, &cfg, None).map_err(|e| e.to_string())?;
    let (a, b) = (draws.pooled(0), draws.pooled(1));
    let ((ma, sa), (mb, sb)) = (mean_sd(&a), mean_sd(&b));
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    let corr = cov / (sa * sb);
    ok &= (corr - rho).abs() < 0.05;
    notes.push(format!("corr {corr:.3}"));
    let accept: Vec<f64> = accept.into_iter().chain(draws.stats.iter().map(|s| s.mean_accept)).collect();
    ok &= accept.iter().all(|a| (0.6..=0.95).contains(a));
    notes.push(format!(
        "accept {}",
        accept.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/")
    ));

    // Diagnostics on synthetic chains.
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut iid = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
    let same = vec![iid(1000), iid(1000)];
    let rhat_same = split_rhat_chains(&same).unwrap();
    let ess_iid = ess_bulk_chains(&same).unwrap();
    let shifted = vec![iid(1000), iid(1000).into_iter().map(|v| v + 10.0).collect()];
    let rhat_shift = split_rhat_chains(&shifted).unwrap();
    let constant_nan = split_rhat_chains(&[vec![1.0; 100], vec![1.0; 100]]).is_err()
        && ess_bulk_chains(&[vec![1.0; 100], vec![1.0; 100]]).is_err();
    let phi = 0.9;
    let ar: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let mut v = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi as f64).sqrt();
            (0..5000)
                .map(|_| {
                    v = phi * v + rng.sample::<f64, _>(StandardNormal);
                    v
                })
                .collect()
        })
        .collect();
    let ess_ar = ess_bulk_chains(&ar).unwrap();
    let want_ar = 10_000.0 * (1.0 - phi) / (1.0 + phi);
    ok &= rhat_same < 1.01
        && (1600.0..=2400.0).contains(&ess_iid)
        && rhat_shift > 2.0
        && constant_nan
        && ess_ar > want_ar / 1.5
        && ess_ar < want_ar * 1.5;
    notes.push(format!(
        "iid rhat {rhat_same:.4} ess {ess_iid:.0}, offset rhat {rhat_shift:.2}, AR(1) ess {ess_ar:.0} vs {want_ar:.0}, constant chains rejected {constant_nan}"
    ));

    // Detailed balance smoke test.
    let one = Gaussian { precision: vec![vec![1.0]] };
    let cfg1 = SamplerConfig { iterations: 7000, warmup: 2000, seed: 11, ..cfg };
    let mut x = hmc_run(&one, &cfg1, None).map_err(|e| e.to_string())?.pooled(0);
    x.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d = ks_statistic(&x, |v| normal.cdf(v));
    let crit = 1.628 / (x.len() as f64).sqrt();
    ok &= d < crit;
    notes.push(format!("1-d KS D {d:.4} < {crit:.4}"));
    ensure(ok, notes.join("; "))
}

// 11 ----------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let g = AdjacencyGraph::lattice(4, 4).unwrap();
    let graph = dir.path().join("graph.txt");
    fs::write(&graph, g.to_edge_list()).unwrap();
    let mut csv = String::from("id,y,E\n");
    for i in 0..16 {
        csv.push_str(&format!("{},{},{}\n", i + 1, (i * 7) % 11, 4.0 + (i % 3) as f64));
    }
    let data = dir.path().join("data.csv");
    fs::write(&data, csv).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_scalemix"))
            .args(["fit", "--model", "bym2-gamma", "--graph"])
            .arg(&graph)
            .arg("--data")
            .arg(&data)
            .args(["--iters", "600", "--warmup", "300", "--thin", "1", "--seed", "77", "--out-dir"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        // Exit code 3 (R-hat warning) still writes every file.
        if !matches!(status.status.code(), Some(0 | 3)) {
            return Err(format!("fit failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push(fs::read(out.join("draws.csv")).map_err(|e| e.to_string())?);
    }
    ensure(
        outputs[0] == outputs[1],
        format!("draws.csv {} bytes, identical: {}", outputs[0].len(), outputs[0] == outputs[1]),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradients),
        ("scaling-factor oracle", scaling_oracle),
        ("reduction identities", reductions),
        ("heavy-tail marginalization", heavy_tail),
        ("log-CAR mixing moments", logcar_moments),
        ("prior intervals", prior_intervals),
        ("parameter recovery", recovery),
        ("contamination detection", contamination),
        ("no-outlier specificity", specificity),
        ("sampler calibration", calibration),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
