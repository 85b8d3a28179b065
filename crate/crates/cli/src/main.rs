//! `scalemix` command-line tool.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 fit written but
//! some R-hat exceeds 1.05, 4 sampler failure.

mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scalemix::diagnostics::{FitReport, RHAT_WARN};
use scalemix::graph::{generalized_inverse_diag, scaling_factor};
use scalemix::io::Dataset;
use scalemix::simgen::{run_study, StudyConfig};
use scalemix::{hmc_run, AdjacencyGraph, Model, ModelKind, ModelSpec, SamplerConfig};

use render::Ramp;

const EXIT_INPUT: u8 = 2;
const EXIT_RHAT: u8 = 3;
const EXIT_SAMPLER: u8 = 4;

#[derive(Parser)]
#[command(name = "scalemix", version, about = "Disease mapping with heavy-tailed spatial latent effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the BYM2 scaling factor of a graph.
    ScalingFactor {
        #[arg(long)]
        graph: PathBuf,
        /// Also write `id,pinv_diag` to this CSV.
        #[arg(long)]
        diag_out: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Fit one model to a dataset.
    Fit(FitArgs),
    /// Run a simulation study described by a TOML config.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "study-out")]
        out_dir: PathBuf,
    },
    /// Draw a choropleth map as SVG.
    Render {
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        polygons: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column to map (default: first column after `id`).
        #[arg(long)]
        value_column: Option<String>,
        /// Boolean column marking areas with a star.
        #[arg(long)]
        flag_column: Option<String>,
        /// Use a diverging ramp centred here (e.g. 1 for SMRs).
        #[arg(long)]
        midpoint: Option<f64>,
        #[arg(long, default_value = "")]
        title: String,
    },
    /// Write the graph file and unit-square polygons of a regular lattice.
    Lattice {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        graph_out: PathBuf,
        #[arg(long)]
        polygons_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    /// bym2, leroux, congdon, bym2-gamma or bym2-logcar.
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    graph: PathBuf,
    /// One label per line, in node order; must match the dataset ids.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = SamplerConfig::default().chains)]
    chains: usize,
    /// Iterations per chain, warmup included.
    #[arg(long, default_value_t = SamplerConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = SamplerConfig::default().warmup)]
    warmup: usize,
    #[arg(long, default_value_t = SamplerConfig::default().thin)]
    thin: usize,
    #[arg(long, default_value_t = SamplerConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SamplerConfig::default().target_accept)]
    target_accept: f64,
    #[arg(long, default_value_t = SamplerConfig::default().max_leapfrog)]
    max_leapfrog: usize,
    #[arg(long, default_value_t = SamplerConfig::default().integration_time)]
    integration_time: f64,
    #[arg(long, default_value = "fit-out")]
    out_dir: PathBuf,
}

/// Everything needed to rerun a fit, echoed into its outputs.
#[derive(Serialize)]
struct FitEcho<'a> {
    graph: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<&'a Path>,
    data: &'a Path,
    model: &'a ModelSpec,
    sampler: &'a SamplerConfig,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure { code: EXIT_INPUT, err: e.into() }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> scalemix::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_graph(path: &Path, labels: Option<&Path>) -> Result<AdjacencyGraph> {
    let mut g = AdjacencyGraph::parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(l) = labels {
        g = g.with_labels(AdjacencyGraph::parse_labels(&read(l)?))?;
    }
    Ok(g)
}

/// `v` with 12 significant digits.
fn sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    let decimals = (11 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}")
}

fn cmd_scaling_factor(graph: &Path, labels: Option<&Path>, diag_out: Option<&Path>) -> Result<(), Failure> {
    let g = load_graph(graph, labels).map_err(input)?;
    let h = scaling_factor(&g).map_err(input)?;
    println!("h = {}", sig12(h));
    if let Some(out) = diag_out {
        let diag = generalized_inverse_diag(&g.laplacian()).map_err(input)?;
        let mut text = String::from("id,pinv_diag\n");
        for (i, d) in diag.iter().enumerate() {
            text.push_str(&format!("{},{}\n", g.label(i), d));
        }
        write_atomic(out, text.as_bytes()).map_err(input)?;
    }
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    let graph = Arc::new(load_graph(&a.graph, a.labels.as_deref()).map_err(input)?);
    let dataset = Dataset::read(fs::File::open(&a.data).with_context(|| format!("opening {}", a.data.display())).map_err(input)?)
        .with_context(|| format!("reading {}", a.data.display()))
        .map_err(input)?;
    let data = Arc::new(dataset.into_observed(graph).map_err(input)?);
    let spec = ModelSpec::new(a.model, data.p());
    let sampler = SamplerConfig {
        chains: a.chains,
        iterations: a.iters,
        warmup: a.warmup,
        thin: a.thin,
        target_accept: a.target_accept,
        max_leapfrog: a.max_leapfrog,
        integration_time: a.integration_time,
        seed: a.seed,
    };
    sampler.validate().map_err(input)?;
    let echo = toml::to_string(&FitEcho {
        graph: &a.graph,
        labels: a.labels.as_deref(),
        data: &a.data,
        model: &spec,
        sampler: &sampler,
    })
    .map_err(input)?;
    let model = Model::new(spec, data).map_err(input)?;
    let draws = hmc_run(&model, &sampler, None).map_err(|e| Failure { code: EXIT_SAMPLER, err: e.into() })?;
    let report = FitReport::new(&model, &draws).map_err(input)?;

    let out = &a.out_dir;
    let io = |e: anyhow::Error| Failure { code: EXIT_INPUT, err: e };
    write_with(&out.join("draws.csv"), |w| draws.write_csv(w)).map_err(io)?;
    write_with(&out.join("summary.csv"), |w| report.write_summary_csv(w)).map_err(io)?;
    write_with(&out.join("latent.csv"), |w| report.write_latent_csv(w)).map_err(io)?;
    if report.outliers.is_some() {
        write_with(&out.join("outliers.csv"), |w| report.write_outliers_csv(w)).map_err(io)?;
    }
    write_atomic(&out.join("config.toml"), echo.as_bytes()).map_err(io)?;
    let text = report.render_text(&echo);
    write_atomic(&out.join("report.txt"), text.as_bytes()).map_err(io)?;
    print!("{text}");
    if !report.converged() {
        return Err(Failure {
            code: EXIT_RHAT,
            err: anyhow::anyhow!(
                "max R-hat {:.3} exceeds {RHAT_WARN}; outputs written to {}",
                report.max_rhat().unwrap_or(f64::NAN),
                out.display()
            ),
        });
    }
    Ok(())
}

fn cmd_study(config: &Path, out: &Path) -> Result<(), Failure> {
    let text = read(config).map_err(input)?;
    let cfg = StudyConfig::from_toml(&text)
        .with_context(|| format!("in {}", config.display()))
        .map_err(input)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let inputs = cfg.load_inputs(base).map_err(input)?;
    let report = run_study(&cfg, &inputs).map_err(input)?;
    for w in &report.study.warnings {
        eprintln!("warning: {w}");
    }
    let io = |e: anyhow::Error| Failure { code: EXIT_INPUT, err: e };
    write_with(&out.join("waic.csv"), |w| report.write_waic_csv(w)).map_err(io)?;
    write_with(&out.join("detection.csv"), |w| report.write_detection_csv(w)).map_err(io)?;
    write_with(&out.join("coverage.csv"), |w| report.write_coverage_csv(w)).map_err(io)?;
    write_with(&out.join("truth.csv"), |w| report.write_truth_csv(w)).map_err(io)?;
    write_atomic(&out.join("graph.txt"), inputs.graph.to_edge_list().as_bytes()).map_err(io)?;
    for r in 0..cfg.replicates {
        let path = out.join("data").join(format!("replicate_{:03}.csv", r + 1));
        write_with(&path, |w| report.study.dataset(r).write(w)).map_err(io)?;
    }
    let summary = report.summary_text();
    write_atomic(&out.join("summary.txt"), summary.as_bytes()).map_err(io)?;
    print!("{summary}");
    let unconverged = report
        .fits
        .iter()
        .filter(|f| f.outcome.as_ref().is_ok_and(|s| s.max_rhat.is_some_and(|r| r > RHAT_WARN)))
        .count();
    if unconverged > 0 {
        return Err(Failure {
            code: EXIT_RHAT,
            err: anyhow::anyhow!("{unconverged} fits have R-hat above {RHAT_WARN}"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ScalingFactor { graph, diag_out, labels } => {
            cmd_scaling_factor(&graph, labels.as_deref(), diag_out.as_deref())
        }
        Command::Fit(a) => cmd_fit(&a),
        Command::Study { config, out_dir } => cmd_study(&config, &out_dir),
        Command::Render {
            values,
            polygons,
            out,
            value_column,
            flag_column,
            midpoint,
            title,
        } => {
            let polys = render::parse_polygons(&read(&polygons).map_err(input)?).map_err(input)?;
            let vals = render::read_values(&read(&values).map_err(input)?, value_column.as_deref(), flag_column.as_deref())
                .map_err(input)?;
            let ramp = midpoint.map_or(Ramp::Linear, |m| Ramp::Diverging { midpoint: m });
            let svg = render::render_svg(&polys, &vals, ramp, &title).map_err(input)?;
            write_atomic(&out, svg.as_bytes()).map_err(input)
        }
        Command::Lattice {
            rows,
            cols,
            graph_out,
            polygons_out,
        } => {
            let g = AdjacencyGraph::lattice(rows, cols).map_err(input)?;
            write_atomic(&graph_out, g.to_edge_list().as_bytes()).map_err(input)?;
            if let Some(p) = polygons_out {
                let json = serde_json::to_string(&render::lattice_polygons(rows, cols)).map_err(input)?;
                write_atomic(&p, json.as_bytes()).map_err(input)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
