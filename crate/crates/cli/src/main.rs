use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partquad::models;
use partquad::pipeline::{
    amtc_report, analyze, run_convergence, run_mc, run_uq, PipelineError, Reference, RiskConfig,
    RunConfig, UqModel,
};
use partquad::quadrature::{compose_partial, smolyak_grid, DEFAULT_SEED};
use partquad::structure::{SelectionMode, DEFAULT_THRESHOLD};
use partquad::{Distribution, Partition};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "partquad",
    version,
    about = "Polynomial chaos on computational graphs with partially tensor-structured quadrature"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dependency matrix, sparsity ratios and the selected tensor structure.
    Analyze(ModelArgs),
    /// Build a quadrature rule and write it as JSON (plus an optional CSV node cloud).
    Quadrature(QuadArgs),
    /// Full run: structure selection, quadrature, transformed evaluation, projection.
    Uq(UqArgs),
    /// Error of the mean against a reference over a sweep of levels, as CSV.
    Convergence(ConvArgs),
    /// Monte Carlo mean and variance using plain graph evaluation.
    Mc(McArgs),
    /// Per-operation evaluation counts for the selected structure.
    AmtcReport(ModelArgs),
    /// Write a builtin model's graph and distribution files.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Heuristic,
    Exhaustive,
    User,
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Builtin model name (toy2d, two_solver_3d, uav4d, airtaxi6d).
    #[arg(long, conflicts_with_all = ["graph", "dists"])]
    model: Option<String>,
    /// Graph JSON file; requires --dists.
    #[arg(long, requires = "dists")]
    graph: Option<PathBuf>,
    /// Distribution JSON file: a list in input order or an object keyed by input name.
    #[arg(long)]
    dists: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Level of accuracy k.
    #[arg(long, short = 'k', default_value_t = 3)]
    level: usize,
    #[arg(long, value_enum, default_value = "heuristic")]
    mode: Mode,
    /// Partition for --mode user, e.g. "3,4|1|2" (1-based indices or input names).
    #[arg(long)]
    partition: Option<String>,
    /// Sparsity threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Put all sparse inputs in one factor.
    #[arg(long)]
    sparse_block: bool,
    #[arg(long, default_value_t = partquad::quadrature::DEFAULT_ETA)]
    eta: f64,
    /// Work units charged per element written by an expansion joint.
    #[arg(long, default_value_t = 0)]
    einsum_cost: u64,
    /// Base seed for designed quadrature.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UqArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Truncation order p (default k-1).
    #[arg(long)]
    order: Option<usize>,
    /// Failure threshold for P(f > t) and CVaR on the surrogate.
    #[arg(long)]
    risk_threshold: Option<f64>,
    #[arg(long, default_value_t = 0.95, requires = "risk_threshold")]
    cvar_level: f64,
    #[arg(long, default_value_t = 100_000, requires = "risk_threshold")]
    risk_samples: usize,
    /// Also write the chaos expansion (basis and coefficients) as JSON.
    #[arg(long)]
    pce_out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Levels to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    levels: Vec<usize>,
    /// Full-grid reference level (default max k + 2).
    #[arg(long, conflicts_with = "mc_samples")]
    reference_level: Option<usize>,
    /// Use a Monte Carlo reference with this many samples.
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleKind {
    Partial,
    Smolyak,
}

#[derive(Args)]
struct QuadArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Tensor structure, e.g. "1,2|3". Defaults to a single block.
    #[arg(long)]
    structure: Option<String>,
    #[arg(long, short = 'k', default_value_t = 3)]
    level: usize,
    #[arg(long, value_enum, default_value = "partial")]
    kind: RuleKind,
    #[arg(long, default_value_t = partquad::quadrature::DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Rule JSON destination (stdout when absent).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Physical nodes and weights as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: String,
    /// Directory for <model>.graph.json and <model>.dists.json.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn load_model(src: &SourceArgs) -> Result<UqModel, PipelineError> {
    match (&src.model, &src.graph, &src.dists) {
        (Some(name), None, None) => models::builtin(name).map(UqModel::from).ok_or_else(|| {
            config_err(format!(
                "unknown model `{name}`; builtins are {}",
                models::BUILTIN_NAMES.join(", ")
            ))
        }),
        (None, Some(g), Some(d)) => {
            let name = g
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".into());
            UqModel::from_documents(&name, &read(g)?, &read(d)?)
        }
        _ => Err(config_err(
            "give exactly one model source: --model, or --graph with --dists",
        )),
    }
}

/// Distributions only, for commands that do not need a graph.
fn load_distributions(src: &SourceArgs) -> Result<(Vec<String>, Vec<Distribution>), PipelineError> {
    if src.model.is_some() || src.graph.is_some() {
        let m = load_model(src)?;
        return Ok((m.names().to_vec(), m.distributions));
    }
    let path = src
        .dists
        .as_ref()
        .ok_or_else(|| config_err("give --model, --graph with --dists, or --dists"))?;
    let doc: partquad::pipeline::DistributionsDoc = serde_json::from_str(&read(path)?)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let pairs: Vec<(String, Distribution)> = match doc {
        partquad::pipeline::DistributionsDoc::List(v) => v
            .into_iter()
            .enumerate()
            .map(|(i, d)| (format!("u{}", i + 1), d))
            .collect(),
        partquad::pipeline::DistributionsDoc::Named(m) => m.into_iter().collect(),
    };
    Ok(pairs.into_iter().unzip())
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

/// Accepts 1-based indices or input names: "1,2|3" or "h,v|W_p|sigma".
fn parse_structure(spec: &str, names: &[String]) -> Result<Partition, PipelineError> {
    let blocks =
        spec.split('|')
            .map(|b| {
                b.split(',')
                    .map(|t| {
                        let t = t.trim();
                        if let Ok(i) = t.parse::<usize>() {
                            if i == 0 {
                                return Err(config_err("structure indices are 1-based"));
                            }
                            Ok(i - 1)
                        } else {
                            names.iter().position(|n| n == t).ok_or_else(|| {
                                config_err(format!("unknown input `{t}` in structure"))
                            })
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
    Partition::new(blocks, names.len()).map_err(|e| config_err(format!("structure `{spec}`: {e}")))
}

fn run_config(a: &ModelArgs, model: &UqModel) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::new(a.level);
    cfg.mode = match (a.mode, &a.partition) {
        (Mode::Heuristic, None) => SelectionMode::Heuristic,
        (Mode::Exhaustive, None) => SelectionMode::Exhaustive,
        (Mode::User, Some(s)) => SelectionMode::User(parse_structure(s, model.names())?),
        (Mode::User, None) => return Err(config_err("--mode user needs --partition")),
        (_, Some(_)) => return Err(config_err("--partition is only used with --mode user")),
    };
    cfg.select.threshold = a.threshold;
    cfg.select.eta = a.eta;
    cfg.select.sparse_block = a.sparse_block;
    cfg.design.eta = a.eta;
    cfg.design.seed = a.seed;
    cfg.einsum_cost = a.einsum_cost;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Analyze(a) => {
            let model = load_model(&a.source)?;
            let cfg = run_config(&a, &model)?;
            write_out(a.out.as_deref(), &to_json(&analyze(&model, &cfg)?))
        }
        Command::AmtcReport(a) => {
            let model = load_model(&a.source)?;
            let cfg = run_config(&a, &model)?;
            write_out(a.out.as_deref(), &to_json(&amtc_report(&model, &cfg)?))
        }
        Command::Uq(a) => {
            let model = load_model(&a.common.source)?;
            let mut cfg = run_config(&a.common, &model)?;
            cfg.order = a.order;
            cfg.risk = a.risk_threshold.map(|t| RiskConfig {
                threshold: t,
                cvar_level: a.cvar_level,
                samples: a.risk_samples,
                seed: a.common.seed,
            });
            let run = run_uq(&model, &cfg)?;
            if let Some(p) = &a.pce_out {
                let doc = run.pce.to_document(Some(run.report.rule_sha256.clone()));
                write_out(Some(p), &to_json(&doc))?;
            }
            write_out(a.common.out.as_deref(), &to_json(&run.report))
        }
        Command::Convergence(a) => {
            let model = load_model(&a.common.source)?;
            let cfg = run_config(&a.common, &model)?;
            let max_k = a.levels.iter().copied().max().unwrap_or(1);
            let reference = match a.mc_samples {
                Some(samples) => Reference::MonteCarlo {
                    samples,
                    seed: a.common.seed,
                },
                None => Reference::FullGrid(a.reference_level.unwrap_or(max_k + 2)),
            };
            let table = run_convergence(&model, &cfg, &a.levels, reference)?;
            log::info!(
                "reference mean {:e}, partial structure {}",
                table.reference,
                table.partition
            );
            write_out(a.common.out.as_deref(), table.to_csv().trim_end())
        }
        Command::Mc(a) => {
            let model = load_model(&a.source)?;
            write_out(
                a.out.as_deref(),
                &to_json(&run_mc(&model, a.samples, a.seed)?),
            )
        }
        Command::Quadrature(a) => {
            let (names, dists) = load_distributions(&a.source)?;
            if a.level == 0 {
                return Err(config_err("level k must be at least 1"));
            }
            let rule = match a.kind {
                RuleKind::Smolyak => {
                    if a.structure.is_some() {
                        return Err(config_err("--structure does not apply to Smolyak rules"));
                    }
                    smolyak_grid(&dists, a.level)?
                }
                RuleKind::Partial => {
                    let structure = match &a.structure {
                        Some(s) => parse_structure(s, &names)?,
                        None => Partition::single_block(names.len()),
                    };
                    let opts = partquad::DesignOptions {
                        seed: a.seed,
                        eta: a.eta,
                        ..Default::default()
                    };
                    compose_partial(&structure, &dists, a.level, &opts)?
                }
            };
            if let Some(p) = &a.csv {
                write_out(Some(p), &rule.nodes_csv(&names))?;
            }
            write_out(a.out.as_deref(), &rule.to_json())
        }
        Command::Export(a) => {
            let m = models::builtin(&a.model)
                .map(UqModel::from)
                .ok_or_else(|| config_err(format!("unknown model `{}`", a.model)))?;
            let g = a.dir.join(format!("{}.graph.json", m.name));
            let d = a.dir.join(format!("{}.dists.json", m.name));
            write_out(Some(&g), &m.graph.to_json())?;
            write_out(Some(&d), &m.distributions_json())?;
            eprintln!("wrote {} and {}", g.display(), d.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
