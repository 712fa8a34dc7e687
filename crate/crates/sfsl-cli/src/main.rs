//! Command line front end: run experiments from config files or presets,
//! sweep the set-union cost, print the privacy table for probability
//! parameter choices, and evaluate the analytic cost model.
//!
//! Log level comes from the `SFSL_LOG` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfsl::federation::engine::DropStage;
use sfsl::harness::config::{load_preset, ExperimentSpec};
use sfsl::harness::cost::{predict_cost, CostModelInput, CostScheme, Role};
use sfsl::harness::experiment::run_experiment;
use sfsl::harness::transport::TransportMode;
use sfsl::perturb::{epsilon_infinity, epsilon_one, event_probs, ProbabilityParams};

#[derive(Parser)]
#[command(name = "sfsl", version, about = "Secure federated submodel learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a named preset.
    Run(RunArgs),
    /// Sweep set-union cost over a range of roster sizes.
    PsuBench(PsuBenchArgs),
    /// Print derived probabilities and privacy levels for a list of
    /// probability parameter choices.
    PrivacyTable(PrivacyTableArgs),
    /// Evaluate the closed-form complexity model.
    CostModel(CostModelArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a TOML config, or `preset:<name>` for a built-in one
    /// (smoke, psu-bench, sfsl-vs-sfl).
    #[arg(long)]
    config: String,
    /// Override the dropout ratio.
    #[arg(long)]
    dropout: Option<f64>,
    /// Override the dropout stage.
    #[arg(long, value_enum)]
    dropout_stage: Option<DropStageArg>,
    /// Override the transport.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics and summary.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DropStageArg {
    PsuShares,
    UpdateShares,
}

#[derive(Args)]
struct PsuBenchArgs {
    /// Roster size range as start:end:step.
    #[arg(long, default_value = "20:100:20")]
    n_range: String,
    /// Expected per-client set size.
    #[arg(long, default_value_t = 100)]
    set_size: u32,
    /// Full index domain size.
    #[arg(long, default_value_t = 140_000)]
    domain: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PrivacyTableArgs {
    /// File with one choice per line: `name p1 p2 p3 p4`.
    #[arg(long)]
    cpp_file: PathBuf,
    /// Average number of live clients without the index.
    #[arg(long)]
    nj0: f64,
    /// Average number of live clients holding the index.
    #[arg(long)]
    nj1: f64,
    /// Optional per-index count histogram: lines `nj1 nj0 weight`;
    /// reports weighted-average event probabilities instead of the
    /// closed form at (--nj1, --nj0).
    #[arg(long)]
    counts_file: Option<PathBuf>,
}

#[derive(Args)]
struct CostModelArgs {
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "client")]
    role: RoleArg,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    m: f64,
    #[arg(long)]
    d: f64,
    #[arg(long, default_value_t = 1.0)]
    p5: f64,
    #[arg(long, default_value_t = 1.0)]
    p6: f64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Sfsl,
    Sfl,
    Psu,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RoleArg {
    Client,
    Server,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SFSL_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::PsuBench(args) => cmd_psu_bench(args),
        Command::PrivacyTable(args) => cmd_privacy_table(args),
        Command::CostModel(args) => cmd_cost_model(args),
    }
}

fn load_spec(config: &str) -> Result<ExperimentSpec, Box<dyn std::error::Error>> {
    if let Some(name) = config.strip_prefix("preset:") {
        Ok(load_preset(name)?)
    } else {
        Ok(ExperimentSpec::from_path(std::path::Path::new(config))?)
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = load_spec(&args.config)?;
    if let Some(d) = args.dropout {
        spec.round.dropout_ratio = d;
    }
    if let Some(s) = args.dropout_stage {
        spec.round.dropout_stage = match s {
            DropStageArg::PsuShares => DropStage::AfterPsuShares,
            DropStageArg::UpdateShares => DropStage::AfterUpdateShares,
        };
    }
    if let Some(t) = args.transport {
        spec.round.transport = match t {
            TransportArg::Inproc => TransportMode::InProcess,
            TransportArg::Socket => TransportMode::Socket,
        };
    }
    if let Some(s) = args.seed {
        spec.round.seed = s;
    }
    let summary = run_experiment(&spec, &args.out)?;
    print_summary_lines(&summary);
    println!("metrics: {}", summary.csv_path.display());
    println!("summary: {}", summary.summary_path.display());
    Ok(())
}

fn print_summary_lines(summary: &sfsl::harness::experiment::ExperimentSummary) {
    for row in &summary.rounds {
        match &row.aborted {
            Some(reason) => println!(
                "round {:>3} [{:?}] n={} ABORTED: {reason}",
                row.round_id, row.scheme, row.n
            ),
            None => println!(
                "round {:>3} [{:?}] n={} union={} client_bytes={:.0} psu_bytes={:.0} dropouts={} clips={}",
                row.round_id,
                row.scheme,
                row.n,
                row.union_size,
                row.mean_client_bytes,
                row.mean_client_psu_bytes,
                row.dropouts,
                row.clips
            ),
        }
    }
    if let Some(fit) = &summary.psu_fit {
        println!(
            "psu bytes ~ {:.1} + {:.1} * n (r^2 = {:.4})",
            fit.intercept, fit.slope, fit.r_squared
        );
    }
    if let Some(cmp) = &summary.compare {
        println!(
            "sfsl client bytes {:.0} vs sfl {:.0} ({:.1}% of baseline)",
            cmp.sfsl_client_bytes,
            cmp.sfl_client_bytes,
            100.0 * cmp.ratio
        );
    }
}

fn cmd_psu_bench(args: PsuBenchArgs) -> Result<(), Box<dyn std::error::Error>> {
    let parts: Vec<u32> = args
        .n_range
        .split(':')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| "n-range must be start:end:step")?;
    let [start, end, step] = parts[..] else {
        return Err("n-range must be start:end:step".into());
    };
    if step == 0 || start < 2 || end < start {
        return Err("bad n-range".into());
    }
    let mut spec = load_preset("psu-bench")?;
    spec.bench.n_start = start;
    spec.bench.n_end = end;
    spec.bench.n_step = step;
    spec.data.set_size = args.set_size;
    spec.round.domain = args.domain;
    if let Some(s) = args.seed {
        spec.round.seed = s;
    }
    let summary = run_experiment(&spec, &args.out)?;
    if let Some(points) = &summary.psu_points {
        println!("n,mean_client_psu_bytes,predicted_terms");
        for p in points {
            println!("{},{:.0},{:.0}", p.n, p.mean_client_psu_bytes, p.predicted_terms);
        }
    }
    print_summary_lines(&summary);
    Ok(())
}

fn cmd_privacy_table(args: PrivacyTableArgs) -> Result<(), Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(&args.cpp_file)?;
    let counts = match &args.counts_file {
        Some(path) => Some(read_counts(path)?),
        None => None,
    };
    println!(
        "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8} {:>8}",
        "name", "p1", "p2", "p3", "p4", "p5", "p6", "eps1", "epsInf", "p7", "p8"
    );
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format!("line {}: expected `name p1 p2 p3 p4`", i + 1).into());
        }
        let name = fields[0];
        let ps: Vec<f64> = fields[1..]
            .iter()
            .map(|f| parse_prob(f))
            .collect::<Result<_, _>>()?;
        let params = ProbabilityParams::new(ps[0], ps[1], ps[2], ps[3])?;
        let (p5, p6) = params.derived_probs();
        let (p7, p8) = match &counts {
            Some(c) => sfsl::perturb::event_probs_averaged(p5, p6, c),
            None => event_probs(p5, p6, args.nj1, args.nj0),
        };
        println!(
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7.3} {:>7.3} {:>8} {:>8} {:>8.4} {:>8.4}",
            name,
            fields[1],
            fields[2],
            fields[3],
            fields[4],
            p5,
            p6,
            fmt_eps(epsilon_one(p5, p6)),
            fmt_eps(epsilon_infinity(ps[0], ps[1])),
            p7,
            p8
        );
    }
    Ok(())
}

/// Accepts plain floats and simple fractions like 15/16.
fn parse_prob(s: &str) -> Result<f64, Box<dyn std::error::Error>> {
    if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num.parse()?;
        let den: f64 = den.parse()?;
        if den == 0.0 {
            return Err(format!("division by zero in {s:?}").into());
        }
        Ok(num / den)
    } else {
        Ok(s.parse()?)
    }
}

fn fmt_eps(e: f64) -> String {
    if e.is_infinite() {
        "inf".into()
    } else {
        format!("{e:.2}")
    }
}

fn read_counts(path: &PathBuf) -> Result<Vec<(f64, f64, f64)>, Box<dyn std::error::Error>> {
    let mut out = Vec::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| format!("counts line {}: expected `nj1 nj0 [weight]`", i + 1))?;
        match fields[..] {
            [nj1, nj0] => out.push((nj1, nj0, 1.0)),
            [nj1, nj0, w] => out.push((nj1, nj0, w)),
            _ => return Err(format!("counts line {}: expected 2 or 3 fields", i + 1).into()),
        }
    }
    Ok(out)
}

fn cmd_cost_model(args: CostModelArgs) -> Result<(), Box<dyn std::error::Error>> {
    let input = CostModelInput {
        n: args.n,
        s: args.s,
        m: args.m,
        d: args.d,
        p5: args.p5,
        p6: args.p6,
        role: match args.role {
            RoleArg::Client => Role::Client,
            RoleArg::Server => Role::Server,
        },
        scheme: match args.scheme {
            SchemeArg::Sfsl => CostScheme::Sfsl,
            SchemeArg::Sfl => CostScheme::Sfl,
            SchemeArg::Psu => CostScheme::Psu,
        },
    };
    let est = predict_cost(&input);
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}
