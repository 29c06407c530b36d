//! `specmoe`: run scenarios, sweeps and trace replays of the speculative
//! decoding simulator and print their reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use specmoe_core::engine::{self, Aggregate, CellResult, ReportMetadata, TelemetryEvent};
use specmoe_core::report;
use specmoe_core::scenario::ModelRef;
use specmoe_core::{
    AcceptanceTrace, ControllerConfig, DraftCostModel, ExpertConfig, MoeCostModel, Policy, ScenarioConfig,
    ScenarioReport, SimOptions,
};

const ABOUT: &str = "Simulate adaptive speculative decoding on mixture-of-experts models";

const LONG_ABOUT: &str = "\
Simulate adaptive speculative decoding on mixture-of-experts models.

specmoe runs a discrete-event model of single-batch decoding. Each
iteration drafts k tokens, verifies them in one target-model pass, and
pays for the distinct experts the in-flight tokens route to. Policies are
`none`, `static:K` and `adaptive` (the utility-driven controller).";

const AFTER_HELP: &str = "\
COMMANDS
    run SCENARIO        Run every cell of a scenario file.
    sweep SCENARIO      Like run, with the grid overridden from flags.
    replay TRACE        Re-run recorded acceptances under another policy.
    report DIR          Print a report written by run, sweep or replay.

FILES
    cells.csv           One row per cell (model, task, policy, seed).
    summary.json        Cells, per-policy speedup summary, utility/speedup
                        regression and run metadata. metadata.generated_at
                        is the only field that differs between two runs
                        with the same inputs and seeds.
    telemetry.jsonl     Per-iteration records and controller decisions
                        (with --telemetry).

SEEDS
    --seed overrides the scenario's `seeds`. With neither, a seed is drawn
    from entropy and recorded in summary.json (metadata.seeds).

PRECEDENCE
    Flags override scenario-file fields, which override built-in defaults.

EXIT STATUS
    0 on success, 1 on configuration, trace or I/O errors, 2 on usage
    errors.

EXAMPLES
    specmoe run fixtures/mixtral_all3.cfg --seed 7 --out out/all3
    specmoe sweep fixtures/regression120.cfg --policies static:0..7
    specmoe replay traces/example.trace --policy adaptive --model mixtral
    specmoe report out/all3 --format csv";

#[derive(Parser, Debug)]
#[command(name = "specmoe", version, about = ABOUT, long_about = LONG_ABOUT, after_long_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory for cells.csv and summary.json.
    #[arg(long, short, value_name = "DIR", default_value = "specmoe-out")]
    out: PathBuf,
    /// Seed for every cell; overrides the scenario's seeds.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel cells (default: all cores).
    #[arg(long, short, value_name = "N")]
    jobs: Option<usize>,
    /// Also write telemetry.jsonl.
    #[arg(long)]
    telemetry: bool,
    /// Do not print the report table.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every cell of a scenario file.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Comma-separated policies, replacing the scenario's list.
        #[arg(long, value_name = "LIST")]
        policies: Option<String>,
        /// Write the acceptance trace of every iteration to FILE.
        #[arg(long, value_name = "FILE")]
        trace_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a scenario with its grid overridden from flags.
    Sweep {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Comma-separated policies, e.g. `none,static:0..7,adaptive`.
        #[arg(long, value_name = "LIST")]
        policies: Option<String>,
        /// Comma-separated model presets.
        #[arg(long, value_name = "LIST")]
        models: Option<String>,
        /// Comma-separated task fixtures.
        #[arg(long, value_name = "LIST")]
        tasks: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a recorded acceptance trace under a policy.
    Replay {
        /// Trace file: `request_id,iter,k_offered,accepted` lines or JSON lines.
        trace: PathBuf,
        /// `none`, `static:K` or `adaptive`.
        #[arg(long, default_value = "adaptive")]
        policy: String,
        /// Model preset.
        #[arg(long, default_value = "mixtral")]
        model: String,
        /// Drafter preset (free, ngram, eagle).
        #[arg(long, default_value = "ngram")]
        drafter: String,
        /// Task routing affinity for the replayed requests.
        #[arg(long, default_value_t = 0.0)]
        affinity: f64,
        /// Largest k the adaptive controller may choose.
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Print a report directory.
    Report {
        /// Directory holding summary.json.
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn metadata(scenario: &str, seed_source: &str) -> ReportMetadata {
    ReportMetadata {
        generated_at: now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: scenario.to_string(),
        seeds: Vec::new(),
        seed_source: seed_source.to_string(),
    }
}

fn pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn resolve_seeds(cfg: &ScenarioConfig, flag: Option<u64>) -> (Vec<u64>, &'static str) {
    match (flag, &cfg.seeds) {
        (Some(s), _) => (vec![s], "flag"),
        (None, Some(s)) => (s.clone(), "config"),
        (None, None) => (vec![rand_seed()], "entropy"),
    }
}

fn rand_seed() -> u64 {
    // Hash of the clock and a per-process random key; recorded in the report.
    use std::hash::{BuildHasher, RandomState};
    let t = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    RandomState::new().hash_one(t)
}

fn check_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} `{}` does not exist or is not a file", path.display());
    }
    Ok(())
}

fn finish(
    out: &Path,
    report: &ScenarioReport,
    telemetry: Option<&[Vec<TelemetryEvent>]>,
    quiet: bool,
) -> anyhow::Result<()> {
    report::write_report(out, report, telemetry)?;
    if !quiet {
        print!("{}", report::render_text(report));
    }
    for c in report.failed_cells() {
        eprintln!(
            "warning: cell {}/{}/{} seed {} failed: {}",
            c.model,
            c.task,
            c.policy,
            c.seed,
            c.error.as_deref().unwrap_or("")
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run_scenario(cfg: ScenarioConfig, origin: &Path, common: &Common, trace_out: Option<&Path>) -> anyhow::Result<()> {
    let (seeds, source) = resolve_seeds(&cfg, common.seed);
    let name = if cfg.name.is_empty() {
        origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        cfg.name.clone()
    };
    let want_telemetry = common.telemetry || trace_out.is_some();
    let (report, tele) =
        pool(common.jobs)?.install(|| engine::run_scenario(&cfg, &seeds, metadata(&name, source), want_telemetry))?;
    if let Some(path) = trace_out {
        let trace = engine::trace_from_telemetry(tele.first().into_iter().flatten())?;
        std::fs::write(path, trace.to_csv()).with_context(|| format!("{}: cannot write trace", path.display()))?;
    }
    finish(
        &common.out,
        &report,
        common.telemetry.then_some(tele.as_slice()),
        common.quiet,
    )
}

fn split(list: &str) -> Vec<String> {
    list.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn replay(
    trace_path: &Path,
    policy: &str,
    model: &str,
    drafter: &str,
    affinity: f64,
    k_max: usize,
    common: &Common,
) -> anyhow::Result<()> {
    check_file(trace_path, "trace")?;
    let trace = AcceptanceTrace::load(trace_path)?;
    if trace.is_empty() {
        bail!("{}: trace has no records", trace_path.display());
    }
    let controller = ControllerConfig {
        k_max,
        k_start: k_max.min(3),
        ..Default::default()
    };
    let policy = {
        let mut v = Policy::parse_list(policy, &controller)?;
        if v.len() != 1 {
            bail!("--policy takes a single policy, got `{policy}`");
        }
        v.remove(0)
    };
    let model = MoeCostModel::new(ExpertConfig::preset(model)?, DraftCostModel::preset(drafter)?)?;
    let opts = SimOptions {
        telemetry: common.telemetry,
        ..Default::default()
    };
    let seed = common.seed.unwrap_or(0);
    let name = trace_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut policies = vec![Policy::None];
    if !policy.is_none() {
        policies.push(policy);
    }
    let mut cells = Vec::new();
    let mut tele = Vec::new();
    for p in &policies {
        let reqs = engine::replay_trace(&model, &trace, p, &opts, affinity, seed)?;
        cells.push(CellResult {
            model: model.expert.name.clone(),
            task: name.clone(),
            policy: p.label(),
            seed,
            agg: Aggregate::from_requests(&reqs),
            speedup: None,
            error: None,
        });
        tele.push(reqs.into_iter().flat_map(|r| r.telemetry).collect());
    }
    let source = if common.seed.is_some() { "flag" } else { "default" };
    let mut meta = metadata(&name, source);
    meta.seeds = vec![seed];
    let report = ScenarioReport::from_cells(meta, cells)?;
    finish(
        &common.out,
        &report,
        common.telemetry.then_some(tele.as_slice()),
        common.quiet,
    )
}

fn show(dir: &Path, format: Format) -> anyhow::Result<()> {
    if !dir.is_dir() {
        bail!("report directory `{}` does not exist", dir.display());
    }
    match format {
        Format::Text => print!("{}", report::render_text(&report::load_report(dir)?)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report::load_report(dir)?)?),
        Format::Csv => {
            let path = dir.join(report::CELLS_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("{}: cannot read", path.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            policies,
            trace_out,
            common,
        } => {
            check_file(&scenario, "scenario")?;
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(p) = policies {
                cfg.policies = split(&p);
            }
            run_scenario(cfg, &scenario, &common, trace_out.as_deref())
        }
        Command::Sweep {
            scenario,
            policies,
            models,
            tasks,
            common,
        } => {
            check_file(&scenario, "scenario")?;
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(p) = policies {
                cfg.policies = split(&p);
            }
            if let Some(m) = models {
                cfg.models = split(&m).into_iter().map(ModelRef::Preset).collect();
            }
            if let Some(t) = tasks {
                cfg.tasks = split(&t)
                    .into_iter()
                    .map(specmoe_core::scenario::TaskRef::Fixture)
                    .collect();
            }
            run_scenario(cfg, &scenario, &common, None)
        }
        Command::Replay {
            trace,
            policy,
            model,
            drafter,
            affinity,
            k_max,
            common,
        } => replay(&trace, &policy, &model, &drafter, affinity, k_max, &common),
        Command::Report { dir, format } => show(&dir, format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
