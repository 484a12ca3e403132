//! Command-line driver: validate, synthesize, score, regress, report.
//!
//! Log lines are `key=value` text on stderr; the first keys are always
//! `level` and `event`.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use scenebench_core::corpus::{load_manifest, validate_corpus, ExpectedCounts};
use scenebench_core::genclient::{AiBackground, GenClient, GenConfig};
use scenebench_core::regression::{
    design_spec, diagnostics, encode_design, fit_ols, fit_table_csv, interpret, pairs_csv, RegressionFit,
};
use scenebench_core::results::{load_regression_records, load_results};
use scenebench_core::robustness::{rank_models, report_csv, robustness_score, DivisorMode, RobustnessReport};
use scenebench_core::scenarios::{parse_kinds, synthesize_corpus, DonorPool, ScenarioKind, ScenarioParams, SynthesisRequest};

#[derive(Debug, Parser)]
#[command(name = "scenebench", version, about = "Scenario-based robustness benchmarking for image classifiers")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML run configuration; its values override command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a corpus manifest: files, dimensions, masks, class counts.
    Validate(ValidateArgs),
    /// Produce scenario variants of every corpus record.
    Synthesize(SynthesizeArgs),
    /// Cross/inner variances and robustness score per model.
    Score(ScoreArgs),
    /// Main-effects OLS over categorical factors.
    Regress(RegressArgs),
    /// Markdown document with both the robustness and the regression tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file with expected `total` and per-class `[classes]` counts.
    #[arg(long)]
    pub expect: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated kinds, or `offline` / `all`.
    #[arg(long)]
    pub kinds: String,
    /// Master seed; a fresh one is drawn and logged when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of donor images for random_background.
    #[arg(long)]
    pub donors: Option<PathBuf>,
    /// TOML scenario parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// TOML generation-service configuration for ai_background.
    #[arg(long)]
    pub gen_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub results: PathBuf,
    /// `sample` (n - 1) or `population` (n).
    #[arg(long)]
    pub divisor: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct RegressArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model,scenario,class")]
    pub factors: String,
    /// Reference level per factor, in `--factors` order. Missing entries
    /// default to the factor's first level.
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long, default_value = "accuracy")]
    pub response: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for residual and QQ plot data.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model,scenario,class")]
    pub factors: String,
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long, default_value = "accuracy")]
    pub response: String,
    #[arg(long)]
    pub divisor: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Values a `--config` file may set. Every field overrides its flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub divisor: Option<String>,
    pub params: Option<ScenarioParams>,
    pub generation: Option<GenConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Installs the `key=value` logger. Safe to call more than once.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} event={}", record.level().as_str().to_lowercase(), record.args()))
        .try_init();
}

fn quote(s: &str) -> String {
    format!("{s:?}")
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit status: 0 iff no error entries were produced.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match dispatch(cli) {
        Ok(Outcome::Clean) => 0,
        Ok(Outcome::ErrorEntries(n)) => {
            eprintln!("status=failed error_entries={n}");
            1
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("status=error message={}", quote(&chain.join(": ")));
            1
        }
    }
}

pub enum Outcome {
    Clean,
    ErrorEntries(usize),
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Validate(args) => cmd_validate(args, &config),
        Command::Synthesize(args) => cmd_synthesize(args, config),
        Command::Score(args) => cmd_score(args, &config),
        Command::Regress(args) => cmd_regress(args, &config),
        Command::Report(args) => cmd_report(args, &config),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_validate(args: ValidateArgs, config: &RunConfig) -> Result<Outcome> {
    let path = config.manifest.clone().unwrap_or(args.manifest);
    let manifest = load_manifest(&path)?;
    let expect = args.expect.as_deref().map(ExpectedCounts::load).transpose()?;
    let report = validate_corpus(&manifest, expect.as_ref());
    println!("{}", serde_json::to_string_pretty(&report)?);
    for issue in &report.errors {
        warn!("validate_error record={} violation={}", quote(&issue.record_id), quote(&issue.violation));
    }
    info!(
        "validate manifest={} records={} errors={} degenerate={}",
        quote(&path.display().to_string()),
        report.total_records,
        report.errors.len(),
        report.degenerate.len()
    );
    Ok(if report.passed() {
        Outcome::Clean
    } else {
        Outcome::ErrorEntries(report.errors.len())
    })
}

pub fn resolve_kinds(list: &str) -> Result<BTreeSet<ScenarioKind>> {
    match list.trim() {
        "all" => Ok(ScenarioKind::ALL.into_iter().collect()),
        "offline" => Ok(ScenarioKind::OFFLINE.into_iter().collect()),
        other => {
            let kinds = parse_kinds(other)?;
            if kinds.is_empty() {
                bail!("no scenario kinds given");
            }
            Ok(kinds)
        }
    }
}

fn cmd_synthesize(args: SynthesizeArgs, config: RunConfig) -> Result<Outcome> {
    let manifest_path = config.manifest.clone().unwrap_or(args.manifest);
    let out = config.out.clone().unwrap_or(args.out);
    let kinds = resolve_kinds(&args.kinds)?;

    let mut params = match (config.params, &args.params) {
        (Some(p), _) => p,
        (None, Some(path)) => ScenarioParams::load(path)?,
        (None, None) => ScenarioParams::default(),
    };
    let (seed, source) = match config.seed.or(args.seed) {
        Some(s) => (s, "given"),
        None => (rand::random::<u64>(), "drawn"),
    };
    params.master_seed = seed;
    info!("seed value={seed} source={source}");

    let workers = config
        .workers
        .or(args.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!("workers must be >= 1");
    }

    let generator = if kinds.contains(&ScenarioKind::AiBackground) {
        let gen = match (config.generation, &args.gen_config) {
            (Some(g), _) => g,
            (None, Some(path)) => GenConfig::load(path)?,
            (None, None) => GenConfig::default(),
        }
        .with_env();
        gen.validate().context("ai_background requested")?;
        Some(AiBackground::from_config(GenClient::new(gen)?))
    } else {
        None
    };

    let donors = match &args.donors {
        Some(dir) => Some(DonorPool::from_dir(dir).with_context(|| format!("donor pool {}", dir.display()))?),
        None => None,
    };
    if let Some(pool) = &donors {
        if pool.is_empty() {
            bail!("donor pool is empty");
        }
    }

    let manifest = load_manifest(&manifest_path)?;
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    info!(
        "synthesize_start records={} kinds={} workers={workers}",
        manifest.records.len(),
        names.join(",")
    );
    let summary = synthesize_corpus(&SynthesisRequest {
        manifest: &manifest,
        kinds: &kinds,
        params: &params,
        donors: donors.as_ref(),
        generator: generator.as_ref(),
        out_dir: &out,
        workers,
    })?;
    for s in summary.skipped() {
        warn!("skip record={} kind={} reason={}", quote(&s.id), s.kind, quote(&s.reason));
    }
    info!(
        "synthesize_done produced={} skipped={} manifest={}",
        summary.produced(),
        summary.skipped().len(),
        quote(&summary.manifest_path.display().to_string())
    );
    Ok(Outcome::Clean)
}

fn divisor_mode(flag: Option<&str>, config: &RunConfig) -> Result<DivisorMode> {
    match config.divisor.as_deref().or(flag) {
        Some(s) => Ok(s.parse()?),
        None => Ok(DivisorMode::default()),
    }
}

/// Scores every model in a results file, ranked best first.
pub fn score_file(path: &Path, mode: DivisorMode) -> Result<Vec<RobustnessReport>> {
    let tables = load_results(path)?;
    let reports = tables
        .iter()
        .map(|t| robustness_score(t, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_models(&reports)?)
}

fn cmd_score(args: ScoreArgs, config: &RunConfig) -> Result<Outcome> {
    let path = config.results.clone().unwrap_or(args.results);
    let mode = divisor_mode(args.divisor.as_deref(), config)?;
    let ranked = score_file(&path, mode)?;
    for (rank, r) in ranked.iter().enumerate() {
        info!(
            "score rank={} model={} sigma2_cross={:.6} sigma2_inner={:.6} score={:.6} divisor={}",
            rank + 1,
            quote(&r.model_name),
            r.sigma2_cross,
            r.sigma2_inner,
            r.score,
            r.divisor_mode
        );
    }
    write_output(config.out.as_deref().or(args.out.as_deref()), &report_csv(&ranked))?;
    Ok(Outcome::Clean)
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

/// Loads regression data and fits the main-effects model.
pub fn fit_file(data: &Path, factors: &str, refs: Option<&str>, response: &str) -> Result<RegressionFit> {
    let loaded = load_regression_records(data)?;
    for w in &loaded.warnings {
        warn!("regression_data warning={}", quote(w));
    }
    let factors = split_list(factors);
    let refs = refs.map(split_list).unwrap_or_default();
    if refs.len() > factors.len() {
        return Err(anyhow!("{} reference levels given for {} factors", refs.len(), factors.len()));
    }
    let spec = design_spec(&loaded.levels, &factors, &refs, response)?;
    let (x, y) = encode_design(&loaded.records, &spec)?;
    let fit = fit_ols(&x, &y)?;
    info!(
        "regress rows={} columns={} df={} rss={:.6e} r_squared={:.6}",
        x.rows, x.cols, fit.df, fit.rss, fit.r_squared
    );
    Ok(fit)
}

fn cmd_regress(args: RegressArgs, config: &RunConfig) -> Result<Outcome> {
    let data = config.data.clone().unwrap_or(args.data);
    let fit = fit_file(&data, &args.factors, args.refs.as_deref(), &args.response)?;
    write_output(config.out.as_deref().or(args.out.as_deref()), &fit_table_csv(&fit))?;
    if let Some(dir) = &args.diagnostics {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let d = diagnostics(&fit);
        std::fs::write(dir.join("residuals.csv"), pairs_csv(["fitted", "residual"], &d.residual_plot))?;
        std::fs::write(dir.join("qq.csv"), pairs_csv(["theoretical", "standardized_residual"], &d.qq_plot))?;
        info!("diagnostics dir={}", quote(&dir.display().to_string()));
    }
    Ok(Outcome::Clean)
}

/// Markdown document with a robustness section and a regression section.
pub fn render_report(ranked: &[RobustnessReport], fit: &RegressionFit, response: &str) -> String {
    let mut md = String::from("# Robustness report\n\n## Robustness scores\n\n");
    let mut scenarios: Vec<&String> = ranked
        .iter()
        .flat_map(|r| r.deviations_cross.keys().chain(r.deviations_inner.keys()))
        .collect();
    scenarios.sort();
    scenarios.dedup();
    let mode = ranked.first().map(|r| r.divisor_mode.to_string()).unwrap_or_default();
    let _ = writeln!(md, "Squared accuracy deviations from the original-data accuracy; divisor: {mode}.\n");
    let _ = write!(md, "| Model | Setting |");
    for s in &scenarios {
        let _ = write!(md, " {s} |");
    }
    let _ = writeln!(md, " Variance | Robustness score |");
    let _ = writeln!(md, "|{}", "---|".repeat(scenarios.len() + 4));
    let cell = |m: &BTreeMap<String, f64>, s: &String| m.get(s).map_or("".to_string(), |v| format!("{:.2}%", v * 100.0));
    for r in ranked {
        for (setting, devs, var) in [
            ("external", &r.deviations_cross, r.sigma2_cross),
            ("internal", &r.deviations_inner, r.sigma2_inner),
        ] {
            let _ = write!(md, "| {} | {setting} |", r.model_name);
            for s in &scenarios {
                let _ = write!(md, " {} |", cell(devs, s));
            }
            let score = if setting == "external" { format!("{:.4}", r.score) } else { String::new() };
            let _ = writeln!(md, " {var:.4} | {score} |");
        }
    }
    let order: Vec<&str> = ranked.iter().map(|r| r.model_name.as_str()).collect();
    let _ = writeln!(md, "\nRanking: {}\n", order.join(" > "));

    let _ = writeln!(md, "## Regression coefficients\n");
    let _ = writeln!(md, "| Variable | Estimate | P value | P value summary |");
    let _ = writeln!(md, "|---|---|---|---|");
    for i in 0..fit.labels.len() {
        let p = if fit.p_values[i] < 0.0001 {
            "<0.0001".to_string()
        } else {
            format!("{:.4}", fit.p_values[i])
        };
        let _ = writeln!(
            md,
            "| {} | {:.4} | {p} | {} |",
            fit.labels[i], fit.estimates[i], fit.significance[i]
        );
    }
    let _ = writeln!(md, "\nResidual df {}, R² {:.4}.\n", fit.df, fit.r_squared);
    for i in 1..fit.labels.len() {
        let _ = writeln!(md, "- {}", interpret(&fit.labels[i], fit.estimates[i], response));
    }
    md
}

fn cmd_report(args: ReportArgs, config: &RunConfig) -> Result<Outcome> {
    let results = config.results.clone().unwrap_or(args.results);
    let data = config.data.clone().unwrap_or(args.data);
    let mode = divisor_mode(args.divisor.as_deref(), config)?;
    let ranked = score_file(&results, mode)?;
    let fit = fit_file(&data, &args.factors, args.refs.as_deref(), &args.response)?;
    write_output(config.out.as_deref().or(args.out.as_deref()), &render_report(&ranked, &fit, &args.response))?;
    info!("report models={} coefficients={}", ranked.len(), fit.labels.len());
    Ok(Outcome::Clean)
}
