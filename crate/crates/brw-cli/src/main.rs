//! `brw`: phase diagrams, martingale simulation, and diagnostics for
//! supercritical branching random walks with complex parameters.
//!
//! Every option can come from the command line or from a TOML config file
//! (`--config`), with flags taking precedence over the file and the file over
//! built-in defaults. Exit codes: 0 success, 1 runtime failure, 2 invalid
//! configuration (also used by flag parsing), 3 when `--strict` is set and
//! the command produced only Indeterminate verdicts.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Deserialize;

use brw::classifier::{classify, RegionTag, RegionVerdict, DEFAULT_CLASSIFY_TOL};
use brw::diagnostics::{convergence_verdict_lag, Verdict};
use brw::models::OffspringModel;
use brw::phase::{phase_raster, tag_label, GridSpec};
use brw::rngutil::substream;
use brw::similarity::{complex_to_similarity, vector_martingale, SimGeneration, SimilarityEngine};
use brw::simulator::{martingale, run, BrwEngine, Generation, MartingaleTrace, RunConfig, SimError, TraceRow};
use brw::spine::{ladder_epochs, spine_sample};
use brw::tvfun::TVFunction;

/// Default master seed when neither flag nor config supplies one.
const DEFAULT_SEED: u64 = 0;

/// Sample counts for the `tv --check` property report.
const TV_CHECK_SAMPLES: usize = 10_000;

/// Tolerances of the `tv --check` properties.
const TV_RECIPROCAL_TOL: f64 = 1e-12;
const TV_LOG_POWER_REL: f64 = 1e-12;
const TV_SUBMULT_SLACK: f64 = 1e-12;

/// User-supplied configuration that cannot be acted on; mapped to exit 2.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

macro_rules! config_bail {
    ($($arg:tt)*) => {
        return Err(ConfigError(format!($($arg)*)).into())
    };
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "brw",
    version,
    about = "Branching random walk phase diagrams, simulation, and diagnostics"
)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; each command supports a subset.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with code 3 when the result is Indeterminate only.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Ndjson,
    Pgm,
    Svg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify one complex parameter into its phase region.
    Classify(ClassifyArgs),
    /// Rasterize the phase diagram over a parameter grid.
    Phase(PhaseArgs),
    /// Simulate martingale traces and emit NDJSON rows.
    Simulate(SimulateArgs),
    /// Score an NDJSON trace file against the convergence gates.
    Diagnose(DiagnoseArgs),
    /// Sample tilted spine walks with ladder-epoch summaries.
    Spine(SpineArgs),
    /// Build the truncation function pair and report its properties.
    Tv(TvArgs),
    /// Run the similarity-group engine built from a complex parameter.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
struct ClassifyArgs {
    /// gaussian-binary | lattice | table:<rows.toml>
    #[arg(long)]
    model: Option<String>,
    /// Complex parameter "theta,eta".
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    /// Root/region tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long)]
    model: Option<String>,
    /// Grid range "min,max" on the real axis.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
    /// Grid range "min,max" on the imaginary axis.
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    /// Resolution "n_theta,n_eta".
    #[arg(long)]
    res: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    /// Companion moment order for W_n.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gens: Option<u32>,
    #[arg(long)]
    reps: Option<u64>,
    /// Truncation level t >= 1 enabling the Z^(t) column.
    #[arg(long)]
    truncate: Option<f64>,
    /// Population cap per replicate.
    #[arg(long)]
    cap: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// NDJSON trace file produced by `simulate`.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Moment order p > 1.
    #[arg(long)]
    p: Option<f64>,
    /// Increment lag k for |Z_n - Z_{n-k}|.
    #[arg(long)]
    lag: Option<usize>,
}

#[derive(Args)]
struct SpineArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    /// Tilt exponent; must satisfy f(alpha) = 1.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    reps: Option<u64>,
}

#[derive(Args)]
struct TvArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// "auto" or an explicit positive value.
    #[arg(long)]
    u0: Option<String>,
    /// Run the randomized property report.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SimilarityArgs {
    /// Build the 2x2 similarity offspring law from (model, lambda).
    #[arg(long)]
    from_complex: bool,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    #[arg(long)]
    gens: Option<u32>,
    #[arg(long)]
    reps: Option<u64>,
    /// Also run the complex engine on a shared stream and report the
    /// per-generation discrepancy.
    #[arg(long)]
    compare: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    format: Option<String>,
    threads: Option<usize>,
    strict: Option<bool>,
    classify: Option<ClassifyCfg>,
    phase: Option<PhaseCfg>,
    simulate: Option<SimulateCfg>,
    diagnose: Option<DiagnoseCfg>,
    spine: Option<SpineCfg>,
    tv: Option<TvCfg>,
    similarity: Option<SimilarityCfg>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct ClassifyCfg {
    model: Option<String>,
    lambda: Option<[f64; 2]>,
    tol: Option<f64>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct PhaseCfg {
    model: Option<String>,
    theta: Option<[f64; 2]>,
    eta: Option<[f64; 2]>,
    res: Option<[usize; 2]>,
    tol: Option<f64>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct SimulateCfg {
    model: Option<String>,
    lambda: Option<[f64; 2]>,
    alpha: Option<f64>,
    gens: Option<u32>,
    reps: Option<u64>,
    truncate: Option<f64>,
    cap: Option<u64>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct DiagnoseCfg {
    traces: Option<PathBuf>,
    p: Option<f64>,
    lag: Option<usize>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct SpineCfg {
    model: Option<String>,
    lambda: Option<[f64; 2]>,
    alpha: Option<f64>,
    steps: Option<usize>,
    reps: Option<u64>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct TvCfg {
    alpha: Option<f64>,
    delta: Option<f64>,
    u0: Option<String>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct SimilarityCfg {
    model: Option<String>,
    lambda: Option<[f64; 2]>,
    gens: Option<u32>,
    reps: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 2 {
        if let (Ok(a), Ok(b)) = (parts[0].trim().parse(), parts[1].trim().parse()) {
            return Ok((a, b));
        }
    }
    config_bail!("{what} must be two comma-separated numbers, got `{s}`")
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 2 {
        if let (Ok(a), Ok(b)) = (parts[0].trim().parse(), parts[1].trim().parse()) {
            return Ok((a, b));
        }
    }
    config_bail!("--res must be two comma-separated counts, got `{s}`")
}

#[derive(Deserialize)]
struct TableRowDef {
    p: f64,
    x: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    row: Vec<TableRowDef>,
}

fn parse_model(name: &str) -> Result<OffspringModel> {
    match name {
        "gaussian-binary" | "gaussian" => Ok(OffspringModel::gaussian_binary()),
        "lattice" => Ok(OffspringModel::lattice_pathological()),
        other => {
            let Some(path) = other.strip_prefix("table:") else {
                config_bail!(
                    "unknown model `{other}` (expected gaussian-binary, lattice, or table:<file>)"
                );
            };
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read table {path}: {e}")))?;
            let table: TableFile =
                toml::from_str(&text).map_err(|e| config_err(format!("invalid table {path}: {e}")))?;
            OffspringModel::table(table.row.into_iter().map(|r| (r.p, r.x)).collect())
                .map_err(|e| config_err(format!("invalid table {path}: {e}")))
        }
    }
}

/// Flag wins over config; both absent is an error naming the option.
fn need<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T> {
    flag.or(cfg)
        .ok_or_else(|| config_err(format!("missing required option --{name}")))
}

fn resolve_lambda(flag: Option<&str>, cfg: Option<[f64; 2]>) -> Result<Complex64> {
    if let Some(s) = flag {
        let (re, im) = parse_pair(s, "--lambda")?;
        return Ok(Complex64::new(re, im));
    }
    if let Some([re, im]) = cfg {
        return Ok(Complex64::new(re, im));
    }
    config_bail!("missing required option --lambda")
}

fn resolve_model(flag: Option<&str>, cfg: Option<&str>) -> Result<OffspringModel> {
    parse_model(flag.or(cfg).unwrap_or("gaussian-binary"))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes)
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(bytes).context("stdout write")?,
    }
    Ok(())
}

fn verdict_csv(v: &RegionVerdict) -> String {
    let mut row = format!(
        "theta,eta,tag,alpha,derivative\n{},{},{}",
        v.lambda.re,
        v.lambda.im,
        tag_label(v.tag)
    );
    match v.alpha {
        Some(a) => row.push_str(&format!(",{a}")),
        None => row.push(','),
    }
    match v.derivative {
        Some(d) => row.push_str(&format!(",{d}")),
        None => row.push(','),
    }
    row.push('\n');
    row
}

fn dispatch(cli: Cli) -> Result<i32> {
    let file = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let strict = cli.strict || file.strict.unwrap_or(false);
    let format = match (cli.format, file.format.as_deref()) {
        (Some(f), _) => Some(f),
        (None, Some(s)) => Some(
            Format::from_str(s, true)
                .map_err(|_| config_err(format!("invalid format `{s}` in config")))?,
        ),
        (None, None) => None,
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            config_bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    let out = cli.out.as_deref();

    match cli.cmd {
        Cmd::Classify(a) => cmd_classify(a, file.classify.unwrap_or_default(), format, out, strict),
        Cmd::Phase(a) => cmd_phase(a, file.phase.unwrap_or_default(), format, out, strict),
        Cmd::Simulate(a) => {
            cmd_simulate(a, file.simulate.unwrap_or_default(), format, out, seed)
        }
        Cmd::Diagnose(a) => cmd_diagnose(a, file.diagnose.unwrap_or_default(), out, strict),
        Cmd::Spine(a) => cmd_spine(a, file.spine.unwrap_or_default(), format, out, seed),
        Cmd::Tv(a) => cmd_tv(a, file.tv.unwrap_or_default(), out, seed),
        Cmd::Similarity(a) => {
            cmd_similarity(a, file.similarity.unwrap_or_default(), format, out, seed)
        }
    }
}

fn cmd_classify(
    a: ClassifyArgs,
    cfg: ClassifyCfg,
    format: Option<Format>,
    out: Option<&Path>,
    strict: bool,
) -> Result<i32> {
    let model = resolve_model(a.model.as_deref(), cfg.model.as_deref())?;
    let lambda = resolve_lambda(a.lambda.as_deref(), cfg.lambda)?;
    let tol = a.tol.or(cfg.tol).unwrap_or(DEFAULT_CLASSIFY_TOL);
    let verdict = classify(&model, lambda, tol);
    let text = match format.unwrap_or(Format::Ndjson) {
        Format::Ndjson => format!("{}\n", verdict.to_ndjson()),
        Format::Csv => verdict_csv(&verdict),
        _ => config_bail!("classify emits csv or ndjson"),
    };
    emit(out, text.as_bytes())?;
    if strict && verdict.tag == RegionTag::Indeterminate {
        return Ok(3);
    }
    Ok(0)
}

fn cmd_phase(
    a: PhaseArgs,
    cfg: PhaseCfg,
    format: Option<Format>,
    out: Option<&Path>,
    strict: bool,
) -> Result<i32> {
    let model = resolve_model(a.model.as_deref(), cfg.model.as_deref())?;
    let theta = match a.theta.as_deref() {
        Some(s) => parse_pair(s, "--theta")?,
        None => cfg
            .theta
            .map(|[lo, hi]| (lo, hi))
            .ok_or_else(|| config_err("missing required option --theta"))?,
    };
    let eta = match a.eta.as_deref() {
        Some(s) => parse_pair(s, "--eta")?,
        None => cfg
            .eta
            .map(|[lo, hi]| (lo, hi))
            .ok_or_else(|| config_err("missing required option --eta"))?,
    };
    let (nt, ne) = match a.res.as_deref() {
        Some(s) => parse_res(s)?,
        None => cfg
            .res
            .map(|[a, b]| (a, b))
            .ok_or_else(|| config_err("missing required option --res"))?,
    };
    let tol = a.tol.or(cfg.tol).unwrap_or(DEFAULT_CLASSIFY_TOL);
    let spec = GridSpec::new(theta, eta, nt, ne).map_err(|e| config_err(e.to_string()))?;
    let grid = phase_raster(&model, spec, tol).map_err(|e| config_err(e.to_string()))?;
    match format.unwrap_or(Format::Csv) {
        Format::Csv => emit(out, grid.render_csv().as_bytes())?,
        Format::Ndjson => emit(out, grid.render_ndjson().as_bytes())?,
        Format::Pgm => emit(out, &grid.render_pgm())?,
        Format::Svg => emit(out, grid.render_svg().as_bytes())?,
    }
    if strict
        && grid
            .cells()
            .iter()
            .all(|v| v.tag == RegionTag::Indeterminate)
    {
        return Ok(3);
    }
    Ok(0)
}

fn map_sim_err(e: SimError) -> anyhow::Error {
    match e {
        SimError::PopulationCapExceeded { .. } => anyhow::Error::new(e),
        _ => config_err(e.to_string()),
    }
}

fn cmd_simulate(
    a: SimulateArgs,
    cfg: SimulateCfg,
    format: Option<Format>,
    out: Option<&Path>,
    seed: u64,
) -> Result<i32> {
    if !matches!(format.unwrap_or(Format::Ndjson), Format::Ndjson) {
        config_bail!("simulate emits ndjson only");
    }
    let model = resolve_model(a.model.as_deref(), cfg.model.as_deref())?;
    let lambda = resolve_lambda(a.lambda.as_deref(), cfg.lambda)?;
    let defaults = RunConfig::default();
    let run_cfg = RunConfig {
        gens: a.gens.or(cfg.gens).unwrap_or(defaults.gens),
        reps: a.reps.or(cfg.reps).unwrap_or(defaults.reps),
        alpha: a.alpha.or(cfg.alpha).unwrap_or(defaults.alpha),
        truncate: a.truncate.or(cfg.truncate),
        cap: a.cap.or(cfg.cap).unwrap_or(defaults.cap),
        seed,
        ..defaults
    };
    let traces = run(&model, lambda, &run_cfg).map_err(map_sim_err)?;
    let mut text = String::new();
    for trace in &traces {
        text.push_str(&trace.to_ndjson());
    }
    emit(out, text.as_bytes())?;
    Ok(0)
}

fn cmd_diagnose(
    a: DiagnoseArgs,
    cfg: DiagnoseCfg,
    out: Option<&Path>,
    strict: bool,
) -> Result<i32> {
    let path = need(a.traces, cfg.traces, "traces")?;
    let p = a.p.or(cfg.p).unwrap_or(1.5);
    let lag = a.lag.or(cfg.lag).unwrap_or(1);
    let text = fs::read_to_string(&path)
        .map_err(|e| config_err(format!("cannot read traces {}: {e}", path.display())))?;
    let mut by_rep: std::collections::BTreeMap<u64, Vec<TraceRow>> = Default::default();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow = serde_json::from_str(line)
            .map_err(|e| config_err(format!("traces line {}: {e}", k + 1)))?;
        by_rep.entry(row.rep).or_default().push(row);
    }
    let traces: Vec<MartingaleTrace> = by_rep
        .into_iter()
        .map(|(rep, mut rows)| {
            rows.sort_by_key(|r| r.n);
            MartingaleTrace {
                rep,
                seed: 0,
                biased: false,
                rows,
            }
        })
        .collect();
    let report =
        convergence_verdict_lag(&traces, p, lag).map_err(|e| config_err(e.to_string()))?;
    let mut json = serde_json::to_string(&report).context("report serializes")?;
    json.push('\n');
    emit(out, json.as_bytes())?;
    if strict && report.verdict == Verdict::Indeterminate {
        return Ok(3);
    }
    Ok(0)
}

fn cmd_spine(
    a: SpineArgs,
    cfg: SpineCfg,
    format: Option<Format>,
    out: Option<&Path>,
    seed: u64,
) -> Result<i32> {
    if !matches!(format.unwrap_or(Format::Ndjson), Format::Ndjson) {
        config_bail!("spine emits ndjson only");
    }
    let model = resolve_model(a.model.as_deref(), cfg.model.as_deref())?;
    let lambda = resolve_lambda(a.lambda.as_deref(), cfg.lambda)?;
    let alpha = need(a.alpha, cfg.alpha, "alpha")?;
    let steps = a.steps.or(cfg.steps).unwrap_or(100);
    let reps = a.reps.or(cfg.reps).unwrap_or(1);
    let mut text = String::new();
    for rep in 0..reps {
        let mut rng = substream(seed, &[rep]);
        let path = spine_sample(&model, lambda, alpha, steps, &mut rng)
            .map_err(|e| config_err(e.to_string()))?;
        let ladder = ladder_epochs(&path);
        let line = serde_json::json!({
            "rep": rep,
            "path": serde_json::to_value(&path)?,
            "ladder": serde_json::to_value(&ladder)?,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    emit(out, text.as_bytes())?;
    Ok(0)
}

fn cmd_tv(a: TvArgs, cfg: TvCfg, out: Option<&Path>, seed: u64) -> Result<i32> {
    let alpha = need(a.alpha, cfg.alpha, "alpha")?;
    let delta = need(a.delta, cfg.delta, "delta")?;
    let u0_spec = a.u0.or(cfg.u0).unwrap_or_else(|| "auto".into());
    let tv = if u0_spec == "auto" {
        TVFunction::with_auto_u0(alpha, delta)
    } else {
        let u0: f64 = u0_spec
            .parse()
            .map_err(|_| config_err(format!("--u0 must be `auto` or a number, got `{u0_spec}`")))?;
        TVFunction::new(alpha, delta, u0)
    }
    .map_err(|e| config_err(e.to_string()))?;

    let mut text = format!(
        "tv alpha={} delta={} u0={} c={}\n",
        tv.alpha(),
        tv.delta(),
        tv.u0(),
        tv.slow_variation_constant()
    );
    let mut all_pass = true;
    if a.check {
        for (name, pass, detail) in tv_property_report(&tv, seed) {
            all_pass &= pass;
            text.push_str(&format!(
                "{name}: {} ({detail})\n",
                if pass { "pass" } else { "FAIL" }
            ));
        }
    }
    emit(out, text.as_bytes())?;
    if a.check && !all_pass {
        anyhow::bail!("tv property check failed");
    }
    Ok(0)
}

/// Randomized and exact checks of the truncation-function properties, each
/// returning (name, pass, detail).
fn tv_property_report(tv: &TVFunction, seed: u64) -> Vec<(&'static str, bool, String)> {
    use rand::Rng;
    let mut rng = substream(seed, &[0x7476]);
    let mut report = Vec::new();

    let shape = tv.check_shape();
    report.push((
        "shape (convex phi, concave derivative)",
        shape.convex && shape.derivative_concave,
        format!(
            "worst convexity {:.3e}, worst derivative bend {:.3e}",
            shape.worst_convexity, shape.worst_concavity
        ),
    ));

    // (i) reciprocal symmetry over random x spanning (1e-8, 1e8).
    let mut worst = 0.0f64;
    for _ in 0..TV_CHECK_SAMPLES {
        let x = 10f64.powf(rng.random_range(-8.0..8.0));
        worst = worst.max((tv.ell(x).unwrap() * tv.ell(1.0 / x).unwrap() - 1.0).abs());
    }
    report.push((
        "(i) ell(x) ell(1/x) = 1",
        worst <= TV_RECIPROCAL_TOL,
        format!("max deviation {worst:.3e}"),
    ));

    // (ii) exact log-power branch beyond e^{u0}.
    let c = tv.slow_variation_constant();
    let mut worst = 0.0f64;
    for _ in 0..TV_CHECK_SAMPLES {
        let lx = tv.u0() * (1.0 + rng.random_range(f64::EPSILON..50.0));
        let expect = c * lx.powf(tv.delta());
        let got = tv.ell_log(lx);
        worst = worst.max(((got - expect) / expect).abs());
    }
    report.push((
        "(ii) ell(x) = c log^delta x for x > e^u0",
        worst <= TV_LOG_POWER_REL,
        format!("max relative error {worst:.3e}"),
    ));

    // (iii) submultiplicative bound ell(xy) <= ell(x)^2 ell(y).
    let mut violations = 0u32;
    for _ in 0..TV_CHECK_SAMPLES {
        let x = 10f64.powf(rng.random_range(0.0..6.0));
        let y = 10f64.powf(rng.random_range(-6.0..6.0));
        let lhs = tv.ell(x * y).unwrap();
        let rhs = tv.ell(x).unwrap().powi(2) * tv.ell(y).unwrap();
        if lhs > rhs * (1.0 + TV_SUBMULT_SLACK) {
            violations += 1;
        }
    }
    report.push((
        "(iii) ell(xy) <= ell(x)^2 ell(y) for x >= 1",
        violations == 0,
        format!("{violations} violations"),
    ));

    // Monotone on a log grid.
    let mut bad = 0u32;
    let mut prev = f64::NEG_INFINITY;
    for k in 0..TV_CHECK_SAMPLES {
        let lx = -40.0 + 80.0 * k as f64 / (TV_CHECK_SAMPLES - 1) as f64;
        let v = tv.ell_log(lx);
        if v < prev {
            bad += 1;
        }
        prev = v;
    }
    report.push((
        "nondecreasing on log grid",
        bad == 0,
        format!("{bad} inversions"),
    ));

    report
}

fn cmd_similarity(
    a: SimilarityArgs,
    cfg: SimilarityCfg,
    format: Option<Format>,
    out: Option<&Path>,
    seed: u64,
) -> Result<i32> {
    if !matches!(format.unwrap_or(Format::Ndjson), Format::Ndjson) {
        config_bail!("similarity emits ndjson only");
    }
    if !a.from_complex {
        config_bail!("similarity requires --from-complex (the only supported construction)");
    }
    let model = resolve_model(a.model.as_deref(), cfg.model.as_deref())?;
    let lambda = resolve_lambda(a.lambda.as_deref(), cfg.lambda)?;
    let gens = a.gens.or(cfg.gens).unwrap_or(10);
    let reps = a.reps.or(cfg.reps).unwrap_or(1);
    let sim_model =
        complex_to_similarity(&model, lambda).map_err(|e| config_err(e.to_string()))?;
    let sim_engine = SimilarityEngine::new(sim_model).map_err(|e| config_err(e.to_string()))?;
    let mut text = String::new();
    if a.compare {
        let engine = BrwEngine::new(model, lambda).map_err(map_sim_err)?;
        // One shared stream per replicate; both engines consume identical
        // draws, so the vector martingale at w = (1, 0) must reproduce Z_n.
        let mut worst = vec![0.0f64; gens as usize + 1];
        for rep in 0..reps {
            let mut rng_z = substream(seed, &[rep]);
            let mut rng_v = rng_z.clone();
            let mut gen_z = Generation::root();
            let mut gen_v = SimGeneration::root();
            for n in 1..=gens as usize {
                gen_z = engine.step(&gen_z, &mut rng_z).map_err(map_sim_err)?;
                gen_v = sim_engine.step(&gen_v, &mut rng_v);
                let z = martingale(&gen_z);
                let v = vector_martingale(&gen_v, [1.0, 0.0]);
                let d = (v[0] - z.re).abs().max((v[1] - z.im).abs());
                worst[n] = worst[n].max(d);
            }
        }
        for (n, d) in worst.iter().enumerate().skip(1) {
            text.push_str(&format!(
                "{}\n",
                serde_json::json!({"n": n, "max_discrepancy": d})
            ));
        }
    } else {
        for rep in 0..reps {
            let mut rng = substream(seed, &[rep]);
            let mut gen = SimGeneration::root();
            for n in 1..=gens as usize {
                gen = sim_engine.step(&gen, &mut rng);
                let v = vector_martingale(&gen, [1.0, 0.0]);
                text.push_str(&format!(
                    "{}\n",
                    serde_json::json!({
                        "rep": rep,
                        "n": n,
                        "v": [v[0], v[1]],
                        "pop": gen.population(),
                    })
                ));
            }
        }
    }
    emit(out, text.as_bytes())?;
    Ok(0)
}
