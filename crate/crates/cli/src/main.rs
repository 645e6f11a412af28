//! `qptycho` command-line front end.

mod config;

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qptycho::experiments::{
    read_trial_csv, run_study_with, RankPolicy, SparseSpec, StudyKind, StudyResult, StudySpec,
    TrialCsvWriter,
};
use qptycho::measurement::{measure_exact, measure_noisy, NoiseModel, PtychoDataset};
use qptycho::pie::{reconstruct, PieConfig, ReconstructionReport, SweepOrder, CONVERGENCE_RULE};
use qptycho::probes::{
    adaptive_for_support, default_rank, family_custom, family_cyclic, family_four,
    family_multiqubit, qubit_count, FamilyTag, ProbeSet,
};
use qptycho::qcore::{fidelity, sample_haar_state, split_rng, PureState};

use crate::config::RunConfig;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    NotConverged,
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<qptycho::Error> for CliError {
    fn from(e: qptycho::Error) -> Self {
        match e {
            qptycho::Error::Io(m) => CliError::Io(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "qptycho", version = VERSION, about = "Quantum state ptychography simulator and reconstructor")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Simulate a ptychographic dataset for a random (or given) state.
    Simulate(SimulateArgs),
    /// Reconstruct a state from a dataset.
    Reconstruct(ReconstructArgs),
    /// Run a Monte Carlo study.
    Study(StudyArgs),
    /// Dump a probe family as JSON.
    Probes(ProbesArgs),
    /// Print version information.
    Version,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct FamilyArgs {
    /// Hilbert-space dimension.
    #[arg(long)]
    d: Option<usize>,
    /// four | cyclic | multiqubit | custom | adaptive
    #[arg(long, default_value = "cyclic")]
    family: String,
    /// Projector rank (windowed families); defaults to ⌊d/2⌋.
    #[arg(long)]
    rank: Option<usize>,
    /// Window starts for the custom family.
    #[arg(long, value_delimiter = ',')]
    skips: Vec<usize>,
}

impl FamilyArgs {
    fn dim(&self) -> Result<usize, CliError> {
        self.d.ok_or_else(|| CliError::Usage("missing --d".into()))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[command(args_override_self = true)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long, default_value_t = 1000.0)]
    lambda: f64,
    /// Exact moduli: no depolarization and no shot noise.
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    no_depolarize: bool,
    #[arg(long)]
    no_poisson: bool,
    /// Target state JSON; a Haar-random state is drawn when absent.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, env = "QPTYCHO_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value = "dataset.json")]
    out: PathBuf,
    /// Also write the target state next to the dataset (`*.truth.json`).
    #[arg(long)]
    keep_truth: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EngineArgs {
    #[arg(long, default_value_t = 1.5)]
    beta: f64,
    /// Convergence threshold on the relative update distance.
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    #[arg(long, default_value_t = 100)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 100)]
    max_restarts: usize,
    /// sequential | shuffled-per-sweep
    #[arg(long, default_value = "sequential")]
    sweep_order: String,
}

impl EngineArgs {
    fn pie_config(&self, keep_trace: bool) -> Result<PieConfig, CliError> {
        let sweep_order = match self.sweep_order.as_str() {
            "sequential" => SweepOrder::Sequential,
            "shuffled-per-sweep" => SweepOrder::ShuffledPerSweep,
            other => return Err(CliError::Usage(format!("unknown sweep order `{other}`"))),
        };
        let cfg = PieConfig {
            beta: self.beta,
            d_threshold: self.threshold,
            max_sweeps: self.max_sweeps,
            max_restarts: self.max_restarts,
            sweep_order,
            keep_trace,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[command(args_override_self = true)]
struct ReconstructArgs {
    /// Dataset JSON written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// External probe-set JSON; the dataset's embedded set is used otherwise.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Ground-truth state JSON, for scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    engine: EngineArgs,
    /// Record per-sweep distance and residual.
    #[arg(long)]
    trace: bool,
    #[arg(long, env = "QPTYCHO_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[command(args_override_self = true)]
struct StudyArgs {
    /// blind | beta-sweep | rank-sweep | non-overlap | sparse | noise-calibration
    kind: Option<String>,
    /// Dimensions, comma separated.
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// floor | ceil | best
    #[arg(long)]
    rank_policy: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    skips: Vec<usize>,
    /// Sparse studies: number of nonzero components.
    #[arg(long)]
    sparsity: Option<usize>,
    /// Sparse studies: minimum cyclic distance between nonzero components.
    #[arg(long)]
    min_separation: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Force exact data.
    #[arg(long, conflicts_with = "noisy")]
    no_noise: bool,
    /// Force noisy data (η and λ from their flags or defaults).
    #[arg(long)]
    noisy: bool,
    #[arg(long)]
    no_depolarize: bool,
    #[arg(long)]
    no_poisson: bool,
    #[command(flatten)]
    #[serde(flatten)]
    engine: EngineArgs,
    #[arg(long, env = "QPTYCHO_SEED")]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to `study-<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep trials already present in the output CSV and run the rest.
    #[arg(long)]
    skip_completed: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[command(args_override_self = true)]
struct ProbesArgs {
    #[command(flatten)]
    #[serde(flatten)]
    family: FamilyArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Io(m) => eprintln!("I/O error: {m}"),
                CliError::NotConverged => {}
            }
            ExitCode::from(e.code())
        }
    }
}

fn run() -> Result<(), CliError> {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m);
    match cli.command {
        Command::Simulate(a) => {
            let a = match (&a.config, sub) {
                (Some(p), Some(m)) => config::merge(&a, m, p, "simulate")?,
                _ => a,
            };
            cmd_simulate(a)
        }
        Command::Reconstruct(a) => {
            let a = match (&a.config, sub) {
                (Some(p), Some(m)) => config::merge(&a, m, p, "reconstruct")?,
                _ => a,
            };
            cmd_reconstruct(a)
        }
        Command::Study(a) => {
            let a = match (&a.config, sub) {
                (Some(p), Some(m)) => config::merge(&a, m, p, "study")?,
                _ => a,
            };
            cmd_study(a)
        }
        Command::Probes(a) => {
            let a = match (&a.config, sub) {
                (Some(p), Some(m)) => config::merge(&a, m, p, "probes")?,
                _ => a,
            };
            cmd_probes(a)
        }
        Command::Version => {
            println!("qptycho {VERSION} (convergence rule: {CONVERGENCE_RULE})");
            Ok(())
        }
    }
}

/// Explicit seed, or a fresh one that is reported and then recorded in the
/// output's run config.
fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("generated seed {s}");
        s
    })
}

fn run_config<T: Serialize>(command: &str, args: &T, seed: u64) -> RunConfig {
    RunConfig {
        command: command.into(),
        version: VERSION.into(),
        seed,
        args: serde_json::to_value(args).expect("arguments serialize"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn parse_family(name: &str) -> Result<FamilyTag, CliError> {
    name.parse::<FamilyTag>().map_err(CliError::from)
}

/// Builds a probe set; `support` is needed only by the adaptive family.
fn build_family(f: &FamilyArgs, support: Option<&BTreeSet<usize>>) -> Result<ProbeSet, CliError> {
    let d = f.dim()?;
    let rank = f.rank.unwrap_or_else(|| default_rank(d));
    let set = match parse_family(&f.family)? {
        FamilyTag::Four => family_four(d, rank)?,
        FamilyTag::Cyclic => family_cyclic(d, rank)?,
        FamilyTag::Multiqubit => {
            let n = qubit_count(d).filter(|&n| n >= 2).ok_or_else(|| {
                CliError::Usage(format!("multiqubit family needs d = 2^N with N ≥ 2, got {d}"))
            })?;
            family_multiqubit(n)?
        }
        FamilyTag::Custom => {
            if f.skips.is_empty() {
                return Err(CliError::Usage("custom family needs --skips".into()));
            }
            family_custom(d, &f.skips, rank)?
        }
        FamilyTag::Adaptive => match support {
            Some(s) => adaptive_for_support(d, s)?,
            None => adaptive_for_support(d, &(0..d).collect())?,
        },
    };
    for w in set.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(set)
}

#[derive(Serialize)]
struct DatasetFile<'a> {
    #[serde(flatten)]
    dataset: &'a PtychoDataset,
}

fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.truth.json"))
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(CliError::Usage(format!("--eta {} outside [0, 1]", a.eta)));
    }
    if a.lambda.is_nan() || a.lambda <= 0.0 {
        return Err(CliError::Usage(format!("--lambda {} must be > 0", a.lambda)));
    }
    let seed = resolve_seed(a.seed);
    let mut rng = split_rng(seed, 0);
    let target = match &a.state {
        Some(p) => {
            let s: PureState = read_json(p)?;
            if s.dim() != a.family.dim()? {
                return Err(CliError::Usage(format!(
                    "state has dimension {}, --d is {}",
                    s.dim(),
                    a.family.dim()?
                )));
            }
            s.normalize()?
        }
        None => sample_haar_state(a.family.dim()?, &mut rng)?,
    };
    let support: BTreeSet<usize> = target
        .amplitudes()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm_sqr() > 1e-24)
        .map(|(i, _)| i)
        .collect();
    let probes = build_family(&a.family, Some(&support))?;
    let noise = NoiseModel {
        eta: a.eta,
        lambda: a.lambda,
        depolarize: !(a.no_noise || a.no_depolarize),
        poisson: !(a.no_noise || a.no_poisson),
    };
    let mut dataset = if noise.is_disabled() {
        measure_exact(&target, &probes)?
    } else {
        measure_noisy(&target, &probes, &noise, &mut rng)?
    };
    let resolved = SimulateArgs {
        seed: Some(seed),
        ..a.clone()
    };
    let rc = run_config("simulate", &resolved, seed);
    dataset.seed = Some(seed);
    dataset.run_config = Some(serde_json::to_value(&rc).expect("run config serializes"));
    write_json(&a.out, &DatasetFile { dataset: &dataset })?;
    if a.keep_truth {
        write_json(&truth_path(&a.out), &target)?;
    }
    println!(
        "wrote {} ({} probes × {} moduli, seed {seed})",
        a.out.display(),
        dataset.n(),
        dataset.dim
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a ReconstructionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<f64>,
    run_config: RunConfig,
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let cfg = a.engine.pie_config(a.trace)?;
    let seed = resolve_seed(a.seed);
    let data = a
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("missing --data".into()))?;
    let dataset: PtychoDataset = read_json(data)?;
    let probes = match &a.probes {
        Some(p) => read_json::<ProbeSet>(p)?,
        None => dataset.probe_set.clone(),
    };
    let truth = a.truth.as_deref().map(read_json::<PureState>).transpose()?;
    let mut rng = split_rng(seed, 0);
    let report = reconstruct(&dataset, &probes, &cfg, &mut rng)?;
    let fid = match &truth {
        Some(t) => Some(fidelity(&report.estimate, &t.clone().normalize()?)?),
        None => None,
    };
    let resolved = ReconstructArgs {
        seed: Some(seed),
        ..a.clone()
    };
    let file = ReportFile {
        report: &report,
        fidelity: fid,
        run_config: run_config("reconstruct", &resolved, seed),
    };
    write_json(&a.out, &file)?;
    println!(
        "{} after {} sweeps ({} restarts), residual {:.3e}",
        if report.converged { "converged" } else { "not converged" },
        report.total_sweeps,
        report.restarts_used,
        report.residual
    );
    if let Some(f) = fid {
        println!("fidelity {f:.9}");
    }
    if report.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged)
    }
}

fn study_spec(a: &StudyArgs, kind: StudyKind, seed: u64) -> Result<StudySpec, CliError> {
    let mut spec = StudySpec::defaults(kind);
    spec.seed = seed;
    if !a.d.is_empty() {
        spec.dims = a.d.clone();
    }
    if let Some(f) = &a.family {
        spec.family = parse_family(f)?;
    }
    if a.rank.is_some() {
        spec.rank = a.rank;
    }
    if let Some(p) = &a.rank_policy {
        spec.rank_policy = p.parse::<RankPolicy>()?;
    }
    if !a.ranks.is_empty() {
        spec.ranks = a.ranks.clone();
    }
    if !a.betas.is_empty() {
        spec.betas = a.betas.clone();
    }
    if !a.skips.is_empty() {
        spec.skips = a.skips.clone();
    }
    spec.sparse = SparseSpec {
        k: a.sparsity.or(spec.sparse.k),
        min_separation: a.min_separation.or(spec.sparse.min_separation),
    };
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if a.noisy {
        spec.noise = NoiseModel::default();
    }
    if a.no_noise {
        spec.noise = NoiseModel::disabled();
    }
    if let Some(e) = a.eta {
        spec.noise.eta = e;
    }
    if let Some(l) = a.lambda {
        spec.noise.lambda = l;
    }
    if a.no_depolarize {
        spec.noise.depolarize = false;
    }
    if a.no_poisson {
        spec.noise.poisson = false;
    }
    let keep_trace = spec.cfg.keep_trace;
    spec.cfg = a.engine.pie_config(keep_trace)?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(flatten)]
    result: &'a StudyResult,
    wall_seconds: f64,
    run_config: RunConfig,
}

fn cmd_study(a: StudyArgs) -> Result<(), CliError> {
    let kind_name = a
        .kind
        .clone()
        .ok_or_else(|| CliError::Usage("study needs a kind".into()))?;
    let kind: StudyKind = kind_name.parse()?;
    let seed = resolve_seed(a.seed);
    let spec = study_spec(&a, kind, seed)?;
    let workers = a.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("study-{kind}")));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let resolved = StudyArgs {
        seed: Some(seed),
        workers: Some(workers),
        out: Some(out.clone()),
        ..a.clone()
    };
    let rc = run_config("study", &resolved, seed);

    let csv_path = out.join("trials.csv");
    let previous = if a.skip_completed && csv_path.exists() {
        let f = File::open(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        read_trial_csv(f)?
    } else {
        Vec::new()
    };
    let file = if previous.is_empty() {
        File::create(&csv_path)
    } else {
        truncate_partial_line(&csv_path)?;
        OpenOptions::new().append(true).open(&csv_path)
    }
    .map_err(|e| io_err(&csv_path, e))?;
    let mut writer = TrialCsvWriter::new(BufWriter::new(file), previous.is_empty());
    if !previous.is_empty() {
        eprintln!("resuming: {} trials already completed", previous.len());
    }

    let started = Instant::now();
    let result = run_study_with(&spec, workers, previous, &mut |rec| writer.write(rec))?;
    let wall = started.elapsed().as_secs_f64();
    drop(writer);

    for c in &result.configurations {
        let name = format!("histogram-{}-d{}.csv", c.arm, c.d).replace(['/', ' '], "_");
        let path = out.join(name);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        c.histogram.write_csv(f)?;
    }
    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &SummaryFile {
            result: &result,
            wall_seconds: wall,
            run_config: rc,
        },
    )?;
    for c in &result.configurations {
        println!(
            "{kind} {} d={} r={}: mean I {:.3e}, mean F {:.4}, success {:.3}, mean sweeps {:.1} ({} trials)",
            c.arm,
            c.d,
            c.r.map_or("-".into(), |r| r.to_string()),
            c.mean_infidelity,
            c.mean_fidelity,
            c.success_fraction,
            c.mean_sweeps,
            c.trials
        );
    }
    println!("wall time {wall:.1}s, seed {seed}, output {}", out.display());
    Ok(())
}

/// Drops a trailing partial row left by an interrupted run so appended rows
/// start on a fresh line.
fn truncate_partial_line(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
        f.set_len(keep as u64).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbesFile<'a> {
    #[serde(flatten)]
    probes: &'a ProbeSet,
    run_config: RunConfig,
}

fn cmd_probes(a: ProbesArgs) -> Result<(), CliError> {
    let set = build_family(&a.family, None)?;
    let file = ProbesFile {
        probes: &set,
        run_config: run_config("probes", &a, 0),
    };
    match &a.out {
        Some(p) => write_json(p, &file),
        None => {
            let text = serde_json::to_string_pretty(&file).expect("probe set serializes");
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
                _ => Ok(()),
            }
        }
    }
}
