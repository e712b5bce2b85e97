use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use koopcycle::control_basis::FourierBasis;
use koopcycle::cyclic_solver::{
    self, solve_cyclic, solve_reduced, ControlEnergy, CyclicConfig, LoopRecord, SolveMetrics,
    SolverWeights,
};
use koopcycle::datagen::{
    gen_nbody, gen_pinned_sheet, gen_shallow_water, DatasetClass, NBodyConfig, PinnedSheetConfig,
    ShallowWaterConfig,
};
use koopcycle::koopman::{self, RankSelection, ReducedModel};
use koopcycle::trajectory::{self, Trajectory};
use serde::Serialize;

/// Exit code for bad arguments, unreadable inputs and invalid configurations.
const EXIT_USAGE: u8 = 2;
/// Exit code for numerical or simulation failures.
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "koopcycle", version, about = "Seamless loops from trajectories via reduced Koopman control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory.
    Gen(GenArgs),
    /// Fit a reduced surrogate and write a `.koop` model.
    Fit(FitArgs),
    /// Synthesize a cyclic loop and write a `.cyc` record.
    Loop(LoopArgs),
    /// Compare a `.cyc` loop with its input trajectory.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(value_enum)]
    class: ClassArg,
    /// Number of frames to record.
    #[arg(long)]
    frames: Option<usize>,
    /// Grid size as WxH (sheet nodes or water cells).
    #[arg(long)]
    grid: Option<String>,
    /// JSON generator configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the randomized N-body system.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Nbody,
    #[value(alias = "cloth")]
    Sheet,
    #[value(alias = "wave")]
    Water,
}

impl From<ClassArg> for DatasetClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Nbody => DatasetClass::Nbody,
            ClassArg::Sheet => DatasetClass::Sheet,
            ClassArg::Water => DatasetClass::Water,
        }
    }
}

#[derive(Args)]
struct RankArgs {
    /// Reduced rank; defaults to the dataset class default.
    #[arg(long, conflicts_with = "energy")]
    rank: Option<usize>,
    /// Pick the smallest rank capturing this fraction of squared singular values.
    #[arg(long)]
    energy: Option<f64>,
}

impl RankArgs {
    fn selection(&self, traj: &Trajectory) -> RankSelection {
        match (self.rank, self.energy) {
            (Some(r), _) => RankSelection::Fixed(r),
            (None, Some(e)) => RankSelection::Energy(e),
            (None, None) => RankSelection::Fixed(DatasetClass::infer(&traj.layout).default_rank()),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    input: PathBuf,
    #[command(flatten)]
    rank: RankArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnergyArg {
    Gram,
    Identity,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricsFormat {
    Text,
    Json,
}

#[derive(Args)]
struct LoopArgs {
    input: PathBuf,
    #[command(flatten)]
    rank: RankArgs,
    /// Use a fitted `.koop` model instead of fitting one.
    #[arg(long, conflicts_with_all = ["rank", "energy"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    harmonics: usize,
    #[arg(long)]
    include_constant: bool,
    #[arg(long, default_value_t = 1e-2)]
    w_red: f64,
    #[arg(long, default_value_t = 3.0)]
    w_u: f64,
    #[arg(long, value_enum, default_value = "gram")]
    control_energy: EnergyArg,
    /// Leave lifted frames out of the `.cyc` file.
    #[arg(long)]
    no_frames: bool,
    #[arg(long, value_enum, default_value = "text")]
    metrics: MetricsFormat,
    /// Append the run as a row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    cycle: PathBuf,
    input: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Directory that session trajectory references resolve against.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Write each session's latest loop here on shutdown.
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
}

fn parse_grid(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid `{s}` must look like WxH"))?;
    let w: usize = w.trim().parse().with_context(|| format!("bad grid width in `{s}`"))?;
    let h: usize = h.trim().parse().with_context(|| format!("bad grid height in `{s}`"))?;
    if w < 2 || h < 2 {
        bail!("grid `{s}` must be at least 2x2");
    }
    Ok((w, h))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn steps_for(frames: Option<usize>) -> anyhow::Result<Option<usize>> {
    match frames {
        Some(f) if f < trajectory::MIN_FRAMES => {
            bail!("--frames must be at least {}", trajectory::MIN_FRAMES)
        }
        Some(f) => Ok(Some(f - 1)),
        None => Ok(None),
    }
}

/// Usage errors carry exit code 2; everything else exits with 1.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<koopcycle::Error>() {
            Some(e) if is_numerical(e) => EXIT_FAILURE,
            _ => EXIT_USAGE,
        };
        Self { code, error }
    }
}

impl From<koopcycle::Error> for Failure {
    fn from(e: koopcycle::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn is_numerical(e: &koopcycle::Error) -> bool {
    use koopcycle::Error as E;
    matches!(
        e,
        E::AsymmetricHessian { .. }
            | E::SingularKkt { .. }
            | E::InconsistentConstraint { .. }
            | E::InaccurateSolve { .. }
            | E::DegenerateRank(_)
            | E::Simulation(_)
            | E::NonFinite(_)
            | E::DegenerateProjection { .. }
    )
}

type CmdResult = Result<(), Failure>;

fn run_gen(args: GenArgs) -> CmdResult {
    let steps = steps_for(args.frames)?;
    let grid = args.grid.as_deref().map(parse_grid).transpose()?;
    let traj = match args.class {
        ClassArg::Nbody => {
            if grid.is_some() {
                return Err(anyhow::anyhow!("--grid does not apply to nbody").into());
            }
            let mut cfg: NBodyConfig = match &args.config {
                Some(p) => read_config(p)?,
                None => NBodyConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg = NBodyConfig::five_body(seed, cfg.steps);
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            gen_nbody(&cfg)?
        }
        ClassArg::Sheet => {
            let mut cfg: PinnedSheetConfig = match &args.config {
                Some(p) => read_config(p)?,
                None => PinnedSheetConfig::default(),
            };
            if let Some((w, h)) = grid {
                cfg.nx = w;
                cfg.nz = h;
                cfg.pinned = vec![0, w - 1];
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            gen_pinned_sheet(&cfg)?
        }
        ClassArg::Water => {
            let mut cfg: ShallowWaterConfig = match (&args.config, grid) {
                (Some(p), _) => read_config(p)?,
                (None, Some((w, h))) => ShallowWaterConfig::with_grid(w, h),
                (None, None) => ShallowWaterConfig::default(),
            };
            if let (Some(_), Some((w, h))) = (&args.config, grid) {
                cfg.nx = w;
                cfg.ny = h;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            gen_shallow_water(&cfg)?
        }
    };
    traj.save(&args.out)?;
    println!(
        "wrote {} ({} frames, n = {}, seam gap {:.4e})",
        args.out.display(),
        traj.frame_count(),
        traj.dim(),
        traj.seam_gap()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    n: usize,
    r: usize,
    requested_rank: usize,
    fit_residual: f64,
    spectral_radius: f64,
    seconds: f64,
}

fn run_fit(args: FitArgs) -> CmdResult {
    let traj = Trajectory::load(&args.input)?;
    let start = Instant::now();
    let period = traj.split().fit_frames;
    let (x, xp) = trajectory::snapshot_pair(&traj, period)?;
    let model = koopman::reduce(&x, &xp, args.rank.selection(&traj))?;
    let seconds = start.elapsed().as_secs_f64();
    model.save(&args.out)?;
    let summary = FitSummary {
        n: model.dim(),
        r: model.rank(),
        requested_rank: model.requested_rank,
        fit_residual: model.fit_residual,
        spectral_radius: model.spectral_radius,
        seconds,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

/// One row of the timing table.
#[derive(Serialize)]
struct LoopRow {
    input: String,
    n: usize,
    r: usize,
    period: usize,
    m: usize,
    processing_seconds: f64,
    optimization_seconds: f64,
    closure_residual: f64,
    fidelity_cost: f64,
    control_cost: f64,
    kkt_residual: f64,
    raw_seam_gap: f64,
    loop_seam_gap: f64,
}

const CSV_HEADER: &str = "input,n,r,T,m,processing_s,optimization_s,closure_residual,fidelity_cost,control_cost,kkt_residual,raw_seam_gap,loop_seam_gap";

impl LoopRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3e},{:.6e},{:.6e},{:.3e},{:.6e},{:.3e}",
            self.input,
            self.n,
            self.r,
            self.period,
            self.m,
            self.processing_seconds,
            self.optimization_seconds,
            self.closure_residual,
            self.fidelity_cost,
            self.control_cost,
            self.kkt_residual,
            self.raw_seam_gap,
            self.loop_seam_gap
        )
    }

    fn text(&self) -> String {
        format!(
            "{}: n={} r={} T={} m={} | processing {:.4}s optimization {:.4}s | closure {:.3e} | seam {:.3e} -> {:.3e}",
            self.input,
            self.n,
            self.r,
            self.period,
            self.m,
            self.processing_seconds,
            self.optimization_seconds,
            self.closure_residual,
            self.raw_seam_gap,
            self.loop_seam_gap
        )
    }
}

fn loop_with_model(
    model: &ReducedModel,
    traj: &Trajectory,
    args: &LoopArgs,
    energy: ControlEnergy,
) -> koopcycle::Result<(LoopRecord, f64, f64)> {
    let start = Instant::now();
    if model.dim() != traj.dim() {
        return Err(koopcycle::Error::DimensionMismatch {
            declared: model.dim(),
            actual: traj.dim(),
        });
    }
    let period = traj.split().fit_frames;
    let basis = FourierBasis::new(period, args.harmonics, args.include_constant)?;
    let observed = model.project_all(&traj.states().columns(0, period).into_owned())?;
    let weights = SolverWeights::new(args.w_red, args.w_u)?;
    let sol = solve_reduced(model, &observed, &basis, &weights, energy)?;
    let frames = Trajectory::new(&model.basis * &sol.reduced_cycle, traj.dt, traj.layout.clone())?;
    let processing = start.elapsed().as_secs_f64() - sol.metrics.solve_seconds;
    let record = LoopRecord {
        r: model.rank(),
        n: model.dim(),
        basis,
        weights,
        energy,
        metrics: sol.metrics.clone(),
        z1: sol.z1_opt.clone(),
        gamma: sol.gamma.clone(),
        frames: Some(frames),
    };
    Ok((record, processing, sol.metrics.solve_seconds))
}

fn run_loop(args: LoopArgs) -> CmdResult {
    let traj = Trajectory::load(&args.input)?;
    let energy = match args.control_energy {
        EnergyArg::Gram => ControlEnergy::Gram,
        EnergyArg::Identity => ControlEnergy::Identity,
    };
    let (mut record, processing, optimization) = match &args.model {
        Some(path) => {
            let model = ReducedModel::load(path)?;
            loop_with_model(&model, &traj, &args, energy)?
        }
        None => {
            let mut config = CyclicConfig::new(0, args.harmonics);
            config.rank = args.rank.selection(&traj);
            config.include_constant = args.include_constant;
            config.weights = SolverWeights::new(args.w_red, args.w_u)?;
            config.energy = energy;
            let sol = solve_cyclic(&traj, &config)?;
            (sol.record(true), sol.processing_seconds, sol.optimization_seconds)
        }
    };
    let report = cyclic_solver::evaluate(&record, &traj)?;
    let metrics: &SolveMetrics = &record.metrics;
    let row = LoopRow {
        input: args.input.display().to_string(),
        n: record.n,
        r: record.r,
        period: record.basis.period,
        m: record.basis.m(),
        processing_seconds: processing,
        optimization_seconds: optimization,
        closure_residual: metrics.closure_residual,
        fidelity_cost: metrics.fidelity_cost,
        control_cost: metrics.control_cost,
        kkt_residual: metrics.kkt_residual,
        raw_seam_gap: report.raw_seam_gap,
        loop_seam_gap: report.edited_seam_gap,
    };
    if args.no_frames {
        record.frames = None;
    }
    record.save(&args.out)?;

    match args.metrics {
        MetricsFormat::Text => println!("{}", row.text()),
        MetricsFormat::Json => println!("{}", serde_json::to_string(&row).expect("row serializes")),
    }
    if let Some(csv) = &args.csv {
        let fresh = !csv.exists() || fs::metadata(csv).map(|m| m.len() == 0).unwrap_or(true);
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        text.push_str(&row.csv());
        text.push('\n');
        use std::io::Write;
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> CmdResult {
    let record = LoopRecord::load(&args.cycle)?;
    let input = Trajectory::load(&args.input)?;
    let report = cyclic_solver::evaluate(&record, &input)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn run_serve(args: ServeArgs) -> CmdResult {
    if let Some(dir) = &args.model_dir {
        if !dir.is_dir() {
            return Err(anyhow::anyhow!("model directory {} does not exist", dir.display()).into());
        }
    }
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    let addr = SocketAddr::new(args.host, args.port);
    let config = koopcycle_service::ServiceConfig {
        model_dir: args.model_dir,
    };
    runtime
        .block_on(koopcycle_service::serve(config, addr, args.snapshot_dir))
        .map_err(|e| Failure {
            code: EXIT_FAILURE,
            error: anyhow::Error::from(e).context(format!("serving on {addr}")),
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Fit(a) => run_fit(a),
        Command::Loop(a) => run_loop(a),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
