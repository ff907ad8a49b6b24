//! Command-line front end: argument definitions, the analysis pipeline, and
//! stage-specific exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::boundedness::{
    assemble_test_matrix, ray_probe, reference_directions, RayProbeReport, VerdictKind, VerdictReport,
};
use crate::controller::{sweep_grid, sweep_slice, Sweep};
use crate::error::CbfError;
use crate::model::{load_model, BarrierSpec, SpecDocument, SystemModel, SPEC_SCHEMA_VERSION};
use crate::sim::{simulate, StepControl};
use crate::zset::{locate_zset, probe_weakness, StrengthReport, ZPoint, DEFAULT_COLLAR_SCALES};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (spec schema 1)");
pub const DEFAULT_SEED: u64 = 42;
pub const LIPSCHITZ_NOTE: &str = "Z is empty: min-norm controller locally Lipschitz on C";

#[derive(Debug, Parser)]
#[command(name = "cbf-minnorm", version = VERSION, about = "Analyze min-norm CBF controllers")]
pub struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads for sweeps and multistarts (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: strength probe, Z set, verdicts, ray probes, sweep.
    Analyze(AnalyzeArgs),
    /// Grid sweep of the controller to CSV.
    Sweep(SweepArgs),
    /// Locate discontinuity points.
    Zset(ZsetArgs),
    /// Test matrix and boundedness verdict at one point.
    TestPoint(TestPointArgs),
    /// Sample the controller magnitude along a ray.
    Probe(ProbeArgs),
    /// Closed-loop simulation to CSV plus an events sidecar.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SpecArg {
    /// System spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 201)]
    pub resolution: usize,
    #[arg(long, default_value_t = 64)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub samples_per_scale: usize,
    #[arg(long, default_value_t = 0.01)]
    pub t_max: f64,
    #[arg(long, default_value_t = 12)]
    pub probe_samples: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, default_value_t = 201)]
    pub resolution: usize,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZsetArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, default_value_t = 64)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestPointArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    /// Comma-separated state, e.g. `1,0`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub x: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub x: Vec<f64>,
    /// Unit direction.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub v: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub t_max: f64,
    #[arg(long, default_value_t = 12)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SpecArg,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub x0: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub t_final: f64,
    /// Fixed RK4 step.
    #[arg(long, default_value_t = crate::sim::DEFAULT_DT, conflicts_with = "adaptive_tol")]
    pub dt: f64,
    /// Use the adaptive Dormand–Prince pair with this tolerance.
    #[arg(long)]
    pub adaptive_tol: Option<f64>,
    #[arg(long)]
    pub u_cap: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Events JSON (default: `<out>.events.json` when --out is given).
    #[arg(long)]
    pub events: Option<PathBuf>,
}

/// Pipeline stage, carried by errors to pick the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    SpecLoad,
    Sweep,
    ZSet,
    Verdict,
    Probe,
    Simulate,
    Output,
}

impl Stage {
    pub fn exit_code(self) -> u8 {
        match self {
            Stage::SpecLoad => 3,
            Stage::Sweep => 4,
            Stage::ZSet => 5,
            Stage::Verdict => 6,
            Stage::Probe => 7,
            Stage::Simulate => 8,
            Stage::Output => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::SpecLoad => "spec load",
            Stage::Sweep => "sweep",
            Stage::ZSet => "z-set analysis",
            Stage::Verdict => "boundedness test",
            Stage::Probe => "ray probe",
            Stage::Simulate => "simulation",
            Stage::Output => "output",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} failed: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: CbfError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T, E: Into<CbfError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutcome {
    pub direction: Vec<f64>,
    pub report: Option<RayProbeReport>,
    /// Set when the formula is undefined along the whole ray.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointAnalysis {
    pub zpoint: ZPoint,
    pub verdict: VerdictReport,
    pub certificate_probe: Option<ProbeOutcome>,
    pub reference_probes: Vec<ProbeOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSettings {
    pub seed: u64,
    pub resolution: usize,
    pub seeds: usize,
    pub tol: f64,
    pub collar_scales: Vec<f64>,
    pub samples_per_scale: usize,
    pub t_max: f64,
    pub probe_samples: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            seed: DEFAULT_SEED,
            resolution: 201,
            seeds: 64,
            tol: 1e-10,
            collar_scales: DEFAULT_COLLAR_SCALES.to_vec(),
            samples_per_scale: 200,
            t_max: 0.01,
            probe_samples: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisBundle {
    pub toolkit_version: &'static str,
    pub spec_schema: u32,
    pub spec: SpecDocument,
    pub settings: AnalysisSettings,
    pub strength: StrengthReport,
    pub zpoints: Vec<ZPoint>,
    pub points: Vec<PointAnalysis>,
    pub notes: Vec<String>,
    /// Relative to the bundle's directory.
    pub sweep_csv: String,
}

fn probe_outcome(
    model: &SystemModel,
    barrier: &BarrierSpec,
    x_bar: &[f64],
    v: Vec<f64>,
    settings: &AnalysisSettings,
) -> Result<ProbeOutcome, StageError> {
    match ray_probe(model, barrier, x_bar, &v, settings.t_max, settings.probe_samples) {
        Ok(r) => Ok(ProbeOutcome {
            direction: v,
            report: Some(r),
            error: None,
        }),
        Err(e @ CbfError::AllUndefined) => Ok(ProbeOutcome {
            direction: v,
            report: None,
            error: Some(e.to_string()),
        }),
        Err(e) => Err(e).at(Stage::Probe),
    }
}

/// Strength probe, Z location, and per-point verdicts with ray probes. The
/// sweep is left to the caller.
pub fn analyze(
    doc: &SpecDocument,
    model: &SystemModel,
    barrier: &BarrierSpec,
    settings: AnalysisSettings,
) -> Result<AnalysisBundle, StageError> {
    let strength = probe_weakness(
        model,
        barrier,
        &settings.collar_scales,
        settings.samples_per_scale,
        settings.seed,
    )
    .at(Stage::ZSet)?;
    let zpoints = locate_zset(model, barrier, settings.seeds, settings.tol).at(Stage::ZSet)?;
    let mut notes = Vec::new();
    if zpoints.is_empty() {
        notes.push(LIPSCHITZ_NOTE.to_string());
    }
    let mut points = Vec::with_capacity(zpoints.len());
    for z in &zpoints {
        let t = assemble_test_matrix(model, barrier, &z.x).at(Stage::Verdict)?;
        let verdict = VerdictReport::new(&t);
        let certificate_probe = match &verdict.certificate_v {
            Some(v) => Some(probe_outcome(model, barrier, &z.x, v.clone(), &settings)?),
            None => None,
        };
        let reference_probes = reference_directions(&t, verdict.certificate_v.as_deref())
            .into_iter()
            .map(|v| probe_outcome(model, barrier, &z.x, v, &settings))
            .collect::<Result<Vec<_>, _>>()?;
        if verdict.kind == VerdictKind::Indeterminate {
            notes.push(format!("verdict at {:?} is indeterminate", z.x));
        }
        points.push(PointAnalysis {
            zpoint: z.clone(),
            verdict,
            certificate_probe,
            reference_probes,
        });
    }
    Ok(AnalysisBundle {
        toolkit_version: env!("CARGO_PKG_VERSION"),
        spec_schema: SPEC_SCHEMA_VERSION,
        spec: doc.clone(),
        settings,
        strength,
        zpoints,
        points,
        notes,
        sweep_csv: "sweep.csv".into(),
    })
}

/// The full grid for planar systems, otherwise the `(x1, x2)` slice through
/// the center of the domain box.
pub fn default_sweep(model: &SystemModel, barrier: &BarrierSpec, resolution: usize) -> crate::Result<Sweep> {
    if barrier.n() <= 2 {
        sweep_grid(model, barrier, resolution)
    } else {
        let base: Vec<f64> = barrier.domain_box().iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect();
        sweep_slice(model, barrier, &[0, 1], resolution, &base)
    }
}

fn load(spec: &Path) -> Result<(SpecDocument, SystemModel, BarrierSpec), StageError> {
    let doc = SpecDocument::from_path(spec).at(Stage::SpecLoad)?;
    let (model, barrier) = load_model(&doc).at(Stage::SpecLoad)?;
    Ok((doc, model, barrier))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, StageError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CbfError::Schema(e.to_string()))
        .at(Stage::Output)?;
    s.push('\n');
    Ok(s)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), StageError> {
    match out {
        Some(p) => fs::write(p, bytes).at(Stage::Output),
        None => std::io::stdout().lock().write_all(bytes).at(Stage::Output),
    }
}

fn sweep_bytes(model: &SystemModel, barrier: &BarrierSpec, resolution: usize) -> Result<Vec<u8>, StageError> {
    let sweep = default_sweep(model, barrier, resolution).at(Stage::Sweep)?;
    let violations = sweep.violations().count();
    if violations > 0 {
        log::warn!("{violations} sweep cells violate the CBF condition inside the safe set");
    }
    let mut buf = Vec::new();
    sweep.write_csv(barrier.n(), model.m(), &mut buf).at(Stage::Output)?;
    Ok(buf)
}

pub fn execute(cli: &Cli) -> Result<(), StageError> {
    match &cli.command {
        Command::Analyze(a) => {
            let (doc, model, barrier) = load(&a.spec.spec)?;
            let settings = AnalysisSettings {
                seed: cli.seed,
                resolution: a.resolution,
                seeds: a.seeds,
                tol: a.tol,
                collar_scales: DEFAULT_COLLAR_SCALES.to_vec(),
                samples_per_scale: a.samples_per_scale,
                t_max: a.t_max,
                probe_samples: a.probe_samples,
            };
            let bundle = analyze(&doc, &model, &barrier, settings)?;
            let csv = sweep_bytes(&model, &barrier, a.resolution)?;
            fs::create_dir_all(&a.out_dir).at(Stage::Output)?;
            fs::write(a.out_dir.join(&bundle.sweep_csv), csv).at(Stage::Output)?;
            fs::write(a.out_dir.join("bundle.json"), to_json(&bundle)?).at(Stage::Output)?;
            log::info!("{} Z points, bundle written to {}", bundle.zpoints.len(), a.out_dir.display());
        }
        Command::Sweep(a) => {
            let (_, model, barrier) = load(&a.spec.spec)?;
            emit(a.out.as_deref(), &sweep_bytes(&model, &barrier, a.resolution)?)?;
        }
        Command::Zset(a) => {
            let (_, model, barrier) = load(&a.spec.spec)?;
            let z = locate_zset(&model, &barrier, a.seeds, a.tol).at(Stage::ZSet)?;
            emit(a.out.as_deref(), to_json(&z)?.as_bytes())?;
        }
        Command::TestPoint(a) => {
            let (_, model, barrier) = load(&a.spec.spec)?;
            let t = assemble_test_matrix(&model, &barrier, &a.x).at(Stage::Verdict)?;
            emit(a.out.as_deref(), to_json(&VerdictReport::new(&t))?.as_bytes())?;
        }
        Command::Probe(a) => {
            let (_, model, barrier) = load(&a.spec.spec)?;
            let r = ray_probe(&model, &barrier, &a.x, &a.v, a.t_max, a.samples).at(Stage::Probe)?;
            emit(a.out.as_deref(), to_json(&r)?.as_bytes())?;
        }
        Command::Simulate(a) => {
            let (_, model, barrier) = load(&a.spec.spec)?;
            let step = match a.adaptive_tol {
                Some(tol) => StepControl::Adaptive(tol),
                None => StepControl::Fixed(a.dt),
            };
            let tr = simulate(&model, &barrier, &a.x0, a.t_final, step, a.u_cap).at(Stage::Simulate)?;
            let mut csv = Vec::new();
            tr.write_csv(&mut csv).at(Stage::Output)?;
            emit(a.out.as_deref(), &csv)?;
            let events_path = a.events.clone().or_else(|| {
                a.out.as_ref().map(|p| {
                    let mut s = p.clone().into_os_string();
                    s.push(".events.json");
                    PathBuf::from(s)
                })
            });
            if let Some(p) = events_path {
                fs::write(p, to_json(&tr.events)?).at(Stage::Output)?;
            }
        }
    }
    Ok(())
}

/// Parse arguments, configure logging and the worker pool, run, and map
/// failures to exit codes (2 for usage errors).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code())
        }
    }
}
