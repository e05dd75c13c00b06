//! Batch command-line interface: simulate synthetic sequences, estimate
//! diffusivity, compare against naive gradient pipelines, and validate an
//! estimate by forward prediction. All outputs are machine-readable (CSV,
//! PGM, key=value reports).
//!
//! Exit codes: 0 success, 2 parameter/validation error, 3 data/format error,
//! 4 estimation impossible.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{deviation_kde, prediction_error};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_baseline_sequence, estimate_sequence, estimate_windowed, rtc_field, Aggregation,
    BaselineVariant, EpsDen, EstimateReport, EstimatorConfig, LaplacianMode, WindowSpec,
};
use crate::export::{write_field_csv, write_kde_csv, write_pgm, write_sweep_csv};
use crate::field::FrameStack;
use crate::io::{ingest_csv_dir, read_stack, write_stack};
use crate::simulator::{predict, simulate, Boundary, Diffusivity, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "anra",
    version,
    about = "Thermal diffusivity estimation from thermographic frame sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write the synthetic frame stack.
    Simulate(SimulateArgs),
    /// Estimate diffusivity from a frame stack.
    Estimate(EstimateArgs),
    /// Run the estimator and both naive comparators, emitting deviation and
    /// density CSVs.
    Compare(CompareArgs),
    /// Forward-predict from the first frame and report the deviation.
    Validate(ValidateArgs),
    /// Convert a directory of per-frame CSV rasters into a stack file.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (key=value lines).
    #[arg(long)]
    scenario: PathBuf,
    /// Output stack path; a config echo is written next to it as `.cfg`.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct FilterArgs {
    /// Backward temporal kernel length (4..=8).
    #[arg(long, default_value_t = 8)]
    filter_temporal_len: usize,
    /// Spatial kernel length (5|7|9 direct, 5|7|9|11 composed).
    #[arg(long, default_value_t = 11)]
    filter_spatial_len: usize,
    /// Laplacian assembly: composed first derivatives or a direct
    /// second-derivative stencil.
    #[arg(long, default_value = "composed", value_parser = parse_laplacian)]
    laplacian_mode: LaplacianMode,
    /// Confidence quantile in (0,1).
    #[arg(long, default_value_t = 0.9)]
    quantile: f64,
    /// Denominator guard: `rel:F` (F x median |Laplacian|) or `abs:V`.
    #[arg(long, default_value = "rel:0.75", value_parser = parse_eps)]
    eps_den: EpsDen,
    /// Aggregate per-frame estimates by retained-mass weighting or plain mean.
    #[arg(long, default_value = "mass-weighted", value_parser = parse_aggregation)]
    aggregation: Aggregation,
}

fn parse_laplacian(s: &str) -> std::result::Result<LaplacianMode, String> {
    match s {
        "composed" => Ok(LaplacianMode::Composed),
        "direct" => Ok(LaplacianMode::Direct),
        other => Err(format!("unknown laplacian mode '{other}' (composed|direct)")),
    }
}

fn parse_eps(s: &str) -> std::result::Result<EpsDen, String> {
    if let Some(v) = s.strip_prefix("rel:") {
        return v
            .parse::<f64>()
            .map(EpsDen::RelativeToMedian)
            .map_err(|e| e.to_string());
    }
    if let Some(v) = s.strip_prefix("abs:") {
        return v.parse::<f64>().map(EpsDen::Absolute).map_err(|e| e.to_string());
    }
    s.parse::<f64>().map(EpsDen::Absolute).map_err(|e| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "mass-weighted" => Ok(Aggregation::MassWeighted),
        "plain-mean" => Ok(Aggregation::PlainMean),
        other => Err(format!("unknown aggregation '{other}' (mass-weighted|plain-mean)")),
    }
}

impl FilterArgs {
    fn to_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            temporal_len: self.filter_temporal_len,
            spatial_len: self.filter_spatial_len,
            laplacian: self.laplacian_mode,
            quantile: self.quantile,
            eps_den: self.eps_den,
            aggregation: self.aggregation,
            ..EstimatorConfig::default()
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Input stack file.
    #[arg(long)]
    stack: PathBuf,
    #[command(flatten)]
    filters: FilterArgs,
    /// Also run the windowed spatial estimator (HxW:S, e.g. 32x32:8).
    #[arg(long, value_parser = WindowSpec::parse)]
    windowed: Option<WindowSpec>,
    /// Dump the attention field of every admissible frame as PGM.
    #[arg(long)]
    rtc_dump: bool,
    /// Output directory for CSV/PGM artifacts.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Input stack file (alternative to --scenario).
    #[arg(long, conflicts_with = "scenario")]
    stack: Option<PathBuf>,
    /// Scenario file to simulate (required for --seed-sweep).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Ground-truth diffusivity; defaults to the scenario's `a`.
    #[arg(long)]
    a_true: Option<f64>,
    /// Rerun the scenario over this many consecutive noise seeds and build
    /// the densities from per-seed estimates instead of per-frame ones.
    #[arg(long, default_value_t = 1)]
    seed_sweep: usize,
    /// Base seed for the sweep; defaults to the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    filters: FilterArgs,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Observed stack file.
    #[arg(long)]
    stack: PathBuf,
    /// Diffusivity estimate to validate.
    #[arg(long)]
    a_hat: f64,
    /// Prediction horizon in seconds (at most the stack duration).
    #[arg(long)]
    horizon_s: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of per-frame CSV rasters (lexicographic order).
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    dx: f64,
    #[arg(long)]
    dy: f64,
    #[arg(long)]
    dt: f64,
    /// Output stack path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Ingest(args) => cmd_ingest(args),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)?;
    ScenarioConfig::from_key_values(&text)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let stack = simulate(&cfg)?;
    write_stack(&stack, &args.out)?;
    let sidecar = args.out.with_extension(format!(
        "{}.cfg",
        args.out.extension().and_then(|e| e.to_str()).unwrap_or("stack")
    ));
    fs::write(&sidecar, cfg.echo())?;
    println!("frames={}", stack.len());
    println!("stack={}", args.out.display());
    println!("config_echo={}", sidecar.display());
    Ok(())
}

fn print_report(report: &EstimateReport) {
    print!("{}", report.to_key_values());
    if !report.feasible {
        println!("warning=estimate is non-positive (physically infeasible)");
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let cfg = args.filters.to_config();
    cfg.validate()?;
    let stack = read_stack(&args.stack)?;
    fs::create_dir_all(&args.out_dir)?;

    let report = estimate_sequence(&stack, &cfg)?;
    print_report(&report);
    fs::write(args.out_dir.join("per_frame.csv"), report.per_frame_csv())?;

    if let Some(win) = args.windowed {
        let field = estimate_windowed(&stack, &win, &cfg)?;
        write_field_csv(&field.field, &args.out_dir.join("diffusivity_field.csv"))?;
        write_pgm(&field.field, &args.out_dir.join("diffusivity_field.pgm"))?;
        println!(
            "windowed_field={}",
            args.out_dir.join("diffusivity_field.csv").display()
        );
    }
    if args.rtc_dump {
        let history = cfg.history()?;
        for k in history..stack.len() {
            let rtc = rtc_field(&stack, k, &cfg)?;
            write_pgm(&rtc.weights, &args.out_dir.join(format!("rtc_{k:04}.pgm")))?;
        }
        println!("rtc_frames={}", stack.len() - cfg.history()?);
    }
    Ok(())
}

fn method_slug(m: crate::estimator::Method) -> &'static str {
    match m {
        crate::estimator::Method::Anra => "anra",
        crate::estimator::Method::BackwardLog => "backward_log",
        crate::estimator::Method::BackwardLogSmooth => "backward_log_smooth",
    }
}

fn run_three_methods(stack: &FrameStack, cfg: &EstimatorConfig) -> Result<[EstimateReport; 3]> {
    Ok([
        estimate_sequence(stack, cfg)?,
        estimate_baseline_sequence(stack, BaselineVariant::BackwardLog, cfg)?,
        estimate_baseline_sequence(stack, BaselineVariant::BackwardLogSmooth, cfg)?,
    ])
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = args.filters.to_config();
    cfg.validate()?;
    fs::create_dir_all(&args.out_dir)?;

    if args.seed_sweep == 0 {
        return Err(Error::Parameter("--seed-sweep must be at least 1".into()));
    }

    let (stacks, a_true): (Vec<FrameStack>, f64) = if args.seed_sweep > 1 {
        let path = args.scenario.as_ref().ok_or_else(|| {
            Error::Parameter("--seed-sweep needs --scenario to regenerate noise".into())
        })?;
        let mut scen = load_scenario(path)?;
        let a = match (args.a_true, &scen.diffusivity) {
            (Some(a), _) => a,
            (None, Diffusivity::Scalar(a)) => *a,
            (None, Diffusivity::Field(_)) => {
                return Err(Error::Parameter("--a-true required for field scenarios".into()))
            }
        };
        let base = args.seed.unwrap_or(scen.seed);
        let mut stacks = Vec::with_capacity(args.seed_sweep);
        for i in 0..args.seed_sweep {
            scen.seed = base + i as u64;
            stacks.push(simulate(&scen)?);
        }
        (stacks, a)
    } else {
        let stack = match (&args.stack, &args.scenario) {
            (Some(p), _) => read_stack(p)?,
            (None, Some(p)) => {
                let mut scen = load_scenario(p)?;
                if let Some(seed) = args.seed {
                    scen.seed = seed;
                }
                simulate(&scen)?
            }
            (None, None) => {
                return Err(Error::Parameter("compare needs --stack or --scenario".into()))
            }
        };
        let a = match (args.a_true, &args.scenario) {
            (Some(a), _) => a,
            (None, Some(p)) => match load_scenario(p)?.diffusivity {
                Diffusivity::Scalar(a) => a,
                Diffusivity::Field(_) => {
                    return Err(Error::Parameter("--a-true required for field scenarios".into()))
                }
            },
            (None, None) => return Err(Error::Parameter("compare needs --a-true".into())),
        };
        (vec![stack], a)
    };

    // per-method estimate samples: per-frame for a single stack, per-seed
    // aggregates for a sweep
    let mut samples: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut aggregates: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut methods = [crate::estimator::Method::Anra; 3];
    for stack in &stacks {
        let reports = run_three_methods(stack, &cfg)?;
        for (i, r) in reports.iter().enumerate() {
            methods[i] = r.method;
            aggregates[i].push(r.a_hat);
            if args.seed_sweep > 1 {
                samples[i].push(r.a_hat);
            } else {
                samples[i].extend(r.per_frame_estimates());
            }
        }
    }

    for i in 0..3 {
        let slug = method_slug(methods[i]);
        let agg_mean = aggregates[i].iter().sum::<f64>() / aggregates[i].len() as f64;
        println!("method={} a_hat={:.6} deviation={:.6}", methods[i].name(), agg_mean, agg_mean - a_true);

        let rows: Vec<(f64, f64)> = samples[i]
            .iter()
            .enumerate()
            .map(|(k, v)| (k as f64, v - a_true))
            .collect();
        write_sweep_csv(
            &rows,
            "sample,deviation",
            &args.out_dir.join(format!("deviations_{slug}.csv")),
        )?;
        if samples[i].len() >= 2 {
            let kde = deviation_kde(&samples[i], a_true, None)?;
            write_kde_csv(&kde, &args.out_dir.join(format!("kde_{slug}.csv")))?;
        }
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let stack = read_stack(&args.stack)?;
    fs::create_dir_all(&args.out_dir)?;
    let dt = stack.grid().dt;
    let duration = stack.duration();
    if !(args.horizon_s > 0.0) {
        return Err(Error::Parameter("horizon must be positive".into()));
    }
    if args.horizon_s > duration + 1e-9 {
        return Err(Error::Parameter(format!(
            "horizon {}s exceeds stack duration {duration}s",
            args.horizon_s
        )));
    }
    let horizon_idx = (args.horizon_s / dt).round() as usize;
    let truncated = FrameStack::new(
        *stack.grid(),
        stack.frames()[..=horizon_idx].to_vec(),
    )?;

    let a = Diffusivity::Scalar(args.a_hat);
    let err = prediction_error(&truncated, &a, Boundary::Insulated)?;
    let predicted = predict(stack.frame(0), &a, args.horizon_s, Boundary::Insulated, None)?;
    let observed_at = stack.frame(horizon_idx);
    let predicted_at = predicted.frame(predicted.len() - 1);
    let deviation = observed_at.subtract(predicted_at)?;

    write_pgm(observed_at, &args.out_dir.join("observed.pgm"))?;
    write_pgm(predicted_at, &args.out_dir.join("predicted.pgm"))?;
    write_pgm(&deviation, &args.out_dir.join("deviation.pgm"))?;
    write_field_csv(&deviation, &args.out_dir.join("deviation.csv"))?;

    println!("a_hat={}", args.a_hat);
    println!("horizon_s={}", args.horizon_s);
    println!("frames_compared={}", err.frames);
    println!("error_raw={:.12e}", err.raw);
    println!("error_normalized={:.12e}", err.normalized);
    println!("deviation_norm_sq={:.12e}", deviation.norm_sq());
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let stack = ingest_csv_dir(&args.dir, args.dx, args.dy, args.dt)?;
    write_stack(&stack, &args.out)?;
    println!("frames={}", stack.len());
    println!("width={}", stack.grid().width);
    println!("height={}", stack.grid().height);
    println!("stack={}", args.out.display());
    Ok(())
}
