mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use distrdd::data::{load_csv, validate, ColumnMap, DEFAULT_FIRST_STAGE_WARNING};
use distrdd::locfit::{default_y_grid, BandwidthRule, Kernel};
use distrdd::pipeline::EstimationOptions;
use distrdd::quantiles::{default_u_grid, interior_u_grid};
use distrdd::report::{analyze, InferenceOptions, IntervalChoice, Stage};
use distrdd::simlab::{run_mc, DgpId, McConfig, McMethod, STUDY_BANDWIDTH};
use distrdd::{Dataset, Design, Error};

use output::{write_curves, write_error, write_json, write_lmoments, Failure, SimulationManifest};

#[derive(Parser, Debug)]
#[command(name = "distrdd", version, about = "Distributional effects at discontinuities and kinks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sharp regression discontinuity.
    Rdd(EstimateArgs),
    /// Fuzzy regression discontinuity (needs a treatment indicator).
    FuzzyRdd(EstimateArgs),
    /// Sharp regression kink (treatment column or declared slopes).
    Kink(KinkArgs),
    /// Fuzzy regression kink (needs a continuous treatment column).
    FuzzyKink(EstimateArgs),
    /// Monte Carlo coverage study on a built-in design.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "x")]
    x_col: String,
    #[arg(long, default_value = "a")]
    a_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long)]
    t_col: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    cutoff: f64,
    /// Local polynomial order.
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value = "triangular")]
    kernel: Kernel,
    /// Fixed bandwidth.
    #[arg(long, conflicts_with = "bandwidth_rule")]
    bandwidth: Option<f64>,
    /// `sd[:m]` for `m sd(x) n^(-1/5)` or `const:c` for `c n^(-1/5)`.
    #[arg(long, default_value = "sd")]
    bandwidth_rule: BandwidthRule,
    /// Quantile trimming level.
    #[arg(long, default_value_t = 0.0)]
    trim: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Bootstrap replications.
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    /// Draws for the eigenvalue test.
    #[arg(long, default_value_t = 100_000)]
    mc_draws: usize,
    #[arg(long, default_value = "conservative")]
    interval: IntervalChoice,
    /// Number of L-moment shares reported before the tail.
    #[arg(long, default_value_t = 10)]
    lmoments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Constant in the conservative interval; outcome variance by default.
    #[arg(long)]
    c_const: Option<f64>,
    #[arg(long)]
    no_bias_correction: bool,
    #[arg(long, default_value_t = 401)]
    y_grid_points: usize,
    /// Interior u-grid size; 1999 points by default.
    #[arg(long)]
    u_grid_points: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct KinkArgs {
    #[command(flatten)]
    common: EstimateArgs,
    /// Declared benefit slope left of the cutoff.
    #[arg(long, requires = "right_slope")]
    left_slope: Option<f64>,
    /// Declared benefit slope right of the cutoff.
    #[arg(long, requires = "left_slope")]
    right_slope: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    #[arg(long, default_value = "additive")]
    dgp: DgpId,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    n: Vec<usize>,
    /// Comma-separated trimming levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    gamma: Vec<f64>,
    /// Comma-separated methods: band, conservative, conservative-test.
    #[arg(long, value_delimiter = ',', default_value = "band,conservative")]
    methods: Vec<McMethod>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = STUDY_BANDWIDTH)]
    bandwidth_rule: BandwidthRule,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value = "triangular")]
    kernel: Kernel,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load(args: &EstimateArgs, design: Design) -> Result<Dataset, Failure> {
    let map = ColumnMap {
        x: args.x_col.clone(),
        y: args.y_col.clone(),
        a: Some(args.a_col.clone()),
        t: args.t_col.clone(),
    };
    load_csv(&args.input, &map, design, args.cutoff).map_err(Failure::at(Stage::Ingestion))
}

fn estimation_options(args: &EstimateArgs, d: &Dataset) -> EstimationOptions {
    let mut opts = EstimationOptions::for_dataset(d);
    opts.fit.order = args.order;
    opts.fit.kernel = args.kernel;
    opts.fit.bandwidth = args
        .bandwidth
        .unwrap_or_else(|| args.bandwidth_rule.bandwidth(d));
    opts.fit.trim = args.trim;
    opts.fit.y_grid = default_y_grid(d, args.y_grid_points);
    if let Some(m) = args.u_grid_points {
        opts.fit.u_grid = interior_u_grid(m);
    } else {
        opts.fit.u_grid = default_u_grid();
    }
    opts.lmoment_order = args.lmoments;
    opts.bias_correction = !args.no_bias_correction;
    opts
}

fn inference_options(args: &EstimateArgs) -> InferenceOptions {
    InferenceOptions {
        alpha: args.alpha,
        replications: args.boot,
        mc_draws: args.mc_draws,
        seed: args.seed,
        interval: args.interval,
        c_const: args.c_const,
        ..InferenceOptions::default()
    }
}

fn run_estimate(args: &EstimateArgs, d: Dataset) -> Result<(), Failure> {
    let mut warnings = validate(&d, DEFAULT_FIRST_STAGE_WARNING).warnings;
    let est = estimation_options(args, &d);
    let inf = inference_options(args);
    let mut report = analyze(&d, &est, &inf).map_err(Failure::from)?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = &args.out;
    let effect_label = if d.design().is_kink() { "dq_prime" } else { "dq" };
    write_json(&out.join("summary.json"), &report).map_err(Failure::at_output)?;
    write_curves(&out.join("curves.csv"), &report.curves, effect_label).map_err(Failure::at_output)?;
    write_lmoments(&out.join("lmoments.csv"), &report.lmoments).map_err(Failure::at_output)?;
    println!(
        "psi = {:.6}  tau = {:.6}  n = {}  h = {:.6}",
        report.summary.psi(),
        report.summary.tau(),
        report.n,
        report.config.bandwidth
    );
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let cfg = McConfig {
        dgp: args.dgp,
        tau: args.tau,
        n_list: args.n.clone(),
        gamma_list: args.gamma.clone(),
        methods: args.methods.clone(),
        reps: args.reps,
        seed: args.seed,
        bootstrap_replications: args.boot,
        alpha: args.alpha,
        bandwidth: args.bandwidth_rule,
        order: args.order,
        kernel: args.kernel,
    };
    let start = Instant::now();
    let report = run_mc(&cfg).map_err(Failure::at_simulation)?;
    let runtime = start.elapsed().as_secs_f64();
    report
        .write_csv(args.out.join("mc_report.csv"))
        .map_err(Failure::at_output)?;
    let manifest = SimulationManifest::new(&cfg, runtime);
    write_json(&args.out.join("manifest.json"), &manifest).map_err(Failure::at_output)?;
    println!("{} rows written in {runtime:.1}s", report.rows.len());
    Ok(())
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::at_output(Error::Io(e)))
}

fn dispatch(cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Rdd(a) => run_estimate(a, load(a, Design::SharpRdd)?),
        Command::FuzzyRdd(a) => run_estimate(a, load(a, Design::FuzzyRdd)?),
        Command::FuzzyKink(a) => {
            if a.t_col.is_none() {
                return Err(Failure::at(Stage::Ingestion)(Error::MissingColumn(
                    "treatment level (--t-col)".into(),
                )));
            }
            run_estimate(a, load(a, Design::FuzzyKink)?)
        }
        Command::Kink(k) => {
            let a = &k.common;
            let d = match (k.left_slope, k.right_slope) {
                (Some(l), Some(r)) => load(a, Design::SharpRdd)?
                    .declare_benefit_slopes(l, r)
                    .map_err(Failure::at(Stage::Ingestion))?,
                _ => load(a, Design::SharpKink)?,
            };
            run_estimate(a, d)
        }
        Command::Simulate(s) => run_simulate(s),
    }
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Rdd(a) | Command::FuzzyRdd(a) | Command::FuzzyKink(a) => &a.out,
        Command::Kink(k) => &k.common.out,
        Command::Simulate(s) => &s.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = out_dir(&cli.command);
    let result = prepare_out(out).and_then(|_| dispatch(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error ({} stage): {}", f.stage, f.message);
            if let Err(e) = write_error(&out.join("error.json"), &f) {
                eprintln!("error: could not write error.json: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
