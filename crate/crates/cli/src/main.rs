use std::fs::File;
use std::fmt::Write as _;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ridgepoison::mnist::{self, MnistPoint, PixelScale};
use ridgepoison::report::{self, ReportKind};
use ridgepoison::resolvent::{self, CheckRow};
use ridgepoison::simulator::{Centering, TrialConfig, TriggerDirection};
use ridgepoison::sweep::{self, AxisMode, GridPoint, SeedScheme, SweepGrid, SweepRecord};
use ridgepoison::{theory, AspectRatio, ModelParams, SpectralPoint, TransformValues};

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "ridgepoison", version, about = "Backdoor-poisoned ridge regression: theory, simulation and sweeps")]
struct Cli {
    /// Worker threads; 0 lets rayon decide.
    #[arg(long, global = true, env = "RIDGEPOISON_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Evaluate the closed-form predictions at one point.
    Theory(TheoryArgs),
    /// Repeated synthetic trials at one point.
    Simulate(SimulateArgs),
    /// Parameter sweep over a grid.
    Sweep(SweepArgs),
    /// Monte Carlo checks of the spiked-resolvent equivalents.
    ResolventCheck(ResolventArgs),
    /// Pixel-patch backdoor on the MNIST 0-vs-1 task.
    Mnist(MnistArgs),
    /// SVG figures and aggregate CSV from a sweep or MNIST CSV.
    Report(ReportArgs),
    /// Repeat a run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PointArgs {
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    vnorm: f64,
}

impl PointArgs {
    fn params(&self) -> ridgepoison::Result<ModelParams> {
        ModelParams::new(self.c, self.lambda, self.theta, self.vnorm)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TheoryArgs {
    #[command(flatten)]
    point: PointArgs,
    /// Use the vanishing-regularisation limit (requires c < 1).
    #[arg(long)]
    ridgeless: bool,
    #[arg(long)]
    json: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Csv,
    JsonLines,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CenteringArg {
    Population,
    Empirical,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DirectionArg {
    FirstAxis,
    RandomUnit,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrialArgs {
    #[arg(long, value_enum, default_value_t = CenteringArg::Population)]
    centering: CenteringArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::FirstAxis)]
    direction: DirectionArg,
    /// Fresh triggered test points per trial for the Monte Carlo efficacy (0 disables).
    #[arg(long, default_value_t = 10_000)]
    m_test: usize,
    /// Score test points with the intercept included.
    #[arg(long)]
    include_intercept: bool,
    /// Fill `wall_time_ms`; makes output non-reproducible.
    #[arg(long)]
    timing: bool,
}

impl TrialArgs {
    fn config(&self) -> TrialConfig {
        TrialConfig {
            centering: match self.centering {
                CenteringArg::Population => Centering::Population,
                CenteringArg::Empirical => Centering::Empirical,
            },
            direction: match self.direction {
                DirectionArg::FirstAxis => TriggerDirection::FirstAxis,
                DirectionArg::RandomUnit => TriggerDirection::RandomUnit,
            },
            m_test: self.m_test,
            include_intercept: self.include_intercept,
            record_timing: self.timing,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct OutputArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SimulateArgs {
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value_t = 500)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Builtin {
    Table1,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    OneAtATime,
    Full,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SeedSchemeArg {
    Common,
    Independent,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = Builtin::Table1)]
    builtin: Builtin,
    /// Override the c axis (comma separated).
    #[arg(long, value_delimiter = ',')]
    c_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    theta_values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    vnorm_values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 500)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::OneAtATime)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SeedSchemeArg::Common)]
    seed_scheme: SeedSchemeArg,
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    output: OutputArgs,
}

impl SweepArgs {
    fn grid(&self) -> SweepGrid {
        let mut g = match self.builtin {
            Builtin::Table1 => SweepGrid::table1(),
        };
        let pick = |o: &Option<Vec<f64>>, d: Vec<f64>| o.clone().unwrap_or(d);
        g.c_values = pick(&self.c_values, g.c_values);
        g.lambda_values = pick(&self.lambda_values, g.lambda_values);
        g.theta_values = pick(&self.theta_values, g.theta_values);
        g.vnorm_values = pick(&self.vnorm_values, g.vnorm_values);
        g.p = self.p;
        g.trials = self.trials;
        g.master_seed = self.seed;
        g
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ResolventArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![100usize, 200, 400])]
    p: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    z: f64,
    /// Independent experiments per dimension.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ScaleArg {
    Raw,
    Unit,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct MnistArgs {
    /// Directory holding train-images-idx3-ubyte and train-labels-idx1-ubyte.
    #[arg(long, env = "MNIST_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Unit)]
    scale: ScaleArg,
    /// Base point; each list below is varied around it in turn.
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    vnorm: f64,
    #[arg(long, value_delimiter = ',')]
    theta_values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda_values: Vec<f64>,
    /// Aspect ratios realised through subsample sizes `round(784/c)`.
    #[arg(long, value_delimiter = ',')]
    c_values: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Poison digit 1 and relabel it as 0 instead of the default direction.
    #[arg(long)]
    swap_classes: bool,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 2])]
    patch_offset: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    patch_size: usize,
    #[command(flatten)]
    output: OutputArgs,
}

impl MnistArgs {
    fn points(&self) -> Vec<MnistPoint> {
        let base = MnistPoint { theta: self.theta, lambda: self.lambda, subsample_n: mnist::subsample_for_ratio(self.c) };
        let mut pts = vec![base];
        pts.extend(self.theta_values.iter().map(|&theta| MnistPoint { theta, ..base }));
        pts.extend(self.lambda_values.iter().map(|&lambda| MnistPoint { lambda, ..base }));
        pts.extend(self.c_values.iter().map(|&c| MnistPoint { subsample_n: mnist::subsample_for_ratio(c), ..base }));
        let mut unique: Vec<MnistPoint> = Vec::new();
        for p in pts {
            if !unique.contains(&p) {
                unique.push(p);
            }
        }
        unique
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum KindArg {
    Mu,
    Sigma,
    Eta,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AxisArg {
    C,
    Lambda,
    Theta,
    Vnorm,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Mu)]
    kind: KindArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![AxisArg::Theta, AxisArg::C, AxisArg::Lambda])]
    axis: Vec<AxisArg>,
    /// Base point the panels vary around.
    #[command(flatten)]
    point: PointArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct RerunArgs {
    manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    master_seed: u64,
    command: Command,
}

impl Command {
    fn master_seed(&self) -> u64 {
        match self {
            Command::Simulate(a) => a.seed,
            Command::Sweep(a) => a.seed,
            Command::ResolventCheck(a) => a.seed,
            Command::Mnist(a) => a.seed,
            _ => 0,
        }
    }

    fn set_out(&mut self, dir: PathBuf) {
        match self {
            Command::Simulate(a) => a.output.out = dir,
            Command::Sweep(a) => a.output.out = dir,
            Command::ResolventCheck(a) => a.output.out = dir,
            Command::Mnist(a) => a.output.out = dir,
            Command::Report(a) => a.out = dir,
            Command::Theory(_) | Command::Rerun(_) => {}
        }
    }
}

fn write_manifest(dir: &Path, command: &Command) -> Result<()> {
    let m = Manifest { version: env!("CARGO_PKG_VERSION").to_string(), master_seed: command.master_seed(), command: command.clone() };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Write primary rows and the `_agg` CSV; returns the number of error rows.
fn write_records(output: &OutputArgs, stem: &str, records: &[SweepRecord]) -> Result<usize> {
    std::fs::create_dir_all(&output.out).with_context(|| format!("creating {}", output.out.display()))?;
    let primary = match output.format {
        Format::Csv => output.out.join(format!("{stem}.csv")),
        Format::JsonLines => output.out.join(format!("{stem}.jsonl")),
    };
    let file = BufWriter::new(File::create(&primary).with_context(|| format!("creating {}", primary.display()))?);
    match output.format {
        Format::Csv => sweep::write_records_csv(file, records)?,
        Format::JsonLines => sweep::write_json_lines(file, records)?,
    }
    let errors = records.iter().filter(|r| !r.is_ok()).count();
    if errors < records.len() {
        let agg = sweep::aggregate(&records.iter().filter(|r| r.is_ok()).cloned().collect::<Vec<_>>())?;
        let path = output.out.join(format!("{stem}_agg.csv"));
        sweep::write_csv(BufWriter::new(File::create(&path)?), &agg)?;
    }
    log::info!("wrote {} rows to {}", records.len(), primary.display());
    Ok(errors)
}

fn cmd_theory(args: &TheoryArgs) -> Result<()> {
    let params = args.point.params()?;
    let pred = if args.ridgeless { theory::predict_ridgeless(&params)? } else { theory::predict(&params)? };
    let transforms = if args.ridgeless {
        None
    } else {
        Some(TransformValues::at(AspectRatio::new(params.c)?, SpectralPoint::from_lambda(params.lambda)?)?)
    };
    let mut out = String::new();
    if args.json {
        let mut v = serde_json::json!({
            "params": params,
            "ridgeless": args.ridgeless,
            "mu": pred.mu,
            "sigma_sq": pred.sigma_sq,
            "eta": pred.eta,
            "C": pred.c_align,
        });
        if let Some(t) = transforms {
            v["m"] = t.m.into();
            v["m_tilde"] = t.m_tilde.into();
            v["m_prime"] = t.m_prime.into();
            v["m_tilde_prime"] = t.m_tilde_prime.into();
        }
        let _ = writeln!(out, "{v}");
    } else {
        let _ = writeln!(out, "mu={}", pred.mu);
        let _ = writeln!(out, "sigma_sq={}", pred.sigma_sq);
        let _ = writeln!(out, "eta={}", pred.eta);
        let _ = writeln!(out, "C={}", pred.c_align);
        if let Some(t) = transforms {
            let _ = writeln!(out, "m={}", t.m);
            let _ = writeln!(out, "m_tilde={}", t.m_tilde);
            let _ = writeln!(out, "m_prime={}", t.m_prime);
            let _ = writeln!(out, "m_tilde_prime={}", t.m_tilde_prime);
        }
    }
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().write_all(out.as_bytes());
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<usize> {
    let params = args.point.params()?;
    let point = GridPoint { index: 0, params, axis: None };
    let records = sweep::run_points(&[point], args.p, args.trials, args.seed, &args.trial.config(), SeedScheme::Common)?;
    write_records(&args.output, "simulate", &records)
}

fn cmd_sweep(args: &SweepArgs) -> Result<usize> {
    let mode = match args.mode {
        ModeArg::OneAtATime => AxisMode::OneAtATime,
        ModeArg::Full => AxisMode::Full,
    };
    let scheme = match args.seed_scheme {
        SeedSchemeArg::Common => SeedScheme::Common,
        SeedSchemeArg::Independent => SeedScheme::Independent,
    };
    let records = sweep::run_sweep(&args.grid(), mode, &args.trial.config(), scheme)?;
    write_records(&args.output, "sweep", &records)
}

fn cmd_resolvent(args: &ResolventArgs) -> Result<usize> {
    let z = SpectralPoint::new(args.z)?;
    let rows: Vec<CheckRow> = resolvent::convergence_study(&args.p, args.c, args.tau, z, args.seeds, args.seed)?;
    std::fs::create_dir_all(&args.output.out)?;
    let path = match args.output.format {
        Format::Csv => args.output.out.join("resolvent.csv"),
        Format::JsonLines => args.output.out.join("resolvent.jsonl"),
    };
    let file = BufWriter::new(File::create(&path)?);
    match args.output.format {
        Format::Csv => sweep::write_csv(file, &rows)?,
        Format::JsonLines => sweep::write_json_lines(file, &rows)?,
    }
    for name in resolvent::PRIMARY_CHECKS {
        let s = resolvent::summarise(&rows, name, &args.p);
        println!(
            "{name}: median errors {:?}, ratio {:.3}, decreasing={}",
            s.median_errors,
            s.ratio(),
            s.strictly_decreasing()
        );
    }
    Ok(0)
}

fn cmd_mnist(args: &MnistArgs) -> Result<usize> {
    let (images, labels) = match (&args.images, &args.labels, &args.data_dir) {
        (Some(i), Some(l), _) => (mnist::load_images(i)?, mnist::load_labels(l)?),
        (_, _, Some(dir)) => mnist::load_training_set(dir).with_context(|| format!("loading MNIST from {}", dir.display()))?,
        _ => bail!("pass --data-dir (or set MNIST_DIR), or both --images and --labels"),
    };
    let scale = match args.scale {
        ScaleArg::Raw => PixelScale::Raw,
        ScaleArg::Unit => PixelScale::Unit,
    };
    let task = mnist::build_binary_task(&images, &labels, 0, 1, scale)?;
    let [row, col] = args.patch_offset[..] else {
        bail!("--patch-offset takes exactly two values: row,col");
    };
    let trigger = mnist::make_patch_trigger((row, col), args.patch_size, args.vnorm)?;
    let records = mnist::run_mnist_grid(&task, &trigger, &args.points(), args.trials, args.seed, args.swap_classes)?;
    write_records(&args.output, "mnist", &records)
}

fn cmd_report(args: &ReportArgs) -> Result<usize> {
    let file = File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let records = sweep::read_records_csv(file).with_context(|| format!("reading {}", args.input.display()))?;
    let kind = match args.kind {
        KindArg::Mu => ReportKind::Mu,
        KindArg::Sigma => ReportKind::Sigma,
        KindArg::Eta => ReportKind::Eta,
    };
    let axes: Vec<sweep::Axis> = args
        .axis
        .iter()
        .map(|a| match a {
            AxisArg::C => sweep::Axis::C,
            AxisArg::Lambda => sweep::Axis::Lambda,
            AxisArg::Theta => sweep::Axis::Theta,
            AxisArg::Vnorm => sweep::Axis::Vnorm,
        })
        .collect();
    let stem = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ok: Vec<SweepRecord> = records.iter().filter(|r| r.is_ok()).cloned().collect();
    let out = report::write_report(&ok, kind, &axes, &args.point.params()?, &args.out, stem)?;
    for svg in &out.svgs {
        println!("{}", svg.display());
    }
    println!("{}", out.aggregate_csv.display());
    Ok(0)
}

/// Runs one command; returns the number of error rows it produced.
fn execute(command: &Command) -> Result<usize> {
    let out_dir = match command {
        Command::Simulate(a) => Some(&a.output.out),
        Command::Sweep(a) => Some(&a.output.out),
        Command::ResolventCheck(a) => Some(&a.output.out),
        Command::Mnist(a) => Some(&a.output.out),
        Command::Report(a) => Some(&a.out),
        _ => None,
    };
    let errors = match command {
        Command::Theory(a) => cmd_theory(a).map(|_| 0)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::ResolventCheck(a) => cmd_resolvent(a)?,
        Command::Mnist(a) => cmd_mnist(a)?,
        Command::Report(a) => cmd_report(a)?,
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
            let manifest: Manifest = serde_json::from_str(&text).context("parsing manifest")?;
            let mut inner = manifest.command;
            if matches!(inner, Command::Rerun(_)) {
                bail!("a manifest cannot record another rerun");
            }
            if let Some(dir) = &a.out {
                inner.set_out(dir.clone());
            }
            return execute(&inner);
        }
    };
    if let Some(dir) = out_dir {
        write_manifest(dir, command)?;
    }
    Ok(errors)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("error: {n} trial(s) failed; see the status column");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
