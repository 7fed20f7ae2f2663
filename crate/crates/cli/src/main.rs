use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tcnf::base_process::TimeGrid;
use tcnf::config::RunConfig;
use tcnf::dataset;
use tcnf::error::{Error, Result};
use tcnf::metrics::{self, EvalProtocol, EvalReport};
use tcnf::model::TimeChangeConfig;
use tcnf::sde::{self, PathMeta, PathSet, SdeSpec};
use tcnf::stats;
use tcnf::svg::{self, Band, HeatStrip};
use tcnf::trainer::{self, Checkpoint, EpochRecord};

#[derive(Parser, Debug)]
#[command(name = "tcnf", version, about = "Time-changed normalizing flows for univariate processes")]
struct Cli {
    /// Seed for every random draw in the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a toy process to a CSV dataset.
    Simulate(SimulateArgs),
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a toy process or a dataset.
    Eval(EvalArgs),
    /// Sample paths from a checkpoint.
    Sample(SampleArgs),
    /// Write the closed-form checkpoint of a toy process.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    /// Number of uniform times on (0, t_max] [default: 30].
    #[arg(long)]
    n_times: Option<usize>,
    /// [default: 1.5]
    #[arg(long)]
    t_max: Option<f64>,
    /// Explicit comma-separated times (overrides n_times and t_max).
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
}

impl GridArgs {
    /// The requested grid, or `fallback` when no grid flag is given.
    fn grid_or(&self, fallback: Option<&TimeGrid>) -> Result<TimeGrid> {
        match (&self.times, self.n_times, self.t_max, fallback) {
            (Some(t), _, _, _) => TimeGrid::new(t.clone()),
            (None, None, None, Some(g)) => Ok(g.clone()),
            _ => TimeGrid::uniform(self.n_times.unwrap_or(30), self.t_max.unwrap_or(1.5)),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Exact,
    Euler,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// toy-ou, toy-ou-sqrt-t or toy-gbm.
    #[arg(long)]
    sde: String,
    #[arg(long, default_value_t = 1000)]
    n_paths: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value_t = Method::Exact)]
    method: Method,
    /// Euler substeps between grid points.
    #[arg(long, default_value_t = 64)]
    substeps: usize,
    /// Output file (default: <out-dir>/data.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum ClockArg {
    Identity,
    Mmgn,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured clock.
    #[arg(long, value_enum)]
    time_change: Option<ClockArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Start from this checkpoint's parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ProtocolArgs {
    #[arg(long, default_value_t = 1000)]
    n_paths: usize,
    #[arg(long, default_value_t = 100)]
    n_iterations: usize,
    #[arg(long, default_value_t = 50)]
    n_slices: usize,
    #[arg(long, default_value_t = 1000)]
    n_space: usize,
    #[arg(long, default_value_t = 500)]
    n_time: usize,
    #[arg(long, default_value_t = 1.5)]
    t_max: f64,
    /// 1000 iterations instead of the desk default.
    #[arg(long)]
    full: bool,
}

impl ProtocolArgs {
    fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_paths: self.n_paths,
            n_iterations: if self.full { 1000 } else { self.n_iterations },
            n_slices: self.n_slices,
            n_space: self.n_space,
            n_time: self.n_time,
            t_max: self.t_max,
            x_range: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Compare against this toy process.
    #[arg(long, conflicts_with = "data")]
    oracle: Option<String>,
    /// Compare against this dataset.
    #[arg(long, required_unless_present = "oracle")]
    data: Option<PathBuf>,
    /// Mean relative errors (dataset mode).
    #[arg(long)]
    relative: bool,
    #[arg(long)]
    log_returns: bool,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_paths: usize,
    #[command(flatten)]
    grid: GridArgs,
    /// Output file (default: <out-dir>/samples.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct OracleArgs {
    #[arg(long)]
    sde: String,
    /// Output file (default: <out-dir>/oracle.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything a command needs to be rerun, written next to its outputs.
#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    seed: u64,
    args: &'a A,
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record<A: Serialize>(&self, command: &str, args: &A) -> Result<()> {
        let rec = RunRecord { command, seed: self.seed, args };
        let text = toml::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
        write(&self.path(&format!("{command}_run.toml")), &text)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { seed: cli.seed.unwrap_or(0), out_dir: cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")) };
    match &cli.cmd {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Train(a) => train(cli.seed, cli.out_dir.clone(), a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Oracle(a) => oracle(&ctx, a),
    }
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let spec = SdeSpec::by_name(&a.sde)?;
    let grid = a.grid.grid_or(None)?;
    let set = match a.method {
        Method::Exact => sde::simulate_exact(&spec, &grid, a.n_paths, ctx.seed)?,
        Method::Euler => sde::euler_maruyama(&spec, &grid, a.substeps, a.n_paths, ctx.seed)?,
    };
    ctx.ensure_dir()?;
    let out = a.out.clone().unwrap_or_else(|| ctx.path("data.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    dataset::write_path(&set, &out)?;
    ctx.record("simulate", a)?;
    let last = set.column(grid.len() - 1);
    println!(
        "wrote {} paths x {} times of {} to {}",
        set.n_paths(),
        grid.len(),
        spec.name(),
        out.display()
    );
    println!("at t = {}: mean {:.6}, std {:.6}", grid.last(), stats::mean(&last), stats::std_dev(&last));
    Ok(())
}

fn train(seed: Option<u64>, out_dir: Option<PathBuf>, a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = Some(d);
    }
    match a.time_change {
        Some(ClockArg::Identity) => cfg.model.time_change = TimeChangeConfig::Identity,
        Some(ClockArg::Mmgn) if !matches!(cfg.model.time_change, TimeChangeConfig::Mmgn { .. }) => {
            cfg.model.time_change = TimeChangeConfig::mmgn_default()
        }
        _ => {}
    }
    if let Some(e) = a.epochs {
        cfg.model.optimizer.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.model.optimizer.lr = lr;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let cfg = cfg.resolve()?.rebase(base);
    let data = cfg.load_data(Path::new("."))?;
    let init = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?.params),
        None => None,
    };
    let ctx = Ctx { seed: cfg.seed, out_dir: cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")) };
    ctx.ensure_dir()?;
    write(&ctx.path("resolved_config.toml"), &cfg.to_toml()?)?;

    let log = |r: &EpochRecord| eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_nll, r.val_nll);
    let ck = trainer::train_from(&cfg.model, &data, init.as_ref(), log)?;
    ck.save(&ctx.path("checkpoint.json"))?;
    let mut hist = String::from("epoch,train_nll,val_nll\n");
    for r in &ck.history {
        hist.push_str(&format!("{},{},{}\n", r.epoch, r.train_nll, r.val_nll));
    }
    write(&ctx.path("history.csv"), &hist)?;
    println!(
        "trained {} model on {} paths; best epoch {:?}; checkpoint {}",
        cfg.model.time_change.name(),
        data.n_paths(),
        ck.best_epoch,
        ctx.path("checkpoint.json").display()
    );
    Ok(())
}

fn band(label: &str, color: &str, times: &[f64], paths: &[Vec<f64>]) -> Band {
    let m: Vec<_> = (0..times.len())
        .map(|j| metrics::slice_moments(&paths.iter().map(|p| p[j]).collect::<Vec<_>>()))
        .collect();
    Band {
        label: label.into(),
        color: color.into(),
        times: times.to_vec(),
        mean: m.iter().map(|x| x.mean).collect(),
        q1: m.iter().map(|x| x.q1).collect(),
        q3: m.iter().map(|x| x.q3).collect(),
    }
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let protocol = a.protocol.protocol();
    protocol.validate()?;
    ctx.ensure_dir()?;
    let (report, figure) = match (&a.oracle, &a.data) {
        (Some(name), _) => {
            if a.relative || a.log_returns {
                return Err(Error::InvalidInput("--relative and --log-returns apply to dataset mode".into()));
            }
            let spec = SdeSpec::by_name(name)?;
            let moments = metrics::moment_mae(&model, &spec, &protocol, ctx.seed)?;
            let grid_err = metrics::density_error_grid(&model, &spec, &protocol)?;
            let mut report = moments;
            report.rows.push(metrics::MetricRow { metric: "density_mae".into(), value: grid_err.mean(), sd: 0.0 });
            let slices = protocol.slice_grid()?;
            let samples = model.sample_paths(&slices, protocol.n_paths, metrics::iteration_seed(ctx.seed, 0))?;
            let o: Vec<_> = slices.times().iter().map(|&t| sde::oracle_moments(&spec, t)).collect::<Result<_>>()?;
            let oracle_band = Band {
                label: format!("{} oracle", spec.name()),
                color: "#222222".into(),
                times: slices.times().to_vec(),
                mean: o.iter().map(|m| m.mean).collect(),
                q1: o.iter().map(|m| m.q1).collect(),
                q3: o.iter().map(|m| m.q3).collect(),
            };
            let heat = HeatStrip {
                label: "|density error|".into(),
                times: grid_err.times,
                xs: grid_err.xs,
                values: grid_err.values,
            };
            let fig = svg::overlay(
                &format!("{} vs {}", ck.config.time_change.name(), spec.name()),
                Some(&heat),
                &[oracle_band, band("model", "#08519c", slices.times(), &samples)],
            );
            (report, fig)
        }
        (None, Some(path)) => {
            let mut test = dataset::read_path(path)?;
            if a.log_returns {
                test = dataset::log_returns(&test)?;
            }
            let report = metrics::real_data_report(&model, &test, a.relative, &protocol, ctx.seed)?;
            let samples = model.sample_paths(&test.grid, protocol.n_paths, metrics::iteration_seed(ctx.seed, 0))?;
            let fig = svg::overlay(
                &format!("{} vs data", ck.config.time_change.name()),
                None,
                &[
                    band("data", "#222222", test.grid.times(), &test.values),
                    band("model", "#08519c", test.grid.times(), &samples),
                ],
            );
            (report, fig)
        }
        (None, None) => return Err(Error::InvalidInput("eval needs --oracle or --data".into())),
    };
    write_report(ctx, &report)?;
    write(&ctx.path("figure.svg"), &figure)?;
    ctx.record("eval", a)?;
    print!("{}", report.summary());
    Ok(())
}

fn write_report(ctx: &Ctx, report: &EvalReport) -> Result<()> {
    write(&ctx.path("report.csv"), &report.to_csv())?;
    write(&ctx.path("summary.txt"), &report.summary())
}

fn sample(ctx: &Ctx, a: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let grid = a.grid.grid_or(ck.grid.as_ref())?;
    ctx.ensure_dir()?;
    let out = a.out.clone().unwrap_or_else(|| ctx.path("samples.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if a.n_paths == 0 {
        dataset::write_empty(fs::File::create(&out)?)?;
    } else {
        let paths = model.sample_paths(&grid, a.n_paths, ctx.seed)?;
        if paths.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model produced non-finite samples".into()));
        }
        dataset::write_path(&PathSet::new(grid.clone(), paths, PathMeta::External)?, &out)?;
    }
    ctx.record("sample", a)?;
    println!("wrote {} sampled paths x {} times to {}", a.n_paths, grid.len(), out.display());
    Ok(())
}

fn oracle(ctx: &Ctx, a: &OracleArgs) -> Result<()> {
    let spec = SdeSpec::by_name(&a.sde)?;
    ctx.ensure_dir()?;
    let out = a.out.clone().unwrap_or_else(|| ctx.path("oracle.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Checkpoint::oracle(&spec).save(&out)?;
    println!("wrote closed-form {} checkpoint to {}", spec.name(), out.display());
    Ok(())
}
