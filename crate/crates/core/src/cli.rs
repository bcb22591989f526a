//! Command-line front end: gen-data, train, eval, run, stats.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::filter::SystemModel;
use crate::innovation::{
    consistency_report, InnovationSequence, StatsReport, DEFAULT_ALPHA, DEFAULT_AUTOCORRELATION_LAGS,
    DEFAULT_CORRELATION_LAGS,
};
use crate::numerics::{variance, RandomSource};
use crate::predictor::{self, NetworkParams};
use crate::runtime::{
    self, coverage, evaluate_runs, write_runs_csv, FixedLabels, RunPredictor, RunSetup,
};
use crate::training::{evaluate_labels, train, write_history_csv, write_summary_json, EvalSummary, LossVariant, ModelContext};
use crate::vehicle::{sample_labels, simulate, vehicle_model, ManeuverKind, NoiseLabels, LABEL_BOUND};

pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "noisecov", version, about = "Learned noise covariances for Kalman filtering")]
pub struct Cli {
    /// JSON configuration file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the command's random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trajectories and write a labelled window dataset.
    GenData(GenDataArgs),
    /// Train a noise predictor on a dataset.
    Train(TrainArgs),
    /// Label errors and closed-loop state RMSE for trained models.
    Eval(EvalArgs),
    /// One adaptive-filter run on a simulated trajectory.
    Run(RunArgs),
    /// Consistency diagnostics for a recorded innovation sequence.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Also write the samples as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub variant: Option<LossVariant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub nis_target: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weight files; each becomes one row of the tables.
    #[arg(long, num_args = 1..)]
    pub weights: Vec<PathBuf>,
    /// Dataset for label errors; skipped when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Only the fixed-default baseline row.
    #[arg(long)]
    pub baseline_only: bool,
    /// Add a row for a filter given the true labels.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Use the trajectory's true labels instead of a network.
    #[arg(long)]
    pub oracle_labels: bool,
    #[arg(long, default_value = "slalom")]
    pub maneuver: ManeuverKind,
    /// True labels `qa,qb,r`; sampled from the seed when absent.
    #[arg(long, value_delimiter = ',', value_name = "QA,QB,R")]
    pub labels: Option<Vec<f64>>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// CSV with a `nu` column and optionally `s`.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of lags `M` for the correlation matrices.
    #[arg(long, default_value_t = DEFAULT_CORRELATION_LAGS)]
    pub corr_lags: usize,
    #[arg(long, default_value_t = DEFAULT_AUTOCORRELATION_LAGS)]
    pub lags: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(out) = &cli.out {
        config.output = out.clone();
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(config, cli.seed, a),
        Command::Train(a) => cmd_train(config, cli.seed, a),
        Command::Eval(a) => cmd_eval(config, cli.seed, a),
        Command::Run(a) => cmd_run(config, cli.seed, a),
        Command::Stats(a) => cmd_stats(config, a),
    }
}

fn prepare_output(config: &Config, command: &str) -> Result<PathBuf> {
    let dir = config.output.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    config.write_resolved(&dir, command)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(mut config: Config, seed: Option<u64>, args: &GenDataArgs) -> Result<()> {
    if let Some(s) = seed {
        config.seeds.data = s;
    }
    if let Some(c) = args.count {
        config.dataset.count = c;
    }
    if let Some(w) = args.window {
        config.dataset.window = w;
    }
    config.validate()?;
    let dir = prepare_output(&config, "gen-data")?;
    let ds = generate_dataset(&config.dataset, &config.vehicle, &config.maneuvers, config.seeds.data)?;
    ds.write(&dir.join(DATASET_FILE))?;
    write_json(&ds.manifest(), &dir.join(MANIFEST_FILE))?;
    if args.csv {
        ds.write_csv(&dir.join("dataset.csv"))?;
    }
    println!("samples: {} ({} trajectories)", ds.len(), ds.header.trajectories);
    print!("{}", label_histogram(&ds, 10));
    Ok(())
}

/// Text histogram of each label over equal-width bins of `(0, bound]`.
pub fn label_histogram(ds: &Dataset, bins: usize) -> String {
    let mut counts = vec![[0usize; 3]; bins];
    for s in &ds.samples {
        for (k, v) in s.labels.as_array().iter().enumerate() {
            let b = ((v / LABEL_BOUND) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)][k] += 1;
        }
    }
    let mut out = String::from("bin_upper      q_a    q_b      r\n");
    for (i, c) in counts.iter().enumerate() {
        let upper = LABEL_BOUND * (i + 1) as f64 / bins as f64;
        out += &format!("{upper:<9.1e} {:>8} {:>6} {:>6}\n", c[0], c[1], c[2]);
    }
    out
}

pub fn cmd_train(mut config: Config, seed: Option<u64>, args: &TrainArgs) -> Result<()> {
    if let Some(s) = seed {
        config.seeds.train = s;
    }
    let t = &mut config.training;
    if let Some(v) = args.variant {
        t.variant = v;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = args.lr {
        t.lr = lr;
    }
    if let Some(h) = args.hidden {
        t.hidden = h;
    }
    if let Some(n) = args.nis_target {
        t.nis_target = n;
    }
    config.validate()?;
    let ds = Dataset::read(&args.dataset)?;
    if ds.is_empty() {
        return Err(Error::IncompatibleDataset("dataset holds no samples".into()));
    }
    let dir = prepare_output(&config, "train")?;
    let ctx = ModelContext::for_dataset(&ds)?;
    let (tr, va) = ds.split_indices();
    let root = RandomSource::new(config.seeds.train);
    let params = NetworkParams::init(&mut root.derive(0), config.training.hidden)?;
    let weights = config.training.weights();
    let outcome = train(
        &ctx,
        &ds,
        &tr,
        &va,
        params,
        &weights,
        &config.training.train_config(),
        &mut root.derive(1),
    )?;
    let name = weights.variant.name();
    predictor::save(&outcome.params, Some(name), &dir.join(format!("weights_{name}.bin")))?;
    write_history_csv(&outcome.history, &dir.join(format!("history_{name}.csv")))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{name}: {} steps, train loss {:.4e}, val loss {:.4e}, val RMSE (qa, qb, r) = ({:.3e}, {:.3e}, {:.3e})",
            outcome.steps, last.train_loss, last.val_loss, last.val_rmse[0], last.val_rmse[1], last.val_rmse[2]
        );
    }
    Ok(())
}

/// Loads a weight file; the row name is its tag or else the file stem.
pub fn load_named(path: &Path) -> Result<(String, NetworkParams)> {
    let (params, tag) = predictor::load(path)?;
    let name = tag.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    Ok((name, params))
}

pub fn cmd_eval(mut config: Config, seed: Option<u64>, args: &EvalArgs) -> Result<()> {
    if let Some(s) = seed {
        config.seeds.eval = s;
    }
    if let Some(r) = args.runs {
        config.eval.runs = r;
    }
    config.validate()?;
    if args.weights.is_empty() && !args.baseline_only {
        return Err(Error::Config("eval needs --weights or --baseline-only".into()));
    }
    let models: Vec<(String, NetworkParams)> = if args.baseline_only {
        Vec::new()
    } else {
        args.weights.iter().map(|p| load_named(p)).collect::<Result<_>>()?
    };
    let dir = prepare_output(&config, "eval")?;

    let mut labels = Vec::new();
    if let Some(path) = &args.dataset {
        let ds = Dataset::read(path)?;
        let (tr, va) = ds.split_indices();
        for (name, p) in &models {
            labels.push((name.clone(), evaluate_labels(p, &ds, &tr, &va)?));
        }
        if !labels.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("label_rmse.csv")).map_err(|e| Error::Csv {
                path: dir.join("label_rmse.csv"),
                source: e,
            })?;
            let rows = std::iter::once(vec![
                "variant".to_string(),
                "split".into(),
                "rmse_qa".into(),
                "rmse_qb".into(),
                "rmse_r".into(),
            ])
            .chain(labels.iter().flat_map(|(n, l)| {
                [("train", l.train), ("validation", l.validation)]
                    .into_iter()
                    .map(move |(split, v)| {
                        vec![
                            n.clone(),
                            split.to_string(),
                            format!("{:e}", v[0]),
                            format!("{:e}", v[1]),
                            format!("{:e}", v[2]),
                        ]
                    })
            }));
            for r in rows {
                w.write_record(&r).map_err(|e| Error::Csv {
                    path: dir.join("label_rmse.csv"),
                    source: e,
                })?;
            }
            w.flush().map_err(|e| Error::io(dir.join("label_rmse.csv"), e))?;
        }
    }

    let setup = RunSetup {
        vehicle: config.vehicle.clone(),
        maneuvers: config.maneuvers.clone(),
        runtime: config.runtime.clone(),
    };
    let mut columns: Vec<(String, RunPredictor<'_>)> = models
        .iter()
        .map(|(n, p)| (n.clone(), RunPredictor::Model(p)))
        .collect();
    if args.oracle {
        columns.push(("oracle".into(), RunPredictor::Oracle));
    }
    let runs = evaluate_runs(&setup, &columns, config.eval.runs, config.seeds.eval)?;
    write_runs_csv(&runs, &dir.join("runs.csv"))?;

    // Consistency of each model's innovations on one fresh slalom run.
    let model = vehicle_model(&config.vehicle, config.maneuvers[0].dt)?;
    let mut rng = RandomSource::new(config.seeds.eval).derive(u64::MAX);
    let truth = sample_labels(&mut rng);
    let spec = config
        .maneuvers
        .iter()
        .find(|m| m.kind == ManeuverKind::Slalom)
        .unwrap_or(&config.maneuvers[0]);
    let traj = simulate(&config.vehicle, spec, &truth, &mut rng)?;
    let mut fixed = vec![("baseline".to_string(), FixedLabels(config.runtime.default_labels))];
    if args.oracle {
        fixed.push(("oracle".into(), FixedLabels(truth)));
    }
    for (name, p) in &models {
        let report = trace_report(&model, p, &traj, &config)?;
        write_json(&report, &dir.join(format!("stats_{name}.json")))?;
    }
    for (name, p) in &fixed {
        let report = trace_report(&model, p, &traj, &config)?;
        write_json(&report, &dir.join(format!("stats_{name}.json")))?;
    }

    let summary = EvalSummary {
        labels,
        runs: runs.clone(),
    };
    write_summary_json(&summary, &dir.join("eval_summary.json"))?;
    println!("variant        rmse_beta    rmse_psidot");
    for r in &runs {
        println!("{:<14} {:<12.4e} {:.4e}", r.name, r.rmse_beta, r.rmse_psidot);
    }
    Ok(())
}

fn trace_report(
    model: &SystemModel,
    predictor: &(impl predictor::LabelPredictor + ?Sized),
    traj: &crate::vehicle::TrajectoryRecord,
    config: &Config,
) -> Result<StatsReport> {
    let trace = runtime::run(model, predictor, traj, &config.runtime)?;
    let rows: Vec<_> = trace.post_warmup().collect();
    let nu: Vec<f64> = rows.iter().map(|r| r.innovation).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.s).collect();
    let seq = InnovationSequence::from_scalars(&nu, &s)?;
    let lags = DEFAULT_AUTOCORRELATION_LAGS.min(nu.len().saturating_sub(2));
    consistency_report(&seq, DEFAULT_CORRELATION_LAGS.min(lags), lags, DEFAULT_ALPHA)
}

pub fn cmd_run(mut config: Config, seed: Option<u64>, args: &RunArgs) -> Result<()> {
    if let Some(s) = seed {
        config.seeds.run = s;
    }
    if let Some(s) = args.stride {
        config.runtime.stride = s;
    }
    config.validate()?;
    let network = match (&args.weights, args.oracle_labels) {
        (Some(p), _) => Some(load_named(p)?.1),
        (None, true) => None,
        (None, false) => return Err(Error::Config("run needs --weights or --oracle-labels".into())),
    };
    let base = config
        .maneuvers
        .iter()
        .find(|m| m.kind == args.maneuver)
        .cloned()
        .ok_or_else(|| Error::Config(format!("no {} maneuver configured", args.maneuver.name())))?;
    let spec = match args.duration {
        Some(d) => base.with_duration(d),
        None => base,
    };
    spec.validate()?;
    let mut rng = RandomSource::new(config.seeds.run);
    let truth = match &args.labels {
        Some(v) => {
            if v.len() != 3 {
                return Err(Error::Config(format!("--labels takes three values qa,qb,r, got {}", v.len())));
            }
            let l = NoiseLabels::new(v[0], v[1], v[2]);
            l.validate()?;
            l
        }
        None => sample_labels(&mut rng),
    };
    let dir = prepare_output(&config, "run")?;
    let traj = simulate(&config.vehicle, &spec, &truth, &mut rng)?;
    let model = vehicle_model(&config.vehicle, spec.dt)?;
    let trace = match (&network, args.oracle_labels) {
        (Some(p), false) => runtime::run(&model, p, &traj, &config.runtime)?,
        _ => runtime::run(&model, &FixedLabels(truth), &traj, &config.runtime)?,
    };
    trace.write_csv(&dir.join("trace.csv"))?;
    trace.write_innovations_csv(&dir.join("innovations.csv"))?;
    println!(
        "true labels (qa, qb, r) = ({:.3e}, {:.3e}, {:.3e}); {} steps, {} warmup",
        truth.q_a,
        truth.q_b,
        truth.r,
        trace.len(),
        trace.rows.iter().filter(|r| r.warmup).count()
    );
    if let Some(k) = trace.diverged_at {
        return Err(Error::NumericOverflow(if k == 0 { "first filter step" } else { "adaptive filter run" }));
    }
    let cov = coverage(&trace)?;
    println!("3-sigma coverage: beta {:.4}, yaw rate {:.4}", cov[0], cov[1]);
    Ok(())
}

/// Reads `nu` (required) and `s` (optional) columns. Without `s` the sample
/// variance of `nu` stands in for every step.
pub fn read_innovation_csv(path: &Path) -> Result<InnovationSequence> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let nu_col = headers
        .iter()
        .position(|h| h.trim() == "nu")
        .ok_or_else(|| parse_err(1, "missing `nu` column".into()))?;
    let s_col = headers.iter().position(|h| h.trim() == "s");
    let mut nu = Vec::new();
    let mut s = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize, name: &str| -> Result<f64> {
            let raw = rec.get(c).ok_or_else(|| parse_err(line, format!("missing `{name}` field")))?;
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{name}` value {raw:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("`{name}` is not finite")));
            }
            Ok(v)
        };
        nu.push(field(nu_col, "nu")?);
        if let Some(c) = s_col {
            let v = field(c, "s")?;
            if !(v > 0.0) {
                return Err(parse_err(line, "`s` must be positive".into()));
            }
            s.push(v);
        }
    }
    if nu.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} holds {} innovations; at least 2 are needed",
            path.display(),
            nu.len()
        )));
    }
    if s_col.is_some() {
        InnovationSequence::from_scalars(&nu, &s)
    } else {
        let var = variance(&nu);
        if !(var > 0.0) {
            return Err(Error::UndefinedStatistic("innovations have zero variance and no `s` column".into()));
        }
        Ok(InnovationSequence::from_scalars_constant(&nu, var))
    }
}

pub fn cmd_stats(config: Config, args: &StatsArgs) -> Result<()> {
    let seq = read_innovation_csv(&args.input)?;
    let report = consistency_report(&seq, args.corr_lags, args.lags, args.alpha)?;
    let dir = prepare_output(&config, "stats")?;
    write_json(&report, &dir.join("stats.json"))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}
