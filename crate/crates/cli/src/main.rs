//! `residual-nmpc`: reproducible residual-learning experiments from a JSON config.
//!
//! Artifacts live under the output directory:
//!
//! ```text
//! references/ref_NNN.csv          gen-ref
//! runs/collect_NNN.csv            collect
//! dataset/{train,test,all}.csv    collect
//! dataset/split.json              collect
//! model/sgp_{x,y,z}.json          train
//! model/elbo_report.json          train
//! eval/rmse_<scenario>.json       evaluate
//! run/<name>.csv, <name>.json     run
//! sweep/sweep.csv, summary.json   sweep
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use residual_nmpc::config::ExperimentConfig;
use residual_nmpc::data::{ResidualDataset, Scenario};
use residual_nmpc::dynamics::ResidualSelector;
use residual_nmpc::experiment::{
    collect_stage, evaluate_stage, free_world, obstacle_world, reference_set, sweep_inducing_points,
    train_stage, write_sweep_csv, SplitRecord,
};
use residual_nmpc::gp::sparse::{SgpModel, SgpRecord};
use residual_nmpc::planner::{closed_loop_run_with_diagnostics, ReferenceTrajectory, RunLog};
use residual_nmpc::residual::ResidualModel;
use residual_nmpc::{Error, ErrorClass, Result};
use serde_json::{json, Value};

const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Parser)]
#[command(name = "residual-nmpc", version, about = "Residual-dynamics learning for an NMPC quadrotor planner")]
struct Cli {
    /// Experiment configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write per-iteration solver diagnostics as JSON lines (`run` only).
    #[arg(long, global = true)]
    debug_solver: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate reference trajectories as CSV.
    GenRef,
    /// Fly the references with the nominal model and build the residual datasets.
    Collect,
    /// Fit one sparse GP per axis on the training dataset.
    Train,
    /// Re-fly held-out references with the learned residual and report RMSEs.
    Evaluate(ScenarioArgs),
    /// Fly a single reference in closed loop.
    Run(RunArgs),
    /// Sweep the number of inducing points.
    Sweep,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Fly in a seeded obstacle forest.
    #[arg(long, overrides_with = "no_obstacles")]
    obstacles: bool,
    /// Fly in an empty world (default).
    #[arg(long)]
    no_obstacles: bool,
}

impl ScenarioArgs {
    fn scenario(&self) -> Scenario {
        if self.obstacles {
            Scenario::WithObstacles
        } else {
            Scenario::WithoutObstacles
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Index of the reference under `references/`.
    #[arg(long, default_value_t = 0)]
    reference: usize,
    /// Ignore any trained model and fly the nominal planner.
    #[arg(long)]
    nominal: bool,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    hash: String,
    debug_solver: bool,
}

impl Context {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d)?;
        Ok(d)
    }
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::WithObstacles => "with_obstacles",
        Scenario::WithoutObstacles => "without_obstacles",
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_csv_with(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    f(BufWriter::new(File::create(path)?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn with_hash(ctx: &Context, value: impl serde::Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("config_hash".into(), Value::String(ctx.hash.clone()));
            Ok(v)
        }
        _ => Ok(json!({ "config_hash": ctx.hash, "value": v })),
    }
}

fn check_hash(ctx: &Context, path: &Path) {
    if let Ok(v) = read_json(path) {
        if v.get("config_hash").and_then(Value::as_str) != Some(ctx.hash.as_str()) {
            log::warn!("{} was produced with a different configuration", path.display());
        }
    }
}

fn load_references(ctx: &Context) -> Result<Vec<ReferenceTrajectory>> {
    let dir = ctx.out.join("references");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("{}: {e}; run `gen-ref` first", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no reference CSVs in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| ReferenceTrajectory::read_csv(open(p)?).map_err(|e| Error::Data(format!("{}: {e}", p.display()))))
        .collect()
}

fn load_dataset(path: &Path) -> Result<ResidualDataset> {
    ResidualDataset::read_csv(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_split(ctx: &Context) -> Result<SplitRecord> {
    let path = ctx.out.join("dataset").join("split.json");
    check_hash(ctx, &path);
    serde_json::from_value(read_json(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_model(ctx: &Context) -> Result<ResidualModel> {
    let dir = ctx.out.join("model");
    check_hash(ctx, &dir.join("elbo_report.json"));
    let mut axes = Vec::with_capacity(3);
    for a in AXES {
        let path = dir.join(format!("sgp_{a}.json"));
        let rec: SgpRecord =
            serde_json::from_value(read_json(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        axes.push(SgpModel::from_record(&rec)?);
    }
    let axes: [SgpModel; 3] = axes.try_into().map_err(|_| Error::Data("expected three axis models".into()))?;
    ResidualModel::new(axes, ResidualSelector::default())
}

fn gen_ref(ctx: &Context) -> Result<()> {
    let refs = reference_set(&ctx.cfg)?;
    let dir = ctx.dir("references")?;
    for old in fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())) {
        if old.extension().is_some_and(|x| x == "csv") {
            fs::remove_file(old)?;
        }
    }
    for (i, r) in refs.iter().enumerate() {
        write_csv_with(&dir.join(format!("ref_{i:03}.csv")), |w| r.write_csv(w))?;
    }
    Ok(())
}

fn collect_cmd(ctx: &Context) -> Result<()> {
    let refs = load_references(ctx)?;
    let c = collect_stage(&ctx.cfg, &refs)?;
    let runs = ctx.dir("runs")?;
    for (i, log) in c.logs.iter().enumerate() {
        write_csv_with(&runs.join(format!("collect_{i:03}.csv")), |w| log.write_csv(w))?;
    }
    let dir = ctx.dir("dataset")?;
    write_csv_with(&dir.join("train.csv"), |w| c.train.write_csv(w))?;
    write_csv_with(&dir.join("test.csv"), |w| c.test.write_csv(w))?;
    write_csv_with(&dir.join("all.csv"), |w| c.all().write_csv(w))?;
    let split = SplitRecord {
        seed: ctx.cfg.seed,
        train: c.train_indices.clone(),
        test: c.test_indices.clone(),
    };
    let mut v = with_hash(ctx, &split)?;
    v["train_rows"] = json!(c.train.len());
    v["test_rows"] = json!(c.test.len());
    write_json(&dir.join("split.json"), &v)
}

fn train_cmd(ctx: &Context) -> Result<()> {
    let train = load_dataset(&ctx.out.join("dataset").join("train.csv"))?;
    let fit = train_stage(&ctx.cfg, &train, ctx.cfg.sgp.m, ctx.cfg.seed)?;
    let dir = ctx.dir("model")?;
    for (k, a) in AXES.iter().enumerate() {
        let model = fit.model.axis(k).ok_or_else(|| Error::Untrained(format!("axis {a}")))?;
        write_json(&dir.join(format!("sgp_{a}.json")), &serde_json::to_value(model.to_record())?)?;
    }
    let axes: serde_json::Map<String, Value> = AXES
        .iter()
        .zip(&fit.reports)
        .map(|(a, r)| Ok(((*a).to_string(), serde_json::to_value(r)?)))
        .collect::<Result<_>>()?;
    let report = json!({
        "config_hash": ctx.hash,
        "m": ctx.cfg.sgp.m,
        "seed": ctx.cfg.seed,
        "n_used": fit.n_used,
        "n_train": train.len(),
        "axes": axes,
    });
    write_json(&dir.join("elbo_report.json"), &report)
}

fn evaluate_cmd(ctx: &Context, args: &ScenarioArgs) -> Result<()> {
    let scenario = args.scenario();
    let refs = load_references(ctx)?;
    let split = load_split(ctx)?;
    if let Some(&bad) = split.test.iter().find(|&&i| i >= refs.len()) {
        return Err(Error::Data(format!("split names reference {bad}, only {} on disk", refs.len())));
    }
    let train = load_dataset(&ctx.out.join("dataset").join("train.csv"))?;
    let model = load_model(ctx)?;
    let (report, logs) = evaluate_stage(&ctx.cfg, &refs, &split.test, &train, &model, scenario)?;
    let name = scenario_name(scenario);
    let runs = ctx.dir(&format!("eval/{name}"))?;
    for (log, i) in logs.iter().zip(&split.test) {
        write_csv_with(&runs.join(format!("ref_{i:03}.csv")), |w| log.write_csv(w))?;
    }
    let mut v = with_hash(ctx, &report)?;
    let successes = logs
        .iter()
        .zip(&split.test)
        .map(|(log, &i)| {
            let world = match scenario {
                Scenario::WithoutObstacles => Ok(free_world(&ctx.cfg, &refs[i])),
                Scenario::WithObstacles => obstacle_world(&ctx.cfg, &refs[i], i),
            }?;
            Ok(log.summary(&world).success)
        })
        .collect::<Result<Vec<bool>>>()?;
    v["runs"] = json!(logs.len());
    v["successes"] = json!(successes.iter().filter(|s| **s).count());
    println!(
        "{name}: nominal_rmse {:.4} augmented_rmse {:.4} over {} points",
        report.nominal_rmse, report.augmented_rmse, report.n_points
    );
    write_json(&ctx.dir("eval")?.join(format!("rmse_{name}.json")), &v)
}

fn run_cmd(ctx: &Context, args: &RunArgs) -> Result<()> {
    let refs = load_references(ctx)?;
    let reference = refs
        .get(args.reference)
        .ok_or_else(|| Error::Data(format!("reference {} not found, {} on disk", args.reference, refs.len())))?;
    let model = if args.nominal {
        None
    } else if ctx.out.join("model").join("sgp_x.json").exists() {
        Some(load_model(ctx)?)
    } else {
        log::warn!("no trained model under {}; flying the nominal planner", ctx.out.display());
        None
    };
    let scenario = args.scenario.scenario();
    let world = match scenario {
        Scenario::WithoutObstacles => free_world(&ctx.cfg, reference),
        Scenario::WithObstacles => obstacle_world(&ctx.cfg, reference, args.reference)?,
    };
    let dir = ctx.dir("run")?;
    let kind = if model.is_some() { "augmented" } else { "nominal" };
    let name = format!("ref_{:03}_{}_{kind}", args.reference, scenario_name(scenario));
    let diagnostics: Option<Box<dyn Write + Send>> = if ctx.debug_solver {
        let path = dir.join(format!("{name}_solver.jsonl"));
        println!("solver diagnostics -> {}", path.display());
        Some(Box::new(BufWriter::new(File::create(path)?)))
    } else {
        None
    };
    let log: RunLog = closed_loop_run_with_diagnostics(
        &ctx.cfg.run_config(),
        &world,
        reference,
        &ctx.cfg.plant,
        model.as_ref(),
        ctx.cfg.evaluation.max_steps,
        diagnostics,
    )?;
    write_csv_with(&dir.join(format!("{name}.csv")), |w| log.write_csv(w))?;
    let summary = log.summary(&world);
    println!(
        "success {} after {} steps, position RMSE {:.4} m, {} regenerations",
        summary.success, summary.steps, summary.position_rmse, summary.regenerations
    );
    let mut v = with_hash(ctx, &summary)?;
    v["model"] = json!(kind);
    v["scenario"] = json!(scenario_name(scenario));
    v["reference"] = json!(args.reference);
    write_json(&dir.join(format!("{name}.json")), &v)
}

fn sweep_cmd(ctx: &Context) -> Result<()> {
    let refs = load_references(ctx)?;
    let split = load_split(ctx)?;
    let train = load_dataset(&ctx.out.join("dataset").join("train.csv"))?;
    let test = load_dataset(&ctx.out.join("dataset").join("test.csv"))?;
    let timing = split
        .test
        .first()
        .and_then(|&i| refs.get(i))
        .ok_or_else(|| Error::Data("split has no test reference".into()))?;
    let rows = sweep_inducing_points(&ctx.cfg, &train, &test, timing, &ctx.cfg.sweep.m_values)?;
    let dir = ctx.dir("sweep")?;
    write_csv_with(&dir.join("sweep.csv"), |w| write_sweep_csv(&rows, w))?;
    write_json(&dir.join("summary.json"), &with_hash(ctx, json!({ "rows": rows }))?)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir));
    let ctx = Context {
        hash: cfg.hash(),
        cfg,
        out,
        debug_solver: cli.debug_solver,
    };
    if ctx.debug_solver && !matches!(cli.command, Command::Run(_)) {
        log::warn!("--debug-solver only affects `run`");
    }
    match &cli.command {
        Command::GenRef => gen_ref(&ctx),
        Command::Collect => collect_cmd(&ctx),
        Command::Train => train_cmd(&ctx),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Run(a) => run_cmd(&ctx, a),
        Command::Sweep => sweep_cmd(&ctx),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Solver => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
