use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spycer::bundle::{read_scene, read_sensors_file, write_map};
use spycer::config::RunConfig;
use spycer::engine::FaultInjection;
use spycer::eval::{
    export_map, make_folds, residual_map, run_experiment, temporal_curves, write_patch_csv, write_records_csv,
    ExperimentResult, Fitted, Method,
};
use spycer::gradcheck::{run_gradcheck, GradcheckConfig};
use spycer::grid::{extract_patch, Scene, SensorNetwork};
use spycer::model::SpycerModel;
use spycer::sim::{simulate, write_synthetic};
use spycer::train::{train, Ablation};
use spycer::{Error, Result};

#[derive(Parser)]
#[command(name = "spycer", version, about = "Physics-guided NSAT estimation from LST patches and sparse sensors")]
struct Cli {
    /// Worker threads (folds, trees, map rows). 1 gives bit-identical runs.
    #[arg(long, global = true, env = "SPYCER_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene with sensors and ground truth.
    Simulate(SimulateArgs),
    /// Train SPyCer on every sensor of a scene and write a checkpoint.
    Train(TrainArgs),
    /// Export full-grid NSAT maps from a checkpoint.
    Predict(PredictArgs),
    /// Monte Carlo cross-validation of several methods.
    Eval(EvalArgs),
    /// Cross-validation of the full model and its two ablations.
    Ablate(EvalArgs),
    /// Cross-validated held-out predictions of one baseline.
    Baseline(BaselineArgs),
    /// Physics residual map of a checkpoint's prediction.
    Residual(ResidualArgs),
    /// 7×7 attention map at one sensor and date.
    Attn(AttnArgs),
    /// Finite-difference check of every backward rule in 64-bit mode.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load_or_default(self.config.as_deref())?;
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SceneArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Sensor CSV; defaults to `sensors.csv` inside the scene directory.
    #[arg(long)]
    sensors: Option<PathBuf>,
}

impl SceneArgs {
    fn load(&self) -> Result<(Scene, SensorNetwork)> {
        let scene = read_scene(&self.scene)?;
        let path = self.sensors.clone().unwrap_or_else(|| self.scene.join("sensors.csv"));
        let (net, excluded) = read_sensors_file(&path, &scene.meta)?;
        for id in excluded {
            eprintln!("warning: sensor {id} excluded (outside the grid or too close to its border)");
        }
        Ok((scene, net))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: SceneArgs,
    /// Checkpoint path; the history goes to `<out>.history.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: SceneArgs,
    /// Single date label; every scene date when omitted.
    #[arg(long)]
    date: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: SceneArgs,
    /// Comma-separated methods; overrides the config.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Output directory for the metrics table and predictions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: SceneArgs,
    /// One of lr, rf, gb, mlp, idw.
    #[arg(long)]
    method: String,
    #[arg(long)]
    folds: Option<usize>,
    /// Prediction CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ResidualArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    date: String,
    /// Residual raster; a `.json` manifest is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: SceneArgs,
    #[arg(long)]
    sensor: String,
    #[arg(long)]
    date: String,
    /// Skip the Gaussian distance modulation.
    #[arg(long)]
    no_gaussian: bool,
    /// CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Clears `dir` (with `force`) or refuses a non-empty one, then creates it.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = dir.read_dir()?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!("{} exists and is not empty; pass --force to replace it", dir.display())));
        }
        if non_empty {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to replace it", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// `<path>.<suffix>`, keeping the original extension.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let s = simulate(&cfg.sim)?;
    prepare_dir(&a.out, a.common.force)?;
    write_synthetic(&a.out, &s)?;
    cfg.echo_into(&a.out)?;
    println!(
        "wrote {}: {}×{} grid, {} dates, {} sensors",
        a.out.display(),
        s.scene.meta.width,
        s.scene.meta.height,
        s.scene.dates.len(),
        s.sensors.sensors.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let (scene, net) = a.data.load()?;
    let history_path = sibling(&a.out, "history.csv");
    let config_path = sibling(&a.out, "config.toml");
    for p in [&a.out, &history_path, &config_path] {
        prepare_file(p, a.common.force)?;
    }
    let (model, history) = train(&scene, &net, &cfg.model, &cfg.physics, &cfg.train)?;
    model.save(&a.out)?;
    history.write_csv(create(&history_path)?)?;
    std::fs::write(&config_path, cfg.to_toml())?;
    if let Some(last) = history.last() {
        println!(
            "epoch {} sup {:.6} phys {:.6} total {:.6}",
            last.epoch, last.sup_loss, last.phys_loss, last.total
        );
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = SpycerModel::load(&a.checkpoint)?;
    let scene = read_scene(&a.data.scene)?;
    let dates: Vec<String> = match &a.date {
        Some(d) => vec![d.clone()],
        None => scene.dates.iter().map(|d| d.date_label.clone()).collect(),
    };
    let sensors_path = a.data.sensors.clone().or_else(|| {
        let p = a.data.scene.join("sensors.csv");
        p.exists().then_some(p)
    });
    prepare_dir(&a.out, a.force)?;
    let fitted = Fitted::Spycer(Box::new(model.clone()));
    for d in &dates {
        let map = export_map(&fitted, &scene, d)?;
        write_map(&a.out.join(format!("nsat_pred_{d}.f32")), &map, "nsat_pred", Some(d))?;
    }
    if let Some(p) = sensors_path {
        let (net, _) = read_sensors_file(&p, &scene.meta)?;
        temporal_curves(&fitted, &scene, &net, &net.ids(), create(&a.out.join("curves.csv"))?)?;
    }
    let cfg = RunConfig { model: model.config.clone(), ..Default::default() };
    cfg.echo_into(&a.out)?;
    println!("wrote {} map(s) to {}", dates.len(), a.out.display());
    Ok(())
}

fn run_cv(common: &Common, data: &SceneArgs, methods: &[Method], folds: Option<usize>) -> Result<(RunConfig, ExperimentResult)> {
    let mut cfg = common.resolve()?;
    if let Some(f) = folds {
        cfg.eval.folds = f;
    }
    cfg.eval.methods = methods.iter().map(|m| m.name().to_string()).collect();
    cfg.validate()?;
    let (scene, net) = data.load()?;
    let plan = make_folds(&net.ids(), cfg.eval.folds, cfg.eval.seed)?;
    let result = run_experiment(&scene, &net, methods, &plan, &cfg.experiment())?;
    Ok((cfg, result))
}

fn print_summary(result: &ExperimentResult, methods: &[Method]) {
    for m in methods {
        if let Some(c) = result.table.overall(m.name()) {
            println!(
                "{:<12} rmse {:.4} ± {:.4}  mae {:.4} ± {:.4}",
                m.name(),
                c.rmse_mean,
                c.rmse_std,
                c.mae_mean,
                c.mae_std
            );
        }
    }
}

fn write_cv_outputs(dir: &Path, cfg: &RunConfig, result: &ExperimentResult) -> Result<()> {
    result.table.write_csv(create(&dir.join("table.csv"))?)?;
    write_records_csv(create(&dir.join("predictions.csv"))?, &result.records)?;
    cfg.echo_into(dir)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let methods = match &a.methods {
        Some(m) => Method::parse_list(m)?,
        None => a.common.resolve()?.methods()?,
    };
    prepare_dir(&a.out, a.common.force)?;
    let (cfg, result) = run_cv(&a.common, &a.data, &methods, a.folds)?;
    write_cv_outputs(&a.out, &cfg, &result)?;
    print_summary(&result, &methods);
    Ok(())
}

fn cmd_ablate(a: &EvalArgs) -> Result<()> {
    if a.methods.is_some() {
        return Err(usage("ablate runs a fixed method set; --methods is not accepted"));
    }
    let methods: Vec<Method> = Ablation::ALL.iter().map(|&ab| Method::from(ab)).collect();
    prepare_dir(&a.out, a.common.force)?;
    let (cfg, result) = run_cv(&a.common, &a.data, &methods, a.folds)?;
    write_cv_outputs(&a.out, &cfg, &result)?;
    let mut w = csv::Writer::from_writer(create(&a.out.join("ablation.csv"))?);
    w.write_record(["config", "method", "rmse_mean", "rmse_std", "mae_mean", "mae_std"])?;
    for (ab, m) in Ablation::ALL.iter().zip(&methods) {
        let c = result.table.overall(m.name()).ok_or(Error::EmptyInput)?;
        w.write_record([
            ab.label().to_string(),
            m.name().to_string(),
            format!("{:.6}", c.rmse_mean),
            format!("{:.6}", c.rmse_std),
            format!("{:.6}", c.mae_mean),
            format!("{:.6}", c.mae_std),
        ])?;
    }
    w.flush()?;
    print_summary(&result, &methods);
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let method = Method::parse(&a.method)?;
    if method.baseline().is_none() && method != Method::Idw {
        return Err(usage(format!("{} is not a baseline; expected lr, rf, gb, mlp or idw", a.method)));
    }
    let config_path = sibling(&a.out, "config.toml");
    prepare_file(&a.out, a.common.force)?;
    prepare_file(&config_path, a.common.force)?;
    let (cfg, result) = run_cv(&a.common, &a.data, &[method], a.folds)?;
    write_records_csv(create(&a.out)?, &result.records)?;
    std::fs::write(&config_path, cfg.to_toml())?;
    print_summary(&result, &[method]);
    Ok(())
}

fn cmd_residual(a: &ResidualArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let model = SpycerModel::load(&a.checkpoint)?;
    let scene = read_scene(&a.scene)?;
    prepare_file(&a.out, a.common.force)?;
    prepare_file(&a.out.with_extension("json"), a.common.force)?;
    let map = residual_map(&model, &cfg.physics, &scene, &a.date)?;
    write_map(&a.out, &map, "residual", Some(&a.date))?;
    let valid: Vec<f64> = map
        .values
        .iter()
        .zip(&map.nodata_mask)
        .filter(|(_, &nd)| !nd)
        .map(|(&v, _)| v as f64)
        .collect();
    if !valid.is_empty() {
        let rms = (valid.iter().map(|v| v * v).sum::<f64>() / valid.len() as f64).sqrt();
        println!("residual rms {rms:.6} over {} pixels", valid.len());
    }
    Ok(())
}

fn cmd_attn(a: &AttnArgs) -> Result<()> {
    let model = SpycerModel::load(&a.checkpoint)?;
    let (scene, net) = a.data.load()?;
    let sensor = net.get(&a.sensor).ok_or_else(|| usage(format!("unknown sensor {}", a.sensor)))?;
    let patch = extract_patch(&scene, sensor, &a.date)?;
    let map = model.attention(&[&patch], !a.no_gaussian)?;
    match &a.out {
        Some(p) => {
            prepare_file(p, a.force)?;
            write_patch_csv(&map[0], create(p)?)
        }
        None => write_patch_csv(&map[0], std::io::stdout().lock()),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        seeds: a.seeds,
        base_seed: a.seed,
        fault: if a.corrupt_backward { FaultInjection::ReluBackward } else { FaultInjection::None },
        ..Default::default()
    };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.render());
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
            report.max_error(),
            report.tol
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Baseline(a) => cmd_baseline(a),
        Cmd::Residual(a) => cmd_residual(a),
        Cmd::Attn(a) => cmd_attn(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
