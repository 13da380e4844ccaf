mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gridlearn::datagen::{self, DataError};
use gridlearn::eval::{self, EvalError};
use gridlearn::grid::parse_case_with_warnings;
use gridlearn::neural::NeuralError;
use gridlearn::powerflow::violation_report_with;
use gridlearn::trainer::{self, Checkpoint, Predictor, TrainError, TrainOptions};
use gridlearn::{solve_loadflow, CaseError, Family, LoadPoint, Network, OperatingPoint, SolveStatus};
use serde::Serialize;

use config::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Exit 1.
    Domain(String),
    /// Exit 2.
    Input(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Domain(m) | CliError::Input(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "gridlearn", version, about = "Learned AC optimal power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a case file.
    Validate {
        /// Case file path or bundled case name.
        case: String,
    },
    /// Generate a labelled dataset of AC-OPF solutions.
    Generate(Common),
    /// Train a model on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint at --checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also report gaps after load-flow projection.
        #[arg(long)]
        loadflow: bool,
        /// Score the dataset labels instead of model predictions.
        #[arg(long)]
        replay_labels: bool,
        /// Report directory (default: <out_dir>/report).
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Predict setpoints for load snapshots.
    Predict {
        #[command(flatten)]
        common: Common,
        /// JSON file with one load snapshot {"p": [...], "q": [...]} or a list of them (p.u.).
        #[arg(long)]
        loads: PathBuf,
        /// Project each prediction onto the AC-feasible set.
        #[arg(long)]
        project: bool,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project setpoints onto the AC-feasible set for given loads.
    Loadflow {
        #[command(flatten)]
        common: Common,
        /// Load snapshot(s), as for predict.
        #[arg(long)]
        loads: PathBuf,
        /// Setpoint(s) with v, theta, pg, qg (p.u., radians), one per snapshot.
        #[arg(long)]
        setpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

impl Common {
    fn resolve(&self) -> Result<Settings, CliError> {
        Settings::resolve(self.config.as_deref(), &self.settings)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { case } => cmd_validate(&case),
        Command::Generate(c) => c.resolve().and_then(|s| cmd_generate(&s)),
        Command::Train { common, resume } => common.resolve().and_then(|s| cmd_train(&s, resume)),
        Command::Evaluate { common, loadflow, replay_labels, report_dir } => {
            common.resolve().and_then(|s| cmd_evaluate(&s, loadflow, replay_labels, report_dir))
        }
        Command::Predict { common, loads, project, out } => {
            common.resolve().and_then(|s| cmd_predict(&s, &loads, project, out.as_deref()))
        }
        Command::Loadflow { common, loads, setpoint, out } => {
            common.resolve().and_then(|s| cmd_loadflow(&s, &loads, &setpoint, out.as_deref()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn case_error(source: &str, e: CaseError) -> CliError {
    let msg = format!("{source}: {e}");
    match e {
        CaseError::Syntax { .. } | CaseError::MissingTable(_) | CaseError::ShortRow { .. } => CliError::Input(msg),
        _ => CliError::Domain(msg),
    }
}

fn read_case_text(case: &str) -> Result<String, CliError> {
    let path = Path::new(case);
    if path.exists() {
        return std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{case}: {e}")));
    }
    gridlearn::cases::builtin(case).map(String::from).ok_or_else(|| {
        let names: Vec<&str> = gridlearn::cases::names().collect();
        CliError::Input(format!("{case}: no such file or bundled case ({})", names.join(", ")))
    })
}

fn load_network(s: &Settings) -> Result<Network, CliError> {
    let case = s.case.as_deref().ok_or_else(|| CliError::Input("no case given (--case or `case` key)".into()))?;
    let parsed = parse_case_with_warnings(&read_case_text(case)?).map_err(|e| case_error(case, e))?;
    for w in &parsed.warnings {
        log::info!("{case}: {w}");
    }
    let net = parsed.network;
    let diags = net.validate();
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(CliError::Domain(format!("{case}: invalid network\n  {}", lines.join("\n  "))));
    }
    Ok(net)
}

fn cmd_validate(case: &str) -> Result<(), CliError> {
    let text = read_case_text(case)?;
    let parsed = parse_case_with_warnings(&text).map_err(|e| case_error(case, e))?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let net = parsed.network;
    let diags = net.validate();
    for d in &diags {
        println!("{d}");
    }
    if !diags.is_empty() {
        return Err(CliError::Domain(format!("{} diagnostic(s)", diags.len())));
    }
    println!(
        "{}: ok ({} buses, {} generators, {} branches, {} loads)",
        net.name,
        net.n_bus(),
        net.n_gen(),
        net.n_branch(),
        net.n_load()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => {
            std::fs::create_dir_all(d).map_err(|e| CliError::Domain(format!("{}: {e}", d.display())))
        }
        _ => Ok(()),
    }
}

fn cmd_generate(s: &Settings) -> Result<(), CliError> {
    let net = load_network(s)?;
    let gen = s.gen_config()?;
    let solver = s.solver_config()?;
    let path = s.dataset_path();
    ensure_parent(&path)?;
    let t = Instant::now();
    let ds = datagen::generate(&net, &gen, &solver, s.jobs())?;
    let secs = t.elapsed().as_secs_f64();
    datagen::write_dataset(&path, &ds)?;
    let m = &ds.manifest;
    if m.n_discarded > 0 {
        log::warn!("discarded {} of {} snapshot(s)", m.n_discarded, m.n_candidates);
    }
    println!("wrote {} record(s) to {} ({} discarded)", ds.len(), path.display(), m.n_discarded);
    println!("labelling time: {:.1} ms", secs * 1e3);
    Ok(())
}

fn read_dataset(s: &Settings, net: &Network) -> Result<datagen::Dataset, CliError> {
    let path = s.dataset_path();
    if !path.exists() {
        return Err(CliError::Domain(format!("{}: dataset not found", path.display())));
    }
    Ok(datagen::read_dataset(&path, net, s.solver_config()?.feas_tol)?)
}

fn cmd_train(s: &Settings, resume: bool) -> Result<(), CliError> {
    let net = load_network(s)?;
    let cfg = s.train_config()?;
    let ds = read_dataset(s, &net)?;
    let (train_set, test_set) = datagen::split(&ds, cfg.split_ratio, cfg.seed);
    let ck_path = s.checkpoint_path();
    ensure_parent(&ck_path)?;
    let log_path = s.log_path();
    ensure_parent(&log_path)?;
    let resume = if resume { Some(Checkpoint::read(&ck_path)?) } else { None };
    let opts =
        TrainOptions { jobs: s.jobs(), checkpoint_path: Some(ck_path.clone()), log_path: Some(log_path), resume };
    let t = Instant::now();
    let out = trainer::train(&net, &train_set, &cfg, opts)?;
    let secs = t.elapsed().as_secs_f64();
    if let Some(last) = out.log.last() {
        println!(
            "epoch {}: L_o {:.4e}  L_c {:.4e}  train records {}  test records {}",
            last.epoch,
            last.parts.l_o(),
            last.parts.l_c,
            train_set.len(),
            test_set.len()
        );
    }
    println!("wrote {}", ck_path.display());
    println!("training time: {:.1} ms", secs * 1e3);
    Ok(())
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

fn cmd_evaluate(s: &Settings, loadflow: bool, replay: bool, report_dir: Option<PathBuf>) -> Result<(), CliError> {
    let net = load_network(s)?;
    let ck = Checkpoint::read(&s.checkpoint_path())?;
    ck.check_network(&net)?;
    let ds = read_dataset(s, &net)?;
    let (_, test) = datagen::split(&ds, ck.config.split_ratio, ck.config.seed);
    let opts = s.eval_options(loadflow)?;
    let report = if replay {
        let preds: Vec<OperatingPoint> = test.points.iter().map(|p| p.solution.clone()).collect();
        eval::evaluate_predictions(&net, &test.points, &preds, &opts)?
    } else {
        eval::evaluate(&ck, &net, &test.points, &opts)?
    };
    let dir = report_dir.unwrap_or_else(|| s.report_dir());
    eval::write_report(&dir, &report)?;

    let e = &report.errors;
    println!("test records: {}", report.n_test);
    println!(
        "mean abs error: v {:.4} kV  theta {:.4} deg  pg {:.3} MW  qg {:.3} MVAr  pf {:.3} MW  qf {:.3} MVAr",
        e.v_kv, e.theta_deg, e.pg_mw, e.qg_mvar, e.pf_mw, e.qf_mvar
    );
    for f in &report.feasibility {
        println!(
            "  {:<3} satisfied {:>8}%  mean violation {}",
            f.family.to_string(),
            fmt_opt(f.satisfied_pct, 2),
            fmt_opt(f.mean_violation, 5)
        );
    }
    let bounds = [Family::Voltage, Family::ActiveGen, Family::ReactiveGen, Family::Thermal];
    println!("bound families satisfied: {:.2}%", report.pooled_satisfaction_pct(&bounds));
    println!("objective gap: raw {:.4}%  load-flow {}%", report.gaps.raw_pct, fmt_opt(report.gaps.loadflow_pct, 4));
    if let Some(t) = report.timing.predict_median_s {
        println!("predict time (median of {}): {:.3} ms", report.timing.predict_runs, t * 1e3);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let items = match value {
        serde_json::Value::Array(a) => a,
        v => vec![v],
    };
    items
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_output<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Domain(e.to_string()))?;
    match out {
        Some(p) => {
            ensure_parent(p)?;
            std::fs::write(p, text + "\n").map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Setpoint {
    v: Vec<f64>,
    theta: Vec<f64>,
    pg: Vec<f64>,
    qg: Vec<f64>,
    pf: Vec<f64>,
    qf: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance: Option<f64>,
}

impl Setpoint {
    fn new(net: &Network, op: OperatingPoint, distance: Option<f64>) -> Self {
        let f = gridlearn::all_flows(net, &op);
        Setpoint { v: op.v, theta: op.theta, pg: op.pg, qg: op.qg, pf: f.pf, qf: f.qf, distance }
    }
}

fn check_width(net: &Network, load: &LoadPoint, k: usize) -> Result<(), CliError> {
    if load.p.len() != net.n_load() || load.q.len() != net.n_load() {
        return Err(CliError::Domain(format!(
            "snapshot {k}: expected {} load entries, got p {} and q {}",
            net.n_load(),
            load.p.len(),
            load.q.len()
        )));
    }
    Ok(())
}

/// Runs the projection and checks the result against the feasibility tolerance.
fn project(
    net: &Network,
    s: &Settings,
    load: &LoadPoint,
    target: &OperatingPoint,
    k: usize,
) -> Result<(OperatingPoint, f64), CliError> {
    let cfg = s.solver_config()?;
    let out = solve_loadflow(net, load, &target.pg, &target.v, &cfg, Some(target));
    let sol = match (out.status, out.solution) {
        (SolveStatus::Optimal, Some(sol)) => sol,
        (status, _) => return Err(CliError::Domain(format!("snapshot {k}: projection failed ({status:?})"))),
    };
    let report = violation_report_with(net, load, &sol, cfg.thermal);
    if !report.all_within(cfg.feas_tol) {
        return Err(CliError::Domain(format!("snapshot {k}: projected point violates constraints")));
    }
    Ok((sol, out.objective))
}

fn cmd_predict(s: &Settings, loads: &Path, do_project: bool, out: Option<&Path>) -> Result<(), CliError> {
    let net = load_network(s)?;
    let ck = Checkpoint::read(&s.checkpoint_path())?;
    let mut predictor = Predictor::new(&ck, &net)?;
    let loads: Vec<LoadPoint> = read_json(loads)?;
    let mut results = Vec::with_capacity(loads.len());
    let mut times = Vec::with_capacity(loads.len());
    for (k, load) in loads.iter().enumerate() {
        check_width(&net, load, k)?;
        let pred = predictor.predict(load)?;
        times.push(pred.seconds);
        let (point, distance) = if do_project {
            let (p, d) = project(&net, s, load, &pred.point, k)?;
            (p, Some(d))
        } else {
            (pred.point, None)
        };
        results.push(Setpoint::new(&net, point, distance));
    }
    write_output(out, &results)?;
    times.sort_by(f64::total_cmp);
    if !times.is_empty() {
        eprintln!("predict time: {:.3} ms (median of {})", eval::percentile(&times, 50.0) * 1e3, times.len());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct SetpointIn {
    v: Vec<f64>,
    theta: Vec<f64>,
    pg: Vec<f64>,
    qg: Vec<f64>,
}

fn cmd_loadflow(s: &Settings, loads: &Path, setpoints: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let net = load_network(s)?;
    let loads: Vec<LoadPoint> = read_json(loads)?;
    let targets: Vec<SetpointIn> = read_json(setpoints)?;
    if loads.len() != targets.len() {
        return Err(CliError::Input(format!("{} load snapshot(s) but {} setpoint(s)", loads.len(), targets.len())));
    }
    let mut results = Vec::with_capacity(loads.len());
    let t = Instant::now();
    for (k, (load, sp)) in loads.iter().zip(targets).enumerate() {
        check_width(&net, load, k)?;
        let target = OperatingPoint { v: sp.v, theta: sp.theta, pg: sp.pg, qg: sp.qg };
        if target.v.len() != net.n_bus()
            || target.theta.len() != net.n_bus()
            || target.pg.len() != net.n_gen()
            || target.qg.len() != net.n_gen()
        {
            return Err(CliError::Domain(format!("setpoint {k}: dimensions do not match the network")));
        }
        let (p, d) = project(&net, s, load, &target, k)?;
        results.push(Setpoint::new(&net, p, Some(d)));
    }
    let secs = t.elapsed().as_secs_f64();
    write_output(out, &results)?;
    eprintln!("load-flow time: {:.1} ms", secs * 1e3);
    Ok(())
}
