mod config;
mod output;
mod svg;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use securelat_core::observer::spectral_radius;
use securelat_core::plant::{continuous_matrices, generate_trajectory, StateVector};
use securelat_core::sim::{compute_metrics, run_batch, MetricsReport};
use securelat_core::synthesis::{search_feasible_theorem4, SearchBudget, SynthesisOutcome};
use securelat_core::sysid::{build_matrices_general, dmd_identify, persistency_check, simulate_discrete, PersistencyReport};
use securelat_core::{CaseId, RunTrace, Truncation};

use config::{rows_of, Excitation, ModelFile, RunConfig, Source};
use output::{fmt_num, to_json, write_atomic, write_file};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input file; exit code 2.
    Config(String),
    /// Computation failed or diverged; exit code 1.
    Runtime(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "securelat", version, about = "Secure event-triggered lateral control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for excitation and network delays.
    #[arg(long, global = true, env = "SECURELAT_SEED")]
    seed: Option<u64>,
    /// Comma-separated subset of csv,json,svg.
    #[arg(long, global = true, default_value = "csv,json,svg")]
    emit: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an excitation dataset from the plant.
    GenData,
    /// Identify (A, B) from a dataset.
    Identify {
        /// Truncation order or `auto`.
        #[arg(long, default_value = "auto")]
        trunc: String,
        /// Dataset path; defaults to `<out>/dataset.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run closed-loop scenarios.
    Simulate {
        #[arg(long, value_enum, default_value_t = Scenario::All)]
        scenario: Scenario,
    },
    /// Search for a delay-dependent stability certificate.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scenario {
    Case1,
    Case2,
    Case3,
    All,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<String>,
    output_dir: String,
    emitted_files: Vec<String>,
    tool_version: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    persistency: Option<PersistencyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Ctx {
    cfg: RunConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    emit: BTreeSet<String>,
    emitted: Vec<String>,
    persistency: Option<PersistencyReport>,
}

impl Ctx {
    fn wants(&self, kind: &str) -> bool {
        self.emit.contains(kind)
    }

    fn emit_file(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        write_file(&self.out, name, contents)?;
        self.emitted.push(name.to_string());
        Ok(())
    }

    fn finish(&mut self, command: &str, error: Option<String>) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: command.into(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            output_dir: self.out.display().to_string(),
            emitted_files: self.emitted.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            persistency: self.persistency.clone(),
            error,
        };
        write_atomic(&self.out, "manifest.json", to_json(&manifest)?.as_bytes())?;
        Ok(())
    }
}

fn parse_emit(s: &str) -> Result<BTreeSet<String>, CliError> {
    let mut set = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if !["csv", "json", "svg"].contains(&part) {
            return Err(CliError::Config(format!("unknown --emit kind '{part}'")));
        }
        set.insert(part.to_string());
    }
    Ok(set)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("securelat: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref())?;
    let emit = parse_emit(&cli.emit)?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("{}: {e}", cli.out.display())))?;
    let seed = cli.seed.or(cfg.sim.seed).unwrap_or(0);
    let mut ctx = Ctx { cfg, config_path: cli.config, out: cli.out, seed, emit, emitted: Vec::new(), persistency: None };
    let (name, result) = match cli.command {
        Command::GenData => ("gen-data", gen_data(&mut ctx)),
        Command::Identify { trunc, data } => ("identify", identify(&mut ctx, &trunc, data)),
        Command::Simulate { scenario } => ("simulate", simulate(&mut ctx, scenario)),
        Command::Verify => ("verify", verify(&mut ctx)),
    };
    match result {
        Ok(()) => ctx.finish(name, None),
        Err(e) => {
            // runtime failures still leave a manifest describing what was written
            if !matches!(e, CliError::Config(_)) {
                let _ = ctx.finish(name, Some(e.to_string()));
            }
            Err(e)
        }
    }
}

fn state_matrix(states: &[Vec<f64>]) -> DMatrix<f64> {
    let n = states.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, states.len(), |i, j| states[j][i])
}

fn persistency_of(states: &DMatrix<f64>, inputs: &DMatrix<f64>, dt: f64) -> Option<PersistencyReport> {
    let data = build_matrices_general(states, inputs, dt).ok()?;
    let n = data.n_states();
    Some(persistency_check(&data, n, n))
}

fn gen_data(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let dt = cfg.sim.dt_s;
    if !(dt > 0.0) || !(cfg.plant.data_duration_s > 0.0) {
        return Err(CliError::Config("sim.dt_s and plant.data_duration_s must be > 0".into()));
    }
    let rows = (cfg.plant.data_duration_s / dt).round() as usize;
    if rows == 0 {
        return Err(CliError::Config("dataset would be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let amp = cfg.plant.excitation_amplitude;
    let inputs: Vec<f64> = match cfg.plant.excitation {
        Excitation::Uniform if amp > 0.0 => (0..rows).map(|_| rng.gen_range(-amp..=amp)).collect(),
        _ => vec![0.0; rows],
    };
    let x0 = &cfg.plant.data_initial_state;
    let states: Vec<Vec<f64>> = match cfg.plant.data_source {
        Source::Discrete => {
            let model = cfg.model(&ctx.out)?;
            if x0.len() != model.n_states() || model.n_inputs() != 1 {
                return Err(CliError::Config("dataset needs a single-input model matching data_initial_state".into()));
            }
            let u = DMatrix::from_row_slice(1, rows - 1, &inputs[..rows - 1]);
            let xs = simulate_discrete(&model.mat_a, &model.mat_b, &DVector::from_column_slice(x0), &u);
            (0..rows).map(|k| xs.column(k).iter().copied().collect()).collect()
        }
        Source::Continuous => {
            let cm = continuous_matrices(&cfg.vehicle()).map_err(|e| CliError::Config(e.to_string()))?;
            if x0.len() != 4 {
                return Err(CliError::Config("plant.data_initial_state needs 4 entries".into()));
            }
            let s0 = StateVector::from_column_slice(x0);
            let traj = if rows > 1 {
                generate_trajectory(&cm, &s0, &inputs[..rows - 1], dt).map_err(|e| CliError::Runtime(e.to_string()))?
            } else {
                vec![s0]
            };
            traj.iter().map(|s| s.iter().copied().collect()).collect()
        }
    };
    if states.len() > 1 {
        let u = DMatrix::from_row_slice(1, rows, &inputs);
        ctx.persistency = persistency_of(&state_matrix(&states), &u, dt);
        if ctx.persistency.as_ref().is_some_and(|p| !p.passed) {
            log::warn!("dataset input is not persistently exciting");
        }
    }
    if ctx.wants("csv") {
        let bytes = output::dataset_csv(dt, &states, &inputs)?;
        ctx.emit_file("dataset.csv", &bytes)?;
    }
    Ok(())
}

fn identify(ctx: &mut Ctx, trunc: &str, data: Option<PathBuf>) -> Result<(), CliError> {
    let trunc: Truncation = trunc.parse().map_err(|e: securelat_core::Error| CliError::Config(e.to_string()))?;
    let path = data.unwrap_or_else(|| ctx.out.join("dataset.csv"));
    let (dt_file, states, inputs) = output::read_dataset(&path)?;
    if states.len() < 2 {
        return Err(CliError::Runtime(format!("{}: need at least 2 data rows, got {}", path.display(), states.len())));
    }
    let dt = if dt_file > 0.0 { dt_file } else { ctx.cfg.sim.dt_s };
    let x = state_matrix(&states);
    let u = DMatrix::from_row_slice(1, inputs.len(), &inputs);
    let data = build_matrices_general(&x, &u, dt).map_err(|e| CliError::Runtime(e.to_string()))?;
    let pers = persistency_check(&data, data.n_states(), data.n_states());
    let model = dmd_identify(&data, trunc).map_err(|e| CliError::Runtime(e.to_string()))?;
    let file = ModelFile {
        a: rows_of(&model.mat_a),
        b: rows_of(&model.mat_b),
        r: model.trunc_order,
        residual_fro: model.residual_fro,
        persistency: pers.passed,
        sample_period_s: dt,
    };
    ctx.persistency = Some(pers);
    if ctx.wants("json") {
        ctx.emit_file("model.json", to_json(&file)?.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ComparisonRow {
    metric: String,
    case1: Option<f64>,
    case2: Option<f64>,
    case3: Option<f64>,
    /// `100 (1 - case3 / case2)`; positive means Case III is lower.
    reduction_case3_vs_case2_pct: Option<f64>,
}

fn comparison(reports: &[(CaseId, MetricsReport)]) -> Result<Vec<ComparisonRow>, CliError> {
    let as_map = |m: &MetricsReport| -> Result<serde_json::Map<String, serde_json::Value>, CliError> {
        match serde_json::to_value(m).map_err(|e| CliError::Runtime(e.to_string()))? {
            serde_json::Value::Object(o) => Ok(o),
            _ => Err(CliError::Runtime("metrics did not serialize to an object".into())),
        }
    };
    let get = |id: CaseId| reports.iter().find(|(c, _)| *c == id).map(|(_, m)| as_map(m)).transpose();
    let (m1, m2, m3) = (get(CaseId::I)?, get(CaseId::II)?, get(CaseId::III)?);
    let Some(keys) = m1.as_ref().or(m2.as_ref()).or(m3.as_ref()).map(|m| m.keys().cloned().collect::<Vec<_>>()) else {
        return Ok(Vec::new());
    };
    let val = |m: &Option<serde_json::Map<String, serde_json::Value>>, k: &str| m.as_ref().and_then(|m| m.get(k)).and_then(|v| v.as_f64());
    Ok(keys
        .iter()
        .map(|k| {
            let (c1, c2, c3) = (val(&m1, k), val(&m2, k), val(&m3, k));
            let red = match (c2, c3) {
                (Some(b), Some(c)) if b != 0.0 => Some(100.0 * (1.0 - c / b)),
                _ => None,
            };
            ComparisonRow { metric: k.clone(), case1: c1, case2: c2, case3: c3, reduction_case3_vs_case2_pct: red }
        })
        .collect())
}

fn case_name(c: CaseId) -> &'static str {
    match c {
        CaseId::I => "Case I",
        CaseId::II => "Case II",
        CaseId::III => "Case III",
    }
}

fn plots(traces: &[&RunTrace]) -> Vec<(&'static str, String)> {
    use svg::{Panel, Series, Style};
    let line = |tr: &RunTrace, f: &dyn Fn(&securelat_core::StepRecord) -> f64| Series {
        name: case_name(tr.case_id).into(),
        points: tr.records.iter().map(|r| (r.t, f(r))).collect(),
        style: Style::Line,
    };
    let names = ["e_d [m]", "e_d_dot [m/s]", "e_phi [rad]", "e_phi_dot [rad/s]"];
    let states: Vec<Panel> = names
        .iter()
        .enumerate()
        .map(|(i, n)| Panel {
            title: n.to_string(),
            y_label: n.to_string(),
            series: traces.iter().map(|tr| line(tr, &|r| r.state[i])).collect(),
        })
        .collect();
    let control = vec![Panel {
        title: "applied control".into(),
        y_label: "u [rad]".into(),
        series: traces.iter().map(|tr| line(tr, &|r| r.u)).collect(),
    }];
    let mut sliding_series: Vec<Series> = traces.iter().map(|tr| line(tr, &|r| r.surface_s)).collect();
    if let Some(tr) = traces.first() {
        let xi = tr.level_xi;
        let t_end = tr.records.last().map_or(0.0, |r| r.t);
        sliding_series.push(Series { name: "+xi".into(), points: vec![(0.0, xi), (t_end, xi)], style: Style::Dashed });
        sliding_series.push(Series { name: "-xi".into(), points: vec![(0.0, -xi), (t_end, -xi)], style: Style::Dashed });
    }
    let sliding = vec![Panel { title: "sliding variable".into(), y_label: "S".into(), series: sliding_series }];
    let release: Vec<Panel> = traces
        .iter()
        .map(|tr| Panel {
            title: format!("{}: release intervals", case_name(tr.case_id)),
            y_label: "interval [s]".into(),
            series: vec![Series {
                name: case_name(tr.case_id).into(),
                points: tr.event_log.iter().skip(1).map(|&(k, g)| (k as f64 * tr.dt_s, g as f64 * tr.dt_s)).collect(),
                style: Style::Dots,
            }],
        })
        .collect();
    vec![
        ("states.svg", svg::render("State trajectories", "t [s]", &states)),
        ("control.svg", svg::render("Control input", "t [s]", &control)),
        ("sliding.svg", svg::render("Sliding variable and secure domain", "t [s]", &sliding)),
        ("release_intervals.svg", svg::render("Event release intervals", "t [s]", &release)),
    ]
}

fn simulate(ctx: &mut Ctx, scenario: Scenario) -> Result<(), CliError> {
    let requested: Vec<CaseId> = match scenario {
        Scenario::Case1 => vec![CaseId::I],
        Scenario::Case2 => vec![CaseId::II],
        Scenario::Case3 => vec![CaseId::III],
        Scenario::All => CaseId::ALL.to_vec(),
    };
    let mut to_run = requested.clone();
    // Case III effectiveness is measured against the uncompensated run.
    if requested.contains(&CaseId::III) && !requested.contains(&CaseId::II) {
        to_run.push(CaseId::II);
    }
    let cfgs = to_run
        .iter()
        .map(|&c| ctx.cfg.scenario(c, &ctx.out, ctx.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let traces = run_batch(&cfgs)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let baseline = traces.iter().find(|t| t.case_id == CaseId::II);
    let shown: Vec<&RunTrace> = traces.iter().filter(|t| requested.contains(&t.case_id)).collect();

    let mut reports = Vec::new();
    for tr in &shown {
        let slug = tr.case_id.slug();
        if ctx.wants("csv") {
            let bytes = output::trace_csv(tr)?;
            ctx.emit_file(&format!("trace_{slug}.csv"), &bytes)?;
        }
        let m = compute_metrics(tr, baseline);
        if ctx.wants("json") {
            ctx.emit_file(&format!("metrics_{slug}.json"), to_json(&m)?.as_bytes())?;
        }
        reports.push((tr.case_id, m));
    }
    if scenario == Scenario::All && ctx.wants("json") {
        ctx.emit_file("comparison.json", to_json(&comparison(&reports)?)?.as_bytes())?;
    }
    if ctx.wants("svg") {
        for (name, body) in plots(&shown) {
            ctx.emit_file(name, body.as_bytes())?;
        }
    }
    let aborted: Vec<String> = shown
        .iter()
        .filter_map(|t| t.abort.as_ref().map(|a| format!("{}: {a}", t.case_id.slug())))
        .collect();
    if !aborted.is_empty() {
        return Err(CliError::Runtime(aborted.join("; ")));
    }
    for (c, m) in &reports {
        println!(
            "{}: lateral_rmse_m={} transmission_ratio_pct={} sliding_max_deviation={}",
            c.slug(),
            fmt_num(m.lateral_rmse_m),
            fmt_num(m.transmission_ratio_pct),
            fmt_num(m.sliding_max_deviation)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CertificateReport {
    feasible: bool,
    max_eigenvalue: f64,
    gain_k: Option<Vec<f64>>,
    gain_source: &'static str,
    closed_loop_spectral_radius: Option<f64>,
    xi: Option<f64>,
    mu: f64,
    delta_bar_steps: usize,
    iterations: usize,
    mat_e: Option<Vec<Vec<f64>>>,
    mat_y: Option<Vec<Vec<f64>>>,
}

fn verify(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let model = cfg.model(&ctx.out)?;
    let mu = cfg.trigger.mu;
    if !(0.0..=1.0).contains(&mu) {
        return Err(CliError::Config(format!("trigger.mu must lie in [0, 1], got {mu}")));
    }
    let db = cfg.max_delay_steps()?;
    if cfg.sim.search_iterations == 0 {
        return Err(CliError::Config("sim.search_iterations must be > 0".into()));
    }
    let configured = match cfg.gain(&model) {
        Ok(k) => Some(k),
        Err(CliError::Config(m)) => return Err(CliError::Config(m)),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    };
    let warm = configured.as_ref().map(|k| DMatrix::from_row_slice(1, k.len(), k.as_slice()));
    let outcome = search_feasible_theorem4(
        &model.mat_a,
        &model.mat_b,
        mu,
        db as f64,
        SearchBudget { iterations: cfg.sim.search_iterations },
        warm.as_ref(),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let radius = |k: &DMatrix<f64>| spectral_radius(&(&model.mat_a + &model.mat_b * k));
    let report = match &outcome {
        SynthesisOutcome::Feasible(c) => CertificateReport {
            feasible: true,
            max_eigenvalue: c.max_eigenvalue,
            gain_k: Some(c.gain_k.iter().copied().collect()),
            gain_source: "certificate",
            closed_loop_spectral_radius: Some(radius(&c.gain_k)),
            xi: cfg.level_xi(&model),
            mu,
            delta_bar_steps: db,
            iterations: c.iterations,
            mat_e: Some(rows_of(&c.mat_e)),
            mat_y: Some(rows_of(&c.mat_y)),
        },
        SynthesisOutcome::Infeasible(r) => CertificateReport {
            feasible: false,
            max_eigenvalue: r.best_max_eigenvalue,
            gain_k: warm.as_ref().map(|k| k.iter().copied().collect()),
            gain_source: "configured",
            closed_loop_spectral_radius: warm.as_ref().map(radius),
            xi: cfg.level_xi(&model),
            mu,
            delta_bar_steps: db,
            iterations: r.iterations,
            mat_e: None,
            mat_y: None,
        },
    };
    println!(
        "feasible={} max_eigenvalue={} delta_bar_steps={db}",
        report.feasible,
        fmt_num(report.max_eigenvalue)
    );
    if ctx.wants("json") {
        ctx.emit_file("certificate.json", to_json(&report)?.as_bytes())?;
    }
    Ok(())
}
