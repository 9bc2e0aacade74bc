//! `ihm`: validate complexes and metrics, count dimensions, solve for
//! energy-minimizing maps and verify them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use ihm_core::complex::{samples, Complex, ComplexSpec};
use ihm_core::energy::{InitialMapOptions, Mode};
use ihm_core::io::MapFile;
use ihm_core::mesh::MeshConfig;
use ihm_core::metric::{dims, IdealMetric, COMPLETENESS_TOL};
use ihm_core::solver::{solve_with_exhaustion, SolverConfig, StageReport};
use ihm_core::verify::{diagnose, edge_balance, hopf, DiagnosticsReport, VerifyConfig};

/// Default output directory when `--out` is not given.
const OUT_ENV: &str = "IHM_OUT";

#[derive(Parser, Debug)]
#[command(name = "ihm", version, about = "Harmonic maps between ideal hyperbolic simplicial complexes")]
struct Cli {
    /// Worker threads; 1 is the serial reference behaviour, 0 picks all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check a complex and, optionally, metrics on it.
    Validate {
        #[arg(long)]
        complex: String,
        #[arg(long)]
        metric: Vec<String>,
    },
    /// Metric, relation and Teichmüller dimensions of a complex.
    Dims {
        #[arg(long)]
        complex: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Completeness residuals of a metric at every link cycle.
    CompleteCheck {
        #[arg(long)]
        complex: String,
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = COMPLETENESS_TOL)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Minimize the harmonic energy and write the map, report, trace and manifest.
    Solve(SolveArgs),
    /// Diagnostics of a solved map: Hopf differential, edge balance, PDE residual, degree.
    Verify(VerifyArgs),
    /// Summary table of a solve and verify run.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    complex: String,
    /// Domain metric: a JSON file, `zero` or `random:SEED`.
    #[arg(long)]
    sigma: String,
    /// Target metric, same forms as `--sigma`.
    #[arg(long)]
    tau: String,
    #[arg(long, value_enum, default_value_t = ModeArg::W)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.1)]
    h: f64,
    #[arg(long, default_value = "2")]
    ycut_schedule: String,
    /// Cusp stretch of the initial map: one value, or one per vertex.
    #[arg(long, default_value = "1")]
    stretch: String,
    #[arg(long, default_value_t = 30)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-12)]
    gradient_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the final mesh to `mesh.json`.
    #[arg(long)]
    dump_mesh: bool,
}

#[derive(clap::Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    map: PathBuf,
    /// Path of the diagnostics JSON; CSV profiles go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    y_interior: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    W,
    D,
}

#[derive(Debug)]
enum CliError {
    Lib(ihm_core::Error),
    Io { path: String, message: String },
    Usage(String),
    Incomplete { max_residual: f64, tol: f64 },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Lib(e) => e.kind(),
            CliError::Io { .. } => "IoError",
            CliError::Usage(_) => "UsageError",
            CliError::Incomplete { .. } => "IncompleteMetric",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Lib(e) => e.to_string(),
            CliError::Io { path, message } => format!("{path}: {message}"),
            CliError::Usage(m) => m.clone(),
            CliError::Incomplete { max_residual, tol } => {
                format!("largest completeness residual {max_residual:e} exceeds {tol:e}")
            }
        }
    }
}

impl<E: Into<ihm_core::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Lib(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Outcome of a successful command.
enum Done {
    Ok,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().trim_end().to_owned())),
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            return fail(&CliError::Usage(e.to_string()));
        }
    }
    match run(&cli) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::NotConverged) => ExitCode::from(2),
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": e.kind(), "message": e.message() });
    eprintln!("{body}");
    ExitCode::from(1)
}

fn run(cli: &Cli) -> Result<Done> {
    match &cli.cmd {
        Cmd::Validate { complex, metric } => validate(complex, metric),
        Cmd::Dims { complex, format } => dims_cmd(complex, *format),
        Cmd::CompleteCheck {
            complex,
            metric,
            tol,
            format,
        } => complete_check(complex, metric, *tol, *format),
        Cmd::Solve(args) => solve(args, cli.threads),
        Cmd::Verify(args) => verify(args),
        Cmd::Report { run } => report(&run.clone().unwrap_or_else(out_dir)),
    }
}

/// An input and the exact text it was read from.
struct Input<T> {
    value: T,
    source: String,
    text: String,
}

impl<T> Input<T> {
    fn record(&self) -> InputRecord {
        InputRecord {
            source: self.source.clone(),
            sha256: hex::encode(Sha256::digest(self.text.as_bytes())),
        }
    }
}

#[derive(Serialize)]
struct InputRecord {
    source: String,
    sha256: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// `sample:NAME` or a path to a JSON complex description.
fn load_complex(arg: &str) -> Result<Input<Arc<Complex>>> {
    let (spec, text) = match arg.strip_prefix("sample:") {
        Some(name) => {
            let spec: ComplexSpec = match name {
                "double-triangle" => samples::double_triangle(),
                "isolated-triangle" => samples::isolated_triangle(),
                "book" => samples::book(),
                _ => return Err(CliError::Usage(format!("unknown sample complex `{name}`"))),
            };
            let text = serde_json::to_string(&spec).expect("specs serialize");
            (spec, text)
        }
        None => {
            let text = read(Path::new(arg))?;
            let spec = ComplexSpec::from_json(&text).map_err(|e| ihm_core::error::ComplexError::Parse(e.to_string()))?;
            (spec, text)
        }
    };
    Ok(Input {
        value: Arc::new(Complex::build(&spec)?),
        source: arg.to_owned(),
        text,
    })
}

/// `zero`, `random:SEED` (a random complete metric) or a path.
fn load_metric(complex: &Arc<Complex>, arg: &str) -> Result<Input<IdealMetric>> {
    let value = if arg == "zero" {
        IdealMetric::zero(complex.clone())
    } else if let Some(seed) = arg.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("bad seed in `{arg}`")))?;
        IdealMetric::random_complete(complex.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        let text = read(Path::new(arg))?;
        let value = IdealMetric::from_json(complex.clone(), &text)?;
        return Ok(Input {
            value,
            source: arg.to_owned(),
            text,
        });
    };
    let text = serde_json::to_string(&value.to_file()).expect("metrics serialize");
    Ok(Input {
        value,
        source: arg.to_owned(),
        text,
    })
}

fn out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("run"))
}

#[derive(Serialize)]
struct DimsOut {
    #[serde(rename = "F")]
    f: usize,
    #[serde(rename = "E")]
    e: usize,
    #[serde(rename = "V")]
    v: usize,
    metric_dim: usize,
    relations: usize,
    teich_dim: usize,
}

fn dims_of(c: &Complex) -> DimsOut {
    let d = dims(c);
    let k = c.counts();
    DimsOut {
        f: k.faces,
        e: k.edges,
        v: k.vertices,
        metric_dim: d.metric_dim,
        relations: d.relation_count,
        teich_dim: d.teich_dim,
    }
}

fn table(rows: &[(String, String)]) -> String {
    let w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<w$}  {v:>12}");
    }
    s
}

fn validate(complex: &str, metrics: &[String]) -> Result<Done> {
    let c = load_complex(complex)?;
    let mut complete = Vec::new();
    for m in metrics {
        let metric = load_metric(&c.value, m)?;
        complete.push(metric.value.is_complete(COMPLETENESS_TOL));
    }
    let k = c.value.counts();
    let out = serde_json::json!({
        "valid": true,
        "F": k.faces,
        "E": k.edges,
        "V": k.vertices,
        "singular_edges": k.singular_edges,
        "metrics_complete": complete,
    });
    println!("{out}");
    Ok(Done::Ok)
}

fn dims_cmd(complex: &str, format: Format) -> Result<Done> {
    let d = dims_of(&load_complex(complex)?.value);
    match format {
        Format::Json => println!("{}", serde_json::to_string(&d).expect("dims serialize")),
        Format::Text => print!(
            "{}",
            table(&[
                ("F".into(), d.f.to_string()),
                ("E".into(), d.e.to_string()),
                ("V".into(), d.v.to_string()),
                ("metric_dim".into(), d.metric_dim.to_string()),
                ("relations".into(), d.relations.to_string()),
                ("teich_dim".into(), d.teich_dim.to_string()),
            ])
        ),
    }
    Ok(Done::Ok)
}

#[derive(Serialize)]
struct ResidualRow {
    vertex: usize,
    cycle: usize,
    residual: f64,
}

fn complete_check(complex: &str, metric: &str, tol: f64, format: Format) -> Result<Done> {
    let c = load_complex(complex)?;
    let m = load_metric(&c.value, metric)?.value;
    let rows: Vec<ResidualRow> = m
        .completeness_residuals()
        .into_iter()
        .map(|r| ResidualRow {
            vertex: r.vertex,
            cycle: r.cycle_index,
            residual: r.residual,
        })
        .collect();
    let max_residual = rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let complete = max_residual <= tol;
    match format {
        Format::Json => println!(
            "{}",
            serde_json::json!({ "complete": complete, "tol": tol, "max_residual": max_residual, "residuals": rows })
        ),
        Format::Text => {
            let mut t = vec![("vertex/cycle".to_owned(), "residual".to_owned())];
            t.extend(rows.iter().map(|r| (format!("{}/{}", r.vertex, r.cycle), format!("{:.3e}", r.residual))));
            print!("{}", table(&t));
        }
    }
    if complete {
        Ok(Done::Ok)
    } else {
        Err(CliError::Incomplete { max_residual, tol })
    }
}

fn parse_list(arg: &str, what: &str) -> Result<Vec<f64>> {
    arg.split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("{what}: expected comma-separated numbers, got `{arg}`")))
}

#[derive(Serialize)]
struct SolveReport<'a> {
    mode: Mode,
    converged: bool,
    energy: f64,
    truncated_area: f64,
    seed: u64,
    mesh: MeshConfig,
    solver: &'a SolverConfig,
    stages: &'a [StageReport],
}

#[derive(Serialize)]
struct TraceRow {
    stage: usize,
    y_cut: f64,
    iteration: usize,
    objective: f64,
    energy: f64,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    inputs: Vec<InputRecord>,
    config: C,
    outputs: Vec<String>,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

fn solve(args: &SolveArgs, threads: usize) -> Result<Done> {
    let c = load_complex(&args.complex)?;
    let sigma = load_metric(&c.value, &args.sigma)?;
    let tau = load_metric(&c.value, &args.tau)?;
    let schedule = parse_list(&args.ycut_schedule, "--ycut-schedule")?;
    let mut stretch = parse_list(&args.stretch, "--stretch")?;
    let nv = c.value.vertices().len();
    if stretch.len() == 1 {
        stretch = vec![stretch[0]; nv];
    } else if stretch.len() != nv {
        return Err(CliError::Usage(format!("--stretch needs 1 or {nv} values")));
    }
    let mesh_cfg = MeshConfig::new(args.h, schedule[0]);
    let cfg = SolverConfig {
        mode: match args.mode {
            ModeArg::W => Mode::W,
            ModeArg::D => Mode::D,
        },
        max_iterations: args.max_iterations,
        gradient_tol: args.gradient_tol,
        schedule,
        parallel: threads != 1,
        ..SolverConfig::default()
    };
    let init = InitialMapOptions { cusp_stretch: stretch };
    let run = solve_with_exhaustion(&sigma.value, &tau.value, &mesh_cfg, &init, &cfg)?;
    let last = run.stages.last().expect("at least one stage");
    let converged = run.stages.iter().all(|s| s.report.converged);
    let out = args.out.clone().unwrap_or_else(out_dir);
    let mut outputs = vec!["map.json", "report.json", "trace.csv"];
    write(&out.join("map.json"), &to_json(&MapFile::from_map(&run.map)))?;
    write(
        &out.join("report.json"),
        &to_json(&SolveReport {
            mode: cfg.mode,
            converged,
            energy: last.report.energy,
            truncated_area: last.truncated_area,
            seed: args.seed,
            mesh: run.map.mesh.config,
            solver: &cfg,
            stages: &run.stages,
        }),
    )?;
    write_csv(
        &out.join("trace.csv"),
        run.stages.iter().enumerate().flat_map(|(k, s)| {
            s.report
                .trace
                .iter()
                .zip(&s.report.energy_trace)
                .enumerate()
                .map(move |(i, (&objective, &energy))| TraceRow {
                    stage: k,
                    y_cut: s.y_cut,
                    iteration: i,
                    objective,
                    energy,
                })
        }),
    )?;
    if args.dump_mesh {
        write(&out.join("mesh.json"), &to_json(&run.map.mesh.dump()))?;
        outputs.push("mesh.json");
    }
    write(
        &out.join("manifest.json"),
        &to_json(&Manifest {
            command: "solve",
            version: env!("CARGO_PKG_VERSION"),
            seed: args.seed,
            threads,
            inputs: vec![c.record(), sigma.record(), tau.record()],
            config: serde_json::json!({ "mesh": mesh_cfg, "solver": cfg, "initial_map": init }),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "converged": converged,
            "energy": last.report.energy,
            "truncated_area": last.truncated_area,
            "iterations": last.report.iterations,
            "out": out.display().to_string(),
        })
    );
    Ok(if converged { Done::Ok } else { Done::NotConverged })
}

#[derive(Serialize)]
struct BalanceRow {
    edge: usize,
    y: f64,
    flux: f64,
    hopf_im: f64,
    central: bool,
}

#[derive(Serialize)]
struct HopfRow {
    face: usize,
    triangle: usize,
    x: f64,
    y: f64,
    re: f64,
    im: f64,
    interior: bool,
}

fn verify(args: &VerifyArgs) -> Result<Done> {
    let text = read(&args.map)?;
    let file: MapFile = serde_json::from_str(&text).map_err(|e| io_err(&args.map, e))?;
    let u = file.to_map()?;
    let defaults = VerifyConfig::default();
    let cfg = VerifyConfig {
        y_interior: args.y_interior.unwrap_or(defaults.y_interior),
        degree_samples: args.samples.unwrap_or(defaults.degree_samples),
        seed: args.seed.unwrap_or(defaults.seed),
    };
    if cfg.degree_samples < 25 {
        return Err(CliError::Usage("--samples must be at least 25".into()));
    }
    let opts = ihm_core::energy::EnergyOptions::default();
    let d = diagnose(&u, &cfg, &opts)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir().join("diag.json"));
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    write(&out, &to_json(&d))?;
    write_csv(
        &dir.join("balance.csv"),
        (0..u.complex().edges().len()).flat_map(|e| {
            edge_balance(&u, e, &opts).samples.into_iter().map(move |s| BalanceRow {
                edge: e,
                y: s.y,
                flux: s.flux,
                hopf_im: s.hopf_im,
                central: s.central,
            })
        }),
    )?;
    let mut rows = Vec::new();
    for t in 0..u.targets.len() {
        let h = hopf(&u, t, &cfg);
        for (k, tri) in h.triangles.iter().enumerate() {
            let p = tri.map(|i| h.nodes[i]);
            rows.push(HopfRow {
                face: t,
                triangle: k,
                x: (p[0].x + p[1].x + p[2].x) / 3.0,
                y: (p[0].y + p[1].y + p[2].y) / 3.0,
                re: h.values[k].re,
                im: h.values[k].im,
                interior: h.interior[k],
            });
        }
    }
    write_csv(&dir.join("hopf.csv"), rows)?;
    write(
        &dir.join("manifest-verify.json"),
        &to_json(&Manifest {
            command: "verify",
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            threads: rayon::current_num_threads(),
            inputs: vec![InputRecord {
                source: args.map.display().to_string(),
                sha256: hex::encode(Sha256::digest(text.as_bytes())),
            }],
            config: cfg,
            outputs: vec![
                out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                "balance.csv".into(),
                "hopf.csv".into(),
            ],
        }),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "degree": d.degree.degree,
            "hopf_dbar_norm": d.hopf_dbar_norm,
            "max_strong_balance": d.strong_balance_residual.iter().copied().fold(0.0, f64::max),
            "max_pde_residual": d.pde_residual.iter().copied().fold(0.0, f64::max),
            "out": out.display().to_string(),
        })
    );
    Ok(Done::Ok)
}

fn report(run: &Path) -> Result<Done> {
    let solve: serde_json::Value =
        serde_json::from_str(&read(&run.join("report.json"))?).map_err(|e| io_err(&run.join("report.json"), e))?;
    let diag_path = run.join("diag.json");
    let diag: Option<DiagnosticsReport> = if diag_path.exists() {
        Some(serde_json::from_str(&read(&diag_path)?).map_err(|e| io_err(&diag_path, e))?)
    } else {
        None
    };
    let num = |v: &serde_json::Value| v.as_f64().map_or("-".to_owned(), |x| format!("{x:.6e}"));
    let mut rows = vec![
        ("mode".to_owned(), solve["mode"].as_str().unwrap_or("-").to_owned()),
        ("converged".to_owned(), solve["converged"].to_string()),
        ("energy".to_owned(), num(&solve["energy"])),
        ("2 x truncated area".to_owned(), solve["truncated_area"].as_f64().map_or("-".into(), |a| format!("{:.6e}", 2.0 * a))),
    ];
    if let Some(stages) = solve["stages"].as_array() {
        for s in stages {
            rows.push((
                format!("stage Y={} iterations", s["y_cut"]),
                s["report"]["iterations"].to_string(),
            ));
            if let Some(x) = s["stability"].as_f64() {
                rows.push((format!("stage Y={} stability", s["y_cut"]), format!("{x:.3e}")));
            }
        }
    }
    if let Some(d) = diag {
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        rows.extend([
            ("degree".to_owned(), d.degree.degree.to_string()),
            ("hopf dbar norm".to_owned(), format!("{:.3e}", d.hopf_dbar_norm)),
            ("max hopf imbalance".to_owned(), format!("{:.3e}", max(&d.edge_hopf_imbalance))),
            ("max strong balance".to_owned(), format!("{:.3e}", max(&d.strong_balance_residual))),
            ("max pde residual".to_owned(), format!("{:.3e}", max(&d.pde_residual))),
            (
                "min jacobian".to_owned(),
                format!("{:.3e}", d.min_jacobian.iter().copied().fold(f64::INFINITY, f64::min)),
            ),
            ("sup |du|^2 / E".to_owned(), format!("{:.3e}", d.lipschitz.ratio)),
            ("edge bound ratio".to_owned(), format!("{:.3e}", d.lipschitz.edge_y_ratio.max(d.lipschitz.edge_x_ratio))),
        ]);
    }
    print!("{}", table(&rows));
    Ok(Done::Ok)
}
