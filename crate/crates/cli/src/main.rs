//! Command-line driver for the multigrid eigensolver: `solve` writes a JSON
//! run report, `study` writes a per-(level, index) convergence CSV, and
//! `compare` tabulates multigrid work against direct-reference work per
//! level. Exit codes: 0 success, 1 numerical failure, 2 configuration error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};

use eigmg::assembly::ProblemDefinition;
use eigmg::eigensolve::{
    eigen_multigrid_multi_track, eigen_multigrid_track, EigenSet, FormsHierarchy, LevelTrace,
    ShiftConfig, ShiftMode, SolverOptions,
};
use eigmg::mesh::{build_hierarchy, generate_unit_square, load_mesh, TriangleMesh};
use eigmg::verify::{convergence_study, direct_discrete_solve, DirectOptions, StudyOptions};
use eigmg::Result;

const STUDY_HEADER: &str =
    "level,ndof,j,lambda_mg,lambda_dir,err_lambda_exact,err_energy,theta_measured,alpha,matvec_total,wall_seconds";
const COMPARE_HEADER: &str =
    "level,ndof,lambda_mg,lambda_dir,mg_matvec,dir_matvec,mg_seconds,dir_seconds";

#[derive(Parser)]
#[command(
    name = "eigmg",
    version,
    about = "Multigrid eigensolver for elliptic eigenvalue problems on nested triangular meshes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scheme and write a JSON report.
    Solve(RunArgs),
    /// Write a convergence CSV: one row per (level, eigenvalue index).
    Study(RunArgs),
    /// Write a work-comparison CSV: multigrid vs direct solve per level.
    Compare(RunArgs),
}

/// Every knob is optional on the command line; unset values fall back to the
/// config file (if given) and then to built-in defaults.
#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in problem: laplace or general-ex2 [default: laplace].
    #[arg(long)]
    problem: Option<String>,
    /// Coarse mesh file (`nv nt`, vertex lines `x y b`, triangle lines `i j k`).
    #[arg(long, value_name = "FILE", conflicts_with = "n")]
    mesh_file: Option<PathBuf>,
    /// Built-in n-by-n structured coarse mesh [default: 8].
    #[arg(long)]
    n: Option<usize>,
    /// Hierarchy depth including the coarse level [default: 4].
    #[arg(long)]
    levels: Option<usize>,
    /// Number of tracked eigenpairs [default: 1].
    #[arg(long)]
    nev: Option<usize>,
    /// Shift selection: paper, zero, or rayleigh [default: paper].
    #[arg(long, value_name = "MODE")]
    shift_mode: Option<String>,
    /// Gap weight of the shift formula; must exceed 1 [default: 8].
    #[arg(long)]
    sigma: Option<f64>,
    /// Correction steps per level [default: 1].
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Relative tolerance of the inner conjugate-gradient solves
    /// [default: 1e-10].
    #[arg(long)]
    cg_tol: Option<f64>,
    /// Largest dimension for which direct references are computed
    /// [default: 300000].
    #[arg(long)]
    direct_cap: Option<usize>,
    /// Output path; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Report all wall times as 0.0, making output byte-reproducible.
    #[arg(long, action = ArgAction::SetTrue)]
    no_timing: bool,
    /// Random seed for the iterative reference solver's start vectors
    /// [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Include the finest-level eigenvector coefficients in the JSON report.
    #[arg(long, action = ArgAction::SetTrue)]
    dump_vectors: bool,
}

/// Fully resolved run configuration.
struct RunConfig {
    problem: ProblemDefinition,
    mesh_label: serde_json::Value,
    coarse: TriangleMesh,
    levels: usize,
    nev: usize,
    shift: ShiftConfig,
    solver: SolverOptions,
    direct: DirectOptions,
    out: Option<PathBuf>,
    dump_vectors: bool,
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("EIGMG_LOG")).init();
    let cli = Cli::parse();
    let (args, run): (&RunArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Solve(a) => (a, cmd_solve),
        Command::Study(a) => (a, cmd_study),
        Command::Compare(a) => (a, cmd_compare),
    };
    let config = match build_config(args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("eigmg: {msg}");
            return std::process::ExitCode::from(2);
        }
    };
    match run(&config) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eigmg: {e}");
            std::process::ExitCode::from(1)
        }
    }
}

/// Merges flags over config-file entries over defaults and validates the
/// result. Every failure is a configuration error.
fn build_config(args: &RunArgs) -> std::result::Result<RunConfig, String> {
    let mut file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    let problem_name = args
        .problem
        .clone()
        .or_else(|| file.remove("problem"))
        .unwrap_or_else(|| "laplace".into());
    let problem = ProblemDefinition::by_name(&problem_name).map_err(|e| e.to_string())?;

    let file_mesh: Option<PathBuf> = file.remove("mesh-file").map(PathBuf::from);
    let file_n: Option<usize> = take(&mut file, "n")?;
    let levels: usize = args.levels.or(take(&mut file, "levels")?).unwrap_or(4);
    let nev: usize = args.nev.or(take(&mut file, "nev")?).unwrap_or(1);

    let mut shift = ShiftConfig::default();
    if let Some(mode) = args.shift_mode.clone().or_else(|| file.remove("shift-mode")) {
        shift.mode = ShiftMode::from_str(&mode).map_err(|e| e.to_string())?;
    }
    shift.sigma = args.sigma.or(take(&mut file, "sigma")?).unwrap_or(shift.sigma);
    shift.inner_steps = args
        .inner_steps
        .or(take(&mut file, "inner-steps")?)
        .unwrap_or(shift.inner_steps);

    let mut solver = SolverOptions::default();
    let mut direct = DirectOptions::default();
    if let Some(tol) = args.cg_tol.or(take(&mut file, "cg-tol")?) {
        solver.cg_tol = tol;
        direct.cg_tol = tol;
    }
    if let Some(cap) = args.direct_cap.or(take(&mut file, "direct-cap")?) {
        direct.iterative_budget = cap;
        direct.dense_budget = direct.dense_budget.min(cap);
    }
    direct.seed = args.seed.or(take(&mut file, "seed")?).unwrap_or(direct.seed);
    solver.timing = !(args.no_timing || take(&mut file, "no-timing")?.unwrap_or(false));
    let dump_vectors = args.dump_vectors || take(&mut file, "dump-vectors")?.unwrap_or(false);
    let out = args.out.clone().or_else(|| file.remove("out").map(PathBuf::from));

    if let Some(key) = file.keys().next() {
        return Err(format!("unknown config key {key:?}"));
    }
    if levels < 1 {
        return Err("levels must be at least 1".into());
    }
    if nev < 1 {
        return Err("nev must be at least 1".into());
    }
    shift.validate().map_err(|e| e.to_string())?;
    solver.validate().map_err(|e| e.to_string())?;

    // flags outrank the file as a pair: an explicit mesh flag replaces
    // whichever mesh source the file names
    let (mesh_label, coarse) = match (&args.mesh_file, args.n, &file_mesh, file_n) {
        (Some(path), _, _, _) => mesh_from_file(path)?,
        (None, Some(n), _, _) => mesh_builtin(n)?,
        (None, None, Some(_), Some(_)) => {
            return Err("config file sets both mesh-file and n".into())
        }
        (None, None, Some(path), None) => mesh_from_file(path)?,
        (None, None, None, n) => mesh_builtin(n.unwrap_or(8))?,
    };

    Ok(RunConfig {
        problem,
        mesh_label,
        coarse,
        levels,
        nev,
        shift,
        solver,
        direct,
        out,
        dump_vectors,
    })
}

fn mesh_from_file(
    path: &PathBuf,
) -> std::result::Result<(serde_json::Value, TriangleMesh), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read mesh file {}: {e}", path.display()))?;
    let mesh = load_mesh(&text).map_err(|e| e.to_string())?;
    Ok((serde_json::json!({ "file": path.display().to_string() }), mesh))
}

fn mesh_builtin(n: usize) -> std::result::Result<(serde_json::Value, TriangleMesh), String> {
    if n < 1 {
        return Err("n must be at least 1".into());
    }
    Ok((serde_json::json!({ "builtin_n": n }), generate_unit_square(n)))
}

/// Reads a flat `key=value` file; `#` starts a comment line.
fn parse_config_file(path: &PathBuf) -> std::result::Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: FromStr>(
    map: &mut HashMap<String, String>,
    key: &str,
) -> std::result::Result<Option<T>, String> {
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| format!("config key {key}: cannot parse {raw:?}")),
    }
}

/// Per-level eigensets plus traces; the single-pair driver is wrapped so
/// both paths hand back the same shape.
fn run_scheme(fh: &FormsHierarchy, cfg: &RunConfig) -> Result<(Vec<EigenSet>, Vec<LevelTrace>)> {
    if cfg.nev == 1 {
        let (pairs, traces) = eigen_multigrid_track(fh, &cfg.shift, &cfg.solver)?;
        let sets = pairs
            .into_iter()
            .map(|p| EigenSet {
                level: p.level,
                pairs: vec![p],
            })
            .collect();
        Ok((sets, traces))
    } else {
        eigen_multigrid_multi_track(fh, cfg.nev, &cfg.shift, &cfg.solver)
    }
}

fn cmd_solve(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let hierarchy = build_hierarchy(cfg.coarse.clone(), cfg.levels)?;
    let fh = FormsHierarchy::assemble(&hierarchy, &cfg.problem)?;
    let (sets, traces) = run_scheme(&fh, cfg)?;
    let wall = if cfg.solver.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let finest = sets.last().expect("at least the coarse level");
    let per_level: Vec<serde_json::Value> = sets
        .iter()
        .zip(&fh.levels)
        .map(|(set, forms)| {
            serde_json::json!({
                "level": set.level,
                "ndof": forms.ndof(),
                "lambdas": set.pairs.iter().map(|p| p.lambda).collect::<Vec<_>>(),
            })
        })
        .collect();
    let mut report = serde_json::json!({
        "problem": cfg.problem.name,
        "mesh": cfg.mesh_label,
        "levels": cfg.levels,
        "nev": cfg.nev,
        "shift_mode": cfg.shift.mode.to_string(),
        "sigma": cfg.shift.sigma,
        "inner_steps": cfg.shift.inner_steps,
        "ndof": fh.finest().ndof(),
        "lambdas": finest.pairs.iter().map(|p| p.lambda).collect::<Vec<_>>(),
        "matvec_total": traces.iter().map(|t| t.matvec_total).sum::<usize>(),
        "wall_seconds": wall,
        "per_level": per_level,
        "traces": traces,
    });
    if cfg.dump_vectors {
        report["vectors"] = serde_json::json!(finest
            .pairs
            .iter()
            .map(|p| &p.coeffs)
            .collect::<Vec<_>>());
    }
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_output(cfg.out.as_deref(), &text)
}

fn cmd_study(cfg: &RunConfig) -> Result<()> {
    let hierarchy = build_hierarchy(cfg.coarse.clone(), cfg.levels)?;
    let opts = StudyOptions {
        nev: cfg.nev,
        shift: cfg.shift.clone(),
        solver: cfg.solver.clone(),
        direct: cfg.direct.clone(),
    };
    let records = convergence_study(&hierarchy, &cfg.problem, &opts)?;
    let mut text = String::from(STUDY_HEADER);
    text.push('\n');
    for r in &records {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.level,
            r.ndof,
            r.j,
            r.lambda_mg,
            cell(r.lambda_dir),
            cell(r.err_lambda_exact),
            cell(r.err_energy),
            cell(r.theta_measured),
            r.alpha,
            r.matvec_total,
            r.wall_seconds,
        )
        .expect("writing to a string cannot fail");
    }
    write_output(cfg.out.as_deref(), &text)
}

fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let hierarchy = build_hierarchy(cfg.coarse.clone(), cfg.levels)?;
    let fh = FormsHierarchy::assemble(&hierarchy, &cfg.problem)?;
    let (sets, traces) = run_scheme(&fh, cfg)?;
    let mut text = String::from(COMPARE_HEADER);
    text.push('\n');
    for (k, set) in sets.iter().enumerate() {
        let forms = &fh.levels[k];
        let mg_matvec: usize = traces
            .iter()
            .filter(|t| t.level == set.level)
            .map(|t| t.matvec_total)
            .sum();
        // an empty sum of floats is -0.0; keep the zero unsigned
        let mg_seconds: f64 = traces
            .iter()
            .filter(|t| t.level == set.level)
            .map(|t| t.wall_seconds)
            .sum::<f64>()
            .max(0.0);
        let dir_start = Instant::now();
        let count = cfg.nev.min(forms.ndof());
        let reference = direct_discrete_solve(&fh, k, count, &cfg.direct)?;
        let dir_seconds = if cfg.solver.timing {
            dir_start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let (lambda_dir, dir_matvec, dir_sec) = match &reference {
            Some(basis) => (
                format!("{}", basis.values[0]),
                format!("{}", basis.matvec_total),
                format!("{dir_seconds:.3}"),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            text,
            "{},{},{},{},{},{},{:.3},{}",
            set.level,
            forms.ndof(),
            set.pairs[0].lambda,
            lambda_dir,
            mg_matvec,
            dir_matvec,
            mg_seconds,
            dir_sec,
        )
        .expect("writing to a string cannot fail");
    }
    write_output(cfg.out.as_deref(), &text)
}

/// Empty cell for an absent value: references past the budget and
/// quantities without a defined baseline stay blank in the CSV.
fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_output(path: Option<&std::path::Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
