//! `mpme-lab`: batch front end for simulations, limit-equation solves and
//! the exact and statistical checks of `mpme-core`.
//!
//! Every parameter is a `--key value` flag or a `key = value` line of the
//! file given by `--config`; flags win. Exit status is 0 on success, 2 when
//! the input is rejected before any work starts and 1 on runtime failure.

mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use mpme_core::ergodicity::ergodicity_report;
use mpme_core::grid::Mollifier;
use mpme_core::harness::{
    local_equilibrium_check, run_hydro_experiment, ExperimentPlan, Observable, DEFAULT_GRID_POINTS,
    DEFAULT_SEEDS,
};
use mpme_core::lattice::write_snapshot;
use mpme_core::measures::sample_product;
use mpme_core::pde::MpmeProblem;
use mpme_core::profile::ProfileShape;
use mpme_core::simulator::{sampling_rng, CsvObserver, Recorded, SimState};
use mpme_core::{EquilibriumFamily, Kernel, TorusGeometry};
use serde::Serialize;

use config::{Invalid, RunConfig};

const G_KEYS: [&str; 4] = ["g", "q", "beta", "gamma"];
const RUN_KEYS: [&str; 3] = ["seed", "out", "threads"];

/// `(key, help)` for every parameter any subcommand accepts.
const HELP: &[(&str, &str)] = &[
    (
        "g",
        "rate family: example1, example2, example3 or file:<path> with one g(k) per line",
    ),
    ("q", "example1 parameter, q > 0"),
    ("beta", "example2 parameter in [0, 1]"),
    ("gamma", "example3 parameter in (0, 1/2]"),
    ("m", "constraint kernel: 2, 3 or zero-range"),
    ("d", "lattice dimension"),
    (
        "N",
        "torus side; a comma-separated list for hydro and localeq",
    ),
    ("k", "particle number of the hyperplane"),
    (
        "psi",
        "fugacity of the reference weights for detailed balance",
    ),
    (
        "profile",
        "initial density: const:<c>, cosine:<a0>,<a1>,<k> or file:<path>",
    ),
    (
        "profile_b",
        "second profile for the product-measure relative entropy",
    ),
    (
        "t",
        "macroscopic time; a comma-separated list for hydro and localeq",
    ),
    (
        "dt",
        "observer grid step in macroscopic time (default t/50)",
    ),
    (
        "record",
        "per-site quantity written by simulate: eta, g or rho",
    ),
    (
        "equation",
        "limit equation solved by pde: mpme or zero-range",
    ),
    ("seeds", "trajectories per lattice size"),
    ("M", "PDE and mollifier grid points per axis"),
    (
        "w",
        "mollifier width in macroscopic units (default 2/sqrt(N))",
    ),
    ("observables", "comma-separated subset of eta, g, p, q"),
    (
        "test",
        "test function H, in the profile grammar (default const:1)",
    ),
    ("rho", "comma-separated densities to tabulate"),
    ("seed", "random seed; base seed of ensembles"),
    (
        "out",
        "output directory; without it the main artifact goes to stdout",
    ),
    ("threads", "worker threads (fallback: MPME_LAB_THREADS)"),
];

fn keys(subcommand: &str) -> Vec<&'static str> {
    let specific: &[&str] = match subcommand {
        "simulate" => &["m", "d", "N", "profile", "t", "dt", "record", "M", "w"],
        "pde" => &["m", "d", "profile", "t", "M", "equation"],
        "hydro" => &["m", "d", "N", "profile", "t", "seeds", "M", "w"],
        "localeq" => &[
            "m",
            "d",
            "N",
            "profile",
            "t",
            "seeds",
            "M",
            "w",
            "observables",
            "test",
        ],
        "ergodicity" => &["m", "d", "N", "k", "psi"],
        "measures" => &["m", "rho", "d", "N", "profile", "profile_b"],
        "sample" => &["m", "d", "N", "profile"],
        _ => &[],
    };
    G_KEYS
        .iter()
        .chain(specific)
        .chain(RUN_KEYS.iter())
        .copied()
        .collect()
}

const SUBCOMMANDS: [(&str, &str); 7] = [
    (
        "simulate",
        "run one trajectory and record it on the observation grid",
    ),
    ("pde", "solve the limit equation from a density profile"),
    (
        "hydro",
        "ensemble convergence study against the limit equation",
    ),
    (
        "localeq",
        "local-equilibrium check of cylinder-function averages",
    ),
    (
        "ergodicity",
        "exact component and detailed-balance analysis of one hyperplane",
    ),
    (
        "measures",
        "tabulate Z, R, Phi, Phi' and D; relative entropy of two profiles",
    ),
    (
        "sample",
        "draw a configuration from the slowly varying product measure",
    ),
];

fn cli() -> Command {
    let mut cmd = Command::new("mpme-lab")
        .about("Kinetically constrained zero-range dynamics and their limit equations")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value parameter file"),
        );
        for key in keys(name) {
            let help = HELP.iter().find(|(k, _)| *k == key).map_or("", |(_, h)| *h);
            sub = sub.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .allow_negative_numbers(true)
                    .help(help),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e.0)
    }
}

impl From<mpme_core::Error> for Failure {
    fn from(e: mpme_core::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn resolve(name: &str, matches: &ArgMatches) -> Outcome<RunConfig> {
    let allowed = keys(name);
    let mut cfg = RunConfig::new(name);
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.merge_file(Path::new(path), &allowed)?;
    }
    for key in &allowed {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v.clone());
        }
    }
    if !cfg.has("threads") {
        if let Ok(v) = std::env::var("MPME_LAB_THREADS") {
            cfg.set("threads", v);
        }
    }
    Ok(cfg)
}

fn configure_threads(cfg: &RunConfig) -> Outcome<()> {
    if cfg.has("threads") {
        let n: usize = cfg.get("threads")?;
        if n == 0 {
            return Err(Failure::Invalid(
                "invalid value for `threads`: must be positive".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

/// Where artifacts go: files under `--out`, or the main one on stdout.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(dir: Option<String>) -> Outcome<Self> {
        let dir = dir.map(PathBuf::from);
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
        Ok(Self { dir })
    }

    /// Writes `name` under the output directory; the primary artifact also
    /// goes to stdout when no directory is set.
    fn emit(
        &self,
        name: &str,
        primary: bool,
        write: impl FnOnce(&mut dyn Write) -> Outcome<()>,
    ) -> Outcome<()> {
        match &self.dir {
            Some(dir) => {
                let path = dir.join(name);
                let file = File::create(&path).map_err(|e| {
                    Failure::Runtime(format!("cannot create {}: {e}", path.display()))
                })?;
                let mut out = BufWriter::new(file);
                write(&mut out)?;
                out.flush()?;
                eprintln!("wrote {}", path.display());
            }
            None if primary => {
                let stdout = std::io::stdout();
                let mut out = stdout.lock();
                write(&mut out)?;
                out.flush()?;
            }
            None => {}
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    config: &'a RunConfig,
    report: T,
}

fn json<T: Serialize>(
    cfg: &RunConfig,
    report: T,
) -> impl FnOnce(&mut dyn Write) -> Outcome<()> + use<'_, T> {
    move |out| {
        serde_json::to_writer_pretty(
            &mut *out,
            &Document {
                config: cfg,
                report,
            },
        )
        .map_err(|e| Failure::Runtime(e.to_string()))?;
        writeln!(out)?;
        Ok(())
    }
}

fn geometry(cfg: &RunConfig) -> Outcome<TorusGeometry> {
    Ok(TorusGeometry::new(cfg.get("d")?, cfg.get("N")?)?)
}

fn family(cfg: &RunConfig) -> Outcome<EquilibriumFamily> {
    Ok(EquilibriumFamily::new(cfg.g_function()?)?)
}

fn simulate(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("seed", "0");
    cfg.set_default("record", "eta");
    let gf = cfg.g_function()?;
    let kernel = cfg.kernel()?;
    let geometry = geometry(cfg)?;
    let profile = cfg.profile("profile", geometry.dim())?;
    let t: f64 = cfg.get("t")?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Invalid(format!("invalid value for `t`: {t} must be non-negative")).into());
    }
    let dt: f64 = cfg.get_or("dt", if t > 0.0 { t / 50.0 } else { 1.0 })?;
    let seed: u64 = cfg.get("seed")?;
    let recorded = match cfg.require("record")? {
        "eta" => Recorded::Occupation,
        "g" => Recorded::G,
        "rho" => {
            let points = cfg.get_or("M", DEFAULT_GRID_POINTS)?;
            let width = cfg.get_or("w", mpme_core::harness::default_width(geometry.side()))?;
            Recorded::Mollified(Mollifier::new(geometry.side(), points, width)?)
        }
        other => return Err(Invalid(format!("invalid value for `record`: `{other}`")).into()),
    };
    configure_threads(cfg)?;
    let fam = EquilibriumFamily::new(gf.clone())?;
    let initial = sample_product(&fam, &profile, &geometry, &mut sampling_rng(seed))?;
    let mut state = SimState::new(&gf, kernel, initial, seed)?;

    let mut buffer = cfg.comment_header().into_bytes();
    let mut observer = CsvObserver::new(&mut buffer, recorded)?;
    state.run_until_macro(t, dt, &mut [&mut observer])?;
    observer.finish()?;
    sink.emit("trajectory.csv", true, |out| Ok(out.write_all(&buffer)?))?;

    let header = cfg.comment_header();
    sink.emit("snapshot.txt", false, |out| {
        out.write_all(header.as_bytes())?;
        Ok(write_snapshot(out, state.config(), kernel.m(), seed, t)?)
    })?;
    let summary = serde_json::json!({
        "events": state.event_count(),
        "blocked": state.is_blocked(),
        "particles": state.config().total(),
        "t_macro": t,
    });
    sink.emit("summary.json", false, json(cfg, summary))
}

fn pde(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("M", DEFAULT_GRID_POINTS.to_string());
    cfg.set_default("equation", "mpme");
    let fam = family(cfg)?;
    let m: u32 = cfg.get("m")?;
    let dim: usize = cfg.get("d")?;
    let profile = cfg.profile("profile", dim)?;
    let t: f64 = cfg.get("t")?;
    let points: usize = cfg.get("M")?;
    let problem = MpmeProblem::new(fam, m, dim, profile, t)?;
    let solver = match cfg.require("equation")? {
        "mpme" => problem.solver()?,
        "zero-range" => problem.zero_range_solver()?,
        other => return Err(Invalid(format!("invalid value for `equation`: `{other}`")).into()),
    };
    if points < mpme_core::pde::MIN_POINTS {
        return Err(Invalid(format!(
            "invalid value for `M`: at least {} points are needed",
            mpme_core::pde::MIN_POINTS
        ))
        .into());
    }
    let initial = problem.initial_grid(points);
    let solution = solver.advance(&initial, t)?;
    eprintln!(
        "mass {:.15e} -> {:.15e}, range [{:.6}, {:.6}]",
        initial.integral(),
        solution.integral(),
        solution.min(),
        solution.max()
    );
    let header = cfg.comment_header();
    sink.emit("pde.csv", true, |out| {
        out.write_all(header.as_bytes())?;
        Ok(solution.write_csv(out)?)
    })
}

fn plan(cfg: &mut RunConfig) -> Outcome<ExperimentPlan> {
    cfg.set_default("seed", "0");
    cfg.set_default("seeds", DEFAULT_SEEDS.to_string());
    cfg.set_default("M", DEFAULT_GRID_POINTS.to_string());
    let dim: usize = cfg.get("d")?;
    let mut plan = ExperimentPlan::new(
        cfg.g_function()?,
        cfg.kernel()?,
        dim,
        cfg.list("N")?,
        cfg.profile("profile", dim)?,
        cfg.list("t")?,
    )?;
    plan.seeds = cfg.get("seeds")?;
    plan.base_seed = cfg.get("seed")?;
    plan.grid_points = cfg.get("M")?;
    if cfg.has("w") {
        plan.width = Some(cfg.get("w")?);
    }
    plan.validate()?;
    Ok(plan)
}

fn hydro(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    let plan = plan(cfg)?;
    configure_threads(cfg)?;
    let report = run_hydro_experiment(&plan)?;
    for t in &plan.times {
        for e in report.errors_at(*t) {
            eprintln!(
                "N={} t={}: L1 {:.5} ± {:.5} (vs {} {:.5}), blocked {}",
                e.side,
                e.t,
                e.l1_error,
                e.l1_stderr,
                report.alternative,
                e.alternative_l1,
                e.blocked
            );
        }
    }
    let header = cfg.comment_header();
    sink.emit("hydro.csv", false, |out| {
        out.write_all(header.as_bytes())?;
        Ok(report.write_csv(out)?)
    })?;
    if plan.dim == 1 {
        for k in 0..plan.times.len() {
            let svg = report.svg(k)?;
            sink.emit(&format!("hydro_t{k}.svg"), false, |out| {
                Ok(out.write_all(svg.as_bytes())?)
            })?;
        }
    }
    sink.emit("hydro.json", true, json(cfg, &report))
}

fn localeq(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("observables", "eta,g");
    cfg.set_default("test", "const:1");
    let plan = plan(cfg)?;
    let observables = cfg
        .list::<String>("observables")?
        .iter()
        .map(|name| {
            Observable::parse(name)
                .map_err(|e| Invalid(format!("invalid value for `observables`: {e}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let test = ProfileShape::parse(cfg.require("test")?, plan.dim)
        .map_err(|e| Invalid(format!("invalid value for `test`: {e}")))?;
    configure_threads(cfg)?;
    let report = local_equilibrium_check(&plan, &observables, &test)?;
    let header = cfg.comment_header();
    sink.emit("localeq.csv", false, |out| {
        out.write_all(header.as_bytes())?;
        Ok(report.write_csv(out)?)
    })?;
    sink.emit("localeq.json", true, json(cfg, &report))
}

fn ergodicity(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("psi", "0.5");
    let gf = cfg.g_function()?;
    let kernel = cfg.kernel()?;
    let geometry = geometry(cfg)?;
    let k: u32 = cfg.get("k")?;
    let psi: f64 = cfg.get("psi")?;
    let report = ergodicity_report(&geometry, k, &gf, kernel, psi)?;
    sink.emit("ergodicity.json", true, json(cfg, &report))
}

#[derive(Serialize)]
struct MeasureRow {
    rho: f64,
    psi: f64,
    log_z: f64,
    variance: f64,
    phi_prime: f64,
    diffusion: f64,
}

#[derive(Serialize)]
struct MeasuresReport {
    m: u32,
    psi_star: f64,
    table: Vec<MeasureRow>,
    relative_entropy: Option<f64>,
}

fn measures(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("m", "2");
    cfg.set_default("rho", "0.1,0.25,0.5,1,2,5");
    let fam = family(cfg)?;
    let m = cfg.kernel()?.m();
    let densities: Vec<f64> = cfg.list("rho")?;
    let entropy_inputs = match (cfg.has("profile"), cfg.has("profile_b")) {
        (true, true) => {
            let geometry = geometry(cfg)?;
            let a = cfg.profile("profile", geometry.dim())?;
            let b = cfg.profile("profile_b", geometry.dim())?;
            Some((geometry, a, b))
        }
        (false, false) => None,
        _ => return Err(Invalid("`profile` and `profile_b` must be given together".into()).into()),
    };
    let mut table = Vec::with_capacity(densities.len());
    for rho in densities {
        let (psi, phi_prime) = fam.phi_with_derivative(rho)?;
        let moments = fam.moments(psi)?;
        table.push(MeasureRow {
            rho,
            psi,
            log_z: moments.log_z,
            variance: moments.variance,
            phi_prime,
            diffusion: fam.diffusion_d(rho, m)?,
        });
    }
    let relative_entropy = match entropy_inputs {
        Some((geometry, a, b)) => Some(fam.product_relative_entropy(&a, &b, &geometry)?),
        None => None,
    };
    let header = cfg.comment_header();
    sink.emit("measures.csv", false, |out| {
        out.write_all(header.as_bytes())?;
        writeln!(out, "rho,psi,log_z,variance,phi_prime,diffusion")?;
        for r in &table {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.rho, r.psi, r.log_z, r.variance, r.phi_prime, r.diffusion
            )?;
        }
        Ok(())
    })?;
    let report = MeasuresReport {
        m,
        psi_star: fam.psi_star(),
        table,
        relative_entropy,
    };
    sink.emit("measures.json", true, json(cfg, &report))
}

fn sample(cfg: &mut RunConfig, sink: &Sink) -> Outcome<()> {
    cfg.set_default("seed", "0");
    cfg.set_default("m", "2");
    let fam = family(cfg)?;
    let kernel: Kernel = cfg.kernel()?;
    let geometry = geometry(cfg)?;
    let profile = cfg.profile("profile", geometry.dim())?;
    let seed: u64 = cfg.get("seed")?;
    let config = sample_product(&fam, &profile, &geometry, &mut sampling_rng(seed))?;
    let header = cfg.comment_header();
    sink.emit("sample.txt", true, |out| {
        out.write_all(header.as_bytes())?;
        Ok(write_snapshot(out, &config, kernel.m(), seed, 0.0)?)
    })
}

fn dispatch(name: &str, matches: &ArgMatches) -> Outcome<()> {
    let mut cfg = resolve(name, matches)?;
    // the output location is not part of the embedded configuration
    let sink = Sink::new(cfg.params.remove("out"))?;
    match name {
        "simulate" => simulate(&mut cfg, &sink),
        "pde" => pde(&mut cfg, &sink),
        "hydro" => hydro(&mut cfg, &sink),
        "localeq" => localeq(&mut cfg, &sink),
        "ergodicity" => ergodicity(&mut cfg, &sink),
        "measures" => measures(&mut cfg, &sink),
        "sample" => sample(&mut cfg, &sink),
        other => Err(Failure::Invalid(format!("unknown subcommand `{other}`"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return ExitCode::from(2);
    };
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
