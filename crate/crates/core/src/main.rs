use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use genconserve::analysis::{
    analyze, build_conservative_potential, plateau_from_sweep, AnalysisError, AnalysisParams, PotentialStrategy,
    Verdict,
};
use genconserve::config::{load_config, ConfigError, RunConfig};
use genconserve::eigen::{khasminskii_verdict, BoundednessPolicy, KhasminskiiReport};
use genconserve::report;
use genconserve::semigroup::{
    build_grid, exhaustion_sweep_runs, laplace_consistency, run_h_on, run_n_on, write_sweep_csv, RunOptions,
    SweepSettings,
};
use genconserve::table;
use genconserve::tail::{generalized_volume_test, sturm_reading, sturm_test, TailPolicy, TailVerdict};

#[derive(Parser)]
#[command(
    name = "genconserve",
    version,
    about = "Generalized conservation tests on model manifolds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// All methods, cross-checks and the combined verdict.
    Analyze { config: PathBuf },
    /// Generalized volume test alone.
    VolumeTest { config: PathBuf },
    /// Bounded-solution test for every configured alpha.
    Khasminskii { config: PathBuf },
    /// Dirichlet heat semigroup on the configured balls.
    Semigroup { config: PathBuf },
    /// Construct a potential that makes the manifold conservative, then analyze.
    BuildPotential {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::CorollaryRadial)]
        strategy: Strategy,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    CorollaryRadial,
    SturmConvex,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Invalid(_)) => 11,
            CliError::Config(ConfigError::Io { .. }) => 13,
            CliError::Config(_) => 10,
            CliError::Numerical(_) => 12,
            CliError::Io { .. } => 13,
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Invalid(v) => {
                CliError::Config(ConfigError::Invalid(v.into_iter().map(|x| x.message).collect()))
            }
            e => CliError::Numerical(e.to_string()),
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => ExitCode::from(v.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<Verdict, CliError> {
    let (path, strategy) = match &command {
        Command::Analyze { config }
        | Command::VolumeTest { config }
        | Command::Khasminskii { config }
        | Command::Semigroup { config } => (config, None),
        Command::BuildPotential { config, strategy } => (config, Some(*strategy)),
    };
    let cfg = load_config(path)?;
    let out = Outputs::new(&cfg)?;
    let (body, verdict) = match command {
        Command::Analyze { .. } => cmd_analyze(&cfg, &out)?,
        Command::VolumeTest { .. } => cmd_volume_test(&cfg, &out)?,
        Command::Khasminskii { .. } => cmd_khasminskii(&cfg, &out)?,
        Command::Semigroup { .. } => cmd_semigroup(&cfg, &out)?,
        Command::BuildPotential { .. } => {
            let strategy = match strategy.expect("set for build-potential") {
                Strategy::CorollaryRadial => PotentialStrategy::CorollaryRadial,
                Strategy::SturmConvex => PotentialStrategy::SturmConvex,
            };
            cmd_build_potential(&cfg, &out, strategy)?
        }
    };
    let text = format!("{}\n{body}", report::timestamp_line());
    print!("{text}");
    if let Some(p) = &cfg.outputs.report {
        fs::write(p, &text).map_err(|source| CliError::Io {
            path: p.clone(),
            source,
        })?;
    }
    Ok(verdict)
}

struct Outputs {
    csv_dir: Option<PathBuf>,
    verbosity: u8,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        if let Some(d) = &cfg.outputs.csv_dir {
            fs::create_dir_all(d).map_err(|source| CliError::Io {
                path: d.clone(),
                source,
            })?;
        }
        Ok(Outputs {
            csv_dir: cfg.outputs.csv_dir.clone(),
            verbosity: cfg.outputs.verbosity,
        })
    }

    fn progress(&self, what: &str) {
        if self.verbosity >= 1 {
            eprintln!("{what}");
        }
    }

    fn csv(&self, name: &str, write: impl FnOnce(BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
        let Some(dir) = &self.csv_dir else { return Ok(()) };
        let path = dir.join(name);
        let io_err = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let file = File::create(&path).map_err(io_err)?;
        write(BufWriter::new(file)).map_err(io_err)?;
        if self.verbosity >= 2 {
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn params(cfg: &RunConfig) -> AnalysisParams {
    let n = &cfg.numerics;
    AnalysisParams {
        alpha: n.alpha[0],
        t_probe: n.t_end,
        radii: n.radii.clone(),
        boundedness: boundedness(cfg),
        sweep: SweepSettings {
            dt: n.dt,
            ..SweepSettings::default()
        },
        ..AnalysisParams::default()
    }
}

fn boundedness(cfg: &RunConfig) -> BoundednessPolicy {
    BoundednessPolicy {
        r_max: cfg.numerics.r_max,
        ..BoundednessPolicy::default()
    }
}

fn khasminskii_csv(k: &KhasminskiiReport) -> impl FnOnce(BufWriter<File>) -> io::Result<()> + '_ {
    move |w| table::write_table(w, &["R", "f_R"], k.samples.iter().map(|&(r, f)| vec![r, f]))
}

fn tail_csv(v: &TailVerdict) -> impl FnOnce(BufWriter<File>) -> io::Result<()> + '_ {
    move |w| v.write_csv(w)
}

fn cmd_analyze(cfg: &RunConfig, out: &Outputs) -> Result<(String, Verdict), CliError> {
    out.progress("running volume, khasminskii, semigroup and time-change tests");
    let rep = analyze(&cfg.manifold, &params(cfg))?;
    write_analysis_csvs(&rep, out)?;
    Ok((report::render(&rep), rep.final_verdict))
}

fn write_analysis_csvs(rep: &genconserve::analysis::ConservationReport, out: &Outputs) -> Result<(), CliError> {
    if let Some(v) = &rep.volume_verdict {
        out.csv("volume.csv", tail_csv(v))?;
    }
    if let Some(v) = &rep.timechange_verdict {
        out.csv("timechange.csv", tail_csv(v))?;
    }
    if let Some(k) = &rep.khasminskii {
        out.csv("khasminskii.csv", khasminskii_csv(k))?;
    }
    if let Some(p) = &rep.semigroup_plateau {
        out.csv("sweep.csv", |w| write_sweep_csv(&p.sweep, w))?;
    }
    Ok(())
}

fn cmd_volume_test(cfg: &RunConfig, out: &Outputs) -> Result<(String, Verdict), CliError> {
    let policy = TailPolicy::default();
    out.progress("running the generalized volume test");
    let v = generalized_volume_test(&cfg.manifold, 1.0, &policy).map_err(numerical)?;
    let sturm = sturm_test(&cfg.manifold.time_changed(), &policy).map_err(numerical)?;
    out.csv("volume.csv", tail_csv(&v))?;
    let verdict = Verdict::from_tail(v.classification);
    let mut body = String::new();
    let _ = writeln!(body, "manifold: {}", genconserve::analysis::spec_digest(&cfg.manifold));
    let _ = writeln!(body, "volume test: {}\n  {}", v.classification, v.confidence_note);
    for (r, s) in &v.partial_sums {
        let _ = writeln!(body, "  R = {r:<12e} partial integral = {s:.12e}");
    }
    let _ = writeln!(
        body,
        "sturm test (informational): {}\n  {}",
        sturm_reading(&sturm),
        sturm.confidence_note
    );
    let _ = writeln!(body, "\nfinal: {verdict}");
    Ok((body, verdict))
}

fn cmd_khasminskii(cfg: &RunConfig, out: &Outputs) -> Result<(String, Verdict), CliError> {
    let policy = boundedness(cfg);
    let mut body = String::new();
    let _ = writeln!(body, "manifold: {}", genconserve::analysis::spec_digest(&cfg.manifold));
    let mut verdicts = Vec::new();
    for &alpha in &cfg.numerics.alpha {
        out.progress(&format!("solving the eigen ODE for alpha = {alpha}"));
        let k = khasminskii_verdict(&cfg.manifold, alpha, &policy).map_err(numerical)?;
        let _ = writeln!(body, "alpha = {alpha}: {}\n  {}", k.verdict, k.note);
        out.csv(&format!("khasminskii_alpha{alpha}.csv"), khasminskii_csv(&k))?;
        verdicts.push(k.verdict);
    }
    let verdict = if verdicts.windows(2).all(|w| w[0] == w[1]) {
        verdicts[0]
    } else {
        let _ = writeln!(body, "verdicts differ across alpha");
        Verdict::Inconclusive
    };
    let _ = writeln!(body, "\nfinal: {verdict}");
    Ok((body, verdict))
}

fn cmd_semigroup(cfg: &RunConfig, out: &Outputs) -> Result<(String, Verdict), CliError> {
    let n = &cfg.numerics;
    let m = &cfg.manifold;
    let settings = SweepSettings {
        dt: n.dt,
        ..SweepSettings::default()
    };
    out.progress("running the exhaustion sweep");
    let (points, runs) = exhaustion_sweep_runs(m, &n.radii, n.t_end, n.alpha[0], &settings).map_err(numerical)?;
    let (plateau, dichotomy) = plateau_from_sweep(points, &runs, n.t_end);
    out.csv("sweep.csv", |w| write_sweep_csv(&plateau.sweep, w))?;

    let r_max = *n.radii.last().expect("radii nonempty");
    out.progress(&format!(
        "running the heat semigroup on B_{r_max} with {} cells",
        n.nodes
    ));
    let grid = build_grid(m, r_max, n.nodes).map_err(numerical)?;
    let opts = RunOptions {
        laplace_alphas: n.alpha.clone(),
        ..RunOptions::default()
    };
    let run = run_h_on(grid, n.t_end, n.dt, &opts).map_err(numerical)?;
    out.csv("semigroup.csv", |w| run.write_csv(w))?;

    let mut body = String::new();
    let _ = writeln!(body, "manifold: {}", genconserve::analysis::spec_digest(m));
    let _ = writeln!(
        body,
        "single run: R = {r_max}, cells = {}, dt = {}, t_end = {}\n  H(r0) = {:.12}, 1 - H(r0) = {:.6e}",
        n.nodes,
        n.dt,
        n.t_end,
        run.final_h()[0],
        run.final_deficit()[0]
    );
    for &alpha in &n.alpha {
        if alpha * n.t_end < 20.0 {
            let _ = writeln!(
                body,
                "  laplace identity at alpha = {alpha}: skipped (alpha * t_end < 20)"
            );
            continue;
        }
        let nv = run_n_on(&run.grid, alpha).map_err(numerical)?;
        let gap = laplace_consistency(&run, &nv, alpha).map_err(numerical)?;
        let _ = writeln!(body, "  laplace identity at alpha = {alpha}: max discrepancy {gap:.3e}");
    }
    let _ = writeln!(
        body,
        "semigroup plateau: {}\n  {}\n  t_probe = {}, H = {:.12}, epsilon_R = {:.3e}",
        plateau.verdict, plateau.note, plateau.t_probe, plateau.h_plateau, plateau.epsilon_r
    );
    for s in &plateau.sweep {
        let _ = writeln!(
            body,
            "  R = {:<6} H(r0) = {:.12}  N(r0) = {:.12}",
            s.radius, s.h_origin, s.n_origin
        );
    }
    let mut verdict = plateau.verdict;
    if let Some(d) = &dichotomy {
        let _ = writeln!(body, "dichotomy: {} ({} offending points)", d.class, d.offending.len());
        if !d.passed() {
            verdict = Verdict::Inconclusive;
        }
    }
    let _ = writeln!(body, "\nfinal: {verdict}");
    Ok((body, verdict))
}

fn cmd_build_potential(
    cfg: &RunConfig,
    out: &Outputs,
    strategy: PotentialStrategy,
) -> Result<(String, Verdict), CliError> {
    out.progress(&format!("constructing a potential ({strategy})"));
    let c = build_conservative_potential(&cfg.manifold, strategy, &TailPolicy::default())?;
    let fixed = cfg.manifold.with_potential(c.potential.clone());
    out.progress("analyzing the manifold with the constructed potential");
    let rep = analyze(&fixed, &params(cfg))?;
    write_analysis_csvs(&rep, out)?;
    let mut body = String::new();
    let _ = writeln!(body, "strategy: {strategy}");
    let _ = writeln!(body, "potential: {}", c.potential);
    for (p, class) in &c.attempts {
        let _ = writeln!(body, "  exponent {p}: volume test {class}");
    }
    body.push('\n');
    body.push_str(&report::render(&rep));
    Ok((body, rep.final_verdict))
}
