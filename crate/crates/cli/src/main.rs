//! `asianq`: runs the pipeline stages, sweeps and encoding dumps from a JSON
//! config or a named preset, with flags overriding individual fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asianq::circuits::{describe_encodings, factor_encodings};
use asianq::grid::write_matrix_csv;
use asianq::inversion::InversionMode;
use asianq::pipeline::{run_convergence, run_kink_study, run_until, RunConfig, Scenario, Stage, PRESETS};
use asianq::Error;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "asianq", version, about = "Quantum-preconditioned Asian option PDE solver, simulated classically")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the config and build the discretized system.
    Build(RunArgs),
    /// Build, precondition and solve.
    Solve(RunArgs),
    /// Solve, encode the state and extract ψ.
    Extract(RunArgs),
    /// Extract and compare against the classical references.
    Compare(RunArgs),
    /// Full pipeline including price quotes.
    Price(RunArgs),
    /// Convergence sweep, or the kink-placement study with --kink.
    Converge {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        kink: bool,
    },
    /// Summaries and projected-operator CSVs of the factor block-encodings.
    DumpEncoding {
        #[command(flatten)]
        run: RunArgs,
        /// Largest system dimension for projected-operator checks and CSVs.
        #[arg(long, default_value_t = 256)]
        cap: usize,
    },
    /// Write defaults.json with every config field spelled out.
    Defaults {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one JSON file per preset.
    Presets {
        #[arg(long, default_value = "presets")]
        out: PathBuf,
    },
}

/// Config source plus overrides; each flag mirrors a `RunConfig` field.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset.
    #[arg(long)]
    preset: Option<String>,
    /// Artifact directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,

    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// Expiry T.
    #[arg(long = "expiry")]
    t: Option<f64>,
    /// Strike K.
    #[arg(long = "strike")]
    k: Option<f64>,
    #[arg(long)]
    eta_max: Option<f64>,
    /// avg_rate_call, avg_rate_put, avg_strike_call or avg_strike_put.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    apex: Option<f64>,

    #[arg(long)]
    n_eta: Option<u32>,
    #[arg(long)]
    n_tau1: Option<u32>,
    #[arg(long)]
    eps_target: Option<f64>,
    /// outflow or mirror.
    #[arg(long)]
    closure: Option<String>,
    /// exact or qpe.
    #[arg(long)]
    inversion: Option<String>,
    /// QPE evolution times for A1 and A2.
    #[arg(long, default_value_t = 4096.0)]
    t0_a1: f64,
    #[arg(long, default_value_t = 4096.0)]
    t0_a2: f64,
    /// auto, dense_lu, gmres or kron_schur.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    dense_cap: Option<usize>,
    #[arg(long)]
    svd_cap: Option<usize>,
    #[arg(long)]
    max_dim: Option<usize>,
    #[arg(long)]
    no_condition_report: bool,
    #[arg(long)]
    residual_tol: Option<f64>,

    #[arg(long)]
    m_eta: Option<usize>,
    #[arg(long)]
    m_tau1: Option<usize>,
    /// Extraction start Δ.
    #[arg(long)]
    delta: Option<f64>,
    /// η interval as LO,HI.
    #[arg(long, value_parser = parse_pair)]
    eta_window: Option<(f64, f64)>,
    /// exact, stochastic, adversarial or shots.
    #[arg(long)]
    ae_mode: Option<String>,
    #[arg(long)]
    ae_eps: Option<f64>,
    #[arg(long)]
    shots: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_eta: Option<usize>,
    #[arg(long)]
    eval_tau: Option<usize>,

    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    mc_paths: Option<usize>,
    #[arg(long)]
    mc_steps: Option<usize>,
    #[arg(long)]
    mc_seed: Option<u64>,
    /// Pricing point NAME:S:I:t; repeatable, replaces the configured list.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Vec<Scenario>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err("expected NAME:S:I:t".into());
    }
    let num = |p: &str| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    Ok(Scenario { name: parts[0].into(), s: num(parts[1])?, i: num(parts[2])?, t: num(parts[3])? })
}

/// Snake-case enum names through their serde representation.
fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> asianq::Result<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| Error::Invalid(format!("--{flag}: unknown value {value:?}")))
}

impl RunArgs {
    fn resolve(&self) -> asianq::Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                RunConfig::load(path).map_err(|e| Error::Invalid(format!("cannot load {}: {e}", path.display())))?
            }
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            name => name,
            sigma => params.sigma, r => params.r, q => params.q, t => params.t, k => params.k,
            eta_max => params.eta_max,
            n_eta => n_eta, eps_target => eps_target,
            dense_cap => dense_cap, svd_cap => svd_cap, max_dim => max_dim, residual_tol => residual_tol,
            m_eta => extraction.m_eta, m_tau1 => extraction.m_tau1,
            ae_eps => extraction.ae_eps, shots => extraction.shots, seed => extraction.seed,
            eval_eta => extraction.eval_eta, eval_tau => extraction.eval_tau,
            refine => oracle.refine, mc_paths => oracle.mc_paths, mc_steps => oracle.mc_steps,
            mc_seed => oracle.mc_seed,
        );
        if self.apex.is_some() {
            cfg.params.apex = self.apex;
        }
        if self.n_tau1.is_some() {
            cfg.n_tau1 = self.n_tau1;
        }
        if self.delta.is_some() {
            cfg.extraction.delta = self.delta;
        }
        if self.eta_window.is_some() {
            cfg.extraction.eta_window = self.eta_window;
        }
        if let Some(v) = &self.kind {
            cfg.params.kind = parse_enum("kind", v)?;
        }
        if let Some(v) = &self.closure {
            cfg.grid.closure = parse_enum("closure", v)?;
        }
        if let Some(v) = &self.solver {
            cfg.solver = parse_enum("solver", v)?;
        }
        if let Some(v) = &self.ae_mode {
            cfg.extraction.ae_mode = parse_enum("ae-mode", v)?;
        }
        match self.inversion.as_deref() {
            None => {}
            Some("exact") => cfg.inversion = InversionMode::Exact,
            Some("qpe") => cfg.inversion = InversionMode::Qpe { t0_a1: self.t0_a1, t0_a2: self.t0_a2 },
            Some(v) => return Err(Error::Invalid(format!("--inversion: unknown value {v:?}"))),
        }
        if self.no_condition_report {
            cfg.condition_report = false;
        }
        if !self.scenario.is_empty() {
            cfg.oracle.scenarios = self.scenario.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(dir) = &cfg.output_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(cfg)
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> asianq::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> asianq::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_stage(args: &RunArgs, last: Stage) -> asianq::Result<()> {
    let cfg = args.resolve()?;
    let report = run_until(&cfg, last)?;
    print_json(&report.summary)
}

fn dump_encoding(args: &RunArgs, cap: usize) -> asianq::Result<()> {
    let cfg = args.resolve()?;
    let spec = cfg.validate()?;
    let summaries = describe_encodings(&spec, &cfg.params, cap)?;
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("encodings.json"), &summaries)?;
        for be in factor_encodings(&spec, &cfg.params)? {
            if (1usize << be.n_sys) <= cap {
                let file = fs::File::create(dir.join(format!("{}.csv", be.label)))?;
                write_matrix_csv(&be.projected(), file)?;
            }
        }
    }
    print_json(&summaries)
}

fn run(cli: Cli) -> asianq::Result<()> {
    match cli.command {
        Command::Build(a) => run_stage(&a, Stage::Build),
        Command::Solve(a) => run_stage(&a, Stage::Solve),
        Command::Extract(a) => run_stage(&a, Stage::Extract),
        Command::Compare(a) => run_stage(&a, Stage::Compare),
        Command::Price(a) => run_stage(&a, Stage::Price),
        Command::Converge { run, levels, kink } => {
            let cfg = run.resolve()?;
            if kink {
                print_json(&run_kink_study(&cfg, levels)?)
            } else {
                print_json(&run_convergence(&cfg, levels)?)
            }
        }
        Command::DumpEncoding { run, cap } => dump_encoding(&run, cap),
        Command::Defaults { out } => match out {
            Some(path) => write_json(&path, &RunConfig::default()),
            None => print_json(&RunConfig::default()),
        },
        Command::Presets { out } => {
            fs::create_dir_all(&out)?;
            for name in PRESETS {
                write_json(&out.join(format!("{name}.json")), &RunConfig::preset(name)?)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
