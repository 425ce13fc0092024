//! Run configuration, presets and orchestration: build the system, apply the
//! factor inverses, solve the preconditioned system, encode the solution state,
//! extract ψ, compare with the classical references and price. Also the
//! convergence sweep and the kink-placement study.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuits::StateVector;
use crate::error::{Error, Result};
use crate::extraction::{
    contract_greeks, extract_psi_2d, greeks, plant_separable, AmplitudeEstimator, EstimatorMode, ExtractConfig,
    Extraction, ProbeMode, Surface,
};
use crate::grid::{self, make_grid, GridConfig, GridSpec};
use crate::inversion::{
    original_residual, precondition, solve_preconditioned, InversionMode, PreconditionOptions, PreconditionReport,
    Preconditioned, SolveOutcome, SolverKind,
};
use crate::linalg::{norm_estimate, spectral_norm, vec_norm, KronSylvester, C64};
use crate::oracle::{
    crank_nicolson_with, eta_of, monte_carlo_price, price_from_psi, reference_on_grid, CnConfig, EdgeClosure, McSpec,
    Payoff, PsiLattice,
};
use crate::params::MarketParams;

/// Extraction and amplitude-estimation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSettings {
    pub m_eta: usize,
    pub m_tau1: usize,
    /// Extraction start Δ; `None` uses the grid's.
    pub delta: Option<f64>,
    /// η sub-interval to interpolate over; `None` uses ±η_max.
    pub eta_window: Option<(f64, f64)>,
    pub ae_mode: EstimatorMode,
    /// ε′ of every amplitude-estimation call (ignored in shots mode).
    pub ae_eps: f64,
    pub shots: u64,
    pub seed: u64,
    pub kappa_ceiling: f64,
    pub eps_shift: Option<f64>,
    pub probe: ProbeMode,
    /// Points per axis of the emitted surface.
    pub eval_eta: usize,
    pub eval_tau: usize,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        Self {
            m_eta: 8,
            m_tau1: 8,
            delta: None,
            eta_window: None,
            ae_mode: EstimatorMode::Exact,
            ae_eps: 1e-4,
            shots: 0,
            seed: 1,
            kappa_ceiling: 100.0,
            eps_shift: None,
            probe: ProbeMode::PrefixTable,
            eval_eta: 33,
            eval_tau: 17,
        }
    }
}

impl ExtractionSettings {
    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            m_eta: self.m_eta,
            m_tau1: self.m_tau1,
            delta: self.delta,
            kappa_ceiling: self.kappa_ceiling,
            eps_shift: self.eps_shift,
            probe: self.probe,
            eta_window: self.eta_window,
        }
    }

    pub fn estimator(&self) -> AmplitudeEstimator {
        match self.ae_mode {
            EstimatorMode::Shots => AmplitudeEstimator::shots(self.shots, self.seed),
            mode => AmplitudeEstimator { mode, eps_prime: self.ae_eps, seed: self.seed, shots: 0 },
        }
    }
}

/// A pricing point: spot S, running integral I and calendar time t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub s: f64,
    pub i: f64,
    pub t: f64,
}

/// Classical references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    /// Odd refinement factor of the Crank-Nicolson reference.
    pub refine: usize,
    pub closure: EdgeClosure,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub mc_seed: u64,
    /// Payoff of the matched Monte Carlo comparison.
    pub payoff: Payoff,
    /// Also quote Monte Carlo with the contract payoff when `payoff` differs.
    pub contract_mc: bool,
    pub scenarios: Vec<Scenario>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            refine: 5,
            closure: EdgeClosure::Antiperiodic,
            mc_paths: 100_000,
            mc_steps: 200,
            mc_seed: 7,
            payoff: Payoff::InitialCondition,
            contract_mc: true,
            scenarios: Vec::new(),
        }
    }
}

/// What the convergence sweep refines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceSource {
    /// The pricing system, refining n_eta (n_tau1 from the scale relations).
    Pricing,
    /// A planted smooth separable surface, refining M and n_tau1 together.
    Planted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceSettings {
    pub source: ConvergenceSource,
    /// Nodes per axis at level 0 (planted sweep).
    pub m_start: usize,
    pub m_step: usize,
    /// Target error at level 0 and its ratio between levels (planted sweep).
    pub eps_start: f64,
    pub eps_ratio: f64,
    /// n_tau1 = ⌈log₂(1/(ε·min ψ))⌉ + offset (planted sweep).
    pub n_tau_offset: i32,
    pub planted_n_eta: u32,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self {
            source: ConvergenceSource::Pricing,
            m_start: 6,
            m_step: 2,
            eps_start: 1e-1,
            eps_ratio: 0.1,
            n_tau_offset: 0,
            planted_n_eta: 6,
        }
    }
}

/// One JSON document per run; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub params: MarketParams,
    pub n_eta: u32,
    /// Explicit time register; `None` picks it from the scale relations.
    pub n_tau1: Option<u32>,
    pub eps_target: f64,
    pub grid: GridConfig,
    pub inversion: InversionMode,
    pub solver: SolverKind,
    /// Largest dimension solved by dense LU.
    pub dense_cap: usize,
    /// Largest dimension for SVD-based norms; power iteration above.
    pub svd_cap: usize,
    /// Largest lattice accepted at all.
    pub max_dim: usize,
    /// Compute the conditioning report of the splitting.
    pub condition_report: bool,
    /// Relative residual the solve must reach.
    pub residual_tol: f64,
    pub extraction: ExtractionSettings,
    pub oracle: OracleSettings,
    pub convergence: ConvergenceSettings,
    /// Artifact directory; nothing is written when `None`.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            params: MarketParams::default(),
            n_eta: 5,
            n_tau1: None,
            eps_target: 1e-3,
            grid: GridConfig::default(),
            inversion: InversionMode::Exact,
            solver: SolverKind::Auto,
            dense_cap: 1 << 10,
            svd_cap: 1 << 10,
            max_dim: 1 << 22,
            condition_report: true,
            residual_tol: 1e-8,
            extraction: ExtractionSettings::default(),
            oracle: OracleSettings::default(),
            convergence: ConvergenceSettings::default(),
            output_dir: None,
        }
    }
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 6] = ["smoke", "kink-study", "seasoned-call", "itm-call", "low-vol", "cost-scaling"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self { name: name.into(), ..Self::default() };
        let pricing = |sigma: f64, m: usize, scenario: Scenario| Self {
            params: MarketParams { sigma, eta_max: 4.0, ..MarketParams::default() },
            n_eta: 6,
            extraction: ExtractionSettings { m_eta: m, m_tau1: m, eta_window: Some((0.0, 3.0)), ..Default::default() },
            oracle: OracleSettings { scenarios: vec![scenario], ..Default::default() },
            ..base.clone()
        };
        let cfg = match name {
            // σ = 2 keeps the scale relations satisfiable with enough time cells
            "smoke" => Self {
                params: MarketParams { sigma: 2.0, ..MarketParams::default() },
                n_eta: 3,
                extraction: ExtractionSettings { m_eta: 4, m_tau1: 4, ..Default::default() },
                oracle: OracleSettings {
                    mc_paths: 10_000,
                    mc_steps: 50,
                    scenarios: vec![Scenario { name: "mid".into(), s: 1.0, i: 1.25, t: 0.5 }],
                    ..Default::default()
                },
                ..base
            },
            "kink-study" => Self { n_eta: 4, condition_report: false, ..base },
            "seasoned-call" => pricing(1.0, 8, Scenario { name: "seasoned".into(), s: 1.0, i: 1.25, t: 0.5 }),
            "itm-call" => pricing(1.0, 8, Scenario { name: "in_the_money".into(), s: 1.0, i: 1.5, t: 0.5 }),
            "low-vol" => pricing(0.6, 10, Scenario { name: "low_vol".into(), s: 1.0, i: 1.2, t: 0.4 }),
            "cost-scaling" => Self {
                max_dim: 1 << 23,
                convergence: ConvergenceSettings {
                    source: ConvergenceSource::Planted,
                    n_tau_offset: -3,
                    ..Default::default()
                },
                ..base
            },
            _ => return Err(Error::Invalid(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Resolves the lattice, checking the scale relations unless n_tau1 is explicit.
    pub fn grid_spec(&self) -> Result<GridSpec> {
        self.params.validate()?;
        let spec = match self.n_tau1 {
            None => make_grid(&self.params, self.n_eta, self.eps_target, &self.grid)?,
            Some(n_tau1) => {
                // make_grid's range checks without its scale search
                if self.n_eta < 2 || self.n_eta > 20 {
                    return Err(Error::Invalid(format!(
                        "n_eta = {}: need 2 ≤ n_eta ≤ 20 so that 2^n_eta is divisible by 4",
                        self.n_eta
                    )));
                }
                let mut s = GridSpec::with_sizes(&self.params, self.n_eta, n_tau1).closure(self.grid.closure);
                s.delta_start = self.grid.delta_frac * self.params.t;
                s.eps_target = self.eps_target;
                s
            }
        };
        spec.validate()?;
        if spec.dim() > self.max_dim {
            return Err(Error::DimensionCap { dim: spec.dim(), cap: self.max_dim });
        }
        Ok(spec)
    }

    /// Every check that can run before numerical work.
    pub fn validate(&self) -> Result<GridSpec> {
        let spec = self.grid_spec()?;
        let x = &self.extraction;
        if x.m_eta < 2 || x.m_tau1 < 2 {
            return Err(Error::Invalid("extraction needs at least two nodes per axis".into()));
        }
        if x.eval_eta < 2 || x.eval_tau < 2 {
            return Err(Error::Invalid("surface needs at least two points per axis".into()));
        }
        x.estimator().validate()?;
        if self.oracle.refine % 2 == 0 {
            return Err(Error::Invalid(format!("oracle refinement {} must be odd", self.oracle.refine)));
        }
        if !self.oracle.scenarios.is_empty() && self.oracle.mc_paths < 1000 {
            return Err(Error::Invalid("Monte Carlo needs at least 1000 paths".into()));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::Invalid("residual_tol must be positive".into()));
        }
        Ok(spec)
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Build,
    Precondition,
    Solve,
    Encode,
    Extract,
    Compare,
    Price,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Validate,
        Stage::Build,
        Stage::Precondition,
        Stage::Solve,
        Stage::Encode,
        Stage::Extract,
        Stage::Compare,
        Stage::Price,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Build => "build",
            Stage::Precondition => "precondition",
            Stage::Solve => "solve",
            Stage::Encode => "encode",
            Stage::Extract => "extract",
            Stage::Compare => "compare",
            Stage::Price => "price",
        }
    }
}

/// Error bounds and diagnostics, one field per stage; `null` until reached.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// ‖b̂‖² normalization N_b (build).
    pub norm_b: Option<f64>,
    /// κ(A + B) (precondition).
    pub kappa_raw: Option<f64>,
    /// κ(W) (precondition).
    pub kappa_w: Option<f64>,
    /// (1 + ‖(A+B)⁻¹‖‖B‖)(1 + ‖A⁻¹‖‖B‖), the bound on κ(W).
    pub kappa_bound: Option<f64>,
    /// ‖W x − rhs‖/‖rhs‖ (solve).
    pub solve_residual: Option<f64>,
    /// Residual of x in the unpreconditioned system (solve).
    pub original_residual: Option<f64>,
    /// Block-encoding normalizations α of A1⁻¹, A2⁻¹ and W⁻¹ (encode).
    pub alpha_a1_inv: Option<f64>,
    pub alpha_a2_inv: Option<f64>,
    pub alpha_w_inv: Option<f64>,
    /// Probability of the flagged success branch (encode).
    pub success_probability: Option<f64>,
    /// Propagated sampling bound on ψ² and on ψ (extract).
    pub psi_sq_bound: Option<f64>,
    pub psi_bound: Option<f64>,
    /// Max |ψ_extracted − ψ_lattice| over window nodes (compare).
    pub extraction_vs_direct: Option<f64>,
    /// Max |ψ_extracted − ψ_CN| over window nodes (compare).
    pub extraction_vs_oracle: Option<f64>,
    /// Max |ψ_lattice − ψ_CN| over τ₁ ≥ Δ (compare).
    pub direct_vs_oracle: Option<f64>,
    /// Largest propagated price bound over scenarios (price).
    pub price_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// "ok", "failed" or "skipped".
    pub status: String,
    pub seconds: f64,
}

/// One priced scenario under one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuoteRow {
    pub scenario: String,
    pub method: String,
    pub eta: f64,
    pub tau: f64,
    pub value: f64,
    pub stderr: f64,
    /// Propagated extraction bound (pipeline rows only).
    pub bound: f64,
    pub delta: Option<f64>,
    pub theta: Option<f64>,
}

/// Machine-readable run summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    /// "ok" or "failed".
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub grid: Option<GridSpec>,
    pub dim: Option<usize>,
    pub solver: Option<SolverKind>,
    pub solver_iterations: Option<usize>,
    pub ae_calls: Option<usize>,
    pub ae_cost: Option<f64>,
    pub bounds: Bounds,
    pub condition: Option<PreconditionReport>,
    pub quotes: Vec<QuoteRow>,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

/// Everything a run produced, for programmatic use.
pub struct RunReport {
    pub config: RunConfig,
    pub summary: Summary,
    pub spec: Option<GridSpec>,
    pub pre: Option<Preconditioned>,
    pub solution: Option<SolveOutcome>,
    pub state: Option<StateVector>,
    /// ψ = amp_scale · amplitude of the encoded state.
    pub amp_scale: Option<f64>,
    pub extraction: Option<Extraction>,
    pub surface: Option<Surface>,
    /// ψ read directly from the solution on the lattice.
    pub direct: Option<PsiLattice>,
    /// Crank-Nicolson reference on a refined lattice.
    pub oracle: Option<PsiLattice>,
}

impl RunReport {
    fn new(config: RunConfig) -> Self {
        let summary = Summary { name: config.name.clone(), status: "running".into(), ..Default::default() };
        Self {
            config,
            summary,
            spec: None,
            pre: None,
            solution: None,
            state: None,
            amp_scale: None,
            extraction: None,
            surface: None,
            direct: None,
            oracle: None,
        }
    }

    fn out(&self, file: &str) -> Option<PathBuf> {
        self.config.output_dir.as_ref().map(|d| d.join(file))
    }

    fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        if let Some(p) = self.out(file) {
            fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        }
        Ok(())
    }

    fn write_csv<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<()> {
        if let Some(p) = self.out(file) {
            write_csv(&p, rows)?;
        }
        Ok(())
    }

    fn spec(&self) -> &GridSpec {
        self.spec.as_ref().expect("validated")
    }

    /// Runs one stage, recording its timing and wrapping failures with its name.
    fn stage(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        let start = Instant::now();
        let res = f(self);
        let seconds = start.elapsed().as_secs_f64();
        let status = if res.is_ok() { "ok" } else { "failed" };
        self.summary.stages.push(StageRecord { stage, status: status.into(), seconds });
        res.map_err(|e| Error::Stage { stage: stage.name().into(), source: Box::new(e) })
    }

    fn persist_summary(&self) -> Result<()> {
        self.write_json("summary.json", &self.summary)
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Full run.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    run_until(cfg, Stage::Price)
}

/// Runs the stages up to and including `last`. On failure the summary (with
/// the failed stage) is persisted before the error is returned.
pub fn run_until(cfg: &RunConfig, last: Stage) -> Result<RunReport> {
    let mut rep = RunReport::new(cfg.clone());
    let stages: [(Stage, fn(&mut RunReport) -> Result<()>); 8] = [
        (Stage::Validate, stage_validate),
        (Stage::Build, stage_build),
        (Stage::Precondition, stage_precondition),
        (Stage::Solve, stage_solve),
        (Stage::Encode, stage_encode),
        (Stage::Extract, stage_extract),
        (Stage::Compare, stage_compare),
        (Stage::Price, stage_price),
    ];
    for (stage, f) in stages {
        if stage > last {
            rep.summary.stages.push(StageRecord { stage, status: "skipped".into(), seconds: 0.0 });
            continue;
        }
        if let Err(e) = rep.stage(stage, f) {
            rep.summary.status = "failed".into();
            rep.summary.failed_stage = Some(stage);
            rep.summary.error = Some(e.to_string());
            // best effort: the output directory may be what failed
            let _ = rep.persist_summary();
            return Err(e);
        }
    }
    rep.summary.status = "ok".into();
    rep.persist_summary()?;
    Ok(rep)
}

fn stage_validate(rep: &mut RunReport) -> Result<()> {
    let spec = rep.config.validate()?;
    rep.summary.grid = Some(spec.clone());
    rep.summary.dim = Some(spec.dim());
    rep.spec = Some(spec);
    if let Some(dir) = &rep.config.output_dir {
        fs::create_dir_all(dir)?;
    }
    rep.write_json("config.json", &rep.config)
}

fn stage_build(rep: &mut RunReport) -> Result<()> {
    let spec = rep.spec().clone();
    let ops = grid::build_operators(&spec, &rep.config.params);
    rep.summary.bounds.norm_b = Some(ops.norm_b);
    rep.write_json("system.json", &grid::describe_system(&spec, &rep.config.params))
}

fn stage_precondition(rep: &mut RunReport) -> Result<()> {
    let opts = PreconditionOptions {
        mode: rep.config.inversion.clone(),
        report: rep.config.condition_report,
        svd_cap: rep.config.svd_cap,
    };
    let pre = precondition(rep.spec(), &rep.config.params, &opts)?;
    if let Some(r) = &pre.report {
        let b = &mut rep.summary.bounds;
        b.kappa_raw = Some(r.kappa_raw);
        b.kappa_w = Some(r.kappa_w);
        b.kappa_bound = Some(r.c_ab * r.c_ab_prime);
        if !r.bound_satisfied {
            rep.summary.warnings.push(format!("κ(W) = {:.4e} exceeds its splitting bound", r.kappa_w));
        }
        rep.summary.condition = Some(r.clone());
        rep.write_json("condition_report.json", r)?;
    }
    rep.pre = Some(pre);
    Ok(())
}

fn stage_solve(rep: &mut RunReport) -> Result<()> {
    let pre = rep.pre.as_ref().expect("preconditioned");
    let sol = solve_preconditioned(pre, rep.config.solver, rep.config.dense_cap)?;
    let b = &mut rep.summary.bounds;
    b.solve_residual = Some(sol.relative_residual);
    b.original_residual = Some(original_residual(rep.spec.as_ref().unwrap(), &rep.config.params, &sol.x));
    rep.summary.solver = Some(sol.method);
    rep.summary.solver_iterations = Some(sol.iterations);
    if !(sol.relative_residual <= rep.config.residual_tol) {
        return Err(Error::NoConvergence(format!(
            "relative residual {:.3e} above tolerance {:.1e}",
            sol.relative_residual, rep.config.residual_tol
        )));
    }
    let spec = rep.spec();
    let s = pre.norm_b.sqrt();
    let ne = spec.n_eta_pts();
    let values = (0..spec.n_tau_pts()).map(|t| (0..ne).map(|x| s * sol.x[t * ne + x].re).collect()).collect();
    rep.direct = Some(PsiLattice { eta: spec.eta_nodes(), tau: spec.tau_nodes(), values });
    rep.solution = Some(sol);
    Ok(())
}

/// α of the W⁻¹ block-encoding: a norm estimate with 5% headroom, never below
/// the certified lower bound ‖x‖/‖rhs‖.
fn alpha_w_inverse(pre: &Preconditioned, sol: &SolveOutcome, svd_cap: usize) -> Result<f64> {
    let lower = vec_norm(&sol.x) / vec_norm(&pre.rhs_pre);
    let est = if pre.dim() <= svd_cap {
        pre.w_inverse_norm(svd_cap)?
    } else {
        let s = KronSylvester::from_kron_sum(&pre.w)?;
        let sa = KronSylvester::from_kron_sum(&pre.w.adjoint())?;
        1.05 * norm_estimate(|x| s.solve(x), |x| sa.solve(x), pre.dim(), 40, 11)
    };
    Ok(est.max(lower))
}

fn stage_encode(rep: &mut RunReport) -> Result<()> {
    let pre = rep.pre.as_ref().expect("preconditioned");
    let sol = rep.solution.as_ref().expect("solved");
    let spec = rep.spec();
    let a1 = pre.a1_inv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let a2 = spectral_norm(&pre.a2_inv);
    let aw = alpha_w_inverse(pre, sol, rep.config.svd_cap)?;
    let alpha = a1 * a2 * aw;
    let xn = vec_norm(&sol.x);
    let p_success = (xn / alpha).powi(2);
    if !(p_success <= 1.0 + 1e-12) {
        return Err(Error::Unstable(format!("success probability {p_success} exceeds 1; α underestimated")));
    }
    // flag qubit "anc": |0⟩ carries x/α, |1⟩ the remaining weight spread uniformly
    let n = sol.x.len();
    let mut amps: Vec<C64> = sol.x.iter().map(|z| z / alpha).collect();
    let fill = ((1.0 - p_success).max(0.0) / n as f64).sqrt();
    amps.extend(std::iter::repeat_n(C64::new(fill, 0.0), n));
    let state = StateVector::new(amps, &[("eta", spec.n_eta), ("tau", spec.n_tau1), ("anc", 1)])?;
    let b = &mut rep.summary.bounds;
    b.alpha_a1_inv = Some(a1);
    b.alpha_a2_inv = Some(a2);
    b.alpha_w_inv = Some(aw);
    b.success_probability = Some(p_success);
    rep.amp_scale = Some(pre.norm_b.sqrt() * alpha);
    rep.state = Some(state);
    Ok(())
}

/// `n` evenly spaced points covering [lo, hi].
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Serialize)]
struct SurfaceRow {
    tau: f64,
    eta: f64,
    psi_sq: f64,
    psi: f64,
}

fn stage_extract(rep: &mut RunReport) -> Result<()> {
    let x = &rep.config.extraction;
    let ex = extract_psi_2d(
        rep.state.as_ref().expect("encoded"),
        rep.spec(),
        rep.amp_scale.expect("encoded"),
        &x.extract_config(),
        &x.estimator(),
    )?;
    let etas = linspace(ex.interp.eta_range.0, ex.interp.eta_range.1, x.eval_eta);
    let taus = linspace(ex.interp.tau_range.0, ex.interp.tau_range.1, x.eval_tau);
    let surface = ex.surface(&etas, &taus)?;
    let mut rows = Vec::with_capacity(etas.len() * taus.len());
    for (i, &t) in taus.iter().enumerate() {
        for (j, &e) in etas.iter().enumerate() {
            rows.push(SurfaceRow { tau: t, eta: e, psi_sq: ex.interp.psi_squared(e, t)?, psi: surface.psi[i][j] });
        }
    }
    rep.write_csv("nodes.csv", &ex.nodes)?;
    rep.write_csv("surface.csv", &rows)?;
    rep.summary.ae_calls = Some(ex.total_calls);
    rep.summary.ae_cost = Some(ex.total_cost);
    rep.summary.bounds.psi_sq_bound = Some(ex.psi_sq_bound);
    rep.summary.bounds.psi_bound = Some(surface.psi_bound);
    rep.summary.warnings.extend(ex.warnings.iter().take(20).cloned());
    if ex.warnings.len() > 20 {
        rep.summary.warnings.push(format!("… {} more extraction warnings", ex.warnings.len() - 20));
    }
    rep.extraction = Some(ex);
    rep.surface = Some(surface);
    Ok(())
}

/// Extracted ψ at a point: shifted square root of the interpolated ψ², with
/// the shift of the emitted surface, and its propagated bound.
fn extracted_psi(ex: &Extraction, surface: &Surface, eta: f64, tau: f64) -> Result<(f64, f64)> {
    let sq = ex.interp.psi_squared(eta, tau)? + surface.shift;
    if !(sq > 0.0) {
        return Err(Error::Unstable(format!("shifted ψ² = {sq:.3e} ≤ 0 at (η, τ₁) = ({eta}, {tau})")));
    }
    let root = sq.sqrt();
    Ok((root, (ex.psi_sq_bound + surface.shift) / root))
}

#[derive(Serialize)]
struct LatticeRow {
    t: usize,
    x: usize,
    tau: f64,
    eta: f64,
    psi_direct: f64,
    psi_oracle: f64,
    psi_extracted: Option<f64>,
}

fn stage_compare(rep: &mut RunReport) -> Result<()> {
    let spec = rep.spec().clone();
    let params = &rep.config.params;
    let o = &rep.config.oracle;
    let cn = CnConfig { closure: o.closure, ..Default::default() };
    let reference = reference_on_grid(&spec, params, o.refine, &cn)?;
    let fine = crank_nicolson_with(
        params,
        &|e| params.psi0(e),
        spec.n_eta_pts() * o.refine,
        (spec.n_tau_pts() + 1) * o.refine,
        &cn,
    )?;
    let direct = rep.direct.as_ref().expect("solved");
    let ex = rep.extraction.as_ref().expect("extracted");
    let surface = rep.surface.as_ref().expect("extracted");
    let (t0, x0) = (ex.interp.tau_range, ex.interp.eta_range);
    let start = spec.tau_start_index();
    let (mut d_vs_o, mut e_vs_d, mut e_vs_o) = (0.0f64, 0.0f64, 0.0f64);
    let mut rows = Vec::with_capacity(spec.dim());
    for (t, &tau) in direct.tau.iter().enumerate() {
        for (x, &eta) in direct.eta.iter().enumerate() {
            let (pd, po) = (direct.values[t][x], reference[t][x]);
            let inside = tau >= t0.0 && tau <= t0.1 && eta >= x0.0 && eta <= x0.1;
            let pe = if inside { Some(extracted_psi(ex, surface, eta, tau)?.0) } else { None };
            if t >= start {
                d_vs_o = d_vs_o.max((pd - po).abs());
            }
            if let Some(v) = pe {
                e_vs_d = e_vs_d.max((v - pd).abs());
                e_vs_o = e_vs_o.max((v - po).abs());
            }
            rows.push(LatticeRow { t, x, tau, eta, psi_direct: pd, psi_oracle: po, psi_extracted: pe });
        }
    }
    rep.write_csv("lattice.csv", &rows)?;
    let b = &mut rep.summary.bounds;
    b.direct_vs_oracle = Some(d_vs_o);
    b.extraction_vs_direct = Some(e_vs_d);
    b.extraction_vs_oracle = Some(e_vs_o);
    rep.oracle = Some(fine);
    Ok(())
}

fn stage_price(rep: &mut RunReport) -> Result<()> {
    let params = rep.config.params.clone();
    let o = rep.config.oracle.clone();
    let ex = rep.extraction.as_ref().expect("extracted");
    let surface = rep.surface.as_ref().expect("extracted");
    let direct = rep.direct.as_ref().expect("solved");
    let fine = rep.oracle.as_ref().expect("compared");
    let mut quotes = Vec::new();
    let mut worst_bound = 0.0f64;
    for sc in &o.scenarios {
        let eta = eta_of(&params, sc.s, sc.i);
        let tau = params.t - sc.t;
        let row = |method: &str, value: f64, stderr: f64, bound: f64| QuoteRow {
            scenario: sc.name.clone(),
            method: method.into(),
            eta,
            tau,
            value,
            stderr,
            bound,
            delta: None,
            theta: None,
        };
        let (psi, psi_bound) = extracted_psi(ex, surface, eta, tau)?;
        let q = price_from_psi(psi, sc.s, sc.i, sc.t, &params)?;
        let scale = q.value / psi;
        let (de, dt) = greeks(&ex.interp, (eta, tau))?;
        let (delta, theta) = contract_greeks(&params, psi, de, dt, eta, sc.s, sc.t);
        worst_bound = worst_bound.max(scale * psi_bound);
        quotes.push(QuoteRow {
            delta: Some(delta),
            theta: Some(theta),
            ..row("pipeline", q.value, 0.0, scale * psi_bound)
        });
        quotes.push(row("lattice", price_from_psi(direct.at(eta, tau)?, sc.s, sc.i, sc.t, &params)?.value, 0.0, 0.0));
        quotes.push(row(
            "crank_nicolson",
            price_from_psi(fine.at(eta, tau)?, sc.s, sc.i, sc.t, &params)?.value,
            0.0,
            0.0,
        ));
        let mut mc = McSpec {
            s0: sc.s,
            i0: sc.i,
            t0: sc.t,
            n_paths: o.mc_paths,
            n_steps: o.mc_steps,
            seed: o.mc_seed,
            payoff: o.payoff,
        };
        let m = monte_carlo_price(&params, &mc)?;
        quotes.push(row("monte_carlo", m.value, m.stderr, 0.0));
        if o.contract_mc && o.payoff != Payoff::Contract {
            mc.payoff = Payoff::Contract;
            let m = monte_carlo_price(&params, &mc)?;
            quotes.push(row("monte_carlo_contract", m.value, m.stderr, 0.0));
        }
    }
    rep.write_csv("quotes.csv", &quotes)?;
    rep.summary.bounds.price_bound = Some(worst_bound);
    rep.summary.quotes = quotes;
    Ok(())
}

/// Least-squares polynomial fit y ≈ Σ c_k x^k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    /// Coefficients from the constant term up.
    pub coeffs: Vec<f64>,
    pub r_squared: f64,
}

pub fn fit_polynomial(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::Invalid(format!("{} points cannot fit degree {degree}", x.len())));
    }
    let v = DMatrix::from_fn(x.len(), degree + 1, |i, k| x[i].powi(k as i32));
    let yv = DVector::from_column_slice(y);
    let c = v.clone().svd(true, true).solve(&yv, 1e-14).map_err(|e| Error::Singular(e.into()))?;
    let fitted = &v * &c;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(PolyFit { degree, coeffs: c.iter().copied().collect(), r_squared })
}

/// Least-squares slope of ln(err) against ln(h).
pub fn empirical_order(h: &[f64], err: &[f64]) -> Result<f64> {
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("errors must be positive to take an order".into()));
    }
    Ok(fit_polynomial(&lx, &ly, 1)?.coeffs[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub n_eta: u32,
    pub n_tau1: u32,
    pub dim: usize,
    pub m_eta: usize,
    pub m_tau1: usize,
    /// Target error the level was sized for (planted sweep).
    pub eps_target: Option<f64>,
    pub eps_prime: f64,
    /// Achieved max error of the extracted ψ.
    pub error: f64,
    /// Max |ψ_lattice − ψ_CN| over τ₁ ≥ Δ (pricing sweep).
    pub grid_error: Option<f64>,
    pub ae_calls: usize,
    pub ae_cost: f64,
    pub psi_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub source: ConvergenceSource,
    pub rows: Vec<ConvergenceRow>,
    /// Cubic (or lower, with few rows) fit of cost against ln(1/error).
    pub cost_fit: PolyFit,
}

/// Planted surface used by the cost sweep: smooth, separable, bounded away from zero.
pub fn planted_g(eta: f64) -> f64 {
    1.0 + 0.5 * (1.5 * eta).sin()
}

pub fn planted_h(tau: f64) -> f64 {
    (-tau).exp() * (1.0 + 0.3 * (2.0 * tau).cos())
}

/// Sweeps `levels ≥ 3` refinements and tabulates error against accounted
/// amplitude-estimation cost.
pub fn run_convergence(cfg: &RunConfig, levels: usize) -> Result<ConvergenceTable> {
    if levels < 3 {
        return Err(Error::Invalid(format!("convergence needs at least 3 levels (got {levels})")));
    }
    let rows = match cfg.convergence.source {
        ConvergenceSource::Pricing => pricing_sweep(cfg, levels)?,
        ConvergenceSource::Planted => planted_sweep(cfg, levels)?,
    };
    let x: Vec<f64> = rows.iter().map(|r| (1.0 / r.error).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.ae_cost).collect();
    let cost_fit = fit_polynomial(&x, &y, 3.min(rows.len() - 1))?;
    let table = ConvergenceTable { source: cfg.convergence.source, rows, cost_fit };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("convergence.csv"), &table.rows)?;
        fs::write(dir.join("convergence.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    }
    Ok(table)
}

fn pricing_sweep(cfg: &RunConfig, levels: usize) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::with_capacity(levels);
    for level in 0..levels {
        let c = RunConfig {
            n_eta: cfg.n_eta + level as u32,
            n_tau1: None,
            condition_report: false,
            output_dir: None,
            ..cfg.clone()
        };
        let rep = run_until(&c, Stage::Compare)?;
        let spec = rep.spec.as_ref().unwrap();
        let b = &rep.summary.bounds;
        rows.push(ConvergenceRow {
            level,
            n_eta: spec.n_eta,
            n_tau1: spec.n_tau1,
            dim: spec.dim(),
            m_eta: c.extraction.m_eta,
            m_tau1: c.extraction.m_tau1,
            eps_target: None,
            eps_prime: c.extraction.estimator().eps_prime,
            error: b.extraction_vs_oracle.unwrap_or(f64::NAN),
            grid_error: b.direct_vs_oracle,
            ae_calls: rep.summary.ae_calls.unwrap_or(0),
            ae_cost: rep.summary.ae_cost.unwrap_or(0.0),
            psi_bound: b.psi_bound.unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Level ℓ uses M = m_start + ℓ·m_step nodes per axis for target
/// ε = eps_start·eps_ratioˡ, n_tau1 = ⌈log₂(1/(ε·min ψ))⌉ + offset and
/// ε′ = ε·min ψ·2^n_tau1/(M_η² M_τ1²); cost is charged at 1/ε′ per call.
fn planted_sweep(cfg: &RunConfig, levels: usize) -> Result<Vec<ConvergenceRow>> {
    let cs = &cfg.convergence;
    let params = &cfg.params;
    let mut rows = Vec::with_capacity(levels);
    for level in 0..levels {
        let m = cs.m_start + level * cs.m_step;
        let eps = cs.eps_start * cs.eps_ratio.powi(level as i32);
        let delta = cfg.grid.delta_frac * params.t;
        // min ψ over the extraction domain, on a fine sample
        let min_psi =
            linspace(-params.eta_max, params.eta_max, 401).iter().map(|&e| planted_g(e)).fold(f64::INFINITY, f64::min)
                * linspace(delta, params.t, 201).iter().map(|&t| planted_h(t)).fold(f64::INFINITY, f64::min);
        let n_tau1 = ((1.0 / (eps * min_psi)).log2().ceil() as i32 + cs.n_tau_offset).max(1) as u32;
        let mut spec = GridSpec::with_sizes(params, cs.planted_n_eta, n_tau1);
        spec.delta_start = delta;
        if spec.dim() > cfg.max_dim {
            return Err(Error::DimensionCap { dim: spec.dim(), cap: cfg.max_dim });
        }
        let (state, scale) = plant_separable(&spec, planted_g, planted_h)?;
        let eps_prime = eps * min_psi * (1u64 << n_tau1) as f64 / (m * m * m * m) as f64;
        let xcfg = ExtractConfig { m_eta: m, m_tau1: m, ..cfg.extraction.extract_config() };
        let ex = extract_psi_2d(&state, &spec, scale, &xcfg, &AmplitudeEstimator::exact(eps_prime))?;
        drop(state);
        let etas = linspace(ex.interp.eta_range.0, ex.interp.eta_range.1, 41);
        let taus = linspace(ex.interp.tau_range.0, ex.interp.tau_range.1, 21);
        let surf = ex.surface(&etas, &taus)?;
        let mut err = 0.0f64;
        for (i, &t) in taus.iter().enumerate() {
            for (j, &e) in etas.iter().enumerate() {
                err = err.max((surf.psi[i][j] - planted_g(e) * planted_h(t)).abs());
            }
        }
        rows.push(ConvergenceRow {
            level,
            n_eta: spec.n_eta,
            n_tau1,
            dim: spec.dim(),
            m_eta: m,
            m_tau1: m,
            eps_target: Some(eps),
            eps_prime,
            error: err,
            grid_error: None,
            ae_calls: ex.total_calls,
            ae_cost: ex.total_cost,
            psi_bound: surf.psi_bound,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinkRow {
    pub n_eta: u32,
    pub n_tau1: u32,
    pub delta_eta_hat: f64,
    /// Apex of the triangle in the on-node run (a cell centre).
    pub apex_on_node: f64,
    /// Max |ψ_lattice − ψ_CN| on the first time level, kinks off nodes.
    pub err_off: f64,
    /// Same with the middle kink on a node.
    pub err_on: f64,
    /// Max error over τ₁ ≥ Δ, for reference.
    pub late_err_off: f64,
    pub late_err_on: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinkStudy {
    pub rows: Vec<KinkRow>,
    /// Empirical orders in δ̂_η^{1/2}: error ∝ (δ̂_η^{1/2})^order.
    pub order_off: f64,
    pub order_on: f64,
    /// order_off − order_on.
    pub degradation: f64,
}

/// Lattice solution versus the refined Crank-Nicolson reference: (max error on
/// the first time level, max error over τ₁ ≥ Δ).
fn lattice_errors(spec: &GridSpec, params: &MarketParams, cfg: &RunConfig) -> Result<(f64, f64)> {
    let opts = PreconditionOptions { mode: cfg.inversion.clone(), report: false, svd_cap: cfg.svd_cap };
    let pre = precondition(spec, params, &opts)?;
    let sol = solve_preconditioned(&pre, cfg.solver, cfg.dense_cap)?;
    let psi = sol.psi(pre.norm_b);
    let cn = CnConfig { closure: cfg.oracle.closure, ..Default::default() };
    let reference = reference_on_grid(spec, params, cfg.oracle.refine, &cn)?;
    let ne = spec.n_eta_pts();
    let start = spec.tau_start_index();
    let (mut first, mut late) = (0.0f64, 0.0f64);
    for (t, row) in reference.iter().enumerate() {
        for (x, r) in row.iter().enumerate() {
            let e = (psi[t * ne + x].re - r).abs();
            if t == 0 {
                first = first.max(e);
            }
            if t >= start {
                late = late.max(e);
            }
        }
    }
    Ok((first, late))
}

/// Two runs per level that differ only in where the middle kink of the
/// triangular initial condition falls: on a cell edge (the default apex
/// η_max/2, off the nodes) or on the cell centre η_max/2 + δη/2.
pub fn run_kink_study(cfg: &RunConfig, levels: usize) -> Result<KinkStudy> {
    if levels < 3 {
        return Err(Error::Invalid(format!("kink study needs at least 3 levels (got {levels})")));
    }
    let mut rows = Vec::with_capacity(levels);
    for level in 0..levels {
        let c = RunConfig { n_eta: cfg.n_eta + level as u32, n_tau1: None, ..cfg.clone() };
        let off = MarketParams { apex: None, ..cfg.params.clone() };
        let spec = c.grid_spec()?;
        let apex = 0.5 * off.eta_max + 0.5 * spec.delta_eta;
        let on = MarketParams { apex: Some(apex), ..off.clone() };
        let (err_off, late_err_off) = lattice_errors(&spec, &off, &c)?;
        let (err_on, late_err_on) = lattice_errors(&spec, &on, &c)?;
        rows.push(KinkRow {
            n_eta: spec.n_eta,
            n_tau1: spec.n_tau1,
            delta_eta_hat: spec.delta_eta_hat,
            apex_on_node: apex,
            err_off,
            err_on,
            late_err_off,
            late_err_on,
        });
    }
    let h: Vec<f64> = rows.iter().map(|r| r.delta_eta_hat.sqrt()).collect();
    let order_off = empirical_order(&h, &rows.iter().map(|r| r.err_off).collect::<Vec<_>>())?;
    let order_on = empirical_order(&h, &rows.iter().map(|r| r.err_on).collect::<Vec<_>>())?;
    let study = KinkStudy { rows, order_off, order_on, degradation: order_off - order_on };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("kink_study.csv"), &study.rows)?;
        fs::write(dir.join("kink_study.json"), serde_json::to_string_pretty(&study)? + "\n")?;
    }
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_cfg(name: &str) -> (RunConfig, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::preset(name).unwrap();
        cfg.output_dir = Some(dir.path().to_path_buf());
        (cfg, dir)
    }

    #[test]
    fn presets_resolve_and_validate() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
            cfg.validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::preset("seasoned-call").unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        // missing fields fall back to defaults
        let partial = RunConfig::from_json(r#"{"name": "p", "n_eta": 4}"#).unwrap();
        assert_eq!(partial.n_eta, 4);
        assert_eq!(partial.extraction, ExtractionSettings::default());
    }

    #[test]
    fn n_eta_below_two_is_rejected_before_compute() {
        let (mut cfg, dir) = tmp_cfg("smoke");
        cfg.n_eta = 1;
        let err = run_pipeline(&cfg).err().unwrap();
        assert!(err.is_validation());
        assert!(err.to_string().contains("validate"), "{err}");
        let summary: Summary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.failed_stage, Some(Stage::Validate));
        assert!(summary.bounds.solve_residual.is_none());
        let raw = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        // every bound field is present, even if null
        for key in ["solve_residual", "psi_bound", "kappa_w", "price_bound", "direct_vs_oracle"] {
            assert!(raw.contains(key), "{key} missing");
        }
    }

    #[test]
    fn smoke_runs_end_to_end() {
        let (cfg, dir) = tmp_cfg("smoke");
        let rep = run_pipeline(&cfg).unwrap();
        let s = &rep.summary;
        assert_eq!(s.status, "ok");
        assert!(s.bounds.solve_residual.unwrap() < 1e-10);
        assert!(s.bounds.original_residual.unwrap() < 1e-8);
        let p = s.bounds.success_probability.unwrap();
        assert!(p > 0.0 && p <= 1.0);
        let c = s.condition.as_ref().unwrap();
        assert!(c.bound_satisfied);
        for f in [
            "config.json",
            "system.json",
            "condition_report.json",
            "nodes.csv",
            "surface.csv",
            "lattice.csv",
            "quotes.csv",
            "summary.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f} not written");
        }
        let methods: Vec<&str> = s.quotes.iter().map(|q| q.method.as_str()).collect();
        assert_eq!(methods, ["pipeline", "lattice", "crank_nicolson", "monte_carlo", "monte_carlo_contract"]);
        assert!(s.stages.iter().all(|r| r.status == "ok"));
    }

    #[test]
    fn encoded_state_reproduces_the_lattice() {
        let (mut cfg, _dir) = tmp_cfg("smoke");
        cfg.output_dir = None;
        let rep = run_until(&cfg, Stage::Encode).unwrap();
        let state = rep.state.as_ref().unwrap();
        let scale = rep.amp_scale.unwrap();
        let direct = rep.direct.as_ref().unwrap();
        let ne = direct.eta.len();
        for (t, row) in direct.values.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                assert!((state.amplitudes[t * ne + x].re * scale - v).abs() < 1e-12 * scale);
            }
        }
        assert!((state.norm() - 1.0).abs() < 1e-12);
        assert_eq!(rep.summary.stages.iter().filter(|r| r.status == "skipped").count(), 3);
    }

    #[test]
    fn identical_config_gives_identical_csv() {
        let (cfg, a) = tmp_cfg("smoke");
        let b = tempfile::tempdir().unwrap();
        run_pipeline(&cfg).unwrap();
        run_pipeline(&RunConfig { output_dir: Some(b.path().to_path_buf()), ..cfg }).unwrap();
        for f in ["nodes.csv", "surface.csv", "lattice.csv", "quotes.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn scenario_outside_window_names_the_price_stage() {
        let (mut cfg, _dir) = tmp_cfg("smoke");
        cfg.oracle.scenarios[0].i = 40.0;
        let err = run_pipeline(&cfg).err().unwrap();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "price"), "{err}");
        assert!(!err.is_validation());
    }

    #[test]
    fn polynomial_fit_recovers_cubic() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - v + 0.5 * v * v * v).collect();
        let f = fit_polynomial(&x, &y, 3).unwrap();
        assert!((f.coeffs[3] - 0.5).abs() < 1e-10 && (f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_polynomial(&x[..3], &y[..3], 3).is_err());
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((empirical_order(&h, &e).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn convergence_needs_three_levels() {
        let cfg = RunConfig::preset("smoke").unwrap();
        assert!(run_convergence(&cfg, 2).is_err());
        assert!(run_kink_study(&cfg, 1).is_err());
    }

    #[test]
    fn pricing_sweep_error_column_is_monotone() {
        let cfg = RunConfig { n_eta: 3, output_dir: None, ..RunConfig::preset("smoke").unwrap() };
        let table = run_convergence(&cfg, 3).unwrap();
        let g: Vec<f64> = table.rows.iter().map(|r| r.grid_error.unwrap()).collect();
        assert!(g.windows(2).all(|w| w[1] < w[0]), "{g:?}");
        assert!(table.rows.windows(2).all(|w| w[1].dim > w[0].dim));
    }
}
