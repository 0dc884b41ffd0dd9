//! Two-phase inner-approximation loop: a slack-penalized search for a point
//! meeting every user's rate requirement, followed by monotone sensing-rate
//! maximization over successive convex subproblems, each relinearized at the
//! previous iterate.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::linalg::{c, frob_norm, trace_re, CMat};
use crate::model::{ChannelSet, SystemConfig};
use crate::rates::{
    nats_to_bits, sum_sensing_rate, user_comm_rate, user_cr_lower_bound, CovarianceSolution, LinearizationPoint,
    RateReport,
};
use crate::solver::{
    solve_subproblem, RateConstraints, SolveStatus, SolverTolerances, SubproblemSpec, TraceConstraint,
};

/// Fraction of the budget used by the random starting point.
pub const INIT_POWER_FRACTION: f64 = 0.9;
/// Allowed relative decrease of the main-phase objective between iterations.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Feasibility,
    Main,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Feasibility => "feasibility",
            Phase::Main => "main",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub phase: Phase,
    pub iter: usize,
    /// Subproblem objective in nats/s (sum SR, minus the slack penalty in the feasibility phase).
    pub objective_nats: f64,
    /// Largest slack (nats/s); zero in the main phase.
    pub max_slack: f64,
    pub min_user_cr_bits: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub rows: Vec<TraceRow>,
}

impl IterationTrace {
    pub const CSV_HEADER: &'static str = "phase,iter,objective_bits,max_slack_bits,min_user_cr_bits,elapsed_s";

    pub fn iterations(&self, phase: Phase) -> usize {
        self.rows.iter().filter(|r| r.phase == phase).count()
    }

    pub fn main_objectives(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == Phase::Main)
            .map(|r| r.objective_nats)
            .collect()
    }

    /// True when no main-phase objective drops by more than `rel_slack` relative.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.main_objectives()
            .windows(2)
            .all(|w| w[1] >= w[0] - rel_slack * w[0].abs().max(1e-300))
    }

    /// CSV rows in bits/s; `prefix` is prepended to every line (e.g. a scheme column).
    pub fn write_csv_rows<W: Write>(&self, mut out: W, prefix: &str) -> std::io::Result<()> {
        for r in &self.rows {
            writeln!(
                out,
                "{prefix}{},{},{},{},{},{:.6}",
                r.phase,
                r.iter,
                nats_to_bits(r.objective_nats),
                nats_to_bits(r.max_slack),
                r.min_user_cr_bits,
                r.elapsed_s
            )?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        self.write_csv_rows(out, "")
    }
}

/// How the transmit power is budgeted across base stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PowerBudget {
    /// One budget shared by all active base stations.
    Global(f64),
    /// The same budget for each active base station.
    PerBand(f64),
}

/// Everything the optimizer needs besides the channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaSetup {
    pub pilot_len: usize,
    pub active_bands: Vec<usize>,
    pub budget: PowerBudget,
    /// Per-user rate requirement summed over bands (nats/s).
    pub r_min: f64,
    pub rho: f64,
    /// Slack threshold relative to `r_min`.
    pub epsilon: f64,
    pub convergence_tol: f64,
    pub max_feasibility_iters: usize,
    pub max_main_iters: usize,
    pub solver: SolverTolerances,
}

impl IaSetup {
    /// The joint scheme: all bands, one global power budget.
    pub fn from_config(config: &SystemConfig) -> Self {
        Self {
            pilot_len: config.pilot_len,
            active_bands: (0..config.num_bands()).collect(),
            budget: PowerBudget::Global(config.p_max_w),
            r_min: config.r_min_nats(),
            rho: config.rho,
            epsilon: config.epsilon,
            convergence_tol: config.convergence_tol,
            max_feasibility_iters: config.solver.max_feasibility_iters,
            max_main_iters: config.solver.max_main_iters,
            solver: SolverTolerances {
                kkt_tol: config.solver.kkt_tol,
                max_newton_per_stage: config.solver.max_newton_per_stage,
            },
        }
    }

    pub fn validate(&self, ch: &ChannelSet) -> Result<()> {
        if self.active_bands.is_empty() || self.active_bands.iter().any(|&b| b >= ch.num_bands()) {
            return Err(invalid("active bands must be nonempty and in range"));
        }
        let p = match self.budget {
            PowerBudget::Global(p) | PowerBudget::PerBand(p) => p,
        };
        if !(p > 0.0) {
            return Err(invalid("power budget must be positive"));
        }
        if !(self.r_min >= 0.0) || !(self.rho > 0.0) || !(self.epsilon > 0.0) || !(self.convergence_tol > 0.0) {
            return Err(invalid("r_min, rho, epsilon and convergence tolerance must be valid"));
        }
        Ok(())
    }

    fn trace_constraints(&self, users: usize) -> Vec<TraceConstraint> {
        let entries = |b: usize| (0..users).map(move |k| (k, b));
        match self.budget {
            PowerBudget::Global(p) => vec![TraceConstraint {
                entries: self.active_bands.iter().flat_map(|&b| entries(b)).collect(),
                budget: p,
            }],
            PowerBudget::PerBand(p) => self
                .active_bands
                .iter()
                .map(|&b| TraceConstraint { entries: entries(b).collect(), budget: p })
                .collect(),
        }
    }

    fn spec<'a>(&self, ch: &'a ChannelSet, rates: Option<RateConstraints>, slack: bool) -> SubproblemSpec<'a> {
        SubproblemSpec {
            channels: ch,
            pilot_len: self.pilot_len,
            active_bands: self.active_bands.clone(),
            trace_constraints: self.trace_constraints(ch.num_users()),
            rate_constraints: rates,
            slack_weight: slack.then_some(self.rho),
            tol: self.solver,
        }
    }

    fn rate_constraints(&self, q: &CovarianceSolution, ch: &ChannelSet) -> Result<RateConstraints> {
        Ok(RateConstraints { r_min: vec![self.r_min; ch.num_users()], lin: LinearizationPoint::new(q, ch)? })
    }
}

fn gaussian_gram<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let a = CMat::from_fn(n, n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        c(re, im) * std::f64::consts::FRAC_1_SQRT_2
    });
    &a * a.adjoint()
}

/// Random Gram covariances on every band, scaled so the total power is
/// `0.9 P_max`.
pub fn random_init<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> CovarianceSolution {
    let setup = IaSetup::from_config(config);
    init_for(&setup, config.num_bands(), config.num_users(), config.tx_antennas, rng)
}

/// Random Gram covariances on the active bands; each budget is filled to 90 %.
pub fn init_for<R: Rng + ?Sized>(setup: &IaSetup, bands: usize, users: usize, n_t: usize, rng: &mut R) -> CovarianceSolution {
    let mut q = CovarianceSolution::zeros(bands, users, n_t);
    for &b in &setup.active_bands {
        for k in 0..users {
            q.q[b][k] = gaussian_gram(n_t, rng);
        }
    }
    match setup.budget {
        PowerBudget::Global(p) => {
            let total = q.total_power();
            q.scale(INIT_POWER_FRACTION * p / total);
        }
        PowerBudget::PerBand(p) => {
            for &b in &setup.active_bands {
                let f = INIT_POWER_FRACTION * p / q.band_power(b);
                for m in q.q[b].iter_mut() {
                    *m *= c(f, 0.0);
                }
            }
        }
    }
    q
}

fn user_rates(q: &CovarianceSolution, ch: &ChannelSet) -> Result<Vec<f64>> {
    (0..ch.num_users()).map(|k| user_comm_rate(k, q, ch)).collect()
}

fn channel_is_zero(ch: &ChannelSet, k: usize, bands: &[usize]) -> bool {
    bands.iter().all(|&b| frob_norm(&ch.h[b][k]) < 1e-300_f64.max(f64::MIN_POSITIVE))
}

/// Slack-penalized phase: repeats the relaxed subproblem, relinearizing at
/// each iterate, until every slack is below `epsilon * r_min` and the exact
/// rates reach `r_min (1 - epsilon)`.
pub fn find_feasible(
    setup: &IaSetup,
    ch: &ChannelSet,
    q0: &CovarianceSolution,
) -> Result<(CovarianceSolution, IterationTrace)> {
    setup.validate(ch)?;
    let mut trace = IterationTrace::default();
    let start = Instant::now();
    let mut q = q0.clone();
    if setup.r_min == 0.0 {
        return Ok((q, trace));
    }
    for k in 0..ch.num_users() {
        if channel_is_zero(ch, k, &setup.active_bands) {
            return Err(IsacError::InfeasibleScenario {
                reason: format!("user {k} has a zero channel on every active band"),
                slacks: vec![setup.r_min; ch.num_users()],
            });
        }
    }
    let target = setup.r_min * (1.0 - setup.epsilon);
    if user_rates(&q, ch)?.iter().all(|&r| r >= setup.r_min) {
        return Ok((q, trace));
    }
    let mut slacks = vec![f64::INFINITY; ch.num_users()];
    for n in 0..setup.max_feasibility_iters {
        let spec = setup.spec(ch, Some(setup.rate_constraints(&q, ch)?), true);
        let res = solve_subproblem(&spec, &q)?;
        q = res.q;
        slacks = res.slacks.clone();
        let max_slack = slacks.iter().copied().fold(0.0, f64::max);
        let rates = user_rates(&q, ch)?;
        trace.rows.push(TraceRow {
            phase: Phase::Feasibility,
            iter: n,
            objective_nats: res.objective,
            max_slack,
            min_user_cr_bits: rates.iter().map(|&r| nats_to_bits(r)).fold(f64::INFINITY, f64::min),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("feasibility iter {n}: objective {:.6e} max slack {max_slack:.3e}", res.objective);
        if max_slack < setup.epsilon * setup.r_min && rates.iter().all(|&r| r >= target) {
            return Ok((q, trace));
        }
    }
    Err(IsacError::InfeasibleScenario {
        reason: format!("no feasible point after {} iterations", setup.max_feasibility_iters),
        slacks,
    })
}

/// Result of the main phase.
#[derive(Debug, Clone)]
pub struct IaOutcome {
    pub q: CovarianceSolution,
    pub trace: IterationTrace,
    /// Relative-change criterion met before the iteration cap.
    pub converged: bool,
}

/// Main phase: successive convex subproblems with relinearization, stopping
/// when the relative change of the sum SR falls below `tol`. A candidate that
/// would lower the objective is rejected and the loop ends, so the recorded
/// objective sequence is nondecreasing.
pub fn optimize(
    setup: &IaSetup,
    ch: &ChannelSet,
    q_feas: &CovarianceSolution,
    tol: f64,
) -> Result<IaOutcome> {
    setup.validate(ch)?;
    let start = Instant::now();
    let mut trace = IterationTrace::default();
    let mut q = q_feas.clone();
    let mut prev = sum_sensing_rate(&q, ch, setup.pilot_len)?;
    let mut converged = false;
    let rates_on = setup.r_min > 0.0;
    for n in 0..setup.max_main_iters {
        let rc = if rates_on { Some(setup.rate_constraints(&q, ch)?) } else { None };
        let lin = rc.as_ref().map(|r| r.lin.clone());
        let spec = setup.spec(ch, rc, false);
        let res = solve_subproblem(&spec, &q)?;
        if res.status == SolveStatus::InfeasibleDetected {
            return Err(IsacError::Solver(format!(
                "main-phase subproblem {n} reported infeasibility at a feasible expansion point"
            )));
        }
        let cand = res.q;
        let rates = user_rates(&cand, ch)?;
        if let Some(lin) = &lin {
            for (k, exact) in rates.iter().enumerate() {
                let lb = user_cr_lower_bound(k, &cand, lin, ch)?;
                debug_assert!(lb <= exact + 1e-9 * exact.abs().max(1.0), "rate bound above exact rate");
            }
        }
        let obj = sum_sensing_rate(&cand, ch, setup.pilot_len)?;
        let feasible = !rates_on || rates.iter().all(|&r| r >= setup.r_min * (1.0 - 1e-6));
        if !feasible || obj < prev - MONOTONE_SLACK * prev.abs() {
            log::debug!("main iter {n}: candidate rejected (objective {obj:.9e} vs {prev:.9e}, feasible {feasible})");
            converged = true;
            break;
        }
        q = cand;
        trace.rows.push(TraceRow {
            phase: Phase::Main,
            iter: n,
            objective_nats: obj,
            max_slack: 0.0,
            min_user_cr_bits: rates.iter().map(|&r| nats_to_bits(r)).fold(f64::INFINITY, f64::min),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("main iter {n}: sum SR {obj:.9e} nats/s");
        let change = (obj - prev).abs() / prev.abs().max(1e-300);
        prev = obj;
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(IaOutcome { q, trace, converged })
}

/// Feasibility followed by the main phase, from a random start drawn from `rng`.
pub fn run<R: Rng + ?Sized>(setup: &IaSetup, ch: &ChannelSet, rng: &mut R) -> Result<IaOutcome> {
    setup.validate(ch)?;
    let q0 = init_for(setup, ch.num_bands(), ch.num_users(), ch.n_t, rng);
    let (q_feas, feas_trace) = find_feasible(setup, ch, &q0)?;
    let mut out = optimize(setup, ch, &q_feas, setup.convergence_tol)?;
    let mut rows = feas_trace.rows;
    rows.append(&mut out.trace.rows);
    out.trace.rows = rows;
    Ok(out)
}

/// Rates of a finished run.
pub fn report(q: &CovarianceSolution, ch: &ChannelSet, l: usize) -> Result<RateReport> {
    RateReport::evaluate(q, ch, l)
}

/// Total power actually used on each band.
pub fn band_powers(q: &CovarianceSolution) -> Vec<f64> {
    q.q.iter().map(|band| band.iter().map(trace_re).sum()).collect()
}
