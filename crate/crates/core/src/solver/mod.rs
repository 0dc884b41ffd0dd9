//! Convex subproblem solver: maximize the sum sensing rate over transmit
//! covariances subject to trace budgets and concave lower bounds on the
//! users' communication rates, optionally relaxed by penalized slacks.
//!
//! Internally every quantity is normalized (powers by the largest budget,
//! rates by `sum_b B^(b) / L`) and handed to a log-barrier Newton method.

mod barrier;
mod problem;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::linalg::{c, herm_eigen_desc, herm_vec, identity, min_eigenvalue, vec_to_herm, CMat};
use crate::model::ChannelSet;
use crate::rates::{CovarianceSolution, LinearizationPoint, SensingFactor};

use barrier::{BarrierOptions, BarrierOutcome};
use problem::{ConcaveFn, Layout, LogDet, Point, Problem};

/// `sum_{(k, b) in entries} tr(Q_k^(b)) <= budget` (watts).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceConstraint {
    /// `(user, band)` pairs.
    pub entries: Vec<(usize, usize)>,
    pub budget: f64,
}

/// Per-user lower bounds on the linearized communication rate (nats/s).
#[derive(Debug, Clone)]
pub struct RateConstraints {
    pub r_min: Vec<f64>,
    pub lin: LinearizationPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverTolerances {
    pub kkt_tol: f64,
    pub max_newton_per_stage: usize,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self { kkt_tol: 1e-7, max_newton_per_stage: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct SubproblemSpec<'a> {
    pub channels: &'a ChannelSet,
    pub pilot_len: usize,
    /// Bands whose covariances are optimized; the others stay zero.
    pub active_bands: Vec<usize>,
    pub trace_constraints: Vec<TraceConstraint>,
    pub rate_constraints: Option<RateConstraints>,
    /// Penalty weight on the slacks; `None` disables them.
    pub slack_weight: Option<f64>,
    pub tol: SolverTolerances,
}

impl<'a> SubproblemSpec<'a> {
    /// All bands active, one global budget, no rate constraints.
    pub fn sensing_only(channels: &'a ChannelSet, pilot_len: usize, p_max: f64) -> Self {
        let active_bands: Vec<usize> = (0..channels.num_bands()).collect();
        let entries = active_bands
            .iter()
            .flat_map(|&b| (0..channels.num_users()).map(move |k| (k, b)))
            .collect();
        Self {
            channels,
            pilot_len,
            active_bands,
            trace_constraints: vec![TraceConstraint { entries, budget: p_max }],
            rate_constraints: None,
            slack_weight: None,
            tol: SolverTolerances::default(),
        }
    }

    /// One budget per band instead of a global one.
    pub fn per_band_budgets(mut self, budget: f64) -> Self {
        let users = self.channels.num_users();
        self.trace_constraints = self
            .active_bands
            .iter()
            .map(|&b| TraceConstraint { entries: (0..users).map(|k| (k, b)).collect(), budget })
            .collect();
        self
    }

    pub fn with_active_bands(mut self, bands: Vec<usize>) -> Self {
        let users = self.channels.num_users();
        let budget = self.trace_constraints.iter().map(|t| t.budget).fold(0.0, f64::max);
        self.trace_constraints = vec![TraceConstraint {
            entries: bands.iter().flat_map(|&b| (0..users).map(move |k| (k, b))).collect(),
            budget,
        }];
        self.active_bands = bands;
        self
    }

    pub fn with_rates(mut self, rates: RateConstraints, slack_weight: Option<f64>) -> Self {
        self.rate_constraints = Some(rates);
        self.slack_weight = slack_weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels;
        if self.pilot_len == 0 {
            return Err(invalid("pilot length must be positive"));
        }
        if self.active_bands.is_empty() {
            return Err(invalid("at least one active band is required"));
        }
        let mut seen = vec![false; ch.num_bands()];
        for &b in &self.active_bands {
            if b >= ch.num_bands() || seen[b] {
                return Err(invalid(format!("invalid or repeated active band {b}")));
            }
            seen[b] = true;
        }
        if self.trace_constraints.is_empty() {
            return Err(invalid("at least one trace constraint is required"));
        }
        let mut covered = vec![vec![false; ch.num_users()]; ch.num_bands()];
        for tc in &self.trace_constraints {
            if !(tc.budget > 0.0 && tc.budget.is_finite()) {
                return Err(invalid("trace budgets must be positive"));
            }
            for &(k, b) in &tc.entries {
                if k >= ch.num_users() || b >= ch.num_bands() || !seen[b] {
                    return Err(invalid(format!("trace constraint references inactive block ({k}, {b})")));
                }
                covered[b][k] = true;
            }
        }
        for &b in &self.active_bands {
            if covered[b].iter().any(|x| !x) {
                return Err(invalid(format!("band {b} has a block without a power budget")));
            }
        }
        if let Some(rc) = &self.rate_constraints {
            if rc.r_min.len() != ch.num_users() {
                return Err(IsacError::DimensionMismatch("one r_min per user is required".into()));
            }
            if rc.r_min.iter().any(|r| !(*r >= 0.0)) {
                return Err(invalid("r_min must be nonnegative"));
            }
            if rc.lin.g.len() != ch.num_bands() {
                return Err(IsacError::DimensionMismatch("linearization point does not match channels".into()));
            }
        }
        if let Some(rho) = self.slack_weight {
            if self.rate_constraints.is_none() {
                return Err(invalid("slacks require rate constraints"));
            }
            if !(rho > 0.0) {
                return Err(invalid("slack weight must be positive"));
            }
        }
        if !(self.tol.kkt_tol > 0.0) || self.tol.max_newton_per_stage == 0 {
            return Err(invalid("solver tolerances must be positive"));
        }
        Ok(())
    }

    fn power_scale(&self) -> f64 {
        self.trace_constraints.iter().map(|t| t.budget).fold(0.0, f64::max)
    }

    fn rate_scale(&self) -> f64 {
        let l = self.pilot_len as f64;
        self.active_bands
            .iter()
            .map(|&b| self.channels.bands[b].bandwidth / l)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    InfeasibleDetected,
}

/// KKT residuals in normalized units (powers relative to the largest budget,
/// rates relative to `sum_b B^(b) / L`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub q: CovarianceSolution,
    /// Slack values in nats/s (all zero when slacks are disabled).
    pub slacks: Vec<f64>,
    /// Sum SR minus the slack penalty (nats/s).
    pub objective: f64,
    pub sensing_rate: f64,
    pub dual_trace: Vec<f64>,
    pub dual_rate: Vec<f64>,
    /// Multipliers of `Q_k^(b) >= 0`, indexed `[band][user]` (zero on inactive bands).
    pub dual_psd: Vec<Vec<CMat>>,
    pub dual_slack: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: KktResidual,
}

struct Built {
    problem: Problem,
    ps: f64,
    rs: f64,
}

fn layout_for(spec: &SubproblemSpec, n_scalars: usize) -> Layout {
    let users = spec.channels.num_users();
    let mut blocks = Vec::new();
    let mut block_group = Vec::new();
    let mut groups = Vec::new();
    for (g, &b) in spec.active_bands.iter().enumerate() {
        let start = blocks.len();
        for k in 0..users {
            blocks.push((k, b));
            block_group.push(g);
        }
        groups.push((start, blocks.len()));
    }
    Layout { n: spec.channels.n_t, blocks, block_group, groups, n_scalars }
}

fn sensing_objective(spec: &SubproblemSpec, layout: &Layout, ps: f64, rs: f64) -> ConcaveFn {
    let ch = spec.channels;
    let l = spec.pilot_len as f64;
    let mut f = ConcaveFn::default();
    for (g, &b) in spec.active_bands.iter().enumerate() {
        let factor = SensingFactor::new(&ch.r[b]);
        let vblocks = factor.blocks(ch.n_t);
        let scale = c((l * ps).sqrt(), 0.0);
        let mut pieces = Vec::new();
        for k in 0..ch.num_users() {
            let j = layout.block_index(k, b).expect("active block");
            for v in &vblocks {
                pieces.push((j, v.adjoint() * scale));
            }
        }
        f.logdets.push(LogDet { group: g, weight: ch.bands[b].bandwidth / l / rs, dim: factor.v.ncols(), pieces });
    }
    f
}

fn trace_rows(spec: &SubproblemSpec, layout: &Layout, ps: f64) -> Vec<ConcaveFn> {
    let n = spec.channels.n_t;
    spec.trace_constraints
        .iter()
        .map(|tc| ConcaveFn {
            constant: tc.budget / ps,
            linear: tc
                .entries
                .iter()
                .map(|&(k, b)| (layout.block_index(k, b).expect("validated block"), -identity(n)))
                .collect(),
            ..Default::default()
        })
        .collect()
}

/// Normalized `phi_k = sum_b B [ln det(I + H sum_j Q_j H^H) - ln det B^n - sum_{i!=k} tr(G (Q_i - Q_i^n))] - r_min`
/// (plus `s_k` when `with_slack`, minus `margin`).
fn rate_row(
    spec: &SubproblemSpec,
    rc: &RateConstraints,
    layout: &Layout,
    k: usize,
    ps: f64,
    rs: f64,
    slack: bool,
    margin: f64,
) -> ConcaveFn {
    let ch = spec.channels;
    let mut f = ConcaveFn { constant: -rc.r_min[k] / rs - margin, ..Default::default() };
    for (g, &b) in spec.active_bands.iter().enumerate() {
        let bw = ch.bands[b].bandwidth;
        let w = bw / rs;
        let h = &ch.h[b][k] * c(ps.sqrt(), 0.0);
        let pieces = (0..ch.num_users())
            .map(|j| (layout.block_index(j, b).expect("active block"), h.clone()))
            .collect();
        f.logdets.push(LogDet { group: g, weight: w, dim: h.nrows(), pieces });
        f.constant -= w * rc.lin.ln_det_b[b][k];
        for i in 0..ch.num_users() {
            if i == k {
                continue;
            }
            let gk = &rc.lin.g[b][k];
            f.constant += w * crate::linalg::re_trace_prod(gk, &rc.lin.q.q[b][i]);
            f.linear
                .push((layout.block_index(i, b).expect("active block"), gk * c(-w * ps, 0.0)));
        }
    }
    if slack {
        f.scalars.push((k, 1.0));
    }
    f
}

fn build(spec: &SubproblemSpec) -> Built {
    let ps = spec.power_scale();
    let rs = spec.rate_scale();
    let slack = spec.slack_weight.is_some();
    let users = spec.channels.num_users();
    let layout = layout_for(spec, if slack { users } else { 0 });
    let mut objective = sensing_objective(spec, &layout, ps, rs);
    if let Some(rho) = spec.slack_weight {
        objective.scalars = (0..users).map(|k| (k, -rho)).collect();
    }
    let mut constraints = trace_rows(spec, &layout, ps);
    if let Some(rc) = &spec.rate_constraints {
        for k in 0..users {
            constraints.push(rate_row(spec, rc, &layout, k, ps, rs, slack, 0.0));
        }
    }
    let delta = 1e-12 / spec.channels.n_t as f64;
    Built { problem: Problem { layout, objective, constraints, delta }, ps, rs }
}

/// Normalized strictly interior starting covariances: a small multiple of the
/// identity is mixed in and every budget is left with some room.
fn interior_start(spec: &SubproblemSpec, layout: &Layout, start: &CovarianceSolution, ps: f64) -> Vec<CMat> {
    let n = layout.n;
    let theta = 1e-3;
    let mut q: Vec<CMat> = layout
        .blocks
        .iter()
        .map(|&(k, b)| {
            let src = start
                .q
                .get(b)
                .and_then(|row| row.get(k))
                .filter(|m| m.nrows() == n && m.ncols() == n)
                .map(|m| project_psd(m) * c(1.0 / ps, 0.0))
                .unwrap_or_else(|| CMat::zeros(n, n));
            src
        })
        .collect();
    // Per-block identity share: the tightest budget covering the block.
    let mut share = vec![f64::INFINITY; layout.blocks.len()];
    for tc in &spec.trace_constraints {
        let per = tc.budget / ps / (tc.entries.len() * n) as f64;
        for &(k, b) in &tc.entries {
            let j = layout.block_index(k, b).expect("validated block");
            share[j] = share[j].min(per);
        }
    }
    for (j, qj) in q.iter_mut().enumerate() {
        *qj = &*qj * c(1.0 - theta, 0.0) + identity(n) * c(theta * 0.5 * share[j], 0.0);
    }
    for tc in &spec.trace_constraints {
        let cap = tc.budget / ps * (1.0 - 1e-4);
        let used: f64 = tc
            .entries
            .iter()
            .map(|&(k, b)| crate::linalg::trace_re(&q[layout.block_index(k, b).expect("validated block")]))
            .sum();
        if used > cap {
            let f = cap / used;
            for &(k, b) in &tc.entries {
                let j = layout.block_index(k, b).expect("validated block");
                q[j] *= c(f, 0.0);
            }
        }
    }
    q
}

fn project_psd(q: &CMat) -> CMat {
    let (vals, vecs) = herm_eigen_desc(q);
    if vals.iter().all(|&v| v >= 0.0) {
        return crate::linalg::hermitize(q);
    }
    let n = q.nrows();
    let mut out = CMat::zeros(n, n);
    for (i, &v) in vals.iter().enumerate() {
        if v > 0.0 {
            let u = vecs.column(i);
            out += u * u.adjoint() * c(v, 0.0);
        }
    }
    out
}

fn barrier_options(spec: &SubproblemSpec) -> BarrierOptions {
    BarrierOptions {
        gap_tol: 0.1 * spec.tol.kkt_tol,
        max_newton_per_stage: spec.tol.max_newton_per_stage,
        ..Default::default()
    }
}

/// Finds normalized rate slacks for a strictly interior start of the
/// slack-free problem, by driving shifted slacks below the margin.
fn phase_one(spec: &SubproblemSpec, built: &Built, q0: Vec<CMat>) -> std::result::Result<(Vec<CMat>, usize), usize> {
    let rc = spec.rate_constraints.as_ref().expect("phase one needs rate constraints");
    let users = spec.channels.num_users();
    let layout = Layout { n_scalars: users, ..built.problem.layout.clone() };
    let margin = 1e-6 * (rc.r_min.iter().fold(0.0, |a: f64, b| a.max(*b)) / built.rs).max(1e-3);
    let mut constraints = trace_rows(spec, &layout, built.ps);
    for k in 0..users {
        constraints.push(rate_row(spec, rc, &layout, k, built.ps, built.rs, true, margin));
    }
    let objective = ConcaveFn { scalars: (0..users).map(|k| (k, -1.0)).collect(), ..Default::default() };
    let problem = Problem { layout, objective, constraints, delta: built.problem.delta };
    let mut start = Point { q: q0, s: vec![0.0; users] };
    let rate_vals: Vec<f64> = problem.constraints[spec.trace_constraints.len()..]
        .iter()
        .map(|f| f.value(&start).unwrap_or(f64::NEG_INFINITY))
        .collect();
    if rate_vals.iter().any(|v| !v.is_finite()) {
        return Err(0);
    }
    start.s = rate_vals.iter().map(|&v| (-v).max(0.0) + 1.0).collect();
    let stop = |p: &Point| p.s.iter().all(|&s| s < 0.5 * margin);
    let out = barrier::solve(&problem, start, &barrier_options(spec), Some(&stop));
    if out.early_stopped {
        Ok((out.point.q, out.newton_iters))
    } else {
        Err(out.newton_iters)
    }
}

/// Solves the subproblem starting from `start` (scaled into the interior as needed).
pub fn solve_subproblem(spec: &SubproblemSpec, start: &CovarianceSolution) -> Result<SolveResult> {
    spec.validate()?;
    let ch = spec.channels;
    if start.num_bands() != ch.num_bands()
        || start.num_users() != ch.num_users()
        || start.q.iter().flatten().any(|m| m.nrows() != ch.n_t || m.ncols() != ch.n_t)
    {
        return Err(IsacError::DimensionMismatch("start covariances do not match the channel set".into()));
    }
    let built = build(spec);
    let layout = &built.problem.layout;
    let mut q0 = interior_start(spec, layout, start, built.ps);
    let mut iterations = 0;

    let slack = spec.slack_weight.is_some();
    let n_traces = spec.trace_constraints.len();
    let mut s0 = Vec::new();
    if spec.rate_constraints.is_some() {
        let probe = Point { q: q0.clone(), s: vec![0.0; layout.n_scalars] };
        let vals: Vec<Option<f64>> = built.problem.constraints[n_traces..].iter().map(|f| f.value(&probe)).collect();
        if vals.iter().any(Option::is_none) {
            return Err(IsacError::Solver("rate constraint undefined at the start point".into()));
        }
        let vals: Vec<f64> = vals.into_iter().map(Option::unwrap).collect();
        if slack {
            s0 = vals.iter().map(|&v| (-v).max(0.0) + 0.1 * v.abs().max(1e-3)).collect();
        } else if vals.iter().any(|&v| v <= 0.0) {
            match phase_one(spec, &built, q0.clone()) {
                Ok((q, it)) => {
                    q0 = q;
                    iterations += it;
                }
                Err(it) => {
                    let point = Point { q: q0, s: Vec::new() };
                    let mut res = finish(spec, &built, &point, None, iterations + it);
                    res.status = SolveStatus::InfeasibleDetected;
                    return Ok(res);
                }
            }
        }
    }
    let start_point = Point { q: q0, s: s0 };
    let out = barrier::solve(&built.problem, start_point, &barrier_options(spec), None);
    iterations += out.newton_iters;
    let mut res = finish(spec, &built, &out.point, Some(&out), iterations);
    if res.status == SolveStatus::Optimal && res.kkt.max() > spec.tol.kkt_tol {
        res.status = SolveStatus::MaxIters;
    }
    Ok(res)
}

/// Converts a normalized point to a [`SolveResult`]. Multipliers come from the
/// barrier parameter, or from a least-squares complementarity fit when that
/// certifies the point better (or zero when no barrier outcome is available).
fn finish(spec: &SubproblemSpec, built: &Built, point: &Point, out: Option<&BarrierOutcome>, iterations: usize) -> SolveResult {
    let n_cons = built.problem.constraints.len();
    let users = spec.channels.num_users();
    let converged = out.is_some_and(|o| o.converged);
    let mut result = match out {
        Some(o) if o.t > 0.0 => {
            let lam: Vec<f64> = built
                .problem
                .constraints
                .iter()
                .map(|f| f.value(point).map_or(0.0, |v| 1.0 / (o.t * v)))
                .collect();
            let nu: Vec<f64> = point.s.iter().map(|s| 1.0 / (o.t * s)).collect();
            let barrier = certificate(spec, built, point, barrier_multipliers(spec, built, point, lam.clone(), &nu), iterations);
            match fitted_multipliers(spec, built, point, &lam) {
                Some(fit) => {
                    let refined = certificate(spec, built, point, fit, iterations);
                    if refined.kkt.max() < barrier.kkt.max() {
                        refined
                    } else {
                        barrier
                    }
                }
                None => barrier,
            }
        }
        _ => certificate(spec, built, point, (vec![0.0; n_cons], vec![0.0; if spec.slack_weight.is_some() { users } else { 0 }]), iterations),
    };
    if !converged {
        result.status = SolveStatus::MaxIters;
    }
    result
}

/// Barrier multipliers `1/(t phi)`. Slack stationarity `-rho + lambda_k + nu_k = 0`
/// fixes one of each pair from the other; the one with the larger (better
/// resolved) denominator is kept.
fn barrier_multipliers(spec: &SubproblemSpec, built: &Built, point: &Point, mut lam: Vec<f64>, nu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n_traces = spec.trace_constraints.len();
    let Some(rho) = spec.slack_weight else {
        return (lam, Vec::new());
    };
    let nu = (0..point.s.len())
        .map(|k| {
            let phi = built.problem.constraints[n_traces + k].value(point).unwrap_or(0.0);
            if point.s[k] > phi {
                let v = nu[k].min(rho);
                lam[n_traces + k] = rho - v;
                v
            } else {
                rho - lam[n_traces + k]
            }
        })
        .collect();
    (lam, nu)
}

/// Nonnegative multipliers minimizing the complementarity products
/// `tr(Z_j Q_j)`, `lambda_c phi_c` and `nu_k s_k`, with `Z` and `nu` implied
/// by stationarity. Near-active constraints have barely resolved values of
/// `phi`, so `1/(t phi)` is inaccurate there while this fit is not.
fn fitted_multipliers(spec: &SubproblemSpec, built: &Built, point: &Point, prior: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let layout = &built.problem.layout;
    let d = layout.bdim();
    let nb = layout.n_block_vars();
    let m = built.problem.constraints.len();
    let n_traces = spec.trace_constraints.len();
    let obj = built.problem.objective.eval(point, layout, false)?;
    let cons: Vec<_> = built
        .problem
        .constraints
        .iter()
        .map(|f| f.eval(point, layout, false))
        .collect::<Option<_>>()?;
    let n = layout.n;
    let block = |g: &nalgebra::DVector<f64>, j: usize| vec_to_herm(&g.as_slice()[j * d..(j + 1) * d], n) * &point.q[j];
    let rows = point.q.len() * 2 * n * n + m + point.s.len() + m;
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, m);
    let mut rhs = nalgebra::DVector::<f64>::zeros(rows);
    let mut r = 0;
    // Z_j Q_j = -(grad f + sum_c lambda_c grad phi_c) Q_j, entrywise.
    for j in 0..point.q.len() {
        let m0 = block(&obj.grad, j);
        let mc: Vec<CMat> = cons.iter().map(|ev| block(&ev.grad, j)).collect();
        for e in 0..n * n {
            for part in 0..2 {
                let pick = |z: nalgebra::Complex<f64>| if part == 0 { z.re } else { z.im };
                rhs[r] = -pick(m0[e]);
                for (cidx, mm) in mc.iter().enumerate() {
                    a[(r, cidx)] = pick(mm[e]);
                }
                r += 1;
            }
        }
    }
    for (cidx, ev) in cons.iter().enumerate() {
        a[(r, cidx)] = ev.value;
        r += 1;
    }
    // nu_k = rho - lambda_k for the slack of rate row k.
    if let Some(rho) = spec.slack_weight {
        for (k, &s) in point.s.iter().enumerate() {
            debug_assert!(obj.grad[nb + k] == -rho);
            a[(r, n_traces + k)] = s;
            rhs[r] = rho * s;
            r += 1;
        }
    }
    // Weak pull towards the barrier estimate keeps the fit well posed.
    let w = 1e-9;
    for (cidx, &l) in prior.iter().enumerate() {
        a[(r, cidx)] = w;
        rhs[r] = w * l;
        r += 1;
    }
    let sol = a.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let lam: Vec<f64> = sol.iter().map(|&l| l.max(0.0)).collect();
    if lam.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let nu = match spec.slack_weight {
        Some(rho) => (0..point.s.len()).map(|k| rho - lam[n_traces + k]).collect(),
        None => Vec::new(),
    };
    Some((lam, nu))
}

/// Assembles a result from normalized multipliers; PSD multipliers follow
/// from stationarity, so the certificate is exact up to their sign.
fn certificate(spec: &SubproblemSpec, built: &Built, point: &Point, (lam, nu): (Vec<f64>, Vec<f64>), iterations: usize) -> SolveResult {
    let ch = spec.channels;
    let layout = &built.problem.layout;
    let (ps, rs) = (built.ps, built.rs);
    let n_traces = spec.trace_constraints.len();
    let mut q = CovarianceSolution::zeros(ch.num_bands(), ch.num_users(), ch.n_t);
    for (j, &(k, b)) in layout.blocks.iter().enumerate() {
        q.q[b][k] = project_psd(&point.q[j]) * c(ps, 0.0);
    }
    let slacks: Vec<f64> = if spec.slack_weight.is_some() {
        point.s.iter().map(|s| s * rs).collect()
    } else {
        vec![0.0; ch.num_users()]
    };
    let dual_trace: Vec<f64> = lam[..n_traces].iter().map(|l| l * rs / ps).collect();
    let dual_rate: Vec<f64> = if spec.rate_constraints.is_some() { lam[n_traces..].to_vec() } else { Vec::new() };
    let dual_slack = if spec.slack_weight.is_some() { nu } else { vec![0.0; ch.num_users()] };
    let mut result = SolveResult {
        q,
        slacks,
        objective: 0.0,
        sensing_rate: 0.0,
        dual_trace,
        dual_rate,
        dual_psd: vec![vec![CMat::zeros(ch.n_t, ch.n_t); ch.num_users()]; ch.num_bands()],
        dual_slack,
        status: SolveStatus::Optimal,
        iterations,
        kkt: KktResidual::default(),
    };
    let sr = sensing_objective(spec, layout, ps, rs).value(point).unwrap_or(f64::NAN) * rs;
    result.sensing_rate = sr;
    let penalty = spec.slack_weight.map_or(0.0, |rho| rho * result.slacks.iter().sum::<f64>());
    result.objective = sr - penalty;
    if let Ok(stat) = lagrangian_gradient(spec, &result) {
        for (j, &(k, b)) in layout.blocks.iter().enumerate() {
            result.dual_psd[b][k] = &stat[j] * c(-rs / ps, 0.0);
        }
    }
    result.kkt = kkt_residual(spec, &result).unwrap_or(KktResidual {
        stationarity: f64::INFINITY,
        primal: f64::INFINITY,
        dual: f64::INFINITY,
        complementarity: f64::INFINITY,
    });
    result
}

fn normalized_point(spec: &SubproblemSpec, layout: &Layout, q: &CovarianceSolution, slacks: &[f64], ps: f64, rs: f64) -> Result<Point> {
    if q.num_bands() != spec.channels.num_bands() || q.num_users() != spec.channels.num_users() {
        return Err(IsacError::DimensionMismatch("covariance set does not match channel set".into()));
    }
    let qn = layout
        .blocks
        .iter()
        .map(|&(k, b)| {
            let m = &q.q[b][k];
            if m.nrows() != layout.n || m.ncols() != layout.n {
                return Err(IsacError::DimensionMismatch("covariance must be N_t x N_t".into()));
            }
            Ok(crate::linalg::hermitize(m) * c(1.0 / ps, 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = if layout.n_scalars > 0 {
        if slacks.len() != layout.n_scalars {
            return Err(IsacError::DimensionMismatch("one slack per user is required".into()));
        }
        slacks.iter().map(|v| v / rs).collect()
    } else {
        Vec::new()
    };
    Ok(Point { q: qn, s })
}

/// Normalized `grad f + sum_c lambda_c grad phi_c` per active block (Hermitian matrices),
/// with the multipliers taken from `cand`.
fn lagrangian_gradient(spec: &SubproblemSpec, cand: &SolveResult) -> Result<Vec<CMat>> {
    let built = build(spec);
    let layout = &built.problem.layout;
    let point = normalized_point(spec, layout, &cand.q, &cand.slacks, built.ps, built.rs)?;
    let (lam, _) = normalized_multipliers(spec, cand, &built)?;
    let obj = built
        .problem
        .objective
        .eval(&point, layout, false)
        .ok_or_else(|| IsacError::Solver("objective undefined at candidate".into()))?;
    let mut g = obj.grad;
    for (f, l) in built.problem.constraints.iter().zip(&lam) {
        let ev = f
            .eval(&point, layout, false)
            .ok_or_else(|| IsacError::Solver("constraint undefined at candidate".into()))?;
        g.axpy(*l, &ev.grad, 1.0);
    }
    let d = layout.bdim();
    Ok((0..layout.blocks.len())
        .map(|j| vec_to_herm(&g.as_slice()[j * d..(j + 1) * d], layout.n))
        .collect())
}

fn normalized_multipliers(spec: &SubproblemSpec, cand: &SolveResult, built: &Built) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ps, rs) = (built.ps, built.rs);
    if cand.dual_trace.len() != spec.trace_constraints.len() {
        return Err(IsacError::DimensionMismatch("one trace multiplier per trace constraint".into()));
    }
    let mut lam: Vec<f64> = cand.dual_trace.iter().map(|l| l * ps / rs).collect();
    if spec.rate_constraints.is_some() {
        if cand.dual_rate.len() != spec.channels.num_users() {
            return Err(IsacError::DimensionMismatch("one rate multiplier per user".into()));
        }
        lam.extend(cand.dual_rate.iter().copied());
    }
    let nu = if spec.slack_weight.is_some() { cand.dual_slack.clone() } else { Vec::new() };
    Ok((lam, nu))
}

/// Stationarity, primal feasibility, dual feasibility and complementarity
/// residuals of `candidate` (its covariances, slacks and multipliers).
pub fn kkt_residual(spec: &SubproblemSpec, candidate: &SolveResult) -> Result<KktResidual> {
    spec.validate()?;
    let built = build(spec);
    let layout = &built.problem.layout;
    let (ps, rs) = (built.ps, built.rs);
    let point = normalized_point(spec, layout, &candidate.q, &candidate.slacks, ps, rs)?;
    let (lam, nu) = normalized_multipliers(spec, candidate, &built)?;
    if candidate.dual_psd.len() != spec.channels.num_bands() {
        return Err(IsacError::DimensionMismatch("PSD multipliers must be indexed [band][user]".into()));
    }

    let lag = lagrangian_gradient(spec, candidate)?;
    let mut stat_sq = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut primal: f64 = 0.0;
    for (j, &(k, b)) in layout.blocks.iter().enumerate() {
        let z = &candidate.dual_psd[b][k] * c(ps / rs, 0.0);
        let r = herm_vec(&(&lag[j] + &z));
        stat_sq += r.iter().map(|x| x * x).sum::<f64>();
        dual = dual.max(-min_eigenvalue(&z));
        comp = comp.max(crate::linalg::re_trace_prod(&z, &point.q[j]).abs());
        primal = primal.max(-min_eigenvalue(&point.q[j]));
    }
    if spec.slack_weight.is_some() {
        let rho = spec.slack_weight.unwrap_or(0.0);
        let n_traces = spec.trace_constraints.len();
        for (k, &s) in point.s.iter().enumerate() {
            let r = -rho + lam[n_traces + k] + nu.get(k).copied().unwrap_or(0.0);
            stat_sq += r * r;
            primal = primal.max(-s);
            let v = nu.get(k).copied().unwrap_or(0.0);
            dual = dual.max(-v);
            comp = comp.max((v * s).abs());
        }
    }
    for (f, l) in built.problem.constraints.iter().zip(&lam) {
        let phi = f
            .value(&point)
            .ok_or_else(|| IsacError::Solver("constraint undefined at candidate".into()))?;
        primal = primal.max(-phi);
        dual = dual.max(-l);
        comp = comp.max((l * phi).abs());
    }
    Ok(KktResidual { stationarity: stat_sq.sqrt(), primal, dual, complementarity: comp })
}

fn gradient_of(spec: &SubproblemSpec, f: &ConcaveFn, built: &Built, q: &CovarianceSolution) -> Result<Vec<Vec<CMat>>> {
    let layout = &built.problem.layout;
    let slacks = vec![0.0; layout.n_scalars];
    let point = normalized_point(spec, layout, q, &slacks, built.ps, built.rs)?;
    let ev = f
        .eval(&point, layout, false)
        .ok_or_else(|| invalid("log-det argument is not positive definite (domain boundary)"))?;
    let ch = spec.channels;
    let d = layout.bdim();
    let mut out = vec![vec![CMat::zeros(ch.n_t, ch.n_t); ch.num_users()]; ch.num_bands()];
    for (j, &(k, b)) in layout.blocks.iter().enumerate() {
        out[b][k] = vec_to_herm(&ev.grad.as_slice()[j * d..(j + 1) * d], layout.n) * c(built.rs / built.ps, 0.0);
    }
    Ok(out)
}

/// Gradient of the sum sensing rate (nats/s per watt), `[band][user]`, as
/// Hermitian matrices `G` with `d SR = Re tr(G dQ)`; zero on inactive bands.
pub fn objective_gradient(spec: &SubproblemSpec, q: &CovarianceSolution) -> Result<Vec<Vec<CMat>>> {
    spec.validate()?;
    let built = build(spec);
    let f = sensing_objective(spec, &built.problem.layout, built.ps, built.rs);
    gradient_of(spec, &f, &built, q)
}

/// Gradient of user `k`'s linearized rate bound summed over the active bands.
pub fn rate_constraint_gradient(spec: &SubproblemSpec, k: usize, q: &CovarianceSolution) -> Result<Vec<Vec<CMat>>> {
    spec.validate()?;
    let rc = spec
        .rate_constraints
        .as_ref()
        .ok_or_else(|| invalid("spec has no rate constraints"))?;
    if k >= spec.channels.num_users() {
        return Err(invalid("user index out of range"));
    }
    let built = build(spec);
    let f = rate_row(spec, rc, &built.problem.layout, k, built.ps, built.rs, false, 0.0);
    gradient_of(spec, &f, &built, q)
}

/// Gradient of `sum tr(Q)` over the blocks of trace constraint `idx` (the identity on each).
pub fn trace_constraint_gradient(spec: &SubproblemSpec, idx: usize) -> Result<Vec<Vec<CMat>>> {
    spec.validate()?;
    let tc = spec
        .trace_constraints
        .get(idx)
        .ok_or_else(|| invalid("trace constraint index out of range"))?;
    let ch = spec.channels;
    let mut out = vec![vec![CMat::zeros(ch.n_t, ch.n_t); ch.num_users()]; ch.num_bands()];
    for &(k, b) in &tc.entries {
        out[b][k] = identity(ch.n_t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_channel_set, SystemConfig};

    fn grad_fd(problem: &Problem, x: &Point, t: f64, h: f64) -> nalgebra::DVector<f64> {
        let layout = &problem.layout;
        let n = layout.n_vars();
        let base = {
            let mut v = nalgebra::DVector::zeros(n);
            let d = layout.bdim();
            for (j, q) in x.q.iter().enumerate() {
                crate::linalg::herm_to_vec(q, &mut v.as_mut_slice()[j * d..(j + 1) * d]);
            }
            for (i, s) in x.s.iter().enumerate() {
                v[layout.scalar_offset(i)] = *s;
            }
            v
        };
        let mut g = nalgebra::DVector::zeros(n);
        for i in 0..n {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = barrier::merit(problem, &Point::from_vec(&p, layout), t).unwrap();
            let fm = barrier::merit(problem, &Point::from_vec(&m, layout), t).unwrap();
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn newton_direction_consistent_with_merit_gradient() {
        let cfg = SystemConfig::default().with_bands(2);
        let ch = generate_channel_set(&cfg, 3).unwrap();
        let mut q = CovarianceSolution::zeros(2, 2, cfg.tx_antennas);
        for (i, m) in q.q.iter_mut().flatten().enumerate() {
            *m = identity(cfg.tx_antennas) * c(1e-3 * (1.0 + i as f64), 0.0);
        }
        let lin = LinearizationPoint::new(&q, &ch).unwrap();
        let spec = SubproblemSpec::sensing_only(&ch, cfg.pilot_len, cfg.p_max_w)
            .with_rates(RateConstraints { r_min: vec![1.6e7; 2], lin }, Some(1.0));
        let built = build(&spec);
        let q0 = interior_start(&spec, &built.problem.layout, &q, built.ps);
        let probe = Point { q: q0.clone(), s: vec![0.0; 2] };
        let s0: Vec<f64> = built.problem.constraints[1..]
            .iter()
            .map(|f| (-f.value(&probe).unwrap()).max(0.0) + 0.5)
            .collect();
        let x = Point { q: q0, s: s0 };
        let t = 10.0;
        let h = 1e-6;
        let (dir, _dec, grad) = barrier::newton_direction(&built.problem, &x, t).unwrap();
        let fd = grad_fd(&built.problem, &x, t, h);
        let gerr = (&grad - &fd).norm() / fd.norm();
        assert!(gerr < 1e-5, "gradient mismatch {gerr}");
        // H dir = -grad, checked via gradient differences along dir.
        let eps = 1e-5;
        let (_, _, gp) = barrier::newton_direction(&built.problem, &x.axpy(eps, &dir), t).unwrap();
        let (_, _, gm) = barrier::newton_direction(&built.problem, &x.axpy(-eps, &dir), t).unwrap();
        let hd = (gp - gm) / (2.0 * eps);
        let herr = (&hd + &grad).norm() / grad.norm();
        assert!(herr < 1e-4, "Hessian mismatch {herr}");
    }
}
