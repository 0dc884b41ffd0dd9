//! Log-barrier interior-point method with damped Newton steps.
//!
//! Minimizes `F_t(x) = -t f(x) - sum_c ln phi_c(x) - sum_j ln det(Q_j + delta I) - sum_i ln s_i`
//! for an increasing sequence of `t`. The Newton system has the structure
//! `H = D + U U^T`: `D` is block diagonal (one dense block per band group,
//! a diagonal for the scalar variables) and `U` has one column per scalar
//! constraint, so it is solved by per-group Cholesky plus a small capacitance
//! system.

use nalgebra::{Cholesky, DVector, Dyn};

use crate::linalg::{accumulate_basis_images, herm_to_vec, identity, ln_det_from_chol, min_eig_congruence, RMat};

use super::problem::{psd_factors, Point, Problem};

#[derive(Debug, Clone)]
pub(crate) struct BarrierOptions {
    /// Stop once the duality-gap proxy `m / t` drops below this value.
    pub gap_tol: f64,
    pub max_newton_per_stage: usize,
    pub t0: f64,
    pub t_factor: f64,
    pub newton_tol: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            max_newton_per_stage: 200,
            t0: 10.0,
            t_factor: 20.0,
            newton_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierOutcome {
    pub point: Point,
    pub t: f64,
    pub newton_iters: usize,
    /// Reached the gap tolerance.
    pub converged: bool,
    pub early_stopped: bool,
}

/// Barrier merit `F_t`, or `None` outside the strict interior.
pub(crate) fn merit(problem: &Problem, point: &Point, t: f64) -> Option<f64> {
    let f = problem.objective.value(point)?;
    let mut v = -t * f;
    for con in &problem.constraints {
        let phi = con.value(point)?;
        if !(phi > 0.0) {
            return None;
        }
        v -= phi.ln();
    }
    for &s in &point.s {
        if !(s > 0.0) {
            return None;
        }
        v -= s.ln();
    }
    for chol in psd_factors(point, problem.delta)? {
        v -= ln_det_from_chol(&chol);
    }
    v.is_finite().then_some(v)
}

/// Newton direction and decrement at `point`; `None` if the point left the domain.
pub(crate) fn newton_direction(problem: &Problem, point: &Point, t: f64) -> Option<(Point, f64, DVector<f64>)> {
    let layout = &problem.layout;
    let d = layout.bdim();
    let nv = layout.n_vars();
    let nb = layout.n_block_vars();

    let obj = problem.objective.eval(point, layout, true)?;
    let mut grad = -&obj.grad * t;

    let mut dblocks: Vec<RMat> = layout
        .groups
        .iter()
        .map(|&(a, b)| RMat::zeros((b - a) * d, (b - a) * d))
        .collect();
    for part in &obj.hess {
        dblocks[part.group].gemm_tr(t * part.weight, &part.c, &part.c, 1.0);
    }

    let mut lowrank: Vec<DVector<f64>> = Vec::with_capacity(problem.constraints.len());
    for con in &problem.constraints {
        let ev = con.eval(point, layout, true)?;
        if !(ev.value > 0.0) {
            return None;
        }
        let inv_phi = 1.0 / ev.value;
        grad -= &ev.grad * inv_phi;
        for part in &ev.hess {
            dblocks[part.group].gemm_tr(part.weight * inv_phi, &part.c, &part.c, 1.0);
        }
        lowrank.push(&ev.grad * inv_phi);
    }

    let chols = psd_factors(point, problem.delta)?;
    let mut buf = vec![0.0; d];
    for (j, chol) in chols.iter().enumerate() {
        let n = layout.n;
        let linv = chol
            .l()
            .solve_lower_triangular(&identity(n))
            .expect("Cholesky factor is nonsingular");
        let inv = linv.adjoint() * &linv;
        herm_to_vec(&inv, &mut buf);
        let off = layout.block_offset(j);
        for (g, v) in grad.as_mut_slice()[off..off + d].iter_mut().zip(&buf) {
            *g -= v;
        }
        let mut cm = RMat::zeros(d, d);
        accumulate_basis_images(&linv, 1.0, &mut cm.columns_mut(0, d));
        let grp = layout.block_group[j];
        let local = off - layout.group_var_range(grp).0;
        dblocks[grp]
            .view_mut((local, local), (d, d))
            .gemm_tr(1.0, &cm, &cm, 1.0);
    }

    let mut sdiag = vec![0.0; layout.n_scalars];
    for (i, &s) in point.s.iter().enumerate() {
        grad[nb + i] -= 1.0 / s;
        sdiag[i] = 1.0 / (s * s);
    }

    // Per-group factorizations of D; a tiny ridge recovers from round-off indefiniteness.
    let factors: Vec<ScaledCholesky> = dblocks
        .iter()
        .map(|blk| ScaledCholesky::new(blk.clone()))
        .collect::<Option<_>>()?;

    let solve_d = |rhs: &DVector<f64>| -> DVector<f64> {
        let mut out = rhs.clone();
        for (g, f) in factors.iter().enumerate() {
            let (a, b) = layout.group_var_range(g);
            let sol = f.solve(&rhs.rows(a, b - a).into_owned());
            out.rows_mut(a, b - a).copy_from(&sol);
        }
        for i in 0..layout.n_scalars {
            out[nb + i] = rhs[nb + i] / sdiag[i];
        }
        out
    };

    let neg_g = -&grad;
    let mut dx = solve_d(&neg_g);
    let m = lowrank.len();
    if m > 0 {
        let y: Vec<DVector<f64>> = lowrank.iter().map(&solve_d).collect();
        let mut cap = RMat::identity(m, m);
        for a in 0..m {
            for b in 0..m {
                cap[(a, b)] += lowrank[a].dot(&y[b]);
            }
        }
        let rhs = DVector::from_iterator(m, lowrank.iter().map(|u| u.dot(&dx)));
        let z = Cholesky::new(cap.clone())
            .map(|f| f.solve(&rhs))
            .or_else(|| cap.lu().solve(&rhs))?;
        for (yb, zb) in y.iter().zip(z.iter()) {
            dx.axpy(-*zb, yb, 1.0);
        }
    }
    debug_assert_eq!(dx.len(), nv);
    let mut decrement = -grad.dot(&dx);
    if !(decrement > 0.0) && m > 0 {
        // Near-active constraints make the capacitance solve cancel; factor
        // the assembled matrix instead.
        let mut h = RMat::zeros(nv, nv);
        for (g, blk) in dblocks.iter().enumerate() {
            let (a, b) = layout.group_var_range(g);
            h.view_mut((a, a), (b - a, b - a)).copy_from(blk);
        }
        for (i, v) in sdiag.iter().enumerate() {
            h[(nb + i, nb + i)] = *v;
        }
        for u in &lowrank {
            h.ger(1.0, u, u, 1.0);
        }
        dx = ScaledCholesky::new(h)?.solve(&neg_g);
        decrement = -grad.dot(&dx);
    }
    Some((Point::from_vec(&dx, layout), decrement, grad))
}

/// Cholesky factor of `S A S` with `S = diag(A)^{-1/2}`; the barrier terms
/// of nearly singular covariances otherwise swamp the factorization.
struct ScaledCholesky {
    scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ScaledCholesky {
    fn new(mut blk: RMat) -> Option<Self> {
        let scale = DVector::from_iterator(
            blk.nrows(),
            blk.diagonal().iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }),
        );
        for j in 0..blk.ncols() {
            for i in 0..blk.nrows() {
                blk[(i, j)] *= scale[i] * scale[j];
            }
        }
        factor_with_ridge(blk).map(|chol| Self { scale, chol })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(&rhs.component_mul(&self.scale));
        x.component_mul_assign(&self.scale);
        x
    }
}

fn factor_with_ridge(blk: RMat) -> Option<Cholesky<f64, Dyn>> {
    if let Some(f) = Cholesky::new(blk.clone()) {
        return Some(f);
    }
    let scale = blk.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut ridge = 1e-14 * scale;
    for _ in 0..12 {
        let mut m = blk.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(f) = Cholesky::new(m) {
            return Some(f);
        }
        ridge *= 100.0;
    }
    None
}

/// Largest step keeping every PSD block and every scalar strictly inside its cone,
/// shortened by the fraction-to-boundary factor 0.99.
fn max_step(problem: &Problem, point: &Point, dir: &Point) -> f64 {
    let mut alpha: f64 = 1.0;
    if let Some(chols) = psd_factors(point, problem.delta) {
        for (chol, dq) in chols.iter().zip(&dir.q) {
            let lam = min_eig_congruence(chol, dq);
            if lam < 0.0 {
                alpha = alpha.min(-0.99 / lam);
            }
        }
    }
    for (s, ds) in point.s.iter().zip(&dir.s) {
        if *ds < 0.0 {
            alpha = alpha.min(-0.99 * s / ds);
        }
    }
    alpha
}

/// Runs barrier stages from a strictly feasible `start`.
/// `early_stop` is consulted after every accepted step.
pub(crate) fn solve(
    problem: &Problem,
    start: Point,
    opts: &BarrierOptions,
    early_stop: Option<&dyn Fn(&Point) -> bool>,
) -> BarrierOutcome {
    let m = problem.barrier_degree().max(1.0);
    // Initial weight relative to the objective magnitude at the start.
    let f_start = problem.objective.value(&start).unwrap_or(0.0);
    let mut t = opts.t0 / f_start.abs().max(1.0);
    let mut x = start;
    let mut newton_iters = 0usize;
    let mut hit_cap = false;
    while let Some(mut fx) = merit(problem, &x, t) {
        let mut stage_iters = 0;
        let mut prev_dec = f64::INFINITY;
        let mut stalls = 0;
        loop {
            if stage_iters >= opts.max_newton_per_stage {
                hit_cap = true;
                break;
            }
            let Some((dir, dec, _)) = newton_direction(problem, &x, t) else {
                log::trace!("  newton direction unavailable");
                break;
            };
            if !dec.is_finite() || dec / 2.0 <= opts.newton_tol {
                log::trace!("  newton stop dec={dec:.3e}");
                break;
            }
            // In the quadratic-convergence region pure Newton steps are taken;
            // the merit cannot resolve the remaining decrease there anyway.
            let local = dec < 1e-3;
            if local {
                stalls = if dec > 0.5 * prev_dec { stalls + 1 } else { 0 };
                if stalls >= 3 {
                    break;
                }
            }
            prev_dec = dec;
            let mut alpha = max_step(problem, &x, &dir);
            let mut accepted = None;
            for _ in 0..60 {
                let cand = x.axpy(alpha, &dir);
                if let Some(fc) = merit(problem, &cand, t) {
                    if local || fc <= fx - 0.01 * alpha * dec {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            stage_iters += 1;
            newton_iters += 1;
            log::trace!("  newton dec={dec:.3e} alpha={alpha:.3e} accepted={}", accepted.is_some());
            let Some((cand, fc)) = accepted else {
                break;
            };
            x = cand;
            fx = fc;
            if let Some(stop) = early_stop {
                if stop(&x) {
                    return BarrierOutcome {
                        point: x,
                        t,
                        newton_iters,
                        converged: false,
                        early_stopped: true,
                    };
                }
            }
        }
        log::trace!("barrier stage t={t:.3e} newton={stage_iters} merit={fx:.6e}");
        if m / t < opts.gap_tol {
            return BarrierOutcome {
                point: x,
                t,
                newton_iters,
                converged: !hit_cap,
                early_stopped: false,
            };
        }
        t *= opts.t_factor;
    }
    BarrierOutcome {
        point: x,
        t,
        newton_iters,
        converged: false,
        early_stopped: false,
    }
}
