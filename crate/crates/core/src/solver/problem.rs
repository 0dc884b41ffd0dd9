//! Normalized internal form of a subproblem: every function is a concave
//! combination of log-det terms, linear terms on Hermitian blocks and linear
//! terms on nonnegative scalars.
//!
//! Powers are divided by `power_scale` (the largest trace budget) and rates
//! by `rate_scale` (`sum_b B^(b) / L` over active bands), so objective values
//! are of order one.

use nalgebra::{Cholesky, DVector, Dyn};

use crate::linalg::{
    accumulate_basis_images, c, cholesky_h, herm_to_vec, identity, ln_det_from_chol, re_trace_prod, CMat, RMat, C64,
};

/// `weight * ln det(I + sum_p M_p Q_{block_p} M_p^H)`; all blocks belong to `group`.
#[derive(Debug, Clone)]
pub(crate) struct LogDet {
    pub group: usize,
    pub weight: f64,
    pub dim: usize,
    pub pieces: Vec<(usize, CMat)>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ConcaveFn {
    pub constant: f64,
    pub logdets: Vec<LogDet>,
    /// `Re tr(C Q_block)` terms.
    pub linear: Vec<(usize, CMat)>,
    /// `coef * s_index` terms.
    pub scalars: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n: usize,
    /// `(user, band)` per block, ordered by group.
    pub blocks: Vec<(usize, usize)>,
    pub block_group: Vec<usize>,
    /// Half-open block ranges per group.
    pub groups: Vec<(usize, usize)>,
    pub n_scalars: usize,
}

impl Layout {
    pub fn bdim(&self) -> usize {
        self.n * self.n
    }

    pub fn n_block_vars(&self) -> usize {
        self.blocks.len() * self.bdim()
    }

    pub fn n_vars(&self) -> usize {
        self.n_block_vars() + self.n_scalars
    }

    pub fn block_offset(&self, j: usize) -> usize {
        j * self.bdim()
    }

    pub fn scalar_offset(&self, i: usize) -> usize {
        self.n_block_vars() + i
    }

    pub fn group_var_range(&self, g: usize) -> (usize, usize) {
        let (a, b) = self.groups[g];
        (a * self.bdim(), b * self.bdim())
    }

    pub fn block_index(&self, user: usize, band: usize) -> Option<usize> {
        self.blocks.iter().position(|&(k, b)| k == user && b == band)
    }
}

/// Iterate in normalized units.
#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<CMat>,
    pub s: Vec<f64>,
}

impl Point {
    pub fn from_vec(x: &DVector<f64>, layout: &Layout) -> Self {
        let d = layout.bdim();
        let q = (0..layout.blocks.len())
            .map(|j| {
                let off = layout.block_offset(j);
                crate::linalg::vec_to_herm(&x.as_slice()[off..off + d], layout.n)
            })
            .collect();
        let s = (0..layout.n_scalars).map(|i| x[layout.scalar_offset(i)]).collect();
        Self { q, s }
    }

    pub fn axpy(&self, alpha: f64, dir: &Point) -> Point {
        Point {
            q: self.q.iter().zip(&dir.q).map(|(a, b)| a + b * c(alpha, 0.0)).collect(),
            s: self.s.iter().zip(&dir.s).map(|(a, b)| a + alpha * b).collect(),
        }
    }
}

/// Hessian contribution `-weight * C^T C` on the variables of `group`.
pub(crate) struct HessPart {
    pub group: usize,
    pub weight: f64,
    pub c: RMat,
}

pub(crate) struct FnEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: Vec<HessPart>,
}

fn logdet_arg(term: &LogDet, point: &Point) -> CMat {
    let mut x = identity(term.dim);
    for (j, m) in &term.pieces {
        x += m * &point.q[*j] * m.adjoint();
    }
    x
}

impl ConcaveFn {
    /// Value, or `None` outside the domain (a log-det argument not positive definite).
    pub fn value(&self, point: &Point) -> Option<f64> {
        let mut v = self.constant;
        for term in &self.logdets {
            let chol = cholesky_h(&logdet_arg(term, point))?;
            v += term.weight * ln_det_from_chol(&chol);
        }
        for (j, coef) in &self.linear {
            v += re_trace_prod(coef, &point.q[*j]);
        }
        for (i, coef) in &self.scalars {
            v += coef * point.s[*i];
        }
        Some(v)
    }

    /// Linear part of the gradient, accumulated into `grad`.
    fn add_linear_grad(&self, layout: &Layout, grad: &mut DVector<f64>) {
        let d = layout.bdim();
        let mut buf = vec![0.0; d];
        for (j, coef) in &self.linear {
            herm_to_vec(coef, &mut buf);
            let off = layout.block_offset(*j);
            for (g, b) in grad.as_mut_slice()[off..off + d].iter_mut().zip(&buf) {
                *g += b;
            }
        }
        for (i, coef) in &self.scalars {
            grad[layout.scalar_offset(*i)] += coef;
        }
    }

    pub fn eval(&self, point: &Point, layout: &Layout, with_hessian: bool) -> Option<FnEval> {
        let d = layout.bdim();
        let mut value = self.constant;
        let mut grad = DVector::zeros(layout.n_vars());
        let mut hess = Vec::new();
        let mut buf = vec![0.0; d];
        for term in &self.logdets {
            let chol = cholesky_h(&logdet_arg(term, point))?;
            value += term.weight * ln_det_from_chol(&chol);
            let inv = chol.inverse();
            for (j, m) in &term.pieces {
                let g = m.adjoint() * &inv * m;
                herm_to_vec(&g, &mut buf);
                let off = layout.block_offset(*j);
                for (dst, src) in grad.as_mut_slice()[off..off + d].iter_mut().zip(&buf) {
                    *dst += term.weight * src;
                }
            }
            if with_hessian {
                let (g0, g1) = layout.groups[term.group];
                let mut cm = RMat::zeros(term.dim * term.dim, (g1 - g0) * d);
                let l = chol.l();
                for (j, m) in &term.pieces {
                    let a = l.solve_lower_triangular(m).expect("Cholesky factor is nonsingular");
                    let local = (j - g0) * d;
                    accumulate_basis_images(&a, 1.0, &mut cm.columns_mut(local, d));
                }
                hess.push(HessPart { group: term.group, weight: term.weight, c: cm });
            }
        }
        for (j, coef) in &self.linear {
            value += re_trace_prod(coef, &point.q[*j]);
        }
        for (i, coef) in &self.scalars {
            value += coef * point.s[*i];
        }
        self.add_linear_grad(layout, &mut grad);
        Some(FnEval { value, grad, hess })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub layout: Layout,
    pub objective: ConcaveFn,
    /// `phi_c(x) >= 0`.
    pub constraints: Vec<ConcaveFn>,
    /// Barrier is `ln det(Q + delta I)`.
    pub delta: f64,
}

/// Cholesky factors of `Q_j + delta I`, or `None` if some block left the cone.
pub(crate) fn psd_factors(point: &Point, delta: f64) -> Option<Vec<Cholesky<C64, Dyn>>> {
    point
        .q
        .iter()
        .map(|q| {
            let n = q.nrows();
            cholesky_h(&(q + identity(n) * c(delta, 0.0)))
        })
        .collect()
}

impl Problem {
    /// Barrier degree: `n` per PSD block plus one per scalar inequality.
    pub fn barrier_degree(&self) -> f64 {
        (self.layout.blocks.len() * self.layout.n + self.constraints.len() + self.layout.n_scalars) as f64
    }
}
