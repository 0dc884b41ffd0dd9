//! Small dense complex linear-algebra helpers shared by the rate evaluators,
//! the convex solver and the recovery routines.
//!
//! Hermitian `n x n` matrices are mapped to `R^{n^2}` through an orthonormal
//! basis under the inner product `<A, B> = Re tr(A B)`:
//!
//! - `e_a e_a^T` for each diagonal position `a`,
//! - `(e_a e_b^T + e_b e_a^T) / sqrt(2)` and `i (e_a e_b^T - e_b e_a^T) / sqrt(2)`
//!   for each `a < b`.
//!
//! With this basis, `Re tr(G Q) = herm_to_vec(G) . herm_to_vec(Q)` and every
//! vector maps back to an exactly Hermitian matrix.

use nalgebra::{Cholesky, DMatrix, DMatrixViewMut, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{IsacError, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type RMat = DMatrix<f64>;

const SQRT2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `(X + X^H) / 2`.
pub fn hermitize(x: &CMat) -> CMat {
    (x + x.adjoint()) * c(0.5, 0.0)
}

pub fn trace_re(x: &CMat) -> f64 {
    x.diagonal().iter().map(|z| z.re).sum()
}

/// `Re tr(A B)` without forming the product.
pub fn re_trace_prod(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..a.ncols() {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}

pub fn frob_norm(x: &CMat) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Cholesky factorization of the Hermitian part of `x`; `None` unless it is
/// positive definite. (The complex factorization in nalgebra takes complex
/// square roots of negative pivots instead of failing, so pivots are checked here.)
pub fn cholesky_h(x: &CMat) -> Option<Cholesky<C64, Dyn>> {
    let a = hermitize(x);
    let n = a.nrows();
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = c(djj, 0.0);
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(Cholesky::pack_dirty(l))
}

/// `ln det X` for Hermitian positive definite `X`, via Cholesky of `(X + X^H)/2`.
pub fn ln_det_hpd(x: &CMat) -> Result<f64> {
    let chol = cholesky_h(x).ok_or(IsacError::NotPositiveDefinite)?;
    Ok(ln_det_from_chol(&chol))
}

pub fn ln_det_from_chol(chol: &Cholesky<C64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum()
}

/// `ln |det X|` for a general square matrix, through LU. Used by evaluation
/// routes that intentionally avoid the Hermitian factorization.
pub fn ln_abs_det_lu(x: &CMat) -> f64 {
    let det = x.clone().lu().determinant();
    det.norm().ln()
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == C64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted descending.
pub fn herm_eigen_desc(q: &CMat) -> (Vec<f64>, CMat) {
    let eig = hermitize(q).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(q.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(q: &CMat) -> f64 {
    hermitize(q)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn herm_dim(n: usize) -> usize {
    n * n
}

/// Coordinates of a Hermitian matrix in the orthonormal basis described in the module docs.
pub fn herm_to_vec(q: &CMat, out: &mut [f64]) {
    let n = q.nrows();
    debug_assert_eq!(out.len(), n * n);
    for a in 0..n {
        out[a] = q[(a, a)].re;
    }
    let mut idx = n;
    for a in 0..n {
        for b in (a + 1)..n {
            let z = (q[(a, b)] + q[(b, a)].conj()) * 0.5;
            out[idx] = SQRT2 * z.re;
            out[idx + 1] = SQRT2 * z.im;
            idx += 2;
        }
    }
}

pub fn herm_vec(q: &CMat) -> Vec<f64> {
    let mut v = vec![0.0; q.nrows() * q.nrows()];
    herm_to_vec(q, &mut v);
    v
}

pub fn vec_to_herm(x: &[f64], n: usize) -> CMat {
    debug_assert_eq!(x.len(), n * n);
    let mut q = CMat::zeros(n, n);
    for a in 0..n {
        q[(a, a)] = c(x[a], 0.0);
    }
    let mut idx = n;
    for a in 0..n {
        for b in (a + 1)..n {
            let z = c(x[idx] * INV_SQRT2, x[idx + 1] * INV_SQRT2);
            q[(a, b)] = z;
            q[(b, a)] = z.conj();
            idx += 2;
        }
    }
    q
}

/// Accumulates `scale * herm_vec(Y)` into `out`, where `Y = coef u v^H + conj(coef) v u^H`.
#[inline]
fn add_sym_outer(u: &[C64], v: &[C64], coef: C64, scale: f64, out: &mut [f64]) {
    let m = u.len();
    for i in 0..m {
        let y = coef * u[i] * v[i].conj();
        out[i] += scale * 2.0 * y.re;
    }
    let mut idx = m;
    for i in 0..m {
        for j in (i + 1)..m {
            let y = coef * u[i] * v[j].conj() + coef.conj() * v[i] * u[j].conj();
            out[idx] += scale * SQRT2 * y.re;
            out[idx + 1] += scale * SQRT2 * y.im;
            idx += 2;
        }
    }
}

/// Accumulates the images of every Hermitian basis element under the
/// congruence `E -> A E A^H` into the columns of `cols` (shape `m^2 x n^2`,
/// `A` is `m x n`), each scaled by `scale`.
///
/// The Hessian of `ln det(I + sum_p M_p Q M_p^H)` in basis coordinates is
/// `-C^T C` with `C` built from `A_p = L^{-1} M_p`, `L L^H` the Cholesky
/// factor of the log-det argument.
pub fn accumulate_basis_images(a: &CMat, scale: f64, cols: &mut DMatrixViewMut<'_, f64>) {
    let (m, n) = a.shape();
    debug_assert_eq!(cols.nrows(), m * m);
    debug_assert_eq!(cols.ncols(), n * n);
    let colvecs: Vec<Vec<C64>> = (0..n).map(|j| a.column(j).iter().copied().collect()).collect();
    let mut buf = vec![0.0; m * m];
    let emit = |e: usize, buf: &mut Vec<f64>, cols: &mut DMatrixViewMut<'_, f64>| {
        let mut col = cols.column_mut(e);
        for (dst, src) in col.iter_mut().zip(buf.iter()) {
            *dst += *src;
        }
        buf.iter_mut().for_each(|x| *x = 0.0);
    };
    for aidx in 0..n {
        add_sym_outer(&colvecs[aidx], &colvecs[aidx], c(0.5, 0.0), scale, &mut buf);
        emit(aidx, &mut buf, cols);
    }
    let mut e = n;
    for aidx in 0..n {
        for bidx in (aidx + 1)..n {
            add_sym_outer(&colvecs[aidx], &colvecs[bidx], c(INV_SQRT2, 0.0), scale, &mut buf);
            emit(e, &mut buf, cols);
            add_sym_outer(&colvecs[aidx], &colvecs[bidx], c(0.0, INV_SQRT2), scale, &mut buf);
            emit(e + 1, &mut buf, cols);
            e += 2;
        }
    }
}

/// Smallest eigenvalue of `L^{-1} D L^{-H}`: the step `Q + t D` stays
/// positive definite for all `t < -1/lambda_min` when `lambda_min < 0`.
pub fn min_eig_congruence(chol: &Cholesky<C64, Dyn>, d: &CMat) -> f64 {
    let l = chol.l();
    let x = l.solve_lower_triangular(d).expect("triangular factor is nonsingular");
    let y = l
        .solve_lower_triangular(&x.adjoint())
        .expect("triangular factor is nonsingular");
    min_eigenvalue(&y)
}

pub fn column_vec(v: &[C64]) -> CMat {
    CMat::from_column_slice(v.len(), 1, v)
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
