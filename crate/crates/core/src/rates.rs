//! Communication-rate and sensing-rate evaluation (nats/s internally).
//!
//! Channels in a [`ChannelSet`] are noise-normalized, so every noise
//! covariance below is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::linalg::{
    c, frob_norm, herm_eigen_desc, identity, kron, ln_abs_det_lu, ln_det_hpd, min_eigenvalue, re_trace_prod,
    trace_re, CMat,
};
use crate::model::ChannelSet;
use crate::recovery::PrecoderSet;

/// Rank-1 fast path threshold on `lambda_2 / lambda_1` of the target covariance.
pub const RANK_ONE_RATIO: f64 = 1e-10;
const CLAMP_TOL: f64 = 1e-12;

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}

fn clamp_rate(v: f64, scale: f64) -> f64 {
    if v < 0.0 && v >= -CLAMP_TOL * scale.max(1.0) {
        0.0
    } else {
        v
    }
}

/// Transmit covariances `Q_k^(b)`, indexed `q[band][user]` (`N_t x N_t`, watts).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSolution {
    pub q: Vec<Vec<CMat>>,
}

impl CovarianceSolution {
    pub fn zeros(bands: usize, users: usize, n_t: usize) -> Self {
        Self {
            q: vec![vec![CMat::zeros(n_t, n_t); users]; bands],
        }
    }

    pub fn num_bands(&self) -> usize {
        self.q.len()
    }

    pub fn num_users(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    pub fn total_power(&self) -> f64 {
        self.q.iter().flatten().map(trace_re).sum()
    }

    pub fn band_power(&self, b: usize) -> f64 {
        self.q[b].iter().map(trace_re).sum()
    }

    /// `sum_k Q_k^(b)`.
    pub fn band_total(&self, b: usize) -> CMat {
        let n = self.q[b][0].nrows();
        self.q[b].iter().fold(CMat::zeros(n, n), |acc, q| acc + q)
    }

    pub fn scale(&mut self, factor: f64) {
        for q in self.q.iter_mut().flatten() {
            *q *= c(factor, 0.0);
        }
    }

    /// Checks the Hermitian / PSD invariants; an optional power budget is checked too.
    pub fn validate(&self, p_max: Option<f64>) -> Result<()> {
        for q in self.q.iter().flatten() {
            let scale = frob_norm(q).max(1e-300);
            if frob_norm(&(q - q.adjoint())) > 1e-10 * scale {
                return Err(invalid("covariance is not Hermitian"));
            }
            let tr = trace_re(q);
            if min_eigenvalue(q) < -1e-9 * tr.abs().max(1e-300) {
                return Err(invalid("covariance is not positive semidefinite"));
            }
        }
        if let Some(p) = p_max {
            if self.total_power() > p * (1.0 + 1e-8) {
                return Err(invalid("covariances exceed the power budget"));
            }
        }
        Ok(())
    }

    fn check_shape(&self, ch: &ChannelSet) -> Result<()> {
        if self.q.len() != ch.num_bands() || self.q.iter().any(|b| b.len() != ch.num_users()) {
            return Err(IsacError::DimensionMismatch("covariance set does not match channel set".into()));
        }
        if self.q.iter().flatten().any(|q| q.nrows() != ch.n_t || q.ncols() != ch.n_t) {
            return Err(IsacError::DimensionMismatch("covariance must be N_t x N_t".into()));
        }
        Ok(())
    }
}

/// `B_k = sum_{j != k} H_k Q_j H_k^H + I`.
pub fn interference_plus_noise(k: usize, b: usize, q: &CovarianceSolution, ch: &ChannelSet) -> CMat {
    let h = &ch.h[b][k];
    let mut acc = identity(h.nrows());
    for (j, qj) in q.q[b].iter().enumerate() {
        if j != k {
            acc += h * qj * h.adjoint();
        }
    }
    acc
}

/// Covariance-form rate `B [ln det(B_k + H_k Q_k H_k^H) - ln det B_k]`.
pub fn comm_rate_covariance(k: usize, b: usize, q: &CovarianceSolution, ch: &ChannelSet) -> Result<f64> {
    q.check_shape(ch)?;
    let h = &ch.h[b][k];
    let bk = interference_plus_noise(k, b, q, ch);
    let full = &bk + h * &q.q[b][k] * h.adjoint();
    let bw = ch.bands[b].bandwidth;
    let v = bw * (ln_det_hpd(&full).map_err(|_| invalid("covariance is not PSD"))? - ln_det_hpd(&bk)?);
    Ok(clamp_rate(v, bw))
}

/// Sum over bands of user `k`'s rate.
pub fn user_comm_rate(k: usize, q: &CovarianceSolution, ch: &ChannelSet) -> Result<f64> {
    (0..ch.num_bands()).map(|b| comm_rate_covariance(k, b, q, ch)).sum()
}

/// Precoder-form rate, evaluated directly as
/// `B ln det(I + H W_k W_k^H H^H (sum_{i != k} H W_i W_i^H H^H + I)^{-1})`.
pub fn comm_rate_precoder(k: usize, b: usize, w: &PrecoderSet, ch: &ChannelSet) -> Result<f64> {
    if w.w.len() != ch.num_bands() || w.w[b].len() != ch.num_users() {
        return Err(IsacError::DimensionMismatch("precoder set does not match channel set".into()));
    }
    let h = &ch.h[b][k];
    if w.w[b].iter().any(|wi| wi.nrows() != ch.n_t) {
        return Err(IsacError::DimensionMismatch("precoder rows must equal N_t".into()));
    }
    let n_k = h.nrows();
    let mut interference = identity(n_k);
    for (i, wi) in w.w[b].iter().enumerate() {
        if i != k {
            let hw = h * wi;
            interference += &hw * hw.adjoint();
        }
    }
    let inv = interference
        .try_inverse()
        .ok_or_else(|| invalid("interference-plus-noise matrix is singular"))?;
    let hw = h * &w.w[b][k];
    let arg = identity(n_k) + &hw * hw.adjoint() * inv;
    let bw = ch.bands[b].bandwidth;
    Ok(clamp_rate(bw * ln_abs_det_lu(&arg), bw))
}

/// Low-rank factorization of a target covariance.
#[derive(Debug, Clone)]
pub struct SensingFactor {
    /// `R = V V^H` with `V` of shape `N_t N_r x r`.
    pub v: CMat,
    pub rank_one: bool,
}

impl SensingFactor {
    pub fn new(r: &CMat) -> Self {
        let (vals, vecs) = herm_eigen_desc(r);
        let top = vals[0].max(0.0);
        let rank_one = vals.len() < 2 || vals[1].abs() < RANK_ONE_RATIO * top;
        let keep: Vec<usize> = if rank_one {
            vec![0]
        } else {
            (0..vals.len()).filter(|&i| vals[i] > RANK_ONE_RATIO * top).collect()
        };
        let mut v = CMat::zeros(r.nrows(), keep.len().max(1));
        for (dst, &i) in keep.iter().enumerate() {
            v.set_column(dst, &(vecs.column(i) * c(vals[i].max(0.0).sqrt(), 0.0)));
        }
        Self { v, rank_one }
    }

    /// Row blocks `V_r` (`N_t x rank`), one per receive antenna.
    pub fn blocks(&self, n_t: usize) -> Vec<CMat> {
        let n_r = self.v.nrows() / n_t;
        (0..n_r).map(|r| self.v.rows(r * n_t, n_t).into_owned()).collect()
    }
}

/// `(B/L) ln det(L (I_{N_r} kron Q_tot) R + I)`, via the rank-1 reduction when applicable.
pub fn sensing_rate_covariance(b: usize, q: &CovarianceSolution, ch: &ChannelSet, l: usize) -> Result<f64> {
    q.check_shape(ch)?;
    let factor = SensingFactor::new(&ch.r[b]);
    if !factor.rank_one {
        return sensing_rate_covariance_full(b, q, ch, l);
    }
    let q_tot = q.band_total(b);
    let lf = l as f64;
    let quad: f64 = factor
        .blocks(ch.n_t)
        .iter()
        .map(|vr| (vr.adjoint() * &q_tot * vr)[(0, 0)].re)
        .sum();
    let bw = ch.bands[b].bandwidth;
    let arg = 1.0 + lf * quad;
    if !(arg > 0.0) {
        return Err(invalid("covariance is not PSD"));
    }
    Ok(clamp_rate(bw / lf * arg.ln(), bw))
}

/// Full-determinant evaluation of the sensing rate (no rank assumption), through LU.
pub fn sensing_rate_covariance_full(b: usize, q: &CovarianceSolution, ch: &ChannelSet, l: usize) -> Result<f64> {
    q.check_shape(ch)?;
    let lf = l as f64;
    let lifted = kron(&identity(ch.n_r), &q.band_total(b));
    let arg = lifted * &ch.r[b] * c(lf, 0.0) + identity(ch.n_t * ch.n_r);
    let bw = ch.bands[b].bandwidth;
    Ok(clamp_rate(bw / lf * ln_abs_det_lu(&arg), bw))
}

/// Sensing rate from precoders and pilot symbols,
/// `(B/L) ln det(I + S~ W~ R W~^H S~^H)` with `W~ = I kron W^H`, `S~ = I kron S^H`.
/// With `pilots = None` the asymptotic `S S^H = L I` is used.
pub fn sensing_rate_lifted(b: usize, w: &PrecoderSet, pilots: Option<&CMat>, ch: &ChannelSet, l: usize) -> Result<f64> {
    if w.w.len() != ch.num_bands() || w.w[b].len() != ch.num_users() {
        return Err(IsacError::DimensionMismatch("precoder set does not match channel set".into()));
    }
    let stacked = w.stacked(b);
    if stacked.nrows() != ch.n_t {
        return Err(IsacError::DimensionMismatch("precoder rows must equal N_t".into()));
    }
    let n_tot = stacked.ncols();
    let lf = l as f64;
    let w_lift = kron(&identity(ch.n_r), &stacked.adjoint());
    let inner = &w_lift * &ch.r[b] * w_lift.adjoint();
    let arg = match pilots {
        None => inner * c(lf, 0.0) + identity(n_tot * ch.n_r),
        Some(s) => {
            if s.nrows() != n_tot {
                return Err(IsacError::DimensionMismatch("pilot rows must equal N_tot".into()));
            }
            let s_lift = kron(&identity(ch.n_r), &s.adjoint());
            &s_lift * inner * s_lift.adjoint() + identity(s_lift.nrows())
        }
    };
    let bw = ch.bands[b].bandwidth;
    let lnd = ln_det_hpd(&arg)?;
    Ok(clamp_rate(bw / lf * lnd, bw))
}

pub fn sum_sensing_rate(q: &CovarianceSolution, ch: &ChannelSet, l: usize) -> Result<f64> {
    (0..ch.num_bands()).map(|b| sensing_rate_covariance(b, q, ch, l)).sum()
}

/// Expansion state for the concave lower bound on the communication rate.
#[derive(Debug, Clone)]
pub struct LinearizationPoint {
    pub q: CovarianceSolution,
    /// `b_mat[b][k] = B_k^(b),n`.
    pub b_mat: Vec<Vec<CMat>>,
    /// `g[b][k] = H_k^H (B_k^n)^{-1} H_k`.
    pub g: Vec<Vec<CMat>>,
    pub ln_det_b: Vec<Vec<f64>>,
}

impl LinearizationPoint {
    pub fn new(q: &CovarianceSolution, ch: &ChannelSet) -> Result<Self> {
        q.check_shape(ch)?;
        let mut b_mat = Vec::new();
        let mut g = Vec::new();
        let mut ln_det_b = Vec::new();
        for b in 0..ch.num_bands() {
            let mut bb = Vec::new();
            let mut gb = Vec::new();
            let mut lb = Vec::new();
            for k in 0..ch.num_users() {
                let bk = interference_plus_noise(k, b, q, ch);
                let h = &ch.h[b][k];
                let inv = crate::linalg::cholesky_h(&bk)
                    .ok_or(IsacError::NotPositiveDefinite)?
                    .inverse();
                let gk = crate::linalg::hermitize(&(h.adjoint() * inv * h));
                lb.push(ln_det_hpd(&bk)?);
                bb.push(bk);
                gb.push(gk);
            }
            b_mat.push(bb);
            g.push(gb);
            ln_det_b.push(lb);
        }
        Ok(Self { q: q.clone(), b_mat, g, ln_det_b })
    }
}

/// Concave lower bound
/// `B [ln det(B_k + H Q_k H^H) - ln det B_k^n - sum_{i != k} Re tr(G_k^n (Q_i - Q_i^n))]`.
pub fn cr_lower_bound(
    k: usize,
    b: usize,
    q: &CovarianceSolution,
    lin: &LinearizationPoint,
    ch: &ChannelSet,
) -> Result<f64> {
    q.check_shape(ch)?;
    let h = &ch.h[b][k];
    let mut arg = identity(h.nrows());
    for qj in &q.q[b] {
        arg += h * qj * h.adjoint();
    }
    let mut v = ln_det_hpd(&arg)? - lin.ln_det_b[b][k];
    for (i, qi) in q.q[b].iter().enumerate() {
        if i != k {
            v -= re_trace_prod(&lin.g[b][k], &(qi - &lin.q.q[b][i]));
        }
    }
    Ok(ch.bands[b].bandwidth * v)
}

pub fn user_cr_lower_bound(k: usize, q: &CovarianceSolution, lin: &LinearizationPoint, ch: &ChannelSet) -> Result<f64> {
    (0..ch.num_bands()).map(|b| cr_lower_bound(k, b, q, lin, ch)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub band_sr_nats: Vec<f64>,
    pub user_cr_nats: Vec<f64>,
    pub sum_sr_nats: f64,
    pub band_sr_bits: Vec<f64>,
    pub user_cr_bits: Vec<f64>,
    pub sum_sr_bits: f64,
}

impl RateReport {
    pub fn evaluate(q: &CovarianceSolution, ch: &ChannelSet, l: usize) -> Result<Self> {
        let band_sr_nats: Vec<f64> = (0..ch.num_bands())
            .map(|b| sensing_rate_covariance(b, q, ch, l))
            .collect::<Result<_>>()?;
        let user_cr_nats: Vec<f64> = (0..ch.num_users())
            .map(|k| user_comm_rate(k, q, ch))
            .collect::<Result<_>>()?;
        let sum_sr_nats = band_sr_nats.iter().sum();
        Ok(Self {
            band_sr_bits: band_sr_nats.iter().map(|&x| nats_to_bits(x)).collect(),
            user_cr_bits: user_cr_nats.iter().map(|&x| nats_to_bits(x)).collect(),
            sum_sr_bits: nats_to_bits(sum_sr_nats),
            band_sr_nats,
            user_cr_nats,
            sum_sr_nats,
        })
    }

    pub fn min_user_cr_bits(&self) -> f64 {
        self.user_cr_bits.iter().copied().fold(f64::INFINITY, f64::min)
    }
}
