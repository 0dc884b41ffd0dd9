//! Precoder recovery from optimized covariances.
//!
//! Digital precoders come from the eigendecomposition of each `Q_k^(b)`;
//! on bands flagged as hybrid, the digital precoder is further factored into
//! a unit-modulus RF matrix and a baseband matrix by orthogonal matching
//! pursuit over a grid of transmit steering vectors.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::linalg::{c, frob_norm, herm_eigen_desc, CMat, C64};
use crate::model::steering_vector;
use crate::rates::CovarianceSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridFactors {
    /// `N_t x N_k`, every entry of modulus one.
    pub w_rf: CMat,
    /// `N_k x N_k`.
    pub w_bb: CMat,
    /// `||W - W_RF W_BB||_F`.
    pub residual: f64,
}

/// Recovered precoders, `w[band][user]` of shape `N_t x N_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub w: Vec<Vec<CMat>>,
    pub hybrid: Vec<Vec<Option<HybridFactors>>>,
}

impl PrecoderSet {
    pub fn digital(w: Vec<Vec<CMat>>) -> Self {
        let hybrid = w.iter().map(|b| vec![None; b.len()]).collect();
        Self { w, hybrid }
    }

    /// `W^(b) = [W_1, ..., W_K]`.
    pub fn stacked(&self, b: usize) -> CMat {
        let n_t = self.w[b][0].nrows();
        let cols: usize = self.w[b].iter().map(|w| w.ncols()).sum();
        let mut out = CMat::zeros(n_t, cols);
        let mut off = 0;
        for w in &self.w[b] {
            out.columns_mut(off, w.ncols()).copy_from(w);
            off += w.ncols();
        }
        out
    }

    pub fn covariances(&self) -> CovarianceSolution {
        CovarianceSolution {
            q: self.w.iter().map(|b| b.iter().map(|w| w * w.adjoint()).collect()).collect(),
        }
    }

    /// Precoders with the hybrid product `W_RF W_BB` substituted wherever available.
    pub fn effective(&self) -> Self {
        let w = self
            .w
            .iter()
            .zip(&self.hybrid)
            .map(|(wb, hb)| {
                wb.iter()
                    .zip(hb)
                    .map(|(w, h)| h.as_ref().map_or_else(|| w.clone(), |f| &f.w_rf * &f.w_bb))
                    .collect()
            })
            .collect();
        Self::digital(w)
    }

    /// Plain-text dump: a header line, then one block per matrix introduced by
    /// `<kind> band=<b> user=<k> rows=<r> cols=<c>` followed by `r` lines of
    /// `c` space-separated `re im` pairs (row-major).
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# mbisac precoder dump v1")?;
        for (b, (wb, hb)) in self.w.iter().zip(&self.hybrid).enumerate() {
            for (k, (w, h)) in wb.iter().zip(hb).enumerate() {
                write_matrix(&mut out, "W", b, k, w)?;
                if let Some(f) = h {
                    write_matrix(&mut out, "W_RF", b, k, &f.w_rf)?;
                    write_matrix(&mut out, "W_BB", b, k, &f.w_bb)?;
                }
            }
        }
        Ok(())
    }
}

fn write_matrix<W: Write>(out: &mut W, kind: &str, b: usize, k: usize, m: &CMat) -> std::io::Result<()> {
    writeln!(out, "{kind} band={b} user={k} rows={} cols={}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:.17e} {:.17e}", m[(i, j)].re, m[(i, j)].im))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Number of eigenvalues above `rel_tol` times the largest one.
pub fn numerical_rank(q: &CMat, rel_tol: f64) -> usize {
    let (vals, _) = herm_eigen_desc(q);
    let top = vals.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0;
    }
    vals.iter().filter(|&&v| v > rel_tol * top).count()
}

/// `W = U diag(sqrt(lambda))` from the leading `n_k` eigenpairs; columns past
/// the numerical rank are zero. Each column's largest-magnitude entry is made
/// real and positive.
pub fn covariance_to_precoder(q: &CMat, n_k: usize, rel_tol: f64) -> Result<CMat> {
    let rank = numerical_rank(q, rel_tol);
    if rank > n_k {
        return Err(IsacError::NeedsRandomization { rank, streams: n_k });
    }
    let (vals, vecs) = herm_eigen_desc(q);
    let mut w = CMat::zeros(q.nrows(), n_k);
    for j in 0..rank {
        let mut col = vecs.column(j) * c(vals[j].max(0.0).sqrt(), 0.0);
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .unwrap_or(C64::new(0.0, 0.0));
        if pivot.norm() > 0.0 {
            col *= pivot.conj() / pivot.norm();
        }
        w.set_column(j, &col);
    }
    Ok(w)
}

/// Transmit steering vectors on a uniform grid of angles over `(-pi/2, pi/2)`.
pub fn steering_dictionary(n_t: usize, spacing: f64, wavelength: f64, size: usize) -> Vec<CMat> {
    (0..size)
        .map(|i| {
            let angle = -PI / 2.0 + (i as f64 + 0.5) * PI / size as f64;
            steering_vector(n_t, spacing, wavelength, angle)
        })
        .collect()
}

fn least_squares(a: &CMat, target: &CMat) -> Result<CMat> {
    let gram = a.adjoint() * a;
    let rhs = a.adjoint() * target;
    gram.lu()
        .solve(&rhs)
        .ok_or_else(|| invalid("selected dictionary atoms are linearly dependent"))
}

/// Greedy sparse factorization `W ~ W_RF W_BB` with `n_rf` RF chains chosen from
/// `dictionary` (unit-norm steering vectors, rescaled to unit-modulus columns).
pub fn omp_hybrid_decompose(w: &CMat, dictionary: &[CMat], n_rf: usize) -> Result<HybridFactors> {
    if dictionary.len() < n_rf {
        return Err(invalid("dictionary smaller than the number of RF chains"));
    }
    if n_rf == 0 {
        return Err(invalid("at least one RF chain is required"));
    }
    let n_t = w.nrows();
    if dictionary.iter().any(|a| a.nrows() != n_t || a.ncols() != 1) {
        return Err(IsacError::DimensionMismatch("dictionary atoms must be N_t x 1".into()));
    }
    let unit = (n_t as f64).sqrt();
    let mut chosen: Vec<usize> = Vec::with_capacity(n_rf);
    let mut w_rf = CMat::zeros(n_t, 0);
    let mut w_bb = CMat::zeros(0, w.ncols());
    let mut residual = w.clone();
    for _ in 0..n_rf {
        let best = (0..dictionary.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let corr = dictionary[i].adjoint() * &residual;
                (i, corr.iter().map(|z| z.norm_sqr()).sum::<f64>())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("dictionary has unused atoms");
        chosen.push(best);
        let atom = dictionary[best].map(|z| z * unit);
        let cols = w_rf.ncols();
        w_rf = w_rf.insert_column(cols, C64::new(0.0, 0.0));
        let last = w_rf.ncols() - 1;
        w_rf.set_column(last, &atom.column(0));
        w_bb = least_squares(&w_rf, w)?;
        residual = w - &w_rf * &w_bb;
    }
    Ok(HybridFactors {
        residual: frob_norm(&residual),
        w_rf,
        w_bb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub rank_rel_tol: f64,
    pub dictionary_size: usize,
}

/// Recovers precoders for every `(band, user)`; `hybrid[b]` selects OMP factoring.
/// A covariance whose largest eigenvalue is below `rank_rel_tol` times the
/// largest eigenvalue of the whole solution carries no power and maps to `W = 0`.
pub fn recover_precoders(
    q: &CovarianceSolution,
    user_antennas: &[usize],
    hybrid: &[bool],
    tx_spacing: &[f64],
    wavelength: &[f64],
    opts: RecoveryOptions,
) -> Result<PrecoderSet> {
    let top_of = |m: &CMat| herm_eigen_desc(m).0.first().copied().unwrap_or(0.0);
    let global_top = q.q.iter().flatten().map(top_of).fold(0.0, f64::max);
    let mut ws = Vec::with_capacity(q.num_bands());
    let mut hs = Vec::with_capacity(q.num_bands());
    for (b, qb) in q.q.iter().enumerate() {
        let n_t = qb[0].nrows();
        let dict = hybrid[b].then(|| steering_dictionary(n_t, tx_spacing[b], wavelength[b], opts.dictionary_size));
        let mut wb = Vec::with_capacity(qb.len());
        let mut hb = Vec::with_capacity(qb.len());
        for (k, qk) in qb.iter().enumerate() {
            let w = if top_of(qk) <= opts.rank_rel_tol * global_top {
                CMat::zeros(n_t, user_antennas[k])
            } else {
                covariance_to_precoder(qk, user_antennas[k], opts.rank_rel_tol)?
            };
            let h = match &dict {
                Some(d) => Some(omp_hybrid_decompose(&w, d, user_antennas[k])?),
                None => None,
            };
            wb.push(w);
            hb.push(h);
        }
        ws.push(wb);
        hs.push(hb);
    }
    Ok(PrecoderSet { w: ws, hybrid: hs })
}
