//! Benchmark schemes: equal power split across base stations, single-BS
//! operation, the rate-constraint-free water-filling upper bound and the
//! proposed scheme with a raised rate requirement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::ia::{self, IaOutcome, IaSetup, PowerBudget};
use crate::linalg::{c, herm_eigen_desc, CMat};
use crate::model::{rng_from_seed, ChannelSet, SystemConfig};
use crate::rates::{CovarianceSolution, RateReport, SensingFactor};

/// Rate requirement of the increased-CR scheme (bits/s).
pub const INCREASED_R_MIN_BPS: f64 = 24e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SchemeId {
    Proposed,
    EqPowSplit,
    /// Zero-based band index; displayed one-based (`bs1-only`).
    BsOnly(usize),
    UpperBound,
    IncreasedCr,
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeId::Proposed => f.write_str("proposed"),
            SchemeId::EqPowSplit => f.write_str("eq-pow-split"),
            SchemeId::BsOnly(b) => write!(f, "bs{}-only", b + 1),
            SchemeId::UpperBound => f.write_str("upper-bound"),
            SchemeId::IncreasedCr => f.write_str("increased-cr"),
        }
    }
}

impl FromStr for SchemeId {
    type Err = IsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "proposed" => Ok(SchemeId::Proposed),
            "eq-pow-split" => Ok(SchemeId::EqPowSplit),
            "upper-bound" => Ok(SchemeId::UpperBound),
            "increased-cr" => Ok(SchemeId::IncreasedCr),
            other => {
                let idx = other
                    .strip_prefix("bs")
                    .and_then(|r| r.strip_suffix("-only"))
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| invalid(format!("unknown scheme '{other}'")))?;
                Ok(SchemeId::BsOnly(idx - 1))
            }
        }
    }
}

impl From<SchemeId> for String {
    fn from(s: SchemeId) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SchemeId {
    type Error = IsacError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl SchemeId {
    /// Every scheme applicable to `bands` base stations.
    pub fn all(bands: usize) -> Vec<SchemeId> {
        let mut v = vec![SchemeId::Proposed, SchemeId::EqPowSplit];
        v.extend((0..bands).map(SchemeId::BsOnly));
        v.push(SchemeId::UpperBound);
        v.push(SchemeId::IncreasedCr);
        v
    }

    pub fn parse_list(s: &str) -> Result<Vec<SchemeId>> {
        s.split(',').filter(|x| !x.trim().is_empty()).map(str::parse).collect()
    }
}

/// Water-filling over parallel log channels:
/// maximize `sum_b (B_b/L) ln(1 + L c_b p_b)` s.t. `sum_b p_b <= P`, `p_b >= 0`.
/// Returns the powers and the optimal value (nats/s).
pub fn waterfill(gains: &[f64], bandwidths: &[f64], p_max: f64, l: usize) -> Result<(Vec<f64>, f64)> {
    if gains.len() != bandwidths.len() {
        return Err(IsacError::DimensionMismatch("one gain per bandwidth".into()));
    }
    if !(p_max >= 0.0) || l == 0 || gains.iter().any(|g| !(*g >= 0.0)) || bandwidths.iter().any(|b| !(*b > 0.0)) {
        return Err(invalid("water-filling needs nonnegative gains and power, positive bandwidths"));
    }
    let lf = l as f64;
    let n = gains.len();
    let mut powers = vec![0.0; n];
    // Bands enter the active set in order of B_b c_b (marginal value at zero power).
    let mut order: Vec<usize> = (0..n).filter(|&b| gains[b] > 0.0).collect();
    if order.is_empty() || p_max == 0.0 {
        return Ok((powers, 0.0));
    }
    order.sort_by(|&a, &b| (bandwidths[b] * gains[b]).total_cmp(&(bandwidths[a] * gains[a])));
    let mut inv_nu = 0.0;
    let mut active = 0;
    for m in (1..=order.len()).rev() {
        let set = &order[..m];
        let bsum: f64 = set.iter().map(|&b| bandwidths[b]).sum();
        let csum: f64 = set.iter().map(|&b| 1.0 / (lf * gains[b])).sum();
        // sum_b (B_b / (L nu) - 1 / (L c_b)) = P.
        let candidate = lf * (p_max + csum) / bsum;
        let weakest = set[m - 1];
        if bandwidths[weakest] * gains[weakest] * candidate > 1.0 {
            inv_nu = candidate;
            active = m;
            break;
        }
    }
    for &b in &order[..active] {
        powers[b] = (bandwidths[b] * inv_nu / lf - 1.0 / (lf * gains[b])).max(0.0);
    }
    let value = (0..n)
        .map(|b| bandwidths[b] / lf * (1.0 + lf * gains[b] * powers[b]).ln())
        .sum();
    Ok((powers, value))
}

#[derive(Debug, Clone)]
pub struct WaterfillSolution {
    pub powers: Vec<f64>,
    pub gains: Vec<f64>,
    pub sr_nats: f64,
    /// Rank-one covariances along each band's sensing direction, split evenly over users.
    pub q: CovarianceSolution,
}

/// Sensing gain and unit transmit direction of a rank-one target covariance:
/// `1 + L sum_r V_r^H Q V_r = 1 + L c u^H Q u` for `Q` along `u`.
fn sensing_direction(r: &CMat, n_t: usize) -> Result<(f64, CMat)> {
    let factor = SensingFactor::new(r);
    if !factor.rank_one {
        return Err(invalid("water-filling bound requires a rank-one target covariance"));
    }
    let a = factor
        .blocks(n_t)
        .iter()
        .fold(CMat::zeros(n_t, n_t), |acc, v| acc + v * v.adjoint());
    let (vals, vecs) = herm_eigen_desc(&a);
    Ok((vals[0].max(0.0), vecs.columns(0, 1).into_owned()))
}

/// Upper bound on the sum SR without rate constraints, by water-filling over bands.
pub fn waterfill_upper_bound(ch: &ChannelSet, p_max: f64, l: usize) -> Result<WaterfillSolution> {
    let mut gains = Vec::new();
    let mut dirs = Vec::new();
    for b in 0..ch.num_bands() {
        let (g, u) = sensing_direction(&ch.r[b], ch.n_t)?;
        gains.push(g);
        dirs.push(u);
    }
    let bw: Vec<f64> = ch.bands.iter().map(|b| b.bandwidth).collect();
    let (powers, sr_nats) = waterfill(&gains, &bw, p_max, l)?;
    let users = ch.num_users();
    let mut q = CovarianceSolution::zeros(ch.num_bands(), users, ch.n_t);
    for b in 0..ch.num_bands() {
        let each = &dirs[b] * dirs[b].adjoint() * c(powers[b] / users as f64, 0.0);
        for k in 0..users {
            q.q[b][k] = each.clone();
        }
    }
    Ok(WaterfillSolution { powers, gains, sr_nats, q })
}

/// Outcome of one scheme on one channel realization.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub scheme: SchemeId,
    pub q: CovarianceSolution,
    pub report: RateReport,
    pub outcome: Option<IaOutcome>,
}

impl SchemeRun {
    pub fn iters(&self, phase: ia::Phase) -> usize {
        self.outcome.as_ref().map_or(0, |o| o.trace.iterations(phase))
    }
}

/// Seed of the random starting point, shared by every scheme on a realization.
pub fn init_seed(channel_seed: u64) -> u64 {
    channel_seed ^ 0x5DEE_CE66_D1CE_4E5B
}

fn run_ia(scheme: SchemeId, setup: IaSetup, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    let mut rng = rng_from_seed(init_seed(seed));
    let out = ia::run(&setup, ch, &mut rng)?;
    let report = RateReport::evaluate(&out.q, ch, setup.pilot_len)?;
    Ok(SchemeRun { scheme, q: out.q.clone(), report, outcome: Some(out) })
}

/// Setup used by `scheme` (not defined for the upper bound).
pub fn scheme_setup(scheme: SchemeId, config: &SystemConfig) -> Result<IaSetup> {
    let mut setup = IaSetup::from_config(config);
    match scheme {
        SchemeId::Proposed => {}
        SchemeId::EqPowSplit => setup.budget = PowerBudget::PerBand(config.p_max_w / config.num_bands() as f64),
        SchemeId::BsOnly(b) => {
            if b >= config.num_bands() {
                return Err(invalid(format!("bs{}-only needs at least {} bands", b + 1, b + 1)));
            }
            setup.active_bands = vec![b];
        }
        SchemeId::IncreasedCr => setup.r_min = INCREASED_R_MIN_BPS * std::f64::consts::LN_2,
        SchemeId::UpperBound => return Err(invalid("the upper bound is not an optimization scheme")),
    }
    Ok(setup)
}

pub fn proposed(config: &SystemConfig, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    run_ia(SchemeId::Proposed, scheme_setup(SchemeId::Proposed, config)?, ch, seed)
}

/// Per-BS power caps `P_max / B`; covariances and the summed rate constraint stay joint.
pub fn equal_power_split(config: &SystemConfig, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    run_ia(SchemeId::EqPowSplit, scheme_setup(SchemeId::EqPowSplit, config)?, ch, seed)
}

/// Only base station `b` (zero-based) transmits, with the full budget.
pub fn single_bs(b: usize, config: &SystemConfig, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    run_ia(SchemeId::BsOnly(b), scheme_setup(SchemeId::BsOnly(b), config)?, ch, seed)
}

pub fn increased_cr(config: &SystemConfig, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    run_ia(SchemeId::IncreasedCr, scheme_setup(SchemeId::IncreasedCr, config)?, ch, seed)
}

pub fn upper_bound(config: &SystemConfig, ch: &ChannelSet) -> Result<SchemeRun> {
    let wf = waterfill_upper_bound(ch, config.p_max_w, config.pilot_len)?;
    let report = RateReport::evaluate(&wf.q, ch, config.pilot_len)?;
    Ok(SchemeRun { scheme: SchemeId::UpperBound, q: wf.q, report, outcome: None })
}

pub fn run_scheme(scheme: SchemeId, config: &SystemConfig, ch: &ChannelSet, seed: u64) -> Result<SchemeRun> {
    match scheme {
        SchemeId::Proposed => proposed(config, ch, seed),
        SchemeId::EqPowSplit => equal_power_split(config, ch, seed),
        SchemeId::BsOnly(b) => single_bs(b, config, ch, seed),
        SchemeId::UpperBound => upper_bound(config, ch),
        SchemeId::IncreasedCr => increased_cr(config, ch, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_roundtrip() {
        for s in SchemeId::all(3) {
            assert_eq!(s.to_string().parse::<SchemeId>().unwrap(), s);
        }
        assert!("bs0-only".parse::<SchemeId>().is_err());
        assert!("nope".parse::<SchemeId>().is_err());
        assert_eq!(SchemeId::parse_list("proposed,bs2-only").unwrap(), vec![SchemeId::Proposed, SchemeId::BsOnly(1)]);
    }

    #[test]
    fn waterfill_symmetric_split() {
        let (p, _) = waterfill(&[2.0, 2.0], &[1.0, 1.0], 1.0, 30).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn waterfill_dead_band() {
        let (p, _) = waterfill(&[1.0, 0.0], &[1.0, 1.0], 1.0, 30).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn waterfill_boundary_case() {
        let (p, v) = waterfill(&[1.0, 1.0], &[1.0, 2.0], 1.0, 1).unwrap();
        assert!(p[0].abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn waterfill_all_dead() {
        let (p, v) = waterfill(&[0.0, 0.0], &[1.0, 1.0], 1.0, 30).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(v, 0.0);
    }
}
