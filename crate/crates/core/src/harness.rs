//! Monte Carlo campaigns, convergence traces and power sweeps.
//!
//! Every rate written out here is in bits/s. Trial `i` of a campaign with
//! base seed `s` always uses channel seed [`trial_seed`]`(s, i)`, whatever the
//! number of worker threads, so outputs are reproducible byte for byte apart
//! from the timing columns.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, SchemeId, SchemeRun};
use crate::error::{invalid, IsacError, Result};
use crate::ia::{self, Phase};
use crate::model::{generate_channel_set, SystemConfig};
use crate::rates::RateReport;
use crate::recovery::numerical_rank;

/// Relative slack allowed in the dominance checks.
pub const DOMINANCE_SLACK: f64 = 1e-7;

/// Share of the power budget above which a band counts as used in the rank check.
pub const USED_BAND_FRACTION: f64 = 1e-3;

pub const TRIALS_CSV_HEADER: &str = "trial,seed,scheme,sum_sr_bits,min_user_cr_bits,iters_feas,iters_main,wall_s,rank_ok";
pub const SWEEP_CSV_HEADER: &str = "p_max_w,scheme,mean_sr_bits,stderr_sr_bits,trials";

/// One scheme on one realization; `failure` is set instead of `report` when it did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRecord {
    pub scheme: SchemeId,
    pub report: Option<RateReport>,
    pub failure: Option<String>,
    pub iters_feas: usize,
    pub iters_main: usize,
    pub converged: bool,
    /// Main-phase objective never decreased.
    pub monotone: bool,
    pub wall_s: f64,
    /// Numerical rank per `[band][user]` (zero on unused bands).
    pub ranks: Vec<Vec<usize>>,
    /// Every user reaches rank `N_k` on every band it receives power on.
    pub rank_ok: bool,
    pub band_power_w: Vec<f64>,
}

impl SchemeRecord {
    pub fn sum_sr_bits(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.sum_sr_bits)
    }

    fn failed(scheme: SchemeId, err: &IsacError, wall_s: f64) -> Self {
        Self {
            scheme,
            report: None,
            failure: Some(err.to_string()),
            iters_feas: 0,
            iters_main: 0,
            converged: false,
            monotone: false,
            wall_s,
            ranks: Vec::new(),
            rank_ok: false,
            band_power_w: Vec::new(),
        }
    }

    fn from_run(run: &SchemeRun, config: &SystemConfig, wall_s: f64) -> Self {
        let tol = config.recovery.rank_rel_tol;
        let band_power_w = ia::band_powers(&run.q);
        let ranks: Vec<Vec<usize>> = run
            .q
            .q
            .iter()
            .map(|band| band.iter().map(|qk| numerical_rank(qk, tol)).collect())
            .collect();
        // Bands below this share of the budget carry only interior-point residue.
        let used = |b: usize| band_power_w[b] > USED_BAND_FRACTION * config.p_max_w;
        let rank_ok = ranks.iter().enumerate().filter(|(b, _)| used(*b)).all(|(_, band)| {
            band.iter().zip(&config.user_antennas).all(|(&r, &n_k)| r == n_k)
        });
        Self {
            scheme: run.scheme,
            report: Some(run.report.clone()),
            failure: None,
            iters_feas: run.iters(Phase::Feasibility),
            iters_main: run.iters(Phase::Main),
            converged: run.outcome.as_ref().is_none_or(|o| o.converged),
            monotone: run.outcome.as_ref().is_none_or(|o| o.trace.is_monotone(ia::MONOTONE_SLACK)),
            wall_s,
            ranks,
            rank_ok,
            band_power_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub records: Vec<SchemeRecord>,
    /// Upper bound >= proposed >= eq-pow-split and proposed >= every single-BS scheme,
    /// among the schemes that were run and completed.
    pub dominance_ok: bool,
}

impl TrialResult {
    pub fn record(&self, scheme: SchemeId) -> Option<&SchemeRecord> {
        self.records.iter().find(|r| r.scheme == scheme)
    }

    pub fn sr_bits(&self, scheme: SchemeId) -> Option<f64> {
        self.record(scheme).and_then(SchemeRecord::sum_sr_bits)
    }

    pub fn all_completed(&self) -> bool {
        self.records.iter().all(|r| r.failure.is_none())
    }

    /// Copy with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.records {
            r.wall_s = 0.0;
        }
        t
    }
}

fn at_least(a: f64, b: f64) -> bool {
    a >= b - DOMINANCE_SLACK * a.abs().max(b.abs())
}

/// Checks the dominance chain on whatever schemes completed.
pub fn dominance_holds(trial: &TrialResult) -> bool {
    let Some(p) = trial.sr_bits(SchemeId::Proposed) else {
        return true;
    };
    let ub_ok = trial.sr_bits(SchemeId::UpperBound).is_none_or(|u| at_least(u, p));
    let others_ok = trial.records.iter().all(|r| match (r.scheme, r.sum_sr_bits()) {
        (SchemeId::EqPowSplit | SchemeId::BsOnly(_), Some(v)) => at_least(p, v),
        _ => true,
    });
    ub_ok && others_ok
}

/// Channel seed of trial `index` in a campaign with `base` seed (SplitMix64 finalizer).
pub fn trial_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One channel realization with every requested scheme evaluated on it.
/// Scheme failures are recorded; only an invalid configuration is an error.
pub fn run_trial(config: &SystemConfig, trial: usize, seed: u64, schemes: &[SchemeId]) -> Result<TrialResult> {
    config.validate()?;
    let ch = generate_channel_set(config, seed)?;
    let records = schemes
        .iter()
        .map(|&s| {
            let t = Instant::now();
            match baselines::run_scheme(s, config, &ch, seed) {
                Ok(run) => SchemeRecord::from_run(&run, config, t.elapsed().as_secs_f64()),
                Err(e) => {
                    log::warn!("trial {trial} seed {seed}: {s} failed: {e}");
                    SchemeRecord::failed(s, &e, t.elapsed().as_secs_f64())
                }
            }
        })
        .collect();
    let mut result = TrialResult { trial, seed, records, dominance_ok: true };
    result.dominance_ok = dominance_holds(&result);
    if !result.dominance_ok {
        log::info!("trial {trial} seed {seed}: dominance chain violated");
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStats {
    pub scheme: SchemeId,
    pub completed: usize,
    pub failed: usize,
    pub mean_sr_bits: f64,
    /// Standard error of the mean; absent with fewer than two completed trials.
    pub stderr_sr_bits: Option<f64>,
    pub mean_user_cr_bits: Vec<f64>,
}

/// Mean and standard error of the mean; the latter needs two samples.
pub fn mean_stderr(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub base_seed: u64,
    pub schemes: Vec<SchemeId>,
    /// Ordered by trial index.
    pub trials: Vec<TrialResult>,
}

impl MonteCarloResult {
    pub fn stats(&self) -> Vec<SchemeStats> {
        self.schemes
            .iter()
            .map(|&s| {
                let done: Vec<&RateReport> = self
                    .trials
                    .iter()
                    .filter_map(|t| t.record(s).and_then(|r| r.report.as_ref()))
                    .collect();
                let srs: Vec<f64> = done.iter().map(|r| r.sum_sr_bits).collect();
                let (mean, stderr) = mean_stderr(&srs);
                let users = done.first().map_or(0, |r| r.user_cr_bits.len());
                let mean_user_cr_bits = (0..users)
                    .map(|k| done.iter().map(|r| r.user_cr_bits[k]).sum::<f64>() / done.len() as f64)
                    .collect();
                SchemeStats {
                    scheme: s,
                    completed: done.len(),
                    failed: self.trials.len() - done.len(),
                    mean_sr_bits: mean,
                    stderr_sr_bits: stderr,
                    mean_user_cr_bits,
                }
            })
            .collect()
    }

    /// Ratio of mean SRs of `a` and `b` over the trials where both completed.
    pub fn paired_mean_ratio(&self, a: SchemeId, b: SchemeId) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self
            .trials
            .iter()
            .filter_map(|t| Some((t.sr_bits(a)?, t.sr_bits(b)?)))
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let sa: f64 = pairs.iter().map(|p| p.0).sum();
        let sb: f64 = pairs.iter().map(|p| p.1).sum();
        Some(sa / sb)
    }

    pub fn all_completed(&self) -> bool {
        self.trials.iter().all(TrialResult::all_completed)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRIALS_CSV_HEADER}")?;
        for t in &self.trials {
            for r in &t.records {
                let (sr, cr) = match &r.report {
                    Some(rep) => (rep.sum_sr_bits.to_string(), rep.min_user_cr_bits().to_string()),
                    None => ("NaN".into(), "NaN".into()),
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.6},{}",
                    t.trial, t.seed, r.scheme, sr, cr, r.iters_feas, r.iters_main, r.wall_s, r.rank_ok
                )?;
            }
        }
        Ok(())
    }

    /// One JSON object per line, one line per trial.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.trials {
            serde_json::to_writer(&mut out, t)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs `n_trials` independent realizations concurrently (at most `threads`
/// workers; `None` uses the global pool).
pub fn run_montecarlo(
    config: &SystemConfig,
    n_trials: usize,
    base_seed: u64,
    schemes: &[SchemeId],
    threads: Option<usize>,
) -> Result<MonteCarloResult> {
    if n_trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    config.validate()?;
    let trials = with_threads(threads, || {
        (0..n_trials)
            .into_par_iter()
            .map(|i| run_trial(config, i, trial_seed(base_seed, i), schemes))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(MonteCarloResult { base_seed, schemes: schemes.to_vec(), trials })
}

/// Per-iteration traces of the given schemes on one realization.
pub fn convergence_trace(config: &SystemConfig, seed: u64, schemes: &[SchemeId]) -> Result<Vec<(SchemeId, ia::IterationTrace)>> {
    config.validate()?;
    let ch = generate_channel_set(config, seed)?;
    schemes
        .iter()
        .filter(|s| **s != SchemeId::UpperBound)
        .map(|&s| {
            let run = baselines::run_scheme(s, config, &ch, seed)?;
            Ok((s, run.outcome.map(|o| o.trace).unwrap_or_default()))
        })
        .collect()
}

pub fn write_convergence_csv<W: Write>(traces: &[(SchemeId, ia::IterationTrace)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "scheme,{}", ia::IterationTrace::CSV_HEADER)?;
    for (s, t) in traces {
        t.write_csv_rows(&mut out, &format!("{s},"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_max_w: f64,
    pub scheme: SchemeId,
    pub mean_sr_bits: f64,
    pub stderr_sr_bits: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub powers: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub all_completed: bool,
}

impl SweepResult {
    pub fn series(&self, scheme: SchemeId) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.scheme == scheme).collect()
    }

    /// Mean SR never drops by more than `n_stderr` combined standard errors between grid points.
    pub fn is_monotone(&self, scheme: SchemeId, n_stderr: f64) -> bool {
        self.series(scheme).windows(2).all(|w| {
            let se = w[0].stderr_sr_bits.unwrap_or(0.0).hypot(w[1].stderr_sr_bits.unwrap_or(0.0));
            w[1].mean_sr_bits >= w[0].mean_sr_bits - n_stderr * se
        })
    }

    /// Sign of `mean(a) - mean(b)` at each grid point.
    pub fn difference_signs(&self, a: SchemeId, b: SchemeId) -> Vec<f64> {
        self.series(a)
            .iter()
            .zip(self.series(b))
            .map(|(x, y)| (x.mean_sr_bits - y.mean_sr_bits).signum())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SWEEP_CSV_HEADER}")?;
        for r in &self.rows {
            let se = r.stderr_sr_bits.map_or_else(|| "NaN".to_string(), |v| v.to_string());
            writeln!(out, "{},{},{},{},{}", r.p_max_w, r.scheme, r.mean_sr_bits, se, r.trials)?;
        }
        Ok(())
    }
}

/// Monte Carlo at each power level with the same channel seeds at every point.
pub fn sweep_power(
    config: &SystemConfig,
    powers: &[f64],
    n_trials: usize,
    base_seed: u64,
    schemes: &[SchemeId],
    threads: Option<usize>,
) -> Result<SweepResult> {
    if powers.is_empty() || powers.iter().any(|p| !(*p > 0.0)) || powers.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("power grid must be nonempty, positive and strictly increasing"));
    }
    let mut rows = Vec::new();
    let mut all_completed = true;
    for &p in powers {
        let mut cfg = config.clone();
        cfg.p_max_w = p;
        let mc = run_montecarlo(&cfg, n_trials, base_seed, schemes, threads)?;
        all_completed &= mc.all_completed();
        for st in mc.stats() {
            rows.push(SweepRow {
                p_max_w: p,
                scheme: st.scheme,
                mean_sr_bits: st.mean_sr_bits,
                stderr_sr_bits: st.stderr_sr_bits,
                trials: st.completed,
            });
        }
    }
    Ok(SweepResult { powers: powers.to_vec(), rows, all_completed })
}
