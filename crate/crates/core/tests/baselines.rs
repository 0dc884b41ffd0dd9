mod common;

use common::*;
use mbisac::baselines::*;
use mbisac::ia::Phase;
use mbisac::model::{generate_channel_set, SystemConfig};
use mbisac::rates::nats_to_bits;

/// Best two-band split on a fine grid of `p_1`, refined around the best cell.
fn two_band_grid(g: [f64; 2], bw: [f64; 2], p: f64, l: f64) -> f64 {
    let f = |p1: f64| bw[0] / l * (1.0 + l * g[0] * p1).ln() + bw[1] / l * (1.0 + l * g[1] * (p - p1)).ln();
    let (mut lo, mut hi) = (0.0, p);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..8 {
        let step = (hi - lo) / 1000.0;
        let mut arg = lo;
        for i in 0..=1000 {
            let x = (lo + step * i as f64).clamp(0.0, p);
            if f(x) > best {
                best = f(x);
                arg = x;
            }
        }
        lo = arg - step;
        hi = arg + step;
    }
    best
}

#[test]
fn waterfilling_matches_grid() {
    let mut r = rng(12);
    use rand::Rng;
    for _ in 0..50 {
        let g = [r.random_range(0.01..10.0), r.random_range(0.01..10.0)];
        let bw = [r.random_range(0.5..3.0), r.random_range(0.5..3.0)];
        let p = r.random_range(0.1..5.0);
        let l = [1usize, 30][r.random_range(0..2)];
        let (powers, value) = waterfill(&g, &bw, p, l).unwrap();
        assert!(rel_err(powers.iter().sum::<f64>(), p) < 1e-12);
        assert!(powers.iter().all(|&x| x >= 0.0));
        let oracle = two_band_grid(g, bw, p, l as f64);
        assert!(value >= oracle * (1.0 - 1e-12), "{value} < {oracle}");
        assert!(rel_err(value, oracle) < 1e-9);
    }
}

#[test]
fn unconstrained_ia_reaches_the_bound() {
    let mut cfg = SystemConfig::default();
    cfg.r_min_bps = 0.0;
    for seed in [1, 2, 3] {
        let ch = generate_channel_set(&cfg, seed).unwrap();
        let ub = upper_bound(&cfg, &ch).unwrap();
        let ia = proposed(&cfg, &ch, seed).unwrap();
        assert_eq!(ia.iters(Phase::Feasibility), 0);
        assert!(ia.report.sum_sr_nats <= ub.report.sum_sr_nats * (1.0 + 1e-7));
        assert!(rel_err(ia.report.sum_sr_nats, ub.report.sum_sr_nats) < 5e-3);
    }
}

#[test]
fn bound_dominates_every_scheme() {
    let cfg = SystemConfig::default();
    let ch = generate_channel_set(&cfg, 9).unwrap();
    let ub = run_scheme(SchemeId::UpperBound, &cfg, &ch, 9).unwrap();
    assert!(rel_err(ub.q.total_power(), cfg.p_max_w) < 1e-12);
    for s in SchemeId::all(3) {
        let run = run_scheme(s, &cfg, &ch, 9).unwrap();
        assert!(run.report.sum_sr_nats <= ub.report.sum_sr_nats * (1.0 + 1e-7), "{s}");
        assert!(rel_err(nats_to_bits(run.report.sum_sr_nats), run.report.sum_sr_bits) < 1e-12);
    }
}

#[test]
fn single_band_equal_split_is_the_joint_scheme() {
    let cfg = SystemConfig::default().with_bands(1);
    let ch = generate_channel_set(&cfg, 4).unwrap();
    let a = proposed(&cfg, &ch, 4).unwrap();
    let b = equal_power_split(&cfg, &ch, 4).unwrap();
    assert!(rel_err(a.report.sum_sr_nats, b.report.sum_sr_nats) < 1e-9);
}

#[test]
fn equal_split_caps_each_band() {
    let cfg = SystemConfig::default();
    let ch = generate_channel_set(&cfg, 5).unwrap();
    let run = equal_power_split(&cfg, &ch, 5).unwrap();
    for b in 0..3 {
        assert!(run.q.band_power(b) <= cfg.p_max_w / 3.0 * (1.0 + 1e-8));
    }
}

#[test]
fn single_bs_uses_one_band() {
    let cfg = SystemConfig::default();
    let ch = generate_channel_set(&cfg, 6).unwrap();
    for b in 0..3 {
        let run = single_bs(b, &cfg, &ch, 6).unwrap();
        for other in (0..3).filter(|&o| o != b) {
            assert_eq!(run.q.band_power(other), 0.0);
            assert_eq!(run.report.band_sr_nats[other], 0.0);
        }
        assert!(run.q.band_power(b) <= cfg.p_max_w * (1.0 + 1e-8));
    }
}

#[test]
fn increased_requirement_is_met() {
    let cfg = SystemConfig::default();
    let ch = generate_channel_set(&cfg, 7).unwrap();
    let hi = increased_cr(&cfg, &ch, 7).unwrap();
    let base = proposed(&cfg, &ch, 7).unwrap();
    assert!(hi.report.min_user_cr_bits() >= INCREASED_R_MIN_BPS * (1.0 - 1e-6));
    assert!(hi.report.sum_sr_nats <= base.report.sum_sr_nats * (1.0 + 1e-3));
}

#[test]
fn scheme_lists_parse() {
    let all = SchemeId::all(3);
    let text = all.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    assert_eq!(text, "proposed,eq-pow-split,bs1-only,bs2-only,bs3-only,upper-bound,increased-cr");
    assert_eq!(SchemeId::parse_list(&text).unwrap(), all);
    assert!(SchemeId::parse_list("bs0-only").is_err());
    assert!(SchemeId::parse_list("proposed,nope").is_err());
}

#[test]
fn rank_deficient_target_required_for_the_bound() {
    let cfg = SystemConfig::default();
    let mut ch = generate_channel_set(&cfg, 8).unwrap();
    let n = ch.r[0].nrows();
    ch.r[0] = mbisac::linalg::identity(n);
    assert!(waterfill_upper_bound(&ch, 0.1, 30).is_err());
}
