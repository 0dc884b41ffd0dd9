mod common;

use common::*;
use mbisac::linalg::{c, identity, CMat};
use mbisac::model::{gen_pilot_symbols, PilotMode};
use mbisac::rates::*;
use proptest::prelude::*;
use rand::Rng;

fn scalar_channel(h: f64, r: f64, bw: f64) -> mbisac::model::ChannelSet {
    toy_channel(1, 1, &[bw], vec![vec![CMat::from_element(1, 1, c(h, 0.0))]], vec![CMat::from_element(1, 1, c(r, 0.0))])
}

fn scalar_q(v: f64) -> CovarianceSolution {
    CovarianceSolution { q: vec![vec![CMat::from_element(1, 1, c(v, 0.0))]] }
}

#[test]
fn zero_covariance_gives_zero_rates() {
    let mut g = rng(1);
    let ch = rand_channel(4, 2, &[2, 2], &[1e6, 4e6], 1.0, &mut g);
    let q = CovarianceSolution::zeros(2, 2, 4);
    for b in 0..2 {
        assert_eq!(sensing_rate_covariance(b, &q, &ch, 30).unwrap(), 0.0);
        for k in 0..2 {
            assert_eq!(comm_rate_covariance(k, b, &q, &ch).unwrap(), 0.0);
        }
    }
}

#[test]
fn scalar_comm_rate() {
    let ch = scalar_channel(1.0, 1.0, 1.0);
    let v = comm_rate_covariance(0, 0, &scalar_q(3.0), &ch).unwrap();
    assert!((v - 4f64.ln()).abs() < 1e-14);
}

#[test]
fn scalar_sensing_rate() {
    let ch = scalar_channel(1.0, 1.0, 1.0);
    let v = sensing_rate_covariance(0, &scalar_q(1.0), &ch, 30).unwrap();
    assert!((v - 31f64.ln() / 30.0).abs() < 1e-14);
    assert!((v - 0.11448).abs() < 1e-4);
}

#[test]
fn precoder_and_covariance_rates_agree() {
    for seed in 0..20 {
        let mut g = rng(100 + seed);
        let ch = rand_channel(6, 2, &[2, 3, 1], &[1e6, 4e6], 2.0, &mut g);
        let w = rand_precoders(&ch, seed);
        let q = w.covariances();
        for b in 0..2 {
            for k in 0..3 {
                let a = comm_rate_covariance(k, b, &q, &ch).unwrap();
                let p = comm_rate_precoder(k, b, &w, &ch).unwrap();
                assert!(rel_err(a, p) < 1e-10, "seed {seed}: {a} vs {p}");
            }
        }
    }
}

#[test]
fn zero_interferer_gives_interference_free_rate() {
    let mut g = rng(3);
    let ch = rand_channel(4, 1, &[2, 2], &[1e6], 1.0, &mut g);
    let mut w = rand_precoders(&ch, 4);
    w.w[0][1] = CMat::zeros(4, 2);
    let h = &ch.h[0][0];
    let hw = h * &w.w[0][0];
    let expected = 1e6 * mbisac::linalg::ln_det_hpd(&(identity(2) + &hw * hw.adjoint())).unwrap();
    assert!(rel_err(comm_rate_precoder(0, 0, &w, &ch).unwrap(), expected) < 1e-12);
}

#[test]
fn rank_one_fast_path_matches_full_determinant() {
    for seed in 0..20 {
        let mut g = rng(200 + seed);
        let ch = rand_channel(5, 2, &[2, 2], &[1e6], 3.0, &mut g);
        let q = rand_cov(1, 2, 5, 1.0, &mut g);
        let a = sensing_rate_covariance(0, &q, &ch, 30).unwrap();
        let f = sensing_rate_covariance_full(0, &q, &ch, 30).unwrap();
        assert!(rel_err(a, f) < 1e-10, "{a} vs {f}");
    }
}

#[test]
fn full_rank_target_falls_back_to_determinant() {
    let mut g = rng(5);
    let mut ch = rand_channel(3, 2, &[1], &[1e6], 1.0, &mut g);
    ch.r[0] = rand_psd(6, 2.0, &mut g);
    let q = rand_cov(1, 1, 3, 1.0, &mut g);
    let a = sensing_rate_covariance(0, &q, &ch, 10).unwrap();
    let f = sensing_rate_covariance_full(0, &q, &ch, 10).unwrap();
    assert!(rel_err(a, f) < 1e-12);
}

#[test]
fn lifted_sensing_rate_matches_covariance_form() {
    for seed in 0..10 {
        let mut g = rng(300 + seed);
        let ch = rand_channel(4, 2, &[2, 2], &[1e6, 2e6], 1.5, &mut g);
        let w = rand_precoders(&ch, seed + 7);
        let q = w.covariances();
        let s = gen_pilot_symbols(30, 4, PilotMode::Orthogonal, &mut g).unwrap();
        for b in 0..2 {
            let cov = sensing_rate_covariance(b, &q, &ch, 30).unwrap();
            let asym = sensing_rate_lifted(b, &w, None, &ch, 30).unwrap();
            let pil = sensing_rate_lifted(b, &w, Some(&s), &ch, 30).unwrap();
            assert!(rel_err(cov, asym) < 1e-9, "{cov} vs {asym}");
            assert!(rel_err(cov, pil) < 1e-9, "{cov} vs {pil}");
        }
    }
}

#[test]
fn lifted_rate_tracks_pilot_length() {
    let mut g = rng(8);
    let ch = rand_channel(3, 2, &[1, 1], &[1e6], 1.0, &mut g);
    let w = rand_precoders(&ch, 9);
    let q = w.covariances();
    for l in [10, 20, 40] {
        let a = sensing_rate_lifted(0, &w, None, &ch, l).unwrap();
        let b = sensing_rate_covariance(0, &q, &ch, l).unwrap();
        assert!(rel_err(a, b) < 1e-10);
    }
    let a10 = sensing_rate_covariance(0, &q, &ch, 10).unwrap();
    let a20 = sensing_rate_covariance(0, &q, &ch, 20).unwrap();
    assert!(a20 < a10 && a20 > a10 / 2.0);
}

#[test]
fn lower_bound_tight_at_expansion_point() {
    let mut g = rng(10);
    let ch = rand_channel(4, 2, &[2, 2, 2], &[1e6, 4e6], 1.0, &mut g);
    let q = rand_cov(2, 3, 4, 1.0, &mut g);
    let lin = LinearizationPoint::new(&q, &ch).unwrap();
    for b in 0..2 {
        for k in 0..3 {
            let lb = cr_lower_bound(k, b, &q, &lin, &ch).unwrap();
            let ex = comm_rate_covariance(k, b, &q, &ch).unwrap();
            assert!(rel_err(lb, ex) < 1e-12);
        }
    }
}

#[test]
fn lower_bound_below_exact_rate() {
    let mut g = rng(11);
    for _ in 0..300 {
        let ch = rand_channel(3, 1, &[2, 1], &[1e6], 2.0, &mut g);
        let q0 = rand_cov(1, 2, 3, 1.0, &mut g);
        let q1 = rand_cov(1, 2, 3, g.random_range(0.01..5.0), &mut g);
        let lin = LinearizationPoint::new(&q0, &ch).unwrap();
        for k in 0..2 {
            let lb = cr_lower_bound(k, 0, &q1, &lin, &ch).unwrap();
            let ex = comm_rate_covariance(k, 0, &q1, &ch).unwrap();
            assert!(lb <= ex + 1e-9 * ex.abs().max(1.0));
        }
    }
}

#[test]
fn single_user_bound_is_exact() {
    let mut g = rng(12);
    let ch = rand_channel(4, 1, &[2], &[1e6], 1.0, &mut g);
    let q0 = rand_cov(1, 1, 4, 1.0, &mut g);
    let lin = LinearizationPoint::new(&q0, &ch).unwrap();
    for _ in 0..10 {
        let q = rand_cov(1, 1, 4, 3.0, &mut g);
        let lb = cr_lower_bound(0, 0, &q, &lin, &ch).unwrap();
        let ex = comm_rate_covariance(0, 0, &q, &ch).unwrap();
        assert!(rel_err(lb, ex) < 1e-12);
    }
}

#[test]
fn lower_bound_first_order_matches_exact_rate() {
    let mut g = rng(13);
    let ch = rand_channel(3, 1, &[1, 2], &[1e6], 1.0, &mut g);
    let q0 = rand_cov(1, 2, 3, 1.0, &mut g);
    let lin = LinearizationPoint::new(&q0, &ch).unwrap();
    for i in 0..2 {
        let dir = rand_psd(3, 1.0, &mut g) - identity(3) * c(1.0 / 3.0, 0.0);
        let h = 1e-5;
        let step = |t: f64| {
            let mut q = q0.clone();
            q.q[0][i] += &dir * c(t, 0.0);
            q
        };
        let fd_exact = (comm_rate_covariance(0, 0, &step(h), &ch).unwrap()
            - comm_rate_covariance(0, 0, &step(-h), &ch).unwrap())
            / (2.0 * h);
        let fd_bound = (cr_lower_bound(0, 0, &step(h), &lin, &ch).unwrap()
            - cr_lower_bound(0, 0, &step(-h), &lin, &ch).unwrap())
            / (2.0 * h);
        assert!(rel_err(fd_exact, fd_bound) < 1e-5, "{fd_exact} vs {fd_bound}");
    }
}

#[test]
fn rate_report_units() {
    let mut g = rng(14);
    let ch = rand_channel(3, 2, &[1, 1], &[1e6, 2e6], 1.0, &mut g);
    let q = rand_cov(2, 2, 3, 1.0, &mut g);
    let r = RateReport::evaluate(&q, &ch, 30).unwrap();
    assert!((r.sum_sr_bits - r.sum_sr_nats / std::f64::consts::LN_2).abs() < 1e-9 * r.sum_sr_bits);
    assert!((r.band_sr_nats.iter().sum::<f64>() - r.sum_sr_nats).abs() < 1e-9 * r.sum_sr_nats);
    assert!(r.user_cr_nats.iter().chain(&r.band_sr_nats).all(|&v| v >= 0.0));
}

#[test]
fn non_psd_covariance_rejected() {
    let ch = scalar_channel(1.0, 1.0, 1.0);
    assert!(comm_rate_covariance(0, 0, &scalar_q(-5.0), &ch).is_err());
}

fn arb_seed() -> impl Strategy<Value = u64> {
    0u64..1_000_000
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sensing_rate_concave(seed in arb_seed(), t in 0.0f64..1.0) {
        let mut g = rng(seed);
        let ch = rand_channel(3, 2, &[1, 2], &[1e6], 1.0, &mut g);
        let a = rand_cov(1, 2, 3, g.random_range(0.1..3.0), &mut g);
        let b = rand_cov(1, 2, 3, g.random_range(0.1..3.0), &mut g);
        let mut mix = a.clone();
        for k in 0..2 {
            mix.q[0][k] = &a.q[0][k] * c(t, 0.0) + &b.q[0][k] * c(1.0 - t, 0.0);
        }
        let f = |q: &CovarianceSolution| sensing_rate_covariance(0, q, &ch, 30).unwrap();
        prop_assert!(f(&mix) >= t * f(&a) + (1.0 - t) * f(&b) - 1e-9 * f(&mix).max(1.0));
    }

    #[test]
    fn own_power_never_hurts(seed in arb_seed()) {
        let mut g = rng(seed);
        let ch = rand_channel(3, 1, &[2, 2], &[1e6], 1.0, &mut g);
        let q = rand_cov(1, 2, 3, 1.0, &mut g);
        let mut more = q.clone();
        more.q[0][0] += rand_psd(3, g.random_range(0.01..2.0), &mut g);
        prop_assert!(comm_rate_covariance(0, 0, &more, &ch).unwrap() >= comm_rate_covariance(0, 0, &q, &ch).unwrap() - 1e-9);
        prop_assert!(sensing_rate_covariance(0, &more, &ch, 30).unwrap() >= sensing_rate_covariance(0, &q, &ch, 30).unwrap() - 1e-9);
    }
}
