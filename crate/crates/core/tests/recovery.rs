mod common;

use common::*;
use mbisac::ia::{run, IaSetup};
use mbisac::linalg::{c, frob_norm, trace_re, CMat};
use mbisac::model::{generate_channel_set, SystemConfig};
use mbisac::rates::*;
use mbisac::recovery::*;

fn low_rank_cov(bands: usize, users: usize, n_t: usize, rank: usize, g: &mut rand_chacha::ChaCha8Rng) -> CovarianceSolution {
    let mut q = CovarianceSolution::zeros(bands, users, n_t);
    for b in 0..bands {
        for k in 0..users {
            let a = rand_mat(n_t, rank, g);
            q.q[b][k] = &a * a.adjoint();
        }
    }
    q
}

/// Least-squares residual of `w` on the span of the chosen atoms.
fn subset_residual(w: &CMat, dict: &[CMat], idx: &[usize]) -> f64 {
    let a = CMat::from_fn(w.nrows(), idx.len(), |r, j| dict[idx[j]][(r, 0)]);
    let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
    frob_norm(&(w - &a * (pinv * w)))
}

#[test]
fn omp_close_to_exhaustive_search() {
    let (n_t, size) = (8, 8);
    let dict = steering_dictionary(n_t, 0.025, 0.05, size);
    let mut g = rng(8);
    for trial in 0..50 {
        let w = rand_mat(n_t, 2, &mut g);
        let f = omp_hybrid_decompose(&w, &dict, 2).unwrap();
        let mut best = f64::INFINITY;
        for a in 0..size {
            for b in a + 1..size {
                best = best.min(subset_residual(&w, &dict, &[a, b]));
            }
        }
        assert!(f.residual <= 1.5 * best, "trial {trial}: {} vs {best}", f.residual);
        assert!(rel_err(frob_norm(&(&w - &f.w_rf * &f.w_bb)), f.residual) < 1e-9);
        assert!(f.w_rf.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }
}

#[test]
fn recovered_precoders_reproduce_the_rates() {
    let cfg = SystemConfig::default();
    let bands = cfg.band_params().unwrap();
    let spacing: Vec<f64> = bands.iter().map(|b| b.tx_spacing).collect();
    let wavelength: Vec<f64> = bands.iter().map(|b| b.wavelength).collect();
    let opts = RecoveryOptions { rank_rel_tol: cfg.recovery.rank_rel_tol, dictionary_size: cfg.recovery.dictionary_size };
    for seed in [1, 2] {
        let ch = generate_channel_set(&cfg, seed).unwrap();
        let out = run(&IaSetup::from_config(&cfg), &ch, &mut rng(seed)).unwrap();
        let p = recover_precoders(&out.q, &cfg.user_antennas, &[false; 3], &spacing, &wavelength, opts).unwrap();
        let back = p.covariances();
        let sr = sum_sensing_rate(&out.q, &ch, cfg.pilot_len).unwrap();
        assert!(rel_err(sum_sensing_rate(&back, &ch, cfg.pilot_len).unwrap(), sr) < 1e-8);
        let lifted: f64 = (0..3).map(|b| sensing_rate_lifted(b, &p, None, &ch, cfg.pilot_len).unwrap()).sum();
        assert!(rel_err(lifted, sr) < 1e-8, "{lifted} vs {sr}");
        for b in 0..3 {
            for k in 0..2 {
                let q = &out.q.q[b][k];
                assert_eq!(p.w[b][k].shape(), (8, cfg.user_antennas[k]));
                // Bands left unused only hold interior-point residue.
                if trace_re(q) > 1e-3 * cfg.p_max_w {
                    assert!(frob_norm(&(&back.q[b][k] - q)) <= 1e-6 * trace_re(q));
                }
            }
        }
        for k in 0..2 {
            let cov = user_comm_rate(k, &out.q, &ch).unwrap();
            let pre: f64 = (0..3).map(|b| comm_rate_precoder(k, b, &p, &ch).unwrap()).sum();
            // Zeroed residue blocks still carried a little rate.
            assert!(rel_err(pre, cov) < 1e-4, "user {k}: {pre} vs {cov}");
            assert!(pre >= cfg.r_min_nats());
        }
    }
}

#[test]
fn hybrid_flag_attaches_factors() {
    let cfg = SystemConfig::default();
    let bands = cfg.band_params().unwrap();
    let spacing: Vec<f64> = bands.iter().map(|b| b.tx_spacing).collect();
    let wavelength: Vec<f64> = bands.iter().map(|b| b.wavelength).collect();
    let opts = RecoveryOptions { rank_rel_tol: 1e-6, dictionary_size: 64 };
    let mut g = rng(2);
    let q = low_rank_cov(3, 2, 8, 2, &mut g);
    let p = recover_precoders(&q, &[2, 2], &[false, true, false], &spacing, &wavelength, opts).unwrap();
    for k in 0..2 {
        assert!(p.hybrid[0][k].is_none());
        let h = p.hybrid[1][k].as_ref().unwrap();
        assert_eq!(h.w_rf.shape(), (8, 2));
        assert_eq!(h.w_bb.shape(), (2, 2));
    }
}

#[test]
fn negligible_covariances_map_to_zero() {
    let mut g = rng(3);
    let mut q = low_rank_cov(2, 1, 4, 2, &mut g);
    q.q[1][0] *= c(1e-12, 0.0);
    let opts = RecoveryOptions { rank_rel_tol: 1e-6, dictionary_size: 16 };
    let p = recover_precoders(&q, &[2], &[false, false], &[0.025; 2], &[0.05; 2], opts).unwrap();
    assert!(p.w[1][0].iter().all(|z| *z == c(0.0, 0.0)));
    assert!(frob_norm(&p.w[0][0]) > 0.0);
}
