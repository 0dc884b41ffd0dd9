#![allow(dead_code)]

use mbisac::linalg::{c, CMat};
use mbisac::model::{rng_from_seed, BandMeta, BandParams, ChannelSet};
use mbisac::rates::CovarianceSolution;
use mbisac::recovery::PrecoderSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const C0: f64 = 2.998e8;

pub fn band(bandwidth: f64) -> BandParams {
    BandParams {
        center_frequency: 6e9,
        wavelength: C0 / 6e9,
        bandwidth,
        path_count: 1,
        tx_spacing: C0 / 6e9 / 2.0,
        noise_variance: 1.0,
    }
}

/// Hand-built channel set; `h[b][k]` and `r[b]` are taken as already noise-normalized.
pub fn toy_channel(n_t: usize, n_r: usize, bandwidths: &[f64], h: Vec<Vec<CMat>>, r: Vec<CMat>) -> ChannelSet {
    let users = h[0].len();
    ChannelSet {
        n_t,
        n_r,
        user_antennas: h[0].iter().map(|m| m.nrows()).collect(),
        bands: bandwidths.iter().map(|&bw| band(bw)).collect(),
        h,
        r,
        meta: bandwidths
            .iter()
            .map(|_| BandMeta {
                user_distances: vec![1.0; users],
                user_paths: Vec::new(),
                target_distance: 1.0,
                sensing_angle: 0.0,
                gamma: 1.0,
            })
            .collect(),
        user_positions: vec![[0.0; 3]; users],
        target_position: [0.0; 3],
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from_seed(seed)
}

pub fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMat {
    CMat::from_fn(rows, cols, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

pub fn rand_psd(n: usize, trace: f64, rng: &mut ChaCha8Rng) -> CMat {
    let a = rand_mat(n, n, rng);
    let q = &a * a.adjoint();
    let t: f64 = (0..n).map(|i| q[(i, i)].re).sum();
    q * c(trace / t, 0.0)
}

/// Random covariances on every `(band, user)` with the given total power.
pub fn rand_cov(bands: usize, users: usize, n_t: usize, total: f64, rng: &mut ChaCha8Rng) -> CovarianceSolution {
    let each = total / (bands * users) as f64;
    CovarianceSolution {
        q: (0..bands).map(|_| (0..users).map(|_| rand_psd(n_t, each, rng)).collect()).collect(),
    }
}

/// Random channel set with rank-one target covariances.
pub fn rand_channel(n_t: usize, n_r: usize, user_antennas: &[usize], bandwidths: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> ChannelSet {
    let h = bandwidths
        .iter()
        .map(|_| user_antennas.iter().map(|&n_k| rand_mat(n_k, n_t, rng) * c(scale, 0.0)).collect())
        .collect();
    let r = bandwidths
        .iter()
        .map(|_| {
            let v = rand_mat(n_t * n_r, 1, rng);
            &v * v.adjoint() * c(scale * scale, 0.0)
        })
        .collect();
    toy_channel(n_t, n_r, bandwidths, h, r)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Random Gram precoders `W_k` (`N_t x N_k`) for every `(band, user)`.
pub fn rand_precoders(ch: &mbisac::model::ChannelSet, seed: u64) -> PrecoderSet {
    let mut g = rng(seed);
    PrecoderSet::digital(
        (0..ch.num_bands())
            .map(|_| ch.user_antennas.iter().map(|&n_k| rand_mat(ch.n_t, n_k, &mut g)).collect())
            .collect(),
    )
}

/// Tiny instance: two transmit antennas, one single-antenna user, one band.
pub const TOY_P: f64 = 1.0;
pub const TOY_L: usize = 30;
const TOY_GAMMA: f64 = 1.0;
const TOY_H: [f64; 2] = [0.6, 0.8];

/// Two transmit antennas, one single-antenna user, target along `e_1`.
pub fn two_antenna_toy() -> ChannelSet {
    let mut r = CMat::zeros(2, 2);
    r[(0, 0)] = c(TOY_GAMMA, 0.0);
    let h = CMat::from_row_slice(1, 2, &[c(TOY_H[0], 0.0), c(TOY_H[1], 0.0)]);
    toy_channel(2, 1, &[1.0], vec![vec![h]], vec![r])
}

/// `Q = [[a, z], [conj z, d]]`: exact SR and CR of the toy.
pub fn toy_rates(a: f64, d: f64, z: (f64, f64)) -> (f64, f64) {
    let sr = (1.0 / TOY_L as f64) * (1.0 + TOY_L as f64 * TOY_GAMMA * a).ln();
    let hqh = TOY_H[0] * TOY_H[0] * a + TOY_H[1] * TOY_H[1] * d + 2.0 * TOY_H[0] * TOY_H[1] * z.0;
    (sr, (1.0 + hqh).ln())
}

/// Best SR over a grid of `(a, d, |z|/sqrt(ad), arg z)` subject to the budget,
/// PSD-ness and the rate requirement, refined by zooming around the best cell.
pub fn grid_oracle(r_min: f64) -> f64 {
    let mut best = (f64::NEG_INFINITY, [0.0; 4]);
    let mut lo = [0.0, 0.0, 0.0, 0.0];
    let mut hi = [TOY_P, TOY_P, 1.0, std::f64::consts::TAU];
    let n = 24;
    for _round in 0..6 {
        let step: Vec<f64> = (0..4).map(|i| (hi[i] - lo[i]) / n as f64).collect();
        for i in 0..=n {
            let a = lo[0] + step[0] * i as f64;
            for j in 0..=n {
                let d = lo[1] + step[1] * j as f64;
                if a < 0.0 || d < 0.0 || a + d > TOY_P {
                    continue;
                }
                for k in 0..=n {
                    let m = (lo[2] + step[2] * k as f64).clamp(0.0, 1.0);
                    for l in 0..=n {
                        let phase = lo[3] + step[3] * l as f64;
                        let r = m * (a * d).sqrt();
                        let (sr, cr) = toy_rates(a, d, (r * phase.cos(), r * phase.sin()));
                        if cr >= r_min && sr > best.0 {
                            best = (sr, [a, d, m, phase]);
                        }
                    }
                }
            }
        }
        for i in 0..4 {
            lo[i] = best.1[i] - 2.0 * step[i];
            hi[i] = best.1[i] + 2.0 * step[i];
        }
    }
    best.0
}
