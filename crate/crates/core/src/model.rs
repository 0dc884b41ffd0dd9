//! Scenario description, random channel and target generation.
//!
//! Everything random is a pure function of `(SystemConfig, seed)`; channels
//! are stored already normalized by the per-band noise standard deviation so
//! that the noise covariance is the identity downstream.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, IsacError, Result};
use crate::linalg::{c, kron, CMat, C64};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
pub const BOLTZMANN: f64 = 1.381e-23;

/// Physical parameters of one band, derived from [`BandConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandParams {
    pub center_frequency: f64,
    pub wavelength: f64,
    pub bandwidth: f64,
    pub path_count: usize,
    pub tx_spacing: f64,
    pub noise_variance: f64,
}

impl BandParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.center_frequency,
            self.wavelength,
            self.bandwidth,
            self.tx_spacing,
            self.noise_variance,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.path_count == 0 {
            return Err(invalid("band parameters must be strictly positive"));
        }
        let rel = (self.wavelength * self.center_frequency / SPEED_OF_LIGHT - 1.0).abs();
        if rel > 1e-6 {
            return Err(invalid("wavelength inconsistent with center frequency"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub paths: usize,
    /// Hybrid (RF + baseband) precoding is used on this band.
    #[serde(default)]
    pub hybrid: bool,
    /// Transmit element spacing; half a wavelength when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_spacing_m: Option<f64>,
    /// Midpoint of the transmit/receive ULAs (m).
    pub bs_position: [f64; 3],
    /// Direction of the ULA axis (need not be normalized).
    pub array_axis: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub user_x: f64,
    pub user_y: f64,
    pub user_z_range: [f64; 2],
    pub target_x: f64,
    pub target_y: f64,
    pub target_z_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub kkt_tol: f64,
    pub max_newton_per_stage: usize,
    pub max_feasibility_iters: usize,
    pub max_main_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-7,
            max_newton_per_stage: 200,
            max_feasibility_iters: 50,
            max_main_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverySettings {
    pub rank_rel_tol: f64,
    pub dictionary_size: usize,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        Self {
            rank_rel_tol: 1e-6,
            dictionary_size: 64,
        }
    }
}

/// Full scenario description. The defaults reproduce the reference simulation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub seed: u64,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    /// Receive antenna count per user; its length is the number of users.
    pub user_antennas: Vec<usize>,
    /// Receive element spacing at the users; half the first band's wavelength when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_rx_spacing_m: Option<f64>,
    pub p_max_w: f64,
    pub r_min_bps: f64,
    pub pilot_len: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub convergence_tol: f64,
    pub beta_rcs: f64,
    pub temperature_k: f64,
    pub noise_figure: f64,
    pub bands: Vec<BandConfig>,
    pub geometry: Geometry,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub recovery: RecoverySettings,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let band = |f: f64, bw: f64, paths: usize, hybrid: bool, pos: [f64; 3], axis: [f64; 3]| BandConfig {
            frequency_hz: f,
            bandwidth_hz: bw,
            paths,
            hybrid,
            tx_spacing_m: None,
            bs_position: pos,
            array_axis: axis,
        };
        Self {
            seed: 1,
            tx_antennas: 8,
            rx_antennas: 2,
            user_antennas: vec![2, 2],
            user_rx_spacing_m: None,
            p_max_w: 0.1,
            r_min_bps: 100e3,
            pilot_len: 30,
            rho: 1.0,
            epsilon: 1e-5,
            convergence_tol: 1e-3,
            beta_rcs: 1.0,
            temperature_k: 290.0,
            noise_figure: 7.94,
            bands: vec![
                band(6e9, 1e6, 8, false, [0.0, 5.0, 0.0], [0.0, 0.0, 1.0]),
                band(26e9, 4e6, 4, true, [0.0, 5.0, 300.0], [0.0, 0.0, 1.0]),
                band(26.5e9, 4e6, 4, true, [210.0, 5.0, -80.0], [1.0, 0.0, 0.0]),
            ],
            geometry: Geometry {
                user_x: 25.0,
                user_y: 1.5,
                user_z_range: [25.0, 275.0],
                target_x: -25.0,
                target_y: 1.0,
                target_z_range: [25.0, 275.0],
            },
            solver: SolverSettings::default(),
            recovery: RecoverySettings::default(),
        }
    }
}

impl SystemConfig {
    /// Defaults restricted to the first `n` base stations.
    pub fn with_bands(mut self, n: usize) -> Self {
        self.bands.truncate(n);
        self
    }

    pub fn num_users(&self) -> usize {
        self.user_antennas.len()
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn total_streams(&self) -> usize {
        self.user_antennas.iter().sum()
    }

    /// Minimum communication rate in nats/s.
    pub fn r_min_nats(&self) -> f64 {
        self.r_min_bps * std::f64::consts::LN_2
    }

    pub fn user_rx_spacing(&self) -> f64 {
        self.user_rx_spacing_m.unwrap_or_else(|| {
            self.bands
                .first()
                .map(|b| SPEED_OF_LIGHT / b.frequency_hz / 2.0)
                .unwrap_or(0.0)
        })
    }

    pub fn band_params(&self) -> Result<Vec<BandParams>> {
        self.bands
            .iter()
            .map(|b| {
                let wavelength = SPEED_OF_LIGHT / b.frequency_hz;
                let p = BandParams {
                    center_frequency: b.frequency_hz,
                    wavelength,
                    bandwidth: b.bandwidth_hz,
                    path_count: b.paths,
                    tx_spacing: b.tx_spacing_m.unwrap_or(wavelength / 2.0),
                    noise_variance: noise_variance(self.temperature_k, b.bandwidth_hz, self.noise_figure)?,
                };
                p.validate()?;
                Ok(p)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(invalid("at least one band is required"));
        }
        if self.user_antennas.is_empty() || self.user_antennas.contains(&0) {
            return Err(invalid("every user needs at least one antenna"));
        }
        if self.tx_antennas == 0 || self.rx_antennas == 0 {
            return Err(invalid("antenna counts must be positive"));
        }
        if !(self.p_max_w > 0.0) || self.pilot_len == 0 || !(self.rho > 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid("P_max, L, rho and epsilon must be positive"));
        }
        if !(self.r_min_bps >= 0.0) || !(self.convergence_tol > 0.0) || !(self.beta_rcs > 0.0) {
            return Err(invalid("r_min must be nonnegative, tolerance and RCS positive"));
        }
        for b in &self.bands {
            let norm = b.array_axis.iter().map(|x| x * x).sum::<f64>();
            if norm == 0.0 {
                return Err(invalid("array axis must be nonzero"));
            }
        }
        let [lo, hi] = self.geometry.user_z_range;
        let [tlo, thi] = self.geometry.target_z_range;
        if !(lo <= hi) || !(tlo <= thi) {
            return Err(invalid("placement ranges must be ordered"));
        }
        self.band_params()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s).map_err(|e| IsacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Thermal noise power `k_B T B F` in watts.
pub fn noise_variance(temperature: f64, bandwidth: f64, noise_figure: f64) -> Result<f64> {
    if !(temperature > 0.0 && bandwidth > 0.0 && noise_figure > 0.0) {
        return Err(invalid("noise parameters must be positive"));
    }
    Ok(BOLTZMANN * temperature * bandwidth * noise_figure)
}

/// Free-space path loss `(lambda / (4 pi d))^2`.
pub fn path_loss(wavelength: f64, distance: f64) -> Result<f64> {
    if !(wavelength > 0.0) || !(distance > 0.0) {
        return Err(invalid("path loss needs positive wavelength and distance"));
    }
    Ok((wavelength / (4.0 * PI * distance)).powi(2))
}

/// Unit-norm ULA response; element `m` has phase `m 2 pi spacing / lambda sin(angle)`.
pub fn steering_vector(n_elems: usize, spacing: f64, wavelength: f64, angle: f64) -> CMat {
    let scale = 1.0 / (n_elems as f64).sqrt();
    let step = 2.0 * PI * spacing / wavelength * angle.sin();
    CMat::from_fn(n_elems, 1, |m, _| C64::from_polar(scale, m as f64 * step))
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c(s * re, s * im)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    /// Angles of arrival at the user (rad).
    pub aoa: Vec<f64>,
    /// Angles of departure at the BS (rad).
    pub aod: Vec<f64>,
    pub gains: Vec<(f64, f64)>,
}

/// Placement and array parameters of one BS-user link.
#[derive(Debug, Clone, Copy)]
pub struct LinkGeometry {
    pub n_t: usize,
    pub n_k: usize,
    pub rx_spacing: f64,
    pub distance: f64,
}

/// Sparse multipath channel `sqrt(N_t N_k / P) sum_p beta_p a_R(theta_p) a_T(phi_p)^H`
/// with `beta_p ~ CN(0, F)` and angles uniform on `[-pi/2, pi/2]`. Not noise-normalized.
pub fn gen_comm_channel<R: Rng + ?Sized>(
    band: &BandParams,
    link: &LinkGeometry,
    rng: &mut R,
) -> Result<(CMat, PathMeta)> {
    if band.path_count == 0 {
        return Err(invalid("at least one propagation path is required"));
    }
    let fspl = path_loss(band.wavelength, link.distance)?;
    let amp = ((link.n_t * link.n_k) as f64 / band.path_count as f64).sqrt();
    let mut h = CMat::zeros(link.n_k, link.n_t);
    let mut meta = PathMeta {
        aoa: Vec::with_capacity(band.path_count),
        aod: Vec::with_capacity(band.path_count),
        gains: Vec::with_capacity(band.path_count),
    };
    for _ in 0..band.path_count {
        let theta = rng.random_range(-PI / 2.0..=PI / 2.0);
        let phi = rng.random_range(-PI / 2.0..=PI / 2.0);
        let beta = complex_gaussian(rng, fspl);
        let a_r = steering_vector(link.n_k, link.rx_spacing, band.wavelength, theta);
        let a_t = steering_vector(link.n_t, band.tx_spacing, band.wavelength, phi);
        h += (&a_r * a_t.adjoint()) * (beta * amp);
        meta.aoa.push(theta);
        meta.aod.push(phi);
        meta.gains.push((beta.re, beta.im));
    }
    Ok((h, meta))
}

/// Variance of the target reflection coefficient, `beta_RCS lambda^2 / ((4 pi)^3 d^4)`.
pub fn reflection_variance(wavelength: f64, distance: f64, beta_rcs: f64) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(invalid("target distance must be positive"));
    }
    Ok(beta_rcs * wavelength * wavelength / ((4.0 * PI).powi(3) * distance.powi(4)))
}

/// Noise-normalized covariance of the vectorized target response,
/// `gamma N_t N_r (a_R^* kron a_T)(a_R^* kron a_T)^H / sigma^2`.
pub fn target_response_covariance(
    band: &BandParams,
    sensing_angle: f64,
    distance: f64,
    n_t: usize,
    n_r: usize,
    beta_rcs: f64,
) -> Result<CMat> {
    let gamma = reflection_variance(band.wavelength, distance, beta_rcs)?;
    let a_t = steering_vector(n_t, band.tx_spacing, band.wavelength, sensing_angle);
    let a_r = steering_vector(n_r, band.tx_spacing, band.wavelength, sensing_angle);
    let v = kron(&a_r.map(|z| z.conj()), &a_t);
    let scale = gamma * (n_t * n_r) as f64 / band.noise_variance;
    Ok((&v * v.adjoint()) * c(scale, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PilotMode {
    Orthogonal,
    RandomQpsk,
}

/// Pilot/data symbol matrix `S` (`N_tot x L`). Orthogonal mode returns the
/// first `N_tot` rows of an `L`-point DFT so that `S S^H = L I` exactly.
pub fn gen_pilot_symbols<R: Rng + ?Sized>(l: usize, n_tot: usize, mode: PilotMode, rng: &mut R) -> Result<CMat> {
    match mode {
        PilotMode::Orthogonal => {
            if l < n_tot {
                return Err(invalid("orthogonal pilots need L >= N_tot"));
            }
            Ok(CMat::from_fn(n_tot, l, |i, j| {
                C64::from_polar(1.0, -2.0 * PI * ((i * j) % l) as f64 / l as f64)
            }))
        }
        PilotMode::RandomQpsk => Ok(CMat::from_fn(n_tot, l, |_, _| {
            let q = rng.random_range(0..4u8) as f64;
            C64::from_polar(1.0, PI / 4.0 + q * PI / 2.0)
        })),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMeta {
    pub user_distances: Vec<f64>,
    pub user_paths: Vec<PathMeta>,
    pub target_distance: f64,
    /// Angle of the target from the array broadside (rad).
    pub sensing_angle: f64,
    /// Reflection-coefficient variance (before noise normalization).
    pub gamma: f64,
}

/// One channel realization: noise-normalized user channels and target covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub n_t: usize,
    pub n_r: usize,
    pub user_antennas: Vec<usize>,
    pub bands: Vec<BandParams>,
    /// `h[b][k]`: `N_k x N_t`, normalized by the noise standard deviation.
    pub h: Vec<Vec<CMat>>,
    /// `r[b]`: `N_t N_r x N_t N_r`, normalized by the noise variance.
    pub r: Vec<CMat>,
    pub meta: Vec<BandMeta>,
    pub user_positions: Vec<[f64; 3]>,
    pub target_position: [f64; 3],
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.user_antennas.len()
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    /// Sensing gain `c_b` such that `R_b = c_b v v^H` with unit `v`.
    pub fn sensing_gain(&self, b: usize) -> f64 {
        crate::linalg::trace_re(&self.r[b])
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Angle of `point` relative to the broadside of a ULA at `origin` along `axis`.
pub fn broadside_angle(origin: &[f64; 3], axis: &[f64; 3], point: &[f64; 3]) -> f64 {
    let d: Vec<f64> = point.iter().zip(origin).map(|(p, o)| p - o).collect();
    let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let an = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = d.iter().zip(axis).map(|(x, y)| x * y).sum::<f64>() / (dn * an);
    cosine.clamp(-1.0, 1.0).asin()
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws one realization: user and target placement, then every channel.
pub fn generate_channel_set(config: &SystemConfig, seed: u64) -> Result<ChannelSet> {
    config.validate()?;
    let bands = config.band_params()?;
    let mut rng = rng_from_seed(seed);
    let g = &config.geometry;
    let draw_z = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let user_positions: Vec<[f64; 3]> = (0..config.num_users())
        .map(|_| [g.user_x, g.user_y, draw_z(&mut rng, g.user_z_range)])
        .collect();
    let target_position = [g.target_x, g.target_y, draw_z(&mut rng, g.target_z_range)];

    let rx_spacing = config.user_rx_spacing();
    let mut h = Vec::with_capacity(bands.len());
    let mut r = Vec::with_capacity(bands.len());
    let mut meta = Vec::with_capacity(bands.len());
    for (bp, bc) in bands.iter().zip(&config.bands) {
        let sigma = bp.noise_variance.sqrt();
        let mut hb = Vec::with_capacity(config.num_users());
        let mut dists = Vec::new();
        let mut paths = Vec::new();
        for (k, pos) in user_positions.iter().enumerate() {
            let link = LinkGeometry {
                n_t: config.tx_antennas,
                n_k: config.user_antennas[k],
                rx_spacing,
                distance: distance(&bc.bs_position, pos),
            };
            let (hk, pm) = gen_comm_channel(bp, &link, &mut rng)?;
            hb.push(hk.map(|z| z / sigma));
            dists.push(link.distance);
            paths.push(pm);
        }
        let d_t = distance(&bc.bs_position, &target_position);
        let angle = broadside_angle(&bc.bs_position, &bc.array_axis, &target_position);
        let rb = target_response_covariance(bp, angle, d_t, config.tx_antennas, config.rx_antennas, config.beta_rcs)?;
        h.push(hb);
        r.push(rb);
        meta.push(BandMeta {
            user_distances: dists,
            user_paths: paths,
            target_distance: d_t,
            sensing_angle: angle,
            gamma: reflection_variance(bp.wavelength, d_t, config.beta_rcs)?,
        });
    }
    Ok(ChannelSet {
        n_t: config.tx_antennas,
        n_r: config.rx_antennas,
        user_antennas: config.user_antennas.clone(),
        bands,
        h,
        r,
        meta,
        user_positions,
        target_position,
    })
}
