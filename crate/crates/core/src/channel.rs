//! Network layout, fading and received-signal synthesis.
//!
//! Gateways sit evenly on a ring, devices are dropped uniformly in a disc.
//! Large-scale gains follow the log-distance model
//! `PL(dB) = 128.95 + 23.2·log10(d_km) + z` with log-normal shadowing `z`
//! frozen per topology. Small-scale fading is i.i.d. Rayleigh per antenna.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::css_phy::{generate_chirp, ChirpFrame, ReceivedFrames, SpreadingConfig};
use crate::error::{domain, Error, Result};
use crate::rng::{complex_gaussian, rng_from_seed};

pub const PATH_LOSS_INTERCEPT_DB: f64 = 128.95;
pub const PATH_LOSS_SLOPE_DB: f64 = 23.2;
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

/// Generation parameters for [`generate_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyParams {
    pub n_gateways: usize,
    pub n_devices: usize,
    pub n_antennas: usize,
    pub cell_radius_km: f64,
    pub gw_ring_radius_km: f64,
    pub gw_height_m: f64,
    pub ed_gw_min_distance_m: f64,
    pub ed_ed_min_distance_m: f64,
    pub shadowing_std_db: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// Upper bound on rejected device placements before giving up.
    pub max_attempts: usize,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            n_gateways: 3,
            n_devices: 3,
            n_antennas: 35,
            cell_radius_km: 4.0,
            gw_ring_radius_km: 2.0,
            gw_height_m: 70.0,
            ed_gw_min_distance_m: 50.0,
            ed_ed_min_distance_m: 500.0,
            shadowing_std_db: 7.8,
            bandwidth_hz: 125_000.0,
            noise_figure_db: 6.0,
            max_attempts: 100_000,
        }
    }
}

impl TopologyParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_gateways == 0 || self.n_devices == 0 || self.n_antennas == 0 {
            return Err(Error::Config(
                "gateway, device and antenna counts must be positive".into(),
            ));
        }
        let positive = [
            self.cell_radius_km,
            self.bandwidth_hz,
        ];
        let non_negative = [
            self.gw_ring_radius_km,
            self.gw_height_m,
            self.ed_gw_min_distance_m,
            self.ed_ed_min_distance_m,
            self.shadowing_std_db,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !self.noise_figure_db.is_finite()
        {
            return Err(Error::Config("invalid topology geometry parameters".into()));
        }
        Ok(())
    }
}

/// Device/gateway layout with its frozen large-scale gains and noise power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    /// `[x_km, y_km, z_km]` per gateway.
    pub gw_positions: Vec<[f64; 3]>,
    /// `[x_km, y_km]` per device.
    pub ed_positions: Vec<[f64; 2]>,
    /// `beta[gateway][device]`, linear power gain.
    pub beta: Vec<Vec<f64>>,
    /// Noise power per complex sample, mW.
    pub sigma2: f64,
    pub params: TopologyParams,
}

impl NetworkTopology {
    /// Builds a topology from explicit gains (no geometry), mostly for tests
    /// and analytical fixtures. `beta[gateway][device]`.
    pub fn from_gains(beta: Vec<Vec<f64>>, sigma2: f64, n_antennas: usize) -> Result<Self> {
        let n_gateways = beta.len();
        let n_devices = beta.first().map_or(0, Vec::len);
        let params = TopologyParams {
            n_gateways,
            n_devices,
            n_antennas,
            ..TopologyParams::default()
        };
        let topo = Self {
            gw_positions: vec![[0.0; 3]; n_gateways],
            ed_positions: vec![[0.0; 2]; n_devices],
            beta,
            sigma2,
            params,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn n_gateways(&self) -> usize {
        self.beta.len()
    }

    pub fn n_devices(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    pub fn n_antennas(&self) -> usize {
        self.params.n_antennas
    }

    #[inline]
    pub fn beta(&self, device: usize, gateway: usize) -> f64 {
        self.beta[gateway][device]
    }

    /// Gateway with the largest gain towards `device`, lowest index on ties.
    pub fn best_gateway(&self, device: usize) -> usize {
        let mut best = 0;
        for l in 1..self.n_gateways() {
            if self.beta(device, l) > self.beta(device, best) {
                best = l;
            }
        }
        best
    }

    /// Same layout with a different antenna count per gateway.
    pub fn with_antennas(&self, n_antennas: usize) -> Self {
        let mut t = self.clone();
        t.params.n_antennas = n_antennas;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.beta.len();
        if l == 0 || self.n_devices() == 0 {
            return domain("topology needs at least one gateway and one device");
        }
        if self.beta.iter().any(|row| row.len() != self.n_devices()) {
            return domain("ragged beta matrix");
        }
        if self
            .beta
            .iter()
            .flatten()
            .any(|b| !(b.is_finite() && *b > 0.0))
        {
            return domain("large-scale gains must be positive and finite");
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return domain("noise power must be finite and non-negative");
        }
        if self.params.n_antennas == 0 {
            return domain("need at least one antenna");
        }
        if self.gw_positions.len() != l || self.ed_positions.len() != self.n_devices() {
            return domain("position lists do not match the beta matrix");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let topo: Self =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }
}

/// `h[(gateway, device)]`: one complex gain per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub n_gateways: usize,
    pub n_devices: usize,
    pub n_antennas: usize,
    h: Vec<Complex64>,
}

impl ChannelRealization {
    /// Deterministic channel with gain `√β_{g,ℓ}` on every antenna.
    pub fn deterministic(topology: &NetworkTopology) -> Self {
        let (l, nu, nt) = (topology.n_gateways(), topology.n_devices(), topology.n_antennas());
        let mut h = Vec::with_capacity(l * nu * nt);
        for gw in 0..l {
            for g in 0..nu {
                let a = Complex64::new(topology.beta(g, gw).sqrt(), 0.0);
                h.extend(std::iter::repeat_n(a, nt));
            }
        }
        Self {
            n_gateways: l,
            n_devices: nu,
            n_antennas: nt,
            h,
        }
    }

    pub fn gains(&self, device: usize, gateway: usize) -> &[Complex64] {
        let start = (gateway * self.n_devices + device) * self.n_antennas;
        &self.h[start..start + self.n_antennas]
    }
}

/// Path loss in dB at 3-D distance `d_km` with shadowing `shadowing_db`.
pub fn path_loss_db(d_km: f64, shadowing_db: f64) -> f64 {
    PATH_LOSS_INTERCEPT_DB + PATH_LOSS_SLOPE_DB * d_km.log10() + shadowing_db
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Thermal noise power in mW: `-174 dBm/Hz + 10log10(B) + NF`.
pub fn noise_power(bandwidth_hz: f64, noise_figure_db: f64) -> Result<f64> {
    if !(bandwidth_hz.is_finite() && bandwidth_hz > 0.0) {
        return domain("bandwidth must be positive");
    }
    Ok(db_to_linear(noise_power_dbm(bandwidth_hz, noise_figure_db)))
}

pub fn noise_power_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10() + noise_figure_db
}

fn horizontal_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn generate_topology(params: &TopologyParams, seed: u64) -> Result<NetworkTopology> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let l = params.n_gateways;
    let h_km = params.gw_height_m / 1000.0;
    let gw_positions: Vec<[f64; 3]> = (0..l)
        .map(|i| {
            let phi = TAU * i as f64 / l as f64;
            [
                params.gw_ring_radius_km * phi.cos(),
                params.gw_ring_radius_km * phi.sin(),
                h_km,
            ]
        })
        .collect();

    let ed_gw_min = params.ed_gw_min_distance_m / 1000.0;
    let ed_ed_min = params.ed_ed_min_distance_m / 1000.0;
    let mut ed_positions: Vec<[f64; 2]> = Vec::with_capacity(params.n_devices);
    let mut attempts = 0usize;
    while ed_positions.len() < params.n_devices {
        if attempts >= params.max_attempts {
            return Err(Error::Generation(format!(
                "placed {} of {} devices after {} attempts; minimum distances too dense for the cell",
                ed_positions.len(),
                params.n_devices,
                attempts
            )));
        }
        attempts += 1;
        let radius = params.cell_radius_km * rng.random::<f64>().sqrt();
        let phi = TAU * rng.random::<f64>();
        let p = [radius * phi.cos(), radius * phi.sin()];
        let gw_ok = gw_positions
            .iter()
            .all(|g| horizontal_distance(p, [g[0], g[1]]) >= ed_gw_min);
        let ed_ok = ed_positions
            .iter()
            .all(|q| horizontal_distance(p, *q) >= ed_ed_min);
        if gw_ok && ed_ok {
            ed_positions.push(p);
        }
    }

    let beta = gw_positions
        .iter()
        .map(|g| {
            ed_positions
                .iter()
                .map(|e| {
                    let d = ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2) + g[2].powi(2)).sqrt();
                    let z: f64 = rng.sample::<f64, _>(StandardNormal) * params.shadowing_std_db;
                    db_to_linear(-path_loss_db(d, z))
                })
                .collect()
        })
        .collect();

    let topo = NetworkTopology {
        gw_positions,
        ed_positions,
        beta,
        sigma2: noise_power(params.bandwidth_hz, params.noise_figure_db)?,
        params: params.clone(),
    };
    topo.validate()?;
    Ok(topo)
}

pub fn sample_channels(topology: &NetworkTopology, seed: u64) -> Result<ChannelRealization> {
    sample_channels_with(topology, &mut rng_from_seed(seed))
}

/// Draws `h_{g,ℓ} ~ CN(0, β_{g,ℓ} I)` in (gateway, device, antenna) order.
pub fn sample_channels_with<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    rng: &mut R,
) -> Result<ChannelRealization> {
    let (l, nu, nt) = (topology.n_gateways(), topology.n_devices(), topology.n_antennas());
    if nt == 0 {
        return domain("need at least one antenna");
    }
    let mut h = Vec::with_capacity(l * nu * nt);
    for gw in 0..l {
        for g in 0..nu {
            let b = topology.beta(g, gw);
            for _ in 0..nt {
                h.push(complex_gaussian(rng, b));
            }
        }
    }
    Ok(ChannelRealization {
        n_gateways: l,
        n_devices: nu,
        n_antennas: nt,
        h,
    })
}

pub fn synthesize_received(
    topology: &NetworkTopology,
    channels: &ChannelRealization,
    powers: &[f64],
    symbols: &[usize],
    cfg: &SpreadingConfig,
    seed: u64,
) -> Result<ReceivedFrames> {
    synthesize_received_with(topology, channels, powers, symbols, cfg, &mut rng_from_seed(seed))
}

/// `y_ℓ[n] = Σ_g h_{g,ℓ} √p_g x_{m_g}[n] + w_ℓ[n]` for every antenna.
pub fn synthesize_received_with<R: Rng + ?Sized>(
    topology: &NetworkTopology,
    channels: &ChannelRealization,
    powers: &[f64],
    symbols: &[usize],
    cfg: &SpreadingConfig,
    rng: &mut R,
) -> Result<ReceivedFrames> {
    let (l, nu, nt) = (topology.n_gateways(), topology.n_devices(), topology.n_antennas());
    if channels.n_gateways != l || channels.n_devices != nu || channels.n_antennas != nt {
        return domain("channel realization does not match the topology");
    }
    if powers.len() != nu || symbols.len() != nu {
        return domain(format!(
            "expected {nu} powers and symbols, got {} and {}",
            powers.len(),
            symbols.len()
        ));
    }
    if powers.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return domain("transmit powers must be non-negative");
    }
    let chirps = symbols
        .iter()
        .map(|&s| generate_chirp(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let amplitudes: Vec<f64> = powers.iter().map(|p| p.sqrt()).collect();
    let m = cfg.m();
    let mut frames = Vec::with_capacity(l * nt);
    let mut coeff = vec![Complex64::default(); nu];
    for gw in 0..l {
        for ant in 0..nt {
            for g in 0..nu {
                coeff[g] = channels.gains(g, gw)[ant] * amplitudes[g];
            }
            let samples: Vec<Complex64> = (0..m)
                .map(|n| {
                    let signal: Complex64 = chirps
                        .iter()
                        .zip(&coeff)
                        .map(|(x, c)| x[n] * c)
                        .sum();
                    signal + complex_gaussian(rng, topology.sigma2)
                })
                .collect();
            frames.push(ChirpFrame {
                gateway_id: gw,
                antenna_id: ant,
                samples,
            });
        }
    }
    Ok(ReceivedFrames {
        n_gateways: l,
        n_antennas: nt,
        frames,
    })
}
