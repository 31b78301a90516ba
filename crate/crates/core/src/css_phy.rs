//! Chirp waveforms, dechirping and per-bin received power.
//!
//! A symbol `m` is the base up-chirp cyclically advanced by `m` samples:
//!
//! ```text
//! x_m[n] = exp{ j2π ( (n+m)² / 2M − (n+m) / 2 ) },   n = 0..M-1
//! ```
//!
//! Multiplying by the conjugate base chirp turns `x_m` into a pure tone at
//! DFT bin `m`. The DFT here is unitary (`1/√M`), so a unit-gain noiseless
//! chirp puts exactly `M` into its bin.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{domain, Result};

pub const MIN_SF: u32 = 5;
pub const MAX_SF: u32 = 12;

/// Spreading factor, alphabet size and bandwidth of the CSS waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadingConfig {
    sf: u32,
    m: usize,
    bandwidth_hz: f64,
}

impl SpreadingConfig {
    pub fn new(sf: u32, bandwidth_hz: f64) -> Result<Self> {
        if !(MIN_SF..=MAX_SF).contains(&sf) {
            return domain(format!("spreading factor {sf} outside {MIN_SF}..={MAX_SF}"));
        }
        if !(bandwidth_hz.is_finite() && bandwidth_hz > 0.0) {
            return domain(format!("bandwidth must be positive, got {bandwidth_hz}"));
        }
        Ok(Self {
            sf,
            m: 1usize << sf,
            bandwidth_hz,
        })
    }

    /// Spreading factor with the 125 kHz LoRa bandwidth.
    pub fn with_sf(sf: u32) -> Result<Self> {
        Self::new(sf, 125_000.0)
    }

    pub fn sf(&self) -> u32 {
        self.sf
    }

    /// Samples per symbol, `2^sf`.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    fn check_symbol(&self, symbol: usize) -> Result<()> {
        if symbol >= self.m {
            return domain(format!("symbol {symbol} outside alphabet 0..{}", self.m));
        }
        Ok(())
    }
}

/// One symbol duration of complex baseband samples seen by one antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct ChirpFrame {
    pub gateway_id: usize,
    pub antenna_id: usize,
    pub samples: Vec<Complex64>,
}

/// Frames of every antenna of every gateway for one symbol slot, ordered by
/// gateway then antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrames {
    pub n_gateways: usize,
    pub n_antennas: usize,
    pub frames: Vec<ChirpFrame>,
}

impl ReceivedFrames {
    pub fn frame(&self, gateway: usize, antenna: usize) -> &ChirpFrame {
        &self.frames[gateway * self.n_antennas + antenna]
    }
}

/// Received power per (gateway, bin) and the gateway-fused statistic
/// `upsilon[k] = (1/N_t) Σ_ℓ r[ℓ][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPowerTensor {
    /// Row-major `n_gateways × m`.
    pub r: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub n_antennas: usize,
    pub n_gateways: usize,
    pub m: usize,
}

impl BinPowerTensor {
    /// Builds the tensor from per-gateway bin powers, deriving `upsilon`.
    pub fn from_gateway_powers(r: Vec<f64>, n_gateways: usize, n_antennas: usize) -> Result<Self> {
        if n_gateways == 0 || n_antennas == 0 || r.is_empty() || !r.len().is_multiple_of(n_gateways) {
            return domain("bin power rows do not match gateway count");
        }
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return domain("bin powers must be finite and non-negative");
        }
        let m = r.len() / n_gateways;
        let inv_nt = 1.0 / n_antennas as f64;
        let upsilon = (0..m)
            .map(|k| (0..n_gateways).map(|l| r[l * m + k]).sum::<f64>() * inv_nt)
            .collect();
        Ok(Self {
            r,
            upsilon,
            n_antennas,
            n_gateways,
            m,
        })
    }

    #[inline]
    pub fn r(&self, gateway: usize, bin: usize) -> f64 {
        self.r[gateway * self.m + bin]
    }

    pub fn gateway_row(&self, gateway: usize) -> &[f64] {
        &self.r[gateway * self.m..(gateway + 1) * self.m]
    }
}

/// Phase of `x_0[k]` in cycles, reduced exactly to `[0, 1)`.
///
/// `k²/2M − k/2 = k(k−M)/2M`; the numerator is reduced modulo `2M` in
/// integers so large `k` loses no precision.
#[inline]
fn base_phase_cycles(k: i64, m: i64) -> f64 {
    let two_m = 2 * m;
    let num = (k * (k - m)).rem_euclid(two_m);
    num as f64 / two_m as f64
}

/// Samples of chirp `x_symbol`.
pub fn generate_chirp(cfg: &SpreadingConfig, symbol: usize) -> Result<Vec<Complex64>> {
    cfg.check_symbol(symbol)?;
    let m = cfg.m as i64;
    let s = symbol as i64;
    Ok((0..m)
        .map(|n| Complex64::from_polar(1.0, TAU * base_phase_cycles(n + s, m)))
        .collect())
}

/// Conjugate of the base chirp, the dechirping reference.
pub fn downchirp(cfg: &SpreadingConfig) -> Vec<Complex64> {
    let m = cfg.m as i64;
    (0..m)
        .map(|n| Complex64::from_polar(1.0, -TAU * base_phase_cycles(n, m)))
        .collect()
}

/// `z[n] = y[n] · conj(x_0[n])`.
pub fn dechirp(frame: &ChirpFrame, cfg: &SpreadingConfig) -> Result<Vec<Complex64>> {
    if frame.samples.len() != cfg.m {
        return domain(format!(
            "frame has {} samples, expected {}",
            frame.samples.len(),
            cfg.m
        ));
    }
    let reference = downchirp(cfg);
    Ok(frame
        .samples
        .iter()
        .zip(&reference)
        .map(|(y, d)| y * d)
        .collect())
}

/// Per-bin powers from already-dechirped frames.
///
/// Each frame is transformed with the unitary `M`-point DFT; powers are
/// summed over the antennas of a gateway.
pub fn bin_powers(
    dechirped: &[ChirpFrame],
    n_gateways: usize,
    n_antennas: usize,
    cfg: &SpreadingConfig,
) -> Result<BinPowerTensor> {
    let m = cfg.m;
    if n_gateways == 0 || n_antennas == 0 {
        return domain("need at least one gateway and one antenna");
    }
    if dechirped.len() != n_gateways * n_antennas {
        return domain(format!(
            "got {} frames for {} gateways x {} antennas",
            dechirped.len(),
            n_gateways,
            n_antennas
        ));
    }
    let mut seen = vec![false; n_gateways * n_antennas];
    let fft = FftPlanner::new().plan_fft_forward(m);
    let scale = 1.0 / (m as f64).sqrt();
    let mut r = vec![0.0; n_gateways * m];
    let mut buf = vec![Complex64::default(); m];
    for frame in dechirped {
        if frame.samples.len() != m {
            return domain("frame length does not match the spreading factor");
        }
        if frame.gateway_id >= n_gateways || frame.antenna_id >= n_antennas {
            return domain("frame gateway/antenna id out of range");
        }
        let slot = frame.gateway_id * n_antennas + frame.antenna_id;
        if std::mem::replace(&mut seen[slot], true) {
            return domain("duplicate frame for one antenna");
        }
        buf.copy_from_slice(&frame.samples);
        fft.process(&mut buf);
        let row = &mut r[frame.gateway_id * m..(frame.gateway_id + 1) * m];
        for (acc, z) in row.iter_mut().zip(&buf) {
            *acc += (z * scale).norm_sqr();
        }
    }
    BinPowerTensor::from_gateway_powers(r, n_gateways, n_antennas)
}

/// Dechirp + DFT + power accumulation with a cached plan and reference.
///
/// This is the receiver used by the Monte Carlo harness; it computes the same
/// thing as [`dechirp`] followed by [`bin_powers`].
pub struct Demodulator {
    cfg: SpreadingConfig,
    reference: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Demodulator {
    pub fn new(cfg: SpreadingConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.m);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self {
            reference: downchirp(&cfg),
            buf: vec![Complex64::default(); cfg.m],
            cfg,
            fft,
            scratch,
        }
    }

    pub fn config(&self) -> &SpreadingConfig {
        &self.cfg
    }

    pub fn process(&mut self, rx: &ReceivedFrames) -> Result<BinPowerTensor> {
        let m = self.cfg.m;
        if rx.frames.len() != rx.n_gateways * rx.n_antennas || rx.frames.is_empty() {
            return domain("received frame set is inconsistent with its dimensions");
        }
        let scale2 = 1.0 / m as f64;
        let mut r = vec![0.0; rx.n_gateways * m];
        for (idx, frame) in rx.frames.iter().enumerate() {
            if frame.samples.len() != m {
                return domain("frame length does not match the spreading factor");
            }
            for ((b, y), d) in self.buf.iter_mut().zip(&frame.samples).zip(&self.reference) {
                *b = y * d;
            }
            self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
            let gw = idx / rx.n_antennas;
            let row = &mut r[gw * m..(gw + 1) * m];
            for (acc, z) in row.iter_mut().zip(&self.buf) {
                *acc += z.norm_sqr() * scale2;
            }
        }
        BinPowerTensor::from_gateway_powers(r, rx.n_gateways, rx.n_antennas)
    }
}
