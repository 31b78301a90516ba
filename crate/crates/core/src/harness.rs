//! Monte Carlo symbol-error-rate experiments and parameter sweeps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::channel::{
    db_to_linear, generate_topology, sample_channels_with, synthesize_received_with,
    NetworkTopology, TopologyParams,
};
use crate::css_phy::{Demodulator, SpreadingConfig};
use crate::detector::{
    calibrate_threshold, ml_detect, threshold_bracket, two_stage_detect_with, error_upper_bound,
    ThresholdCalibration,
};
use crate::error::{Error, Result};
use crate::power_control::{run_power_control, PowerControlConfig, PowerControlOutcome};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::stats::ActiveBinStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorMode {
    Ml,
    TwoStage,
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorMode::Ml => "ml",
            DetectorMode::TwoStage => "two-stage",
        })
    }
}

impl FromStr for DetectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(DetectorMode::Ml),
            "two-stage" | "two_stage" => Ok(DetectorMode::TwoStage),
            _ => Err(Error::Config(format!("unknown detector '{s}' (ml | two-stage)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NAntennas,
    Alpha,
    Snr,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_antennas" | "n-antennas" => Ok(SweepAxis::NAntennas),
            "alpha" => Ok(SweepAxis::Alpha),
            "snr" | "snr_db" => Ok(SweepAxis::Snr),
            _ => Err(Error::Config(format!(
                "unknown sweep axis '{s}' (n_antennas | alpha | snr)"
            ))),
        }
    }
}

/// Everything needed to reproduce one SER experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub sf: u32,
    pub bandwidth_hz: f64,
    pub n_gateways: usize,
    pub n_devices: usize,
    pub n_antennas: usize,
    pub cell_radius_km: f64,
    pub gw_ring_radius_km: f64,
    pub gw_height_m: f64,
    pub ed_gw_min_distance_m: f64,
    pub ed_ed_min_distance_m: f64,
    pub shadowing_std_db: f64,
    pub noise_figure_db: f64,
    /// Reference SNR grid in dB (per-sample SNR at each device's best gateway).
    pub snr_db: Vec<f64>,
    /// Trials per SNR point, shared round-robin among the topologies.
    pub trials: usize,
    pub seed: u64,
    pub n_topologies: usize,
    /// Use this topology instead of generating random ones.
    pub topology_file: Option<String>,
    pub detector: DetectorMode,
    pub power_control: bool,
    pub surjective: bool,
    pub alpha: f64,
    /// Average-SNR floor of the power-control problem, in dB relative to
    /// `M·snr/L`, the least average SNR a device reaches at its single-user power.
    pub epsilon_db: f64,
    /// Per-device power budget of the power-control problem. Defaults to the
    /// sum of the single-user calibrated powers.
    pub p_max_dbm: Option<f64>,
    pub pc_tol: f64,
    pub pc_max_iter: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let topo = TopologyParams::default();
        Self {
            experiment_id: "default".into(),
            sf: 7,
            bandwidth_hz: topo.bandwidth_hz,
            n_gateways: topo.n_gateways,
            n_devices: topo.n_devices,
            n_antennas: topo.n_antennas,
            cell_radius_km: topo.cell_radius_km,
            gw_ring_radius_km: topo.gw_ring_radius_km,
            gw_height_m: topo.gw_height_m,
            ed_gw_min_distance_m: topo.ed_gw_min_distance_m,
            ed_ed_min_distance_m: topo.ed_ed_min_distance_m,
            shadowing_std_db: topo.shadowing_std_db,
            noise_figure_db: topo.noise_figure_db,
            snr_db: vec![-20.0, -18.0, -16.0, -14.0, -12.0, -10.0],
            trials: 1000,
            seed: 1,
            n_topologies: 10,
            topology_file: None,
            detector: DetectorMode::TwoStage,
            power_control: true,
            surjective: true,
            alpha: crate::power_control::DEFAULT_ALPHA,
            epsilon_db: 0.0,
            p_max_dbm: None,
            pc_tol: crate::power_control::DEFAULT_TOL,
            pc_max_iter: crate::power_control::DEFAULT_MAX_ITER,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a non-empty list of finite values");
        }
        if self.n_topologies == 0 {
            return bad("n_topologies must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !self.epsilon_db.is_finite() {
            return bad("epsilon_db must be finite");
        }
        if self.p_max_dbm.is_some_and(|p| !p.is_finite()) {
            return bad("p_max_dbm must be finite");
        }
        if self.n_devices > self.spreading()?.m() {
            return bad("more devices than chirp symbols");
        }
        self.topology_params().validate()
    }

    pub fn spreading(&self) -> Result<SpreadingConfig> {
        SpreadingConfig::new(self.sf, self.bandwidth_hz)
    }

    pub fn topology_params(&self) -> TopologyParams {
        TopologyParams {
            n_gateways: self.n_gateways,
            n_devices: self.n_devices,
            n_antennas: self.n_antennas,
            cell_radius_km: self.cell_radius_km,
            gw_ring_radius_km: self.gw_ring_radius_km,
            gw_height_m: self.gw_height_m,
            ed_gw_min_distance_m: self.ed_gw_min_distance_m,
            ed_ed_min_distance_m: self.ed_ed_min_distance_m,
            shadowing_std_db: self.shadowing_std_db,
            bandwidth_hz: self.bandwidth_hz,
            noise_figure_db: self.noise_figure_db,
            ..TopologyParams::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Topologies used by every SNR point of the experiment.
    pub fn topologies(&self) -> Result<Vec<NetworkTopology>> {
        if let Some(path) = &self.topology_file {
            let topo = NetworkTopology::from_json(&std::fs::read_to_string(path)?)?;
            if topo.n_devices() != self.n_devices || topo.n_gateways() != self.n_gateways {
                return Err(Error::Config(format!(
                    "topology file has {} devices and {} gateways, config expects {} and {}",
                    topo.n_devices(),
                    topo.n_gateways(),
                    self.n_devices,
                    self.n_gateways
                )));
            }
            return Ok(vec![topo.with_antennas(self.n_antennas)]);
        }
        let params = self.topology_params();
        (0..self.n_topologies)
            .map(|t| generate_topology(&params, derive_seed(self.seed, stream::TOPOLOGY, &[t as u64])))
            .collect()
    }
}

/// Per-device transmit powers giving `snr_db` per sample at each device's
/// strongest gateway.
pub fn calibrate_single_user_powers(topology: &NetworkTopology, snr_db: f64) -> Vec<f64> {
    let snr = db_to_linear(snr_db);
    (0..topology.n_devices())
        .map(|g| snr * topology.sigma2 / topology.beta(g, topology.best_gateway(g)))
        .collect()
}

/// Scales `p` down uniformly when its sum exceeds the sum of `p_su`.
pub fn apply_sum_power_budget(p: &[f64], p_su: &[f64]) -> Result<Vec<f64>> {
    if p.len() != p_su.len() {
        return Err(Error::Domain("power vectors differ in length".into()));
    }
    let total: f64 = p.iter().sum();
    let budget: f64 = p_su.iter().sum();
    if total > budget {
        let s = budget / total;
        Ok(p.iter().map(|v| v * s).collect())
    } else {
        Ok(p.to_vec())
    }
}

/// Devices whose average received SNR `(1/(Lσ²))Σ_ℓ Mβp` falls below `epsilon`.
pub fn snr_floor_violations(topology: &NetworkTopology, m: usize, p: &[f64], epsilon: f64) -> Vec<usize> {
    crate::power_control::PowerAllocation {
        p: p.to_vec(),
        p_max: f64::INFINITY,
        epsilon,
    }
    .snr_residuals(topology, m)
    .iter()
    .enumerate()
    .filter(|(_, r)| **r < -1e-9 * epsilon.max(1.0))
    .map(|(g, _)| g)
    .collect()
}

/// Powers, detector threshold and power-control result for one topology at
/// one reference SNR.
#[derive(Debug, Clone)]
pub struct PreparedLink {
    pub topology: NetworkTopology,
    pub p_su: Vec<f64>,
    pub powers: Vec<f64>,
    pub power_control: Option<PowerControlOutcome>,
    pub calibration: Option<ThresholdCalibration>,
}

pub fn prepare_link(
    cfg: &ExperimentConfig,
    topology: &NetworkTopology,
    snr_db: f64,
) -> Result<PreparedLink> {
    let m = cfg.spreading()?.m();
    let p_su = calibrate_single_user_powers(topology, snr_db);
    let (powers, pc) = if cfg.power_control && topology.n_devices() > 1 {
        let p_max = match cfg.p_max_dbm {
            Some(dbm) => db_to_linear(dbm),
            None => p_su.iter().sum(),
        };
        let floor_at_max = crate::power_control::PowerAllocation {
            p: vec![p_max; topology.n_devices()],
            p_max,
            epsilon: 0.0,
        }
        .snr_residuals(topology, m)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        let reference = m as f64 * db_to_linear(snr_db) / topology.n_gateways() as f64;
        let mut epsilon = db_to_linear(cfg.epsilon_db) * reference;
        if epsilon > floor_at_max {
            log::warn!(
                "SNR floor {} dB unreachable at {snr_db} dB reference SNR; using {:.2} dB",
                cfg.epsilon_db,
                crate::channel::linear_to_db(floor_at_max / reference)
            );
            epsilon = floor_at_max;
        }
        let pc_cfg = PowerControlConfig {
            p_max,
            epsilon,
            alpha: cfg.alpha,
            tol: cfg.pc_tol,
            max_iter: cfg.pc_max_iter,
        };
        let out = run_power_control(topology, m, &pc_cfg)?;
        let p = apply_sum_power_budget(&out.allocation.p, &p_su)?;
        let low = snr_floor_violations(topology, m, &p, pc_cfg.epsilon);
        if !low.is_empty() {
            log::info!("devices {low:?} fall below the SNR floor after the sum-power budget");
        }
        (p, Some(out))
    } else {
        (p_su.clone(), None)
    };
    let calibration = match cfg.detector {
        DetectorMode::TwoStage => {
            let stats = ActiveBinStats::new(topology, &powers, m)?;
            Some(calibrate_threshold(&stats)?)
        }
        DetectorMode::Ml => None,
    };
    Ok(PreparedLink {
        topology: topology.clone(),
        p_su,
        powers,
        power_control: pc,
        calibration,
    })
}

/// One row of SER output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SERRecord {
    pub experiment_id: String,
    pub snr_db: f64,
    pub n_u: usize,
    pub n_t: usize,
    pub alpha: f64,
    pub detector: DetectorMode,
    pub power_control: bool,
    pub trials: usize,
    /// Symbol errors per device index.
    pub errors: Vec<u64>,
    pub ser: Vec<f64>,
    pub ser_avg: f64,
    pub ser_best: f64,
    pub ser_worst: f64,
    pub seed: u64,
}

impl SERRecord {
    fn new(cfg: &ExperimentConfig, snr_db: f64, errors: Vec<u64>) -> Self {
        let ser: Vec<f64> = errors.iter().map(|&e| e as f64 / cfg.trials as f64).collect();
        let ser_avg = ser.iter().sum::<f64>() / ser.len() as f64;
        let ser_best = ser.iter().copied().fold(f64::INFINITY, f64::min);
        let ser_worst = ser.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            experiment_id: cfg.experiment_id.clone(),
            snr_db,
            n_u: cfg.n_devices,
            n_t: cfg.n_antennas,
            alpha: cfg.alpha,
            detector: cfg.detector,
            power_control: cfg.power_control,
            trials: cfg.trials,
            errors,
            ser,
            ser_avg,
            ser_best,
            ser_worst,
            seed: cfg.seed,
        }
    }
}

/// SER record plus the per-trial, per-device error indicators
/// (`flags[trial * n_u + g]`).
#[derive(Debug, Clone)]
pub struct PointResult {
    pub record: SERRecord,
    pub flags: Vec<bool>,
}

/// Runs every trial of one SNR point on already-generated topologies.
pub fn run_ser_point(
    cfg: &ExperimentConfig,
    topologies: &[NetworkTopology],
    snr_db: f64,
) -> Result<PointResult> {
    let links = topologies
        .iter()
        .map(|t| prepare_link(cfg, t, snr_db))
        .collect::<Result<Vec<_>>>()?;
    run_links(cfg, &links, snr_db)
}

/// Runs `cfg.trials` trials round-robin over prepared links.
pub fn run_links(cfg: &ExperimentConfig, links: &[PreparedLink], snr_db: f64) -> Result<PointResult> {
    if links.is_empty() {
        return Err(Error::Config("no links to simulate".into()));
    }
    let spreading = cfg.spreading()?;
    let m = spreading.m();
    let nu = cfg.n_devices;
    let mut demod = Demodulator::new(spreading);
    let mut errors = vec![0u64; nu];
    let mut flags = vec![false; cfg.trials * nu];
    for trial in 0..cfg.trials {
        let t = trial % links.len();
        let link = &links[t];
        let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::TRIAL, &[t as u64, trial as u64]));
        let symbols: Vec<usize> = (0..nu).map(|_| rng.random_range(0..m)).collect();
        let channels = sample_channels_with(&link.topology, &mut rng)?;
        let rx = synthesize_received_with(&link.topology, &channels, &link.powers, &symbols, demod.config(), &mut rng)?;
        let bins = demod.process(&rx)?;
        let detected = match (&link.calibration, cfg.detector) {
            (Some(cal), DetectorMode::TwoStage) => {
                two_stage_detect_with(&bins, &link.topology, &link.powers, cal.p_th, cfg.surjective)
            }
            _ => ml_detect(&bins, &link.topology, &link.powers),
        }
        .map_err(|e| Error::Numeric(format!("trial {trial} at {snr_db} dB: {e}")))?;
        for g in 0..nu {
            if detected.m_hat.m[g] != symbols[g] {
                errors[g] += 1;
                flags[trial * nu + g] = true;
            }
        }
    }
    Ok(PointResult {
        record: SERRecord::new(cfg, snr_db, errors),
        flags,
    })
}

pub fn run_ser_experiment(cfg: &ExperimentConfig) -> Result<Vec<SERRecord>> {
    cfg.validate()?;
    let topologies = cfg.topologies()?;
    cfg.snr_db
        .iter()
        .map(|&snr| {
            let rec = run_ser_point(cfg, &topologies, snr)?.record;
            log::info!("{} dB: average SER {:.3e}", snr, rec.ser_avg);
            Ok(rec)
        })
        .collect()
}

/// Runs the experiment once per axis value with everything else, including
/// seeds, held fixed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SERRecord>> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("sweep values must be a non-empty list of finite numbers".into()));
    }
    let mut out = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::NAntennas => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("antenna count {v} is not a positive integer")));
                }
                c.n_antennas = v as usize;
            }
            SweepAxis::Alpha => c.alpha = v,
            SweepAxis::Snr => c.snr_db = vec![v],
        }
        out.extend(run_ser_experiment(&c)?);
    }
    Ok(out)
}

/// Writes SER records as CSV; the `errors_g*` columns span the largest
/// device count among the records.
pub fn write_ser_csv<W: Write>(records: &[SERRecord], mut out: W) -> Result<()> {
    let width = records.iter().map(|r| r.n_u).max().unwrap_or(0);
    let mut header = String::from("experiment_id,snr_db,n_u,n_t,alpha,detector,power_control,trials");
    for g in 1..=width {
        header.push_str(&format!(",errors_g{g}"));
    }
    header.push_str(",ser_avg,ser_best,ser_worst,seed");
    writeln!(out, "{header}")?;
    for r in records {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            r.experiment_id, r.snr_db, r.n_u, r.n_t, r.alpha, r.detector, r.power_control, r.trials
        );
        for g in 0..width {
            row.push(',');
            if let Some(e) = r.errors.get(g) {
                row.push_str(&e.to_string());
            }
        }
        row.push_str(&format!(",{},{},{},{}", r.ser_avg, r.ser_best, r.ser_worst, r.seed));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// `(p_th, P_error^(UB))` on `n_points` evenly spaced interior points of the
/// calibration bracket.
pub fn bound_curve(stats: &ActiveBinStats, n_points: usize) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = threshold_bracket(stats)?;
    let step = (hi - lo) / (n_points + 1) as f64;
    (1..=n_points)
        .map(|i| {
            let x = lo + i as f64 * step;
            Ok((x, error_upper_bound(x, stats)?))
        })
        .collect()
}

pub fn write_bound_csv<W: Write>(curve: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "p_th,p_error_ub")?;
    for (x, v) in curve {
        writeln!(out, "{x:e},{v:e}")?;
    }
    Ok(())
}

/// Exact one-sided sign test on discordant pairs of error indicators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    /// Pairs where only the baseline erred.
    pub baseline_only: u64,
    /// Pairs where only the treatment erred.
    pub treatment_only: u64,
    /// `P(X ≥ baseline_only)` for `X ~ Bin(discordant, 1/2)`.
    pub p_value: f64,
}

pub fn paired_sign_test(baseline: &[bool], treatment: &[bool]) -> Result<PairedTest> {
    if baseline.len() != treatment.len() {
        return Err(Error::Domain("paired samples differ in length".into()));
    }
    let baseline_only = baseline.iter().zip(treatment).filter(|(a, b)| **a && !**b).count() as u64;
    let treatment_only = baseline.iter().zip(treatment).filter(|(a, b)| !**a && **b).count() as u64;
    let n = baseline_only + treatment_only;
    let p_value = if n == 0 || baseline_only == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).map_err(|e| Error::Numeric(e.to_string()))?;
        dist.sf(baseline_only - 1)
    };
    Ok(PairedTest {
        baseline_only,
        treatment_only,
        p_value,
    })
}

/// Reference SNR at which an SER curve crosses `target`, by linear
/// interpolation of `log10(SER)` between the bracketing grid points.
pub fn snr_at_ser(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y0 >= target && y1 <= target && y0 > 0.0 {
            if y1 <= 0.0 {
                return Some(x1);
            }
            let (l0, l1, lt) = (y0.log10(), y1.log10(), target.log10());
            if l0 == l1 {
                return Some(x0);
            }
            return Some(x0 + (lt - l0) / (l1 - l0) * (x1 - x0));
        }
    }
    None
}
