//! Non-coherent multi-user detection: exhaustive ML and the two-stage
//! threshold-then-search detector, plus the combinatorics and error bound
//! used to pick the stage-1 threshold.

use serde::{Deserialize, Serialize};

use crate::channel::NetworkTopology;
use crate::css_phy::BinPowerTensor;
use crate::error::{domain, Error, Result};
use crate::stats::{
    chi2_sum_cdf, chi2_sum_sf, gaussian_pdf, gaussian_sf, golden_section_min,
    integrate_semi_infinite, ActiveBinStats, GaussianEnvelope,
};

/// Default cap on the number of tuples the exhaustive detector will score.
pub const DEFAULT_ML_BUDGET: u128 = 1 << 20;

const R_FLOOR: f64 = 1e-300;

/// One symbol index per device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateTuple {
    pub m: Vec<usize>,
    /// Distinct symbols of `m`, ascending.
    pub active_support: Vec<usize>,
}

impl CandidateTuple {
    pub fn new(m: Vec<usize>) -> Self {
        let mut active_support = m.clone();
        active_support.sort_unstable();
        active_support.dedup();
        Self { m, active_support }
    }

    pub fn n_devices(&self) -> usize {
        self.m.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub m_hat: CandidateTuple,
    /// Bins the detector considered active, ascending. For ML this is the
    /// support of `m_hat`.
    pub active_bins: Vec<usize>,
    pub loglik: f64,
    /// Number of bins whose fused power exceeded the threshold (0 for ML).
    pub stage1_bin_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCalibration {
    pub p_th: f64,
    pub p_error_ub: f64,
    pub stats: ActiveBinStats,
}

fn check_inputs(bins: &BinPowerTensor, topology: &NetworkTopology, powers: &[f64]) -> Result<()> {
    if bins.n_gateways != topology.n_gateways() {
        return domain("bin tensor and topology disagree on the gateway count");
    }
    if bins.n_antennas != topology.n_antennas() {
        return domain("bin tensor and topology disagree on the antenna count");
    }
    if powers.len() != topology.n_devices() {
        return domain("power vector length does not match the device count");
    }
    Ok(())
}

fn check_tuple(m: &CandidateTuple, n_devices: usize, n_bins: usize) -> Result<()> {
    if m.m.len() != n_devices {
        return domain(format!("tuple has {} entries, expected {n_devices}", m.m.len()));
    }
    if let Some(&s) = m.m.iter().find(|&&s| s >= n_bins) {
        return domain(format!("symbol {s} out of range for M = {n_bins}"));
    }
    Ok(())
}

/// Expected per-gateway bin powers `ρ[ℓ][k]` under the hypothesis `m`.
pub fn rho(
    m: &CandidateTuple,
    topology: &NetworkTopology,
    powers: &[f64],
    n_bins: usize,
) -> Result<Vec<Vec<f64>>> {
    check_tuple(m, topology.n_devices(), n_bins)?;
    if powers.len() != topology.n_devices() {
        return domain("power vector length does not match the device count");
    }
    let sigma2 = topology.sigma2;
    let mut out = vec![vec![sigma2; n_bins]; topology.n_gateways()];
    for (gw, row) in out.iter_mut().enumerate() {
        for (g, &k) in m.m.iter().enumerate() {
            row[k] += n_bins as f64 * topology.beta(g, gw) * powers[g];
        }
    }
    Ok(out)
}

#[inline]
fn term(r: f64, rho: f64, nt: f64) -> f64 {
    let r = r.max(R_FLOOR);
    (nt - 1.0) * r.ln() - nt * rho.ln() - r / rho
}

/// Log-likelihood of `m` given the observed bin powers, up to a constant.
///
/// Sums over every bin, or only over `restrict_to` when given.
pub fn loglik(
    m: &CandidateTuple,
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
    restrict_to: Option<&[usize]>,
) -> Result<f64> {
    check_inputs(bins, topology, powers)?;
    let rho = rho(m, topology, powers, bins.m)?;
    let nt = bins.n_antennas as f64;
    let mut total = 0.0;
    for (gw, rho_row) in rho.iter().enumerate() {
        let r_row = bins.gateway_row(gw);
        match restrict_to {
            Some(set) => {
                for &k in set {
                    if k >= bins.m {
                        return domain(format!("bin {k} out of range"));
                    }
                    total += term(r_row[k], rho_row[k], nt);
                }
            }
            None => {
                for (r, p) in r_row.iter().zip(rho_row) {
                    total += term(*r, *p, nt);
                }
            }
        }
    }
    Ok(total)
}

/// Scores tuples by their difference from the all-noise hypothesis, touching
/// only the bins the tuple occupies.
struct DeltaScorer<'a> {
    bins: &'a BinPowerTensor,
    /// `M β_{g,ℓ} p_g`, indexed `[g][ℓ]`.
    signal: Vec<Vec<f64>>,
    sigma2: f64,
    nt: f64,
    /// Per-bin gain of placing a single device there, `[g][k]`.
    single: Vec<Vec<f64>>,
    rho_buf: Vec<f64>,
}

impl<'a> DeltaScorer<'a> {
    fn new(bins: &'a BinPowerTensor, topology: &NetworkTopology, powers: &[f64]) -> Self {
        let (l, nu, m) = (bins.n_gateways, topology.n_devices(), bins.m);
        let signal: Vec<Vec<f64>> = (0..nu)
            .map(|g| {
                (0..l)
                    .map(|gw| m as f64 * topology.beta(g, gw) * powers[g])
                    .collect()
            })
            .collect();
        let mut scorer = Self {
            bins,
            signal,
            sigma2: topology.sigma2,
            nt: bins.n_antennas as f64,
            single: Vec::new(),
            rho_buf: vec![0.0; l],
        };
        let single = (0..nu)
            .map(|g| {
                (0..m)
                    .map(|k| {
                        scorer.rho_buf.clone_from(&scorer.signal[g]);
                        scorer.bin_gain(k)
                    })
                    .collect()
            })
            .collect();
        scorer.single = single;
        scorer
    }

    /// `Σ_ℓ [term(r, ρ) − term(r, σ²)]` for bin `k`, with the signal part of
    /// `ρ` taken from `rho_buf`.
    fn bin_gain(&self, k: usize) -> f64 {
        let mut gain = 0.0;
        for (gw, s) in self.rho_buf.iter().enumerate() {
            let r = self.bins.r(gw, k).max(R_FLOOR);
            let rho = s + self.sigma2;
            gain += -self.nt * (rho / self.sigma2).ln() - r / rho + r / self.sigma2;
        }
        gain
    }

    fn score(&mut self, m: &[usize]) -> f64 {
        let nu = m.len();
        let mut total = 0.0;
        for g in 0..nu {
            let k = m[g];
            if m[..g].contains(&k) {
                continue;
            }
            if !m[g + 1..].contains(&k) {
                total += self.single[g][k];
                continue;
            }
            self.rho_buf.iter_mut().for_each(|v| *v = 0.0);
            for (h, &kh) in m.iter().enumerate().skip(g) {
                if kh == k {
                    for (acc, s) in self.rho_buf.iter_mut().zip(&self.signal[h]) {
                        *acc += s;
                    }
                }
            }
            total += self.bin_gain(k);
        }
        total
    }

    fn noise_only(&self) -> f64 {
        let mut base = 0.0;
        for &r in &self.bins.r {
            base += term(r, self.sigma2, self.nt);
        }
        base
    }
}

/// Advances `digits` (base `radix`) to the next tuple in lexicographic order.
/// Returns `false` after the last tuple.
fn next_tuple(digits: &mut [usize], radix: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

/// Exhaustive ML detection over all `M^{N_u}` tuples.
pub fn ml_detect(
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
) -> Result<DetectionResult> {
    ml_detect_with_budget(bins, topology, powers, DEFAULT_ML_BUDGET)
}

pub fn ml_detect_with_budget(
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
    budget: u128,
) -> Result<DetectionResult> {
    check_inputs(bins, topology, powers)?;
    let nu = topology.n_devices();
    let size = (bins.m as u128).checked_pow(nu as u32);
    match size {
        Some(s) if s <= budget => {}
        _ => {
            return Err(Error::Capability(format!(
                "exhaustive ML needs M^N_u = {}^{nu} tuples, above the budget of {budget}; \
                 use the two-stage detector",
                bins.m
            )))
        }
    }
    let mut scorer = DeltaScorer::new(bins, topology, powers);
    let mut digits = vec![0usize; nu];
    let mut best = digits.clone();
    let mut best_score = f64::NEG_INFINITY;
    loop {
        let s = scorer.score(&digits);
        if s > best_score {
            best_score = s;
            best.clone_from(&digits);
        }
        if !next_tuple(&mut digits, bins.m) {
            break;
        }
    }
    let m_hat = CandidateTuple::new(best);
    Ok(DetectionResult {
        active_bins: m_hat.active_support.clone(),
        loglik: scorer.noise_only() + best_score,
        m_hat,
        stage1_bin_count: 0,
    })
}

/// Single-device ML rule: `argmax_k Σ_ℓ (1/σ² − 1/ρ_ℓ) r_{ℓ,k}`.
pub fn max_bin_detect(
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
) -> Result<usize> {
    check_inputs(bins, topology, powers)?;
    if topology.n_devices() != 1 {
        return domain("max-bin detection needs exactly one device");
    }
    let sigma2 = topology.sigma2;
    let weights: Vec<f64> = (0..bins.n_gateways)
        .map(|gw| {
            let rho = bins.m as f64 * topology.beta(0, gw) * powers[0] + sigma2;
            1.0 / sigma2 - 1.0 / rho
        })
        .collect();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..bins.m {
        let s: f64 = weights.iter().enumerate().map(|(gw, w)| w * bins.r(gw, k)).sum();
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    Ok(best)
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc.checked_mul(n - j)? / (j + 1);
    }
    Some(acc)
}

fn overflow() -> Error {
    Error::Capability("tuple count overflows 128-bit integers".into())
}

/// Number of `N_u`-tuples over a fixed set of `i` symbols that use every one
/// of them.
pub fn count_tuples(n_u: usize, i: usize) -> Result<u128> {
    if i == 0 || i > n_u {
        return domain(format!("support size {i} must lie in [1, {n_u}]"));
    }
    let mut c: Vec<u128> = Vec::with_capacity(i);
    for j in 1..=i as u128 {
        let mut v = j.checked_pow(n_u as u32).ok_or_else(overflow)?;
        for (k, ck) in c.iter().enumerate() {
            let k = k as u128 + 1;
            let sub = ck
                .checked_mul(binomial(j, k).ok_or_else(overflow)?)
                .ok_or_else(overflow)?;
            v -= sub;
        }
        c.push(v);
    }
    Ok(c[i - 1])
}

/// Probability that `n_u` uniform symbols over `M` bins occupy exactly `i`
/// distinct bins.
pub fn prob_support_size(m: usize, n_u: usize, i: usize) -> Result<f64> {
    if n_u == 0 || n_u > m {
        return domain(format!("need 1 <= N_u <= M, got N_u = {n_u}, M = {m}"));
    }
    let c = count_tuples(n_u, i)?;
    let exact = binomial(m as u128, i as u128)
        .and_then(|b| b.checked_mul(c))
        .zip((m as u128).checked_pow(n_u as u32));
    if let Some((num, den)) = exact {
        return Ok(num as f64 / den as f64);
    }
    let ln_binom = statrs::function::factorial::ln_binomial(m as u64, i as u64);
    Ok(((c as f64).ln() + ln_binom - n_u as f64 * (m as f64).ln()).exp())
}

/// Upper bound on the probability that stage 1 misidentifies the active
/// bins, at threshold `p_th`.
pub fn error_upper_bound(p_th: f64, stats: &ActiveBinStats) -> Result<f64> {
    error_upper_bound_tol(p_th, stats, 1e-12)
}

pub fn error_upper_bound_tol(p_th: f64, stats: &ActiveBinStats, tol: f64) -> Result<f64> {
    if !(p_th.is_finite() && p_th > 0.0) {
        return domain(format!("threshold must be positive, got {p_th}"));
    }
    let nu = stats.n_devices();
    let m = stats.m;
    if nu == 0 || nu > m {
        return domain("need 1 <= N_u <= M");
    }
    // Work in units of σ² so every quantity is O(1).
    let s = stats.noise;
    let l = stats.n_gateways as f64;
    let nt = stats.n_antennas as f64;
    let u0 = p_th / s;
    let mean: Vec<f64> = stats.mu.iter().map(|mu| l * mu / s).collect();
    let var: Vec<f64> = stats
        .sigma2_g
        .iter()
        .map(|v| l * v / (nt * s * s))
        .collect();
    let shape = (stats.n_antennas * stats.n_gateways) as u32;
    let scale = 1.0 / nt;
    let inactive = (m - nu) as f64;

    let mut p_full = 0.0;
    for g in 0..nu {
        let integrand = |u: f64| {
            let mut v = gaussian_pdf(u, mean[g], var[g]);
            if v == 0.0 {
                return 0.0;
            }
            if inactive > 0.0 {
                let tail = chi2_sum_sf(u.max(0.0), shape, scale).unwrap_or(f64::NAN);
                v *= (inactive * (-tail).ln_1p()).exp();
            }
            for q in (0..nu).filter(|&q| q != g) {
                v *= gaussian_sf(u, mean[q], var[q]);
            }
            v
        };
        let env = GaussianEnvelope {
            mean: mean[g],
            std: var[g].sqrt(),
        };
        p_full += integrate_semi_infinite(integrand, u0, env, tol / nu as f64)?;
    }
    let mut total = p_full.clamp(0.0, 1.0) * prob_support_size(m, nu, nu)?;

    let mut order: Vec<usize> = (0..nu).collect();
    order.sort_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(a.cmp(&b)));
    let ln_f0 = chi2_sum_cdf(u0, shape, scale)?.ln();
    let mut exceed = 1.0;
    for i in 1..nu {
        let q = order[i - 1];
        exceed *= gaussian_sf(u0, mean[q], var[q]);
        let p_lb = ((m - i) as f64 * ln_f0).exp() * exceed;
        total += p_lb * prob_support_size(m, nu, i)?;
    }
    Ok((1.0 - total).clamp(0.0, 1.0))
}

/// Search interval for the stage-1 threshold.
pub fn threshold_bracket(stats: &ActiveBinStats) -> Result<(f64, f64)> {
    let l = stats.n_gateways as f64;
    let nt = stats.n_antennas as f64;
    let lo = l * stats.noise;
    let hi = stats
        .mu
        .iter()
        .zip(&stats.sigma2_g)
        .map(|(mu, v)| l * mu + 10.0 * (l * v / nt).sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let max_mu = stats.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max_mu > stats.noise * (1.0 + 1e-12)) || !(hi > lo) {
        return domain("no device contributes signal power; the threshold is undefined");
    }
    Ok((lo, hi))
}

const PRESCAN_POINTS: usize = 64;
const PRESCAN_DECADES: f64 = 6.0;

/// Threshold minimizing [`error_upper_bound`].
///
/// A uniform pre-scan of the bracket locates the basin (the bound is flat far
/// below the active-bin means), golden-section search refines it, and the
/// better of the two candidates is returned.
pub fn calibrate_threshold(stats: &ActiveBinStats) -> Result<ThresholdCalibration> {
    let (lo, hi) = threshold_bracket(stats)?;
    let width = hi - lo;
    // Uniform cells plus geometric ones packed against the noise floor, where
    // the optimum sits when one device dwarfs the others.
    let mut grid: Vec<f64> = (0..=PRESCAN_POINTS + 1)
        .map(|i| lo + width * i as f64 / (PRESCAN_POINTS + 1) as f64)
        .chain((0..PRESCAN_POINTS).map(|j| {
            lo + width * 10f64.powf(-PRESCAN_DECADES * (1.0 - j as f64 / PRESCAN_POINTS as f64))
        }))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best_i = 1;
    let mut best_v = f64::INFINITY;
    for i in 1..grid.len() - 1 {
        let v = error_upper_bound(grid[i], stats)?;
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let best_x = grid[best_i];
    let a = grid[best_i - 1];
    let b = grid[best_i + 1];
    let mut failure = None;
    let golden = golden_section_min(
        |x| match error_upper_bound(x, stats) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        a,
        b,
        (b - a) * 1e-9,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let golden_v = error_upper_bound(golden.x, stats)?;
    let (p_th, p_error_ub) = if golden_v <= best_v {
        (golden.x, golden_v)
    } else {
        log::debug!("golden search did not improve on the pre-scan; using the grid minimum");
        (best_x, best_v)
    };
    Ok(ThresholdCalibration {
        p_th,
        p_error_ub,
        stats: stats.clone(),
    })
}

/// Bins whose fused power exceeds `p_th`, capped to the `n_u` strongest.
/// Falls back to the single strongest bin when none exceed. Ascending order.
pub fn stage1_identify(bins: &BinPowerTensor, p_th: f64, n_u: usize) -> Vec<usize> {
    let mut above: Vec<usize> = (0..bins.m).filter(|&k| bins.upsilon[k] > p_th).collect();
    if above.is_empty() {
        let mut best = 0;
        for k in 1..bins.m {
            if bins.upsilon[k] > bins.upsilon[best] {
                best = k;
            }
        }
        return vec![best];
    }
    if above.len() > n_u {
        above.sort_by(|&a, &b| bins.upsilon[b].total_cmp(&bins.upsilon[a]).then(a.cmp(&b)));
        above.truncate(n_u);
        above.sort_unstable();
    }
    above
}

/// Candidate tuples built from the identified bins, in lexicographic order.
/// With `surjective`, only tuples that use every identified bin are kept.
pub fn enumerate_candidates(
    active: &[usize],
    n_u: usize,
    surjective: bool,
) -> Result<Vec<CandidateTuple>> {
    if active.is_empty() || active.len() > n_u {
        return domain(format!(
            "active set size {} must lie in [1, {n_u}]",
            active.len()
        ));
    }
    let mut support = active.to_vec();
    support.sort_unstable();
    support.dedup();
    if support.len() != active.len() {
        return domain("active set contains duplicate bins");
    }
    let radix = support.len();
    let expected = if surjective {
        count_tuples(n_u, radix)?
    } else {
        (radix as u128).checked_pow(n_u as u32).ok_or_else(overflow)?
    };
    if expected > DEFAULT_ML_BUDGET {
        return Err(Error::Capability(format!(
            "{expected} candidates exceed the enumeration budget"
        )));
    }
    let mut out = Vec::with_capacity(expected as usize);
    let mut digits = vec![0usize; n_u];
    let mut seen = vec![false; radix];
    loop {
        let keep = !surjective || {
            seen.iter_mut().for_each(|s| *s = false);
            digits.iter().for_each(|&d| seen[d] = true);
            seen.iter().all(|&s| s)
        };
        if keep {
            out.push(CandidateTuple::new(
                digits.iter().map(|&d| support[d]).collect(),
            ));
        }
        if !next_tuple(&mut digits, radix) {
            break;
        }
    }
    Ok(out)
}

/// Stage-1 thresholding followed by a likelihood search restricted to the
/// identified bins.
pub fn two_stage_detect(
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
    calibration: &ThresholdCalibration,
) -> Result<DetectionResult> {
    two_stage_detect_with(bins, topology, powers, calibration.p_th, true)
}

pub fn two_stage_detect_with(
    bins: &BinPowerTensor,
    topology: &NetworkTopology,
    powers: &[f64],
    p_th: f64,
    surjective: bool,
) -> Result<DetectionResult> {
    check_inputs(bins, topology, powers)?;
    let nu = topology.n_devices();
    let active = stage1_identify(bins, p_th, nu);
    let exceed = bins.upsilon.iter().filter(|&&u| u > p_th).count();
    let candidates = enumerate_candidates(&active, nu, surjective)?;
    let mut best: Option<(f64, CandidateTuple)> = None;
    for c in candidates {
        let s = loglik(&c, bins, topology, powers, Some(&active))?;
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, c));
        }
    }
    let (loglik, m_hat) = best.expect("at least one candidate");
    Ok(DetectionResult {
        m_hat,
        active_bins: active,
        loglik,
        stage1_bin_count: exceed,
    })
}
