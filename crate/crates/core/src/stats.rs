//! Special functions, quadrature and scalar search used by the stage-1
//! threshold calibration.

use statrs::function::factorial::ln_factorial;

use crate::channel::NetworkTopology;
use crate::error::{domain, Error, Result};

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `P(X > x)` for a Gaussian with the given mean and variance, via `erfc`
/// so that the far right tail does not cancel to zero.
pub fn gaussian_sf(x: f64, mean: f64, variance: f64) -> f64 {
    0.5 * erfc((x - mean) / (2.0 * variance).sqrt())
}

pub fn gaussian_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    (-d * d / (2.0 * variance)).exp() / (std::f64::consts::TAU * variance).sqrt()
}

fn check_gamma_args(u: f64, shape: u32, scale: f64) -> Result<()> {
    if u.is_nan() || u < 0.0 {
        return domain(format!("gamma CDF argument must be non-negative, got {u}"));
    }
    if shape == 0 {
        return domain("gamma shape must be at least 1");
    }
    if !(scale.is_finite() && scale > 0.0) {
        return domain("gamma scale must be positive");
    }
    Ok(())
}

/// `Σ_{q ≥ a} e^{-x} x^q / q!` for `x < a`, summed relative to the leading term.
fn poisson_upper_sum(x: f64, a: u32) -> f64 {
    let log_lead = -x + a as f64 * x.ln() - ln_factorial(a as u64);
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut q = a as f64;
    loop {
        q += 1.0;
        term *= x / q;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    (log_lead + sum.ln()).exp()
}

/// `Σ_{q < a} e^{-x} x^q / q!` for `x ≥ a`, summed downward from `q = a-1`.
fn poisson_lower_sum(x: f64, a: u32) -> f64 {
    let top = a - 1;
    let log_lead = -x + top as f64 * x.ln() - ln_factorial(top as u64);
    let mut term = 1.0;
    let mut sum = 1.0;
    for q in (1..=top).rev() {
        term *= q as f64 / x;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    (log_lead + sum.ln()).exp()
}

/// CDF of a sum of `shape` i.i.d. exponentials with mean `scale`
/// (a Gamma(shape, scale) variable), i.e. the regularized lower incomplete
/// gamma `P(shape, u/scale)`.
///
/// Equals `1 − e^{−x} Σ_{q<shape} x^q/q!`; whichever tail is smaller is summed
/// in the log domain so neither side cancels.
pub fn chi2_sum_cdf(u: f64, shape: u32, scale: f64) -> Result<f64> {
    check_gamma_args(u, shape, scale)?;
    let x = u / scale;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(if x < shape as f64 {
        poisson_upper_sum(x, shape)
    } else {
        1.0 - poisson_lower_sum(x, shape)
    })
}

/// Complement of [`chi2_sum_cdf`], accurate when it is tiny.
pub fn chi2_sum_sf(u: f64, shape: u32, scale: f64) -> Result<f64> {
    check_gamma_args(u, shape, scale)?;
    let x = u / scale;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(if x < shape as f64 {
        1.0 - poisson_upper_sum(x, shape)
    } else {
        poisson_lower_sum(x, shape)
    })
}

/// Location and width of the Gaussian factor that controls an integrand's
/// right tail.
#[derive(Debug, Clone, Copy)]
pub struct GaussianEnvelope {
    pub mean: f64,
    pub std: f64,
}

// 15-point Kronrod / 7-point Gauss nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_PANELS: usize = 4_000;

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Panel {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Adaptive Gauss–Kronrod quadrature on `[a, b]` starting from the given
/// breakpoints, refining the worst panel until the summed error estimate is
/// at most `tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: F, breakpoints: &[f64], tol: f64) -> Result<f64> {
    if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
        return domain("breakpoints must be strictly increasing");
    }
    let mut panels: Vec<Panel> = breakpoints
        .windows(2)
        .map(|w| gauss_kronrod(&f, w[0], w[1]))
        .collect();
    loop {
        let total_err: f64 = panels.iter().map(|p| p.error).sum();
        if total_err <= tol {
            return Ok(panels.iter().map(|p| p.value).sum());
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::Numeric(format!(
                "quadrature did not converge: error estimate {total_err:e} > {tol:e}"
            )));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("non-empty");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            return Err(Error::Numeric("quadrature panel collapsed".into()));
        }
        panels.push(gauss_kronrod(&f, p.a, mid));
        panels.push(gauss_kronrod(&f, mid, p.b));
    }
}

/// `∫_lower^∞ f`, for integrands whose right tail is dominated by the given
/// Gaussian envelope.
///
/// The upper limit is cut where the envelope drops below `tol` of its peak,
/// and never closer than ten standard deviations past the mean.
pub fn integrate_semi_infinite<F: Fn(f64) -> f64>(
    f: F,
    lower: f64,
    envelope: GaussianEnvelope,
    tol: f64,
) -> Result<f64> {
    if !(lower.is_finite() && envelope.mean.is_finite() && envelope.std > 0.0 && tol > 0.0) {
        return domain("invalid semi-infinite integration arguments");
    }
    let k = (2.0 * (1.0 / tol).ln()).sqrt().max(10.0);
    let mut upper = envelope.mean + k * envelope.std;
    if upper <= lower {
        upper = lower + k * envelope.std;
    }
    let mut points = vec![lower, upper];
    for s in [0.0, 1.0, 2.0, 4.0, 8.0] {
        for sign in [-1.0, 1.0] {
            let x = envelope.mean + sign * s * envelope.std;
            if x > lower && x < upper {
                points.push(x);
            }
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    integrate_adaptive(f, &points, tol)
}

pub const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy)]
pub struct GoldenResult {
    pub x: f64,
    pub evaluations: usize,
}

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
///
/// Returns the midpoint of the final bracket, whose width is at most `tol`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<GoldenResult> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return domain(format!("golden-section bracket [{lo}, {hi}] is empty"));
    }
    if !(tol > 0.0) {
        return domain("golden-section tolerance must be positive");
    }
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evaluations = 2;
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
        evaluations += 1;
    }
    Ok(GoldenResult {
        x: 0.5 * (a + b),
        evaluations,
    })
}

/// Moments of the fused power `Υ` on a bin occupied by a single device.
///
/// `mu[g] = (1/L) Σ_ℓ (Mβ_{g,ℓ}p_g + σ²)` and
/// `sigma2_g[g] = (1/L) Σ_ℓ (Mβ_{g,ℓ}p_g + σ²)²`; on such a bin `Υ` has mean
/// `L·mu[g]` and variance `L·sigma2_g[g]/N_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveBinStats {
    pub mu: Vec<f64>,
    pub sigma2_g: Vec<f64>,
    pub n_gateways: usize,
    pub n_antennas: usize,
    pub m: usize,
    pub noise: f64,
}

impl ActiveBinStats {
    pub fn new(topology: &NetworkTopology, powers: &[f64], m: usize) -> Result<Self> {
        let (l, nu) = (topology.n_gateways(), topology.n_devices());
        if powers.len() != nu {
            return domain("power vector length does not match the device count");
        }
        if powers.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return domain("transmit powers must be non-negative");
        }
        let noise = topology.sigma2;
        let mut mu = Vec::with_capacity(nu);
        let mut sigma2_g = Vec::with_capacity(nu);
        for (g, p) in powers.iter().enumerate() {
            let rho: Vec<f64> = (0..l)
                .map(|gw| m as f64 * topology.beta(g, gw) * p + noise)
                .collect();
            mu.push(rho.iter().sum::<f64>() / l as f64);
            sigma2_g.push(rho.iter().map(|r| r * r).sum::<f64>() / l as f64);
        }
        Ok(Self {
            mu,
            sigma2_g,
            n_gateways: l,
            n_antennas: topology.n_antennas(),
            m,
            noise,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.mu.len()
    }
}
