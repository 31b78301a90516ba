//! Max-min dissimilarity power control solved by successive convex
//! approximation.
//!
//! Powers are handled internally as `x = p / p_max` with per-link gains
//! `G_{g,ℓ} = Mβ_{g,ℓ}p_max/σ²`, so expected bin powers become `G x + 1` in
//! units of σ².

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::NetworkTopology;
use crate::error::{domain, Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.061;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Smallest normalized power the optimizer may assign, keeping the
/// `x / x̄` ratios of the next linearization finite.
const X_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    /// Transmit powers in mW.
    pub p: Vec<f64>,
    pub p_max: f64,
    /// Minimum average received SNR (linear, includes the despreading gain).
    pub epsilon: f64,
}

impl PowerAllocation {
    /// Per-device slack of the average-SNR floor,
    /// `(1/(Lσ²)) Σ_ℓ Mβ_{g,ℓ}p_g − ε`.
    pub fn snr_residuals(&self, topology: &NetworkTopology, m: usize) -> Vec<f64> {
        snr_residuals(topology, m, &self.p, self.epsilon)
    }
}

fn snr_residuals(topology: &NetworkTopology, m: usize, p: &[f64], epsilon: f64) -> Vec<f64> {
    let l = topology.n_gateways() as f64;
    p.iter()
        .enumerate()
        .map(|(g, pg)| {
            let gain: f64 = (0..topology.n_gateways())
                .map(|gw| m as f64 * topology.beta(g, gw))
                .sum();
            gain * pg / (l * topology.sigma2) - epsilon
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedBinPowerVectors {
    /// `μ̂_g[ℓ] = Mβ_{g,ℓ}p_g + σ²`.
    pub mu_single: Vec<Vec<f64>>,
    /// `((g, h), μ̂_{g,h})` for every `g < h`, with a single σ² term.
    pub mu_pair: Vec<((usize, usize), Vec<f64>)>,
}

/// Jaccard similarity `uᵀv / (‖u‖² + ‖v‖² − uᵀv)`.
pub fn jaccard(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return domain("Jaccard vectors differ in length");
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|b| b * b).sum();
    let den = uu + vv - dot;
    if !(den > 0.0) {
        return domain("Jaccard similarity of two zero vectors is undefined");
    }
    Ok(dot / den)
}

pub fn build_mu_vectors(
    topology: &NetworkTopology,
    p: &[f64],
    m: usize,
) -> Result<ExpectedBinPowerVectors> {
    let nu = topology.n_devices();
    if p.len() != nu {
        return domain("power vector length does not match the device count");
    }
    let l = topology.n_gateways();
    let sigma2 = topology.sigma2;
    let signal: Vec<Vec<f64>> = (0..nu)
        .map(|g| (0..l).map(|gw| m as f64 * topology.beta(g, gw) * p[g]).collect())
        .collect();
    let mu_single = signal
        .iter()
        .map(|s| s.iter().map(|v| v + sigma2).collect())
        .collect();
    let mut mu_pair = Vec::new();
    for g in 0..nu {
        for h in g + 1..nu {
            let v = (0..l).map(|gw| signal[g][gw] + signal[h][gw] + sigma2).collect();
            mu_pair.push(((g, h), v));
        }
    }
    Ok(ExpectedBinPowerVectors { mu_single, mu_pair })
}

/// `max_{g<h} max{J(μ̂_g, μ̂_h), J(μ̂_{g,h}, μ̂_h)}`; zero with fewer than two
/// devices.
pub fn objective_similarity(topology: &NetworkTopology, p: &[f64], m: usize) -> Result<f64> {
    let mu = build_mu_vectors(topology, p, m)?;
    let mut worst: f64 = 0.0;
    for ((g, h), pair) in &mu.mu_pair {
        worst = worst
            .max(jaccard(&mu.mu_single[*g], &mu.mu_single[*h])?)
            .max(jaccard(pair, &mu.mu_single[*h])?);
    }
    Ok(worst)
}

/// Affine minorant of `x²/y` at `(x̄, ȳ)`: `(2x̄/ȳ)x − (x̄²/ȳ²)y`.
pub fn quad_over_lin_minorant(x: f64, y: f64, x_bar: f64, y_bar: f64) -> f64 {
    2.0 * x_bar / y_bar * x - x_bar * x_bar / (y_bar * y_bar) * y
}

/// Convex majorant of `xy` at `(x̄, ȳ)`: `(x̄ȳ/4)(x/x̄ + y/ȳ)²`.
pub fn product_majorant(x: f64, y: f64, x_bar: f64, y_bar: f64) -> f64 {
    let s = x / x_bar + y / y_bar;
    0.25 * x_bar * y_bar * s * s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `J(μ̂_g, μ̂_h)^{-1} ≥ λ`.
    Distinct,
    /// `α`-scaled `J(μ̂_{g,h}, μ̂_h)^{-1} ≥ λ`.
    Collision,
}

/// Convexified similarity constraint for one device pair.
///
/// With `u, v` the two bin-power vectors (units of σ²) the exact constraint is
/// `Σ_ℓ θ_ℓ² / (λ+3) ≥ uᵀv` where `θ = s(u+v)` and `s` is 1 or `α`. The
/// left side is replaced by its affine minorant in `(θ, λ+3)` and the bilinear
/// part of `uᵀv` by [`product_majorant`], both taken at the expansion point.
#[derive(Debug, Clone)]
pub struct SCAConstraint {
    pub g: usize,
    pub h: usize,
    pub kind: ConstraintKind,
    /// `θ_ℓ(x) = scale·(coef_g[ℓ] x_g + coef_h[ℓ] x_h + 2)`.
    scale: f64,
    coef_g: Vec<f64>,
    coef_h: Vec<f64>,
    /// `uᵀv = c·x_g x_h + d·x_h² + e_g x_g + e_h x_h + L`.
    c: f64,
    d: f64,
    e_g: f64,
    e_h: f64,
    n_links: f64,
    x_bar: [f64; 2],
    theta_bar: Vec<f64>,
    y_bar: f64,
}

impl SCAConstraint {
    fn new(
        gains: &[Vec<f64>],
        g: usize,
        h: usize,
        kind: ConstraintKind,
        alpha: f64,
        x_prev: &[f64],
        lambda_prev: f64,
    ) -> Self {
        let (gg, gh) = (&gains[g], &gains[h]);
        let c: f64 = gg.iter().zip(gh).map(|(a, b)| a * b).sum();
        let sum_g: f64 = gg.iter().sum();
        let sum_h: f64 = gh.iter().sum();
        let (scale, coef_h, d, e_h) = match kind {
            ConstraintKind::Distinct => (1.0, gh.clone(), 0.0, sum_h),
            ConstraintKind::Collision => (
                alpha,
                gh.iter().map(|v| 2.0 * v).collect(),
                gh.iter().map(|v| v * v).sum(),
                2.0 * sum_h,
            ),
        };
        let mut con = Self {
            g,
            h,
            kind,
            scale,
            coef_g: gg.clone(),
            coef_h,
            c,
            d,
            e_g: sum_g,
            e_h,
            n_links: gg.len() as f64,
            x_bar: [x_prev[g], x_prev[h]],
            theta_bar: Vec::new(),
            y_bar: lambda_prev + 3.0,
        };
        con.theta_bar = con.theta(x_prev);
        con
    }

    pub fn theta(&self, x: &[f64]) -> Vec<f64> {
        let (xg, xh) = (x[self.g], x[self.h]);
        self.coef_g
            .iter()
            .zip(&self.coef_h)
            .map(|(a, b)| self.scale * (a * xg + b * xh + 2.0))
            .collect()
    }

    /// `Σ_ℓ θ_ℓ(x)² / (λ+3)`.
    pub fn lhs_exact(&self, x: &[f64], lambda: f64) -> f64 {
        self.theta(x).iter().map(|t| t * t).sum::<f64>() / (lambda + 3.0)
    }

    pub fn lhs_surrogate(&self, x: &[f64], lambda: f64) -> f64 {
        self.theta(x)
            .iter()
            .zip(&self.theta_bar)
            .map(|(t, tb)| quad_over_lin_minorant(*t, lambda + 3.0, *tb, self.y_bar))
            .sum()
    }

    /// `uᵀv` at `x`.
    pub fn rhs_exact(&self, x: &[f64]) -> f64 {
        let (xg, xh) = (x[self.g], x[self.h]);
        self.c * xg * xh + self.d * xh * xh + self.e_g * xg + self.e_h * xh + self.n_links
    }

    pub fn rhs_surrogate(&self, x: &[f64]) -> f64 {
        let (xg, xh) = (x[self.g], x[self.h]);
        self.c * product_majorant(xg, xh, self.x_bar[0], self.x_bar[1])
            + self.d * xh * xh
            + self.e_g * xg
            + self.e_h * xh
            + self.n_links
    }

    /// Modeled inverse similarity, `Σθ²/uᵀv − 3`.
    pub fn exact_lambda(&self, x: &[f64]) -> f64 {
        self.theta(x).iter().map(|t| t * t).sum::<f64>() / self.rhs_exact(x) - 3.0
    }

    fn theta_bar_sq(&self) -> f64 {
        self.theta_bar.iter().map(|t| t * t).sum()
    }

    /// Largest `λ` the convexified constraint admits at `x` (concave in `x`).
    pub fn phi(&self, x: &[f64]) -> f64 {
        let cross: f64 = self
            .theta(x)
            .iter()
            .zip(&self.theta_bar)
            .map(|(t, tb)| t * tb)
            .sum();
        let y = self.y_bar;
        (2.0 * cross / y - self.rhs_surrogate(x)) * y * y / self.theta_bar_sq() - 3.0
    }

    /// Gradient and Hessian of [`Self::phi`] with respect to `(x_g, x_h)`.
    fn phi_derivatives(&self, x: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
        let (xg, xh) = (x[self.g], x[self.h]);
        let [bg, bh] = self.x_bar;
        let k = self.y_bar * self.y_bar / self.theta_bar_sq();
        let dcross_g: f64 = self.theta_bar.iter().zip(&self.coef_g).map(|(t, a)| t * a).sum();
        let dcross_h: f64 = self.theta_bar.iter().zip(&self.coef_h).map(|(t, b)| t * b).sum();
        let qgg = 0.25 * self.c * bh / bg;
        let qgh = 0.25 * self.c;
        let qhh = 0.25 * self.c * bg / bh + self.d;
        let dr_g = 2.0 * qgg * xg + 2.0 * qgh * xh + self.e_g;
        let dr_h = 2.0 * qgh * xg + 2.0 * qhh * xh + self.e_h;
        let two_over_y = 2.0 * self.scale / self.y_bar;
        let grad = [
            k * (two_over_y * dcross_g - dr_g),
            k * (two_over_y * dcross_h - dr_h),
        ];
        let hess = [
            [-2.0 * k * qgg, -2.0 * k * qgh],
            [-2.0 * k * qgh, -2.0 * k * qhh],
        ];
        (grad, hess)
    }
}

/// Convexified constraints for every pair `g < h`, expanded at
/// `(x_prev, λ_prev)`.
///
/// `gains[g][ℓ]` are the normalized link gains `Mβ_{g,ℓ}p_max/σ²` and
/// `x_prev` the normalized powers of the previous iterate.
pub fn build_sca_constraints(
    gains: &[Vec<f64>],
    x_prev: &[f64],
    lambda_prev: f64,
    alpha: f64,
) -> Result<Vec<SCAConstraint>> {
    if x_prev.len() != gains.len() {
        return domain("expansion point length does not match the device count");
    }
    if x_prev.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return domain("expansion point must be strictly positive");
    }
    if !(lambda_prev > 0.0 && lambda_prev.is_finite()) {
        return domain("expansion value of lambda must be positive");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return domain("alpha must be positive");
    }
    let nu = gains.len();
    let mut out = Vec::with_capacity(nu * nu.saturating_sub(1));
    for g in 0..nu {
        for h in g + 1..nu {
            for kind in [ConstraintKind::Distinct, ConstraintKind::Collision] {
                out.push(SCAConstraint::new(gains, g, h, kind, alpha, x_prev, lambda_prev));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub x: Vec<f64>,
    /// `min_c φ_c(x)`.
    pub lambda: f64,
}

struct Barrier<'a> {
    cons: &'a [SCAConstraint],
    lo: &'a [f64],
    hi: &'a [f64],
    free: Vec<usize>,
    base: Vec<f64>,
}

impl Barrier<'_> {
    fn expand(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut x = self.base.clone();
        for (j, &i) in self.free.iter().enumerate() {
            x[i] = z[j];
        }
        x
    }

    fn value(&self, z: &DVector<f64>, s: f64) -> f64 {
        let t = z[self.free.len()];
        let x = self.expand(z);
        let mut f = -s * t;
        for &i in &self.free {
            let (a, b) = (x[i] - self.lo[i], self.hi[i] - x[i]);
            if !(a > 0.0 && b > 0.0) {
                return f64::INFINITY;
            }
            f -= a.ln() + b.ln();
        }
        for c in self.cons {
            let d = c.phi(&x) - t;
            if !(d > 0.0) {
                return f64::INFINITY;
            }
            f -= d.ln();
        }
        f
    }

    fn grad_hess(&self, z: &DVector<f64>, s: f64) -> (DVector<f64>, DMatrix<f64>) {
        let nf = self.free.len();
        let t = z[nf];
        let x = self.expand(z);
        let mut pos = vec![usize::MAX; x.len()];
        for (j, &i) in self.free.iter().enumerate() {
            pos[i] = j;
        }
        let mut grad = DVector::zeros(nf + 1);
        let mut hess = DMatrix::zeros(nf + 1, nf + 1);
        grad[nf] = -s;
        for (j, &i) in self.free.iter().enumerate() {
            let (a, b) = (x[i] - self.lo[i], self.hi[i] - x[i]);
            grad[j] += -1.0 / a + 1.0 / b;
            hess[(j, j)] += 1.0 / (a * a) + 1.0 / (b * b);
        }
        for c in self.cons {
            let d = c.phi(&x) - t;
            let (gphi, hphi) = c.phi_derivatives(&x);
            // ∇d in the reduced coordinates.
            let mut v = DVector::zeros(nf + 1);
            let idx = [pos[c.g], pos[c.h]];
            for (a, &ja) in idx.iter().enumerate() {
                if ja != usize::MAX {
                    v[ja] = gphi[a];
                }
            }
            v[nf] = -1.0;
            grad -= &v / d;
            hess += &v * v.transpose() / (d * d);
            for (a, &ja) in idx.iter().enumerate() {
                for (b, &jb) in idx.iter().enumerate() {
                    if ja != usize::MAX && jb != usize::MAX {
                        hess[(ja, jb)] -= hphi[a][b] / d;
                    }
                }
            }
        }
        (grad, hess)
    }

    fn newton(&self, z: &mut DVector<f64>, s: f64) {
        for _ in 0..200 {
            let (grad, mut hess) = self.grad_hess(z, s);
            let step = loop {
                if let Some(ch) = hess.clone().cholesky() {
                    break ch.solve(&(-&grad));
                }
                let bump = 1e-12 * hess.diagonal().amax().max(1.0);
                for j in 0..hess.nrows() {
                    hess[(j, j)] += bump;
                }
            };
            let decrement = -grad.dot(&step);
            if decrement / 2.0 < 1e-12 {
                return;
            }
            let f0 = self.value(z, s);
            let mut alpha = 1.0;
            loop {
                let cand = &*z + alpha * &step;
                let f = self.value(&cand, s);
                if f.is_finite() && f <= f0 - 0.25 * alpha * decrement {
                    *z = cand;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    return;
                }
            }
        }
    }
}

/// Maximizes `t` subject to `φ_c(x) ≥ t` for every constraint and
/// `lo ≤ x ≤ hi`, by a log-barrier interior-point method.
///
/// `x_start` must lie in the box; it need not be interior.
pub fn solve_sca_subproblem(
    constraints: &[SCAConstraint],
    lo: &[f64],
    hi: &[f64],
    x_start: &[f64],
) -> Result<SubproblemSolution> {
    let n = x_start.len();
    if lo.len() != n || hi.len() != n {
        return domain("box bounds do not match the variable dimension");
    }
    if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
        return Err(Error::Optimization(format!(
            "power box is empty for device {i}: [{}, {}]",
            lo[i], hi[i]
        )));
    }
    let slack = 1e-12;
    if let Some(i) = (0..n).find(|&i| x_start[i] < lo[i] - slack || x_start[i] > hi[i] + slack) {
        return Err(Error::Optimization(format!(
            "start point violates the power box for device {i}"
        )));
    }
    if constraints.is_empty() {
        return Ok(SubproblemSolution {
            x: x_start.to_vec(),
            lambda: f64::INFINITY,
        });
    }
    let free: Vec<usize> = (0..n)
        .filter(|&i| hi[i] - lo[i] > 1e-12 * hi[i].abs().max(1.0))
        .collect();
    let mut base: Vec<f64> = x_start.iter().zip(lo).zip(hi).map(|((x, l), h)| x.clamp(*l, *h)).collect();
    for i in 0..n {
        if !free.contains(&i) {
            base[i] = lo[i];
        }
    }
    let barrier = Barrier {
        cons: constraints,
        lo,
        hi,
        free: free.clone(),
        base: base.clone(),
    };
    let nf = free.len();
    let mut z = DVector::zeros(nf + 1);
    for (j, &i) in free.iter().enumerate() {
        let mid = 0.5 * (lo[i] + hi[i]);
        z[j] = base[i] + 1e-3 * (mid - base[i]);
    }
    let x0 = barrier.expand(&z);
    let phi_min = constraints.iter().map(|c| c.phi(&x0)).fold(f64::INFINITY, f64::min);
    if !phi_min.is_finite() {
        return Err(Error::Optimization("surrogate constraints are not finite at the start".into()));
    }
    z[nf] = phi_min - 1e-2 * phi_min.abs().max(1.0);

    let m = (constraints.len() + 2 * nf) as f64;
    let mut s = 1.0;
    for _ in 0..60 {
        barrier.newton(&mut z, s);
        if m / s < 1e-11 * z[nf].abs().max(1.0) {
            break;
        }
        s *= 20.0;
    }
    let x = barrier.expand(&z);
    let lambda = constraints.iter().map(|c| c.phi(&x)).fold(f64::INFINITY, f64::min);
    Ok(SubproblemSolution { x, lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerControlConfig {
    pub p_max: f64,
    /// Linear SNR floor.
    pub epsilon: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl PowerControlConfig {
    pub fn new(p_max: f64, epsilon: f64) -> Self {
        Self {
            p_max,
            epsilon,
            alpha: DEFAULT_ALPHA,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: f64,
    pub max_pair_jaccard: f64,
    /// `min_c (modeled J_c^{-1}(p) − λ)` over all pair constraints.
    pub jaccard_residual: f64,
    /// Smallest slack of `0 ≤ p ≤ p_max`, in mW.
    pub box_residual: f64,
    /// Smallest slack of the SNR floor.
    pub snr_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SCAState {
    pub iteration: usize,
    pub p_current: Vec<f64>,
    pub lambda_current: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerControlOutcome {
    pub allocation: PowerAllocation,
    pub state: SCAState,
}

/// Normalized link gains `Mβ_{g,ℓ}p_max/σ²`, indexed `[g][ℓ]`.
pub fn normalized_gains(topology: &NetworkTopology, m: usize, p_max: f64) -> Vec<Vec<f64>> {
    (0..topology.n_devices())
        .map(|g| {
            (0..topology.n_gateways())
                .map(|gw| m as f64 * topology.beta(g, gw) * p_max / topology.sigma2)
                .collect()
        })
        .collect()
}

/// Modeled `min_c J_c^{-1}` at normalized powers `x`, with the collision
/// terms scaled by `alpha`.
pub fn modeled_lambda(gains: &[Vec<f64>], x: &[f64], alpha: f64) -> Result<f64> {
    let probe = x.iter().map(|v| v.max(X_FLOOR)).collect::<Vec<_>>();
    let cons = build_sca_constraints(gains, &probe, 1.0, alpha)?;
    Ok(cons.iter().map(|c| c.exact_lambda(x)).fold(f64::INFINITY, f64::min))
}

/// Pushes past the subproblem solution along `x_new − x_prev`, projected onto
/// the box, doubling the step while the modeled objective keeps improving.
fn extrapolate(
    gains: &[Vec<f64>],
    alpha: f64,
    x_prev: &[f64],
    x_new: Vec<f64>,
    lambda_new: f64,
    lo: &[f64],
    hi: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut best_lambda = modeled_lambda(gains, &x_new, alpha)?.max(lambda_new);
    let mut best = x_new;
    let dir: Vec<f64> = best.iter().zip(x_prev).map(|(a, b)| a - b).collect();
    let mut step = 2.0;
    while step <= 1024.0 {
        let trial: Vec<f64> = (0..dir.len())
            .map(|i| (x_prev[i] + step * dir[i]).clamp(lo[i], hi[i]))
            .collect();
        let v = modeled_lambda(gains, &trial, alpha)?;
        if !(v > best_lambda) {
            break;
        }
        best = trial;
        best_lambda = v;
        step *= 2.0;
    }
    Ok((best, best_lambda))
}

fn trace_row(
    topology: &NetworkTopology,
    m: usize,
    cfg: &PowerControlConfig,
    gains: &[Vec<f64>],
    iteration: usize,
    x: &[f64],
    lambda: f64,
) -> Result<TraceRow> {
    let p: Vec<f64> = x.iter().map(|v| v * cfg.p_max).collect();
    let modeled = modeled_lambda(gains, x, cfg.alpha)?;
    let box_residual = p
        .iter()
        .map(|v| v.min(cfg.p_max - v))
        .fold(f64::INFINITY, f64::min);
    let snr_residual = snr_residuals(topology, m, &p, cfg.epsilon)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(TraceRow {
        iteration,
        lambda,
        max_pair_jaccard: objective_similarity(topology, &p, m)?,
        jaccard_residual: modeled - lambda,
        box_residual,
        snr_residual,
    })
}

/// Successive convex approximation starting from `p = p_max` on every device.
pub fn run_power_control(
    topology: &NetworkTopology,
    m: usize,
    cfg: &PowerControlConfig,
) -> Result<PowerControlOutcome> {
    if !(cfg.p_max > 0.0 && cfg.p_max.is_finite()) {
        return Err(Error::Config("p_max must be positive".into()));
    }
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::Config("tol must be positive and max_iter at least 1".into()));
    }
    let nu = topology.n_devices();
    let l = topology.n_gateways() as f64;
    let gains = normalized_gains(topology, m, cfg.p_max);
    let mut lo = Vec::with_capacity(nu);
    for (g, row) in gains.iter().enumerate() {
        let floor = cfg.epsilon * l / row.iter().sum::<f64>();
        if floor > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "device {g} cannot meet the SNR floor even at p_max"
            )));
        }
        lo.push(floor.clamp(X_FLOOR, 1.0));
    }
    let hi = vec![1.0; nu];
    let mut x = vec![1.0; nu];
    let allocation = |x: &[f64]| PowerAllocation {
        p: x.iter().map(|v| v * cfg.p_max).collect(),
        p_max: cfg.p_max,
        epsilon: cfg.epsilon,
    };
    if nu < 2 {
        return Ok(PowerControlOutcome {
            allocation: allocation(&x),
            state: SCAState {
                iteration: 0,
                p_current: allocation(&x).p,
                lambda_current: f64::INFINITY,
                converged: true,
                trace: Vec::new(),
            },
        });
    }
    let mut lambda = modeled_lambda(&gains, &x, cfg.alpha)?;
    let mut trace = vec![trace_row(topology, m, cfg, &gains, 0, &x, lambda)?];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < cfg.max_iter {
        iteration += 1;
        let cons = build_sca_constraints(&gains, &x, lambda, cfg.alpha)?;
        let sol = solve_sca_subproblem(&cons, &lo, &hi, &x)?;
        if sol.lambda < lambda {
            log::debug!("SCA iteration {iteration} made no progress; stopping");
            trace.push(trace_row(topology, m, cfg, &gains, iteration, &x, lambda)?);
            converged = true;
            break;
        }
        let (x_next, lambda_next) = extrapolate(&gains, cfg.alpha, &x, sol.x, sol.lambda, &lo, &hi)?;
        let gain = lambda_next - lambda;
        x = x_next;
        lambda = lambda_next;
        trace.push(trace_row(topology, m, cfg, &gains, iteration, &x, lambda)?);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power control stopped after {iteration} iterations without converging");
    }
    let alloc = allocation(&x);
    Ok(PowerControlOutcome {
        state: SCAState {
            iteration,
            p_current: alloc.p.clone(),
            lambda_current: lambda,
            converged,
            trace,
        },
        allocation: alloc,
    })
}

pub const TRACE_CSV_HEADER: &str =
    "iteration,lambda,max_pair_jaccard,jaccard_residual,box_residual,snr_residual";

pub fn write_trace_csv<W: Write>(state: &SCAState, mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in &state.trace {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration,
            r.lambda,
            r.max_pair_jaccard,
            r.jaccard_residual,
            r.box_residual,
            r.snr_residual
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_topology, TopologyParams};
    use proptest::prelude::*;

    fn topo(beta: Vec<Vec<f64>>, sigma2: f64) -> NetworkTopology {
        NetworkTopology::from_gains(beta, sigma2, 4).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[3.0, 1.5], &[3.0, 1.5]).unwrap(), 1.0);
        assert_eq!(jaccard(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((jaccard(&[2.0, 0.0], &[1.0, 0.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(jaccard(&[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn mu_vectors() {
        let t = topo(vec![vec![1e-3, 2e-3], vec![3e-3, 1e-3]], 0.5);
        let zero = build_mu_vectors(&t, &[0.0, 0.0], 8).unwrap();
        assert!(zero.mu_single.iter().flatten().all(|v| *v == 0.5));
        let a = build_mu_vectors(&t, &[10.0, 20.0], 8).unwrap();
        let b = build_mu_vectors(&t, &[20.0, 20.0], 8).unwrap();
        for gw in 0..2 {
            assert!(((b.mu_single[0][gw] - 0.5) - 2.0 * (a.mu_single[0][gw] - 0.5)).abs() < 1e-14);
            let pair = &a.mu_pair[0].1[gw];
            assert!((pair - (a.mu_single[0][gw] + a.mu_single[1][gw] - 0.5)).abs() < 1e-14);
        }
        assert_eq!(a.mu_pair[0].0, (0, 1));
    }

    #[test]
    fn objective_examples() {
        let same = topo(vec![vec![1e-3, 1e-3], vec![2e-3, 2e-3]], 1.0);
        let j = objective_similarity(&same, &[100.0, 100.0], 8).unwrap();
        assert_eq!(j, 1.0);
        // Independent evaluation of the three scalars for N_u = 2.
        let t = topo(vec![vec![1e-3, 4e-3], vec![3e-3, 1e-3], vec![2e-3, 2e-3]], 0.7);
        let p = [50.0, 80.0];
        let m = 16.0;
        let u: Vec<f64> = (0..3).map(|l| m * t.beta[l][0] * p[0] + 0.7).collect();
        let v: Vec<f64> = (0..3).map(|l| m * t.beta[l][1] * p[1] + 0.7).collect();
        let w: Vec<f64> = (0..3).map(|l| u[l] + v[l] - 0.7).collect();
        let jac = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|x| x * x).sum::<f64>() - d)
        };
        let want = jac(&u, &v).max(jac(&w, &v));
        assert!((objective_similarity(&t, &p, 16).unwrap() - want).abs() < 1e-14);
        assert_eq!(objective_similarity(&topo(vec![vec![1.0]], 1.0), &[1.0], 8).unwrap(), 0.0);
    }

    #[test]
    fn pair_term_is_swap_symmetric() {
        // Identical gain rows: swapping powers leaves J(μ̂_1, μ̂_2) unchanged,
        // and the collision term swaps its reference device.
        let t = topo(vec![vec![1e-3, 1e-3], vec![5e-3, 5e-3]], 1.0);
        let a = build_mu_vectors(&t, &[10.0, 60.0], 32).unwrap();
        let b = build_mu_vectors(&t, &[60.0, 10.0], 32).unwrap();
        let ja = jaccard(&a.mu_single[0], &a.mu_single[1]).unwrap();
        let jb = jaccard(&b.mu_single[0], &b.mu_single[1]).unwrap();
        assert!((ja - jb).abs() < 1e-15);
        let ca = jaccard(&a.mu_pair[0].1, &a.mu_single[0]).unwrap();
        let cb = jaccard(&b.mu_pair[0].1, &b.mu_single[1]).unwrap();
        assert!((ca - cb).abs() < 1e-15);
    }

    fn random_gains(nu: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut s = seed;
        (0..nu)
            .map(|_| {
                (0..l)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        0.5 + 20.0 * ((s >> 11) as f64 / (1u64 << 53) as f64)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn surrogates_are_tight_at_expansion_point() {
        let gains = random_gains(3, 3, 1);
        let x = [0.8, 0.35, 0.6];
        let lambda = modeled_lambda(&gains, &x, 1.061).unwrap();
        for c in build_sca_constraints(&gains, &x, lambda, 1.061).unwrap() {
            let (le, ls) = (c.lhs_exact(&x, lambda), c.lhs_surrogate(&x, lambda));
            assert!((le - ls).abs() <= 1e-12 * le);
            let (re, rs) = (c.rhs_exact(&x), c.rhs_surrogate(&x));
            assert!((re - rs).abs() <= 1e-12 * re);
            assert!(c.phi(&x) >= lambda - 1e-9 * lambda);
        }
        let c = &build_sca_constraints(&gains, &x, lambda, 1.0).unwrap()[1];
        let d = &build_sca_constraints(&gains, &x, lambda, 1.0).unwrap()[0];
        assert_eq!(c.kind, ConstraintKind::Collision);
        assert_eq!(d.kind, ConstraintKind::Distinct);
    }

    #[test]
    fn alpha_one_collision_theta_is_unscaled() {
        let gains = random_gains(2, 2, 5);
        let x = [0.5, 0.9];
        let c = &build_sca_constraints(&gains, &x, 2.0, 1.0).unwrap()[1];
        let theta = c.theta(&x);
        for l in 0..2 {
            // μ̂_{g,h} + μ̂_h in σ² units.
            let want = gains[0][l] * x[0] + gains[1][l] * x[1] + 1.0 + gains[1][l] * x[1] + 1.0;
            assert!((theta[l] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_derivatives_match_finite_differences() {
        let gains = random_gains(3, 2, 9);
        let x = [0.7, 0.4, 0.9];
        let cons = build_sca_constraints(&gains, &x, 3.0, 1.05).unwrap();
        let y = [0.6, 0.5, 0.8];
        for c in &cons {
            let (grad, hess) = c.phi_derivatives(&y);
            for (a, &i) in [c.g, c.h].iter().enumerate() {
                let h = 1e-6;
                let mut yp = y;
                let mut ym = y;
                yp[i] += h;
                ym[i] -= h;
                let fd = (c.phi(&yp) - c.phi(&ym)) / (2.0 * h);
                assert!((fd - grad[a]).abs() < 1e-5 * grad[a].abs().max(1.0));
                let (gp, _) = c.phi_derivatives(&yp);
                let (gm, _) = c.phi_derivatives(&ym);
                for b in 0..2 {
                    let fd2 = (gp[b] - gm[b]) / (2.0 * h);
                    assert!((fd2 - hess[b][a]).abs() < 1e-5 * hess[b][a].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn linearization_requires_positive_point() {
        let gains = random_gains(2, 2, 2);
        assert!(build_sca_constraints(&gains, &[0.0, 1.0], 2.0, 1.0).is_err());
        assert!(build_sca_constraints(&gains, &[1.0, 1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn subproblem_matches_grid_search() {
        // One pair, one gateway, small noise.
        let gains = vec![vec![400.0], vec![150.0]];
        let xb = [1.0, 1.0];
        let lambda = modeled_lambda(&gains, &xb, 1.0).unwrap();
        let cons = build_sca_constraints(&gains, &xb, lambda, 1.0).unwrap();
        let lo = [0.01, 0.01];
        let hi = [1.0, 1.0];
        let sol = solve_sca_subproblem(&cons, &lo, &hi, &xb).unwrap();
        let n = 200;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let x = [
                    lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64,
                ];
                let v = cons.iter().map(|c| c.phi(&x)).fold(f64::INFINITY, f64::min);
                best = best.max(v);
            }
        }
        assert!(sol.lambda >= best - 1e-9 * best.abs());
        // The grid resolution bounds how far above the grid optimum we may land.
        let step = 0.99 / (n - 1) as f64;
        let slope: f64 = cons
            .iter()
            .map(|c| {
                let (g, _) = c.phi_derivatives(&sol.x);
                g[0].abs() + g[1].abs()
            })
            .fold(0.0, f64::max);
        assert!(sol.lambda <= best + slope * step);
        assert!(sol.lambda >= lambda - 1e-9);
        for i in 0..2 {
            assert!(sol.x[i] >= lo[i] - 1e-9 && sol.x[i] <= hi[i] + 1e-9);
        }
    }

    #[test]
    fn subproblem_rejects_empty_box() {
        let gains = random_gains(2, 2, 3);
        let cons = build_sca_constraints(&gains, &[1.0, 1.0], 2.0, 1.0).unwrap();
        let err = solve_sca_subproblem(&cons, &[0.5, 1.2], &[1.0, 1.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Optimization(_)));
    }

    #[test]
    fn subproblem_with_fixed_variable() {
        let gains = random_gains(3, 3, 4);
        let xb = [1.0; 3];
        let lambda = modeled_lambda(&gains, &xb, 1.061).unwrap();
        let cons = build_sca_constraints(&gains, &xb, lambda, 1.061).unwrap();
        let sol = solve_sca_subproblem(&cons, &[1.0, 0.01, 0.01], &[1.0; 3], &xb).unwrap();
        assert_eq!(sol.x[0], 1.0);
        assert!(sol.lambda >= lambda - 1e-9);
    }

    #[test]
    fn single_device_keeps_p_max() {
        let t = topo(vec![vec![1e-3]], 1.0);
        let out = run_power_control(&t, 128, &PowerControlConfig::new(25.0, 0.1)).unwrap();
        assert_eq!(out.allocation.p, vec![25.0]);
        assert!(out.state.converged);
    }

    #[test]
    fn infeasible_floor_is_a_config_error() {
        let t = topo(vec![vec![1e-9, 1e-9]], 1.0);
        let err = run_power_control(&t, 8, &PowerControlConfig::new(1.0, 10.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn power_control_on_random_topology() {
        let params = TopologyParams::default();
        let t = generate_topology(&params, 21).unwrap();
        let m = 128;
        let p_su: f64 = (0..3)
            .map(|g| 0.1 * t.sigma2 / t.beta(g, t.best_gateway(g)))
            .sum();
        let cfg = PowerControlConfig::new(p_su, 0.1);
        let out = run_power_control(&t, m, &cfg).unwrap();
        let trace = &out.state.trace;
        assert!(trace.windows(2).all(|w| w[1].lambda >= w[0].lambda - 1e-9));
        for r in trace {
            assert!(r.jaccard_residual >= -1e-9, "{r:?}");
            assert!(r.box_residual >= -1e-9 * p_su);
            assert!(r.snr_residual >= -1e-9);
        }
        let start = objective_similarity(&t, &[p_su; 3], m).unwrap();
        let end = objective_similarity(&t, &out.allocation.p, m).unwrap();
        assert!(end < start, "{end} !< {start}");
        let mut csv = Vec::new();
        write_trace_csv(&out.state, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(TRACE_CSV_HEADER));
        assert_eq!(text.lines().count(), trace.len() + 1);
    }

    proptest! {
        #[test]
        fn epigraph_rewrite_equivalence(
            u in proptest::collection::vec(0.01f64..100.0, 3),
            v in proptest::collection::vec(0.01f64..100.0, 3),
            lambda in -2.9f64..50.0,
        ) {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sum_sq: f64 = u.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum();
            let lhs = sum_sq / (lambda + 3.0) - dot;
            let rhs = 1.0 / jaccard(&u, &v).unwrap() - lambda;
            prop_assume!(lhs.abs() > 1e-9 * dot && rhs.abs() > 1e-9);
            prop_assert_eq!(lhs >= 0.0, rhs >= 0.0);
        }

        #[test]
        fn surrogate_inequalities(
            x in 0.01f64..100.0, y in 0.01f64..100.0,
            xb in 0.01f64..100.0, yb in 0.01f64..100.0,
        ) {
            let q = x * x / y;
            prop_assert!(q >= quad_over_lin_minorant(x, y, xb, yb) - 1e-12 * q.max(1.0));
            let pr = x * y;
            prop_assert!(pr <= product_majorant(x, y, xb, yb) + 1e-12 * pr.max(1.0));
            prop_assert!((quad_over_lin_minorant(xb, yb, xb, yb) - xb * xb / yb).abs() <= 1e-12 * (xb * xb / yb));
            prop_assert!((product_majorant(xb, yb, xb, yb) - xb * yb).abs() <= 1e-12 * xb * yb);
        }

        #[test]
        fn jaccard_is_scale_invariant(
            beta in proptest::collection::vec(1e-15f64..1e-11, 6),
            p in proptest::collection::vec(1.0f64..100.0, 2),
            c in 1e-3f64..1e3,
        ) {
            let rows = |s: f64| vec![
                vec![beta[0] * s, beta[1] * s],
                vec![beta[2] * s, beta[3] * s],
                vec![beta[4] * s, beta[5] * s],
            ];
            let a = objective_similarity(&topo(rows(1.0), 1e-12), &p, 128).unwrap();
            let b = objective_similarity(&topo(rows(c), 1e-12 * c), &p, 128).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn extrapolation_stays_in_box_and_never_loses(
            g in proptest::collection::vec(0.01f64..100.0, 9),
            x0 in proptest::collection::vec(0.05f64..1.0, 3),
            x1 in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let gains: Vec<Vec<f64>> = g.chunks(3).map(|c| c.to_vec()).collect();
            let lo = [0.05; 3];
            let hi = [1.0; 3];
            let base = modeled_lambda(&gains, &x1, DEFAULT_ALPHA).unwrap();
            let (x, lam) = extrapolate(&gains, DEFAULT_ALPHA, &x0, x1.clone(), base, &lo, &hi).unwrap();
            prop_assert!(x.iter().all(|v| (0.05..=1.0).contains(v)));
            prop_assert!(lam >= base);
            prop_assert!((modeled_lambda(&gains, &x, DEFAULT_ALPHA).unwrap() - lam).abs() <= 1e-12 * lam.abs().max(1.0));
        }
    }
}
