//! Renyi differential privacy accounting for the three noise streams
//! (gradients, lambda drive, shared statistics), plus the clip-and-noise
//! primitives they protect.
//!
//! The per-step RDP of the Poisson-subsampled Gaussian mechanism follows
//! the Mironov–Talwar–Zhang computation: an exact binomial sum at integer
//! orders and a stable log-space series at fractional orders. Composition
//! is additive in RDP; conversion to (eps, delta) takes the minimum of
//! `rdp(alpha) + ln(1/delta)/(alpha-1)` over the order grid.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Resolved noise configuration for the three protected releases of a
/// run: per-sample gradients (sigma1, clipped to B), lambda drive
/// measurements (sigma2, sensitivity 1), and shared statistics (sigma3,
/// sensitivity 1), together with the budget split that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    /// Per-sample gradient clip bound B.
    pub clip_bound: f64,
    /// Poisson batch rate q shared by streams 1 and 2.
    pub sampling_rate: f64,
    /// Epsilon shares (stream 1, 2, 3); they sum to the run target.
    pub eps_targets: (f64, f64, f64),
    /// Delta shares (stream 1, 2, 3); they sum to the run delta.
    pub delta_split: (f64, f64, f64),
}

impl NoisePlan {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("sigma3", self.sigma3)] {
            if !(s >= 0.0) {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {s}")));
            }
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::Domain(format!(
                "clip bound must be positive, got {}",
                self.clip_bound
            )));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Domain(format!(
                "sampling rate must lie in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        let deltas = [self.delta_split.0, self.delta_split.1, self.delta_split.2];
        for d in deltas {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Domain(format!("delta shares must lie in (0, 1), got {d}")));
            }
        }
        Ok(())
    }

    pub fn delta_total(&self) -> f64 {
        self.delta_split.0 + self.delta_split.1 + self.delta_split.2
    }
}

/// Scale a vector to L2 norm at most `bound`: `v / max(1, |v| / bound)`.
/// Vectors already inside the ball are returned bit-identical. Returns the
/// pre-clip norm.
pub fn clip(update: &mut [f64], bound: f64) -> Result<f64> {
    if !(bound > 0.0) {
        return Err(Error::Domain(format!("clip bound must be positive, got {bound}")));
    }
    let norm = update.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient norm before clipping".into(),
        });
    }
    if norm > bound {
        let scale = bound / norm;
        for x in update.iter_mut() {
            *x *= scale;
        }
    }
    Ok(norm)
}

/// Add independent `N(0, noise_scale^2)` noise to every coordinate;
/// scale 0 is the identity (no RNG draws).
pub fn gaussianize<R: Rng>(update: &mut [f64], noise_scale: f64, rng: &mut R) {
    if noise_scale == 0.0 {
        return;
    }
    for x in update.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += noise_scale * z;
    }
}

/// A single `N(0, noise_scale^2)` draw, for scalar releases.
pub fn gaussian_noise<R: Rng>(noise_scale: f64, rng: &mut R) -> f64 {
    if noise_scale == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    noise_scale * z
}

/// Default Renyi order grid: quarter steps on [1.25, 63] plus the
/// integers up to 64.
pub fn default_alphas() -> Vec<f64> {
    let mut alphas: Vec<f64> = (5..=252).map(|i| f64::from(i) * 0.25).collect();
    alphas.extend((2..=64).map(f64::from));
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    alphas.dedup();
    alphas
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(a) - exp(b))` for `a >= b`; NaN if the difference would be
/// negative, which callers surface as a non-finite error.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a < b {
        return f64::NAN;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp_m1()).ln()
}

/// `ln(erfc(x))`, switching to the asymptotic expansion once `erfc`
/// underflows (x around 26.6 and beyond).
fn log_erfc(x: f64) -> f64 {
    let r = erfc(x);
    if r > 0.0 {
        r.ln()
    } else {
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2)
            + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    }
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln A_alpha` at integer order: the exact binomial expansion.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let term = ln_binomial(alpha, i)
            + i as f64 * q.ln()
            + (alpha - i) as f64 * (1.0 - q).ln()
            + (i * i - i) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

/// `ln A_alpha` at fractional order: the convergent two-part series with
/// erfc split points, terms tracked in log space with explicit signs.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;
    let half_ln = 0.5f64.ln();

    let mut log_abs_coef = 0.0; // ln |binom(alpha, i)|, i = 0
    let mut coef_positive = true;
    let mut i: u64 = 0;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_abs_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_abs_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = half_ln + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = half_ln + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef_positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
        // binom(alpha, i+1) = binom(alpha, i) * (alpha - i) / (i + 1)
        let factor = alpha - fi;
        log_abs_coef += factor.abs().ln() - (fi + 1.0).ln();
        if factor < 0.0 {
            coef_positive = !coef_positive;
        }
        i += 1;
    }
    log_add(log_a0, log_a1)
}

/// Per-step RDP of the Poisson-subsampled Gaussian mechanism at order
/// `alpha`: sampling rate `q` in (0, 1], noise multiplier `sigma`
/// (sensitivity 1).
fn rdp_one_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("Renyi order must exceed 1, got {alpha}")));
    }
    if q == 1.0 {
        // plain Gaussian mechanism
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    let eps = log_a / (alpha - 1.0);
    if eps.is_nan() {
        return Err(Error::NonFinite {
            context: format!("rdp at q={q} sigma={sigma} alpha={alpha}"),
        });
    }
    // tiny negative values can arise from cancellation; RDP is nonnegative
    Ok(eps.max(0.0))
}

/// RDP spent by `steps` releases of the Poisson-subsampled Gaussian
/// mechanism at order `alpha` (additive composition). At q=1 this is
/// exactly `steps * alpha / (2 sigma^2)`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, steps: u64, alpha: f64) -> Result<f64> {
    Ok(steps as f64 * rdp_one_step(q, sigma, alpha)?)
}

/// Additive RDP composition: the curve of `steps` identical releases.
pub fn compose(rdp_per_step: &[f64], steps: u64) -> Vec<f64> {
    rdp_per_step.iter().map(|&r| r * steps as f64).collect()
}

/// Convert an RDP curve to an (eps, delta) guarantee: minimize
/// `rdp(alpha) + ln(1/delta)/(alpha - 1)` over the grid. Returns the eps
/// and the minimizing order.
pub fn rdp_to_dp(alphas: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if alphas.len() != rdp.len() {
        return Err(Error::Domain(format!(
            "order grid ({}) and rdp curve ({}) lengths differ",
            alphas.len(),
            rdp.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    let mut best_alpha = f64::NAN;
    for (&alpha, &r) in alphas.iter().zip(rdp) {
        if alpha <= 1.0 {
            continue;
        }
        let candidate = r + log_inv_delta / (alpha - 1.0);
        if candidate < best {
            best = candidate;
            best_alpha = alpha;
        }
    }
    if best_alpha.is_nan() {
        return Err(Error::Domain("no usable Renyi order (all > 1 required)".into()));
    }
    Ok((best, best_alpha))
}

/// Smallest noise multiplier in [0.3, 100] whose eps lands inside
/// `[0.999 * target, target]`, found by bisection (eps is continuous and
/// decreasing in sigma). Errors when no sigma in range can land there.
pub fn calibrate_sigma(
    q: f64,
    steps: u64,
    delta: f64,
    target_eps: f64,
    alphas: &[f64],
) -> Result<f64> {
    if !(target_eps > 0.0) {
        return Err(Error::Domain(format!("target eps must be positive, got {target_eps}")));
    }
    let eps_at = |sigma: f64| -> Result<f64> {
        let rdp: Vec<f64> = alphas
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, steps, a))
            .collect::<Result<_>>()?;
        let (eps, _) = rdp_to_dp(alphas, &rdp, delta)?;
        Ok(eps)
    };
    let window = 0.999 * target_eps..=target_eps;
    let (mut lo, mut hi) = (0.3f64, 100.0f64);
    let eps_lo = eps_at(lo)?;
    let eps_hi = eps_at(hi)?;
    if window.contains(&eps_lo) {
        return Ok(lo);
    }
    if window.contains(&eps_hi) {
        return Ok(hi);
    }
    if eps_lo < *window.start() || eps_hi > *window.end() {
        return Err(Error::Calibration {
            target: target_eps,
            lo,
            hi,
            eps_lo,
            eps_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps_mid = eps_at(mid)?;
        if window.contains(&eps_mid) {
            return Ok(mid);
        }
        if eps_mid > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration {
        target: target_eps,
        lo,
        hi,
        eps_lo,
        eps_hi,
    })
}

/// One tracked noise stream: its mechanism parameters, its share of the
/// delta budget, and how many releases have been recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamAccount {
    pub label: String,
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub steps: u64,
    rdp_per_step: Vec<f64>,
}

/// Running accountant over independent noise streams. Streams compose in
/// parallel on the privacy report: eps and delta both add.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub alphas: Vec<f64>,
    pub streams: Vec<StreamAccount>,
}

impl AccountantState {
    pub fn new() -> Self {
        Self::with_alphas(default_alphas())
    }

    pub fn with_alphas(alphas: Vec<f64>) -> Self {
        Self {
            alphas,
            streams: Vec::new(),
        }
    }

    /// Register a stream; returns its index for `record`. A stream with
    /// sigma=0 is a placeholder that reserves its delta share but offers
    /// no protection: its per-step cost is infinite, so it must never
    /// have steps recorded.
    pub fn add_stream(&mut self, label: &str, q: f64, sigma: f64, delta: f64) -> Result<usize> {
        let rdp_per_step: Vec<f64> = if sigma == 0.0 {
            vec![f64::INFINITY; self.alphas.len()]
        } else {
            self.alphas
                .iter()
                .map(|&a| rdp_one_step(q, sigma, a))
                .collect::<Result<_>>()?
        };
        self.streams.push(StreamAccount {
            label: label.to_string(),
            q,
            sigma,
            delta,
            steps: 0,
            rdp_per_step,
        });
        Ok(self.streams.len() - 1)
    }

    pub fn record(&mut self, stream: usize, steps: u64) {
        self.streams[stream].steps += steps;
    }

    /// (eps, minimizing order) for one stream at its delta share. A stream
    /// with no recorded releases has spent nothing.
    pub fn stream_epsilon(&self, stream: usize) -> Result<(f64, Option<f64>)> {
        let s = &self.streams[stream];
        if s.steps == 0 {
            return Ok((0.0, None));
        }
        let (eps, alpha) = rdp_to_dp(&self.alphas, &compose(&s.rdp_per_step, s.steps), s.delta)?;
        Ok((eps, Some(alpha)))
    }

    pub fn report(&self) -> Result<PrivacyReport> {
        let mut streams = Vec::with_capacity(self.streams.len());
        let mut eps_total = 0.0;
        let mut delta_total = 0.0;
        for (i, s) in self.streams.iter().enumerate() {
            let (eps, alpha) = self.stream_epsilon(i)?;
            eps_total += eps;
            delta_total += s.delta;
            streams.push(StreamReport {
                label: s.label.clone(),
                q: s.q,
                sigma: s.sigma,
                delta: s.delta,
                steps: s.steps,
                eps,
                alpha,
            });
        }
        Ok(PrivacyReport {
            streams,
            eps_total,
            delta_total,
        })
    }
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-stream spend plus the parallel-composed totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub label: String,
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub steps: u64,
    pub eps: f64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub streams: Vec<StreamReport>,
    pub eps_total: f64,
    pub delta_total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn log_helpers() {
        assert!((log_add(0.0, 0.0) - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, 3.0), 3.0);
        assert!((log_sub(2.0f64.ln(), 0.0) - 0.0).abs() < 1e-15);
        assert_eq!(log_sub(1.0, f64::NEG_INFINITY), 1.0);
        assert!(log_sub(0.0, 1.0).is_nan());
        for &(n, k) in &[(5u64, 2u64), (10, 0), (10, 10), (30, 7)] {
            let direct = (1..=k).map(|i| ((n - k + i) as f64) / i as f64).product::<f64>();
            assert!((ln_binomial(n, k) - direct.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn log_erfc_matches_direct_and_asymptotic_regimes() {
        for &x in &[-3.0, -0.5, 0.0, 1.0, 5.0, 20.0] {
            assert!((log_erfc(x) - erfc(x).ln()).abs() < 1e-10);
        }
        // continuity across the underflow switch
        let a = log_erfc(26.0);
        let b = log_erfc(28.0);
        assert!(a > b && b.is_finite());
        // asymptotic value sanity: ln erfc(x) ~ -x^2 - ln(x sqrt(pi))
        let x = 40.0;
        let approx = -x * x - (x * PI.sqrt()).ln();
        assert!((log_erfc(x) - approx).abs() < 1e-3);
    }

    #[test]
    fn unsubsampled_gaussian_is_exact() {
        assert_eq!(rdp_subsampled_gaussian(1.0, 1.0, 1, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, 10, 8.0).unwrap(), 10.0);
    }

    #[test]
    fn out_of_domain_parameters_are_rejected() {
        assert!(rdp_subsampled_gaussian(0.0, 1.0, 1, 8.0).is_err());
        assert!(rdp_subsampled_gaussian(1.5, 1.0, 1, 8.0).is_err());
        assert!(rdp_subsampled_gaussian(0.5, 0.0, 1, 8.0).is_err());
        assert!(rdp_subsampled_gaussian(0.5, -1.0, 1, 8.0).is_err());
        assert!(rdp_subsampled_gaussian(0.5, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn integer_and_fractional_paths_agree_at_integer_orders() {
        for &q in &[0.01, 0.1, 0.5, 0.9] {
            for &sigma in &[0.5, 1.0, 2.0, 6.0] {
                for &alpha in &[2u64, 3, 5, 10, 30] {
                    let int_eps = log_a_int(q, sigma, alpha) / (alpha as f64 - 1.0);
                    let frac_eps = log_a_frac(q, sigma, alpha as f64) / (alpha as f64 - 1.0);
                    let denom = int_eps.abs().max(1e-12);
                    assert!(
                        ((int_eps - frac_eps) / denom).abs() < 1e-9,
                        "q={q} sigma={sigma} alpha={alpha}: {int_eps} vs {frac_eps}"
                    );
                }
            }
        }
    }

    /// Independent oracle: Simpson quadrature of
    /// `A = E_{z~N(0,s^2)}[(mix(z)/N(0,s^2)(z))^alpha]` in log space. The
    /// step resolves both the Gaussian width and the exp(alpha z / s^2)
    /// tilt so stiff (large alpha, small sigma) cells stay accurate.
    pub(super) fn quadrature_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
        let ln_norm = -(sigma * (2.0 * PI).sqrt()).ln();
        let ln_mu0 = |z: f64| -0.5 * (z / sigma).powi(2) + ln_norm;
        let ln_mu1 = |z: f64| -0.5 * ((z - 1.0) / sigma).powi(2) + ln_norm;
        let ln_mix = |z: f64| log_add((1.0 - q).ln() + ln_mu0(z), q.ln() + ln_mu1(z));
        let lo = -(50.0 * sigma + 5.0);
        let hi = alpha + 50.0 * sigma + 5.0;
        let h = sigma.min(sigma * sigma / alpha) / 100.0;
        let mut nodes = (((hi - lo) / h).ceil() as usize).max(2);
        if nodes % 2 == 1 {
            nodes += 1; // even interval count for Simpson
        }
        let step = (hi - lo) / nodes as f64;
        let mut log_sum = f64::NEG_INFINITY;
        for i in 0..=nodes {
            let z = lo + step * i as f64;
            let w: f64 = if i == 0 || i == nodes {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let log_f = (1.0 - alpha) * ln_mu0(z) + alpha * ln_mix(z);
            log_sum = log_add(log_sum, w.ln() + log_f);
        }
        let log_a = log_sum + (step / 3.0).ln();
        log_a / (alpha - 1.0)
    }

    #[test]
    fn closed_form_matches_quadrature_oracle() {
        for &q in &[0.001, 0.01, 0.1] {
            for &sigma in &[0.5, 1.0, 2.0, 4.0] {
                for &alpha in &[2.0, 4.0, 8.0, 16.0, 32.0] {
                    let fast = rdp_subsampled_gaussian(q, sigma, 1, alpha).unwrap();
                    let slow = quadrature_rdp(q, sigma, alpha);
                    let denom = slow.abs().max(1e-12);
                    assert!(
                        ((fast - slow) / denom).abs() < 1e-6,
                        "q={q} sigma={sigma} alpha={alpha}: {fast} vs {slow}"
                    );
                }
            }
        }
    }

    #[test]
    fn fractional_orders_match_quadrature_oracle() {
        for &(q, sigma, alpha) in &[(0.01, 1.0, 1.5), (0.1, 0.8, 5.25), (0.05, 2.0, 10.75)] {
            let fast = rdp_subsampled_gaussian(q, sigma, 1, alpha).unwrap();
            let slow = quadrature_rdp(q, sigma, alpha);
            assert!(
                ((fast - slow) / slow.abs().max(1e-12)).abs() < 1e-6,
                "q={q} sigma={sigma} alpha={alpha}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn rdp_monotone_in_each_parameter() {
        let alphas = default_alphas();
        let mut prev = 0.0;
        for &a in &alphas {
            let r = rdp_subsampled_gaussian(0.1, 1.0, 1, a).unwrap();
            assert!(r >= prev - 1e-12, "order {a}");
            prev = r;
        }
        let mut prev = f64::INFINITY;
        for &s in &[0.5, 0.8, 1.0, 1.5, 2.0, 4.0, 8.0] {
            let r = rdp_subsampled_gaussian(0.1, s, 1, 8.0).unwrap();
            assert!(r <= prev, "sigma {s}");
            prev = r;
        }
        let mut prev = 0.0;
        for &q in &[0.01, 0.05, 0.1, 0.3, 0.5, 0.8, 1.0] {
            let r = rdp_subsampled_gaussian(q, 1.0, 1, 8.0).unwrap();
            assert!(r >= prev, "q {q}");
            prev = r;
        }
        for &steps in &[1u64, 2, 10, 100] {
            let one = rdp_subsampled_gaussian(0.1, 1.0, 1, 8.0).unwrap();
            let many = rdp_subsampled_gaussian(0.1, 1.0, steps, 8.0).unwrap();
            assert_eq!(many, one * steps as f64);
        }
    }

    #[test]
    fn conversion_minimizes_over_grid() {
        // sigma=1, q=1, one step, delta=1e-5: continuous optimum
        // 1/(2) + sqrt(2 ln 1e5) = 5.29853; quarter grid hits 5.75
        let alphas = default_alphas();
        let rdp: Vec<f64> = alphas
            .iter()
            .map(|&a| rdp_subsampled_gaussian(1.0, 1.0, 1, a).unwrap())
            .collect();
        let (eps, alpha) = rdp_to_dp(&alphas, &rdp, 1e-5).unwrap();
        assert!((eps - 5.298_773_782_098_994).abs() < 1e-9, "eps {eps}");
        assert_eq!(alpha, 5.75);
        let continuous = 0.5 + (2.0 * (1e5f64).ln()).sqrt();
        assert!(eps >= continuous && eps - continuous < 0.01);
    }

    #[test]
    fn conversion_on_zero_curve_is_pure_delta_term() {
        let alphas = default_alphas();
        let rdp = vec![0.0; alphas.len()];
        let (eps, alpha) = rdp_to_dp(&alphas, &rdp, 1e-5).unwrap();
        assert_eq!(alpha, 64.0);
        assert!((eps - (1e5f64).ln() / 63.0).abs() < 1e-12);
    }

    #[test]
    fn composition_is_linear_in_steps() {
        let alphas = default_alphas();
        let rdp: Vec<f64> = alphas
            .iter()
            .map(|&a| rdp_subsampled_gaussian(0.05, 1.2, 1, a).unwrap())
            .collect();
        let ten = compose(&rdp, 10);
        for (one, ten) in rdp.iter().zip(&ten) {
            assert_eq!(*ten, one * 10.0);
        }
    }

    fn round_trip_eps(q: f64, sigma: f64, steps: u64, delta: f64, alphas: &[f64]) -> f64 {
        let rdp: Vec<f64> = alphas
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, steps, a).unwrap())
            .collect();
        rdp_to_dp(alphas, &rdp, delta).unwrap().0
    }

    #[test]
    fn calibration_recovers_unit_sigma() {
        let alphas = default_alphas();
        let target = 5.298_773_782_098_994;
        let sigma = calibrate_sigma(1.0, 1, 1e-5, target, &alphas).unwrap();
        assert!((sigma - 1.0).abs() < 2e-3, "sigma {sigma}");
        let eps = round_trip_eps(1.0, sigma, 1, 1e-5, &alphas);
        assert!(eps <= target && eps >= 0.999 * target);
    }

    #[test]
    fn calibration_lands_in_window_for_subsampled_runs() {
        let alphas = default_alphas();
        for &(q, steps, target) in &[(0.1, 300u64, 2.0), (0.01, 1000, 0.7), (1.0, 50, 20.0)] {
            let sigma = calibrate_sigma(q, steps, 1e-5, target, &alphas).unwrap();
            let eps = round_trip_eps(q, sigma, steps, 1e-5, &alphas);
            assert!(
                eps <= target && eps >= 0.999 * target,
                "q={q} steps={steps} target={target}: sigma={sigma} eps={eps}"
            );
        }
    }

    #[test]
    fn more_steps_need_more_noise() {
        let alphas = default_alphas();
        let short = calibrate_sigma(0.1, 100, 1e-5, 3.0, &alphas).unwrap();
        let long = calibrate_sigma(0.1, 1000, 1e-5, 3.0, &alphas).unwrap();
        assert!(long > short, "{long} vs {short}");
    }

    #[test]
    fn calibration_rejects_unreachable_targets() {
        let alphas = default_alphas();
        // even sigma=100 spends more than this
        assert!(matches!(
            calibrate_sigma(1.0, 1, 1e-5, 1e-3, &alphas),
            Err(Error::Calibration { .. })
        ));
        // even sigma=0.3 spends less than this
        assert!(matches!(
            calibrate_sigma(1.0, 1, 1e-5, 1000.0, &alphas),
            Err(Error::Calibration { .. })
        ));
    }

    #[test]
    fn accountant_totals_add_across_streams() {
        let mut acc = AccountantState::new();
        let g = acc.add_stream("gradients", 0.1, 1.1, 1e-5 / 3.0).unwrap();
        let l = acc.add_stream("lambda", 0.1, 4.0, 1e-5 / 3.0).unwrap();
        let s = acc.add_stream("statistics", 1.0, 8.0, 1e-5 / 3.0).unwrap();
        acc.record(g, 300);
        acc.record(l, 300);
        acc.record(s, 11);
        let report = acc.report().unwrap();
        let by_hand: f64 = (0..3).map(|i| acc.stream_epsilon(i).unwrap().0).sum();
        assert!((report.eps_total - by_hand).abs() < 1e-12);
        assert!((report.delta_total - 1e-5).abs() < 1e-18);
        assert!(report.streams.iter().all(|s| s.eps > 0.0));
        let _ = (g, l, s);
    }

    #[test]
    fn unused_stream_spends_nothing() {
        let mut acc = AccountantState::new();
        let idx = acc.add_stream("lambda", 0.1, 2.0, 1e-6).unwrap();
        let (eps, alpha) = acc.stream_epsilon(idx).unwrap();
        assert_eq!(eps, 0.0);
        assert!(alpha.is_none());
        let report = acc.report().unwrap();
        assert_eq!(report.eps_total, 0.0);
        assert_eq!(report.delta_total, 1e-6);
    }

    #[test]
    fn clip_rescales_only_outside_ball() {
        let mut v = vec![3.0, 4.0];
        let norm = clip(&mut v, 2.5).unwrap();
        assert_eq!(norm, 5.0);
        let new_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((new_norm - 2.5).abs() < 1e-12);
        assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);

        let mut small = vec![0.3, -0.4];
        let before = small.clone();
        clip(&mut small, 2.5).unwrap();
        assert_eq!(small, before);

        assert!(clip(&mut [1.0], 0.0).is_err());
        assert!(clip(&mut [f64::NAN], 1.0).is_err());
    }

    #[test]
    fn gaussianize_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut v = vec![0.0; n];
        gaussianize(&mut v, 1.0, &mut rng);
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");

        let mut w = vec![0.0; n];
        gaussianize(&mut w, 2.0, &mut rng);
        let wm = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|x| (x - wm).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn zero_scale_is_identity_and_consumes_no_randomness() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let before: f64 = rng.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = vec![1.5, -2.5, 0.0];
        gaussianize(&mut v, 0.0, &mut rng);
        assert_eq!(v, vec![1.5, -2.5, 0.0]);
        assert_eq!(gaussian_noise(0.0, &mut rng), 0.0);
        let after: f64 = rng.gen();
        assert_eq!(before, after);
    }

    #[test]
    fn scalar_noise_matches_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<f64> = (0..100_000).map(|_| gaussian_noise(4.0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 16.0).abs() < 0.4);
    }

    #[test]
    fn noise_plan_validation() {
        let good = NoisePlan {
            sigma1: 1.0,
            sigma2: 2.0,
            sigma3: 3.0,
            clip_bound: 1.0,
            sampling_rate: 0.1,
            eps_targets: (4.0, 0.5, 0.5),
            delta_split: (1e-5, 1e-5, 1e-5),
        };
        good.validate().unwrap();
        assert!((good.delta_total() - 3e-5).abs() < 1e-20);
        let mut bad = good.clone();
        bad.clip_bound = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.sampling_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.sigma2 = -0.1;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            v in proptest::collection::vec(-100.0f64..100.0, 1..20),
            bound in 0.01f64..10.0,
        ) {
            let mut v = v;
            clip(&mut v, bound).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn rdp_is_nonnegative_and_finite_for_positive_sigma(
            q in 0.001f64..0.999,
            sigma in 0.4f64..10.0,
            alpha_idx in 0usize..100,
        ) {
            let alphas = default_alphas();
            let alpha = alphas[alpha_idx % alphas.len()];
            let r = rdp_subsampled_gaussian(q, sigma, 1, alpha).unwrap();
            prop_assert!(r.is_finite());
            prop_assert!(r >= 0.0);
        }
    }
}
