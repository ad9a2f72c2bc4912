//! Closed-form asymptotics of the poisoned ridge score `β̂ᵀ(x₀ + v)`.
//!
//! The limit law is Gaussian `N(μ, σ²)`; `μ` is the alignment coefficient `C`
//! times `‖v‖²`, `σ²` is the limit of `‖β̂‖²`, and the poisoning efficacy of a
//! zero-threshold classifier is `η = 1 - Φ(-μ/σ)`. The auxiliary scalars used
//! to assemble `σ²` from the Gram-side resolvent equivalents are exposed in
//! [`SpikeAuxiliary`] so the assembly can be checked independently.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mp::{AspectRatio, SpectralPoint, TransformValues};

/// Inputs shared by every closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub c: f64,
    pub lambda: f64,
    pub theta: f64,
    pub v_norm: f64,
}

impl ModelParams {
    pub fn new(c: f64, lambda: f64, theta: f64, v_norm: f64) -> Result<Self> {
        let p = Self { c, lambda, theta, v_norm };
        p.validate()?;
        Ok(p)
    }

    /// The fixed point used when sweeping one axis at a time.
    pub fn defaults() -> Self {
        Self { c: 0.1, lambda: 0.1, theta: 0.1, v_norm: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        AspectRatio::new(self.c)?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::ThetaOutOfRange(self.theta));
        }
        if !(self.v_norm >= 0.0 && self.v_norm.is_finite()) {
            return Err(Error::InvalidParameter(format!("v_norm = {} must be finite and non-negative", self.v_norm)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        Ok(())
    }

    /// `τ² = ‖v‖² (θ/2)(1 - θ/2)`.
    pub fn tau_sq(&self) -> f64 {
        self.v_norm * self.v_norm * half_rate_variance(self.theta)
    }
}

fn half_rate_variance(theta: f64) -> f64 {
    0.5 * theta * (1.0 - 0.5 * theta)
}

/// Closed-form outputs for one parameter point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub mu: f64,
    pub sigma_sq: f64,
    pub eta: f64,
    pub c_align: f64,
}

/// Scalars of the spiked Gram-resolvent equivalents at a point `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeAuxiliary {
    pub tau_sq: f64,
    /// `B(z) = 1 + c⁻¹τ²(1 + z m̃(z))`
    pub b: f64,
    /// `S(z) = m̃(z) + z m̃'(z)`
    pub s: f64,
    /// `T(z)`, the spike-direction value of the squared Gram resolvent.
    pub t: f64,
    pub transforms: TransformValues,
}

impl SpikeAuxiliary {
    /// Residual of `z(T - m̃') - m̃(1 - 1/B) = S((c⁻¹τ² + 1)/B² - 1)`.
    pub fn assembly_identity_residual(&self, c: f64, z: f64) -> f64 {
        let a = self.tau_sq / c;
        let tf = &self.transforms;
        let lhs = z * (self.t - tf.m_tilde_prime) - tf.m_tilde * (1.0 - 1.0 / self.b);
        let rhs = self.s * ((a + 1.0) / (self.b * self.b) - 1.0);
        lhs - rhs
    }
}

/// Almost-sure limits of the label/indicator statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMoments {
    /// `(1/n)‖r‖² → (θ/2)(1 - θ/2)`
    pub s: f64,
    /// `(1/n) yᵀr → -θ/2`
    pub r_dot_y: f64,
    /// `(1/n) rᵀw̃ → θ(1-θ)/2`
    pub r_dot_w: f64,
    /// `(1/n)‖w̃‖² → 1 - θ²`
    pub w_norm_sq: f64,
    /// `(1/n)(w̃ᵀb̄)² → θ(1-θ)²/(2-θ)` with `b̄ = r/‖r‖`
    pub w_dot_bhat_sq: f64,
    /// `x̄ = (θ/2) v`
    pub x_bar_coeff: f64,
    /// `w̄ = θ`
    pub w_bar: f64,
}

pub fn population_moments(theta: f64) -> Result<PopulationMoments> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::ThetaOutOfRange(theta));
    }
    let s = half_rate_variance(theta);
    let r_dot_w = 0.5 * theta * (1.0 - theta);
    Ok(PopulationMoments {
        s,
        r_dot_y: -0.5 * theta,
        r_dot_w,
        w_norm_sq: 1.0 - theta * theta,
        w_dot_bhat_sq: if theta == 0.0 { 0.0 } else { theta * (1.0 - theta).powi(2) / (2.0 - theta) },
        x_bar_coeff: 0.5 * theta,
        w_bar: theta,
    })
}

/// Standard normal CDF, `Φ(x) = erfc(-x/√2)/2`.
///
/// Backed by the musl `erfc`, whose relative error is within a few ulp over
/// the whole real line, so the absolute error is far below `1e-12`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `1 - Φ(-μ/σ)`; a zero variance gives 1, 0 or 1/2 by the sign of `μ`.
pub fn efficacy(mu: f64, sigma_sq: f64) -> f64 {
    if sigma_sq > 0.0 {
        normal_cdf(mu / sigma_sq.sqrt())
    } else if mu > 0.0 {
        1.0
    } else if mu < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn clamp_variance(sigma_sq: f64) -> Result<f64> {
    if sigma_sq >= 0.0 {
        Ok(sigma_sq)
    } else if sigma_sq >= -1e-10 {
        warn!("clamping slightly negative variance {sigma_sq:e} to zero");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(sigma_sq))
    }
}

fn checked_point(params: &ModelParams) -> Result<(AspectRatio, SpectralPoint)> {
    params.validate()?;
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidLambda(params.lambda));
    }
    Ok((AspectRatio::new(params.c)?, SpectralPoint::from_lambda(params.lambda)?))
}

fn alignment_from_m(params: &ModelParams, m: f64) -> f64 {
    let ModelParams { c, lambda, theta, v_norm } = *params;
    let vsq = v_norm * v_norm;
    theta * (1.0 - theta) * m
        / ((1.0 + c * m) * (2.0 + vsq * theta * (1.0 - 0.5 * theta) * (1.0 - lambda * m)))
}

/// Alignment coefficient `C`: `β̂ᵀa → C vᵀa` for any fixed `a`.
pub fn alignment_coefficient(params: &ModelParams) -> Result<f64> {
    let (c, z) = checked_point(params)?;
    let m = crate::mp::mp_stieltjes(c, z)?;
    Ok(alignment_from_m(params, m))
}

/// The bracketed poison correction shared by the regularised and ridgeless
/// variances: `(1-θ²) + ((1 + c⁻¹τ²)/B² - 1) θ(1-θ)²/(2-θ)`.
fn variance_bracket(params: &ModelParams, b: f64) -> Result<f64> {
    let mom = population_moments(params.theta)?;
    let a = params.tau_sq() / params.c;
    Ok(mom.w_norm_sq + ((1.0 + a) / (b * b) - 1.0) * mom.w_dot_bhat_sq)
}

/// Finite-λ prediction `(μ, σ², η, C)`.
pub fn predict(params: &ModelParams) -> Result<TheoryPrediction> {
    let (c, z) = checked_point(params)?;
    let tf = TransformValues::at(c, z)?;
    let lambda = params.lambda;
    let vsq = params.v_norm * params.v_norm;
    // C_align is reported as μ/‖v‖², which is 0 for a zero trigger
    let c_align = if vsq > 0.0 { alignment_from_m(params, tf.m) } else { 0.0 };
    let mu = c_align * vsq;

    let a = params.tau_sq() / params.c;
    let b = 1.0 + a * (1.0 - lambda * tf.m_tilde);
    let s = tf.m_tilde - lambda * tf.m_tilde_prime;
    let sigma_sq = clamp_variance(s * variance_bracket(params, b)?)?;

    Ok(TheoryPrediction { mu, sigma_sq, eta: efficacy(mu, sigma_sq), c_align })
}

/// `λ → 0` limit, valid for `c < 1` only.
pub fn predict_ridgeless(params: &ModelParams) -> Result<TheoryPrediction> {
    AspectRatio::new(params.c)?;
    if !(0.0..=1.0).contains(&params.theta) {
        return Err(Error::ThetaOutOfRange(params.theta));
    }
    let c = params.c;
    if c >= 1.0 {
        return Err(Error::InterpolationThreshold(c));
    }
    let ModelParams { theta, v_norm, .. } = *params;
    let vsq = v_norm * v_norm;
    let mu = vsq * theta * (1.0 - theta) / (2.0 + vsq * theta * (1.0 - 0.5 * theta));
    let b = 1.0 + params.tau_sq();
    let sigma_sq = clamp_variance(c / (1.0 - c) * variance_bracket(params, b)?)?;
    let c_align = if vsq > 0.0 { mu / vsq } else { 0.0 };
    Ok(TheoryPrediction { mu, sigma_sq, eta: efficacy(mu, sigma_sq), c_align })
}

/// `τ²`, `B(z)`, `S(z)` and `T(z)` at an arbitrary `z < 0`.
pub fn spike_auxiliary(params: &ModelParams, z: SpectralPoint) -> Result<SpikeAuxiliary> {
    let c = AspectRatio::new(params.c)?;
    if !(0.0..=1.0).contains(&params.theta) {
        return Err(Error::ThetaOutOfRange(params.theta));
    }
    let tf = TransformValues::at(c, z)?;
    let zv = z.get();
    let tau_sq = params.tau_sq();
    let a = tau_sq / params.c;
    let b = 1.0 + a * (1.0 + zv * tf.m_tilde);
    let s = tf.m_tilde + zv * tf.m_tilde_prime;
    let t = ((a + 1.0) * tf.m_tilde_prime - a * tf.m_tilde * tf.m_tilde) / (b * b);
    Ok(SpikeAuxiliary { tau_sq, b, s, t, transforms: tf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp::mp_stieltjes;

    const TABLE_C: [f64; 7] = [0.1, 0.3, 0.5, 0.75, 1.25, 1.5, 2.0];
    const TABLE_LAMBDA: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 1.0];
    const TABLE_THETA: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
    const TABLE_VNORM: [f64; 9] = [0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

    fn p(c: f64, lambda: f64, theta: f64, v: f64) -> ModelParams {
        ModelParams::new(c, lambda, theta, v).unwrap()
    }

    #[test]
    fn default_point_mean() {
        // Hand evaluation with m(-0.1) = 2/(1+√1.04):
        // 0.09 m / ((1 + 0.1 m)(2 + 0.095 (1 - 0.1 m)))
        let m = 2.0 / (1.0 + 1.04f64.sqrt());
        let expected = 0.09 * m / ((1.0 + 0.1 * m) * (2.0 + 0.095 * (1.0 - 0.1 * m)));
        let pred = predict(&ModelParams::defaults()).unwrap();
        assert!((pred.mu - expected).abs() < 1e-15);
        assert!((pred.mu - 0.03888).abs() < 1e-5);
        assert_eq!(pred.mu, pred.c_align);
        assert_eq!(alignment_coefficient(&ModelParams::defaults()).unwrap(), pred.c_align);
    }

    #[test]
    fn no_poison_reduces_to_clean_ridge() {
        for &c in &TABLE_C {
            for &lambda in &TABLE_LAMBDA {
                let pred = predict(&p(c, lambda, 0.0, 1.7)).unwrap();
                assert_eq!(pred.mu, 0.0);
                assert_eq!(pred.eta, 0.5);
                let tf = TransformValues::at(
                    AspectRatio::new(c).unwrap(),
                    SpectralPoint::from_lambda(lambda).unwrap(),
                )
                .unwrap();
                let clean = tf.m_tilde - lambda * tf.m_tilde_prime;
                assert!((pred.sigma_sq - clean).abs() <= 1e-12 * clean.max(1.0));
            }
        }
    }

    #[test]
    fn zero_trigger_gives_zero_mean() {
        let pred = predict(&p(0.3, 0.05, 0.2, 0.0)).unwrap();
        assert_eq!(pred.mu, 0.0);
        assert_eq!(pred.c_align, 0.0);
        assert!(alignment_coefficient(&p(0.3, 0.05, 0.2, 0.0)).unwrap() > 0.0);
    }

    #[test]
    fn predict_rejects_zero_lambda() {
        assert!(matches!(predict(&p(0.5, 0.0, 0.1, 1.0)), Err(Error::InvalidLambda(_))));
        assert!(matches!(ModelParams::new(0.5, 0.1, 1.5, 1.0), Err(Error::ThetaOutOfRange(_))));
    }

    #[test]
    fn ridgeless_reference_value() {
        let r = predict_ridgeless(&p(0.5, 0.0, 0.1, 1.0)).unwrap();
        assert!((r.mu - 0.09 / 2.095).abs() < 1e-15);
        assert!((r.mu - 0.042959).abs() < 1e-6);
        let r0 = predict_ridgeless(&p(0.5, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(r0.mu, 0.0);
        assert!((r0.sigma_sq - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ridgeless_interpolation_threshold() {
        assert!(matches!(
            predict_ridgeless(&p(1.5, 0.0, 0.1, 1.0)),
            Err(Error::InterpolationThreshold(_))
        ));
        assert!(predict_ridgeless(&p(1.0, 0.0, 0.1, 1.0)).is_err());
        let near = predict_ridgeless(&p(0.999, 0.0, 0.1, 1.0)).unwrap();
        let half = predict_ridgeless(&p(0.5, 0.0, 0.1, 1.0)).unwrap();
        assert!(near.sigma_sq > 100.0 * half.sigma_sq);
    }

    #[test]
    fn small_lambda_matches_ridgeless() {
        for c in [0.1, 0.5, 0.75] {
            for theta in [0.05, 0.1] {
                for v in [1.0, 2.0] {
                    let a = predict(&p(c, 1e-8, theta, v)).unwrap();
                    let b = predict_ridgeless(&p(c, 0.0, theta, v)).unwrap();
                    assert!(((a.mu - b.mu) / b.mu).abs() <= 1e-4);
                    assert!(((a.sigma_sq - b.sigma_sq) / b.sigma_sq).abs() <= 1e-3);
                    assert!(((a.eta - b.eta) / b.eta).abs() <= 1e-3);
                }
            }
        }
    }

    #[test]
    fn alignment_monotonicity_on_grid() {
        let thetas: Vec<f64> = (0..=20).map(|k| k as f64 * 0.01).collect();
        for w in thetas.windows(2) {
            let lo = alignment_coefficient(&p(0.1, 0.1, w[0], 1.0)).unwrap();
            let hi = alignment_coefficient(&p(0.1, 0.1, w[1], 1.0)).unwrap();
            assert!(hi > lo, "theta {} -> {}", w[0], w[1]);
        }
        for w in TABLE_LAMBDA.windows(2) {
            let lo = alignment_coefficient(&p(0.1, w[0], 0.1, 1.0)).unwrap();
            let hi = alignment_coefficient(&p(0.1, w[1], 0.1, 1.0)).unwrap();
            assert!(hi < lo);
        }
        assert_eq!(alignment_coefficient(&p(0.1, 0.1, 0.0, 1.0)).unwrap(), 0.0);
        assert!(
            alignment_coefficient(&p(0.1, 0.001, 0.1, 1.0)).unwrap()
                > alignment_coefficient(&p(0.1, 1.0, 0.1, 1.0)).unwrap()
        );
    }

    #[test]
    fn mean_is_nonnegative_and_efficacy_at_least_half() {
        for &c in &TABLE_C {
            for &lambda in &TABLE_LAMBDA {
                for &theta in &TABLE_THETA {
                    for &v in &TABLE_VNORM {
                        let pr = predict(&p(c, lambda, theta, v)).unwrap();
                        assert!(pr.mu >= 0.0);
                        assert!((pr.mu - pr.c_align * v * v).abs() <= 1e-15 * pr.mu.max(1.0));
                        assert!(pr.sigma_sq > 0.0);
                        assert!((0.5..1.0).contains(&pr.eta));
                    }
                }
            }
        }
    }

    #[test]
    fn efficacy_linear_in_small_theta() {
        let eta = |t: f64| predict(&p(0.1, 0.1, t, 1.0)).unwrap().eta;
        let k = (eta(1e-3) - 0.5).abs() / 1e-3;
        let dev = (eta(1e-2) - 0.5).abs();
        assert!(dev <= 2.0 * k * 1e-2 && dev >= 0.5 * k * 1e-2);
    }

    #[test]
    fn spike_auxiliary_values() {
        let z = SpectralPoint::new(-0.1).unwrap();
        let aux = spike_auxiliary(&p(0.1, 0.1, 0.0, 1.0), z).unwrap();
        assert_eq!(aux.tau_sq, 0.0);
        assert_eq!(aux.b, 1.0);
        assert_eq!(aux.t, aux.transforms.m_tilde_prime);

        let aux = spike_auxiliary(&p(0.1, 0.1, 0.2, 2.0), z).unwrap();
        assert!((aux.tau_sq - 0.36).abs() < 1e-15);

        let aux = spike_auxiliary(&ModelParams::defaults(), z).unwrap();
        assert!(aux.assembly_identity_residual(0.1, -0.1).abs() <= 1e-10);
        assert!(aux.b > 0.0 && aux.s > 0.0);
    }

    #[test]
    fn assembly_identity_on_full_grid() {
        for &c in &TABLE_C {
            for &lambda in &TABLE_LAMBDA {
                for &theta in &TABLE_THETA {
                    for &v in &TABLE_VNORM {
                        let z = SpectralPoint::from_lambda(lambda).unwrap();
                        let aux = spike_auxiliary(&p(c, lambda, theta, v), z).unwrap();
                        let scale = aux.transforms.m_tilde.max(1.0) * (1.0 + aux.tau_sq / c);
                        assert!(
                            aux.assembly_identity_residual(c, -lambda).abs() <= 1e-10 * scale,
                            "c={c} lambda={lambda} theta={theta} v={v}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sigma_assembled_from_auxiliary_scalars() {
        let params = p(0.3, 0.05, 0.2, 2.5);
        let aux = spike_auxiliary(&params, SpectralPoint::from_lambda(0.05).unwrap()).unwrap();
        let mom = population_moments(0.2).unwrap();
        let a = aux.tau_sq / 0.3;
        let assembled = aux.s * (mom.w_norm_sq + ((a + 1.0) / (aux.b * aux.b) - 1.0) * mom.w_dot_bhat_sq);
        let pred = predict(&params).unwrap();
        assert!((assembled - pred.sigma_sq).abs() < 1e-12);
    }

    /// Exact expectations over the three outcomes of `(y, u)`.
    fn enumerate_moments(theta: f64) -> [f64; 7] {
        let outcomes = [(1.0, 0.0, 0.5), (-1.0, 1.0, theta / 2.0), (-1.0, 0.0, (1.0 - theta) / 2.0)];
        let mut e = [0.0; 5];
        for (y, u, prob) in outcomes {
            let r = u - theta / 2.0;
            let w = (y + 2.0 * u) - theta;
            e[0] += prob * r * r;
            e[1] += prob * y * r;
            e[2] += prob * r * w;
            e[3] += prob * w * w;
            e[4] += prob * (y + 2.0 * u);
        }
        let w_dot_bhat_sq = if e[0] > 0.0 { e[2] * e[2] / e[0] } else { 0.0 };
        let x_bar = outcomes.iter().map(|&(_, u, prob)| prob * u).sum::<f64>();
        [e[0], e[1], e[2], e[3], w_dot_bhat_sq, x_bar, e[4]]
    }

    #[test]
    fn population_moments_match_enumeration() {
        for theta in [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let m = population_moments(theta).unwrap();
            let got = [m.s, m.r_dot_y, m.r_dot_w, m.w_norm_sq, m.w_dot_bhat_sq, m.x_bar_coeff, m.w_bar];
            let want = enumerate_moments(theta);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-14, "theta={theta}: {got:?} vs {want:?}");
                assert!((-1.0..=1.0).contains(g));
            }
        }
        let m = population_moments(0.0).unwrap();
        assert_eq!(
            [m.s, m.r_dot_y, m.r_dot_w, m.w_norm_sq, m.w_dot_bhat_sq, m.x_bar_coeff, m.w_bar],
            [0.0, -0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        let m = population_moments(0.1).unwrap();
        assert!((m.w_norm_sq - 0.99).abs() < 1e-15);
        assert!((m.w_dot_bhat_sq - 0.042632).abs() < 1e-6);
        assert!((population_moments(0.2).unwrap().s - 0.09).abs() < 1e-15);
        assert!(matches!(population_moments(-0.1), Err(Error::ThetaOutOfRange(_))));
    }

    /// Composite Simpson on [-40, x] of the Gaussian density, refined until stable.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let simpson = |a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut s = pdf(a) + pdf(b);
            for i in 1..n {
                s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mut n = 1024;
        let mut prev = simpson(-40.0, x, n);
        loop {
            n *= 2;
            let cur = simpson(-40.0, x, n);
            if (cur - prev).abs() < 1e-15 || n > 1 << 22 {
                return cur;
            }
            prev = cur;
        }
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for x in [-3.0, -1.0, -0.2, 0.5, 1.959964, 2.7] {
            assert!((normal_cdf(x) - cdf_by_quadrature(x)).abs() <= 1e-12, "x={x}");
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() <= 1e-15);
        }
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!(normal_cdf(-8.0) < 1e-14);
    }

    #[test]
    fn degenerate_efficacy() {
        assert_eq!(efficacy(0.3, 0.0), 1.0);
        assert_eq!(efficacy(0.0, 0.0), 0.5);
    }

    #[test]
    fn c_align_matches_m() {
        let params = p(0.75, 0.01, 0.05, 3.0);
        let m = mp_stieltjes(AspectRatio::new(0.75).unwrap(), SpectralPoint::from_lambda(0.01).unwrap()).unwrap();
        assert_eq!(alignment_coefficient(&params).unwrap(), alignment_from_m(&params, m));
    }
}
