//! Monte Carlo checks of the deterministic equivalents for a rank-one spiked
//! resolvent and its square, on both the feature (`p x p`) and Gram (`n x n`)
//! side.
//!
//! With `Z = X + τ√n a bᵀ`, `Q₁(z) = ((1/n)ZZᵀ - zI_p)⁻¹` and
//! `Q̃₁(z) = ((1/n)ZᵀZ - zI_n)⁻¹`, every equivalent has the form
//! `iso·I + spike·ddᵀ` with `d = a` (feature side) or `d = b` (Gram side).
//! Only scalar functionals are compared: quadratic forms and normalised traces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mp::{AspectRatio, SpectralPoint, TransformValues};
use crate::rng::{derive_seed, stream, Stream};
use crate::simulator::{self, gaussian_matrix, gaussian_vector, Centering};
use crate::sweep::quantile_sorted;
use crate::theory::{self, ModelParams};
use crate::woodbury::{woodbury_update, DenseInverse, InverseAction};

/// Largest dimension accepted for a dense inversion.
pub const MAX_DENSE_DIM: usize = 800;

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventExperiment {
    pub p: usize,
    pub n: usize,
    pub tau: f64,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub z: SpectralPoint,
    pub seed: u64,
}

fn random_unit<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    let g = gaussian_vector(rng, len);
    let norm = g.norm();
    g / norm
}

impl ResolventExperiment {
    /// Spike directions `a`, `b` are seeded random unit vectors.
    pub fn new(p: usize, n: usize, tau: f64, z: SpectralPoint, seed: u64) -> Result<Self> {
        if p == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!("dimensions must be positive, got p={p}, n={n}")));
        }
        let mut rng = stream(seed, Stream::Direction);
        let a = random_unit(&mut rng, p);
        let b = random_unit(&mut rng, n);
        Self::with_directions(tau, a, b, z, seed)
    }

    pub fn with_directions(tau: f64, a: DVector<f64>, b: DVector<f64>, z: SpectralPoint, seed: u64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("spike strength must be finite and nonnegative, got {tau}")));
        }
        for (name, d) in [("a", &a), ("b", &b)] {
            if d.is_empty() || (d.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!("{name} must be a unit vector")));
            }
        }
        Ok(Self { p: a.len(), n: b.len(), tau, a, b, z, seed })
    }

    pub fn c(&self) -> f64 {
        self.p as f64 / self.n as f64
    }
}

/// The unspiked noise `X`, i.i.d. standard normal from the features stream.
pub fn noise_matrix(exp: &ResolventExperiment) -> DMatrix<f64> {
    gaussian_matrix(&mut stream(exp.seed, Stream::Features), exp.p, exp.n)
}

/// `Z = X + τ√n a bᵀ`
pub fn build_spiked(exp: &ResolventExperiment) -> DMatrix<f64> {
    let mut z = noise_matrix(exp);
    let scale = exp.tau * (exp.n as f64).sqrt();
    z.ger(scale, &exp.a, &exp.b, 1.0);
    z
}

fn check_cap(dim: usize) -> Result<()> {
    if dim > MAX_DENSE_DIM {
        Err(Error::SizeCap { dim, cap: MAX_DENSE_DIM })
    } else {
        Ok(())
    }
}

/// `((1/n)ZZᵀ - zI_p)⁻¹`
pub fn feature_resolvent(z_mat: &DMatrix<f64>, z: SpectralPoint) -> Result<DMatrix<f64>> {
    check_cap(z_mat.nrows())?;
    linalg::spd_inverse(linalg::scaled_outer_gram(z_mat, -z.get()))
}

/// `((1/n)ZᵀZ - zI_n)⁻¹`
pub fn gram_resolvent(z_mat: &DMatrix<f64>, z: SpectralPoint) -> Result<DMatrix<f64>> {
    check_cap(z_mat.ncols())?;
    linalg::spd_inverse(linalg::scaled_inner_gram(z_mat, -z.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpikeSide {
    /// Rank-one term along `aaᵀ`.
    FeatureSide,
    /// Rank-one term along `bbᵀ`.
    GramSide,
}

/// Deterministic equivalent `iso·I + spike·ddᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentCoefficients {
    pub iso: f64,
    pub spike: f64,
    pub direction: SpikeSide,
}

impl EquivalentCoefficients {
    /// `xᵀ(iso·I + spike·ddᵀ)y`
    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>, d: &DVector<f64>) -> f64 {
        self.iso * x.dot(y) + self.spike * x.dot(d) * d.dot(y)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("spike strength must be finite and nonnegative, got {tau}")))
    }
}

/// `m(z)I - m(z)(1 - 1/(1 + τ²(1 + z m(z)))) aaᵀ`
pub fn det_equiv_feature(c: AspectRatio, tau: f64, z: SpectralPoint) -> Result<EquivalentCoefficients> {
    check_tau(tau)?;
    let t = TransformValues::at(c, z)?;
    let d = 1.0 + tau * tau * (1.0 + z.get() * t.m);
    Ok(EquivalentCoefficients { iso: t.m, spike: -t.m * (1.0 - 1.0 / d), direction: SpikeSide::FeatureSide })
}

/// `m'(z)I + ((m'(τ²+1) - m²τ²)/(1 + τ²(1 + z m))² - m') aaᵀ`
pub fn det_equiv_feature_squared(c: AspectRatio, tau: f64, z: SpectralPoint) -> Result<EquivalentCoefficients> {
    check_tau(tau)?;
    let t = TransformValues::at(c, z)?;
    let tau2 = tau * tau;
    let d = 1.0 + tau2 * (1.0 + z.get() * t.m);
    let spike = (t.m_prime * (tau2 + 1.0) - t.m * t.m * tau2) / (d * d) - t.m_prime;
    Ok(EquivalentCoefficients { iso: t.m_prime, spike, direction: SpikeSide::FeatureSide })
}

fn gram_spike_scalar(c: AspectRatio, tau: f64, z: SpectralPoint) -> Result<(TransformValues, f64, f64)> {
    check_tau(tau)?;
    let t = TransformValues::at(c, z)?;
    let a = tau * tau / c.get();
    let b = 1.0 + a * (1.0 + z.get() * t.m_tilde);
    Ok((t, a, b))
}

/// `m̃(z)(I - (1 - 1/B) bbᵀ)` with `B = 1 + c⁻¹τ²(1 + z m̃(z))`.
pub fn det_equiv_gram(c: AspectRatio, tau: f64, z: SpectralPoint) -> Result<EquivalentCoefficients> {
    let (t, _, b) = gram_spike_scalar(c, tau, z)?;
    Ok(EquivalentCoefficients { iso: t.m_tilde, spike: -t.m_tilde * (1.0 - 1.0 / b), direction: SpikeSide::GramSide })
}

/// `m̃'(z)I + (T - m̃') bbᵀ` with `T = ((a+1)m̃' - a m̃²)/B²`, `a = c⁻¹τ²`.
pub fn det_equiv_gram_squared(c: AspectRatio, tau: f64, z: SpectralPoint) -> Result<EquivalentCoefficients> {
    let (t, a, b) = gram_spike_scalar(c, tau, z)?;
    let tt = ((a + 1.0) * t.m_tilde_prime - a * t.m_tilde * t.m_tilde) / (b * b);
    Ok(EquivalentCoefficients { iso: t.m_tilde_prime, spike: tt - t.m_tilde_prime, direction: SpikeSide::GramSide })
}

/// One row of the convergence CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check_name: String,
    pub p: usize,
    pub n: usize,
    pub seed: u64,
    pub observed: f64,
    pub predicted: f64,
    pub abs_error: f64,
}

impl CheckRow {
    fn new(name: &str, exp: &ResolventExperiment, observed: f64, predicted: f64) -> Self {
        Self {
            check_name: name.to_string(),
            p: exp.p,
            n: exp.n,
            seed: exp.seed,
            observed,
            predicted,
            abs_error: (observed - predicted).abs(),
        }
    }
}

/// The four quadratic-form checks along the spike directions.
pub const PRIMARY_CHECKS: [&str; 4] = ["feature", "feature_squared", "gram", "gram_squared"];

/// Unit vector orthogonal to `a`, built from `e₁` (or `e₂` if `a ≈ ±e₁`).
pub fn orthogonal_probe(a: &DVector<f64>) -> DVector<f64> {
    let k = if a.len() > 1 && a[0].abs() > 0.9 { 1 } else { 0 };
    let mut g = DVector::zeros(a.len());
    g[k] = 1.0;
    g.axpy(-a[k], a, 1.0);
    let norm = g.norm();
    g / norm
}

/// Every scalar functional for one experiment.
pub fn run_checks(exp: &ResolventExperiment) -> Result<Vec<CheckRow>> {
    let c = AspectRatio::new(exp.c())?;
    let z = exp.z;
    let zm = build_spiked(exp);
    let q = feature_resolvent(&zm, z)?;
    let qt = gram_resolvent(&zm, z)?;

    let fe = det_equiv_feature(c, exp.tau, z)?;
    let fs = det_equiv_feature_squared(c, exp.tau, z)?;
    let ge = det_equiv_gram(c, exp.tau, z)?;
    let gs = det_equiv_gram_squared(c, exp.tau, z)?;

    let (a, b) = (&exp.a, &exp.b);
    let qa = &q * a;
    let qtb = &qt * b;

    let mut probes = stream(exp.seed, Stream::TestPoints);
    let g = orthogonal_probe(a);
    let mut h = random_unit(&mut probes, exp.p);
    h.axpy(-h.dot(a), a, 1.0);
    h /= h.norm();
    let r = random_unit(&mut probes, exp.p);

    let pf = exp.p as f64;
    let nf = exp.n as f64;
    let q_sq_trace = q.iter().map(|x| x * x).sum::<f64>();
    let mut rows = vec![
        CheckRow::new("feature", exp, a.dot(&qa), fe.iso + fe.spike),
        CheckRow::new("feature_squared", exp, qa.norm_squared(), fs.iso + fs.spike),
        CheckRow::new("gram", exp, b.dot(&qtb), ge.iso + ge.spike),
        CheckRow::new("gram_squared", exp, qtb.norm_squared(), gs.iso + gs.spike),
        CheckRow::new("feature_orthogonal", exp, g.dot(&(&q * &g)), fe.bilinear(&g, &g, a)),
        CheckRow::new("feature_cross", exp, g.dot(&(&q * &h)), fe.bilinear(&g, &h, a)),
        CheckRow::new("feature_random", exp, r.dot(&(&q * &r)), fe.bilinear(&r, &r, a)),
        CheckRow::new("feature_trace", exp, q.trace() / pf, fe.iso),
        CheckRow::new("feature_squared_trace", exp, q_sq_trace / pf, fs.iso),
        CheckRow::new("gram_trace", exp, qt.trace() / nf, ge.iso),
    ];
    // finite-size identity: tr Q̃ = tr Q - (n - p)/z
    let implied = (pf / nf) * (q.trace() / pf) - (1.0 - pf / nf) / z.get();
    rows.push(CheckRow::new("trace_consistency", exp, qt.trace() / nf, implied));
    Ok(rows)
}

/// Convergence sweep: `seeds` experiments at each `p`, with `n = round(p/c)`.
/// Rows are ordered by `(p, seed index, check)`.
pub fn convergence_study(
    p_values: &[usize],
    c: f64,
    tau: f64,
    z: SpectralPoint,
    seeds: usize,
    master_seed: u64,
) -> Result<Vec<CheckRow>> {
    AspectRatio::new(c)?;
    check_tau(tau)?;
    for &p in p_values {
        check_cap(p)?;
        check_cap(((p as f64 / c).round() as usize).max(1))?;
    }
    let jobs: Vec<(usize, usize, usize)> = p_values
        .iter()
        .enumerate()
        .flat_map(|(pi, &p)| (0..seeds).map(move |s| (pi, p, s)))
        .collect();
    let mut results: Vec<((usize, usize), Vec<CheckRow>)> = jobs
        .into_par_iter()
        .map(|(pi, p, s)| {
            let n = ((p as f64 / c).round() as usize).max(1);
            let seed = derive_seed(&[master_seed, p as u64, s as u64]);
            let exp = ResolventExperiment::new(p, n, tau, z, seed)?;
            Ok(((pi, s), run_checks(&exp)?))
        })
        .collect::<Result<_>>()?;
    results.sort_by_key(|(k, _)| *k);
    Ok(results.into_iter().flat_map(|(_, rows)| rows).collect())
}

/// Median absolute error of one check at each `p`, in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    pub check_name: String,
    pub p_values: Vec<usize>,
    pub median_errors: Vec<f64>,
}

impl ConvergenceSummary {
    pub fn strictly_decreasing(&self) -> bool {
        self.median_errors.windows(2).all(|w| w[1] < w[0])
    }

    /// `err(first p) / err(last p)`
    pub fn ratio(&self) -> f64 {
        self.median_errors[0] / self.median_errors[self.median_errors.len() - 1]
    }
}

pub fn summarise(rows: &[CheckRow], check_name: &str, p_values: &[usize]) -> ConvergenceSummary {
    let median_errors = p_values
        .iter()
        .map(|&p| {
            let mut errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.check_name == check_name && r.p == p)
                .map(|r| r.abs_error)
                .collect();
            if errs.is_empty() {
                return f64::NAN;
            }
            errs.sort_by(f64::total_cmp);
            quantile_sorted(&errs, 0.5)
        })
        .collect();
    ConvergenceSummary { check_name: check_name.to_string(), p_values: p_values.to_vec(), median_errors }
}

/// Rebuild `Q₁` from `Q₀ = ((1/n)XXᵀ - zI)⁻¹` with the rank-3 factors
/// `U = [τa, Xb/√n, τa]`, `V = [Xb/√n, τa, τa]`, so that
/// `(1/n)ZZᵀ = (1/n)XXᵀ + UVᵀ`. Returns `(woodbury Q₁, dense Q₁)`.
pub fn woodbury_reconstruction(exp: &ResolventExperiment) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let x = noise_matrix(exp);
    let q0 = feature_resolvent(&x, exp.z)?;
    let xb = (&x * &exp.b) / (exp.n as f64).sqrt();
    let ta = &exp.a * exp.tau;
    let u = DMatrix::from_columns(&[ta.clone(), xb.clone(), ta.clone()]);
    let v = DMatrix::from_columns(&[xb, ta.clone(), ta]);
    let updated = woodbury_update(DenseInverse(q0), &u, &v)?;
    let rebuilt = updated.apply(&DMatrix::identity(exp.p, exp.p));
    let dense = feature_resolvent(&build_spiked(exp), exp.z)?;
    Ok((rebuilt, dense))
}

/// `(observed, predicted)` for the variance assembly: the observed value is
/// `(1/n) w̃ᵀ(zQ̃² + Q̃)w̃` on one synthetic poisoned dataset (population
/// centring, `z = -λ`), the prediction is
/// `S·[(1-θ²) + ((1+a)/B² - 1)·θ(1-θ)²/(2-θ)]` from the spike scalars.
pub fn variance_assembly(params: &ModelParams, p: usize, seed: u64) -> Result<(f64, f64)> {
    params.validate()?;
    let shape = simulator::SimShape::from_ratio(p, params.c, seed)?;
    check_cap(shape.n)?;
    let (x, y) = simulator::generate_clean(&shape);
    let v = simulator::trigger_vector(p, params.v_norm, simulator::TriggerDirection::FirstAxis, seed);
    let mut data = simulator::apply_poison(x, y, params.theta, &v, seed)?;
    data.centering = Centering::Population;
    let centered = simulator::center(&data, params.theta);
    let z = SpectralPoint::from_lambda(params.lambda)?;
    let qt = gram_resolvent(&centered.x_tilde, z)?;
    let qw = &qt * &centered.w_tilde;
    let observed = (z.get() * qw.norm_squared() + centered.w_tilde.dot(&qw)) / shape.n as f64;

    let aux = theory::spike_auxiliary(params, z)?;
    let a = aux.tau_sq / params.c;
    let th = params.theta;
    let bracket = (1.0 - th * th) + ((1.0 + a) / (aux.b * aux.b) - 1.0) * th * (1.0 - th).powi(2) / (2.0 - th);
    Ok((observed, aux.s * bracket))
}
