//! Synthetic poisoned datasets and the exact centred ridge estimator.
//!
//! Samples are columns of a `p x n` matrix. Every random quantity comes from
//! its own named stream of the trial seed (features, labels, poison draws,
//! test points), and each stream is consumed sample by sample. The first `k`
//! samples of a dataset are therefore identical for every `n ≥ k`, and the
//! poison set for a smaller `θ` is a subset of the one for a larger `θ`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream, Stream};
use crate::sweep::SweepRecord;
use crate::theory::{self, ModelParams};

/// Problem size and the seed that drives every stream of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimShape {
    pub p: usize,
    pub n: usize,
    pub seed: u64,
}

impl SimShape {
    pub fn new(p: usize, n: usize, seed: u64) -> Result<Self> {
        if p == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!("shape must be positive, got p={p}, n={n}")));
        }
        Ok(Self { p, n, seed })
    }

    /// `n = round(p / c)`, at least 1.
    pub fn from_ratio(p: usize, c: f64, seed: u64) -> Result<Self> {
        crate::mp::AspectRatio::new(c)?;
        let n = ((p as f64 / c).round() as usize).max(1);
        Self::new(p, n, seed)
    }

    pub fn c_effective(&self) -> f64 {
        self.p as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// `x̄ = (θ/2) v`, `w̄ = θ`: the population means under the model.
    #[default]
    Population,
    /// Sample means of the poisoned features and labels.
    Empirical,
}

impl Centering {
    pub fn as_str(self) -> &'static str {
        match self {
            Centering::Population => "population",
            Centering::Empirical => "empirical",
        }
    }
}

/// Where the synthetic trigger points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerDirection {
    /// `v = ‖v‖ e₁`
    #[default]
    FirstAxis,
    /// `v = ‖v‖ g/‖g‖` for a Gaussian `g` drawn from the trial seed.
    RandomUnit,
}

/// Post-poison training data.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub x: DMatrix<f64>,
    /// Post-flip labels in `{-1, +1}`.
    pub y: DVector<f64>,
    /// Poison indicator `u_i ∈ {0, 1}`.
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub centering: Centering,
}

impl PoisonedDataset {
    pub fn poisoned_count(&self) -> usize {
        self.u.iter().filter(|&&u| u > 0.0).count()
    }
}

/// Centred design `X̃ = X - x̄1ᵀ` and response `w̃ = y - w̄1`.
#[derive(Debug, Clone)]
pub struct CenteredData {
    pub x_tilde: DMatrix<f64>,
    pub w_tilde: DVector<f64>,
    pub x_bar: DVector<f64>,
    pub w_bar: f64,
}

/// Ridge weights and unpenalised intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub beta: DVector<f64>,
    pub b0: f64,
}

impl RidgeSolution {
    /// `β̂ᵀv`
    pub fn mu_emp(&self, v: &DVector<f64>) -> f64 {
        self.beta.dot(v)
    }

    /// `‖β̂‖²`
    pub fn sigma_sq_emp(&self) -> f64 {
        self.beta.norm_squared()
    }
}

/// Fill a `rows x cols` column-major matrix with i.i.d. standard normals.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_vec(rows, cols, data)
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// I.i.d. `N(0, I_p)` features and uniform `±1` labels.
pub fn generate_clean(shape: &SimShape) -> (DMatrix<f64>, DVector<f64>) {
    let x = gaussian_matrix(&mut stream(shape.seed, Stream::Features), shape.p, shape.n);
    let mut labels = stream(shape.seed, Stream::Labels);
    let y = DVector::from_iterator(shape.n, (0..shape.n).map(|_| if labels.gen::<bool>() { 1.0 } else { -1.0 }));
    (x, y)
}

/// Shift each `-1` sample by `v` and relabel it `+1`, independently with
/// probability `θ`. One uniform is drawn per sample whatever its label.
pub fn apply_poison(
    mut x: DMatrix<f64>,
    mut y: DVector<f64>,
    theta: f64,
    v: &DVector<f64>,
    seed: u64,
) -> Result<PoisonedDataset> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::ThetaOutOfRange(theta));
    }
    if v.len() != x.nrows() || v.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidParameter("trigger must be finite with one entry per feature".into()));
    }
    let mut draws = stream(seed, Stream::Poison);
    let mut u = DVector::zeros(y.len());
    for i in 0..y.len() {
        let draw: f64 = draws.gen();
        if y[i] < 0.0 && draw < theta {
            u[i] = 1.0;
            y[i] = 1.0;
            let mut col = x.column_mut(i);
            col += v;
        }
    }
    Ok(PoisonedDataset { x, y, u, v: v.clone(), centering: Centering::default() })
}

/// Centre features and labels according to `dataset.centering`.
pub fn center(dataset: &PoisonedDataset, theta: f64) -> CenteredData {
    let n = dataset.x.ncols();
    let (x_bar, w_bar) = match dataset.centering {
        Centering::Population => (&dataset.v * (0.5 * theta), theta),
        Centering::Empirical => (dataset.x.column_mean(), dataset.y.mean()),
    };
    let mut x_tilde = dataset.x.clone();
    for j in 0..n {
        let mut col = x_tilde.column_mut(j);
        col -= &x_bar;
    }
    let w_tilde = dataset.y.map(|y| y - w_bar);
    CenteredData { x_tilde, w_tilde, x_bar, w_bar }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveLambda(lambda))
    }
}

/// `β̂ = ((1/n) X̃X̃ᵀ + λI_p)⁻¹ (1/n) X̃w̃` via a `p x p` Cholesky solve.
pub fn solve_ridge_primal(x_tilde: &DMatrix<f64>, w_tilde: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    let n = x_tilde.ncols() as f64;
    let gram = linalg::scaled_outer_gram(x_tilde, lambda);
    let rhs = (x_tilde * w_tilde) / n;
    linalg::spd_solve(gram, &rhs)
}

/// `β̂ = (1/n) X̃ ((1/n) X̃ᵀX̃ + λI_n)⁻¹ w̃` via an `n x n` Cholesky solve.
pub fn solve_ridge_dual(x_tilde: &DMatrix<f64>, w_tilde: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    let n = x_tilde.ncols() as f64;
    let gram = linalg::scaled_inner_gram(x_tilde, lambda);
    let alpha = linalg::spd_solve(gram, w_tilde)?;
    Ok((x_tilde * alpha) / n)
}

/// Exact centred ridge solution; primal when `p ≤ n`, dual otherwise.
pub fn solve_ridge(
    x_tilde: &DMatrix<f64>,
    w_tilde: &DVector<f64>,
    lambda: f64,
    x_bar: &DVector<f64>,
    w_bar: f64,
) -> Result<RidgeSolution> {
    let beta = if x_tilde.nrows() <= x_tilde.ncols() {
        solve_ridge_primal(x_tilde, w_tilde, lambda)?
    } else {
        solve_ridge_dual(x_tilde, w_tilde, lambda)?
    };
    let b0 = w_bar - beta.dot(x_bar);
    Ok(RidgeSolution { beta, b0 })
}

/// Fraction of fresh triggered test points `x₀ + v` scored strictly positive.
pub fn empirical_efficacy(
    solution: &RidgeSolution,
    v: &DVector<f64>,
    m_test: usize,
    seed: u64,
    include_intercept: bool,
) -> Result<f64> {
    if m_test == 0 {
        return Err(Error::InvalidParameter("m_test must be at least 1".into()));
    }
    let beta = &solution.beta;
    let offset = beta.dot(v) + if include_intercept { solution.b0 } else { 0.0 };
    let mut rng = stream(seed, Stream::TestPoints);
    let mut hits = 0usize;
    for _ in 0..m_test {
        let mut score = offset;
        for &b in beta.iter() {
            score += b * rng.sample::<f64, _>(StandardNormal);
        }
        if score > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / m_test as f64)
}

/// Plug-in efficacy `1 - Φ(-μ̂/σ̂)` from the empirical statistics.
pub fn plugin_efficacy(mu: f64, sigma_sq: f64) -> f64 {
    theory::efficacy(mu, sigma_sq)
}

/// Per-trial knobs that are not model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub centering: Centering,
    pub direction: TriggerDirection,
    /// Test points for the Monte Carlo efficacy; 0 disables it.
    pub m_test: usize,
    pub include_intercept: bool,
    /// Record wall-clock time; off by default so CSV output is reproducible.
    pub record_timing: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            centering: Centering::Population,
            direction: TriggerDirection::FirstAxis,
            m_test: 10_000,
            include_intercept: false,
            record_timing: false,
        }
    }
}

pub fn trigger_vector(p: usize, v_norm: f64, direction: TriggerDirection, seed: u64) -> DVector<f64> {
    match direction {
        TriggerDirection::FirstAxis => {
            let mut v = DVector::zeros(p);
            v[0] = v_norm;
            v
        }
        TriggerDirection::RandomUnit => {
            let g = gaussian_vector(&mut stream(seed, Stream::Direction), p);
            let norm = g.norm();
            g * (v_norm / norm)
        }
    }
}

/// One synthetic trial: generate, poison, centre, solve, measure, and join
/// with the closed-form prediction. Grid and trial indices are left at 0.
pub fn run_trial(params: &ModelParams, shape: &SimShape, cfg: &TrialConfig) -> Result<SweepRecord> {
    params.validate()?;
    let start = Instant::now();
    let prediction = theory::predict(params)?;

    let (x, y) = generate_clean(shape);
    let v = trigger_vector(shape.p, params.v_norm, cfg.direction, shape.seed);
    let mut data = apply_poison(x, y, params.theta, &v, shape.seed)?;
    data.centering = cfg.centering;
    let centered = center(&data, params.theta);
    let sol = solve_ridge(&centered.x_tilde, &centered.w_tilde, params.lambda, &centered.x_bar, centered.w_bar)?;

    let mu_emp = sol.mu_emp(&v);
    let sigma2_emp = sol.sigma_sq_emp();
    let eta_emp_mc = if cfg.m_test > 0 {
        empirical_efficacy(&sol, &v, cfg.m_test, shape.seed, cfg.include_intercept)?
    } else {
        f64::NAN
    };

    let mut record = SweepRecord::from_parts(params, shape, &prediction, cfg.centering);
    record.mu_emp = mu_emp;
    record.sigma2_emp = sigma2_emp;
    record.eta_emp_mc = eta_emp_mc;
    record.eta_emp_plugin = plugin_efficacy(mu_emp, sigma2_emp);
    if cfg.record_timing {
        record.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    Ok(record)
}
