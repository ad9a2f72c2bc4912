//! Parameter grids, parallel trial execution, aggregation and persistence.
//!
//! Jobs are `(grid point, trial)` pairs. Each job derives its seed from the
//! master seed without touching shared state, jobs run on the rayon pool, and
//! results are sorted by `(grid_index, trial_index)` before anything is
//! written, so output bytes do not depend on the thread count.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::simulator::{run_trial, Centering, SimShape, TrialConfig};
use crate::theory::{ModelParams, TheoryPrediction};

pub const TABLE_C: [f64; 7] = [0.1, 0.3, 0.5, 0.75, 1.25, 1.5, 2.0];
pub const TABLE_LAMBDA: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 1.0];
pub const TABLE_THETA: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
pub const TABLE_VNORM: [f64; 9] = [0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub c_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub theta_values: Vec<f64>,
    pub vnorm_values: Vec<f64>,
    pub p: usize,
    pub trials: usize,
    pub master_seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::table1()
    }
}

impl SweepGrid {
    /// The built-in grid, `p = 500`, 100 trials.
    pub fn table1() -> Self {
        Self {
            c_values: TABLE_C.to_vec(),
            lambda_values: TABLE_LAMBDA.to_vec(),
            theta_values: TABLE_THETA.to_vec(),
            vnorm_values: TABLE_VNORM.to_vec(),
            p: 500,
            trials: 100,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.trials == 0 {
            return Err(Error::InvalidParameter("p and trials must be positive".into()));
        }
        let axes = [&self.c_values, &self.lambda_values, &self.theta_values, &self.vnorm_values];
        if axes.iter().any(|a| a.is_empty()) {
            return Err(Error::InvalidParameter("every grid axis needs at least one value".into()));
        }
        for &c in &self.c_values {
            for &lambda in &self.lambda_values {
                for &theta in &self.theta_values {
                    for &v in &self.vnorm_values {
                        ModelParams::new(c, lambda, theta, v)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisMode {
    /// Cartesian product of all four axes.
    Full,
    /// Each axis in turn, the others held at `c=0.1, λ=0.1, θ=0.1, ‖v‖=1`.
    #[default]
    OneAtATime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    C,
    Lambda,
    Theta,
    Vnorm,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::C, Axis::Lambda, Axis::Theta, Axis::Vnorm];

    pub fn value(self, params: &ModelParams) -> f64 {
        match self {
            Axis::C => params.c,
            Axis::Lambda => params.lambda,
            Axis::Theta => params.theta,
            Axis::Vnorm => params.v_norm,
        }
    }

    pub fn set(self, params: &mut ModelParams, value: f64) {
        match self {
            Axis::C => params.c = value,
            Axis::Lambda => params.lambda = value,
            Axis::Theta => params.theta = value,
            Axis::Vnorm => params.v_norm = value,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::C => "c",
            Axis::Lambda => "lambda",
            Axis::Theta => "theta",
            Axis::Vnorm => "v_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c" => Some(Axis::C),
            "lambda" => Some(Axis::Lambda),
            "theta" => Some(Axis::Theta),
            "vnorm" | "v_norm" => Some(Axis::Vnorm),
            _ => None,
        }
    }
}

/// How per-trial seeds are derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedScheme {
    /// `seed = H(master, trial)`: every grid point reuses the same random
    /// streams for a given trial (common random numbers).
    #[default]
    Common,
    /// `seed = H(master, grid_index, trial)`: independent data per point.
    Independent,
}

impl SeedScheme {
    pub fn trial_seed(self, master: u64, grid_index: usize, trial_index: usize) -> u64 {
        match self {
            SeedScheme::Common => derive_seed(&[master, trial_index as u64]),
            SeedScheme::Independent => derive_seed(&[master, grid_index as u64, trial_index as u64]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub params: ModelParams,
    /// The varied axis in one-at-a-time mode.
    pub axis: Option<Axis>,
}

pub fn grid_points(grid: &SweepGrid, mode: AxisMode) -> Vec<GridPoint> {
    let mut out = Vec::new();
    match mode {
        AxisMode::Full => {
            for &c in &grid.c_values {
                for &lambda in &grid.lambda_values {
                    for &theta in &grid.theta_values {
                        for &v_norm in &grid.vnorm_values {
                            let params = ModelParams { c, lambda, theta, v_norm };
                            out.push(GridPoint { index: out.len(), params, axis: None });
                        }
                    }
                }
            }
        }
        AxisMode::OneAtATime => {
            let axes: [(Axis, &Vec<f64>); 4] = [
                (Axis::C, &grid.c_values),
                (Axis::Lambda, &grid.lambda_values),
                (Axis::Theta, &grid.theta_values),
                (Axis::Vnorm, &grid.vnorm_values),
            ];
            for (axis, values) in axes {
                for &value in values {
                    let mut params = ModelParams::defaults();
                    axis.set(&mut params, value);
                    out.push(GridPoint { index: out.len(), params, axis: Some(axis) });
                }
            }
        }
    }
    out
}

/// One `(grid point, trial)` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub grid_index: usize,
    pub trial_index: usize,
    pub c_target: f64,
    pub c_effective: f64,
    pub lambda: f64,
    pub theta: f64,
    pub v_norm: f64,
    pub p: usize,
    pub n: usize,
    pub seed: u64,
    pub mu_emp: f64,
    pub sigma2_emp: f64,
    pub eta_emp_mc: f64,
    pub eta_emp_plugin: f64,
    pub mu_theory: f64,
    pub sigma2_theory: f64,
    pub eta_theory: f64,
    #[serde(rename = "C_theory")]
    pub c_theory: f64,
    pub centering_mode: Centering,
    pub wall_time_ms: f64,
    /// `synthetic`, or `mnist:<scale>[:swap]`.
    pub source: String,
    /// `ok`, or `error: <message>`.
    pub status: String,
    /// Conditioning note, empty when none.
    pub warning: String,
}

pub const RECORD_HEADER: [&str; 23] = [
    "grid_index",
    "trial_index",
    "c_target",
    "c_effective",
    "lambda",
    "theta",
    "v_norm",
    "p",
    "n",
    "seed",
    "mu_emp",
    "sigma2_emp",
    "eta_emp_mc",
    "eta_emp_plugin",
    "mu_theory",
    "sigma2_theory",
    "eta_theory",
    "C_theory",
    "centering_mode",
    "wall_time_ms",
    "source",
    "status",
    "warning",
];

impl SweepRecord {
    pub fn from_parts(params: &ModelParams, shape: &SimShape, prediction: &TheoryPrediction, centering: Centering) -> Self {
        Self {
            grid_index: 0,
            trial_index: 0,
            c_target: params.c,
            c_effective: shape.c_effective(),
            lambda: params.lambda,
            theta: params.theta,
            v_norm: params.v_norm,
            p: shape.p,
            n: shape.n,
            seed: shape.seed,
            mu_emp: f64::NAN,
            sigma2_emp: f64::NAN,
            eta_emp_mc: f64::NAN,
            eta_emp_plugin: f64::NAN,
            mu_theory: prediction.mu,
            sigma2_theory: prediction.sigma_sq,
            eta_theory: prediction.eta,
            c_theory: prediction.c_align,
            centering_mode: centering,
            wall_time_ms: 0.0,
            source: "synthetic".into(),
            status: "ok".into(),
            warning: conditioning_warning(params.c, params.lambda).unwrap_or_default(),
        }
    }

    /// Placeholder row for a failed trial; all numeric outputs are NaN.
    pub fn error_row(params: &ModelParams, p: usize, n: usize, seed: u64, centering: Centering, err: &Error) -> Self {
        Self {
            grid_index: 0,
            trial_index: 0,
            c_target: params.c,
            c_effective: p as f64 / n.max(1) as f64,
            lambda: params.lambda,
            theta: params.theta,
            v_norm: params.v_norm,
            p,
            n,
            seed,
            mu_emp: f64::NAN,
            sigma2_emp: f64::NAN,
            eta_emp_mc: f64::NAN,
            eta_emp_plugin: f64::NAN,
            mu_theory: f64::NAN,
            sigma2_theory: f64::NAN,
            eta_theory: f64::NAN,
            c_theory: f64::NAN,
            centering_mode: centering,
            wall_time_ms: 0.0,
            source: "synthetic".into(),
            status: format!("error: {err}"),
            warning: conditioning_warning(params.c, params.lambda).unwrap_or_default(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn params(&self) -> ModelParams {
        ModelParams { c: self.c_target, lambda: self.lambda, theta: self.theta, v_norm: self.v_norm }
    }
}

/// Flags points where the solve is poorly conditioned: `λ < 0.01` with `c`
/// within 0.25 of the interpolation threshold.
pub fn conditioning_warning(c: f64, lambda: f64) -> Option<String> {
    if lambda < 0.01 && (c - 1.0).abs() <= 0.25 {
        Some(format!("ill-conditioned: lambda={lambda} near interpolation threshold c={c}"))
    } else {
        None
    }
}

/// Run every `(grid point, trial)` job on the current rayon pool.
pub fn run_sweep(grid: &SweepGrid, mode: AxisMode, cfg: &TrialConfig, scheme: SeedScheme) -> Result<Vec<SweepRecord>> {
    grid.validate()?;
    let points = grid_points(grid, mode);
    run_points(&points, grid.p, grid.trials, grid.master_seed, cfg, scheme)
}

/// Run an explicit list of grid points.
pub fn run_points(
    points: &[GridPoint],
    p: usize,
    trials: usize,
    master_seed: u64,
    cfg: &TrialConfig,
    scheme: SeedScheme,
) -> Result<Vec<SweepRecord>> {
    let jobs: Vec<(GridPoint, usize)> = points
        .iter()
        .flat_map(|pt| (0..trials).map(move |t| (*pt, t)))
        .collect();
    let mut records: Vec<SweepRecord> = jobs
        .into_par_iter()
        .map(|(pt, trial)| {
            let seed = scheme.trial_seed(master_seed, pt.index, trial);
            let result = SimShape::from_ratio(p, pt.params.c, seed)
                .and_then(|shape| run_trial(&pt.params, &shape, cfg));
            let mut rec = match result {
                Ok(rec) => rec,
                Err(err) => {
                    let n = ((p as f64 / pt.params.c).round() as usize).max(1);
                    SweepRecord::error_row(&pt.params, p, n, seed, cfg.centering, &err)
                }
            };
            rec.grid_index = pt.index;
            rec.trial_index = trial;
            rec
        })
        .collect();
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [SweepRecord]) {
    records.sort_by_key(|r| (r.grid_index, r.trial_index));
}

/// Summary of one empirical column over the usable trials of a grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl ColumnSummary {
    /// Non-finite values are skipped; an all-NaN column summarises to NaN.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, median: f64::NAN, q25: f64::NAN, q75: f64::NAN };
        }
        v.sort_by(f64::total_cmp);
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            q25: quantile_sorted(&v, 0.25),
            q75: quantile_sorted(&v, 0.75),
        }
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Linear interpolation between the closest ranks: position `h = (n-1)q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-grid-point aggregate, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub grid_index: usize,
    pub c_target: f64,
    pub c_effective: f64,
    pub lambda: f64,
    pub theta: f64,
    pub v_norm: f64,
    pub p: usize,
    pub n: usize,
    pub trials: usize,
    pub error_rows: usize,
    pub mu_emp_mean: f64,
    pub mu_emp_median: f64,
    pub mu_emp_q25: f64,
    pub mu_emp_q75: f64,
    pub sigma2_emp_mean: f64,
    pub sigma2_emp_median: f64,
    pub sigma2_emp_q25: f64,
    pub sigma2_emp_q75: f64,
    pub eta_emp_mc_mean: f64,
    pub eta_emp_mc_median: f64,
    pub eta_emp_mc_q25: f64,
    pub eta_emp_mc_q75: f64,
    pub eta_emp_plugin_mean: f64,
    pub eta_emp_plugin_median: f64,
    pub eta_emp_plugin_q25: f64,
    pub eta_emp_plugin_q75: f64,
    pub mu_theory: f64,
    pub sigma2_theory: f64,
    pub eta_theory: f64,
    #[serde(rename = "C_theory")]
    pub c_theory: f64,
    pub centering_mode: Centering,
    pub source: String,
}

impl AggregateRow {
    pub fn params(&self) -> ModelParams {
        ModelParams { c: self.c_target, lambda: self.lambda, theta: self.theta, v_norm: self.v_norm }
    }

    pub fn summary(&self, column: EmpiricalColumn) -> ColumnSummary {
        let (mean, median, q25, q75) = match column {
            EmpiricalColumn::Mu => (self.mu_emp_mean, self.mu_emp_median, self.mu_emp_q25, self.mu_emp_q75),
            EmpiricalColumn::Sigma2 => (self.sigma2_emp_mean, self.sigma2_emp_median, self.sigma2_emp_q25, self.sigma2_emp_q75),
            EmpiricalColumn::EtaMc => (self.eta_emp_mc_mean, self.eta_emp_mc_median, self.eta_emp_mc_q25, self.eta_emp_mc_q75),
            EmpiricalColumn::EtaPlugin => (
                self.eta_emp_plugin_mean,
                self.eta_emp_plugin_median,
                self.eta_emp_plugin_q25,
                self.eta_emp_plugin_q75,
            ),
        };
        ColumnSummary { mean, median, q25, q75 }
    }

    pub fn theory(&self, column: EmpiricalColumn) -> f64 {
        match column {
            EmpiricalColumn::Mu => self.mu_theory,
            EmpiricalColumn::Sigma2 => self.sigma2_theory,
            EmpiricalColumn::EtaMc | EmpiricalColumn::EtaPlugin => self.eta_theory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmpiricalColumn {
    Mu,
    Sigma2,
    EtaMc,
    EtaPlugin,
}

impl EmpiricalColumn {
    pub fn extract(self, r: &SweepRecord) -> f64 {
        match self {
            EmpiricalColumn::Mu => r.mu_emp,
            EmpiricalColumn::Sigma2 => r.sigma2_emp,
            EmpiricalColumn::EtaMc => r.eta_emp_mc,
            EmpiricalColumn::EtaPlugin => r.eta_emp_plugin,
        }
    }
}

/// Group by `grid_index` (ascending) and summarise; error rows are counted but
/// excluded from every statistic.
pub fn aggregate(records: &[SweepRecord]) -> Result<Vec<AggregateRow>> {
    let mut indices: Vec<usize> = records.iter().map(|r| r.grid_index).collect();
    indices.sort_unstable();
    indices.dedup();
    indices
        .into_iter()
        .map(|g| {
            let group: Vec<&SweepRecord> = records.iter().filter(|r| r.grid_index == g).collect();
            let ok: Vec<&SweepRecord> = group.iter().copied().filter(|r| r.is_ok()).collect();
            let first = *ok.first().ok_or(Error::EmptyGroup(g))?;
            let col = |c: EmpiricalColumn| ColumnSummary::of(&ok.iter().map(|r| c.extract(r)).collect::<Vec<_>>());
            let (mu, s2, em, ep) = (
                col(EmpiricalColumn::Mu),
                col(EmpiricalColumn::Sigma2),
                col(EmpiricalColumn::EtaMc),
                col(EmpiricalColumn::EtaPlugin),
            );
            Ok(AggregateRow {
                grid_index: g,
                c_target: first.c_target,
                c_effective: first.c_effective,
                lambda: first.lambda,
                theta: first.theta,
                v_norm: first.v_norm,
                p: first.p,
                n: first.n,
                trials: ok.len(),
                error_rows: group.len() - ok.len(),
                mu_emp_mean: mu.mean,
                mu_emp_median: mu.median,
                mu_emp_q25: mu.q25,
                mu_emp_q75: mu.q75,
                sigma2_emp_mean: s2.mean,
                sigma2_emp_median: s2.median,
                sigma2_emp_q25: s2.q25,
                sigma2_emp_q75: s2.q75,
                eta_emp_mc_mean: em.mean,
                eta_emp_mc_median: em.median,
                eta_emp_mc_q25: em.q25,
                eta_emp_mc_q75: em.q75,
                eta_emp_plugin_mean: ep.mean,
                eta_emp_plugin_median: ep.median,
                eta_emp_plugin_q25: ep.q25,
                eta_emp_plugin_q75: ep.q75,
                mu_theory: first.mu_theory,
                sigma2_theory: first.sigma2_theory,
                eta_theory: first.eta_theory,
                c_theory: first.c_theory,
                centering_mode: first.centering_mode,
                source: first.source.clone(),
            })
        })
        .collect()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// CSV with a header row, LF line endings and shortest round-trip floats.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    if records.is_empty() {
        let mut w = csv_writer(out);
        w.write_record(RECORD_HEADER)?;
        w.flush()?;
        return Ok(());
    }
    write_csv(out, records)
}

/// One JSON object per line. Non-finite floats become `null`.
pub fn write_json_lines<W: Write, T: Serialize>(mut out: W, rows: &[T]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a sweep CSV, insisting on the exact record header.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got.is_empty() || got.len() == 1 && got[0].is_empty() {
        return Err(Error::SchemaMismatch("empty input".into()));
    }
    if got != RECORD_HEADER {
        return Err(Error::SchemaMismatch(format!("unexpected header {got:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row.map_err(|e| Error::SchemaMismatch(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::SchemaMismatch("no records".into()));
    }
    Ok(out)
}
