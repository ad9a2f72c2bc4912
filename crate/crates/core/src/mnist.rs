//! MNIST IDX ingestion and the 0-vs-1 pixel-patch backdoor experiment.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Stream};
use crate::simulator::{self, Centering, PoisonedDataset, SimShape};
use crate::sweep::SweepRecord;
use crate::theory::{self, ModelParams};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, image after image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for word in [IMAGE_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&word.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let word = bytes
        .get(at..at + 4)
        .ok_or(Error::TruncatedFile { needed: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes([word[0], word[1], word[2], word[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { needed, found: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::InvalidParameter(format!(
            "IDX payload has {} trailing bytes",
            bytes.len() - needed
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    check_len(bytes, 16 + count * rows * cols)?;
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + count)?;
    Ok(bytes[8..].to_vec())
}

pub fn labels_to_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// Load `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` from a directory.
pub fn load_training_set(dir: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let images = load_images(&dir.join("train-images-idx3-ubyte"))?;
    let labels = load_labels(&dir.join("train-labels-idx1-ubyte"))?;
    Ok((images, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// Raw bytes 0..=255.
    Raw,
    /// Divided by 255.
    #[default]
    Unit,
}

impl PixelScale {
    pub fn as_str(self) -> &'static str {
        match self {
            PixelScale::Raw => "raw",
            PixelScale::Unit => "unit",
        }
    }

    fn factor(self) -> f64 {
        match self {
            PixelScale::Raw => 1.0,
            PixelScale::Unit => 1.0 / 255.0,
        }
    }
}

/// Two-digit task: `digit_neg → -1`, `digit_pos → +1`, samples as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTask {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub scale: PixelScale,
    pub digit_neg: u8,
    pub digit_pos: u8,
}

impl BinaryTask {
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn c_effective(&self) -> f64 {
        self.p() as f64 / self.n() as f64
    }
}

pub fn build_binary_task(
    images: &IdxImages,
    labels: &[u8],
    digit_neg: u8,
    digit_pos: u8,
    scale: PixelScale,
) -> Result<BinaryTask> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch { images: images.count, labels: labels.len() });
    }
    for d in [digit_neg, digit_pos] {
        if !labels.contains(&d) {
            return Err(Error::NoSamplesForDigit(d));
        }
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == digit_neg || labels[i] == digit_pos).collect();
    let p = images.rows * images.cols;
    let f = scale.factor();
    let mut x = DMatrix::zeros(p, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        for (k, &px) in images.image(i).iter().enumerate() {
            x[(k, j)] = px as f64 * f;
        }
    }
    let y = DVector::from_iterator(keep.len(), keep.iter().map(|&i| if labels[i] == digit_pos { 1.0 } else { -1.0 }));
    Ok(BinaryTask { x, y, scale, digit_neg, digit_pos })
}

/// Constant square patch, flattened row-major and rescaled to a target norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrigger {
    pub offset: (usize, usize),
    pub size: usize,
    /// Per-pixel intensity after rescaling.
    pub intensity: f64,
    pub v: DVector<f64>,
    pub v_norm_target: f64,
}

impl PatchTrigger {
    /// Flat indices covered by the patch.
    pub fn support(&self) -> Vec<usize> {
        let (r0, c0) = self.offset;
        (r0..r0 + self.size)
            .flat_map(|r| (c0..c0 + self.size).map(move |c| r * SIDE + c))
            .collect()
    }
}

pub fn make_patch_trigger(offset: (usize, usize), size: usize, v_norm_target: f64) -> Result<PatchTrigger> {
    let (row, col) = offset;
    if size == 0 || row + size > SIDE || col + size > SIDE {
        return Err(Error::PatchOutOfBounds { row, col, size, rows: SIDE, cols: SIDE });
    }
    if !(v_norm_target >= 0.0 && v_norm_target.is_finite()) {
        return Err(Error::InvalidParameter(format!("trigger norm must be finite and nonnegative, got {v_norm_target}")));
    }
    let intensity = v_norm_target / size as f64;
    let mut trig = PatchTrigger { offset, size, intensity, v: DVector::zeros(PIXELS), v_norm_target };
    for k in trig.support() {
        trig.v[k] = intensity;
    }
    Ok(trig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnistConfig {
    pub theta: f64,
    pub lambda: f64,
    pub subsample_n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Poison the `digit_pos` class and relabel it `digit_neg` instead.
    pub swap_classes: bool,
}

/// Source tag written to every MNIST row, e.g. `mnist:unit` or `mnist:unit:swap`.
pub fn source_tag(scale: PixelScale, swap: bool) -> String {
    format!("mnist:{}{}", scale.as_str(), if swap { ":swap" } else { "" })
}

/// Per trial: a seeded permutation of the task, of which the first
/// `subsample_n` columns are kept (so smaller subsamples are prefixes of
/// larger ones), poisoning at rate `θ`, empirical centring and the ridge
/// solve. Theory is evaluated at `c = 784/subsample_n`. With `swap_classes`
/// the label map is reversed before poisoning, so `mu_emp` is always measured
/// towards the poison target label.
pub fn run_mnist_experiment(task: &BinaryTask, trigger: &PatchTrigger, cfg: &MnistConfig) -> Result<Vec<SweepRecord>> {
    if cfg.subsample_n > task.n() {
        return Err(Error::SubsampleTooLarge { requested: cfg.subsample_n, available: task.n() });
    }
    if cfg.subsample_n == 0 || cfg.trials == 0 {
        return Err(Error::InvalidParameter("subsample_n and trials must be positive".into()));
    }
    if trigger.v.len() != task.p() {
        return Err(Error::InvalidParameter("trigger length differs from the pixel count".into()));
    }
    let params = ModelParams::new(
        task.p() as f64 / cfg.subsample_n as f64,
        cfg.lambda,
        cfg.theta,
        trigger.v_norm_target,
    )?;
    let prediction = theory::predict(&params)?;
    let source = source_tag(task.scale, cfg.swap_classes);

    let mut records: Vec<SweepRecord> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(&[cfg.seed, t as u64]);
            let shape = SimShape::new(task.p(), cfg.subsample_n, seed)?;
            let mut rec = SweepRecord::from_parts(&params, &shape, &prediction, Centering::Empirical);
            rec.trial_index = t;
            rec.source = source.clone();
            match mnist_trial(task, trigger, cfg, seed, &params) {
                Ok((mu, s2)) => {
                    rec.mu_emp = mu;
                    rec.sigma2_emp = s2;
                    rec.eta_emp_plugin = simulator::plugin_efficacy(mu, s2);
                }
                Err(e) => rec.status = format!("error: {e}"),
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.trial_index);
    Ok(records)
}

/// One MNIST grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnistPoint {
    pub theta: f64,
    pub lambda: f64,
    pub subsample_n: usize,
}

/// Run every point with the same trial seeds, so points differ only in the
/// parameter being varied. Rows carry their point's position as `grid_index`.
pub fn run_mnist_grid(
    task: &BinaryTask,
    trigger: &PatchTrigger,
    points: &[MnistPoint],
    trials: usize,
    seed: u64,
    swap_classes: bool,
) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::with_capacity(points.len() * trials);
    for (g, pt) in points.iter().enumerate() {
        let cfg = MnistConfig {
            theta: pt.theta,
            lambda: pt.lambda,
            subsample_n: pt.subsample_n,
            trials,
            seed,
            swap_classes,
        };
        for mut rec in run_mnist_experiment(task, trigger, &cfg)? {
            rec.grid_index = g;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Subsample size giving `784/n ≈ c`.
pub fn subsample_for_ratio(c: f64) -> usize {
    ((PIXELS as f64 / c).round() as usize).max(1)
}

/// Seeded permutation of `0..n`.
pub fn subsample_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Subsample));
    idx
}

fn mnist_trial(task: &BinaryTask, trigger: &PatchTrigger, cfg: &MnistConfig, seed: u64, params: &ModelParams) -> Result<(f64, f64)> {
    let order = subsample_order(task.n(), seed);
    let cols = &order[..cfg.subsample_n];
    let x = task.x.select_columns(cols);
    let sign = if cfg.swap_classes { -1.0 } else { 1.0 };
    let y = DVector::from_iterator(cols.len(), cols.iter().map(|&j| sign * task.y[j]));
    let mut data: PoisonedDataset = simulator::apply_poison(x, y, params.theta, &trigger.v, seed)?;
    data.centering = Centering::Empirical;
    let c = simulator::center(&data, params.theta);
    let sol = simulator::solve_ridge(&c.x_tilde, &c.w_tilde, params.lambda, &c.x_bar, c.w_bar)?;
    Ok((sol.mu_emp(&trigger.v), sol.sigma_sq_emp()))
}
