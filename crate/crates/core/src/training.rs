//! Minibatch training, evaluation, multi-seed sweeps and the
//! network-versus-solver benchmark.

use std::cell::Cell;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamaxConfig, AdamaxState, AutodiffError, MlpModel, Tape, DEFAULT_HIDDEN, EXP_CLAMP};
use crate::io::{self as bio, fmt_f64, FormatError};
use crate::linalg::{self, DenseMatrix, LinalgError, SpectrumDirection};
use crate::losses::{
    self, combined_objective, LabelVars, LossBatch, LossError, LossWeights, Mode, MtlTerm,
    ObjectiveConfig, PredictionVars, Reduction, TrainLossKind,
};
use crate::quantum_data::{subsample_train, DataError, DatasetBundle, SampleRecord};

const STREAM_SHUFFLE: u64 = 11;
const STREAM_UNLABELED: u64 = 12;
const STREAM_MTL: u64 = 13;

const SNAPSHOT_MAGIC: &str = "PGEIGEN-SNAPSHOTS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training request: {0}")]
    Invalid(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: u32,
        step: usize,
    },
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: u32,
        step: usize,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Format(FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Hidden layer widths. Input and output widths follow from the data.
    pub hidden: Vec<usize>,
    pub epochs: u32,
    /// Minibatch size; `None` trains on the full set each step.
    pub batch_size: Option<usize>,
    pub optimizer: AdamaxConfig,
    pub weights: LossWeights,
    pub direction: SpectrumDirection,
    pub mode: Mode,
    pub train_loss: TrainLossKind,
    /// S-Loss enters the objective as a batch sum by default.
    pub s_reduction: Reduction,
    pub seed: u64,
    /// Keep flattened parameters every this many epochs (and at the last
    /// epoch). `0` keeps none.
    pub snapshot_every: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            epochs: 500,
            batch_size: Some(128),
            optimizer: AdamaxConfig {
                lr: 5e-3,
                ..AdamaxConfig::default()
            },
            weights: LossWeights::default(),
            direction: SpectrumDirection::Smallest,
            mode: Mode::Cophy,
            train_loss: TrainLossKind::Mse,
            s_reduction: Reduction::Sum,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0 && o.eps.is_finite()) {
            return bad("eps must be positive".into());
        }
        for spec in [&self.weights.lambda_c, &self.weights.lambda_s] {
            spec.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
        }
        for c in [self.weights.constant_c, self.weights.constant_s] {
            if !(c >= 0.0 && c.is_finite()) {
                return bad(format!("constant weight {c} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Layer widths for a chain of `n_spins` spins.
    pub fn dims(&self, n_spins: usize) -> Vec<usize> {
        MlpModel::default_dims(n_spins, &self.hidden)
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            mode: self.mode,
            weights: self.weights,
            direction: self.direction,
            train_loss: self.train_loss,
            s_reduction: self.s_reduction,
        }
    }
}

/// A split as dense row-major matrices.
#[derive(Debug, Clone)]
pub(crate) struct SplitData {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub b: DenseMatrix,
}

impl SplitData {
    pub fn new(records: &[SampleRecord], d: usize) -> Result<Self> {
        let n = records.len();
        let mut x = Vec::with_capacity(n * d * d);
        let mut y = Vec::with_capacity(n * d);
        let mut b = Vec::with_capacity(n);
        for r in records {
            if r.dim() != d || r.features.len() != d * d {
                return Err(TrainError::Invalid(format!(
                    "record dimension {} does not match {d}",
                    r.dim()
                )));
            }
            x.extend_from_slice(&r.features);
            y.extend_from_slice(&r.y);
            b.push(r.b);
        }
        Ok(Self {
            x: DenseMatrix::from_vec(n, d * d, x)?,
            y: DenseMatrix::from_vec(n, d, y)?,
            b: DenseMatrix::from_vec(n, 1, b)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.y.cols()
    }
}

fn gather_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let cols = m.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    DenseMatrix::from_vec(idx.len(), cols, data).expect("gathered shape")
}

fn stack_rows(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    DenseMatrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("stacked shape")
}

/// Training labels behind an access counter. Every target row handed out
/// counts as one read.
struct CountedLabels<'a> {
    y: &'a DenseMatrix,
    b: &'a DenseMatrix,
    reads: Cell<usize>,
}

impl<'a> CountedLabels<'a> {
    fn new(split: &'a SplitData) -> Self {
        Self {
            y: &split.y,
            b: &split.b,
            reads: Cell::new(0),
        }
    }

    fn gather(&self, idx: &[usize]) -> (DenseMatrix, DenseMatrix) {
        self.reads.set(self.reads.get() + idx.len());
        (gather_rows(self.y, idx), gather_rows(self.b, idx))
    }
}

/// Uniform pick of the single active term for a multi-task minibatch.
pub fn draw_mtl_term<R: Rng + ?Sized>(rng: &mut R) -> MtlTerm {
    MtlTerm::ALL[rng.random_range(0..MtlTerm::ALL.len())]
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Full-data losses of one parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// C-Loss over the mode's PG set (training plus unlabeled rows, or
    /// training rows alone).
    pub c_loss: f64,
    /// Per-row mean of `exp(±b̂)` over the PG set.
    pub s_loss: f64,
    /// Label term as optimized: MSE, or the summed L1 loss.
    pub train_loss: f64,
    /// Rows in the PG set.
    pub pg_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub objective: f64,
    pub metrics: EpochMetrics,
    /// `exp` arguments clamped during this epoch's updates.
    pub exp_clamps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: u32,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub mode: Mode,
    pub seed: u64,
    /// One row per completed epoch.
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Epoch with the lowest validation MSE.
    pub best_epoch: u32,
    pub best_val_mse: f64,
    /// Target rows read by the optimizer.
    pub label_reads: usize,
    pub exp_clamps: usize,
    /// Minibatches assigned to Train, C and S in multi-task mode.
    pub mtl_counts: [usize; 3],
    pub steps: u64,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

impl RunLog {
    pub fn final_metrics(&self) -> Option<EpochMetrics> {
        self.records.last().map(|r| r.metrics)
    }

    pub const CSV_HEADER: &'static str =
        "epoch,lambda_c,lambda_s,objective,train_mse,val_mse,test_mse,c_loss,s_loss,exp_clamps";

    /// Per-epoch CSV. Timings are left out so that reruns match byte for byte.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let m = &r.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f64(r.lambda_c),
                fmt_f64(r.lambda_s),
                fmt_f64(r.objective),
                fmt_f64(m.train_mse),
                fmt_f64(m.val_mse),
                fmt_f64(m.test_mse),
                fmt_f64(m.c_loss),
                fmt_f64(m.s_loss),
                r.exp_clamps
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub best_model: MlpModel,
    pub log: RunLog,
}

/// Prepared splits plus the objective settings; evaluates full-data losses
/// and per-term gradients for arbitrary parameter vectors.
#[derive(Debug, Clone)]
pub struct LossProbe {
    dims: Vec<usize>,
    cfg: ObjectiveConfig,
    train: SplitData,
    validation: SplitData,
    test: SplitData,
}

/// Loss terms that can be probed in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTerm {
    TrainMse,
    TestMse,
    CLoss,
    SLoss,
}

impl ProbeTerm {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTerm::TrainMse => "train_mse",
            ProbeTerm::TestMse => "test_mse",
            ProbeTerm::CLoss => "c_loss",
            ProbeTerm::SLoss => "s_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::TrainMse, Self::TestMse, Self::CLoss, Self::SLoss]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

impl std::fmt::Display for ProbeTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl LossProbe {
    pub fn new(config: &TrainingConfig, bundle: &DatasetBundle) -> Result<Self> {
        let d = bundle.dim();
        Ok(Self {
            dims: config.dims(bundle.meta.n),
            cfg: config.objective(),
            train: SplitData::new(&bundle.train, d)?,
            validation: SplitData::new(&bundle.validation, d)?,
            test: SplitData::new(&bundle.test, d)?,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn uses_unlabeled(&self) -> bool {
        self.cfg.mode.uses_unlabeled() && self.test.len() > 0
    }

    pub fn metrics(&self, model: &MlpModel) -> Result<EpochMetrics> {
        let p_train = model.predict_batch(&self.train.x)?;
        let p_test = model.predict_batch(&self.test.x)?;
        let train_mse = mse_sum(&p_train, &self.train) / self.train.len() as f64;
        let val_mse = if self.validation.len() == 0 {
            f64::NAN
        } else {
            let p_val = model.predict_batch(&self.validation.x)?;
            mse_sum(&p_val, &self.validation) / self.validation.len() as f64
        };
        let test_mse = if self.test.len() == 0 {
            f64::NAN
        } else {
            mse_sum(&p_test, &self.test) / self.test.len() as f64
        };
        let (mut c, mut s) = pg_sums(&p_train, &self.train.x, self.cfg.direction);
        let mut count = self.train.len();
        if self.uses_unlabeled() {
            let (cu, su) = pg_sums(&p_test, &self.test.x, self.cfg.direction);
            c += cu;
            s += su;
            count += self.test.len();
        }
        let train_loss = match self.cfg.train_loss {
            TrainLossKind::Mse => train_mse,
            TrainLossKind::L1 => l1_sum(&p_train, &self.train),
        };
        Ok(EpochMetrics {
            train_mse,
            val_mse,
            test_mse,
            c_loss: c / count as f64,
            s_loss: s / count as f64,
            train_loss,
            pg_rows: count,
        })
    }

    /// Objective value as logged: label term plus the weighted PG terms at
    /// epoch `t`, with S-Loss reduced over the whole PG set as configured.
    /// Multi-task mode logs the sum of all three terms.
    pub fn objective(&self, m: &EpochMetrics, t: u32) -> (f64, f64, f64) {
        let (lc, ls) = self.cfg.weights.at(self.cfg.mode, t);
        let mut total = if self.cfg.mode.uses_train_loss() {
            m.train_loss
        } else {
            0.0
        };
        if lc != 0.0 {
            total += lc * m.c_loss;
        }
        if ls != 0.0 {
            total += match self.cfg.s_reduction {
                Reduction::Mean => ls * m.s_loss,
                Reduction::Sum => ls * (m.s_loss * m.pg_rows as f64),
            };
        }
        (total, lc, ls)
    }

    /// Full-data value of a single term.
    pub fn term_value(&self, params: &[f64], term: ProbeTerm) -> Result<f64> {
        let model = MlpModel::unflatten(&self.dims, params)?;
        let split = match term {
            ProbeTerm::TestMse => &self.test,
            _ => &self.train,
        };
        if split.len() == 0 {
            return Err(TrainError::Invalid("probe split is empty".into()));
        }
        match term {
            ProbeTerm::TrainMse | ProbeTerm::TestMse => {
                let p = model.predict_batch(&split.x)?;
                Ok(mse_sum(&p, split) / split.len() as f64)
            }
            ProbeTerm::CLoss | ProbeTerm::SLoss => {
                let m = self.metrics(&model)?;
                Ok(if term == ProbeTerm::CLoss { m.c_loss } else { m.s_loss })
            }
        }
    }

    /// Full-data gradient of Train-MSE (labeled rows) or of C-Loss / S-Loss
    /// (the mode's PG set). All three are per-row means here.
    pub fn term_gradient(&self, params: &[f64], term: ProbeTerm) -> Result<Vec<f64>> {
        let model = MlpModel::unflatten(&self.dims, params)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (split, with_unlabeled) = match term {
            ProbeTerm::TrainMse => (&self.train, false),
            ProbeTerm::TestMse => (&self.test, false),
            ProbeTerm::CLoss | ProbeTerm::SLoss => (&self.train, self.uses_unlabeled()),
        };
        let x_all = if with_unlabeled {
            stack_rows(&split.x, &self.test.x)
        } else {
            split.x.clone()
        };
        let x = tape.constant(x_all);
        let out = model.forward(&mut tape, &bound, x)?;
        let pred = PredictionVars::split(&mut tape, out)?;
        let labels = matches!(term, ProbeTerm::TrainMse | ProbeTerm::TestMse).then(|| LabelVars {
            y: tape.constant(split.y.clone()),
            b: tape.constant(split.b.clone()),
        });
        let batch = LossBatch {
            matrices: x,
            pred,
            labels,
        };
        let loss = match term {
            ProbeTerm::TrainMse | ProbeTerm::TestMse => losses::train_mse(&mut tape, &batch)?,
            ProbeTerm::CLoss => losses::c_loss(&mut tape, &batch)?,
            ProbeTerm::SLoss => losses::s_loss(&mut tape, &batch, self.cfg.direction),
        };
        let grads = tape.backward(loss)?;
        Ok(model.gather_grads(&bound, &grads))
    }
}

fn mse_sum(pred: &DenseMatrix, split: &SplitData) -> f64 {
    let d = split.dim();
    (0..split.len())
        .map(|i| {
            let p = pred.row(i);
            let dy: f64 = p[..d]
                .iter()
                .zip(split.y.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let db = p[d] - split.b.as_slice()[i];
            dy + db * db
        })
        .sum()
}

fn l1_sum(pred: &DenseMatrix, split: &SplitData) -> f64 {
    let d = split.dim();
    (0..split.len())
        .map(|i| {
            let p = pred.row(i);
            let y = split.y.row(i);
            let vec_err: f64 = p[..d].iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
            let val_err = d as f64 * (p[d] - split.b.as_slice()[i]).abs();
            vec_err + val_err + (linalg::norm(&p[..d]) - linalg::norm(y))
        })
        .sum()
}

/// `‖Â ŷ − b̂ ŷ‖²` for one flattened matrix and raw output row.
fn residual_norm_sq(matrix: &[f64], out: &[f64]) -> f64 {
    let d = out.len() - 1;
    let (y, b) = (&out[..d], out[d]);
    (0..d)
        .map(|r| {
            let ay = linalg::dot(&matrix[r * d..(r + 1) * d], y);
            let v = ay - b * y[r];
            v * v
        })
        .sum()
}

fn pg_sums(pred: &DenseMatrix, x: &DenseMatrix, direction: SpectrumDirection) -> (f64, f64) {
    let mut c = 0.0;
    let mut s = 0.0;
    for i in 0..pred.rows() {
        let out = pred.row(i);
        let d = out.len() - 1;
        let y2: f64 = out[..d].iter().map(|v| v * v).sum();
        c += residual_norm_sq(x.row(i), out) / y2;
        let arg = match direction {
            SpectrumDirection::Smallest => out[d],
            SpectrumDirection::Largest => -out[d],
        };
        s += arg.min(EXP_CLAMP).exp();
    }
    (c, s)
}

/// Trains a fresh model on `bundle` under `config`.
pub fn train(config: &TrainingConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    config.validate()?;
    if bundle.train.is_empty() {
        return Err(TrainError::Invalid("training split is empty".into()));
    }
    if config.mode.uses_unlabeled() && bundle.test.is_empty() {
        return Err(TrainError::Invalid(format!(
            "mode {} needs an unlabeled pool but the test split is empty",
            config.mode
        )));
    }
    let probe = LossProbe::new(config, bundle)?;
    let dims = probe.dims.clone();
    let mut model = MlpModel::init(&dims, config.seed)?;
    if model.input_dim() != bundle.dim() * bundle.dim() {
        return Err(TrainError::Invalid("model input does not match dataset".into()));
    }
    let mut opt = AdamaxState::new(config.optimizer, model.num_params());
    let obj_cfg = config.objective();
    let labels = CountedLabels::new(&probe.train);

    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut unlabeled_rng = stream_rng(config.seed, STREAM_UNLABELED);
    let mut mtl_rng = stream_rng(config.seed, STREAM_MTL);

    let n = probe.train.len();
    let n_u = probe.test.len();
    let bs = config.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();

    let mut records = Vec::with_capacity(config.epochs as usize);
    let mut snapshots = Vec::new();
    let mut best: Option<(u32, f64, Vec<f64>)> = None;
    let mut mtl_counts = [0usize; 3];
    let mut total_clamps = 0usize;
    let mut epoch_seconds = Vec::with_capacity(config.epochs as usize);
    let started = Instant::now();

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_clamps = 0usize;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let mtl_term = (config.mode == Mode::MtlPgnn).then(|| {
                let term = draw_mtl_term(&mut mtl_rng);
                mtl_counts[MtlTerm::ALL.iter().position(|&t| t == term).unwrap()] += 1;
                term
            });
            let u_idx = if config.mode.uses_unlabeled() {
                Some(index::sample(&mut unlabeled_rng, n_u, chunk.len().min(n_u)).into_vec())
            } else {
                None
            };

            let (mut lc, mut ls) = obj_cfg.weights.at(config.mode, epoch);
            let mut needs_labels = config.mode.uses_train_loss();
            if let Some(term) = mtl_term {
                needs_labels = term == MtlTerm::Train;
                lc = if term == MtlTerm::C { lc } else { 0.0 };
                ls = if term == MtlTerm::S { ls } else { 0.0 };
            }
            let u_idx = u_idx.filter(|_| lc != 0.0 || ls != 0.0);

            let bl = chunk.len();
            let xl = gather_rows(&probe.train.x, chunk);
            let x_all = match &u_idx {
                Some(u) => stack_rows(&xl, &gather_rows(&probe.test.x, u)),
                None => xl,
            };
            let rows = x_all.rows();

            let mut tape = Tape::new();
            let x = tape.constant(x_all);
            let bound = model.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, x)?;
            let step_err = |source| TrainError::Step { epoch, step, source };

            let out_l = tape.slice_rows(out, 0, bl)?;
            let labeled = LossBatch {
                matrices: tape.slice_rows(x, 0, bl)?,
                pred: PredictionVars::split(&mut tape, out_l).map_err(step_err)?,
                labels: if needs_labels {
                    let (y, b) = labels.gather(chunk);
                    Some(LabelVars {
                        y: tape.constant(y),
                        b: tape.constant(b),
                    })
                } else {
                    None
                },
            };
            let unlabeled = if u_idx.is_some() {
                let out_u = tape.slice_rows(out, bl, rows)?;
                Some(LossBatch {
                    matrices: tape.slice_rows(x, bl, rows)?,
                    pred: PredictionVars::split(&mut tape, out_u).map_err(step_err)?,
                    labels: None,
                })
            } else {
                None
            };

            let objective = combined_objective(
                &mut tape,
                epoch,
                &labeled,
                unlabeled.as_ref(),
                &obj_cfg,
                mtl_term,
            )
            .map_err(step_err)?;
            if !tape.scalar(objective.total).is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    step,
                });
            }
            let grads = tape.backward(objective.total)?;
            let g = model.gather_grads(&bound, &grads);
            opt.step(model.params_mut(), &g).map_err(|e| match e {
                AutodiffError::NonFiniteGradient(_) => TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    step,
                },
                other => other.into(),
            })?;
            epoch_clamps += tape.exp_clamps();
        }
        total_clamps += epoch_clamps;

        let metrics = probe.metrics(&model)?;
        let (objective, lambda_c, lambda_s) = probe.objective(&metrics, epoch);
        records.push(EpochRecord {
            epoch,
            lambda_c,
            lambda_s,
            objective,
            metrics,
            exp_clamps: epoch_clamps,
        });
        if best.as_ref().is_none_or(|(_, v, _)| metrics.val_mse < *v) {
            best = Some((epoch, metrics.val_mse, model.params().to_vec()));
        }
        let last = epoch + 1 == config.epochs;
        if config.snapshot_every > 0 && ((epoch + 1) % config.snapshot_every == 0 || last) {
            snapshots.push(Snapshot {
                epoch,
                params: model.params().to_vec(),
            });
        }
        epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
    }

    let (best_epoch, best_val_mse, best_params) = best.expect("at least one epoch");
    // Without a validation split every comparison fails; fall back to the
    // final model.
    let (best_epoch, best_params) = if best_val_mse.is_nan() {
        (config.epochs - 1, model.params().to_vec())
    } else {
        (best_epoch, best_params)
    };
    let best_model = MlpModel::unflatten(&dims, &best_params)?;
    Ok(TrainOutcome {
        model,
        best_model,
        log: RunLog {
            mode: config.mode,
            seed: config.seed,
            records,
            snapshots,
            best_epoch,
            best_val_mse,
            label_reads: labels.reads.get(),
            exp_clamps: total_clamps,
            mtl_counts,
            steps: opt.steps(),
            epoch_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Per-sample evaluation row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub bx: f64,
    /// `‖ŷ − y‖² + (b̂ − b)²`
    pub sq_error: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `NaN` for an empty bin.
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub mean_cosine: f64,
    pub bin_width: f64,
    pub bins: Vec<BinStat>,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    pub fn write_summary_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "samples,test_mse,mean_cosine")?;
        writeln!(
            w,
            "{},{},{}",
            self.samples.len(),
            fmt_f64(self.mse),
            fmt_f64(self.mean_cosine)
        )
    }

    pub fn write_bins_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bx_lo,bx_hi,count,mean_cosine")?;
        for b in &self.bins {
            writeln!(w, "{},{},{},{}", fmt_f64(b.lo), fmt_f64(b.hi), b.count, fmt_f64(b.mean_cosine))?;
        }
        Ok(())
    }

    pub fn write_samples_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bx,sq_error,cosine")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", fmt_f64(s.bx), fmt_f64(s.sq_error), fmt_f64(s.cosine))?;
        }
        Ok(())
    }
}

/// Test MSE, cosine similarity and its per-`B_x` profile of `model` on
/// `records`.
pub fn evaluate(model: &MlpModel, records: &[SampleRecord], bin_width: f64) -> Result<EvalReport> {
    let d = records.first().map(SampleRecord::dim).unwrap_or(0);
    let split = SplitData::new(records, d)?;
    let preds = model.predict_batch(&split.x)?;
    evaluate_predictions(records, &preds, bin_width)
}

/// As [`evaluate`], for precomputed raw outputs (`N × (d + 1)`).
pub fn evaluate_predictions(
    records: &[SampleRecord],
    preds: &DenseMatrix,
    bin_width: f64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(TrainError::Invalid("cannot evaluate an empty split".into()));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(TrainError::Invalid(format!("bin width {bin_width} must be positive")));
    }
    let d = records[0].dim();
    if preds.rows() != records.len() || preds.cols() != d + 1 {
        return Err(TrainError::Invalid(format!(
            "predictions are {}x{}, expected {}x{}",
            preds.rows(),
            preds.cols(),
            records.len(),
            d + 1
        )));
    }
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let p = preds.row(i);
        let dy: f64 = p[..d].iter().zip(r.y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let db = p[d] - r.b;
        samples.push(SampleEval {
            bx: r.spec.bx,
            sq_error: dy + db * db,
            cosine: linalg::cosine_similarity(&p[..d], &r.y)?,
        });
    }
    let n = samples.len() as f64;
    let mse = samples.iter().map(|s| s.sq_error).sum::<f64>() / n;
    let mean_cosine = samples.iter().map(|s| s.cosine).sum::<f64>() / n;

    let key = |bx: f64| (bx / bin_width).floor() as i64;
    let k_lo = samples.iter().map(|s| key(s.bx)).min().expect("non-empty");
    let k_hi = samples.iter().map(|s| key(s.bx)).max().expect("non-empty");
    let mut sums = vec![(0usize, 0.0f64); (k_hi - k_lo + 1) as usize];
    for s in &samples {
        let slot = &mut sums[(key(s.bx) - k_lo) as usize];
        slot.0 += 1;
        slot.1 += s.cosine;
    }
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(j, (count, sum))| {
            let k = k_lo + j as i64;
            BinStat {
                lo: k as f64 * bin_width,
                hi: (k + 1) as f64 * bin_width,
                count,
                mean_cosine: if count == 0 { f64::NAN } else { sum / count as f64 },
            }
        })
        .collect();
    Ok(EvalReport {
        mse,
        mean_cosine,
        bin_width,
        bins,
        samples,
    })
}

/// Final and best-validation test metrics of one sweep run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub final_mse: f64,
    pub final_cosine: f64,
    pub best_mse: f64,
    pub best_cosine: f64,
    pub best_epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub n_train: usize,
    pub seed: u64,
    /// Error text for a failed run.
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub mode: Mode,
    pub n_train: usize,
    pub runs: usize,
    pub failures: usize,
    pub final_mse: MeanStd,
    pub final_cosine: MeanStd,
    pub best_mse: MeanStd,
    pub best_cosine: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<AggregateRow>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "mode,n_train,runs,failures,\
test_mse_mean,test_mse_std,cosine_mean,cosine_std,\
best_test_mse_mean,best_test_mse_std,best_cosine_mean,best_cosine_std";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.mode,
                r.n_train,
                r.runs,
                r.failures,
                fmt_f64(r.final_mse.mean),
                fmt_f64(r.final_mse.std),
                fmt_f64(r.final_cosine.mean),
                fmt_f64(r.final_cosine.std),
                fmt_f64(r.best_mse.mean),
                fmt_f64(r.best_mse.std),
                fmt_f64(r.best_cosine.mean),
                fmt_f64(r.best_cosine.std),
            )?;
        }
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "mode,n_train,seed,status,test_mse,cosine,best_test_mse,best_cosine,best_epoch")?;
        for r in &self.runs {
            match &r.outcome {
                Ok(m) => writeln!(
                    w,
                    "{},{},{},ok,{},{},{},{},{}",
                    r.mode,
                    r.n_train,
                    r.seed,
                    fmt_f64(m.final_mse),
                    fmt_f64(m.final_cosine),
                    fmt_f64(m.best_mse),
                    fmt_f64(m.best_cosine),
                    m.best_epoch
                )?,
                Err(e) => writeln!(
                    w,
                    "{},{},{},\"failed: {}\",,,,,",
                    r.mode,
                    r.n_train,
                    r.seed,
                    e.replace('"', "'")
                )?,
            }
        }
        Ok(())
    }
}

/// Trains every `(mode, size, seed)` combination, each on a training subset
/// of `size` records drawn with `seed`, and aggregates the final test metrics
/// per `(mode, size)`. Failed runs are kept in the report and counted.
/// `jobs` bounds the worker threads (`None`: rayon's default).
pub fn multi_run(
    config: &TrainingConfig,
    bundle: &DatasetBundle,
    modes: &[Mode],
    seeds: &[u64],
    sizes: &[usize],
    jobs: Option<usize>,
) -> Result<SweepReport> {
    config.validate()?;
    if modes.is_empty() || seeds.is_empty() || sizes.is_empty() {
        return Err(TrainError::Invalid("modes, seeds and sizes must be non-empty".into()));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > bundle.train.len()) {
        return Err(TrainError::Invalid(format!(
            "training size {n} outside 1..={}",
            bundle.train.len()
        )));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &n in sizes {
            for &seed in seeds {
                cells.push((mode, n, seed));
            }
        }
    }
    let run_one = |&(mode, n, seed): &(Mode, usize, u64)| -> RunSummary {
        let outcome = (|| -> Result<RunMetrics> {
            let sub = subsample_train(bundle, n, seed)?;
            let cfg = TrainingConfig {
                mode,
                seed,
                snapshot_every: 0,
                ..config.clone()
            };
            let out = train(&cfg, &sub)?;
            let fin = evaluate(&out.model, &sub.test, 0.1)?;
            let best = evaluate(&out.best_model, &sub.test, 0.1)?;
            Ok(RunMetrics {
                final_mse: fin.mse,
                final_cosine: fin.mean_cosine,
                best_mse: best.mse,
                best_cosine: best.mean_cosine,
                best_epoch: out.log.best_epoch,
            })
        })()
        .map_err(|e| e.to_string());
        RunSummary {
            mode,
            n_train: n,
            seed,
            outcome,
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(TrainError::Invalid("jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| TrainError::Invalid(format!("thread pool: {e}")))?;
    let runs: Vec<RunSummary> = pool.install(|| cells.par_iter().map(run_one).collect());

    let mut rows = Vec::new();
    for &mode in modes {
        for &n in sizes {
            let cell: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode && r.n_train == n).collect();
            let ok: Vec<RunMetrics> = cell.iter().filter_map(|r| r.outcome.clone().ok()).collect();
            let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&ok.iter().map(f).collect::<Vec<_>>());
            rows.push(AggregateRow {
                mode,
                n_train: n,
                runs: cell.len(),
                failures: cell.len() - ok.len(),
                final_mse: col(|m| m.final_mse),
                final_cosine: col(|m| m.final_cosine),
                best_mse: col(|m| m.best_mse),
                best_cosine: col(|m| m.best_cosine),
            });
        }
    }
    Ok(SweepReport { runs, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub matrices: usize,
    pub repetitions: usize,
    /// Mean seconds for one pass over all matrices.
    pub mean_seconds: f64,
    pub seconds_per_matrix: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `‖Â ŷ − b̂ ŷ‖` per matrix, raw network outputs.
    pub network_residuals: Vec<f64>,
    pub solver_residuals: Vec<f64>,
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "method,matrices,repetitions,mean_seconds,seconds_per_matrix,mean_residual")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.method,
                r.matrices,
                r.repetitions,
                fmt_f64(r.mean_seconds),
                fmt_f64(r.seconds_per_matrix),
                fmt_f64(r.mean_residual)
            )?;
        }
        Ok(())
    }
}

/// Times the network forward pass against the dense eigensolver on the same
/// matrices. Both residuals are `‖A y − b y‖₂` of the returned pair.
pub fn bench_solver(
    model: &MlpModel,
    matrices: &[DenseMatrix],
    repetitions: usize,
    direction: SpectrumDirection,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(TrainError::Invalid("repetitions must be at least 1".into()));
    }
    if matrices.is_empty() {
        return Err(TrainError::Invalid("no matrices to benchmark".into()));
    }
    let d = matrices[0].rows();
    if matrices.iter().any(|m| m.shape() != (d, d)) {
        return Err(AutodiffError::Dimension("matrices must share one square shape".into()).into());
    }
    if model.input_dim() != d * d || model.output_dim() != d + 1 {
        return Err(AutodiffError::Dimension(format!(
            "model maps {} -> {}, matrices need {} -> {}",
            model.input_dim(),
            model.output_dim(),
            d * d,
            d + 1
        ))
        .into());
    }
    let m = matrices.len();
    let mut flat = Vec::with_capacity(m * d * d);
    for a in matrices {
        flat.extend_from_slice(a.as_slice());
    }
    let x = DenseMatrix::from_vec(m, d * d, flat)?;

    let start = Instant::now();
    let mut outputs = None;
    for _ in 0..repetitions {
        outputs = Some(model.predict_batch(&x)?);
    }
    let net_seconds = start.elapsed().as_secs_f64() / repetitions as f64;
    let outputs = outputs.expect("at least one repetition");
    let network_residuals: Vec<f64> = (0..m)
        .map(|i| residual_norm_sq(x.row(i), outputs.row(i)).sqrt())
        .collect();

    let start = Instant::now();
    let mut pairs = Vec::new();
    for _ in 0..repetitions {
        pairs = matrices
            .iter()
            .map(|a| linalg::ground_state(a, direction))
            .collect::<std::result::Result<Vec<_>, _>>()?;
    }
    let solver_seconds = start.elapsed().as_secs_f64() / repetitions as f64;
    let solver_residuals: Vec<f64> = pairs
        .iter()
        .zip(matrices)
        .map(|((b, y), a)| {
            let mut out = y.0.clone();
            out.push(*b);
            residual_norm_sq(a.as_slice(), &out).sqrt()
        })
        .collect();

    let row = |method, secs: f64, res: &[f64]| BenchRow {
        method,
        matrices: m,
        repetitions,
        mean_seconds: secs,
        seconds_per_matrix: secs / m as f64,
        mean_residual: res.iter().sum::<f64>() / m as f64,
    };
    Ok(BenchReport {
        rows: vec![
            row("network", net_seconds, &network_residuals),
            row("eig_symmetric", solver_seconds, &solver_residuals),
        ],
        network_residuals,
        solver_residuals,
    })
}

pub fn save_snapshots(dims: &[usize], snapshots: &[Snapshot], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_snapshots(dims, snapshots, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_snapshots(path: &Path) -> Result<(Vec<usize>, Vec<Snapshot>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_snapshots(&mut r)
}

/// Header with `dims`, `params` and `count`, then per snapshot the epoch
/// (as f64) followed by the parameters.
pub fn write_snapshots<W: Write>(dims: &[usize], snapshots: &[Snapshot], w: &mut W) -> Result<()> {
    let count = MlpModel::param_count(dims);
    if let Some(s) = snapshots.iter().find(|s| s.params.len() != count) {
        return Err(AutodiffError::ParamLength {
            expected: count,
            got: s.params.len(),
        }
        .into());
    }
    let dims_s = dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    bio::write_header(
        w,
        SNAPSHOT_MAGIC,
        SNAPSHOT_VERSION,
        &[
            ("dims", dims_s),
            ("params", count.to_string()),
            ("count", snapshots.len().to_string()),
        ],
    )?;
    for s in snapshots {
        bio::write_f64s(w, &[f64::from(s.epoch)])?;
        bio::write_f64s(w, &s.params)?;
    }
    Ok(())
}

pub fn read_snapshots<R: BufRead>(r: &mut R) -> Result<(Vec<usize>, Vec<Snapshot>)> {
    let header = bio::read_header(r, SNAPSHOT_MAGIC, "snapshots", SNAPSHOT_VERSION)?;
    let dims: Vec<usize> = header.parse_list("dims")?;
    let params: usize = header.parse("params")?;
    let count: usize = header.parse("count")?;
    if dims.len() < 2 || MlpModel::param_count(&dims) != params {
        return Err(FormatError::Malformed(format!("parameter count {params} does not match {dims:?}")).into());
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = Vec::new();
    for _ in 0..count {
        buf.clear();
        bio::read_f64s(r, 1 + params, &mut buf)?;
        let epoch = buf[0];
        if !(epoch >= 0.0 && epoch.fract() == 0.0 && epoch <= f64::from(u32::MAX)) {
            return Err(FormatError::Malformed(format!("bad snapshot epoch {epoch}")).into());
        }
        out.push(Snapshot {
            epoch: epoch as u32,
            params: buf[1..].to_vec(),
        });
    }
    bio::expect_eof(r)?;
    Ok((dims, out))
}
