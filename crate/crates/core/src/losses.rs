//! Label loss, eigen-residual loss, spectrum loss and the scheduled
//! combination of the three, all recorded on a [`Tape`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
pub use crate::linalg::SpectrumDirection;
use crate::schedules::ScheduleSpec;

/// `‖ŷ‖²` below this is treated as a collapsed prediction.
pub const DEGENERATE_NORM_SQ: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss requires labels but the batch has none")]
    MissingLabels,
    #[error("degenerate prediction: ‖ŷ‖² = {norm_sq:e} in batch row {row}")]
    DegeneratePrediction { row: usize, norm_sq: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Predicted eigenvector (`B × d`) and eigenvalue (`B × 1`) nodes.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub y_hat: Var,
    pub b_hat: Var,
}

impl PredictionVars {
    /// Splits a raw `B × (d + 1)` network output.
    pub fn split(tape: &mut Tape, output: Var) -> Result<Self> {
        let cols = tape.value(output).cols();
        if cols < 2 {
            return Err(AutodiffError::Dimension(format!("output width {cols} < 2")).into());
        }
        Ok(Self {
            y_hat: tape.slice_cols(output, 0, cols - 1)?,
            b_hat: tape.slice_cols(output, cols - 1, cols)?,
        })
    }
}

/// Target eigenvector (`B × d`) and eigenvalue (`B × 1`) nodes.
#[derive(Debug, Clone, Copy)]
pub struct LabelVars {
    pub y: Var,
    pub b: Var,
}

/// Inputs for one batch: flattened matrices (`B × d²`), predictions and,
/// when available, labels.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch {
    pub matrices: Var,
    pub pred: PredictionVars,
    pub labels: Option<LabelVars>,
}

impl LossBatch {
    fn labels(&self) -> Result<LabelVars> {
        self.labels.ok_or(LossError::MissingLabels)
    }

    /// Row-wise concatenation. Labels are dropped: the result only feeds
    /// label-free terms.
    pub fn concat_unlabeled(&self, tape: &mut Tape, other: &LossBatch) -> Result<LossBatch> {
        Ok(LossBatch {
            matrices: tape.concat_rows(self.matrices, other.matrices)?,
            pred: PredictionVars {
                y_hat: tape.concat_rows(self.pred.y_hat, other.pred.y_hat)?,
                b_hat: tape.concat_rows(self.pred.b_hat, other.pred.b_hat)?,
            },
            labels: None,
        })
    }
}

/// `1/N Σ (‖ŷ − y‖² + (b̂ − b)²)`
pub fn train_mse(tape: &mut Tape, batch: &LossBatch) -> Result<Var> {
    let labels = batch.labels()?;
    let dy = tape.sub(batch.pred.y_hat, labels.y)?;
    let dy2 = tape.square(dy);
    let vec_err = tape.row_sum(dy2);
    let db = tape.sub(batch.pred.b_hat, labels.b)?;
    let db2 = tape.square(db);
    let per_sample = tape.add(vec_err, db2)?;
    Ok(tape.mean(per_sample))
}

/// Per-sample residual `‖Â ŷ − b̂ ŷ‖²` (`B × 1`).
pub fn c_loss_numerators(tape: &mut Tape, batch: &LossBatch) -> Result<Var> {
    let y = batch.pred.y_hat;
    let ay = tape.batch_matvec(batch.matrices, y)?;
    let by = tape.mul(y, batch.pred.b_hat)?;
    let residual = tape.sub(ay, by)?;
    let r2 = tape.square(residual);
    Ok(tape.row_sum(r2))
}

/// Batch mean of `‖Â ŷ − b̂ ŷ‖² / (ŷᵀŷ)`. Needs no labels.
pub fn c_loss(tape: &mut Tape, batch: &LossBatch) -> Result<Var> {
    let norm_sq = {
        let y2 = tape.square(batch.pred.y_hat);
        tape.row_sum(y2)
    };
    if let Some((row, &v)) = tape
        .value(norm_sq)
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, &v)| v.is_nan() || v < DEGENERATE_NORM_SQ)
    {
        return Err(LossError::DegeneratePrediction { row, norm_sq: v });
    }
    let numerator = c_loss_numerators(tape, batch)?;
    let ratio = tape.div(numerator, norm_sq)?;
    Ok(tape.mean(ratio))
}

/// Batch mean of `exp(b̂)` (smallest) or `exp(−b̂)` (largest).
pub fn s_loss(tape: &mut Tape, batch: &LossBatch, direction: SpectrumDirection) -> Var {
    let arg = match direction {
        SpectrumDirection::Smallest => batch.pred.b_hat,
        SpectrumDirection::Largest => tape.scale(batch.pred.b_hat, -1.0),
    };
    let e = tape.exp(arg);
    tape.mean(e)
}

/// Summed L1 label loss:
/// `Σ_i [ Σ_j (|ŷ_ij − y_ij| + |b̂_i − b_i|) + (‖ŷ_i‖ − ‖y_i‖) ]`.
pub fn l1_train_loss(tape: &mut Tape, batch: &LossBatch) -> Result<Var> {
    let labels = batch.labels()?;
    let d = tape.value(batch.pred.y_hat).cols() as f64;
    let dy = tape.sub(batch.pred.y_hat, labels.y)?;
    let ady = tape.abs(dy);
    let vec_err = tape.row_sum(ady);
    let db = tape.sub(batch.pred.b_hat, labels.b)?;
    let adb = tape.abs(db);
    let val_err = tape.scale(adb, d);
    let yh2 = tape.square(batch.pred.y_hat);
    let yh_ss = tape.row_sum(yh2);
    let yh_norm = tape.sqrt(yh_ss);
    let y2 = tape.square(labels.y);
    let y_ss = tape.row_sum(y2);
    let y_norm = tape.sqrt(y_ss);
    let norm_gap = tape.sub(yh_norm, y_norm)?;
    let s1 = tape.add(vec_err, val_err)?;
    let per_sample = tape.add(s1, norm_gap)?;
    Ok(tape.sum(per_sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLossKind {
    #[default]
    Mse,
    L1,
}

/// Which terms are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train loss plus scheduled C-Loss and S-Loss over labeled and unlabeled data.
    #[default]
    Cophy,
    /// Train loss only.
    BlackBox,
    /// Train loss plus constant-weight PG terms.
    PgnnAnalogue,
    /// Constant-weight PG terms only.
    PinnAnalogue,
    /// One randomly chosen term per minibatch.
    MtlPgnn,
    /// Scheduled PG terms evaluated on labeled data only.
    OnlyDtr,
    /// Scheduled C-Loss without S-Loss.
    WoSloss,
    /// Scheduled PG terms, no train loss.
    LabelFree,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Cophy,
        Mode::BlackBox,
        Mode::PgnnAnalogue,
        Mode::PinnAnalogue,
        Mode::MtlPgnn,
        Mode::OnlyDtr,
        Mode::WoSloss,
        Mode::LabelFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Cophy => "cophy",
            Mode::BlackBox => "black_box",
            Mode::PgnnAnalogue => "pgnn_analogue",
            Mode::PinnAnalogue => "pinn_analogue",
            Mode::MtlPgnn => "mtl_pgnn",
            Mode::OnlyDtr => "only_dtr",
            Mode::WoSloss => "wo_sloss",
            Mode::LabelFree => "label_free",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_train_loss(self) -> bool {
        !matches!(self, Mode::PinnAnalogue | Mode::LabelFree)
    }

    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Mode::OnlyDtr | Mode::BlackBox)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Term picked for a minibatch in [`Mode::MtlPgnn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtlTerm {
    Train,
    C,
    S,
}

impl MtlTerm {
    pub const ALL: [MtlTerm; 3] = [MtlTerm::Train, MtlTerm::C, MtlTerm::S];
}

/// Schedules for the adaptive modes plus the constant weights used by the
/// PGNN/PINN/MTL analogues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: ScheduleSpec,
    pub lambda_s: ScheduleSpec,
    pub constant_c: f64,
    pub constant_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: ScheduleSpec::cold_start(0.85, 0.17, 51.0),
            lambda_s: ScheduleSpec::annealing(2.3, 0.14, 50),
            constant_c: 0.85,
            constant_s: 2.3,
        }
    }
}

impl LossWeights {
    /// `(λ_C, λ_S)` that `mode` applies at epoch `t`.
    pub fn at(&self, mode: Mode, t: u32) -> (f64, f64) {
        match mode {
            Mode::Cophy | Mode::OnlyDtr | Mode::LabelFree => {
                (self.lambda_c.weight_at(t), self.lambda_s.weight_at(t))
            }
            Mode::WoSloss => (self.lambda_c.weight_at(t), 0.0),
            Mode::BlackBox => (0.0, 0.0),
            Mode::PgnnAnalogue | Mode::PinnAnalogue | Mode::MtlPgnn => {
                (self.constant_c, self.constant_s)
            }
        }
    }
}

/// How the S-Loss term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Batch mean, as returned by [`s_loss`].
    Mean,
    /// Sum over the PG rows of the batch.
    #[default]
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub direction: SpectrumDirection,
    pub train_loss: TrainLossKind,
    pub s_reduction: Reduction,
}

/// Nodes of an assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub train: Option<Var>,
    pub c: Option<Var>,
    pub s: Option<Var>,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

pub fn train_loss(tape: &mut Tape, batch: &LossBatch, kind: TrainLossKind) -> Result<Var> {
    match kind {
        TrainLossKind::Mse => train_mse(tape, batch),
        TrainLossKind::L1 => l1_train_loss(tape, batch),
    }
}

/// `E(t) = Train-Loss + λ_C(t)·C-Loss + λ_S(t)·S-Loss`.
///
/// Train-Loss and C-Loss are batch means; S-Loss is reduced per
/// `cfg.s_reduction`. Train-Loss uses the labeled batch only. The PG terms use the labeled and
/// unlabeled batches stacked together, or the labeled batch alone when the
/// mode excludes unlabeled data or none is given. Terms whose weight is zero
/// are not recorded. For [`Mode::MtlPgnn`], `mtl_term` selects the single
/// active term.
pub fn combined_objective(
    tape: &mut Tape,
    t: u32,
    labeled: &LossBatch,
    unlabeled: Option<&LossBatch>,
    cfg: &ObjectiveConfig,
    mtl_term: Option<MtlTerm>,
) -> Result<Objective> {
    let (mut lambda_c, mut lambda_s) = cfg.weights.at(cfg.mode, t);
    let mut use_train = cfg.mode.uses_train_loss();
    if cfg.mode == Mode::MtlPgnn {
        let term = mtl_term.unwrap_or(MtlTerm::Train);
        use_train = term == MtlTerm::Train;
        if term != MtlTerm::C {
            lambda_c = 0.0;
        }
        if term != MtlTerm::S {
            lambda_s = 0.0;
        }
    }

    let train = if use_train {
        Some(train_loss(tape, labeled, cfg.train_loss)?)
    } else {
        None
    };

    let pg_batch = match unlabeled {
        Some(u) if cfg.mode.uses_unlabeled() && (lambda_c != 0.0 || lambda_s != 0.0) => {
            labeled.concat_unlabeled(tape, u)?
        }
        _ => *labeled,
    };
    let c = if lambda_c != 0.0 {
        Some(c_loss(tape, &pg_batch)?)
    } else {
        None
    };
    let s = if lambda_s != 0.0 {
        let mean = s_loss(tape, &pg_batch, cfg.direction);
        Some(match cfg.s_reduction {
            Reduction::Mean => mean,
            Reduction::Sum => {
                let rows = tape.value(pg_batch.pred.b_hat).rows() as f64;
                tape.scale(mean, rows)
            }
        })
    } else {
        None
    };

    let mut total = train;
    for (term, w) in [(c, lambda_c), (s, lambda_s)] {
        if let Some(v) = term {
            let weighted = tape.scale(v, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(crate::linalg::DenseMatrix::zeros(1, 1)),
    };
    Ok(Objective {
        total,
        train,
        c,
        s,
        lambda_c,
        lambda_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Batch with the given matrices, predictions and optional labels, all constants.
    fn batch(
        tape: &mut Tape,
        mats: &[&[f64]],
        y_hat: &[&[f64]],
        b_hat: &[f64],
        labels: Option<(&[&[f64]], &[f64])>,
    ) -> LossBatch {
        let b = y_hat.len();
        let d = y_hat[0].len();
        let matrices = tape.constant(mat(b, d * d, &mats.concat()));
        let y = tape.param(mat(b, d, &y_hat.concat()));
        let bh = tape.param(mat(b, 1, b_hat));
        let labels = labels.map(|(ly, lb)| LabelVars {
            y: tape.constant(mat(b, d, &ly.concat())),
            b: tape.constant(mat(b, 1, lb)),
        });
        LossBatch {
            matrices,
            pred: PredictionVars { y_hat: y, b_hat: bh },
            labels,
        }
    }

    const DIAG12: &[f64] = &[1.0, 0.0, 0.0, 2.0];

    #[test]
    fn train_mse_examples() {
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[0.6, 0.8]], &[1.5], Some((&[&[0.6, 0.8]], &[1.5])));
        let v = train_mse(&mut t, &bt).unwrap();
        assert_eq!(t.scalar(v), 0.0);

        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[0.6, 0.8]], &[2.5], Some((&[&[0.6, 0.8]], &[1.5])));
        let v = train_mse(&mut t, &bt).unwrap();
        assert_eq!(t.scalar(v), 1.0);

        // squared vector errors 2 and 4, exact eigenvalues
        let mut t = Tape::new();
        let bt = batch(
            &mut t,
            &[DIAG12, DIAG12],
            &[&[1.0, 1.0], &[2.0, 0.0]],
            &[0.0, 0.0],
            Some((&[&[0.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0])),
        );
        let v = train_mse(&mut t, &bt).unwrap();
        assert_eq!(t.scalar(v), 3.0);
    }

    #[test]
    fn missing_labels_are_rejected() {
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[1.0], None);
        assert_eq!(train_mse(&mut t, &bt), Err(LossError::MissingLabels));
        assert_eq!(l1_train_loss(&mut t, &bt), Err(LossError::MissingLabels));
    }

    #[test]
    fn c_loss_examples() {
        for (y, b, want) in [
            ([1.0, 0.0], 1.0, 0.0),
            ([0.0, 1.0], 1.0, 1.0),
            ([0.0, 2.0], 1.0, 1.0),
        ] {
            let mut t = Tape::new();
            let bt = batch(&mut t, &[DIAG12], &[&y], &[b], None);
            let v = c_loss(&mut t, &bt).unwrap();
            assert_eq!(t.scalar(v), want, "y={y:?}");
        }
    }

    #[test]
    fn c_loss_rejects_collapsed_prediction() {
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12, DIAG12], &[&[1.0, 0.0], &[1e-7, 0.0]], &[1.0, 1.0], None);
        assert!(matches!(
            c_loss(&mut t, &bt),
            Err(LossError::DegeneratePrediction { row: 1, .. })
        ));
    }

    #[test]
    fn c_loss_zero_iff_eigenpair() {
        // [[2,1],[1,2]] has eigenpairs (1, (1,-1)) and (3, (1,1)).
        let a: &[f64] = &[2.0, 1.0, 1.0, 2.0];
        for (y, b, zero) in [
            ([1.0, -1.0], 1.0, true),
            ([1.0, 1.0], 3.0, true),
            ([1.0, 1.0], 1.0, false),
            ([1.0, 0.0], 2.0, false),
        ] {
            let mut t = Tape::new();
            let bt = batch(&mut t, &[a], &[&y], &[b], None);
            let v = c_loss(&mut t, &bt).unwrap();
            assert_eq!(t.scalar(v) == 0.0, zero, "y={y:?} b={b}");
            assert!(t.scalar(v) >= 0.0);
        }
    }

    #[test]
    fn s_loss_examples() {
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[0.0], None);
        let v = s_loss(&mut t, &bt, SpectrumDirection::Smallest);
        assert_eq!(t.scalar(v), 1.0);

        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[2f64.ln()], None);
        let v = s_loss(&mut t, &bt, SpectrumDirection::Largest);
        assert!((t.scalar(v) - 0.5).abs() < 1e-15);

        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12, DIAG12], &[&[1.0, 0.0], &[1.0, 0.0]], &[0.0, 0.0], None);
        let v = s_loss(&mut t, &bt, SpectrumDirection::Smallest);
        assert_eq!(t.scalar(v), 1.0);
    }

    #[test]
    fn s_loss_clamps_overflow() {
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[800.0], None);
        let v = s_loss(&mut t, &bt, SpectrumDirection::Smallest);
        assert!(t.scalar(v).is_finite());
        assert_eq!(t.exp_clamps(), 1);
    }

    #[test]
    fn l1_examples() {
        // ŷ = 2y, ‖y‖ = 1, exact eigenvalue: Σ|y_j| + 1
        let y = [0.6, -0.8];
        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&[1.2, -1.6]], &[0.3], Some((&[&y], &[0.3])));
        let v = l1_train_loss(&mut t, &bt).unwrap();
        assert!((t.scalar(v) - (1.4 + 1.0)).abs() < 1e-12);

        let mut t = Tape::new();
        let bt = batch(&mut t, &[DIAG12], &[&y], &[0.3], Some((&[&y], &[0.3])));
        let v = l1_train_loss(&mut t, &bt).unwrap();
        assert_eq!(t.scalar(v), 0.0);

        // Two identical samples: sum doubles.
        let mut t = Tape::new();
        let bt = batch(
            &mut t,
            &[DIAG12, DIAG12],
            &[&[1.2, -1.6], &[1.2, -1.6]],
            &[0.5, 0.5],
            Some((&[&y, &y], &[0.3, 0.3])),
        );
        let v = l1_train_loss(&mut t, &bt).unwrap();
        let single = 1.4 + 2.0 * 0.2 + 1.0;
        assert!((t.scalar(v) - 2.0 * single).abs() < 1e-12);
    }

    fn simple_cfg(mode: Mode) -> ObjectiveConfig {
        ObjectiveConfig {
            mode,
            weights: LossWeights::default(),
            direction: SpectrumDirection::Smallest,
            train_loss: TrainLossKind::Mse,
            s_reduction: Reduction::Mean,
        }
    }

    #[test]
    fn black_box_objective_is_train_mse() {
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.3, 0.9]], &[1.2], Some((&[&[1.0, 0.0]], &[1.0])));
        let ub = batch(&mut t, &[DIAG12], &[&[0.1, 0.2]], &[0.5], None);
        let obj = combined_objective(&mut t, 3, &lb, Some(&ub), &simple_cfg(Mode::BlackBox), None).unwrap();
        let mse = train_mse(&mut t, &lb).unwrap();
        assert_eq!(t.scalar(obj.total).to_bits(), t.scalar(mse).to_bits());
        assert!(obj.c.is_none() && obj.s.is_none());
    }

    #[test]
    fn zero_schedules_match_train_mse_bitwise() {
        let mut cfg = simple_cfg(Mode::Cophy);
        cfg.weights.lambda_c = ScheduleSpec::zero();
        cfg.weights.lambda_s = ScheduleSpec::zero();
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.3, 0.9]], &[1.2], Some((&[&[1.0, 0.0]], &[1.0])));
        let obj = combined_objective(&mut t, 0, &lb, None, &cfg, None).unwrap();
        let mse = train_mse(&mut t, &lb).unwrap();
        assert_eq!(t.scalar(obj.total).to_bits(), t.scalar(mse).to_bits());
    }

    #[test]
    fn label_free_never_needs_labels() {
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.3, 0.9]], &[1.2], None);
        let ub = batch(&mut t, &[DIAG12], &[&[0.1, 0.2]], &[0.5], None);
        let cfg = simple_cfg(Mode::LabelFree);
        let obj = combined_objective(&mut t, 60, &lb, Some(&ub), &cfg, None).unwrap();
        assert!(obj.train.is_none());
        let expected =
            obj.lambda_c * t.scalar(obj.c.unwrap()) + obj.lambda_s * t.scalar(obj.s.unwrap());
        assert!((t.scalar(obj.total) - expected).abs() < 1e-12);
        assert!(combined_objective(&mut t, 0, &lb, Some(&ub), &simple_cfg(Mode::PinnAnalogue), None).is_ok());
        assert_eq!(
            combined_objective(&mut t, 0, &lb, Some(&ub), &simple_cfg(Mode::Cophy), None).unwrap_err(),
            LossError::MissingLabels
        );
    }

    #[test]
    fn initial_weights_follow_appendix_schedules() {
        let (c, s) = LossWeights::default().at(Mode::Cophy, 0);
        assert!((c - 0.85 / (1.0 + 8.67f64.exp())).abs() < 1e-15);
        assert!((c - 1.45e-4).abs() < 1e-6);
        assert_eq!(s, 2.3);
        assert_eq!(LossWeights::default().at(Mode::WoSloss, 0).1, 0.0);
        assert_eq!(LossWeights::default().at(Mode::PgnnAnalogue, 0), (0.85, 2.3));
    }

    #[test]
    fn pg_terms_cover_labeled_and_unlabeled() {
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.0, 1.0]], &[1.0], Some((&[&[1.0, 0.0]], &[1.0])));
        let ub = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[1.0], None);
        let cfg = simple_cfg(Mode::PgnnAnalogue);
        let obj = combined_objective(&mut t, 0, &lb, Some(&ub), &cfg, None).unwrap();
        // labeled residual 1, unlabeled residual 0
        assert_eq!(t.scalar(obj.c.unwrap()), 0.5);
        let only = combined_objective(&mut t, 100, &lb, Some(&ub), &simple_cfg(Mode::OnlyDtr), None).unwrap();
        assert_eq!(t.scalar(only.c.unwrap()), 1.0);
    }

    #[test]
    fn summed_s_loss_scales_with_pg_rows() {
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.0, 1.0]], &[0.0], Some((&[&[1.0, 0.0]], &[1.0])));
        let ub = batch(&mut t, &[DIAG12], &[&[1.0, 0.0]], &[2.0f64.ln()], None);
        let mut cfg = simple_cfg(Mode::LabelFree);
        cfg.weights.lambda_c = ScheduleSpec::zero();
        cfg.weights.lambda_s = ScheduleSpec::constant(1.0);
        cfg.s_reduction = Reduction::Sum;
        let obj = combined_objective(&mut t, 0, &lb, Some(&ub), &cfg, None).unwrap();
        // exp(0) + exp(ln 2)
        assert!((t.scalar(obj.total) - 3.0).abs() < 1e-15);
        cfg.s_reduction = Reduction::Mean;
        let obj = combined_objective(&mut t, 0, &lb, Some(&ub), &cfg, None).unwrap();
        assert!((t.scalar(obj.total) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn mtl_selects_a_single_term() {
        let mut t = Tape::new();
        let lb = batch(&mut t, &[DIAG12], &[&[0.0, 1.0]], &[1.0], Some((&[&[1.0, 0.0]], &[1.0])));
        let cfg = simple_cfg(Mode::MtlPgnn);
        let o = combined_objective(&mut t, 0, &lb, None, &cfg, Some(MtlTerm::S)).unwrap();
        assert!(o.train.is_none() && o.c.is_none() && o.s.is_some());
        let o = combined_objective(&mut t, 0, &lb, None, &cfg, Some(MtlTerm::Train)).unwrap();
        assert!(o.train.is_some() && o.c.is_none() && o.s.is_none());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("nope"), None);
    }
}
