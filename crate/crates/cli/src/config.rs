//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use pgeigen::autodiff::{AdamaxConfig, DEFAULT_HIDDEN};
use pgeigen::linalg::SpectrumDirection;
use pgeigen::losses::{LossWeights, Mode, Reduction, TrainLossKind};
use pgeigen::quantum_data::GenerationConfig;
use pgeigen::training::{ProbeTerm, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Training seeds. `train` uses the first one; `sweep` uses all of them.
    pub seeds: Vec<u64>,
    /// Output directory, overridden by `--out`.
    pub out: Option<PathBuf>,
    pub dataset: GenerationConfig,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub schedules: LossWeights,
    pub sweep: SweepSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub diag: DiagSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cophy,
            seeds: vec![0],
            out: None,
            dataset: GenerationConfig::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            schedules: LossWeights::default(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            diag: DiagSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Labeled records drawn from the pool with the run seed; 0 keeps all.
    pub train_size: usize,
    pub epochs: u32,
    pub batch_size: usize,
    /// Ignore `batch_size` and take one step per epoch on the whole set.
    pub full_batch: bool,
    pub optimizer: AdamaxConfig,
    pub direction: SpectrumDirection,
    pub train_loss: TrainLossKind,
    pub s_reduction: Reduction,
    /// Parameter snapshot stride in epochs; 0 disables snapshots.
    pub snapshot_every: u32,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            train_size: 1000,
            epochs: t.epochs,
            batch_size: t.batch_size.unwrap_or(128),
            full_batch: false,
            optimizer: t.optimizer,
            direction: t.direction,
            train_loss: t.train_loss,
            s_reduction: t.s_reduction,
            snapshot_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub modes: Vec<Mode>,
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Cophy, Mode::BlackBox, Mode::WoSloss],
            sizes: vec![1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bin_width: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bin_width: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { repetitions: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagSection {
    /// Terms whose gradients are projected onto `θ(k) − θ*`.
    pub terms: Vec<ProbeTerm>,
    pub landscape_loss: ProbeTerm,
    /// Half-width of the square landscape window.
    pub range: f64,
    /// Points per axis; must be odd. 0 skips the landscape.
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for DiagSection {
    fn default() -> Self {
        Self {
            terms: vec![ProbeTerm::TrainMse, ProbeTerm::CLoss, ProbeTerm::SLoss],
            landscape_loss: ProbeTerm::TestMse,
            range: 1.0,
            grid_size: 21,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))
    }

    /// Training settings for one run.
    pub fn training_config(&self, mode: Mode, seed: u64) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            hidden: self.model.hidden.clone(),
            epochs: t.epochs,
            batch_size: (!t.full_batch).then_some(t.batch_size),
            optimizer: t.optimizer,
            weights: self.schedules,
            direction: t.direction,
            mode,
            train_loss: t.train_loss,
            s_reduction: t.s_reduction,
            seed,
            snapshot_every: t.snapshot_every,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Checks every section so that no command starts work on a bad config.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.dataset.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.seeds.is_empty() {
            return usage("seeds must be non-empty".into());
        }
        for &mode in self.sweep.modes.iter().chain([&self.mode]) {
            self.training_config(mode, 0)
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if self.sweep.modes.is_empty() || self.sweep.sizes.is_empty() {
            return usage("sweep modes and sizes must be non-empty".into());
        }
        if self.sweep.sizes.contains(&0) {
            return usage("sweep sizes must be positive".into());
        }
        if !(self.eval.bin_width > 0.0 && self.eval.bin_width.is_finite()) {
            return usage("eval.bin_width must be positive".into());
        }
        if self.bench.repetitions == 0 {
            return usage("bench.repetitions must be at least 1".into());
        }
        let d = &self.diag;
        if d.grid_size != 0 && d.grid_size.is_multiple_of(2) {
            return usage(format!("diag.grid_size {} must be odd", d.grid_size));
        }
        if !(d.range > 0.0 && d.range.is_finite()) {
            return usage("diag.range must be positive".into());
        }
        Ok(())
    }
}
