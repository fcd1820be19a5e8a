//! Labeled Ising datasets with a field-strength extrapolation split.
//!
//! Training and validation samples draw `B_x` from a narrow interval, test
//! samples from a wider one. Test features double as the unlabeled pool for
//! the label-free loss terms.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self as bio, fmt_f64, FormatError};
use crate::linalg::{self, DenseMatrix, DenseVector, LinalgError, SpectrumDirection};

const DATASET_MAGIC: &str = "PGEIGEN-DATASET";
const DATASET_VERSION: u32 = 1;

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
const STREAM_SUBSAMPLE: u64 = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Format(FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinChainSpec {
    pub n: usize,
    pub bx: f64,
    pub bz: f64,
}

impl SpinChainSpec {
    pub fn hamiltonian(&self) -> Result<DenseMatrix> {
        Ok(linalg::ising_hamiltonian(self.n, self.bx, self.bz)?)
    }
}

/// One Hamiltonian with its ground-state eigenpair.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub spec: SpinChainSpec,
    /// Row-major flattened Hamiltonian, length `d²`.
    pub features: DenseVector,
    /// Unit ground-state eigenvector, length `d`.
    pub y: DenseVector,
    /// Ground-state eigenvalue.
    pub b: f64,
}

impl SampleRecord {
    pub fn label(spec: SpinChainSpec) -> Result<Self> {
        let h = spec.hamiltonian()?;
        let (b, y) = linalg::ground_state(&h, SpectrumDirection::Smallest)?;
        Ok(Self {
            spec,
            features: DenseVector(h.into_vec()),
            y,
            b,
        })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn matrix(&self) -> DenseMatrix {
        let d = self.dim();
        DenseMatrix::from_vec(d, d, self.features.0.clone()).expect("d² features")
    }
}

/// Closed interval `[lo, hi]` for `B_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRange {
    pub lo: f64,
    pub hi: f64,
}

impl FieldRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(DataError::Invalid(format!(
                "{what} range [{}, {}] is empty or non-finite",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(self.lo..self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n: usize,
    /// Size of the labeled pool; validation samples are carved out of it.
    pub train_size: usize,
    pub test_size: usize,
    pub validation_size: usize,
    pub train_bx_range: FieldRange,
    pub test_bx_range: FieldRange,
    pub bz: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n: 4,
            train_size: 20_000,
            test_size: 2_000,
            validation_size: 1_000,
            train_bx_range: FieldRange::new(0.0, 0.5),
            test_bx_range: FieldRange::new(0.0, 2.0),
            bz: 0.01,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > linalg::MAX_SPINS {
            return Err(DataError::Invalid(format!("spin count {} unsupported", self.n)));
        }
        self.train_bx_range.validate("train")?;
        self.test_bx_range.validate("test")?;
        if !self.bz.is_finite() {
            return Err(DataError::Invalid("B_z must be finite".into()));
        }
        if self.validation_size > self.train_size {
            return Err(DataError::Invalid(format!(
                "validation size {} exceeds train pool {}",
                self.validation_size, self.train_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub n: usize,
    pub bz: f64,
    pub seed: u64,
    pub train_bx_range: FieldRange,
    pub test_bx_range: FieldRange,
}

/// Train / validation / test splits. Test labels are kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetBundle {
    /// Matrix dimension `d = 2ⁿ`.
    pub fn dim(&self) -> usize {
        1 << self.meta.n
    }

    /// Records whose features form the unlabeled pool (the test split).
    pub fn unlabeled_pool(&self) -> &[SampleRecord] {
        &self.test
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn label_all(n: usize, bz: f64, fields: &[f64]) -> Result<Vec<SampleRecord>> {
    fields
        .par_iter()
        .map(|&bx| SampleRecord::label(SpinChainSpec { n, bx, bz }))
        .collect()
}

/// Draws `B_x` per split, labels every sample by exact diagonalization and
/// carves the validation split out of the labeled pool.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let pool_fields: Vec<f64> = (0..cfg.train_size)
        .map(|_| cfg.train_bx_range.sample(&mut train_rng))
        .collect();
    let mut test_rng = stream_rng(cfg.seed, STREAM_TEST);
    let test_fields: Vec<f64> = (0..cfg.test_size)
        .map(|_| cfg.test_bx_range.sample(&mut test_rng))
        .collect();

    let pool = label_all(cfg.n, cfg.bz, &pool_fields)?;
    let test = label_all(cfg.n, cfg.bz, &test_fields)?;

    let mut val_rng = stream_rng(cfg.seed, STREAM_VALIDATION);
    let mut is_val = vec![false; pool.len()];
    let val_idx = index::sample(&mut val_rng, pool.len(), cfg.validation_size).into_vec();
    for &i in &val_idx {
        is_val[i] = true;
    }
    let validation = val_idx.iter().map(|&i| pool[i].clone()).collect();
    let train = pool
        .into_iter()
        .zip(is_val)
        .filter_map(|(r, v)| (!v).then_some(r))
        .collect();

    Ok(DatasetBundle {
        meta: DatasetMeta {
            n: cfg.n,
            bz: cfg.bz,
            seed: cfg.seed,
            train_bx_range: cfg.train_bx_range,
            test_bx_range: cfg.test_bx_range,
        },
        train,
        validation,
        test,
    })
}

/// Uniform subsample of `size` training records without replacement. Other
/// splits are untouched.
pub fn subsample_train(bundle: &DatasetBundle, size: usize, seed: u64) -> Result<DatasetBundle> {
    if size > bundle.train.len() {
        return Err(DataError::Invalid(format!(
            "cannot subsample {size} from {} training records",
            bundle.train.len()
        )));
    }
    let mut rng = stream_rng(seed, STREAM_SUBSAMPLE);
    let picked = index::sample(&mut rng, bundle.train.len(), size);
    Ok(DatasetBundle {
        meta: bundle.meta,
        train: picked.iter().map(|i| bundle.train[i].clone()).collect(),
        validation: bundle.validation.clone(),
        test: bundle.test.clone(),
    })
}

pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(bundle, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut r)
}

/// Header followed by `(B_x, B_z, b, y[d], features[d²])` per record, in
/// train, validation, test order.
pub fn write_dataset<W: Write>(bundle: &DatasetBundle, w: &mut W) -> Result<()> {
    let m = &bundle.meta;
    bio::write_header(
        w,
        DATASET_MAGIC,
        DATASET_VERSION,
        &[
            ("n", m.n.to_string()),
            ("bz", fmt_f64(m.bz)),
            ("seed", m.seed.to_string()),
            ("train_bx_lo", fmt_f64(m.train_bx_range.lo)),
            ("train_bx_hi", fmt_f64(m.train_bx_range.hi)),
            ("test_bx_lo", fmt_f64(m.test_bx_range.lo)),
            ("test_bx_hi", fmt_f64(m.test_bx_range.hi)),
            ("train", bundle.train.len().to_string()),
            ("validation", bundle.validation.len().to_string()),
            ("test", bundle.test.len().to_string()),
        ],
    )?;
    let d = bundle.dim();
    let mut buf = Vec::with_capacity(3 + d + d * d);
    for r in bundle.train.iter().chain(&bundle.validation).chain(&bundle.test) {
        if r.spec.n != m.n {
            return Err(DataError::Invalid(format!(
                "record with n = {} in a dataset with n = {}",
                r.spec.n, m.n
            )));
        }
        buf.clear();
        buf.extend_from_slice(&[r.spec.bx, r.spec.bz, r.b]);
        buf.extend_from_slice(&r.y);
        buf.extend_from_slice(&r.features);
        bio::write_f64s(w, &buf)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: &mut R) -> Result<DatasetBundle> {
    let h = bio::read_header(r, DATASET_MAGIC, "dataset", DATASET_VERSION)?;
    let n: usize = h.parse("n")?;
    if n == 0 || n > linalg::MAX_SPINS {
        return Err(FormatError::Malformed(format!("spin count {n} unsupported")).into());
    }
    let meta = DatasetMeta {
        n,
        bz: h.parse("bz")?,
        seed: h.parse("seed")?,
        train_bx_range: FieldRange::new(h.parse("train_bx_lo")?, h.parse("train_bx_hi")?),
        test_bx_range: FieldRange::new(h.parse("test_bx_lo")?, h.parse("test_bx_hi")?),
    };
    let d = 1usize << n;
    let width = 3 + d + d * d;
    let mut read_split = |count: usize| -> Result<Vec<SampleRecord>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = Vec::with_capacity(width);
        for _ in 0..count {
            buf.clear();
            bio::read_f64s(r, width, &mut buf)?;
            out.push(SampleRecord {
                spec: SpinChainSpec {
                    n,
                    bx: buf[0],
                    bz: buf[1],
                },
                b: buf[2],
                y: DenseVector(buf[3..3 + d].to_vec()),
                features: DenseVector(buf[3 + d..].to_vec()),
            });
        }
        Ok(out)
    };
    let train = read_split(h.parse("train")?)?;
    let validation = read_split(h.parse("validation")?)?;
    let test = read_split(h.parse("test")?)?;
    bio::expect_eof(r)?;
    Ok(DatasetBundle {
        meta,
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenerationConfig {
        GenerationConfig {
            n: 3,
            train_size: 40,
            test_size: 15,
            validation_size: 10,
            seed,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn shapes_for_four_spins() {
        let cfg = GenerationConfig {
            train_size: 3,
            test_size: 2,
            validation_size: 1,
            ..GenerationConfig::default()
        };
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(b.train.len(), 2);
        assert_eq!(b.validation.len(), 1);
        assert_eq!(b.test.len(), 2);
        for r in b.train.iter().chain(&b.test) {
            assert_eq!(r.features.len(), 256);
            assert_eq!(r.y.len(), 16);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&generate_dataset(&small(7)).unwrap(), &mut a).unwrap();
        write_dataset(&generate_dataset(&small(7)).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_dataset(&generate_dataset(&small(8)).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn field_ranges_and_labels_hold() {
        for seed in 0..5 {
            let b = generate_dataset(&small(seed)).unwrap();
            for r in b.train.iter().chain(&b.validation) {
                assert!(b.meta.train_bx_range.contains(r.spec.bx));
            }
            for r in &b.test {
                assert!(b.meta.test_bx_range.contains(r.spec.bx));
            }
            for r in b.train.iter().chain(&b.validation).chain(&b.test) {
                assert!((r.y.norm() - 1.0).abs() <= 1e-10);
                let h = r.spec.hamiltonian().unwrap();
                assert_eq!(h.as_slice(), r.features.as_slice());
                let hy = h.matvec(&r.y).unwrap();
                let worst = hy
                    .iter()
                    .zip(r.y.iter())
                    .map(|(a, y)| (a - r.b * y).abs())
                    .fold(0.0, f64::max);
                assert!(worst <= 1e-8);
            }
        }
    }

    #[test]
    fn validation_is_disjoint_from_train() {
        let b = generate_dataset(&small(3)).unwrap();
        for v in &b.validation {
            assert!(!b.train.iter().any(|t| t.spec.bx.to_bits() == v.spec.bx.to_bits()));
        }
        let sub = subsample_train(&b, 12, 1).unwrap();
        for v in &sub.validation {
            assert!(!sub.train.iter().any(|t| t.spec.bx.to_bits() == v.spec.bx.to_bits()));
        }
    }

    #[test]
    fn invalid_requests() {
        let mut cfg = small(0);
        cfg.validation_size = 41;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small(0);
        cfg.train_bx_range = FieldRange::new(0.5, 0.5);
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = small(0);
        cfg.test_bx_range = FieldRange::new(0.0, f64::INFINITY);
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn subsample_examples() {
        let b = generate_dataset(&small(2)).unwrap();
        let full = subsample_train(&b, b.train.len(), 4).unwrap();
        let mut got: Vec<u64> = full.train.iter().map(|r| r.spec.bx.to_bits()).collect();
        let mut want: Vec<u64> = b.train.iter().map(|r| r.spec.bx.to_bits()).collect();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);

        let one = subsample_train(&b, 1, 4).unwrap();
        assert_eq!(one.train.len(), 1);
        assert!(b.train.contains(&one.train[0]));
        assert_eq!(one.test, b.test);
        assert_eq!(one.validation, b.validation);

        assert_eq!(subsample_train(&b, 5, 9).unwrap(), subsample_train(&b, 5, 9).unwrap());
        assert!(subsample_train(&b, b.train.len() + 1, 0).is_err());
    }

    #[test]
    fn roundtrip_truncation_and_version() {
        let b = generate_dataset(&small(5)).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&b, &mut bytes).unwrap();
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, b);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(again, bytes);

        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(
            read_dataset(&mut &cut[..]),
            Err(DataError::Format(FormatError::Truncated { .. }))
        ));

        let mut v2 = bytes.clone();
        let pos = v2.iter().position(|&c| c == b'\n').unwrap();
        v2[pos - 1] = b'2';
        assert!(matches!(
            read_dataset(&mut v2.as_slice()),
            Err(DataError::Format(FormatError::Version { .. }))
        ));
    }
}
