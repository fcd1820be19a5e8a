use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::AutodiffError;
use crate::io::{self as bio, FormatError};
use crate::linalg::{gemm, DenseMatrix, DenseVector};

const CHECKPOINT_MAGIC: &str = "PGEIGEN-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

/// Hidden width used by the default architecture.
pub const DEFAULT_HIDDEN: [usize; 4] = [100, 100, 100, 100];

/// Network output split into the eigenvector head and the eigenvalue head.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: DenseVector,
    pub b_hat: f64,
}

impl Prediction {
    /// Splits a raw output row: entries `0..d` are `ŷ`, entry `d` is `b̂`.
    pub fn from_output(row: &[f64]) -> Self {
        let d = row.len() - 1;
        Self {
            y_hat: DenseVector(row[..d].to_vec()),
            b_hat: row[d],
        }
    }
}

/// Fully connected tanh network with a linear output layer.
///
/// Parameters live in one flat buffer laid out layer by layer: the weight
/// matrix (`out × in`, row-major) followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Tape leaves for one bound copy of the parameters.
pub struct BoundParams {
    layers: Vec<(Var, Var)>,
}

impl MlpModel {
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `d² → hidden… → d + 1` for a chain of `n_spins`.
    pub fn default_dims(n_spins: usize, hidden: &[usize]) -> Vec<usize> {
        let d = 1usize << n_spins;
        let mut dims = vec![d * d];
        dims.extend_from_slice(hidden);
        dims.push(d + 1);
        dims
    }

    fn check_dims(dims: &[usize]) -> Result<(), AutodiffError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(AutodiffError::Dimension(format!(
                "invalid architecture {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, AutodiffError> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; Self::param_count(dims)],
        })
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, AutodiffError> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut model.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(model)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten_params(&self) -> DenseVector {
        DenseVector(self.params.clone())
    }

    pub fn unflatten(dims: &[usize], flat: &[f64]) -> Result<Self, AutodiffError> {
        Self::check_dims(dims)?;
        let expected = Self::param_count(dims);
        if flat.len() != expected {
            return Err(AutodiffError::ParamLength {
                expected,
                got: flat.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: flat.to_vec(),
        })
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), AutodiffError> {
        if flat.len() != self.params.len() {
            return Err(AutodiffError::ParamLength {
                expected: self.params.len(),
                got: flat.len(),
            });
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    /// `(weights, bias, fan_in, fan_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (&[f64], &[f64], usize, usize)> {
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let (i, o) = (w[0], w[1]);
            let weights = &self.params[offset..offset + i * o];
            let bias = &self.params[offset + i * o..offset + i * o + o];
            offset += i * o + o;
            (weights, bias, i, o)
        })
    }

    /// Raw outputs for a batch of inputs (`B × in → B × out`), no tape.
    pub fn predict_batch(&self, inputs: &DenseMatrix) -> Result<DenseMatrix, AutodiffError> {
        if inputs.cols() != self.input_dim() {
            return Err(AutodiffError::Dimension(format!(
                "input has {} features, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let batch = inputs.rows();
        let n_layers = self.dims.len() - 1;
        let mut h = inputs.clone();
        for (k, (w, b, fan_in, fan_out)) in self.layers().enumerate() {
            let mut next = DenseMatrix::zeros(batch, fan_out);
            for i in 0..batch {
                next.row_mut(i).copy_from_slice(b);
            }
            gemm(batch, fan_in, fan_out, 1.0, h.as_slice(), false, w, true, 1.0, next.as_mut_slice());
            if k + 1 < n_layers {
                next.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn predict(&self, features: &[f64]) -> Result<Prediction, AutodiffError> {
        let x = DenseMatrix::from_vec(1, features.len(), features.to_vec())
            .expect("row vector");
        let out = self.predict_batch(&x)?;
        Ok(Prediction::from_output(out.row(0)))
    }

    /// Records the parameters as differentiable leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let layers = self
            .layers()
            .map(|(w, b, i, o)| {
                let wv = tape.param(DenseMatrix::from_vec(o, i, w.to_vec()).expect("layer shape"));
                let bv = tape.param(DenseMatrix::from_vec(1, o, b.to_vec()).expect("bias shape"));
                (wv, bv)
            })
            .collect();
        BoundParams { layers }
    }

    /// Tape-recorded forward pass of a `B × in` input node. Returns the raw
    /// `B × out` output node.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, AutodiffError> {
        let n = bound.layers.len();
        let mut h = x;
        for (k, &(w, b)) in bound.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if k + 1 < n {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Gathers leaf gradients into the flat parameter layout.
    pub fn gather_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        // Leaves that did not reach the loss contribute zeros.
        for (&(w, b), (_, _, i, o)) in bound.layers.iter().zip(self.layers()) {
            push_or_zero(&mut out, grads.wrt(w), i * o);
            push_or_zero(&mut out, grads.wrt(b), o);
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        let dims = self
            .dims
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        bio::write_header(
            w,
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &[("dims", dims), ("params", self.params.len().to_string())],
        )?;
        bio::write_f64s(w, &self.params)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut r)
    }

    pub fn read_checkpoint<R: std::io::BufRead>(r: &mut R) -> Result<Self, FormatError> {
        let header = bio::read_header(r, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let dims: Vec<usize> = header.parse_list("dims")?;
        let count: usize = header.parse("params")?;
        if dims.len() < 2 || dims.contains(&0) || Self::param_count(&dims) != count {
            return Err(FormatError::Malformed(format!(
                "parameter count {count} does not match architecture {dims:?}"
            )));
        }
        let mut params = Vec::with_capacity(count);
        bio::read_f64s(r, count, &mut params)?;
        bio::expect_eof(r)?;
        Ok(Self { dims, params })
    }
}

fn push_or_zero(out: &mut Vec<f64>, g: Option<&DenseMatrix>, len: usize) {
    match g {
        Some(g) => out.extend_from_slice(g.as_slice()),
        None => out.extend(std::iter::repeat_n(0.0, len)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        let dims = MlpModel::default_dims(4, &DEFAULT_HIDDEN);
        assert_eq!(dims, vec![256, 100, 100, 100, 100, 17]);
        assert_eq!(MlpModel::param_count(&dims), 57_717);
        assert_eq!(MlpModel::init(&dims, 0).unwrap().num_params(), 57_717);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(&[4, 3, 5]).unwrap();
        let p = m.predict(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(p.y_hat.iter().all(|&v| v == 0.0));
        assert_eq!(p.b_hat, 0.0);
        assert!(m.flatten_params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = MlpModel::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            m.params_mut()[i * 3 + i] = 1.0;
        }
        let x = DenseMatrix::from_vec(1, 3, vec![0.25, -1.5, 2.0]).unwrap();
        assert_eq!(m.predict_batch(&x).unwrap().as_slice(), &[0.25, -1.5, 2.0]);
    }

    #[test]
    fn tanh_saturates_inside_unit_interval() {
        let mut m = MlpModel::zeros(&[1, 1, 1]).unwrap();
        // w1 = 1e6, b1 = 0, w2 = 1, b2 = 0: output equals the hidden value.
        m.params_mut().copy_from_slice(&[1e6, 0.0, 1.0, 0.0]);
        let out = m.predict_batch(&DenseMatrix::from_vec(1, 1, vec![5.0]).unwrap()).unwrap();
        let h = out.as_slice()[0];
        assert!(h <= 1.0 && h > 0.999);
        let out = m.predict_batch(&DenseMatrix::from_vec(1, 1, vec![-5.0]).unwrap()).unwrap();
        assert!(out.as_slice()[0] >= -1.0);
    }

    #[test]
    fn flatten_roundtrip_and_length_errors() {
        let m = MlpModel::init(&[5, 4, 3], 9).unwrap();
        let back = MlpModel::unflatten(m.dims(), &m.flatten_params()).unwrap();
        assert_eq!(back, m);
        assert!(matches!(
            MlpModel::unflatten(m.dims(), &[0.0; 3]),
            Err(AutodiffError::ParamLength { expected: 39, got: 3 })
        ));
    }

    #[test]
    fn flatten_layout_is_layer_major() {
        let m = MlpModel::init(&[2, 3, 1], 4).unwrap();
        let layers: Vec<_> = m.layers().collect();
        let mut manual = Vec::new();
        for (w, b, _, _) in &layers {
            manual.extend_from_slice(w);
            manual.extend_from_slice(b);
        }
        assert_eq!(manual, m.flatten_params().0);
        assert_eq!(layers[0].2, 2);
        assert_eq!(layers[0].3, 3);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpModel::init(&[10, 6, 2], 1).unwrap();
        let b = MlpModel::init(&[10, 6, 2], 1).unwrap();
        let c = MlpModel::init(&[10, 6, 2], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 16.0).sqrt();
        let (w, bias, _, _) = a.layers().next().unwrap();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let m = MlpModel::init(&[4, 5, 5, 3], 12).unwrap();
        let x = DenseMatrix::from_vec(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, &bound, xv).unwrap();
        let direct = m.predict_batch(&x).unwrap();
        for (a, b) in tape.value(out).as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_params() {
        let m = MlpModel::init(&[3, 4, 2], 8).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        // weights only: ½ Σ W²
        let mut terms = Vec::new();
        for &(w, _) in &bound.layers {
            let sq = tape.square(w);
            terms.push(tape.sum(sq));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        let loss = tape.scale(total, 0.5);
        let g = m.gather_grads(&bound, &tape.backward(loss).unwrap());
        let mut expected = m.flatten_params().0;
        let mut offset = 0;
        for (_, _, i, o) in m.layers() {
            expected[offset + i * o..offset + i * o + o].fill(0.0);
            offset += i * o + o;
        }
        assert_eq!(g, expected);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = MlpModel::init(&[6, 8, 8, 3], 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..6).map(|c| ((r * 7 + c) as f64 * 0.37).sin()).collect())
            .collect();
        let batch = DenseMatrix::from_vec(5, 6, rows.concat()).unwrap();
        let out = m.predict_batch(&batch).unwrap();
        let mut reversed = rows.clone();
        reversed.reverse();
        let out_rev = m
            .predict_batch(&DenseMatrix::from_vec(5, 6, reversed.concat()).unwrap())
            .unwrap();
        for r in 0..5 {
            let single = m.predict_batch(&DenseMatrix::from_vec(1, 6, rows[r].clone()).unwrap()).unwrap();
            for c in 0..3 {
                assert!((out[(r, c)] - single[(0, c)]).abs() < 1e-14);
                assert!((out[(r, c)] - out_rev[(4 - r, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let m = MlpModel::init(&[4, 3, 2], 5).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = MlpModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(back
            .params()
            .iter()
            .zip(m.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let truncated = &buf[..buf.len() - 5];
        assert!(matches!(
            MlpModel::read_checkpoint(&mut &truncated[..]),
            Err(FormatError::Truncated { .. })
        ));
        let text = String::from_utf8_lossy(&buf).replacen("v1", "v9", 1);
        let mut bumped = text.into_bytes();
        bumped.truncate(40);
        assert!(matches!(
            MlpModel::read_checkpoint(&mut &bumped[..]),
            Err(FormatError::Version { .. })
        ));
    }
}
