//! Central finite differences against the tape, through a small MLP.

use pgeigen::autodiff::{MlpModel, Tape};
use pgeigen::linalg::{ising_hamiltonian, DenseMatrix, SpectrumDirection};
use pgeigen::losses::{
    c_loss, combined_objective, l1_train_loss, s_loss, train_mse, LabelVars, LossBatch,
    LossWeights, Mode, ObjectiveConfig, PredictionVars, Reduction, TrainLossKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 4] = [16, 8, 8, 5];

#[derive(Clone, Copy, Debug)]
enum Which {
    TrainMse,
    CLoss,
    SSmallest,
    SLargest,
    L1,
    Combined,
}

const ALL: [Which; 6] = [
    Which::TrainMse,
    Which::CLoss,
    Which::SSmallest,
    Which::SLargest,
    Which::L1,
    Which::Combined,
];

struct Problem {
    x_l: DenseMatrix,
    x_u: DenseMatrix,
    y: DenseMatrix,
    b: DenseMatrix,
}

fn problem(rng: &mut ChaCha8Rng) -> Problem {
    let mats = |rng: &mut ChaCha8Rng, k: usize| {
        let mut data = Vec::new();
        for _ in 0..k {
            let h = ising_hamiltonian(2, rng.random_range(0.0..2.0), 0.01).unwrap();
            data.extend_from_slice(h.as_slice());
        }
        DenseMatrix::from_vec(k, 16, data).unwrap()
    };
    let x_l = mats(rng, 3);
    let x_u = mats(rng, 2);
    let y = DenseMatrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let b = DenseMatrix::from_vec(3, 1, (0..3).map(|_| rng.random_range(-3.0..0.0)).collect()).unwrap();
    Problem { x_l, x_u, y, b }
}

/// Loss value and flat gradient at `params`.
fn eval(params: &[f64], p: &Problem, which: Which) -> (f64, Vec<f64>) {
    let model = MlpModel::unflatten(&DIMS, params).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let batch = |tape: &mut Tape, x: &DenseMatrix, labels: bool| {
        let xv = tape.constant(x.clone());
        let out = model.forward(tape, &bound, xv).unwrap();
        LossBatch {
            matrices: xv,
            pred: PredictionVars::split(tape, out).unwrap(),
            labels: labels.then(|| LabelVars {
                y: tape.constant(p.y.clone()),
                b: tape.constant(p.b.clone()),
            }),
        }
    };
    let lb = batch(&mut tape, &p.x_l, true);
    let loss = match which {
        Which::TrainMse => train_mse(&mut tape, &lb).unwrap(),
        Which::CLoss => c_loss(&mut tape, &lb).unwrap(),
        Which::SSmallest => s_loss(&mut tape, &lb, SpectrumDirection::Smallest),
        Which::SLargest => s_loss(&mut tape, &lb, SpectrumDirection::Largest),
        Which::L1 => l1_train_loss(&mut tape, &lb).unwrap(),
        Which::Combined => {
            let ub = batch(&mut tape, &p.x_u, false);
            let cfg = ObjectiveConfig {
                mode: Mode::Cophy,
                weights: LossWeights::default(),
                direction: SpectrumDirection::Smallest,
                train_loss: TrainLossKind::Mse,
                s_reduction: Reduction::Sum,
            };
            combined_objective(&mut tape, 60, &lb, Some(&ub), &cfg, None).unwrap().total
        }
    };
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).unwrap();
    (value, model.gather_grads(&bound, &grads))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn every_loss_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    for point in 0..25 {
        let params = MlpModel::init(&DIMS, 100 + point).unwrap().params().to_vec();
        let p = problem(&mut rng);
        for which in ALL {
            let (_, analytic) = eval(&params, &p, which);
            let mut numeric = vec![0.0; params.len()];
            let mut probe = params.clone();
            for i in 0..params.len() {
                probe[i] = params[i] + h;
                let plus = eval(&probe, &p, which).0;
                probe[i] = params[i] - h;
                let minus = eval(&probe, &p, which).0;
                probe[i] = params[i];
                numeric[i] = (plus - minus) / (2.0 * h);
            }
            let err = relative_error(&analytic, &numeric);
            assert!(err <= 1e-6, "{which:?} at point {point}: relative error {err:e}");
        }
    }
}

proptest! {
    #[test]
    fn c_loss_is_scale_invariant(
        ys in prop::collection::vec(-2.0f64..2.0, 8),
        bs in prop::collection::vec(-5.0f64..0.0, 2),
        bx in 0.0f64..2.0,
        c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
    ) {
        prop_assume!(ys[..4].iter().map(|v| v * v).sum::<f64>() > 1e-3);
        prop_assume!(ys[4..].iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let h = ising_hamiltonian(2, bx, 0.01).unwrap();
        let mut mats = h.as_slice().to_vec();
        mats.extend_from_slice(h.as_slice());
        let value = |scale: f64| {
            let mut tape = Tape::new();
            let m = tape.constant(DenseMatrix::from_vec(2, 16, mats.clone()).unwrap());
            let y = tape.constant(DenseMatrix::from_vec(2, 4, ys.iter().map(|v| scale * v).collect()).unwrap());
            let b = tape.constant(DenseMatrix::from_vec(2, 1, bs.clone()).unwrap());
            let batch = LossBatch { matrices: m, pred: PredictionVars { y_hat: y, b_hat: b }, labels: None };
            let v = c_loss(&mut tape, &batch).unwrap();
            tape.scalar(v)
        };
        let base = value(1.0);
        prop_assert!((value(c) - base).abs() <= 1e-10 * base.max(1.0));
    }
}
