//! Layers of the hybrid classifier, expressed as compositions of tape ops.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-norm momentum for running statistics (`running ← m·running + (1−m)·batch`).
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
/// Initial value of the LSTM forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;
/// Half-width of the uniform embedding initializer.
pub const EMBEDDING_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn embedding_lookup<S: Scalar>(tape: &mut Tape<'_, S>, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather(table, ids)
}

/// Valid 1-D convolution over time; activation is left to the caller.
pub fn conv1d<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, filters: Var, bias: Var) -> Result<Var> {
    tape.conv1d(x, filters, bias)
}

/// `x·w + b` for `x` of shape `[n]` or `[B×n]`.
pub fn dense<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Weights of one LSTM layer. Gate blocks are laid out `[i | f | g | o]`
/// along the last axis of every tensor.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[d_in × 4u]`
    pub w_ih: Var,
    /// `[u × 4u]`
    pub w_hh: Var,
    /// `[4u]`
    pub bias: Var,
}

impl LstmWeights {
    pub fn units<S: Scalar>(&self, tape: &Tape<'_, S>) -> usize {
        tape.shape(self.w_hh)[0]
    }
}

/// One LSTM cell update. `x` is `[d_in]` or `[B×d_in]`; states match.
///
/// ```text
/// i, f, o = σ(x·W_ih + h·W_hh + b)   g = tanh(…)
/// c = f⊙c_prev + i⊙g                 h = o⊙tanh(c)
/// ```
pub fn lstm_step<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmWeights,
) -> Result<(Var, Var)> {
    let u = w.units(tape);
    if tape.shape(h_prev).last() != Some(&u) || tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(Error::Dimension {
            op: "lstm_step",
            lhs: tape.shape(h_prev).to_vec(),
            rhs: tape.shape(w.w_hh).to_vec(),
        });
    }
    let xi = tape.matmul(x, w.w_ih)?;
    let hh = tape.matmul(h_prev, w.w_hh)?;
    let pre = tape.add(xi, hh)?;
    let pre = tape.add_bias(pre, w.bias)?;
    let i_pre = tape.slice_cols(pre, 0, u)?;
    let f_pre = tape.slice_cols(pre, u, u)?;
    let g_pre = tape.slice_cols(pre, 2 * u, u)?;
    let o_pre = tape.slice_cols(pre, 3 * u, u)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the cell over `inputs` (each `[B×d_in]`) from a zero state and
/// returns the hidden state after every step.
///
/// With `lengths`, row `b` stops updating once `t ≥ lengths[b]`, so every
/// later output repeats the state at its true length.
pub fn lstm_steps<S: Scalar>(
    tape: &mut Tape<'_, S>,
    inputs: &[Var],
    lengths: Option<&[usize]>,
    w: &LstmWeights,
) -> Result<Vec<Var>> {
    let first = *inputs.first().ok_or(Error::EmptySequence("lstm_sequence"))?;
    let batch = tape.shape(first)[0];
    if let Some(lens) = lengths {
        if lens.len() != batch {
            return Err(Error::Dimension {
                op: "lstm_sequence",
                lhs: tape.shape(first).to_vec(),
                rhs: vec![lens.len()],
            });
        }
    }
    let u = w.units(tape);
    let mut h = tape.constant(Tensor::zeros(&[batch, u]));
    let mut c = tape.constant(Tensor::zeros(&[batch, u]));
    let mut outputs = Vec::with_capacity(inputs.len());
    for (t, &x) in inputs.iter().enumerate() {
        let (h_new, c_new) = lstm_step(tape, x, h, c, w)?;
        match lengths {
            Some(lens) if lens.iter().any(|&l| t >= l) => {
                let mask: Vec<bool> = lens.iter().map(|&l| t < l).collect();
                h = tape.select_rows(&mask, h_new, h)?;
                c = tape.select_rows(&mask, c_new, c)?;
            }
            _ => {
                h = h_new;
                c = c_new;
            }
        }
        outputs.push(h);
    }
    Ok(outputs)
}

/// LSTM over a whole sequence tensor `[T×d_in]` or `[B×T×d_in]`.
///
/// Returns every hidden state (`[T×u]` / `[B×T×u]`) when `return_sequence`
/// is set, otherwise the final (true-length) state `[u]` / `[B×u]`.
pub fn lstm_sequence<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: Var,
    lengths: Option<&[usize]>,
    w: &LstmWeights,
    return_sequence: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (batched, x3) = match shape.as_slice() {
        [t, d] => (false, tape.reshape(x, &[1, *t, *d])?),
        [_, _, _] => (true, x),
        _ => {
            return Err(Error::Dimension {
                op: "lstm_sequence",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    let steps = tape.shape(x3)[1];
    let inputs = (0..steps)
        .map(|t| tape.time_step(x3, t))
        .collect::<Result<Vec<_>>>()?;
    let hs = lstm_steps(tape, &inputs, lengths, w)?;
    let u = w.units(tape);
    if return_sequence {
        let seq = tape.stack_time(&hs)?;
        if batched {
            Ok(seq)
        } else {
            tape.reshape(seq, &[steps, u])
        }
    } else {
        let last = *hs.last().expect("non-empty");
        if batched {
            Ok(last)
        } else {
            tape.reshape(last, &[u])
        }
    }
}

/// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
/// element is zeroed with probability `rate` and survivors are scaled by
/// `1/(1−rate)`.
pub fn dropout<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, S>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = S::of(1.0 / (1.0 - rate));
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

/// Per-feature batch mean and population variance observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Batch normalization of `x[B×m]`.
///
/// Train mode normalizes by the batch statistics and returns them so the
/// caller can fold them into `running` with [`update_running_stats`]. Eval
/// mode normalizes by `running = (mean, var)`.
pub fn batch_norm<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: Mode,
    running: (&[S], &[S]),
) -> Result<(Var, Option<BatchMoments<S>>)> {
    let eps = S::of(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
            Ok((y, Some(BatchMoments { mean, var })))
        }
        Mode::Eval => Ok((tape.batch_norm_eval(x, gamma, beta, running.0, running.1, eps)?, None)),
    }
}

pub fn update_running_stats<S: Scalar>(mean: &mut [S], var: &mut [S], batch: &BatchMoments<S>) {
    let m = S::of(BN_MOMENTUM);
    let one_m = S::one() - m;
    for (r, &b) in mean.iter_mut().zip(&batch.mean) {
        *r = m * *r + one_m * b;
    }
    for (r, &b) in var.iter_mut().zip(&batch.var) {
        *r = m * *r + one_m * b;
    }
}

/// Tensor filled from `Uniform(−bound, bound)`.
pub fn uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm_params(store: &mut ParamStore<f64>, d_in: usize, u: usize, fill: f64) -> [crate::params::ParamId; 3] {
        [
            store.insert("w_ih", Tensor::full(&[d_in, 4 * u], fill), true).unwrap(),
            store.insert("w_hh", Tensor::full(&[u, 4 * u], fill), true).unwrap(),
            store.insert("b", Tensor::full(&[4 * u], fill), true).unwrap(),
        ]
    }

    #[test]
    fn embedding_examples() {
        let mut tape = Tape::<f64>::new();
        let table = tape.input(Tensor::matrix(&[&[1., 2.], &[3., 4.], &[5., 6.]]).unwrap());
        let e = embedding_lookup(&mut tape, table, &[2, 0]).unwrap();
        assert_eq!(tape.value(e).data(), &[5., 6., 1., 2.]);

        let e2 = embedding_lookup(&mut tape, table, &[2, 2]).unwrap();
        assert_eq!(tape.value(e2).data(), &[5., 6., 5., 6.]);
        let s = tape.sum(e2);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(table).data(), &[0., 0., 0., 0., 2., 2.]);

        let zero = tape.constant(Tensor::zeros(&[3, 2]));
        let z = embedding_lookup(&mut tape, zero, &[0]).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 0.]);

        assert!(matches!(
            embedding_lookup(&mut tape, table, &[3]),
            Err(Error::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(&[&[1.], &[2.], &[3.]]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 2, 1], &[1., 1.]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = conv1d(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3., 5.]);

        let wz = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let bz = tape.constant(Tensor::zeros(&[2]));
        let yz = conv1d(&mut tape, x, wz, bz).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));

        let wk = tape.constant(Tensor::from_f64(&[1, 3, 1], &[1., 0., -1.]).unwrap());
        let yk = conv1d(&mut tape, x, wk, b).unwrap();
        assert_eq!(tape.shape(yk), &[1, 1]);
        assert_eq!(tape.value(yk).data(), &[-2.]);

        let wlong = tape.constant(Tensor::zeros(&[1, 4, 1]));
        assert!(matches!(conv1d(&mut tape, x, wlong, b), Err(Error::Contract(_))));
    }

    #[test]
    fn lstm_step_zero_weights() {
        let mut store = ParamStore::new();
        let ids = lstm_params(&mut store, 1, 1, 0.0);
        let mut tape = Tape::with_params(&store);
        let w = LstmWeights {
            w_ih: tape.param(ids[0]),
            w_hh: tape.param(ids[1]),
            bias: tape.param(ids[2]),
        };
        let x = tape.constant(Tensor::vector(vec![0.7]));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let (h, c) = lstm_step(&mut tape, x, zero, zero, &w).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0]);
        assert_eq!(tape.value(c).data(), &[0.0]);

        let one = tape.constant(Tensor::vector(vec![1.0]));
        let (h, c) = lstm_step(&mut tape, x, zero, one, &w).unwrap();
        assert!((tape.value(c).data()[0] - 0.5).abs() < 1e-12);
        let expected = 0.5 * 0.5f64.tanh();
        assert!((tape.value(h).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn lstm_two_steps_zero_weights_stay_zero() {
        let mut store = ParamStore::new();
        let ids = lstm_params(&mut store, 1, 1, 0.0);
        let mut tape = Tape::with_params(&store);
        let w = LstmWeights {
            w_ih: tape.param(ids[0]),
            w_hh: tape.param(ids[1]),
            bias: tape.param(ids[2]),
        };
        let x = tape.constant(Tensor::matrix(&[&[1.0], &[-3.0]]).unwrap());
        let h = lstm_sequence(&mut tape, x, None, &w, false).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0]);
    }

    #[test]
    fn lstm_sequence_matches_repeated_steps_and_masks_tail() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, u, t) = (2, 3, 4);
        let ids = [
            store.insert("w_ih", uniform(&[d, 4 * u], 0.5, &mut rng), true).unwrap(),
            store.insert("w_hh", uniform(&[u, 4 * u], 0.5, &mut rng), true).unwrap(),
            store.insert("b", uniform(&[4 * u], 0.5, &mut rng), true).unwrap(),
        ];
        let xs: Tensor<f64> = uniform(&[2, t, d], 1.0, &mut rng);
        let mut tape = Tape::with_params(&store);
        let w = LstmWeights {
            w_ih: tape.param(ids[0]),
            w_hh: tape.param(ids[1]),
            bias: tape.param(ids[2]),
        };
        let x = tape.constant(xs.clone());
        let seq = lstm_sequence(&mut tape, x, Some(&[4, 2]), &w, true).unwrap();
        assert_eq!(tape.shape(seq), &[2, t, u]);

        // row 0 against manual stepping
        let mut h = tape.constant(Tensor::zeros(&[u]));
        let mut c = tape.constant(Tensor::zeros(&[u]));
        for step in 0..t {
            let xt = tape.constant(Tensor::vector(xs.data()[step * d..(step + 1) * d].to_vec()));
            (h, c) = lstm_step(&mut tape, xt, h, c, &w).unwrap();
            for j in 0..u {
                let got = tape.value(seq).at(&[0, step, j]);
                assert!((got - tape.value(h).data()[j]).abs() < 1e-14);
            }
        }
        // row 1 freezes after two steps
        for step in 2..t {
            for j in 0..u {
                assert_eq!(tape.value(seq).at(&[1, step, j]), tape.value(seq).at(&[1, 1, j]));
            }
        }
        let fin = lstm_sequence(&mut tape, x, Some(&[4, 2]), &w, false).unwrap();
        for j in 0..u {
            assert_eq!(tape.value(fin).at(&[1, j]), tape.value(seq).at(&[1, 1, j]));
        }
    }

    #[test]
    fn lstm_single_step_sequence_equals_step() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids = [
            store.insert("w_ih", uniform(&[2, 8], 0.5, &mut rng), true).unwrap(),
            store.insert("w_hh", uniform(&[2, 8], 0.5, &mut rng), true).unwrap(),
            store.insert("b", uniform(&[8], 0.5, &mut rng), true).unwrap(),
        ];
        let mut tape = Tape::with_params(&store);
        let w = LstmWeights {
            w_ih: tape.param(ids[0]),
            w_hh: tape.param(ids[1]),
            bias: tape.param(ids[2]),
        };
        let x = tape.constant(Tensor::matrix(&[&[0.3, -0.4]]).unwrap());
        let h_seq = lstm_sequence(&mut tape, x, None, &w, false).unwrap();
        let xv = tape.constant(Tensor::vector(vec![0.3, -0.4]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let (h, _) = lstm_step(&mut tape, xv, z, z, &w).unwrap();
        assert_eq!(tape.value(h_seq).data(), tape.value(h).data());
        let empty: [Var; 0] = [];
        assert!(matches!(lstm_steps(&mut tape, &empty, None, &w), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1., 2.]));
        let w = tape.constant(Tensor::matrix(&[&[1.], &[1.]]).unwrap());
        let b = tape.constant(Tensor::vector(vec![3.]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.]);

        let eye = tape.constant(Tensor::identity(2));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = dense(&mut tape, x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);

        let zx = tape.constant(Tensor::zeros(&[2]));
        let bb = tape.constant(Tensor::vector(vec![0.5, -1.5]));
        let y = dense(&mut tape, zx, eye, bb).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5]);

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(dense(&mut tape, x, bad, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[10], 1.0));
        assert_eq!(dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(
            dropout(&mut tape, x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));

        let big = tape.constant(Tensor::full(&[100_000], 1.0));
        let y = dropout(&mut tape, big, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(&[&[1., 5.], &[3., 5.]]).unwrap());
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::vector(vec![0.0, 0.25]));
        let (y, moments) = batch_norm(&mut tape, x, gamma, beta, Mode::Train, (&[0., 0.], &[1., 1.])).unwrap();
        let y = tape.value(y);
        assert!((y.at(&[0, 0]) + 1.0).abs() < 1e-3);
        assert!((y.at(&[1, 0]) - 1.0).abs() < 1e-3);
        // constant column collapses to β
        assert!((y.at(&[0, 1]) - 0.25).abs() < 1e-12);
        assert!((y.at(&[1, 1]) - 0.25).abs() < 1e-12);
        let moments = moments.unwrap();
        assert_eq!(moments.mean, vec![2.0, 5.0]);
        assert_eq!(moments.var, vec![1.0, 0.0]);

        let single = tape.constant(Tensor::matrix(&[&[1., 2.]]).unwrap());
        assert!(matches!(
            batch_norm(&mut tape, single, gamma, beta, Mode::Train, (&[0., 0.], &[1., 1.])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_norm_eval_ignores_batch_composition() {
        let mut tape = Tape::<f64>::new();
        let gamma = tape.constant(Tensor::vector(vec![2.0]));
        let beta = tape.constant(Tensor::vector(vec![1.0]));
        let stats = (&[1.0][..], &[4.0][..]);
        let a = tape.constant(Tensor::matrix(&[&[3.0], &[9.0]]).unwrap());
        let b = tape.constant(Tensor::matrix(&[&[3.0], &[-100.0]]).unwrap());
        let (ya, _) = batch_norm(&mut tape, a, gamma, beta, Mode::Eval, stats).unwrap();
        let (yb, _) = batch_norm(&mut tape, b, gamma, beta, Mode::Eval, stats).unwrap();
        assert_eq!(tape.value(ya).data()[0], tape.value(yb).data()[0]);
        let expected = 2.0 * (3.0 - 1.0) / (4.0f64 + BN_EPS).sqrt() + 1.0;
        assert!((tape.value(ya).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut mean = vec![0.0f64];
        let mut var = vec![1.0f64];
        update_running_stats(&mut mean, &mut var, &BatchMoments { mean: vec![10.0], var: vec![3.0] });
        assert!((mean[0] - 0.1).abs() < 1e-12);
        assert!((var[0] - 1.02).abs() < 1e-12);
    }
}
