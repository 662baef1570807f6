#![allow(dead_code)]

use polysent::layers::{self, LstmWeights, Mode};
use polysent::model::{ModelConfig, SentimentModel};
use polysent::rng::{stream_rng, Stream};
use polysent::text::{EncodedText, Encoder, Vocabulary};
use polysent::{ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so that
/// symmetric outputs (e.g. softmax rows) still carry gradient.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let m = tape.mul_const(v, w)?;
    Ok(tape.sum(m))
}

/// Max relative error between backward and central differences over every
/// element of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let g = grads.wrt(v);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Max relative error for every trainable parameter of a store-backed graph.
pub fn check_params<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape).unwrap();
        tape.backward(loss).unwrap().into_param_grads()
    };
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape).unwrap();
        tape.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    let mut s = store.clone();
    for id in store.trainable_ids() {
        let g = analytic.iter().find(|(gid, _)| *gid == id).map(|(_, g)| g.clone());
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            s.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&s);
            s.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&s);
            s.get_mut(id).data_mut()[i] = orig;
            let a = g.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Layer-level gradient checks; each returns its max relative error.
pub fn layer_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = rand_tensor(&mut rng, &[3, 4], 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], 1.0);
    let b = rand_tensor(&mut rng, &[5], 1.0);
    out.push((
        "dense",
        check_inputs(&[x, w, b], |t, v| {
            let y = layers::dense(t, v[0], v[1], v[2])?;
            weighted_sum(t, y)
        }),
    ));

    let table = rand_tensor(&mut rng, &[6, 3], 1.0);
    out.push((
        "embedding",
        check_inputs(&[table], |t, v| {
            let y = layers::embedding_lookup(t, v[0], &[1, 4, 4, 0, 5])?;
            weighted_sum(t, y)
        }),
    ));

    let x = rand_tensor(&mut rng, &[2, 8, 3], 1.0);
    let f = rand_tensor(&mut rng, &[2, 7, 3], 0.5);
    let fb = rand_tensor(&mut rng, &[2], 0.5);
    out.push((
        "conv1d+relu+maxpool",
        check_inputs(&[x, f, fb], |t, v| {
            let c = layers::conv1d(t, v[0], v[1], v[2])?;
            let r = t.relu(c);
            let m = t.reduce_max_over_time(r)?;
            weighted_sum(t, m)
        }),
    ));

    let (d, u) = (3, 4);
    let xs = rand_tensor(&mut rng, &[2, 5, d], 1.0);
    let w_ih = rand_tensor(&mut rng, &[d, 4 * u], 0.6);
    let w_hh = rand_tensor(&mut rng, &[u, 4 * u], 0.6);
    let bias = rand_tensor(&mut rng, &[4 * u], 0.6);
    out.push((
        "lstm_sequence",
        check_inputs(&[xs, w_ih, w_hh, bias], |t, v| {
            let w = LstmWeights {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
            };
            let seq = layers::lstm_sequence(t, v[0], Some(&[5, 2]), &w, true)?;
            let last = layers::lstm_sequence(t, v[0], Some(&[5, 2]), &w, false)?;
            let a = weighted_sum(t, seq)?;
            let b = weighted_sum(t, last)?;
            t.add(a, b)
        }),
    ));

    let x = rand_tensor(&mut rng, &[4, 3], 1.0);
    let gamma = rand_tensor(&mut rng, &[3], 1.0);
    let beta = rand_tensor(&mut rng, &[3], 1.0);
    out.push((
        "batch_norm(train)",
        check_inputs(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            let (y, _) = layers::batch_norm(t, v[0], v[1], v[2], Mode::Train, (&[], &[]))?;
            weighted_sum(t, y)
        }),
    ));
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    out.push((
        "batch_norm(eval)",
        check_inputs(&[x, gamma, beta], |t, v| {
            let (y, _) = layers::batch_norm(t, v[0], v[1], v[2], Mode::Eval, (&mean, &var))?;
            weighted_sum(t, y)
        }),
    ));

    let x = rand_tensor(&mut rng, &[3, 5], 1.0);
    out.push((
        "dropout",
        check_inputs(&[x], |t, v| {
            // a fresh identically-seeded rng reproduces the mask on every evaluation
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = layers::dropout(t, v[0], 0.4, Mode::Train, &mut r)?;
            weighted_sum(t, y)
        }),
    ));

    let logits = rand_tensor(&mut rng, &[3, 4], 2.0);
    out.push((
        "softmax+cross_entropy",
        check_inputs(&[logits.clone()], |t, v| {
            let p = t.softmax(v[0]);
            t.cross_entropy(p, &[0, 3, 1])
        }),
    ));
    out.push((
        "softmax_cross_entropy",
        check_inputs(&[logits], |t, v| t.softmax_cross_entropy(v[0], &[2, 2, 0])),
    ));
    out
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        kernel_size: 7,
        filters: 2,
        lstm1_units: 3,
        lstm2_units: 3,
        dense_units: 4,
        classes: 3,
        dropout: 0.5,
        seed,
        ..ModelConfig::default()
    }
}

/// V=10 vocabulary (8 words plus the reserved ids) with L=8.
pub fn tiny_encoder() -> Encoder {
    let words: Vec<String> = ["a", "b", "c", "d", "e", "f", "g", "h"].iter().map(|s| s.to_string()).collect();
    let mut tokens = vec!["<pad>".to_string(), "<oov>".to_string()];
    tokens.extend(words);
    Encoder {
        vocab: Vocabulary::from_tokens(tokens).unwrap(),
        max_len: 8,
        kernel: 7,
        fold_case: true,
    }
}

/// End-to-end check of the tiny model in train mode (B=2) with a fixed dropout mask.
pub fn model_check(seed: u64) -> f64 {
    let mut init = stream_rng(seed, Stream::Init);
    let mut model: SentimentModel<f64> = SentimentModel::build(tiny_config(seed), tiny_encoder(), &mut init).unwrap();
    // random batch-norm affine terms so the head is not at its symmetric init
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let ids = *model.param_ids();
    model.params.set(ids.bn_gamma, rand_tensor(&mut rng, &[4], 1.5)).unwrap();
    model.params.set(ids.bn_beta, rand_tensor(&mut rng, &[4], 1.0)).unwrap();
    model.params.set(ids.out_b, rand_tensor(&mut rng, &[3], 0.5)).unwrap();
    let len_a = rng.gen_range(1..=8);
    let len_b = rng.gen_range(1..=8);
    let mk = |n: usize, label: usize, rng: &mut ChaCha8Rng| {
        let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(1..10)).collect();
        ids.resize(8, 0);
        EncodedText {
            ids,
            true_length: n,
            label,
        }
    };
    let batch = vec![mk(len_a, 0, &mut rng), mk(len_b, 2, &mut rng)];
    check_params(&model.params, |tape| {
        let mut drop = stream_rng(seed, Stream::Dropout);
        let fwd = model.forward(tape, &batch, Mode::Train, &mut drop)?;
        tape.softmax_cross_entropy(fwd.logits, &[0, 2])
    })
}
