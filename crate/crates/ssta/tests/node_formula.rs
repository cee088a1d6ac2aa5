//! Straight-line reference evaluation of the step formula, written
//! independently of the tape (naive loops, no shared helpers), checked
//! against the production step on random instances.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssta::node::{slices, HiddenState, init_params, Message, MessageSet, ModelConfig, NodeCell};
use ssta::tensor::{ParameterSet, Scalar, Tensor};

fn conv_naive(
    input: &[Scalar],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[Scalar],
    c_out: usize,
    k: usize,
    bias: &[Scalar],
) -> Vec<Scalar> {
    let p = (k as isize - 1) / 2;
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let iy = y + dy - p;
                            let ix = x + dx - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input[(ci * h + iy as usize) * w + ix as usize]
                                * kernel[((co * c_in + ci) * k + dy as usize) * k + dx as usize];
                        }
                    }
                }
                out[(co * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn dense_naive(weight: &[Scalar], rows: usize, cols: usize, x: &[Scalar], bias: &[Scalar]) -> Vec<Scalar> {
    (0..rows)
        .map(|r| bias[r] + (0..cols).map(|c| weight[r * cols + c] * x[c]).sum::<Scalar>())
        .collect()
}

/// The full step formula transcribed as one straight-line computation.
fn step_reference(
    cfg: &ModelConfig,
    params: &ParameterSet,
    frame: &[Scalar],
    hidden: &[Scalar],
    payloads: &[Vec<Scalar>],
) -> (Vec<Scalar>, Vec<Scalar>, Vec<Scalar>) {
    let (c, d, k, h, w) = (cfg.hidden_channels, cfg.msg_dim, cfg.kernel, cfg.height, cfg.width);
    let get = |name: &str| params.get(name).unwrap().data();

    let enc = conv_naive(frame, 1, h, w, get(slices::ENC_KERNEL), c, k, get(slices::ENC_BIAS));
    let rec = conv_naive(hidden, c, h, w, get(slices::REC_KERNEL), c, k, get(slices::REC_BIAS));
    let mut pre: Vec<Scalar> = enc.iter().zip(&rec).map(|(a, b)| a + b).collect();
    if !payloads.is_empty() {
        let mut mean = vec![0.0 as Scalar; d];
        for payload in payloads {
            for (m, v) in mean.iter_mut().zip(payload) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m *= 1.0 / payloads.len() as Scalar;
        }
        let proj = dense_naive(get(slices::MSG_IN_WEIGHT), c, d, &mean, get(slices::MSG_IN_BIAS));
        for ch in 0..c {
            for i in 0..h * w {
                pre[ch * h * w + i] += proj[ch];
            }
        }
    }
    let hidden_next: Vec<Scalar> = pre.iter().map(|v| v.tanh()).collect();
    let out = conv_naive(&hidden_next, c, h, w, get(slices::OUT_KERNEL), 1, k, get(slices::OUT_BIAS));
    let prediction: Vec<Scalar> = out.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let pooled: Vec<Scalar> = (0..c)
        .map(|ch| hidden_next[ch * h * w..(ch + 1) * h * w].iter().sum::<Scalar>() / (h * w) as Scalar)
        .collect();
    let message = dense_naive(get(slices::MSG_HEAD_WEIGHT), d, c, &pooled, get(slices::MSG_HEAD_BIAS));
    (prediction, hidden_next, message)
}

#[test]
fn step_matches_straight_line_reference() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(7, 9);
        cfg.hidden_channels = 5;
        cfg.msg_dim = 6;
        let params = init_params(&cfg, &mut rng);
        let cell = NodeCell::new(1, BTreeSet::from([2, 3]), cfg.clone());
        let frame = Tensor::uniform(vec![7, 9], 0.5, &mut rng);
        let hidden = HiddenState {
            node: 1,
            t: 0,
            grid: Tensor::uniform(vec![5, 7, 9], 0.8, &mut rng),
        };
        let mut msgs = MessageSet::new(1, 0);
        let mut payloads = Vec::new();
        for sender in [2, 3] {
            let payload = Tensor::uniform(vec![6], 1.0, &mut rng);
            payloads.push(payload.data().to_vec());
            msgs.insert(Message { sender, t: 0, payload }).unwrap();
        }

        let got = cell.step(&params, &frame, &hidden, &msgs).unwrap();
        let (pred, hid, msg) =
            step_reference(&cfg, &params, frame.data(), hidden.grid.data(), &payloads);

        for (a, b) in got.prediction.data().iter().zip(&pred) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: prediction {a} vs {b}");
        }
        for (a, b) in got.hidden.grid.data().iter().zip(&hid) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: hidden {a} vs {b}");
        }
        for (a, b) in got.message.payload.data().iter().zip(&msg) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: message {a} vs {b}");
        }
    }
}

#[test]
fn no_sender_variant_skips_message_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut cfg = ModelConfig::new(6, 6);
    cfg.hidden_channels = 3;
    cfg.msg_dim = 4;
    let params = init_params(&cfg, &mut rng);
    let cell = NodeCell::new(1, BTreeSet::new(), cfg.clone());
    let frame = Tensor::uniform(vec![6, 6], 0.5, &mut rng);
    let hidden = HiddenState { node: 1, t: 0, grid: Tensor::uniform(vec![3, 6, 6], 0.8, &mut rng) };
    let got = cell.step(&params, &frame, &hidden, &MessageSet::new(1, 0)).unwrap();
    let (pred, _, _) = step_reference(&cfg, &params, frame.data(), hidden.grid.data(), &[]);
    for (a, b) in got.prediction.data().iter().zip(&pred) {
        assert!((a - b).abs() < 1e-12);
    }
}
