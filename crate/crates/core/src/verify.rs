//! Gradient verification suite run by `tte gradcheck` and the test suites.
//!
//! Every check builds a small random problem in `f64`, turns the output into a
//! scalar by contracting it with a fixed random tensor, and compares the
//! reverse-mode gradient against central differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asr::{AsrConfig, AsrModel};
use crate::corpus::batch::{Batch, BatchInput, InputKind, UtteranceInput};
use crate::corpus::vocab::Vocabulary;
use crate::error::Result;
use crate::nn::layers::{subsample_even, Activation, AttentionMode};
use crate::nn::{
    grad_check, grad_check_params, BlstmpEncoder, ConvBnBlock, Graph, LocationAttention, LstmCell,
    Mode, ParamStore, SeqLayout, Session, Var,
};
use crate::tensor::Tensor;
use crate::tte::{TteConfig, TteModel};

pub const DEFAULT_EPS: f64 = 1e-4;
/// Step for losses without kinks (no ReLU or absolute value), where a wider
/// step reduces rounding noise.
pub const SMOOTH_EPS: f64 = 1e-3;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Replaces every trainable weight with uniform noise so no gradient is
/// vanishingly small relative to the loss.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.value = rand_tensor(rng, p.value.rows(), p.value.cols(), scale);
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn contract(g: &Graph<f64>, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, r, c, 1.0));
    g.sum(g.mul(out, w))
}

fn check(name: &str, value: Result<f64>) -> Result<CheckResult> {
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: value?,
    })
}

fn session<'a>(g: &'a Graph<f64>, store: &'a ParamStore<f64>, mode: Mode) -> Session<'a, f64> {
    Session::new(g, store, mode, ChaCha8Rng::seed_from_u64(0))
}

/// Checks for every graph primitive and layer.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let eps = DEFAULT_EPS;
    let mut out = Vec::new();

    let (x, w, b) = (
        rand_tensor(&mut rng, 3, 4, 1.0),
        rand_tensor(&mut rng, 4, 5, 1.0),
        rand_tensor(&mut rng, 1, 5, 1.0),
    );
    out.push(check(
        "linear",
        grad_check(&[x, w, b], eps, |g, v| {
            let y = g.add_row(g.matmul(v[0], v[1]), v[2]);
            contract(g, y, 1)
        }),
    )?);

    let table = rand_tensor(&mut rng, 6, 3, 1.0);
    out.push(check(
        "embedding",
        grad_check(&[table], eps, |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 5]);
            contract(g, y, 2)
        }),
    )?);

    let x = rand_tensor(&mut rng, 4, 3, 2.0);
    out.push(check(
        "elementwise",
        grad_check(&[x.clone(), x.map(|v| v * 0.7 - 0.1)], eps, |g, v| {
            let a = g.tanh(v[0]);
            let b = g.sigmoid(v[1]);
            let c = g.relu(g.sub(v[0], v[1]));
            let d = g.abs(g.add(v[0], v[1]));
            let e = g.scale(g.mul(a, b), 1.5);
            let f = g.concat_cols(&[e, c, d]);
            let f = g.slice_cols(f, 1, 7);
            contract(g, f, 3)
        }),
    )?);

    let x = rand_tensor(&mut rng, 6, 2, 1.0);
    out.push(check(
        "reshape_tile_rows",
        grad_check(&[x], eps, |g, v| {
            let t = g.transpose(g.reshape(v[0], 3, 4));
            let t = g.tile_rows(t, 2);
            let r = g.concat_rows(&[g.slice_rows(t, 1, 3), g.slice_rows(t, 4, 2)]);
            contract(g, r, 4)
        }),
    )?);

    let mask_src = rand_tensor(&mut rng, 3, 4, 1.0);
    let m = Rc::new(mask_src.map(|v| if v > 0.0 { 1.0 } else { 0.25 }));
    let (a, b2) = (rand_tensor(&mut rng, 3, 4, 1.0), rand_tensor(&mut rng, 3, 4, 1.0));
    out.push(check(
        "blend_mask",
        grad_check(&[a, b2], eps, |g, v| {
            let y = g.blend(v[0], v[1], m.clone());
            let y = g.mul_const(y, m.clone());
            contract(g, y, 5)
        }),
    )?);

    let logits = rand_tensor(&mut rng, 4, 6, 2.0);
    out.push(check(
        "softmax_nll",
        grad_check(&[logits], eps, |g, v| {
            g.softmax_xent(v[0], &[1, 5, 0, 3], &[0.25, 0.5, 0.0, 1.0])
        }),
    )?);

    let e = rand_tensor(&mut rng, 3, 5, 2.0);
    let mask = vec![
        true, true, true, false, false, //
        true, true, true, true, true, //
        true, false, false, false, false,
    ];
    out.push(check(
        "masked_softmax",
        grad_check(&[e], eps, |g, v| {
            let y = g.masked_softmax(v[0], &mask);
            contract(g, y, 6)
        }),
    )?);

    let z = rand_tensor(&mut rng, 5, 1, 3.0);
    out.push(check(
        "bce_logits",
        grad_check(&[z], eps, |g, v| {
            g.bce_logits(v[0], &[0.0, 1.0, 0.0, 0.3, 1.0], &[1.0, 0.5, 0.2, 1.0, 0.0])
        }),
    )?);

    let (weights, states) = (rand_tensor(&mut rng, 2, 3, 1.0), rand_tensor(&mut rng, 6, 4, 1.0));
    out.push(check(
        "weighted_sum",
        grad_check(&[weights, states], eps, |g, v| {
            let y = g.weighted_sum(v[0], v[1]);
            contract(g, y, 7)
        }),
    )?);

    let layout = Rc::new(SeqLayout::new(vec![5, 3]));
    let (x, w) = (rand_tensor(&mut rng, 10, 3, 1.0), rand_tensor(&mut rng, 9, 4, 1.0));
    {
        let layout = layout.clone();
        out.push(check(
            "conv1d",
            grad_check(&[x.clone(), w], eps, move |g, v| {
                let y = g.conv1d(v[0], v[1], layout.clone(), 3);
                contract(g, y, 8)
            }),
        )?);
    }

    let (gamma, beta) = (rand_tensor(&mut rng, 1, 3, 1.0), rand_tensor(&mut rng, 1, 3, 1.0));
    for (name, running) in [("batch_norm_train", false), ("batch_norm_eval", true)] {
        let layout = layout.clone();
        let rm = [0.1, -0.2, 0.3];
        let rv = [0.5, 1.5, 0.9];
        out.push(check(
            name,
            grad_check(&[x.clone(), gamma.clone(), beta.clone()], eps, move |g, v| {
                let stats = running.then_some((&rm[..], &rv[..]));
                let (y, _, _) = g.batch_norm(v[0], v[1], v[2], layout.clone(), stats, 1e-5);
                contract(g, y, 9)
            }),
        )?);
    }

    let (gates, c_prev) = (rand_tensor(&mut rng, 2, 12, 1.5), rand_tensor(&mut rng, 2, 3, 1.0));
    out.push(check(
        "lstm_cell_raw",
        grad_check(&[gates, c_prev], eps, |g, v| {
            let y = g.lstm_cell(v[0], v[1]);
            contract(g, y, 10)
        }),
    )?);

    // Full cell with parameters, including the expectation form of zoneout.
    {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "cell", 3, 4, &mut rng);
        let x = rand_tensor(&mut rng, 2, 3, 1.0);
        let h0 = rand_tensor(&mut rng, 2, 4, 0.5);
        let c0 = rand_tensor(&mut rng, 2, 4, 0.5);
        out.push(check(
            "lstm_cell",
            grad_check_params(&mut store, eps, None, |g, st| {
                let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
                let (mut h, mut c) = (s.constant(h0.clone()), s.constant(c0.clone()));
                for _ in 0..3 {
                    let xv = s.constant(x.clone());
                    (h, c) = cell.step(&s, xv, h, c, 0.1);
                }
                let hc = g.concat_cols(&[h, c]);
                contract(g, hc, 11)
            }),
        )?);
    }

    let (xproj, recur) = (rand_tensor(&mut rng, 12, 8, 1.0), rand_tensor(&mut rng, 2, 8, 1.0));
    let seq_layout = Rc::new(SeqLayout::new(vec![4, 2, 3]));
    for (name, reverse) in [("lstm_sequence_fwd", false), ("lstm_sequence_bwd", true)] {
        let seq_layout = seq_layout.clone();
        out.push(check(
            name,
            grad_check(&[xproj.clone(), recur.clone()], eps, move |g, v| {
                let y = g.lstm_sequence(v[0], v[1], seq_layout.clone(), reverse);
                contract(g, y, 12)
            }),
        )?);
    }

    let sub_layout = SeqLayout::new(vec![5, 2]);
    let x = rand_tensor(&mut rng, 10, 3, 1.0);
    out.push(check(
        "subsample",
        grad_check(&[x], eps, |g, v| {
            let (y, _) = subsample_even(g, v[0], &sub_layout);
            contract(g, y, 13)
        }),
    )?);

    {
        let mut store = ParamStore::<f64>::new();
        let enc = BlstmpEncoder::new(&mut store, "enc", 3, 3, 4, 2, &[0, 1], &mut rng)?;
        let layout = SeqLayout::new(vec![7, 5]);
        let x = rand_tensor(&mut rng, 14, 3, 1.0);
        out.push(check(
            "blstmp_encode",
            grad_check_params(&mut store, eps, None, |g, st| {
                let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
                let (h, _) = enc.forward(&s, s.constant(x.clone()), &layout).expect("encode");
                contract(g, h, 14)
            }),
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new();
        let block =
            ConvBnBlock::new(&mut store, "conv", 3, 4, 3, Activation::Tanh, true, 0.5, &mut rng)?;
        let layout = Rc::new(SeqLayout::new(vec![4, 3]));
        let x = rand_tensor(&mut rng, 8, 3, 1.0);
        out.push(check(
            "conv_bn_block",
            grad_check_params(&mut store, eps, None, |g, st| {
                let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
                let y = block.forward(&s, s.constant(x.clone()), &layout);
                contract(g, y, 15)
            }),
        )?);
    }

    for (name, mode) in [
        ("location_attention_previous", AttentionMode::Previous),
        ("location_attention_cumulative", AttentionMode::Cumulative),
    ] {
        let mut store = ParamStore::<f64>::new();
        let att = LocationAttention::new(&mut store, "att", 3, 4, 5, 2, 3, mode, &mut rng)?;
        let layout = SeqLayout::new(vec![4, 3]);
        let states = rand_tensor(&mut rng, 8, 4, 1.0);
        let queries: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, 2, 3, 1.0)).collect();
        out.push(check(
            name,
            grad_check_params(&mut store, eps, None, |g, st| {
                let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
                let mem = att
                    .prepare(&s, s.constant(states.clone()), &layout)
                    .expect("prepare");
                let mut state = att.initial_state(&s, &mem);
                let mut outs = Vec::new();
                for q in &queries {
                    let (ctx, next) = att.attend(&s, &mem, s.constant(q.clone()), &state);
                    state = next;
                    outs.push(ctx);
                    outs.push(state.weights);
                }
                let parts: Vec<Var> = outs
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| contract(g, v, 100 + i as u64))
                    .collect();
                let total = g.concat_rows(&parts);
                g.sum(total)
            }),
        )?);
    }

    Ok(out)
}

fn toy_vocab() -> Vocabulary {
    Vocabulary::default()
}

/// Full recognizer loss on a two-utterance batch, stochastic layers off.
pub fn asr_loss_check() -> Result<CheckResult> {
    let vocab = toy_vocab();
    let config = AsrConfig::tiny(4);
    let mut store = ParamStore::<f64>::new();
    let model = AsrModel::build(&config, vocab.clone(), &mut store, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    scramble(&mut store, &mut rng, 0.8);
    let feats = [9usize, 6]
        .iter()
        .map(|&t| rand_tensor(&mut rng, t, 4, 1.0))
        .collect::<Vec<_>>();
    let texts = ["ab a", "ba"];
    let batch = Batch {
        ids: vec!["u0".into(), "u1".into()],
        texts: texts.iter().map(|s| s.to_string()).collect(),
        inputs: feats
            .into_iter()
            .map(|f| UtteranceInput {
                kind: InputKind::Features,
                data: f.cast(),
            })
            .collect(),
    };
    let batch = BatchInput::from_batch(&batch, &vocab)?;
    let value = grad_check_params(&mut store, SMOOTH_EPS, None, |g, st| {
        let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
        model.loss(&s, &batch).expect("asr loss").loss
    });
    check("asr_loss", value)
}

/// Full text-to-encoder loss on a padded two-utterance batch, stochastic layers off.
pub fn tte_loss_check() -> Result<CheckResult> {
    let vocab = toy_vocab();
    let config = TteConfig::tiny(3);
    let mut store = ParamStore::<f64>::new();
    let model = TteModel::build(&config, vocab.clone(), &mut store, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let targets = [rand_tensor(&mut rng, 5, 3, 0.8), rand_tensor(&mut rng, 3, 3, 0.8)];
    let ids = [vocab.encode("abc")?, vocab.encode("b a")?];
    let value = grad_check_params(&mut store, DEFAULT_EPS, None, |g, st| {
        let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
        model
            .loss(&s, &ids, &targets, true)
            .expect("tte loss")
            .total
    });
    check("tte_loss", value)
}

/// Postnet path alone (gradient through the refinement network).
pub fn tte_postnet_check() -> Result<CheckResult> {
    let vocab = toy_vocab();
    let config = TteConfig::tiny(3);
    let mut store = ParamStore::<f64>::new();
    let model = TteModel::build(&config, vocab, &mut store, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let q = rand_tensor(&mut rng, 4, config.decoder_units, 1.0);
    let layout = Rc::new(SeqLayout::new(vec![4]));
    let value = grad_check_params(&mut store, DEFAULT_EPS, None, |g, st| {
        let s = session(g, st, Mode::DETERMINISTIC_TRAIN);
        let (_, after) = model.postnet(&s, s.constant(q.clone()), &layout);
        contract(g, after, 16)
    });
    check("tte_postnet", value)
}

/// Everything: primitives plus both model losses.
pub fn full_suite() -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks()?;
    all.push(tte_postnet_check()?);
    all.push(asr_loss_check()?);
    all.push(tte_loss_check()?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for r in primitive_checks().unwrap() {
            assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn linear_layer_is_exact() {
        let r = &primitive_checks().unwrap()[0];
        assert_eq!(r.name, "linear");
        assert!(r.max_rel_error < 1e-7, "{:e}", r.max_rel_error);
    }

    #[test]
    fn softmax_nll_is_tight() {
        let r = primitive_checks()
            .unwrap()
            .into_iter()
            .find(|r| r.name == "softmax_nll")
            .unwrap();
        assert!(r.max_rel_error < 1e-6, "{:e}", r.max_rel_error);
    }

    #[test]
    fn model_losses_pass() {
        for r in [asr_loss_check().unwrap(), tte_loss_check().unwrap(), tte_postnet_check().unwrap()] {
            assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros(2, 2);
        assert!(grad_check(&[x], DEFAULT_EPS, |g, v| g.tanh(v[0])).is_err());
    }
}
