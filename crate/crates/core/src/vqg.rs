//! Answer-conditioned question generator.
//!
//! Two linear encoders map the answer distribution and the attended image
//! vector into a shared conditioning space; their sum (plus optional
//! Gaussian noise) is projected to the initial hidden and cell state of an
//! LSTM decoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::nn::{init_bound, linear, linear_values, lstm_step, lstm_step_values};
use crate::params::{param_set, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vqa::{AnswerDistribution, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqgDims {
    pub vocab: usize,
    pub answers: usize,
    pub feature_dim: usize,
    pub embed: usize,
    /// Width of both linear encoders.
    pub encoder: usize,
    pub hidden: usize,
}

param_set! {
    /// Parameters of the question generator.
    VqgParams, VqgVars {
        ans_w,
        ans_b,
        img_w,
        img_b,
        init_h_w,
        init_h_b,
        init_c_w,
        init_c_b,
        embed,
        w_ih,
        w_hh,
        b,
        out_w,
        out_b,
    }
}

impl VqgParams {
    pub fn init<R: Rng + ?Sized>(dims: VqgDims, rng: &mut R) -> Self {
        let VqgDims { vocab, answers, feature_dim: d, embed: e, encoder: c, hidden: h } = dims;
        let mut b = Tensor::zeros(1, 4 * h);
        for j in h..2 * h {
            b.data[j] = 1.0;
        }
        VqgParams {
            ans_w: Tensor::uniform(c, answers, init_bound(answers), rng),
            ans_b: Tensor::zeros(1, c),
            img_w: Tensor::uniform(c, d, init_bound(d), rng),
            img_b: Tensor::zeros(1, c),
            init_h_w: Tensor::uniform(h, c, init_bound(c), rng),
            init_h_b: Tensor::zeros(1, h),
            init_c_w: Tensor::uniform(h, c, init_bound(c), rng),
            init_c_b: Tensor::zeros(1, h),
            embed: Tensor::uniform(vocab, e, 0.5, rng),
            w_ih: Tensor::uniform(4 * h, e, init_bound(e), rng),
            w_hh: Tensor::uniform(4 * h, h, init_bound(h), rng),
            b,
            out_w: Tensor::uniform(vocab, h, init_bound(h), rng),
            out_b: Tensor::zeros(1, vocab),
        }
    }

    pub fn dims(&self) -> VqgDims {
        VqgDims {
            vocab: self.embed.rows,
            answers: self.ans_w.cols,
            feature_dim: self.img_w.cols,
            embed: self.embed.cols,
            encoder: self.ans_w.rows,
            hidden: self.w_hh.cols,
        }
    }

    fn check_target(&self, target: &TokenSequence) -> Result<()> {
        if target.len() < 2 {
            return Err(Error::Argument("teacher forcing needs at least two target tokens".into()));
        }
        let vocab = self.embed.rows;
        if let Some(&bad) = target.ids().iter().find(|&&t| t >= vocab) {
            return Err(Error::shape("target tokens", format!("ids < {vocab}"), format!("id {bad}")));
        }
        Ok(())
    }

    fn check_conditioning(&self, conditioning: &[f64]) -> Result<()> {
        if conditioning.len() != self.ans_w.rows {
            return Err(Error::shape("conditioning", self.ans_w.rows, conditioning.len()));
        }
        Ok(())
    }
}

/// Additive Gaussian noise on the conditioning vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig { scale: 0.0, enabled: false };

    /// `σ·z`, `z ~ N(0, I)`; `None` when disabled.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Option<Vec<f64>> {
        if !self.enabled {
            return None;
        }
        Some(
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.scale * z
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Conditioning vector on the tape from constant answer/attended inputs.
pub fn conditioning_on_tape(tape: &mut Tape, vars: &VqgVars, answer: Var, attended: Var, noise: Option<Vec<f64>>) -> Var {
    let a = linear(tape, answer, vars.ans_w, vars.ans_b);
    let v = linear(tape, attended, vars.img_w, vars.img_b);
    let e = tape.add(a, v);
    match noise {
        Some(eta) => {
            let eta = tape.constant(Tensor::row_vector(eta));
            tape.add(e, eta)
        }
        None => e,
    }
}

/// Mean per-token negative log-likelihood of `target[1..]` under teacher forcing.
pub fn teacher_forced_on_tape(tape: &mut Tape, vars: &VqgVars, conditioning: Var, target: &TokenSequence) -> Var {
    let mut h = linear(tape, conditioning, vars.init_h_w, vars.init_h_b);
    let mut c = linear(tape, conditioning, vars.init_c_w, vars.init_c_b);
    let ids = target.ids();
    let mut terms = Vec::with_capacity(ids.len() - 1);
    for t in 0..ids.len() - 1 {
        let x = tape.gather_row(vars.embed, ids[t]);
        (h, c) = lstm_step(tape, x, h, c, vars.w_ih, vars.w_hh, vars.b);
        let logits = linear(tape, h, vars.out_w, vars.out_b);
        let probs = tape.softmax_rows(logits);
        terms.push(tape.neg_log_pick(probs, ids[t + 1], PROB_FLOOR));
    }
    let total = tape.add_all(&terms);
    tape.scale(total, 1.0 / terms.len() as f64)
}

pub fn encode_conditioning<R: Rng + ?Sized>(
    params: &VqgParams,
    answer: &AnswerDistribution,
    attended: &[f64],
    noise: NoiseConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let dims = params.dims();
    if answer.probs().len() != dims.answers {
        return Err(Error::shape("answer distribution", dims.answers, answer.probs().len()));
    }
    if attended.len() != dims.feature_dim {
        return Err(Error::shape("attended features", dims.feature_dim, attended.len()));
    }
    let a = linear_values(answer.probs(), &params.ans_w, &params.ans_b);
    let v = linear_values(attended, &params.img_w, &params.img_b);
    let mut e: Vec<f64> = a.iter().zip(&v).map(|(x, y)| x + y).collect();
    if let Some(eta) = noise.sample(dims.encoder, rng) {
        for (x, n) in e.iter_mut().zip(eta) {
            *x += n;
        }
    }
    Ok(e)
}

pub fn vqg_teacher_forced_loss(params: &VqgParams, conditioning: &[f64], target: &TokenSequence) -> Result<f64> {
    params.check_conditioning(conditioning)?;
    params.check_target(target)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let cond = tape.constant(Tensor::row_vector(conditioning.to_vec()));
    let loss = teacher_forced_on_tape(&mut tape, &vars, cond, target);
    Ok(tape.value(loss).item())
}

/// Noise-free loss from raw inputs and its gradient with respect to every
/// generator parameter, encoders included.
pub fn vqg_loss_and_gradients(
    params: &VqgParams,
    answer: &AnswerDistribution,
    attended: &[f64],
    target: &TokenSequence,
) -> Result<(f64, VqgParams)> {
    let dims = params.dims();
    if answer.probs().len() != dims.answers {
        return Err(Error::shape("answer distribution", dims.answers, answer.probs().len()));
    }
    if attended.len() != dims.feature_dim {
        return Err(Error::shape("attended features", dims.feature_dim, attended.len()));
    }
    params.check_target(target)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let a = tape.constant(Tensor::row_vector(answer.probs().to_vec()));
    let v = tape.constant(Tensor::row_vector(attended.to_vec()));
    let cond = conditioning_on_tape(&mut tape, &vars, a, v, None);
    let loss = teacher_forced_on_tape(&mut tape, &vars, cond, target);
    let mut grads = tape.backward(loss);
    Ok((tape.value(loss).item(), params.gradients(&vars, &mut grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn init_decoder(params: &VqgParams, conditioning: &[f64]) -> Result<DecoderState> {
    params.check_conditioning(conditioning)?;
    Ok(DecoderState {
        h: linear_values(conditioning, &params.init_h_w, &params.init_h_b),
        c: linear_values(conditioning, &params.init_c_w, &params.init_c_b),
    })
}

/// Feeds `token` and returns next-token logits and the new state.
pub fn decoder_step(params: &VqgParams, state: &DecoderState, token: usize) -> (Vec<f64>, DecoderState) {
    let x = params.embed.row(token);
    let (h, c) = lstm_step_values(x, &state.h, &state.c, &params.w_ih, &params.w_hh, &params.b);
    let logits = linear_values(&h, &params.out_w, &params.out_b);
    (logits, DecoderState { h, c })
}

/// Free-running generation starting from `sos`. Pad and sos are never
/// emitted. Stops at eos or after `max_len - 1` generated tokens, so the
/// result (sos included) never exceeds `max_len` tokens.
pub fn decode_generate<R: Rng + ?Sized>(
    params: &VqgParams,
    conditioning: &[f64],
    max_len: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Argument("max_len must be at least 2".into()));
    }
    if let DecodeMode::Sample { temperature } = mode {
        if !(temperature > 0.0) {
            return Err(Error::Argument("sampling temperature must be positive".into()));
        }
    }
    let mut state = init_decoder(params, conditioning)?;
    let mut ids = vec![SOS];
    let mut prev = SOS;
    while ids.len() < max_len {
        let (mut logits, next) = decoder_step(params, &state, prev);
        state = next;
        logits[PAD] = f64::NEG_INFINITY;
        logits[SOS] = f64::NEG_INFINITY;
        let tok = match mode {
            DecodeMode::Greedy => tensor::argmax(&logits),
            DecodeMode::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                sample_index(&tensor::softmax(&scaled), rng)
            }
        };
        ids.push(tok);
        if tok == EOS {
            break;
        }
        prev = tok;
    }
    TokenSequence::new(ids)
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
