//! The answering model: an LSTM question encoder, single-head additive
//! attention over image regions and a fused answer classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RegionFeatures, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{init_bound, linear, lstm_step};
use crate::params::{param_set, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaDims {
    pub vocab: usize,
    pub answers: usize,
    pub feature_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub fusion: usize,
}

param_set! {
    /// Parameters of the reference answering backbone.
    VqaParams, VqaVars {
        embed,
        enc_w_ih,
        enc_w_hh,
        enc_b,
        att_feat_w,
        att_q_w,
        att_b,
        att_score_w,
        img_w,
        img_b,
        q_w,
        q_b,
        cls_w,
        cls_b,
    }
}

impl VqaParams {
    pub fn init<R: Rng + ?Sized>(dims: VqaDims, rng: &mut R) -> Self {
        let VqaDims { vocab, answers, feature_dim: d, embed: e, hidden: h, attention: a, fusion: f } = dims;
        let mut enc_b = Tensor::zeros(1, 4 * h);
        for j in h..2 * h {
            enc_b.data[j] = 1.0;
        }
        VqaParams {
            embed: Tensor::uniform(vocab, e, 0.5, rng),
            enc_w_ih: Tensor::uniform(4 * h, e, init_bound(e), rng),
            enc_w_hh: Tensor::uniform(4 * h, h, init_bound(h), rng),
            enc_b,
            att_feat_w: Tensor::uniform(a, d, init_bound(d), rng),
            att_q_w: Tensor::uniform(a, h, init_bound(h), rng),
            att_b: Tensor::zeros(1, a),
            att_score_w: Tensor::uniform(1, a, init_bound(a), rng),
            img_w: Tensor::uniform(f, d, init_bound(d), rng),
            img_b: Tensor::zeros(1, f),
            q_w: Tensor::uniform(f, h, init_bound(h), rng),
            q_b: Tensor::zeros(1, f),
            cls_w: Tensor::uniform(answers, f, init_bound(f), rng),
            cls_b: Tensor::zeros(1, answers),
        }
    }

    pub fn dims(&self) -> VqaDims {
        VqaDims {
            vocab: self.embed.rows,
            answers: self.cls_w.rows,
            feature_dim: self.img_w.cols,
            embed: self.embed.cols,
            hidden: self.enc_w_hh.cols,
            attention: self.att_feat_w.rows,
            fusion: self.img_w.rows,
        }
    }

    pub fn check_inputs(&self, question: &TokenSequence, image: &RegionFeatures) -> Result<()> {
        let dims = self.dims();
        if image.dim() != dims.feature_dim {
            return Err(Error::shape("image features", format!("D = {}", dims.feature_dim), format!("D = {}", image.dim())));
        }
        if let Some(&bad) = question.ids().iter().find(|&&t| t >= dims.vocab) {
            return Err(Error::shape("question tokens", format!("ids < {}", dims.vocab), format!("id {bad}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights(pub Vec<f64>);

fn on_simplex(v: &[f64], tol: f64) -> bool {
    v.iter().all(|p| *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

impl AnswerDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        on_simplex(&self.0, tol)
    }

    /// A point mass on `index`.
    pub fn delta(len: usize, index: usize) -> Self {
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        AnswerDistribution(p)
    }
}

impl AttentionWeights {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        on_simplex(&self.0, tol)
    }
}

/// Everything downstream consumers need from one answering pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaOutput {
    pub answer_distribution: AnswerDistribution,
    pub attention: AttentionWeights,
    pub question_encoding: Vec<f64>,
}

impl VqaOutput {
    pub fn confidence(&self) -> f64 {
        self.answer_distribution.0[predict_answer(self)]
    }
}

/// Tape handles produced by one answering pass.
#[derive(Clone, Copy, Debug)]
pub struct VqaTrace {
    pub probs: Var,
    pub attention: Var,
    pub encoding: Var,
    pub attended: Var,
}

impl VqaTrace {
    pub fn output(&self, tape: &Tape) -> VqaOutput {
        VqaOutput {
            answer_distribution: AnswerDistribution(tape.value(self.probs).data.clone()),
            attention: AttentionWeights(tape.value(self.attention).data.clone()),
            question_encoding: tape.value(self.encoding).data.clone(),
        }
    }
}

/// Records the answering pass for `question` over the constant `image` (`R × D`).
pub fn forward_on_tape(tape: &mut Tape, vars: &VqaVars, question: &TokenSequence, image: Var) -> VqaTrace {
    let hidden = tape.value(vars.enc_w_hh).cols;
    let regions = tape.value(image).rows;
    let mut h = tape.constant(Tensor::zeros(1, hidden));
    let mut c = tape.constant(Tensor::zeros(1, hidden));
    for &tok in question.ids() {
        let x = tape.gather_row(vars.embed, tok);
        (h, c) = lstm_step(tape, x, h, c, vars.enc_w_ih, vars.enc_w_hh, vars.enc_b);
    }
    let encoding = h;

    let feat_proj = tape.matmul_nt(image, vars.att_feat_w);
    let q_proj = linear(tape, encoding, vars.att_q_w, vars.att_b);
    let joint = tape.add_row(feat_proj, q_proj);
    let joint = tape.tanh(joint);
    let scores = tape.matmul_nt(joint, vars.att_score_w);
    let scores = tape.reshape(scores, 1, regions);
    let attention = tape.softmax_rows(scores);
    let attended = tape.matmul(attention, image);

    let v = linear(tape, attended, vars.img_w, vars.img_b);
    let v = tape.tanh(v);
    let q = linear(tape, encoding, vars.q_w, vars.q_b);
    let q = tape.tanh(q);
    let fused = tape.mul(v, q);
    let logits = linear(tape, fused, vars.cls_w, vars.cls_b);
    let probs = tape.softmax_rows(logits);
    VqaTrace { probs, attention, encoding, attended }
}

pub fn forward_vqa(params: &VqaParams, question: &TokenSequence, image: &RegionFeatures) -> Result<VqaOutput> {
    params.check_inputs(question, image)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let img = tape.constant(image.features.clone());
    Ok(forward_on_tape(&mut tape, &vars, question, img).output(&tape))
}

/// Cross-entropy `-ln(max(p[target], ε))`.
pub fn vqa_loss(output: &VqaOutput, target: usize) -> Result<f64> {
    let probs = output.answer_distribution.probs();
    if target >= probs.len() {
        return Err(Error::Argument(format!("target {target} outside {} answers", probs.len())));
    }
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

/// Arg-max answer index; ties go to the lowest index.
pub fn predict_answer(output: &VqaOutput) -> usize {
    tensor::argmax(output.answer_distribution.probs())
}

/// Loss and analytic parameter gradients for one example.
pub fn vqa_loss_and_gradients(
    params: &VqaParams,
    question: &TokenSequence,
    image: &RegionFeatures,
    target: usize,
) -> Result<(f64, VqaParams)> {
    params.check_inputs(question, image)?;
    if target >= params.dims().answers {
        return Err(Error::Argument(format!("target {target} outside answer vocabulary")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let img = tape.constant(image.features.clone());
    let trace = forward_on_tape(&mut tape, &vars, question, img);
    let loss = tape.neg_log_pick(trace.probs, target, PROB_FLOOR);
    let mut grads = tape.backward(loss);
    Ok((tape.value(loss).item(), params.gradients(&vars, &mut grads)))
}

/// Any backbone that maps `(question, image)` to a [`VqaOutput`].
pub trait AnswerModel {
    fn answer(&self, question: &TokenSequence, image: &RegionFeatures) -> Result<VqaOutput>;
}

impl AnswerModel for VqaParams {
    fn answer(&self, question: &TokenSequence, image: &RegionFeatures) -> Result<VqaOutput> {
        forward_vqa(self, question, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (VqaParams, TokenSequence, RegionFeatures) {
        let dims = VqaDims { vocab: 12, answers: 5, feature_dim: 4, embed: 8, hidden: 8, attention: 6, fusion: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = VqaParams::init(dims, &mut rng);
        let q = TokenSequence::new(vec![1, 5, 7, 9, 2]).unwrap();
        let img = RegionFeatures::new(1, Tensor::uniform(3, 4, 1.0, &mut rng)).unwrap();
        (params, q, img)
    }

    #[test]
    fn outputs_lie_on_simplex() {
        let (p, q, img) = tiny();
        let out = forward_vqa(&p, &q, &img).unwrap();
        assert!(out.answer_distribution.is_simplex(1e-5));
        assert!(out.attention.is_simplex(1e-5));
        assert_eq!(out.question_encoding.len(), 8);
    }

    #[test]
    fn zero_score_weights_give_uniform_attention() {
        let (mut p, q, img) = tiny();
        p.att_score_w = Tensor::zeros(1, 6);
        let out = forward_vqa(&p, &q, &img).unwrap();
        for w in out.attention.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let (p, q, img) = tiny();
        assert_eq!(forward_vqa(&p, &q, &img).unwrap(), forward_vqa(&p, &q, &img).unwrap());
    }

    #[test]
    fn shape_errors_name_the_role() {
        let (p, q, _) = tiny();
        let wrong = RegionFeatures::new(1, Tensor::zeros(3, 5)).unwrap();
        match forward_vqa(&p, &q, &wrong) {
            Err(Error::Shape { role, .. }) => assert_eq!(role, "image features"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_q = TokenSequence::new(vec![1, 40, 2]).unwrap();
        let img = RegionFeatures::new(1, Tensor::zeros(3, 4)).unwrap();
        assert!(matches!(forward_vqa(&p, &bad_q, &img), Err(Error::Shape { role: "question tokens", .. })));
    }

    fn output_with(probs: Vec<f64>) -> VqaOutput {
        VqaOutput {
            answer_distribution: AnswerDistribution(probs),
            attention: AttentionWeights(vec![1.0]),
            question_encoding: vec![0.0],
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(vqa_loss(&output_with(vec![0.0, 1.0]), 1).unwrap(), 0.0);
        let e2 = (-2.0f64).exp();
        assert!((vqa_loss(&output_with(vec![e2, 1.0 - e2]), 0).unwrap() - 2.0).abs() < 1e-12);
        let uniform = output_with(vec![0.1; 10]);
        assert!((vqa_loss(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((vqa_loss(&uniform, 3).unwrap() - 2.3026).abs() < 1e-4);
        assert!(matches!(vqa_loss(&uniform, 10), Err(Error::Argument(_))));
        let zero = output_with(vec![0.0, 1.0]);
        assert!((vqa_loss(&zero, 0).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn argmax_prediction() {
        assert_eq!(predict_answer(&output_with(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(predict_answer(&output_with(vec![0.5, 0.5])), 0);
    }
}
