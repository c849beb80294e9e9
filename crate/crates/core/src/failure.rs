//! Failure prediction: a binary head over (attended image, predicted answer
//! distribution, question encoding) trained against a frozen answering
//! model, the confidence-thresholding baseline and P/R/F1 scoring.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerVocabulary, FeatureStore, QaInstance, RegionFeatures};
use crate::error::{Error, Result};
use crate::eval::{vqa_accuracy, PredictionRecord};
use crate::nn::{init_bound, linear};
use crate::params::{param_set, ParamSet};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{OptimizerKind, OptimizerState};
use crate::vqa::{predict_answer, AnswerModel, VqaOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpDims {
    pub feature_dim: usize,
    pub answers: usize,
    pub question: usize,
    pub encoder: usize,
}

param_set! {
    FpParams, FpVars {
        img_w,
        img_b,
        ans_w,
        ans_b,
        comb_w,
        comb_b,
    }
}

impl FpParams {
    pub fn init<R: Rng + ?Sized>(dims: FpDims, rng: &mut R) -> Self {
        let FpDims { feature_dim: d, answers: a, question: h, encoder: e } = dims;
        FpParams {
            img_w: Tensor::uniform(e, d, init_bound(d), rng),
            img_b: Tensor::zeros(1, e),
            ans_w: Tensor::uniform(e, a, init_bound(a), rng),
            ans_b: Tensor::zeros(1, e),
            comb_w: Tensor::uniform(1, 2 * e + h, init_bound(2 * e + h), rng),
            comb_b: Tensor::zeros(1, 1),
        }
    }

    pub fn zeros(dims: FpDims) -> Self {
        let FpDims { feature_dim: d, answers: a, question: h, encoder: e } = dims;
        FpParams {
            img_w: Tensor::zeros(e, d),
            img_b: Tensor::zeros(1, e),
            ans_w: Tensor::zeros(e, a),
            ans_b: Tensor::zeros(1, e),
            comb_w: Tensor::zeros(1, 2 * e + h),
            comb_b: Tensor::zeros(1, 1),
        }
    }

    pub fn dims(&self) -> FpDims {
        FpDims {
            feature_dim: self.img_w.cols,
            answers: self.ans_w.cols,
            question: self.comb_w.cols - 2 * self.img_w.rows,
            encoder: self.img_w.rows,
        }
    }
}

/// One frozen-model prediction with its derived correctness label.
#[derive(Clone, Debug, PartialEq)]
pub struct FpExample {
    pub question_id: u64,
    pub vqa_output: VqaOutput,
    pub attended: Vec<f64>,
    pub confidence: f64,
    label: bool,
}

impl FpExample {
    /// Runs `model` on `instance`; the label is `θ(predicted) > 0`.
    pub fn from_model<M: AnswerModel>(
        model: &M,
        instance: &QaInstance,
        features: &FeatureStore,
        answers: &AnswerVocabulary,
    ) -> Result<Self> {
        let image = features.get(instance.image_id)?;
        let out = model.answer(&instance.question, image)?;
        Ok(Self::from_output(instance, out, image, answers))
    }

    pub fn from_output(instance: &QaInstance, out: VqaOutput, image: &RegionFeatures, answers: &AnswerVocabulary) -> Self {
        let idx = predict_answer(&out);
        let predicted = answers.answer(idx).unwrap_or_default();
        FpExample {
            question_id: instance.question_id,
            attended: image.attend(out.attention.weights()),
            confidence: out.answer_distribution.probs()[idx],
            label: vqa_accuracy(predicted, &instance.labels) > 0.0,
            vqa_output: out,
        }
    }

    pub fn label(&self) -> bool {
        self.label
    }

    fn check(&self, dims: FpDims) -> Result<()> {
        if self.attended.len() != dims.feature_dim {
            return Err(Error::shape("attended features", dims.feature_dim, self.attended.len()));
        }
        let a = self.vqa_output.answer_distribution.probs().len();
        if a != dims.answers {
            return Err(Error::shape("answer distribution", dims.answers, a));
        }
        let h = self.vqa_output.question_encoding.len();
        if h != dims.question {
            return Err(Error::shape("question encoding", dims.question, h));
        }
        Ok(())
    }
}

fn logit_on_tape(tape: &mut Tape, vars: &FpVars, ex: &FpExample) -> crate::tape::Var {
    let v = tape.constant(Tensor::row_vector(ex.attended.clone()));
    let a = tape.constant(Tensor::row_vector(ex.vqa_output.answer_distribution.probs().to_vec()));
    let q = tape.constant(Tensor::row_vector(ex.vqa_output.question_encoding.clone()));
    let v = linear(tape, v, vars.img_w, vars.img_b);
    let v = tape.tanh(v);
    let a = linear(tape, a, vars.ans_w, vars.ans_b);
    let a = tape.tanh(a);
    let joint = tape.concat_cols(&[v, a, q]);
    linear(tape, joint, vars.comb_w, vars.comb_b)
}

/// Probability that the frozen model's answer is correct.
pub fn fp_forward(params: &FpParams, example: &FpExample) -> Result<f64> {
    example.check(params.dims())?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let z = logit_on_tape(&mut tape, &vars, example);
    Ok(crate::tape::sigmoid(tape.value(z).item()))
}

/// Binary cross-entropy against the example's label, with gradients.
pub fn fp_loss_and_gradients(params: &FpParams, example: &FpExample) -> Result<(f64, FpParams)> {
    example.check(params.dims())?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let z = logit_on_tape(&mut tape, &vars, example);
    let loss = tape.bce_with_logits(z, if example.label { 1.0 } else { 0.0 });
    let mut grads = tape.backward(loss);
    Ok((tape.value(loss).item(), params.gradients(&vars, &mut grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpTrainConfig {
    pub encoder_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FpTrainConfig {
    fn default() -> Self {
        FpTrainConfig { encoder_dim: 300, epochs: 20, batch_size: 32, learning_rate: 1e-3, seed: 0 }
    }
}

/// Trains a fresh head with Adam. The answering model is only read when the
/// examples are built, so its parameters cannot change here.
pub fn train_fp(examples: &[FpExample], config: &FpTrainConfig) -> Result<FpParams> {
    let first = examples.first().ok_or_else(|| Error::Argument("no failure-prediction examples".into()))?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Argument("epochs and batch_size must be positive".into()));
    }
    let dims = FpDims {
        feature_dim: first.attended.len(),
        answers: first.vqa_output.answer_distribution.probs().len(),
        question: first.vqa_output.question_encoding.len(),
        encoder: config.encoder_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = FpParams::init(dims, &mut rng);
    let mut opt = OptimizerState::new(OptimizerKind::Adam, &params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut acc = params.zeros_like();
            for &i in chunk {
                let (_, g) = fp_loss_and_gradients(&params, &examples[i])?;
                for ((_, a), (_, g)) in acc.named_mut().into_iter().zip(g.named()) {
                    a.add_assign(g);
                }
            }
            for (_, a) in acc.named_mut() {
                a.scale_in_place(1.0 / chunk.len() as f64);
            }
            opt.apply(&mut params, &acc, config.learning_rate, 0.0);
        }
    }
    Ok(params)
}

/// Marks a prediction correct iff its confidence is at least `threshold`.
pub fn threshold_baseline(predictions: &[PredictionRecord], threshold: f64) -> Vec<bool> {
    predictions.iter().map(|p| p.confidence >= threshold).collect()
}

/// Precision, recall and F1 with "correct" as the positive class. Empty
/// denominators give 0.
pub fn precision_recall_f1(predicted: &[bool], truth: &[bool]) -> Result<(f64, f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predicted flags vs {} true flags",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("no flags to score".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpMode {
    Fp,
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mode: FpMode,
    pub threshold: f64,
}

impl FpReport {
    pub fn score(mode: FpMode, threshold: f64, predicted: &[bool], truth: &[bool]) -> Result<Self> {
        let (precision, recall, f1) = precision_recall_f1(predicted, truth)?;
        Ok(FpReport { precision, recall, f1, mode, threshold })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Tries every distinct confidence (and 0) as a threshold and keeps the
/// F1-maximizing one; ties go to the lowest threshold.
pub fn sweep_threshold(predictions: &[PredictionRecord], truth: &[bool]) -> Result<FpReport> {
    let mut candidates: Vec<f64> = predictions.iter().map(|p| p.confidence).collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<FpReport> = None;
    for t in candidates {
        let r = FpReport::score(FpMode::Threshold, t, &threshold_baseline(predictions, t), truth)?;
        if best.as_ref().is_none_or(|b| r.f1 > b.f1) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::Argument("no predictions to sweep".into()))
}
