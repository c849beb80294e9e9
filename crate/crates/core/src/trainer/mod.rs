//! Cycle-consistent training: the answering model and the question
//! generator composed into one objective, with gating, late activation,
//! gradient clipping and checkpointed loops.

mod checkpoint;
mod config;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{CycleConfig, OptimizerKind};
pub use optim::{clip_by_global_norm, OptimizerState};

use crate::corpus::{AnswerVocabulary, DatasetSplit, FeatureStore, QaInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vqa::{forward_on_tape, predict_answer, VqaDims, VqaOutput, VqaParams, VqaVars, PROB_FLOOR};
use crate::vqg::{conditioning_on_tape, decode_generate, teacher_forced_on_tape, VqgDims, VqgParams, VqgVars};

pub const STEP_LOG_HEADER: &str = "iteration,loss_F,loss_G,loss_cycle,loss_att,loss_total,gate_pass,gate_total,cycle_active";

/// Parameters, optimizer slots and the noise RNG for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub vqa: VqaParams,
    pub vqg: VqgParams,
    pub vqa_opt: OptimizerState,
    pub vqg_opt: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters for the given vocabulary sizes and feature width.
    pub fn new(vocab: usize, answers: usize, feature_dim: usize, config: &CycleConfig) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(1);
        let vqa = VqaParams::init(
            VqaDims {
                vocab,
                answers,
                feature_dim,
                embed: config.embed_dim,
                hidden: config.question_hidden,
                attention: config.attention_dim,
                fusion: config.fusion_dim,
            },
            &mut init_rng,
        );
        let vqg = VqgParams::init(
            VqgDims {
                vocab,
                answers,
                feature_dim,
                embed: config.embed_dim,
                encoder: config.vqg_encoder_dim,
                hidden: config.vqg_hidden,
            },
            &mut init_rng,
        );
        TrainState {
            iteration: 0,
            vqa_opt: OptimizerState::new(config.optimizer, &vqa),
            vqg_opt: OptimizerState::new(config.optimizer, &vqg),
            vqa,
            vqg,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }
}

/// Diagnostics for one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleStepRecord {
    pub iteration: u64,
    pub loss_f: f64,
    pub loss_g: f64,
    pub loss_cycle: f64,
    pub loss_att: f64,
    /// The value that was differentiated.
    pub loss_total: f64,
    pub gate_pass: usize,
    pub gate_total: usize,
    pub cycle_active: bool,
    /// Global gradient norm before clipping; zero until a backward pass runs.
    pub grad_norm: f64,
}

impl CycleStepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss_f,
            self.loss_g,
            self.loss_cycle,
            self.loss_att,
            self.loss_total,
            self.gate_pass,
            self.gate_total,
            self.cycle_active
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Kept,
    Dropped,
}

/// Keeps a generated question if the model answers it with `target` or its
/// encoding is closer than `t_sim` (cosine) to the original encoding.
pub fn gating_filter(original_encoding: &[f64], generated_output: &VqaOutput, target: usize, t_sim: f64) -> GateDecision {
    if predict_answer(generated_output) == target
        || tensor::cosine(original_encoding, &generated_output.question_encoding) > t_sim
    {
        GateDecision::Kept
    } else {
        GateDecision::Dropped
    }
}

/// Squared L2 distance between two attention maps.
pub fn attention_consistency_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("attention weights", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// A recorded cycle forward pass, ready for back-propagation.
pub struct CycleForward {
    pub record: CycleStepRecord,
    pub tape: Tape,
    pub total: Var,
    pub vqa_vars: VqaVars,
    pub vqg_vars: Option<VqgVars>,
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Var {
    let sum = tape.add_all(terms);
    if terms.len() > 1 {
        tape.scale(sum, 1.0 / terms.len() as f64)
    } else {
        sum
    }
}

/// Records `L_F + λ_G·L_G + λ_C·L_cycle (+ λ_att·L_att)` for a batch.
///
/// The generator is conditioned on detached copies of the answer
/// distribution and attended features, so `L_G` only trains the generator.
/// Generated questions are discrete and carry no gradient; the second
/// answering pass reuses `vqa_vars`, so `L_cycle` trains the same answering
/// parameters as `L_F`.
pub fn cycle_forward(
    state: &mut TrainState,
    batch: &[&QaInstance],
    features: &FeatureStore,
    answers: &AnswerVocabulary,
    config: &CycleConfig,
) -> Result<CycleForward> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let cycle_active = config.enable_a_consistency && state.iteration >= config.a_iter;
    let need_generator = config.enable_q_consistency || cycle_active;
    let use_att = cycle_active && config.enable_attention_consistency;
    let encoder_dim = state.vqg.dims().encoder;

    let mut tape = Tape::new();
    let vqa_vars = state.vqa.bind(&mut tape);
    let vqg_vars = need_generator.then(|| state.vqg.bind(&mut tape));

    let (mut f_terms, mut g_terms, mut c_terms, mut a_terms) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gate_pass, mut gate_total) = (0usize, 0usize);

    for inst in batch {
        let image = features.get(inst.image_id)?;
        state.vqa.check_inputs(&inst.question, image)?;
        let image_var = tape.constant(image.features.clone());
        let trace = forward_on_tape(&mut tape, &vqa_vars, &inst.question, image_var);
        let target = answers.index_of(inst.labels.canonical());
        if let Some(t) = target {
            f_terms.push(tape.neg_log_pick(trace.probs, t, PROB_FLOOR));
        }
        let Some(gv) = vqg_vars else { continue };

        let answer_const = tape.value(trace.probs).clone();
        let answer_const = tape.constant(answer_const);
        let attended = if config.use_unattended_features {
            Tensor::row_vector(image.mean_region())
        } else {
            tape.value(trace.attended).clone()
        };
        let attended_const = tape.constant(attended);
        let noise = config.noise().sample(encoder_dim, &mut state.rng);
        let cond = conditioning_on_tape(&mut tape, &gv, answer_const, attended_const, noise);
        if config.enable_q_consistency {
            g_terms.push(teacher_forced_on_tape(&mut tape, &gv, cond, &inst.question));
        }

        let (true, Some(t)) = (cycle_active, target) else { continue };
        let cond_value = tape.value(cond).data.clone();
        let generated = decode_generate(&state.vqg, &cond_value, config.max_gen_len, config.cycle_decode(), &mut state.rng)?;
        let gen_trace = forward_on_tape(&mut tape, &vqa_vars, &generated, image_var);
        gate_total += 1;
        let kept = !config.enable_gating || {
            let original_encoding = &tape.value(trace.encoding).data;
            gating_filter(original_encoding, &gen_trace.output(&tape), t, config.t_sim) == GateDecision::Kept
        };
        if kept {
            gate_pass += 1;
            c_terms.push(tape.neg_log_pick(gen_trace.probs, t, PROB_FLOOR));
            if use_att {
                let d = tape.sub(trace.attention, gen_trace.attention);
                let sq = tape.mul(d, d);
                a_terms.push(tape.sum(sq));
            }
        }
    }

    let loss_f = mean(&mut tape, &f_terms);
    let loss_g = mean(&mut tape, &g_terms);
    let loss_c = mean(&mut tape, &c_terms);
    let loss_a = mean(&mut tape, &a_terms);
    let wg = tape.scale(loss_g, config.lambda_g);
    let wc = tape.scale(loss_c, config.lambda_c);
    let mut parts = vec![loss_f, wg, wc];
    if use_att {
        parts.push(tape.scale(loss_a, config.lambda_att));
    }
    let total = tape.add_all(&parts);

    let record = CycleStepRecord {
        iteration: state.iteration,
        loss_f: tape.value(loss_f).item(),
        loss_g: tape.value(loss_g).item(),
        loss_cycle: tape.value(loss_c).item(),
        loss_att: tape.value(loss_a).item(),
        loss_total: tape.value(total).item(),
        gate_pass,
        gate_total,
        cycle_active,
        grad_norm: 0.0,
    };
    Ok(CycleForward { record, tape, total, vqa_vars, vqg_vars })
}

/// One optimisation step; the state is untouched when the loss is not finite.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&QaInstance],
    features: &FeatureStore,
    answers: &AnswerVocabulary,
    config: &CycleConfig,
) -> Result<CycleStepRecord> {
    let snapshot_rng = state.rng.clone();
    let fwd = cycle_forward(state, batch, features, answers, config)?;
    let mut record = fwd.record;
    if !record.loss_total.is_finite() {
        state.rng = snapshot_rng;
        return Err(Error::Divergence { iteration: record.iteration, record: Box::new(record) });
    }
    let mut grads = fwd.tape.backward(fwd.total);
    let mut g_vqa = state.vqa.gradients(&fwd.vqa_vars, &mut grads);
    let mut g_vqg = match &fwd.vqg_vars {
        Some(v) => state.vqg.gradients(v, &mut grads),
        None => state.vqg.zeros_like(),
    };
    {
        let mut all: Vec<&mut Tensor> = g_vqa
            .named_mut()
            .into_iter()
            .chain(g_vqg.named_mut())
            .map(|(_, t)| t)
            .collect();
        record.grad_norm = clip_by_global_norm(&mut all, config.clip_norm);
    }
    if !record.grad_norm.is_finite() {
        state.rng = snapshot_rng;
        return Err(Error::Divergence { iteration: record.iteration, record: Box::new(record) });
    }
    state.vqa_opt.apply(&mut state.vqa, &g_vqa, config.vqa_learning_rate, config.momentum);
    state.vqg_opt.apply(&mut state.vqg, &g_vqg, config.vqg_learning_rate, config.momentum);
    state.iteration += 1;
    Ok(record)
}

/// Instance positions for `iteration`: the data is reshuffled each epoch
/// with a permutation that depends only on `(seed, epoch)`, so a resumed
/// run sees the same batches as an uninterrupted one.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = iteration / per_epoch;
    let pos = (iteration % per_epoch) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 2);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

/// Vocabularies stored alongside parameters in every checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub split: &'a DatasetSplit,
    pub features: &'a FeatureStore,
    pub vocab: &'a Vocabulary,
    pub answers: &'a AnswerVocabulary,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<CycleStepRecord>,
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    checkpoint_dir(out_dir).join("final.ckpt")
}

/// Trains until `state.iteration == n_iterations`, appending to
/// `steps.csv` and writing a checkpoint every `checkpoint_every` steps
/// (0 disables periodic checkpoints) plus a final one.
pub fn train_loop(
    initial: TrainState,
    ctx: TrainContext<'_>,
    config: &CycleConfig,
    n_iterations: u64,
    checkpoint_every: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if n_iterations < 1 {
        return Err(Error::Argument("n_iterations must be at least 1".into()));
    }
    if ctx.split.instances.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let ckpt_dir = checkpoint_dir(out_dir);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join("steps.csv");
    let fresh = initial.iteration == 0 || !log_path.exists();
    let mut log = if fresh {
        let mut f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{STEP_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?
    };

    let instances: Vec<&QaInstance> = ctx.split.instances.iter().collect();
    let mut state = initial;
    let mut records = Vec::new();
    let save = |state: &TrainState, path: &Path| {
        Checkpoint {
            vocab: ctx.vocab.clone(),
            answers: ctx.answers.clone(),
            config: config.clone(),
            state: state.clone(),
        }
        .save(path)
    };

    while state.iteration < n_iterations {
        let idx = batch_indices(instances.len(), config.batch_size, config.seed, state.iteration);
        let batch: Vec<&QaInstance> = idx.iter().map(|&i| instances[i]).collect();
        let record = train_step(&mut state, &batch, ctx.features, ctx.answers, config)?;
        writeln!(log, "{}", record.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
        if checkpoint_every > 0 && state.iteration % checkpoint_every == 0 {
            save(&state, &ckpt_dir.join(format!("iter_{:08}.ckpt", state.iteration)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&state, &final_checkpoint_path(out_dir))?;
    Ok(TrainOutcome { state, records })
}
