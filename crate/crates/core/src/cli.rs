//! Command-line front end: `synth`, `train`, `eval`, `generate`, `fp`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{
    build_vocabulary, generate_synthetic_world, load_rephrasing_groups, write_annotations, write_groups,
    write_questions, AnswerVocabulary, DatasetSplit, FeatureStore, SplitName, VqaFiles, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{bleu, evaluate_consensus, predict_split, read_predictions, rouge_l, write_predictions};
use crate::failure::{sweep_threshold, threshold_baseline, train_fp, fp_forward, FpExample, FpMode, FpReport, FpTrainConfig};
use crate::trainer::{
    final_checkpoint_path, gating_filter, train_loop, Checkpoint, CycleConfig, GateDecision, TrainContext,
    TrainState,
};
use crate::vqa::{forward_vqa, AnswerDistribution};
use crate::vqg::{decode_generate, encode_conditioning, DecodeMode, NoiseConfig};

pub const QUESTIONS_FILE: &str = "questions.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const GROUPS_FILE: &str = "groups.json";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Debug, Parser)]
#[command(name = "cyclevqa", version, about = "Cycle-consistent VQA training and robustness evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid-world corpus with rephrasing groups.
    Synth(SynthArgs),
    /// Train the answering model, optionally with cycle consistency.
    Train(TrainArgs),
    /// Consensus scores and ORI/REP accuracy over rephrasing groups.
    Eval(EvalArgs),
    /// Generate questions from a trained checkpoint and score them.
    Generate(GenerateArgs),
    /// Failure prediction: trained head or confidence thresholding.
    Fp(FpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub images: usize,
    #[arg(long, default_value_t = 3)]
    pub questions_per_image: usize,
    #[arg(long, default_value_t = 3)]
    pub rephrasings: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: u64,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub max_answers: usize,
    #[arg(long)]
    pub enable_q_consistency: bool,
    #[arg(long)]
    pub enable_a_consistency: bool,
    #[arg(long)]
    pub enable_gating: bool,
    #[arg(long)]
    pub enable_attention_consistency: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenerateMode {
    Greedy,
    Sample,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = GenerateMode::Greedy)]
    pub mode: GenerateMode,
    /// Condition on a one-hot ground-truth answer instead of the model's A′.
    #[arg(long)]
    pub condition_on_gt: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FpCliMode {
    Fp,
    Threshold,
}

#[derive(Debug, Args)]
pub struct FpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: FpCliMode,
    /// Decision threshold. In threshold mode, omitting it sweeps for the best F1.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 300)]
    pub encoder_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Fp(a) => cmd_fp(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let world = generate_synthetic_world(a.seed, a.images, a.questions_per_image, a.rephrasings)?;
    create_dir(&a.out)?;
    write_questions(&a.out.join(QUESTIONS_FILE), &world.files.questions)?;
    write_annotations(&a.out.join(ANNOTATIONS_FILE), &world.files.annotations)?;
    write_groups(&a.out.join(GROUPS_FILE), &world.groups)?;
    world.features.write(&a.out.join(FEATURES_FILE))?;
    println!(
        "wrote {} images, {} questions, {} groups to {}",
        world.features.len(),
        world.files.questions.len(),
        world.groups.len(),
        a.out.display()
    );
    Ok(())
}

/// A data directory loaded against a fixed vocabulary.
pub struct LoadedData {
    pub split: DatasetSplit,
    pub features: FeatureStore,
}

pub fn read_data_files(dir: &Path) -> Result<VqaFiles> {
    VqaFiles::read(&dir.join(QUESTIONS_FILE), &dir.join(ANNOTATIONS_FILE))
}

/// Assembles the split, attaching `groups.json` when present.
pub fn load_data(dir: &Path, files: &VqaFiles, vocab: &Vocabulary, name: SplitName) -> Result<LoadedData> {
    let mut split = files.assemble(name, vocab)?;
    let groups_path = dir.join(GROUPS_FILE);
    if groups_path.exists() {
        split.groups = load_rephrasing_groups(&groups_path, &split)?;
    }
    let features = FeatureStore::read(&dir.join(FEATURES_FILE))?;
    Ok(LoadedData { split, features })
}

/// Vocabulary over every question text in the directory; answers from the
/// canonical labels.
pub fn vocab_for(files: &VqaFiles, max_answers: usize) -> Result<(Vocabulary, AnswerVocabulary)> {
    build_vocabulary(&files.question_texts(), &files.canonical_answers()?, max_answers)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.iterations < 1 {
        return Err(Error::Argument("--iterations must be at least 1".into()));
    }
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&a.config, &resumed) {
        (Some(p), _) => CycleConfig::load(p)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => CycleConfig::default(),
    };
    config.enable_q_consistency |= a.enable_q_consistency;
    config.enable_a_consistency |= a.enable_a_consistency;
    config.enable_gating |= a.enable_gating;
    config.enable_attention_consistency |= a.enable_attention_consistency;
    config.validate()?;

    let files = read_data_files(&a.data)?;
    let (vocab, answers, state) = match resumed {
        Some(ck) => (ck.vocab, ck.answers, ck.state),
        None => {
            let (vocab, answers) = vocab_for(&files, a.max_answers)?;
            let features = FeatureStore::read(&a.data.join(FEATURES_FILE))?;
            let state = TrainState::new(vocab.len(), answers.len(), features.dim(), &config);
            (vocab, answers, state)
        }
    };
    let data = load_data(&a.data, &files, &vocab, SplitName::Train)?;
    let train = data.split.originals_only();

    create_dir(&a.out)?;
    config.save(&a.out.join("config.snapshot"))?;
    let ctx = TrainContext { split: &train, features: &data.features, vocab: &vocab, answers: &answers };
    let outcome = train_loop(state, ctx, &config, a.iterations, a.checkpoint_every, &a.out)?;
    if let Some(last) = outcome.records.last() {
        println!(
            "iteration {}: loss_F {:.4} loss_G {:.4} loss_cycle {:.4} total {:.4}",
            last.iteration + 1,
            last.loss_f,
            last.loss_g,
            last.loss_cycle,
            last.loss_total
        );
    }
    println!("checkpoint written to {}", final_checkpoint_path(&a.out).display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let files = read_data_files(&a.data)?;
    create_dir(&a.out)?;
    let (data, predictions) = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let ck = Checkpoint::load(ck)?;
            let data = load_data(&a.data, &files, &ck.vocab, SplitName::Val)?;
            let preds = predict_split(&ck.state.vqa, &data.split, &data.features, &ck.answers)?;
            write_predictions(&a.out.join("predictions.jsonl"), &preds)?;
            (data, preds)
        }
        (None, Some(p)) => {
            let (vocab, _) = vocab_for(&files, usize::MAX)?;
            (load_data(&a.data, &files, &vocab, SplitName::Val)?, read_predictions(p)?)
        }
        (None, None) => return Err(Error::Argument("one of --checkpoint or --predictions is required".into())),
    };
    if data.split.groups.is_empty() {
        return Err(Error::integrity(format!("no rephrasing groups in {}", a.data.display()), Vec::new()));
    }
    let report = evaluate_consensus(&predictions, &data.split)?;
    write_text(&a.out.join("consensus.json"), &report.to_json())?;
    write_text(&a.out.join("cs_by_k.csv"), &report.cs_csv())?;
    print!("{}", report.table());
    Ok(())
}

#[derive(Serialize)]
struct GeneratedRecord<'a> {
    question_id: u64,
    generated: String,
    conditioning_answer: &'a str,
    kept_by_gate: bool,
}

#[derive(Debug, Serialize)]
pub struct VqgMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if !(a.temperature > 0.0) {
        return Err(Error::Argument("--temperature must be positive".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let files = read_data_files(&a.data)?;
    let data = load_data(&a.data, &files, &ck.vocab, SplitName::Val)?;
    let (vqa, vqg, config) = (&ck.state.vqa, &ck.state.vqg, &ck.config);
    let mode = match a.mode {
        GenerateMode::Greedy => DecodeMode::Greedy,
        GenerateMode::Sample => DecodeMode::Sample { temperature: a.temperature },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lines = String::new();
    let mut sums = [0.0f64; 5];
    for inst in &data.split.instances {
        let image = data.features.get(inst.image_id)?;
        let out = forward_vqa(vqa, &inst.question, image)?;
        let target = ck.answers.index_of(inst.labels.canonical());
        let (answer, cond_label) = match (a.condition_on_gt, target) {
            (true, Some(t)) => (AnswerDistribution::delta(ck.answers.len(), t), inst.labels.canonical()),
            _ => {
                let idx = crate::vqa::predict_answer(&out);
                (out.answer_distribution.clone(), ck.answers.answer(idx).unwrap_or_default())
            }
        };
        let attended = if config.use_unattended_features {
            image.mean_region()
        } else {
            image.attend(out.attention.weights())
        };
        let cond = encode_conditioning(vqg, &answer, &attended, NoiseConfig::OFF, &mut rng)?;
        let generated = decode_generate(vqg, &cond, config.max_gen_len, mode, &mut rng)?;
        let kept = match target {
            Some(t) => {
                let gen_out = forward_vqa(vqa, &generated, image)?;
                gating_filter(&out.question_encoding, &gen_out, t, config.t_sim) == GateDecision::Kept
            }
            None => false,
        };
        for (n, s) in sums.iter_mut().take(4).enumerate() {
            *s += bleu(&generated, std::slice::from_ref(&inst.question), n + 1);
        }
        sums[4] += rouge_l(&generated, &inst.question);
        let rec = GeneratedRecord {
            question_id: inst.question_id,
            generated: ck.vocab.decode(&generated),
            conditioning_answer: cond_label,
            kept_by_gate: kept,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let n = data.split.instances.len().max(1) as f64;
    let metrics = VqgMetrics {
        bleu1: sums[0] / n,
        bleu2: sums[1] / n,
        bleu3: sums[2] / n,
        bleu4: sums[3] / n,
        rouge_l: sums[4] / n,
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("generated.jsonl"), &lines)?;
    write_text(&a.out.join("vqg_metrics.json"), &serde_json::to_string_pretty(&metrics).expect("metrics serialize"))?;
    println!(
        "BLEU-1 {:.4} BLEU-4 {:.4} ROUGE-L {:.4}",
        metrics.bleu1, metrics.bleu4, metrics.rouge_l
    );
    Ok(())
}

/// Fraction of examples used to fit the failure-prediction head; the rest are scored.
const FP_TRAIN_FRACTION: f64 = 0.8;

pub fn cmd_fp(a: &FpArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument("--threshold must lie in [0, 1]".into()));
        }
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let files = read_data_files(&a.data)?;
    let data = load_data(&a.data, &files, &ck.vocab, SplitName::Val)?;
    let examples = data
        .split
        .instances
        .iter()
        .map(|inst| FpExample::from_model(&ck.state.vqa, inst, &data.features, &ck.answers))
        .collect::<Result<Vec<_>>>()?;
    if examples.len() < 2 {
        return Err(Error::Argument("failure prediction needs at least two instances".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ck.config.seed));
    let n_train = ((examples.len() as f64 * FP_TRAIN_FRACTION) as usize).clamp(1, examples.len() - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let test: Vec<&FpExample> = test_idx.iter().map(|&i| &examples[i]).collect();
    let truth: Vec<bool> = test.iter().map(|e| e.label()).collect();

    let report = match a.mode {
        FpCliMode::Fp => {
            let train: Vec<FpExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
            let cfg = FpTrainConfig {
                encoder_dim: a.encoder_dim,
                epochs: a.epochs,
                seed: ck.config.seed,
                ..FpTrainConfig::default()
            };
            let head = train_fp(&train, &cfg)?;
            let threshold = a.threshold.unwrap_or(0.5);
            let flags = test
                .iter()
                .map(|e| Ok(fp_forward(&head, e)? >= threshold))
                .collect::<Result<Vec<_>>>()?;
            FpReport::score(FpMode::Fp, threshold, &flags, &truth)?
        }
        FpCliMode::Threshold => {
            let preds: Vec<_> = test
                .iter()
                .map(|e| crate::eval::PredictionRecord {
                    question_id: e.question_id,
                    predicted_answer: String::new(),
                    confidence: e.confidence,
                })
                .collect();
            match a.threshold {
                Some(t) => FpReport::score(FpMode::Threshold, t, &threshold_baseline(&preds, t), &truth)?,
                None => {
                    let r = sweep_threshold(&preds, &truth)?;
                    println!("threshold {:.4} selected by F1 sweep", r.threshold);
                    r
                }
            }
        }
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("fp_report.json"), &report.to_json())?;
    println!(
        "precision {:.4} recall {:.4} F1 {:.4} ({} held-out examples)",
        report.precision,
        report.recall,
        report.f1,
        test.len()
    );
    Ok(())
}
