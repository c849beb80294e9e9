#![allow(dead_code)]

use std::path::Path;

use cyclevqa::corpus::{
    build_vocabulary, generate_synthetic_world, AnswerVocabulary, DatasetSplit, FeatureStore, RegionFeatures,
    RephrasingGroup, SplitName, TokenSequence, Vocabulary, EOS, SOS,
};
use cyclevqa::params::ParamSet;
use cyclevqa::tensor::Tensor;
use cyclevqa::trainer::{CycleConfig, OptimizerKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_MIN_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Central differences over every scalar of `params`, compared with the
/// analytic gradient on coordinates where either magnitude exceeds the floor.
pub fn grad_check<P: ParamSet + Clone>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> GradCheck {
    let analytic: Vec<f64> = analytic.named().iter().flat_map(|(_, t)| t.data.clone()).collect();
    let mut probe = params.clone();
    let mut k = 0;
    let mut out = GradCheck { checked: 0, passed: 0, worst: 0.0 };
    let n_tensors = probe.named().len();
    for ti in 0..n_tensors {
        let len = probe.named()[ti].1.len();
        for j in 0..len {
            let orig = probe.named()[ti].1.data[j];
            probe.named_mut()[ti].1.data[j] = orig + FD_STEP;
            let up = loss(&probe);
            probe.named_mut()[ti].1.data[j] = orig - FD_STEP;
            let down = loss(&probe);
            probe.named_mut()[ti].1.data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k];
            k += 1;
            if a.abs().max(numeric.abs()) <= FD_MIN_GRAD {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            out.checked += 1;
            if rel < FD_REL_TOL {
                out.passed += 1;
            }
            out.worst = out.worst.max(rel);
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seq(content: &[usize]) -> TokenSequence {
    let mut ids = vec![SOS];
    ids.extend_from_slice(content);
    ids.push(EOS);
    TokenSequence::new(ids).unwrap()
}

pub fn tiny_image(seed: u64) -> RegionFeatures {
    RegionFeatures::new(1, Tensor::uniform(3, 4, 1.0, &mut rng(seed))).unwrap()
}

/// Small, fast settings shared by the training tests.
pub fn small_config() -> CycleConfig {
    CycleConfig {
        optimizer: OptimizerKind::Adam,
        vqa_learning_rate: 0.003,
        vqg_learning_rate: 0.003,
        clip_norm: 5.0,
        batch_size: 16,
        embed_dim: 16,
        question_hidden: 24,
        attention_dim: 24,
        fusion_dim: 24,
        vqg_encoder_dim: 24,
        vqg_hidden: 32,
        ..CycleConfig::default()
    }
}

/// Configuration of the desk-scale ablation runs.
pub fn trend_config(seed: u64) -> CycleConfig {
    CycleConfig {
        optimizer: OptimizerKind::Adam,
        vqa_learning_rate: 0.003,
        vqg_learning_rate: 0.003,
        batch_size: 32,
        question_hidden: 48,
        vqg_encoder_dim: 64,
        vqg_hidden: 64,
        clip_norm: 5.0,
        a_iter: 600,
        cycle_temperature: 1.0,
        seed,
        ..CycleConfig::default()
    }
}

pub struct Corpus {
    pub split: DatasetSplit,
    pub features: FeatureStore,
    pub vocab: Vocabulary,
    pub answers: AnswerVocabulary,
}

/// A synthetic corpus tokenized the way the CLI does it: vocabulary over all
/// question texts, answers ranked by frequency.
pub fn synthetic_corpus(seed: u64, images: usize, per_image: usize, rephrasings: usize) -> Corpus {
    let world = generate_synthetic_world(seed, images, per_image, rephrasings).unwrap();
    let (vocab, answers) =
        build_vocabulary(&world.files.question_texts(), &world.files.canonical_answers().unwrap(), 1000).unwrap();
    let split = assemble(&world, &vocab, SplitName::Train);
    Corpus { split, features: world.features, vocab, answers }
}

/// Another synthetic corpus tokenized with an existing vocabulary.
pub fn synthetic_split_with(vocab: &Vocabulary, seed: u64, images: usize, per_image: usize, rephrasings: usize) -> (DatasetSplit, FeatureStore) {
    let world = generate_synthetic_world(seed, images, per_image, rephrasings).unwrap();
    (assemble(&world, vocab, SplitName::Val), world.features)
}

fn assemble(world: &cyclevqa::corpus::SyntheticWorld, vocab: &Vocabulary, name: SplitName) -> DatasetSplit {
    let mut split = world.files.assemble(name, vocab).unwrap();
    let groups: Vec<RephrasingGroup> = world.groups.iter().cloned().map(RephrasingGroup::from).collect();
    split.validate_groups(&groups).unwrap();
    split.groups = groups;
    split
}

pub fn bin_path() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_cyclevqa"))
}

pub mod oracles {
    use super::*;
    use cyclevqa::corpus::{AnswerLabelSet, QaInstance};
    use cyclevqa::failure::{fp_loss_and_gradients, FpDims, FpExample, FpParams};
    use cyclevqa::vqa::{forward_vqa, vqa_loss_and_gradients, AnswerDistribution, VqaDims, VqaParams};
    use cyclevqa::vqg::{vqg_loss_and_gradients, VqgDims, VqgParams};

    pub const TINY_VOCAB: usize = 12;
    pub const TINY_HIDDEN: usize = 8;

    pub fn tiny_vqa(seed: u64) -> VqaParams {
        let dims = VqaDims {
            vocab: TINY_VOCAB,
            answers: 5,
            feature_dim: 4,
            embed: 6,
            hidden: TINY_HIDDEN,
            attention: TINY_HIDDEN,
            fusion: TINY_HIDDEN,
        };
        VqaParams::init(dims, &mut rng(seed))
    }

    pub fn tiny_vqg(seed: u64) -> VqgParams {
        let dims = VqgDims { vocab: TINY_VOCAB, answers: 5, feature_dim: 4, embed: 6, encoder: TINY_HIDDEN, hidden: TINY_HIDDEN };
        VqgParams::init(dims, &mut rng(seed))
    }

    pub fn vqa_gradients(seed: u64) -> GradCheck {
        let params = tiny_vqa(seed);
        let image = tiny_image(seed + 100);
        let q = seq(&[5, 7, 4, 11]);
        let (_, analytic) = vqa_loss_and_gradients(&params, &q, &image, 2).unwrap();
        grad_check(&params, &analytic, |p| vqa_loss_and_gradients(p, &q, &image, 2).unwrap().0)
    }

    pub fn vqg_gradients(seed: u64) -> GradCheck {
        let params = tiny_vqg(seed);
        let answer = AnswerDistribution(vec![0.1, 0.4, 0.2, 0.2, 0.1]);
        let attended = vec![0.3, -0.2, 0.8, 0.1];
        let target = seq(&[6, 9, 4, 10]);
        let (_, analytic) = vqg_loss_and_gradients(&params, &answer, &attended, &target).unwrap();
        grad_check(&params, &analytic, |p| vqg_loss_and_gradients(p, &answer, &attended, &target).unwrap().0)
    }

    pub fn fp_example(seed: u64) -> FpExample {
        let vqa = tiny_vqa(seed);
        let image = tiny_image(seed + 100);
        let answers = AnswerVocabulary::from(vec!["a".to_string(), "b".into(), "c".into(), "d".into(), "e".into()]);
        let inst = QaInstance {
            question_id: 1,
            image_id: 1,
            question: seq(&[5, 7, 4]),
            labels: AnswerLabelSet::new(&["c"]).unwrap(),
        };
        let out = forward_vqa(&vqa, &inst.question, &image).unwrap();
        FpExample::from_output(&inst, out, &image, &answers)
    }

    pub fn fp_gradients(seed: u64) -> GradCheck {
        let ex = fp_example(seed);
        let dims = FpDims { feature_dim: 4, answers: 5, question: TINY_HIDDEN, encoder: TINY_HIDDEN };
        let params = FpParams::init(dims, &mut rng(seed + 7));
        let (_, analytic) = fp_loss_and_gradients(&params, &ex).unwrap();
        grad_check(&params, &analytic, |p| fp_loss_and_gradients(p, &ex).unwrap().0)
    }

    /// Number of size-`k` subsets of `mask` whose members are all true,
    /// divided by the number of size-`k` subsets, by explicit enumeration.
    pub fn brute_force_consensus(mask: &[bool], k: usize) -> f64 {
        let n = mask.len();
        let (mut all, mut good) = (0u64, 0u64);
        for bits in 0u32..(1u32 << n) {
            if bits.count_ones() as usize != k {
                continue;
            }
            all += 1;
            if (0..n).all(|i| bits & (1 << i) == 0 || mask[i]) {
                good += 1;
            }
        }
        good as f64 / all as f64
    }
}
