mod common;

use cyclevqa::corpus::{TokenSequence, EOS, PAD, SOS};
use cyclevqa::error::Error;
use cyclevqa::vqa::{forward_vqa, vqa_loss, AnswerDistribution};
use cyclevqa::vqg::{decode_generate, encode_conditioning, vqg_teacher_forced_loss, DecodeMode, NoiseConfig};
use proptest::prelude::*;

use common::oracles::{tiny_vqa, tiny_vqg, vqa_gradients, vqg_gradients, TINY_VOCAB};
use common::{seq, tiny_image};

#[test]
fn answering_gradients_match_differences() {
    for seed in [1, 2, 3] {
        let check = vqa_gradients(seed);
        assert!(check.fraction() >= 0.95, "seed {seed}: {check:?}");
    }
}

#[test]
fn generator_gradients_match_differences() {
    for seed in [1, 2, 3] {
        let check = vqg_gradients(seed);
        assert!(check.fraction() >= 0.95, "seed {seed}: {check:?}");
    }
}

#[test]
fn out_of_range_token_is_shape_error() {
    let params = tiny_vqa(1);
    let q = seq(&[5, TINY_VOCAB + 3]);
    assert!(matches!(forward_vqa(&params, &q, &tiny_image(2)), Err(Error::Shape { .. })));
}

#[test]
fn loss_target_out_of_range() {
    let out = forward_vqa(&tiny_vqa(1), &seq(&[5, 6]), &tiny_image(2)).unwrap();
    assert!(vqa_loss(&out, 9).is_err());
}

#[test]
fn noise_changes_conditioning_only_when_enabled() {
    let params = tiny_vqg(4);
    let answer = AnswerDistribution(vec![0.2; 5]);
    let feat = [0.1, 0.2, 0.3, 0.4];
    let off = |s| encode_conditioning(&params, &answer, &feat, NoiseConfig::OFF, &mut common::rng(s)).unwrap();
    assert_eq!(off(1), off(2));
    let on = NoiseConfig { scale: 0.1, enabled: true };
    let a = encode_conditioning(&params, &answer, &feat, on, &mut common::rng(1)).unwrap();
    assert_ne!(a, off(1));
}

#[test]
fn teacher_forced_loss_is_positive() {
    let params = tiny_vqg(4);
    let cond = vec![0.1; common::oracles::TINY_HIDDEN];
    let loss = vqg_teacher_forced_loss(&params, &cond, &seq(&[4, 5, 6])).unwrap();
    assert!(loss > 0.0 && loss.is_finite());
    assert!(vqg_teacher_forced_loss(&params, &cond[1..], &seq(&[4])).is_err());
}

fn well_formed(s: &TokenSequence, max_len: usize) -> bool {
    let ids = s.ids();
    ids[0] == SOS && ids.len() <= max_len && ids[1..].iter().all(|&t| t != SOS && t != PAD && t < TINY_VOCAB)
        && ids.iter().position(|&t| t == EOS).is_none_or(|p| p == ids.len() - 1)
}

proptest! {
    #[test]
    fn answer_outputs_are_distributions(seed in 0u64..500, content in prop::collection::vec(4usize..TINY_VOCAB, 1..6)) {
        let out = forward_vqa(&tiny_vqa(seed), &seq(&content), &tiny_image(seed + 1)).unwrap();
        prop_assert!(out.answer_distribution.is_simplex(1e-9));
        prop_assert!(out.attention.is_simplex(1e-9));
        prop_assert!((0.0..=1.0).contains(&out.confidence()));
    }

    #[test]
    fn decoded_sequences_are_well_formed(seed in 0u64..500, max_len in 2usize..10, temp in prop::option::of(0.2f64..3.0)) {
        let params = tiny_vqg(seed);
        let cond: Vec<f64> = (0..common::oracles::TINY_HIDDEN).map(|i| ((i as f64) * 0.7 + seed as f64).sin()).collect();
        let mode = temp.map_or(DecodeMode::Greedy, |temperature| DecodeMode::Sample { temperature });
        let s = decode_generate(&params, &cond, max_len, mode, &mut common::rng(seed)).unwrap();
        prop_assert!(well_formed(&s, max_len), "{:?}", s.ids());
    }
}
