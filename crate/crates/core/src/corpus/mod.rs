//! Dataset model: vocabularies, question/answer instances, rephrasing groups,
//! region-feature storage and the synthetic grid-world generator.

mod features;
mod json;
mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{FeatureStore, RegionFeatures};
pub use json::{
    load_rephrasing_groups, load_vqa_json, read_annotations, read_groups, read_questions,
    write_annotations, write_groups, write_questions, AnnotationRecord, AnswerEntry, GroupRecord,
    QuestionRecord, VqaFiles,
};
pub use synthetic::{
    generate_synthetic_world, synthetic_answer_vocabulary, synthetic_vocabulary, Color, Object, Query,
    Scene, Shape, SyntheticWorld, SYNTHETIC_FEATURE_DIM, SYNTHETIC_REGIONS,
};
pub use vocab::{
    build_vocabulary, normalize, tokenize, AnswerVocabulary, TokenSequence, Vocabulary, EOS, PAD,
    SOS, SPECIAL_TOKENS, UNK,
};

/// The multiset of human answers for one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerLabelSet {
    answers: Vec<String>,
    canonical: String,
}

impl AnswerLabelSet {
    /// Answers are normalized; the canonical answer is the most frequent
    /// entry, ties resolved lexicographically.
    pub fn new<S: AsRef<str>>(answers: &[S]) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Argument("answer label set is empty".into()));
        }
        let answers: Vec<String> = answers.iter().map(|a| normalize(a.as_ref())).collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for a in &answers {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        let canonical = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(a, _)| a.to_string())
            .expect("non-empty");
        Ok(AnswerLabelSet { answers, canonical })
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn count(&self, answer: &str) -> usize {
        let a = normalize(answer);
        self.answers.iter().filter(|x| **x == a).count()
    }

    /// Order-independent equality of the underlying multisets.
    pub fn same_multiset(&self, other: &AnswerLabelSet) -> bool {
        let mut a = self.answers.clone();
        let mut b = other.answers.clone();
        a.sort();
        b.sort();
        a == b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub question_id: u64,
    pub image_id: u64,
    pub question: TokenSequence,
    pub labels: AnswerLabelSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RephrasingGroup {
    pub group_id: u64,
    pub original: u64,
    pub rephrasings: Vec<u64>,
    pub image_id: u64,
}

impl RephrasingGroup {
    /// Original first, then rephrasings in order.
    pub fn members(&self) -> impl Iterator<Item = u64> + '_ {
        std::iter::once(self.original).chain(self.rephrasings.iter().copied())
    }

    pub fn size(&self) -> usize {
        1 + self.rephrasings.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub instances: Vec<QaInstance>,
    pub groups: Vec<RephrasingGroup>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, instances: Vec<QaInstance>) -> Self {
        DatasetSplit { name, instances, groups: Vec::new() }
    }

    /// question_id → position in `instances`.
    pub fn index(&self) -> HashMap<u64, usize> {
        self.instances.iter().enumerate().map(|(i, q)| (q.question_id, i)).collect()
    }

    pub fn rephrasing_ids(&self) -> HashSet<u64> {
        self.groups.iter().flat_map(|g| g.rephrasings.iter().copied()).collect()
    }

    /// Drops every question that appears as a rephrasing, along with the groups.
    pub fn originals_only(&self) -> DatasetSplit {
        let reph = self.rephrasing_ids();
        DatasetSplit {
            name: self.name,
            instances: self
                .instances
                .iter()
                .filter(|q| !reph.contains(&q.question_id))
                .cloned()
                .collect(),
            groups: Vec::new(),
        }
    }

    /// Checks the group invariants against this split's instances.
    pub fn validate_groups(&self, groups: &[RephrasingGroup]) -> Result<()> {
        let index = self.index();
        let mut seen: HashSet<u64> = HashSet::new();
        for g in groups {
            if g.rephrasings.is_empty() {
                return Err(Error::integrity(
                    format!("group {} has no rephrasings", g.group_id),
                    vec![g.original],
                ));
            }
            if g.rephrasings.contains(&g.original) {
                return Err(Error::integrity(
                    format!("group {} repeats its original among the rephrasings", g.group_id),
                    vec![g.original],
                ));
            }
            let missing: Vec<u64> = g.members().filter(|id| !index.contains_key(id)).collect();
            if !missing.is_empty() {
                return Err(Error::integrity(
                    format!("group {} references questions absent from the split", g.group_id),
                    missing,
                ));
            }
            let dup: Vec<u64> = g.members().filter(|id| !seen.insert(*id)).collect();
            if !dup.is_empty() {
                return Err(Error::integrity(
                    format!("group {} shares questions with another group", g.group_id),
                    dup,
                ));
            }
            let original = &self.instances[index[&g.original]];
            let mismatched: Vec<u64> = g
                .members()
                .filter(|id| {
                    let q = &self.instances[index[id]];
                    q.image_id != g.image_id || !q.labels.same_multiset(&original.labels)
                })
                .collect();
            if !mismatched.is_empty() {
                return Err(Error::integrity(
                    format!("group {} members disagree on image or answers", g.group_id),
                    mismatched,
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_is_mode() {
        let mut answers = vec!["yes"; 6];
        answers.extend(["no"; 4]);
        let set = AnswerLabelSet::new(&answers).unwrap();
        assert_eq!(set.canonical(), "yes");
        assert_eq!(set.answers().len(), 10);
    }

    #[test]
    fn canonical_tie_is_lexicographic() {
        let set = AnswerLabelSet::new(&["no", "yes"]).unwrap();
        assert_eq!(set.canonical(), "no");
    }
}
