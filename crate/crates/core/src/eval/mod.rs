//! Soft VQA accuracy, consensus scores over rephrasing groups and the
//! ORI/REP accuracy split.

mod ngram;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ngram::{bleu, bleu_tokens, lcs_len, rouge_l, rouge_l_tokens};

use crate::corpus::{normalize, AnswerLabelSet, AnswerVocabulary, DatasetSplit, FeatureStore};
use crate::error::{Error, Result};
use crate::vqa::{predict_answer, AnswerModel};

/// `min(#matches / 3, 1)`; single-answer label sets require an exact match.
pub fn vqa_accuracy(predicted: &str, labels: &AnswerLabelSet) -> f64 {
    let matches = labels.count(&normalize(predicted));
    if labels.answers().len() == 1 {
        return if matches == 1 { 1.0 } else { 0.0 };
    }
    (matches as f64 / 3.0).min(1.0)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Fraction of size-`k` subsets whose members are all correct:
/// `C(m, k) / C(n, k)` with `m` the number of correct members.
pub fn consensus_score(group_correctness: &[bool], k: usize) -> Result<f64> {
    let n = group_correctness.len();
    if k < 1 || k > n {
        return Err(Error::Argument(format!("k = {k} outside 1..={n}")));
    }
    let m = group_correctness.iter().filter(|c| **c).count();
    if m < k {
        return Ok(0.0);
    }
    match (binomial(m, k), binomial(n, k)) {
        (Some(num), Some(den)) => Ok(num as f64 / den as f64),
        // Only reachable for very large groups; fall back to the product form.
        _ => Ok((0..k).map(|i| (m - i) as f64 / (n - i) as f64).product()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: u64,
    #[serde(rename = "answer")]
    pub predicted_answer: String,
    pub confidence: f64,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                index: Some(i),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs the answering model over every instance of `split`.
pub fn predict_split<M: AnswerModel>(
    model: &M,
    split: &DatasetSplit,
    features: &FeatureStore,
    answers: &AnswerVocabulary,
) -> Result<Vec<PredictionRecord>> {
    split
        .instances
        .iter()
        .map(|inst| {
            let out = model.answer(&inst.question, features.get(inst.image_id)?)?;
            let idx = predict_answer(&out);
            Ok(PredictionRecord {
                question_id: inst.question_id,
                predicted_answer: answers.answer(idx).unwrap_or_default().to_string(),
                confidence: out.answer_distribution.probs()[idx],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    /// `k` → mean CS(k) over groups with at least `k` members.
    pub cs: BTreeMap<usize, f64>,
    /// `k` → number of groups contributing to `cs[k]`.
    pub groups_per_k: BTreeMap<usize, usize>,
    pub n_groups: usize,
    /// Mean θ × 100 over original questions.
    #[serde(rename = "ori")]
    pub ori_accuracy: f64,
    /// Mean θ × 100 over rephrasings.
    #[serde(rename = "rep")]
    pub rep_accuracy: f64,
}

impl ConsensusReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn cs_csv(&self) -> String {
        let mut out = String::from("k,cs,n_groups\n");
        for (k, v) in &self.cs {
            let _ = writeln!(out, "{k},{v},{}", self.groups_per_k[k]);
        }
        out
    }

    /// Plain-text table: ORI, REP, then CS(k) columns.
    pub fn table(&self) -> String {
        let mut header = format!("{:>8} {:>8}", "ORI", "REP");
        let mut row = format!("{:>8.2} {:>8.2}", self.ori_accuracy, self.rep_accuracy);
        for (k, v) in &self.cs {
            let _ = write!(header, " {:>8}", format!("CS({k})"));
            let _ = write!(row, " {:>8.2}", v * 100.0);
        }
        format!("{header}\n{row}\n")
    }
}

pub fn evaluate_consensus(predictions: &[PredictionRecord], split: &DatasetSplit) -> Result<ConsensusReport> {
    let by_id: HashMap<u64, &PredictionRecord> = predictions.iter().map(|p| (p.question_id, p)).collect();
    let index = split.index();
    let mut missing: Vec<u64> = split
        .groups
        .iter()
        .flat_map(|g| g.members())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Error::integrity("missing predictions for group members", missing));
    }
    let unknown: Vec<u64> = split.groups.iter().flat_map(|g| g.members()).filter(|id| !index.contains_key(id)).collect();
    if !unknown.is_empty() {
        return Err(Error::integrity("group members absent from split", unknown));
    }

    let theta = |qid: u64| {
        let inst = &split.instances[index[&qid]];
        vqa_accuracy(&by_id[&qid].predicted_answer, &inst.labels)
    };

    let mut cs_sum: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cs_n: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut ori_sum, mut ori_n, mut rep_sum, mut rep_n) = (0.0, 0usize, 0.0, 0usize);
    // Groups are visited in id order so the float sums do not depend on input order.
    let mut groups: Vec<_> = split.groups.iter().collect();
    groups.sort_by_key(|g| g.group_id);
    let mut seen_rep: HashSet<u64> = HashSet::new();
    for g in groups {
        let ori = theta(g.original);
        ori_sum += ori;
        ori_n += 1;
        let mut mask = vec![ori > 0.0];
        for &r in &g.rephrasings {
            let t = theta(r);
            if seen_rep.insert(r) {
                rep_sum += t;
                rep_n += 1;
            }
            mask.push(t > 0.0);
        }
        for k in 1..=mask.len() {
            *cs_sum.entry(k).or_default() += consensus_score(&mask, k)?;
            *cs_n.entry(k).or_default() += 1;
        }
    }
    let cs = cs_sum.iter().map(|(k, s)| (*k, s / cs_n[k] as f64)).collect();
    let pct = |s: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * s / n as f64 };
    Ok(ConsensusReport {
        cs,
        groups_per_k: cs_n,
        n_groups: split.groups.len(),
        ori_accuracy: pct(ori_sum, ori_n),
        rep_accuracy: pct(rep_sum, rep_n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(list: &[(&str, usize)]) -> AnswerLabelSet {
        let v: Vec<&str> = list.iter().flat_map(|(a, n)| std::iter::repeat_n(*a, *n)).collect();
        AnswerLabelSet::new(&v).unwrap()
    }

    #[test]
    fn soft_accuracy() {
        assert_eq!(vqa_accuracy("yes", &labels(&[("yes", 10)])), 1.0);
        assert!((vqa_accuracy("2", &labels(&[("2", 2), ("3", 8)])) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_accuracy("cat", &labels(&[("dog", 10)])), 0.0);
        assert_eq!(vqa_accuracy("  YES ", &labels(&[("yes", 10)])), 1.0);
        assert_eq!(vqa_accuracy("red", &labels(&[("red", 1)])), 1.0);
        assert_eq!(vqa_accuracy("blue", &labels(&[("red", 1)])), 0.0);
    }

    #[test]
    fn consensus_examples() {
        let all = [true; 4];
        let none = [false; 4];
        let two = [true, false, true, false];
        for k in 1..=4 {
            assert_eq!(consensus_score(&all, k).unwrap(), 1.0);
            assert_eq!(consensus_score(&none, k).unwrap(), 0.0);
        }
        assert_eq!(consensus_score(&two, 1).unwrap(), 0.5);
        assert!((consensus_score(&two, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(consensus_score(&two, 3).unwrap(), 0.0);
        assert_eq!(consensus_score(&two, 4).unwrap(), 0.0);
        assert!(consensus_score(&two, 0).is_err());
        assert!(consensus_score(&two, 5).is_err());
    }

    #[test]
    fn report_table_has_columns() {
        let r = ConsensusReport {
            cs: [(1, 1.0), (2, 0.5)].into_iter().collect(),
            groups_per_k: [(1, 2), (2, 2)].into_iter().collect(),
            n_groups: 2,
            ori_accuracy: 100.0,
            rep_accuracy: 50.0,
        };
        let t = r.table();
        assert!(t.contains("CS(1)") && t.contains("CS(2)") && t.contains("ORI"));
        assert!(r.cs_csv().starts_with("k,cs,n_groups\n1,1,2\n"));
    }
}
