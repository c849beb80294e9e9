//! VQA-v2.0-style question, annotation and rephrasing-group files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnswerLabelSet, DatasetSplit, QaInstance, RephrasingGroup, SplitName, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question_id: u64,
    pub image_id: u64,
    pub multiple_choice_answer: String,
    pub answers: Vec<AnswerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: u64,
    pub original: u64,
    pub rephrasings: Vec<u64>,
    pub image_id: u64,
}

/// Raw contents of a questions/annotations file pair.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaFiles {
    pub questions: Vec<QuestionRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl VqaFiles {
    pub fn read(questions_path: &Path, annotations_path: &Path) -> Result<Self> {
        Ok(VqaFiles {
            questions: read_questions(questions_path)?,
            annotations: read_annotations(annotations_path)?,
        })
    }

    pub fn question_texts(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.question.as_str()).collect()
    }

    /// Canonical answers, one per annotation.
    pub fn canonical_answers(&self) -> Result<Vec<String>> {
        self.annotations
            .iter()
            .map(|a| Ok(labels_of(a)?.canonical().to_string()))
            .collect()
    }

    /// Tokenizes every question and pairs it with its annotation.
    pub fn assemble(&self, name: SplitName, vocab: &Vocabulary) -> Result<DatasetSplit> {
        let by_id: HashMap<u64, &AnnotationRecord> =
            self.annotations.iter().map(|a| (a.question_id, a)).collect();
        let missing: Vec<u64> = self
            .questions
            .iter()
            .filter(|q| !by_id.contains_key(&q.question_id))
            .map(|q| q.question_id)
            .collect();
        if !missing.is_empty() {
            return Err(Error::integrity("questions without annotations", missing));
        }
        let mut instances = Vec::with_capacity(self.questions.len());
        for q in &self.questions {
            let ann = by_id[&q.question_id];
            if ann.image_id != q.image_id {
                return Err(Error::integrity(
                    "annotation image id differs from question image id",
                    vec![q.question_id],
                ));
            }
            instances.push(QaInstance {
                question_id: q.question_id,
                image_id: q.image_id,
                question: vocab.encode(&q.question),
                labels: labels_of(ann)?,
            });
        }
        Ok(DatasetSplit::new(name, instances))
    }
}

fn labels_of(a: &AnnotationRecord) -> Result<AnswerLabelSet> {
    let answers: Vec<&str> = a.answers.iter().map(|e| e.answer.as_str()).collect();
    AnswerLabelSet::new(&answers)
}

#[derive(Serialize)]
struct QuestionsFile<'a> {
    questions: &'a [QuestionRecord],
}

#[derive(Serialize)]
struct AnnotationsFile<'a> {
    annotations: &'a [AnnotationRecord],
}

#[derive(Serialize)]
struct GroupsFile<'a> {
    groups: &'a [GroupRecord],
}

/// Reads `{key: [records]}`, reporting the failing record index.
fn read_records<T: DeserializeOwned>(path: &Path, key: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |index: Option<usize>, message: String| Error::Parse {
        path: path.to_path_buf(),
        index,
        message,
    };
    let root: Value = serde_json::from_str(&text).map_err(|e| parse_err(None, e.to_string()))?;
    let list = root
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(None, format!("missing top-level array \"{key}\"")))?;
    list.iter()
        .enumerate()
        .map(|(i, v)| T::deserialize(v).map_err(|e| parse_err(Some(i), e.to_string())))
        .collect()
}

pub fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    read_records(path, "questions")
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> = read_records(path, "annotations")?;
    for (i, r) in records.iter().enumerate() {
        if r.answers.len() != 10 && r.answers.len() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                index: Some(i),
                message: format!("expected 10 (or 1 synthetic) answers, found {}", r.answers.len()),
            });
        }
    }
    Ok(records)
}

pub fn read_groups(path: &Path) -> Result<Vec<GroupRecord>> {
    read_records(path, "groups")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("records serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_questions(path: &Path, records: &[QuestionRecord]) -> Result<()> {
    write_json(path, &QuestionsFile { questions: records })
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_json(path, &AnnotationsFile { annotations: records })
}

pub fn write_groups(path: &Path, records: &[GroupRecord]) -> Result<()> {
    write_json(path, &GroupsFile { groups: records })
}

pub fn load_vqa_json(
    questions_path: &Path,
    annotations_path: &Path,
    vocab: &Vocabulary,
    name: SplitName,
) -> Result<DatasetSplit> {
    VqaFiles::read(questions_path, annotations_path)?.assemble(name, vocab)
}

/// Loads and validates groups; the split is not modified.
pub fn load_rephrasing_groups(path: &Path, split: &DatasetSplit) -> Result<Vec<RephrasingGroup>> {
    let groups: Vec<RephrasingGroup> = read_groups(path)?.into_iter().map(RephrasingGroup::from).collect();
    split.validate_groups(&groups)?;
    Ok(groups)
}

impl From<GroupRecord> for RephrasingGroup {
    fn from(r: GroupRecord) -> Self {
        RephrasingGroup {
            group_id: r.group_id,
            original: r.original,
            rephrasings: r.rephrasings,
            image_id: r.image_id,
        }
    }
}

impl From<&RephrasingGroup> for GroupRecord {
    fn from(g: &RephrasingGroup) -> Self {
        GroupRecord {
            group_id: g.group_id,
            original: g.original,
            rephrasings: g.rephrasings.clone(),
            image_id: g.image_id,
        }
    }
}
