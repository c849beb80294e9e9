use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercases, drops ASCII punctuation and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Question-token vocabulary. Indices 0..3 are the special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let words = tokens.into_iter().filter(|t| !SPECIAL_TOKENS.contains(&t.as_str()));
        Vocabulary::new(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens; duplicates keep their first slot.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Index of `token`, or [`UNK`] when absent.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[sos, tokens.., eos]`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![SOS];
        ids.extend(tokenize(text).iter().map(|t| self.index_of(t)));
        ids.push(EOS);
        TokenSequence::new(ids).expect("encoded sequences are well formed")
    }

    /// Space-joined content tokens (specials dropped).
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids with an explicit unpadded length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let length = ids.len();
        Self::padded(ids, length)
    }

    /// `ids` may carry trailing padding after `length`.
    pub fn padded(ids: Vec<usize>, length: usize) -> Result<Self> {
        if length == 0 || length > ids.len() {
            return Err(Error::Argument(format!(
                "token sequence length {length} invalid for {} ids",
                ids.len()
            )));
        }
        let body = &ids[..length];
        if body.contains(&PAD) {
            return Err(Error::Argument("pad token inside sequence body".into()));
        }
        let eos_count = body.iter().filter(|&&t| t == EOS).count();
        if eos_count > 1 || (eos_count == 1 && body[length - 1] != EOS) {
            return Err(Error::Argument("end-of-sequence token must be last and unique".into()));
        }
        if ids[length..].iter().any(|&t| t != PAD) {
            return Err(Error::Argument("non-pad token after sequence length".into()));
        }
        Ok(TokenSequence { ids, length })
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// The unpadded ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids[..self.length]
    }

    pub fn has_eos(&self) -> bool {
        self.ids()[self.length - 1] == EOS
    }

    /// Ids with leading sos and trailing eos removed.
    pub fn content(&self) -> &[usize] {
        let mut s = self.ids();
        if s.first() == Some(&SOS) {
            s = &s[1..];
        }
        if s.last() == Some(&EOS) {
            s = &s[..s.len() - 1];
        }
        s
    }
}

/// Answer classes in classifier order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for AnswerVocabulary {
    fn from(answers: Vec<String>) -> Self {
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        AnswerVocabulary { answers, index }
    }
}

impl From<AnswerVocabulary> for Vec<String> {
    fn from(v: AnswerVocabulary) -> Self {
        v.answers
    }
}

impl AnswerVocabulary {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize(answer)).copied()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }
}

/// Question vocabulary over every token seen, plus the `max_answers` most
/// frequent answers (ties broken lexicographically).
pub fn build_vocabulary<Q, A>(
    questions: &[Q],
    answers: &[A],
    max_answers: usize,
) -> Result<(Vocabulary, AnswerVocabulary)>
where
    Q: AsRef<str>,
    A: AsRef<str>,
{
    if max_answers < 1 {
        return Err(Error::Argument("max_answers must be at least 1".into()));
    }
    if questions.is_empty() || answers.is_empty() {
        return Err(Error::Argument("vocabulary corpus is empty".into()));
    }
    let words: BTreeSet<String> = questions.iter().flat_map(|q| tokenize(q.as_ref())).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        let a = normalize(a.as_ref());
        if !a.is_empty() {
            *counts.entry(a).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let answers = ranked.into_iter().take(max_answers).map(|(a, _)| a).collect::<Vec<_>>();
    Ok((Vocabulary::new(words), AnswerVocabulary::from(answers)))
}
