//! Deterministic grid-world scenes with templated questions and rephrasings.
//!
//! Each image is a 3×3 grid; a cell is empty or holds one coloured shape.
//! Region `r` is cell `r` in row-major order and its feature vector is
//! `color one-hot (4) ⊕ shape one-hot (3) ⊕ occupied (1) ⊕ row one-hot (3)
//! ⊕ col one-hot (3) ⊕ (x/2, y/2)`, giving `D = 16`.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    tokenize, AnnotationRecord, AnswerEntry, AnswerVocabulary, DatasetSplit, FeatureStore, GroupRecord,
    QuestionRecord, RegionFeatures, SplitName, VqaFiles, Vocabulary,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_REGIONS: usize = 9;
pub const SYNTHETIC_FEATURE_DIM: usize = 16;
const GRID: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn index(self) -> usize {
        COLORS.iter().position(|c| *c == self).unwrap()
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    fn index(self) -> usize {
        SHAPES.iter().position(|s| *s == self).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub cells: [Option<Object>; SYNTHETIC_REGIONS],
}

impl Scene {
    pub fn objects(&self) -> impl Iterator<Item = &Object> {
        self.cells.iter().flatten()
    }

    pub fn count_shape(&self, shape: Shape) -> usize {
        self.objects().filter(|o| o.shape == shape).count()
    }

    pub fn count_color(&self, color: Color) -> usize {
        self.objects().filter(|o| o.color == color).count()
    }

    pub fn features(&self) -> Tensor {
        let mut t = Tensor::zeros(SYNTHETIC_REGIONS, SYNTHETIC_FEATURE_DIM);
        for (cell, obj) in self.cells.iter().enumerate() {
            let (row, col) = (cell / GRID, cell % GRID);
            let base = cell * SYNTHETIC_FEATURE_DIM;
            if let Some(o) = obj {
                t.data[base + o.color.index()] = 1.0;
                t.data[base + 4 + o.shape.index()] = 1.0;
                t.data[base + 7] = 1.0;
            }
            t.data[base + 8 + row] = 1.0;
            t.data[base + 11 + col] = 1.0;
            t.data[base + 14] = col as f64 / 2.0;
            t.data[base + 15] = row as f64 / 2.0;
        }
        t
    }
}

/// A question program over a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    ColorOf(Shape),
    Count(Shape),
    Exists(Color, Shape),
    ShapeOf(Color),
}

impl Query {
    pub fn answer(&self, scene: &Scene) -> String {
        match *self {
            Query::ColorOf(s) => scene
                .objects()
                .find(|o| o.shape == s)
                .map(|o| o.color.name().to_string())
                .unwrap_or_else(|| "none".into()),
            Query::Count(s) => scene.count_shape(s).to_string(),
            Query::Exists(c, s) => {
                if scene.objects().any(|o| o.color == c && o.shape == s) {
                    "yes".into()
                } else {
                    "no".into()
                }
            }
            Query::ShapeOf(c) => scene
                .objects()
                .find(|o| o.color == c)
                .map(|o| o.shape.name().to_string())
                .unwrap_or_else(|| "none".into()),
        }
    }

    fn templates(&self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Query::ColorOf(_) => (COLOR_ORIGINAL, COLOR_REPHRASE),
            Query::Count(_) => (COUNT_ORIGINAL, COUNT_REPHRASE),
            Query::Exists(..) => (EXISTS_ORIGINAL, EXISTS_REPHRASE),
            Query::ShapeOf(_) => (SHAPE_ORIGINAL, SHAPE_REPHRASE),
        }
    }

    pub fn render(&self, template: &str) -> String {
        let (c, s) = match *self {
            Query::ColorOf(s) | Query::Count(s) => ("", s.name()),
            Query::Exists(c, s) => (c.name(), s.name()),
            Query::ShapeOf(c) => (c.name(), ""),
        };
        template.replace("{c}", c).replace("{s}", s)
    }
}

const COLOR_ORIGINAL: &[&str] = &["what color is the {s}", "what is the color of the {s}"];
const COLOR_REPHRASE: &[&str] = &[
    "the {s} is what color",
    "which color is the {s}",
    "what color does the {s} have",
    "tell me the color of the {s}",
];
const COUNT_ORIGINAL: &[&str] = &["how many {s}", "how many {s} are there"];
const COUNT_REPHRASE: &[&str] = &[
    "what number of {s} are there",
    "count the {s}",
    "what is the number of {s}",
    "how many {s} can you see",
];
const EXISTS_ORIGINAL: &[&str] = &["is there a {c} {s}", "is there any {c} {s}"];
const EXISTS_REPHRASE: &[&str] = &[
    "does a {c} {s} exist",
    "can you see a {c} {s}",
    "is a {c} {s} present",
    "do you see any {c} {s}",
];
const SHAPE_ORIGINAL: &[&str] = &["what shape is the {c} object", "what is the shape of the {c} object"];
const SHAPE_REPHRASE: &[&str] = &[
    "the {c} object is what shape",
    "which shape is the {c} object",
    "what shape does the {c} object have",
    "tell me the shape of the {c} object",
];

/// Every token any template can produce, in sorted order.
pub fn synthetic_vocabulary() -> Vocabulary {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for list in [
        COLOR_ORIGINAL,
        COLOR_REPHRASE,
        COUNT_ORIGINAL,
        COUNT_REPHRASE,
        EXISTS_ORIGINAL,
        EXISTS_REPHRASE,
        SHAPE_ORIGINAL,
        SHAPE_REPHRASE,
    ] {
        for t in list {
            words.extend(tokenize(&t.replace("{c}", "").replace("{s}", "")));
        }
    }
    words.extend(COLORS.iter().map(|c| c.name().to_string()));
    words.extend(SHAPES.iter().map(|s| s.name().to_string()));
    Vocabulary::new(words)
}

/// Every answer a scene program can produce.
pub fn synthetic_answer_vocabulary() -> AnswerVocabulary {
    let mut answers: Vec<String> = COLORS.iter().map(|c| c.name().to_string()).collect();
    answers.extend(SHAPES.iter().map(|s| s.name().to_string()));
    answers.extend((0..=SYNTHETIC_REGIONS).map(|n| n.to_string()));
    answers.extend(["yes".to_string(), "no".to_string()]);
    AnswerVocabulary::from(answers)
}

/// A generated corpus in both raw-record and assembled form.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub scenes: Vec<(u64, Scene)>,
    pub files: VqaFiles,
    pub groups: Vec<GroupRecord>,
    pub features: FeatureStore,
    pub vocab: Vocabulary,
    pub answers: AnswerVocabulary,
    pub split: DatasetSplit,
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let mut cells = [None; SYNTHETIC_REGIONS];
    for cell in cells.iter_mut() {
        if rng.random_bool(0.5) {
            *cell = Some(Object { color: *COLORS.choose(rng).unwrap(), shape: *SHAPES.choose(rng).unwrap() });
        }
    }
    if cells.iter().all(Option::is_none) {
        let i = rng.random_range(0..SYNTHETIC_REGIONS);
        cells[i] = Some(Object { color: *COLORS.choose(rng).unwrap(), shape: *SHAPES.choose(rng).unwrap() });
    }
    Scene { cells }
}

fn random_query(scene: &Scene, rng: &mut ChaCha8Rng) -> Query {
    let unique_shapes: Vec<Shape> = SHAPES.iter().copied().filter(|s| scene.count_shape(*s) == 1).collect();
    let unique_colors: Vec<Color> = COLORS.iter().copied().filter(|c| scene.count_color(*c) == 1).collect();
    let mut kinds = vec![1u8, 2];
    if !unique_shapes.is_empty() {
        kinds.push(0);
    }
    if !unique_colors.is_empty() {
        kinds.push(3);
    }
    kinds.sort_unstable();
    match *kinds.choose(rng).unwrap() {
        0 => Query::ColorOf(*unique_shapes.choose(rng).unwrap()),
        1 => Query::Count(*SHAPES.choose(rng).unwrap()),
        2 => {
            // Half the existence questions ask about an object that is present.
            if rng.random_bool(0.5) {
                let objs: Vec<&Object> = scene.objects().collect();
                let o = objs.choose(rng).unwrap();
                Query::Exists(o.color, o.shape)
            } else {
                Query::Exists(*COLORS.choose(rng).unwrap(), *SHAPES.choose(rng).unwrap())
            }
        }
        _ => Query::ShapeOf(*unique_colors.choose(rng).unwrap()),
    }
}

pub fn generate_synthetic_world(
    seed: u64,
    n_images: usize,
    n_questions_per_image: usize,
    n_rephrasings: usize,
) -> Result<SyntheticWorld> {
    if n_images < 1 || n_questions_per_image < 1 || n_rephrasings < 1 {
        return Err(Error::Argument(
            "images, questions per image and rephrasings must all be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = FeatureStore::new(SYNTHETIC_REGIONS, SYNTHETIC_FEATURE_DIM);
    let mut scenes = Vec::with_capacity(n_images);
    let mut questions = Vec::new();
    let mut annotations = Vec::new();
    let mut groups = Vec::new();
    let mut next_qid: u64 = 1;

    for img in 0..n_images {
        let image_id = img as u64 + 1;
        let scene = random_scene(&mut rng);
        features.insert(RegionFeatures::new(image_id, scene.features())?)?;

        for _ in 0..n_questions_per_image {
            let query = random_query(&scene, &mut rng);
            let answer = query.answer(&scene);
            let (originals, rephrase) = query.templates();
            let mut order: Vec<usize> = (0..rephrase.len()).collect();
            order.shuffle(&mut rng);
            let mut texts = vec![query.render(originals.choose(&mut rng).unwrap())];
            texts.extend((0..n_rephrasings).map(|i| query.render(rephrase[order[i % order.len()]])));

            let ids: Vec<u64> = (0..texts.len() as u64).map(|i| next_qid + i).collect();
            next_qid += texts.len() as u64;
            for (qid, text) in ids.iter().zip(texts) {
                questions.push(QuestionRecord { question_id: *qid, image_id, question: text });
                annotations.push(AnnotationRecord {
                    question_id: *qid,
                    image_id,
                    multiple_choice_answer: answer.clone(),
                    answers: vec![AnswerEntry { answer: answer.clone() }],
                });
            }
            groups.push(GroupRecord {
                group_id: groups.len() as u64 + 1,
                original: ids[0],
                rephrasings: ids[1..].to_vec(),
                image_id,
            });
        }
        scenes.push((image_id, scene));
    }

    let files = VqaFiles { questions, annotations };
    let vocab = synthetic_vocabulary();
    let mut split = files.assemble(SplitName::Train, &vocab)?;
    let group_list: Vec<_> = groups.iter().cloned().map(Into::into).collect();
    split.validate_groups(&group_list)?;
    split.groups = group_list;

    Ok(SyntheticWorld {
        scenes,
        files,
        groups,
        features,
        vocab,
        answers: synthetic_answer_vocabulary(),
        split,
    })
}
