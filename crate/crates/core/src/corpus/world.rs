//! A small compositional world standing in for a real VQA corpus.
//!
//! Every image shows one animal. The animal has one value for each of six
//! relations (what it plays with, eats, sits on, ...). A target question asks
//! about one relation; its answer is the value tag bound to that relation for
//! the pictured animal. The image embedding shows the animal and some
//! background objects but not the relation values, so a model only sees the
//! answer through the tags.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{VqaSample, NUM_ANSWERS};
use crate::decoder::LmRecord;
use crate::embedding::{hashed_unit_vector, ImageBank};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::reasoner::render_vqa_instruction;
use crate::vqg::render_vqg_instruction;

pub const SUBJECTS: [&str; 4] = ["dog", "cat", "horse", "bird"];

pub struct Relation {
    pub name: &'static str,
    template: &'static str,
    pub values: [&'static str; 12],
}

impl Relation {
    pub fn question(&self, subject: &str) -> String {
        self.template.replace("{s}", subject)
    }
}

pub const RELATIONS: [Relation; 6] = [
    Relation {
        name: "play",
        template: "What is the {s} playing with?",
        values: [
            "frisbee", "ball", "stick", "rope", "kite", "bone", "sock", "hoop", "yarn", "bottle", "tire",
            "balloon",
        ],
    },
    Relation {
        name: "eat",
        template: "What is the {s} eating?",
        values: [
            "apple", "bread", "carrot", "fish", "corn", "cheese", "banana", "rice", "oats", "berries",
            "lettuce", "cookie",
        ],
    },
    Relation {
        name: "sit",
        template: "Where is the {s} sitting?",
        values: [
            "sofa", "bench", "bed", "rock", "porch", "blanket", "chair", "carpet", "stump", "step",
            "cushion", "crate",
        ],
    },
    Relation {
        name: "color",
        template: "What color is the {s}?",
        values: [
            "brown", "black", "white", "gray", "golden", "spotted", "striped", "red", "orange", "cream",
            "tan", "silver",
        ],
    },
    Relation {
        name: "wear",
        template: "What is the {s} wearing?",
        values: [
            "collar", "hat", "scarf", "bell", "bandana", "sweater", "harness", "bow", "vest", "coat",
            "ribbon", "leash",
        ],
    },
    Relation {
        name: "look",
        template: "What is the {s} looking at?",
        values: [
            "moon", "mirror", "bucket", "door", "camera", "clock", "television", "puddle", "ladder",
            "basket", "candle", "statue",
        ],
    },
];

pub const BACKGROUND: [&str; 24] = [
    "tree", "car", "fence", "house", "lamp", "bicycle", "window", "flower", "truck", "wall", "boat",
    "bridge", "tower", "hill", "cloud", "barn", "mountain", "road", "river", "garden", "sign", "pole",
    "bush", "gate",
];

const BACKGROUND_TEMPLATE: &str = "What is behind the {s}?";
const SUBJECT_QUESTION: &str = "What animal is this?";
const GENERIC_QUESTION: &str = "What kind of photo is this?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Image patches per image.
    pub patches: usize,
    /// Image patch width.
    pub image_dim: usize,
    /// Patches showing the animal.
    pub subject_patches: usize,
    /// Standard deviation of per-coordinate patch noise.
    pub patch_noise: f64,
    /// Relation values follow `p(rank) ∝ exp(-skew · rank)` with a
    /// per-animal ranking.
    pub value_skew: f64,
    pub min_background: usize,
    pub max_background: usize,
    /// Maximum number of reference answers that disagree with the truth.
    pub max_answer_noise: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            patches: 16,
            image_dim: 32,
            subject_patches: 4,
            patch_noise: 0.05,
            value_skew: 0.25,
            min_background: 1,
            max_background: 4,
            max_answer_noise: 2,
        }
    }
}

/// How often answering-decoder pretraining documents carry clue words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClueConfig {
    pub clue_fraction: f64,
    pub clue_reliability: f64,
}

impl Default for ClueConfig {
    fn default() -> Self {
        ClueConfig {
            clue_fraction: 0.5,
            clue_reliability: 0.9,
        }
    }
}

/// What the generator knows about one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub answer: String,
    pub background: Vec<String>,
    /// Every relation value of the animal, in relation order.
    pub values: Vec<String>,
    /// The question a perfect question generator produces for each tag.
    pub tag_questions: BTreeMap<String, String>,
}

impl SampleTruth {
    /// The tags that fix the answer: the animal and the asked relation's value.
    pub fn answer_tags(&self) -> [&str; 2] {
        [&self.subject, &self.answer]
    }

    /// Words for what the image actually shows: the animal, then background.
    pub fn visual_words(&self) -> Vec<String> {
        std::iter::once(self.subject.clone()).chain(self.background.iter().cloned()).collect()
    }
}

/// One `(image, answer, question)` training triple for the question generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqgTriple {
    pub image_key: String,
    pub answer: String,
    pub question: String,
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub seed: u64,
    pub config: WorldConfig,
    pub samples: Vec<VqaSample>,
    pub truths: Vec<SampleTruth>,
    pub images: ImageBank,
}

/// Rank permutation of relation values for one animal: animals are offset so
/// that no value is the favourite of two animals.
fn value_probabilities(subject_idx: usize, skew: f64) -> [f64; 12] {
    let mut p = [0.0; 12];
    for (i, slot) in p.iter_mut().enumerate() {
        let rank = (i + 12 - 3 * subject_idx) % 12;
        *slot = (-skew * rank as f64).exp();
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn draw_weighted<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Embedding of a visual concept in image-feature space.
pub fn concept_vector(seed: u64, concept: &str, dim: usize) -> Vec<f64> {
    hashed_unit_vector(seed, "image-concept", concept, dim)
}

impl SynthWorld {
    pub fn generate(seed: u64, n_samples: usize, config: WorldConfig) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::contract("synth_world needs at least one sample"));
        }
        if config.subject_patches + config.max_background > config.patches
            || config.min_background > config.max_background
        {
            return Err(Error::Config("world patch budget is inconsistent".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n_samples);
        let mut truths = Vec::with_capacity(n_samples);
        let mut images = ImageBank::new(config.patches, config.image_dim);

        for i in 0..n_samples {
            let id = format!("s{i:05}");
            let image_key = format!("img{i:05}");
            let subject_idx = rng.random_range(0..SUBJECTS.len());
            let subject = SUBJECTS[subject_idx];
            let probs = value_probabilities(subject_idx, config.value_skew);
            let values: Vec<&str> = RELATIONS
                .iter()
                .map(|r| r.values[draw_weighted(&mut rng, &probs)])
                .collect();
            let n_bg = rng.random_range(config.min_background..=config.max_background);
            let background: Vec<&str> = BACKGROUND.choose_multiple(&mut rng, n_bg).copied().collect();

            let mut generic = vec!["animal"];
            if rng.random_bool(0.8) {
                generic.push("photo");
            }
            generic.push(if rng.random_bool(0.5) { "outdoor" } else { "indoor" });
            if rng.random_bool(0.6) {
                generic.push("daytime");
            }

            let mut tag_questions = BTreeMap::new();
            for g in &generic {
                tag_questions.insert(g.to_string(), GENERIC_QUESTION.to_string());
            }
            tag_questions.insert(subject.to_string(), SUBJECT_QUESTION.to_string());
            for (r, v) in RELATIONS.iter().zip(&values) {
                tag_questions.insert(v.to_string(), r.question(subject));
            }
            for b in &background {
                tag_questions.insert(b.to_string(), BACKGROUND_TEMPLATE.replace("{s}", subject));
            }
            let mut tags: Vec<String> = tag_questions.keys().cloned().collect();
            tags.shuffle(&mut rng);

            let rel_idx = rng.random_range(0..RELATIONS.len());
            let relation = &RELATIONS[rel_idx];
            let answer = values[rel_idx];
            let noise = rng.random_range(0..=config.max_answer_noise);
            let mut answers = vec![answer.to_string(); NUM_ANSWERS];
            for a in answers.iter_mut().take(noise) {
                let alt = relation.values[rng.random_range(0..12)];
                *a = alt.to_string();
            }
            answers.shuffle(&mut rng);

            let patches = render_image(&mut rng, seed, &config, subject, &background);
            images.insert(image_key.clone(), patches)?;

            truths.push(SampleTruth {
                id: id.clone(),
                subject: subject.to_string(),
                relation: relation.name.to_string(),
                answer: answer.to_string(),
                background: background.iter().map(|b| b.to_string()).collect(),
                values: values.iter().map(|v| v.to_string()).collect(),
                tag_questions,
            });
            samples.push(VqaSample {
                id,
                image_key,
                question: relation.question(subject),
                answers,
                tags,
            });
        }

        Ok(SynthWorld {
            seed,
            config,
            samples,
            truths,
            images,
        })
    }

    /// One triple per (sample, tag), in sample then tag order.
    pub fn vqg_triples(&self) -> Vec<VqgTriple> {
        self.samples
            .iter()
            .zip(&self.truths)
            .flat_map(|(s, t)| {
                s.tags.iter().map(move |tag| VqgTriple {
                    image_key: s.image_key.clone(),
                    answer: tag.clone(),
                    question: t.tag_questions[tag].clone(),
                })
            })
            .collect()
    }

    /// Pretraining documents for the question-generation decoder: for every
    /// (sample, tag), the visible objects as context, the instruction as
    /// prompt and the oracle question as target.
    pub fn vqg_lm_records<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<LmRecord> {
        let mut out = Vec::new();
        for (s, t) in self.samples.iter().zip(&self.truths) {
            for tag in &s.tags {
                let mut visual = t.visual_words();
                visual.shuffle(rng);
                out.push(LmRecord {
                    blocks: vec![visual],
                    prompt: render_vqg_instruction(tag).expect("tags are nonempty"),
                    target: t.tag_questions[tag].clone(),
                });
            }
        }
        out
    }

    /// Pretraining documents for the answering decoder: one per (sample,
    /// relation). Every document starts with a block of visible objects; a
    /// `clue_fraction` of them add a second block listing the animal's
    /// relation values and background, where the asked value is swapped for
    /// a wrong one with probability `1 − clue_reliability`.
    pub fn vqa_lm_records<R: Rng + ?Sized>(&self, clues: &ClueConfig, rng: &mut R) -> Vec<LmRecord> {
        let mut out = Vec::new();
        for t in &self.truths {
            for (r, rel) in RELATIONS.iter().enumerate() {
                let mut visual = t.visual_words();
                visual.shuffle(rng);
                let mut blocks = vec![visual];
                let prompt = render_vqa_instruction(&rel.question(&t.subject)).expect("nonempty");
                if rng.random_bool(clues.clue_fraction) {
                    let mut values = t.values.clone();
                    if !rng.random_bool(clues.clue_reliability) {
                        let wrong = rel.values.iter().filter(|v| **v != t.values[r]).collect::<Vec<_>>();
                        values[r] = wrong[rng.random_range(0..wrong.len())].to_string();
                    }
                    values.extend(t.background.iter().cloned());
                    values.shuffle(rng);
                    blocks.push(values);
                }
                out.push(LmRecord {
                    blocks,
                    prompt,
                    target: t.values[r].clone(),
                });
            }
        }
        out
    }

    /// The generative rule's answer for sample `i`.
    pub fn rule_answer(&self, i: usize) -> &str {
        &self.truths[i].answer
    }

    /// Every word the world can emit, for vocabulary construction.
    pub fn lexicon() -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        words.extend(SUBJECTS.iter().map(|s| s.to_string()));
        for r in &RELATIONS {
            words.extend(r.values.iter().map(|s| s.to_string()));
            words.extend(SUBJECTS.iter().map(|s| r.question(s)));
        }
        words.extend(BACKGROUND.iter().map(|s| s.to_string()));
        words.extend(SUBJECTS.iter().map(|s| BACKGROUND_TEMPLATE.replace("{s}", s)));
        words.extend(
            ["animal", "photo", "outdoor", "indoor", "daytime", SUBJECT_QUESTION, GENERIC_QUESTION]
                .iter()
                .map(|s| s.to_string()),
        );
        words
    }
}

fn render_image<R: Rng>(
    rng: &mut R,
    seed: u64,
    config: &WorldConfig,
    subject: &str,
    background: &[&str],
) -> Tensor {
    let d = config.image_dim;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(config.patches);
    let subject_vec = concept_vector(seed, subject, d);
    for _ in 0..config.subject_patches {
        rows.push(subject_vec.clone());
    }
    for b in background {
        rows.push(concept_vector(seed, b, d));
    }
    while rows.len() < config.patches {
        let clutter: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = clutter.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(clutter.into_iter().map(|x| x / n).collect());
    }
    for row in rows.iter_mut() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += config.patch_noise * z;
        }
    }
    rows.shuffle(rng);
    Tensor::from_rows(&rows).expect("uniform rows")
}
