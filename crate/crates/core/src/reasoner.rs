//! Stage 3: the frozen reasoner decoder fed `[F_v; F_p; Embed(Ins)]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, VqaSample, BOS, EOS, NUM_ANSWERS};
use crate::decoder::{Decoder, DecoderConfig};
use crate::embedding::{EmbeddingTable, ImageBank, TokenStateProvider, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::numerics::train::{fit, mean_loss};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::vapm::{visual_connector, Ablation, Resampler, Vapm, VapmConfig};
use crate::vqg::{TrainConfig, TrainOutcome};

pub const DECODER_PREFIX: &str = "decoder.";
pub const CONNECTOR_PREFIX: &str = "connector.";
pub const VAPM_PREFIX: &str = "vapm.";
pub const MAX_ANSWER_TOKENS: usize = 8;

/// The VQA instruction. One trailing `?` is stripped and then re-added.
pub fn render_vqa_instruction(question: &str) -> Result<String> {
    if question.is_empty() {
        return Err(Error::contract("VQA instruction needs a nonempty question"));
    }
    let q = question.strip_suffix('?').unwrap_or(question);
    Ok(format!("Question: {q}? Answer: "))
}

/// VQA soft accuracy: `min(#matching references / 3, 1)` after normalization.
pub fn soft_accuracy(prediction: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != NUM_ANSWERS {
        return Err(Error::contract(format!(
            "soft accuracy needs {NUM_ANSWERS} reference answers, got {}",
            answers.len()
        )));
    }
    let p = normalize_answer(prediction);
    let matches = answers.iter().filter(|a| normalize_answer(a) == p).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// How the prompt bundle reaches the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// No bundle at all.
    None,
    /// Bundle text placed in front of the instruction.
    Prepend,
    /// Bundle through the visual-aware prompting module.
    #[default]
    Vpm,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Prepend => "prepend",
            FusionMode::Vpm => "vpm",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "prepend" => Ok(FusionMode::Prepend),
            "vpm" => Ok(FusionMode::Vpm),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingBundlePolicy {
    #[default]
    Error,
    /// Treat the sample as having an empty bundle.
    Empty,
}

/// The frozen prompt encoder used by the VAPM path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptEncoder {
    /// Word-embedding rows of the frozen reasoner decoder.
    #[default]
    DecoderEmbedding,
    /// Seeded hashed token states.
    Synthetic,
    /// Exported per-token states.
    Table(std::path::PathBuf),
}

#[derive(Clone, Debug)]
pub struct ReasonerModel {
    pub vocab: Vocab,
    pub decoder: Decoder,
    pub connector: Resampler,
    pub vapm: Vapm,
    pub encoder: TokenStateProvider,
    pub mode: FusionMode,
    pub ablation: Ablation,
    pub params: ParamStore,
}

/// Per-token states taken from the decoder's embedding table.
pub fn decoder_embedding_states(
    vocab: &Vocab,
    decoder: &Decoder,
    params: &ParamStore,
    max_len: usize,
) -> Result<TokenStateProvider> {
    let table = params.expect(&decoder.embedding_name())?;
    let mut map = BTreeMap::new();
    for id in 0..vocab.len() {
        map.insert(vocab.token(id).to_string(), table.row(id).to_vec());
    }
    map.insert(PAD_TOKEN.to_string(), table.row(crate::corpus::PAD).to_vec());
    Ok(TokenStateProvider::Table {
        table: EmbeddingTable::from_map(map)?,
        max_len,
    })
}

impl ReasonerModel {
    /// Wraps a pretrained decoder (its tensors under `decoder.` in `params`)
    /// and adds fresh connector and VAPM weights.
    pub fn new<R: Rng + ?Sized>(
        vocab: Vocab,
        decoder: DecoderConfig,
        vapm: &VapmConfig,
        mut params: ParamStore,
        encoder: TokenStateProvider,
        mode: FusionMode,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = VapmConfig {
            d_lm: decoder.width,
            ..vapm.clone()
        };
        if encoder.dim() != cfg.d_q {
            return Err(Error::Config(format!(
                "prompt encoder width {} differs from d_q {}",
                encoder.dim(),
                cfg.d_q
            )));
        }
        let decoder = Decoder::new(DECODER_PREFIX, vocab.len(), decoder);
        let connector = visual_connector(CONNECTOR_PREFIX, &cfg);
        let vapm = Vapm::new(VAPM_PREFIX, cfg);
        connector.init(&mut params, rng);
        vapm.init(&mut params, rng);
        Ok(ReasonerModel {
            vocab,
            decoder,
            connector,
            vapm,
            encoder,
            mode,
            ablation,
            params,
        })
    }

    pub fn frozen_fingerprint(&self) -> String {
        self.params.strip_prefix(DECODER_PREFIX).fingerprint()
    }

    /// `begin` + instruction tokens; in prepend mode the bundle text leads.
    pub fn instruction_tokens(&self, question: &str, bundle: &str) -> Result<Vec<usize>> {
        let ins = render_vqa_instruction(question)?;
        let text = if self.mode == FusionMode::Prepend && !bundle.is_empty() {
            format!("{bundle} {ins}")
        } else {
            ins
        };
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode_words(&text));
        Ok(ids)
    }

    /// Soft prefix `[F_v; F_p]` (or just `F_v` outside vpm mode).
    pub fn prefix(&self, tape: &mut Tape, params: &ParamStore, e_v: &Tensor, bundle: &str, trainable: bool) -> Result<Var> {
        let image = tape.constant(e_v.clone());
        let f_v = self.connector.forward(tape, params, image, trainable)?;
        if self.mode != FusionMode::Vpm {
            return Ok(f_v);
        }
        let f_p = self
            .vapm
            .forward_text(tape, params, bundle, e_v, &self.encoder, self.ablation, trainable)?;
        tape.concat_rows(&[f_v, f_p])
    }

    /// Answer-token cross-entropy given `[F_v; F_p; begin + instruction]`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        e_v: &Tensor,
        sample: &VqaSample,
        bundle: &str,
        trainable: bool,
    ) -> Result<Var> {
        let mut tokens = self.instruction_tokens(&sample.question, bundle)?;
        let context = tokens.len();
        tokens.extend(self.vocab.encode_words(sample.majority_answer()));
        tokens.push(EOS);
        let prefix = self.prefix(tape, params, e_v, bundle, trainable)?;
        self.decoder.sequence_loss(tape, params, Some(prefix), &tokens, context, false)
    }
}

/// `[F_v; F_p; Embed(Ins)]`, with the `F_p` block omitted when absent.
pub fn assemble_input(
    tape: &mut Tape,
    params: &ParamStore,
    decoder: &Decoder,
    f_v: Var,
    f_p: Option<Var>,
    instruction_ids: &[usize],
) -> Result<Var> {
    let width = decoder.width();
    for part in std::iter::once(f_v).chain(f_p) {
        let shape = tape.value(part).shape().to_vec();
        if shape[1] != width {
            let rows = shape[0];
            return Err(Error::Dimension {
                op: "assemble_input",
                lhs: shape,
                rhs: vec![rows, width],
            });
        }
    }
    let ins = decoder.embed(tape, params, instruction_ids, false)?;
    let mut parts = vec![f_v];
    parts.extend(f_p);
    parts.push(ins);
    tape.concat_rows(&parts)
}

/// Bundle text for `id` under `policy`.
pub fn bundle_for<'a>(bundles: &'a BTreeMap<String, String>, id: &str, policy: MissingBundlePolicy) -> Result<&'a str> {
    match bundles.get(id) {
        Some(b) => Ok(b),
        None => match policy {
            MissingBundlePolicy::Error => Err(Error::MissingBundle(id.to_string())),
            MissingBundlePolicy::Empty => Ok(""),
        },
    }
}

pub fn vqa_loss(model: &ReasonerModel, images: &ImageBank, sample: &VqaSample, bundle: &str) -> Result<f64> {
    let e_v = images.get(&sample.image_key)?;
    let mut tape = Tape::new();
    let loss = model.loss_on_tape(&mut tape, &model.params, e_v, sample, bundle, false)?;
    Ok(tape.value(loss).item())
}

fn needs_bundles(mode: FusionMode) -> bool {
    mode != FusionMode::None
}

fn training_pairs<'a>(
    model: &ReasonerModel,
    samples: &'a [VqaSample],
    bundles: &'a BTreeMap<String, String>,
    policy: MissingBundlePolicy,
) -> Result<Vec<(&'a VqaSample, &'a str)>> {
    samples
        .iter()
        .map(|s| {
            let b = if needs_bundles(model.mode) {
                bundle_for(bundles, &s.id, policy)?
            } else {
                ""
            };
            Ok((s, b))
        })
        .collect()
}

pub fn mean_vqa_loss(
    model: &ReasonerModel,
    images: &ImageBank,
    samples: &[VqaSample],
    bundles: &BTreeMap<String, String>,
    policy: MissingBundlePolicy,
) -> Result<f64> {
    let pairs = training_pairs(model, samples, bundles, policy)?;
    mean_loss(&model.params, &pairs, |tape, p, (s, b)| {
        model.loss_on_tape(tape, p, images.get(&s.image_key)?, s, b, false)
    })
}

/// Trains the connector and, in vpm mode, the VAPM. The decoder stays frozen.
pub fn train_vqa<R: Rng + ?Sized>(
    model: &mut ReasonerModel,
    images: &ImageBank,
    samples: &[VqaSample],
    bundles: &BTreeMap<String, String>,
    policy: MissingBundlePolicy,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let pairs = training_pairs(model, samples, bundles, policy)?;
    let mut params = std::mem::take(&mut model.params);
    let out = fit(&mut params, &pairs, config, rng, |tape, p, (s, b), trainable| {
        model.loss_on_tape(tape, p, images.get(&s.image_key)?, s, b, trainable)
    });
    model.params = params;
    out
}

/// Greedy answer for `sample`, at most `max_len` tokens.
pub fn predict_answer(model: &ReasonerModel, images: &ImageBank, sample: &VqaSample, bundle: &str, max_len: usize) -> Result<String> {
    let e_v = images.get(&sample.image_key)?;
    let mut tape = Tape::new();
    let prefix = model.prefix(&mut tape, &model.params, e_v, bundle, false)?;
    let prefix = tape.value(prefix).clone();
    let context = model.instruction_tokens(&sample.question, bundle)?;
    let ids = model.decoder.generate(&model.params, Some(&prefix), &context, max_len)?;
    Ok(model.vocab.detokenize(&ids))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mean_soft_accuracy: f64,
    pub count: usize,
    pub rows: Vec<PredictionRow>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_rows(label: impl Into<String>, mut rows: Vec<PredictionRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let count = rows.len();
        let mean = if count == 0 {
            0.0
        } else {
            rows.iter().map(|r| r.score).sum::<f64>() / count as f64
        };
        EvalReport {
            label: label.into(),
            mean_soft_accuracy: mean,
            count,
            rows,
            config_hash: String::new(),
            config: serde_json::Value::Null,
        }
    }
}

/// Predicts and scores every sample (in parallel; rows sorted by id).
pub fn evaluate(
    model: &ReasonerModel,
    images: &ImageBank,
    samples: &[VqaSample],
    bundles: &BTreeMap<String, String>,
    policy: MissingBundlePolicy,
    label: &str,
) -> Result<EvalReport> {
    let pairs = training_pairs(model, samples, bundles, policy)?;
    let rows = pairs
        .par_iter()
        .map(|(s, b)| {
            let prediction = predict_answer(model, images, s, b, MAX_ANSWER_TOKENS)?;
            let score = soft_accuracy(&prediction, &s.answers)?;
            Ok(PredictionRow {
                id: s.id.clone(),
                prediction,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(label, rows))
}

/// Pairs each sample with the bundle of the next sample in id order, so no
/// sample keeps its own bundle (when there are at least two).
pub fn shuffle_bundles(bundles: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let ids: Vec<&String> = bundles.keys().collect();
    let n = ids.len();
    ids.iter()
        .enumerate()
        .map(|(i, id)| ((*id).clone(), bundles[ids[(i + 1) % n]].clone()))
        .collect()
}

/// A seeded RNG for anything a model needs at construction time.
pub fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn tiny(mode: FusionMode, ablation: Ablation) -> (ReasonerModel, ImageBank, VqaSample) {
        let vocab = Vocab::build(["question answer : ? what is the cat holding kite umbrella sofa"]);
        let dec = DecoderConfig {
            width: 16,
            max_positions: 96,
            ..DecoderConfig::default()
        };
        let vapm = VapmConfig {
            n: 9,
            d_v: 8,
            d_q: 16,
            d_lm: 16,
            k: 4,
            ..VapmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decoder = Decoder::new(DECODER_PREFIX, vocab.len(), dec.clone());
        let mut params = ParamStore::new();
        decoder.init(&mut params, &mut rng);
        let encoder = TokenStateProvider::synthetic(4, 16, 64);
        let model = ReasonerModel::new(vocab, dec, &vapm, params, encoder, mode, ablation, &mut rng).unwrap();
        let mut images = ImageBank::new(9, 8);
        images.insert("img", Tensor::randn(&mut rng, 9, 8, 1.0)).unwrap();
        let sample = VqaSample {
            id: "s1".into(),
            image_key: "img".into(),
            question: "What is the cat holding?".into(),
            answers: vec!["kite".into(); 10],
            tags: vec!["kite".into(), "sofa".into()],
        };
        (model, images, sample)
    }

    const BUNDLE: &str = "Question: What is the cat holding? Answer: kite Question: what is the cat? Answer: sofa";

    #[test]
    fn instruction_template_and_strip_rule() {
        assert_eq!(render_vqa_instruction("Why is she here?").unwrap(), "Question: Why is she here? Answer: ");
        assert_eq!(render_vqa_instruction("Why").unwrap(), "Question: Why? Answer: ");
        assert_eq!(render_vqa_instruction("??").unwrap(), "Question: ?? Answer: ");
        assert!(render_vqa_instruction("").is_err());
    }

    #[test]
    fn soft_accuracy_values() {
        let refs = |m: usize| -> Vec<String> {
            (0..10).map(|i| if i < m { "Red".to_string() } else { "blue".to_string() }).collect()
        };
        assert_eq!(soft_accuracy("green", &refs(0)).unwrap(), 0.0);
        assert_eq!(soft_accuracy("red", &refs(1)).unwrap(), 1.0 / 3.0);
        assert_eq!(soft_accuracy("red.", &refs(2)).unwrap(), 2.0 / 3.0);
        assert_eq!(soft_accuracy(" RED ", &refs(3)).unwrap(), 1.0);
        assert_eq!(soft_accuracy("red", &refs(7)).unwrap(), 1.0);
        assert!(soft_accuracy("red", &refs(3)[..9]).is_err());
        let mut last = 0.0;
        for m in 0..=10 {
            let s = soft_accuracy("red", &refs(m)).unwrap();
            assert!(s >= last && s <= 1.0);
            last = s;
        }
    }

    #[test]
    fn assembled_length_and_rows() {
        let (model, images, _) = tiny(FusionMode::Vpm, Ablation::default());
        let mut tape = Tape::new();
        let e_v = tape.constant(images.get("img").unwrap().clone());
        let f_v = model.connector.forward(&mut tape, &model.params, e_v, false).unwrap();
        let f_p = tape.constant(Tensor::zeros(4, 16));
        let ids = [1, 4, 5, 6, 7, 8];
        let full = assemble_input(&mut tape, &model.params, &model.decoder, f_v, Some(f_p), &ids).unwrap();
        assert_eq!(tape.value(full).rows(), 4 + 4 + 6);
        let short = assemble_input(&mut tape, &model.params, &model.decoder, f_v, None, &ids).unwrap();
        assert_eq!(tape.value(short).rows(), 4 + 6);
        let table = model.params.expect("decoder.embed").unwrap();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(tape.value(short).row(4 + i), table.row(id));
        }
        let narrow = tape.constant(Tensor::zeros(4, 3));
        assert!(assemble_input(&mut tape, &model.params, &model.decoder, narrow, None, &ids).is_err());
    }

    #[test]
    fn empty_bundle_prepend_equals_none() {
        let (none, images, sample) = tiny(FusionMode::None, Ablation::default());
        let (mut prepend, _, _) = tiny(FusionMode::Prepend, Ablation::default());
        prepend.params = none.params.clone();
        let a = predict_answer(&none, &images, &sample, "", 8).unwrap();
        let b = predict_answer(&prepend, &images, &sample, "", 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            vqa_loss(&none, &images, &sample, "").unwrap().to_bits(),
            vqa_loss(&prepend, &images, &sample, "").unwrap().to_bits()
        );
        assert_ne!(
            prepend.instruction_tokens(&sample.question, BUNDLE).unwrap(),
            none.instruction_tokens(&sample.question, BUNDLE).unwrap()
        );
    }

    #[test]
    fn zero_head_loss_is_log_vocab() {
        let (mut model, images, sample) = tiny(FusionMode::Vpm, Ablation::default());
        let z = model.params.expect("decoder.embed").unwrap().zeros_like();
        model.params.insert("decoder.embed", z);
        let loss = vqa_loss(&model, &images, &sample, BUNDLE).unwrap();
        assert!((loss - (model.vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gate_and_query_gradients_match_finite_differences() {
        let (model, images, sample) = tiny(FusionMode::Vpm, Ablation::default());
        let e_v = images.get("img").unwrap();
        let mut tape = Tape::new();
        let l = model.loss_on_tape(&mut tape, &model.params, e_v, &sample, BUNDLE, true).unwrap();
        let grads = tape.backward(l).unwrap().into_named();
        assert!(!grads.keys().any(|k| k.starts_with(DECODER_PREFIX)));
        let names: Vec<String> = model.params.names().filter(|n| !n.starts_with(DECODER_PREFIX)).cloned().collect();
        let report = gradcheck::check(&model.params, &names, &grads, 1e-5, |p| {
            let mut t = Tape::new();
            let l = model.loss_on_tape(&mut t, p, e_v, &sample, BUNDLE, false)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        for n in ["vapm.fusion.w_s", "vapm.fusion.w_v", "vapm.resampler.queries"] {
            assert!(report.per_tensor[n] < 1e-4, "{n}: {}", report.per_tensor[n]);
        }
        assert!(report.max_relative_error() < 1e-4, "{:?}", report.per_tensor);
    }

    #[test]
    fn missing_bundle_policy() {
        let (mut model, images, sample) = tiny(FusionMode::Vpm, Ablation::default());
        let cfg = TrainConfig::default();
        let empty = BTreeMap::new();
        let err = train_vqa(&mut model, &images, &[sample.clone()], &empty, MissingBundlePolicy::Error, &cfg, &mut model_rng(1));
        assert!(matches!(err, Err(Error::MissingBundle(id)) if id == "s1"));
        train_vqa(&mut model, &images, &[sample], &empty, MissingBundlePolicy::Empty, &cfg, &mut model_rng(1)).unwrap();
    }

    #[test]
    fn training_respects_freezing_and_mode() {
        let (mut model, images, sample) = tiny(FusionMode::Prepend, Ablation::default());
        let bundles: BTreeMap<String, String> = [("s1".to_string(), BUNDLE.to_string())].into();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let frozen = model.frozen_fingerprint();
        let vapm_before = model.params.strip_prefix(VAPM_PREFIX).fingerprint();
        let conn_before = model.params.strip_prefix(CONNECTOR_PREFIX).fingerprint();
        train_vqa(&mut model, &images, &[sample], &bundles, MissingBundlePolicy::Error, &cfg, &mut model_rng(2)).unwrap();
        assert_eq!(frozen, model.frozen_fingerprint());
        assert_eq!(vapm_before, model.params.strip_prefix(VAPM_PREFIX).fingerprint());
        assert_ne!(conn_before, model.params.strip_prefix(CONNECTOR_PREFIX).fingerprint());
    }

    #[test]
    fn swapping_prefix_blocks_changes_output() {
        let mut differ = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dec = Decoder::new(
                DECODER_PREFIX,
                12,
                DecoderConfig { width: 8, max_positions: 32, ..DecoderConfig::default() },
            );
            let mut params = ParamStore::new();
            dec.init(&mut params, &mut rng);
            let f_v = Tensor::randn(&mut rng, 3, 8, 1.0);
            let f_p = Tensor::randn(&mut rng, 3, 8, 1.0);
            let logits = |first: &Tensor, second: &Tensor| {
                let mut tape = Tape::new();
                let a = tape.constant(first.clone());
                let b = tape.constant(second.clone());
                let x = assemble_input(&mut tape, &params, &dec, a, Some(b), &[1, 4, 5]).unwrap();
                let out = dec.forward(&mut tape, &params, x, false).unwrap();
                tape.value(out).row(8).to_vec()
            };
            let a = logits(&f_v, &f_p);
            let b = logits(&f_p, &f_v);
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
                differ += 1;
            }
        }
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn report_mean_and_shuffle() {
        let rows = vec![
            PredictionRow { id: "b".into(), prediction: "x".into(), score: 1.0 },
            PredictionRow { id: "a".into(), prediction: "y".into(), score: 1.0 / 3.0 },
        ];
        let r = EvalReport::from_rows("vpm", rows);
        assert_eq!(r.rows[0].id, "a");
        assert!((r.mean_soft_accuracy - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        let b: BTreeMap<String, String> =
            [("a", "A"), ("b", "B"), ("c", "C")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let s = shuffle_bundles(&b);
        assert!(s.iter().all(|(k, v)| b[k] != *v));
        let mut vals: Vec<_> = s.values().cloned().collect();
        vals.sort();
        assert_eq!(vals, ["A", "B", "C"]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("prepend".parse::<FusionMode>().unwrap(), FusionMode::Prepend);
        assert!("both".parse::<FusionMode>().is_err());
        assert_eq!(FusionMode::Vpm.to_string(), "vpm");
    }
}
