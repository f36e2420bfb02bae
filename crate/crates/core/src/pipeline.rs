//! Stage orchestration. Each stage reads the artifacts of the previous one
//! from a run directory and writes its own, stamped with a hash of the
//! config sections it depends on so stale handoffs are caught.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_tag_stoplist, filter_tags, load_dataset, read_jsonl, write_jsonl, ClueConfig, SynthWorld, Vocab,
    VqaSample, VqgTriple, WorldConfig, DEFAULT_STOPLIST_FRACTION,
};
use crate::decoder::{Decoder, DecoderConfig, LmDoc, LmRecord, PretrainConfig};
use crate::embedding::{EmbeddingProvider, ImageBank, TokenStateProvider};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, ParamStore};
use crate::promptgen::{
    generate_candidates, read_bundles, render_pair, select_top_p, write_bundles, BundleRecord, QaPair,
    DEFAULT_TOP_P,
};
use crate::reasoner::{
    decoder_embedding_states, evaluate, render_vqa_instruction, shuffle_bundles, train_vqa, EvalReport, FusionMode,
    MissingBundlePolicy, PromptEncoder, ReasonerModel, DECODER_PREFIX,
};
use crate::vapm::{Ablation, VapmConfig};
use crate::vqg::{render_vqg_instruction, train_vqg, TrainConfig, TrainOutcome, VqgModel};

pub const CONFIG_FILE: &str = "config.json";
pub const VQG_CHECKPOINT: &str = "vqg.ckpt.json";
pub const VQG_CURVE: &str = "vqg_curve.csv";
pub const BUNDLES: &str = "bundles.jsonl";
pub const REASONER_DECODER: &str = "reasoner_decoder.ckpt.json";
pub const REPORT_MD: &str = "report.md";

/// Where the stage inputs live. Relative paths are taken from the config
/// file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub dataset: PathBuf,
    pub images: PathBuf,
    pub vqg_triples: PathBuf,
    pub vqg_corpus: PathBuf,
    pub vqa_corpus: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            dataset: "dataset.jsonl".into(),
            images: "images.json".into(),
            vqg_triples: "vqg_triples.jsonl".into(),
            vqg_corpus: "vqg_corpus.jsonl".into(),
            vqa_corpus: "vqa_corpus.jsonl".into(),
        }
    }
}

/// What `synth` generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    /// Scenes behind the answering decoder's pretraining corpus.
    pub corpus_scenes: usize,
    /// The question decoder's corpus uses the first this-many of them.
    pub vqg_corpus_scenes: usize,
    pub world: WorldConfig,
    pub clues: ClueConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 200,
            corpus_scenes: 1000,
            vqg_corpus_scenes: 300,
            world: WorldConfig::default(),
            clues: ClueConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// The last this-many dataset samples are held out from training.
    pub held_out: usize,
    pub top_p: usize,
    pub stoplist_fraction: f64,
    /// Width of the similarity embedder used for Top-P selection.
    pub similarity_dim: usize,
    pub vapm: VapmConfig,
    pub vqg_decoder: DecoderConfig,
    pub reasoner_decoder: DecoderConfig,
    pub vqg_pretrain: PretrainConfig,
    pub reasoner_pretrain: PretrainConfig,
    pub vqg_train: TrainConfig,
    pub vqa_train: TrainConfig,
    pub mode: FusionMode,
    pub ablation: Ablation,
    pub prompt_encoder: PromptEncoder,
    pub missing_bundle: MissingBundlePolicy,
    pub synth: SynthConfig,
    pub data: DataPaths,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn adamw(lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        ..AdamWConfig::default()
    }
}

impl Default for RunConfig {
    /// Reference hyperparameters (`P = 8`, `k = 32`, AdamW at `2e-5`) on toy
    /// widths.
    fn default() -> Self {
        RunConfig {
            seed: 1,
            held_out: 50,
            top_p: DEFAULT_TOP_P,
            stoplist_fraction: DEFAULT_STOPLIST_FRACTION,
            similarity_dim: 64,
            vapm: VapmConfig {
                k: 32,
                ..VapmConfig::default()
            },
            vqg_decoder: DecoderConfig::default(),
            reasoner_decoder: DecoderConfig {
                layers: 2,
                ..DecoderConfig::default()
            },
            vqg_pretrain: PretrainConfig::default(),
            reasoner_pretrain: PretrainConfig::default(),
            vqg_train: TrainConfig::default(),
            vqa_train: TrainConfig::default(),
            mode: FusionMode::Vpm,
            ablation: Ablation::default(),
            prompt_encoder: PromptEncoder::default(),
            missing_bundle: MissingBundlePolicy::default(),
            synth: SynthConfig::default(),
            data: DataPaths::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Sizes and learning rates that train the synthetic world on one core.
    pub fn toy() -> Self {
        RunConfig {
            vapm: VapmConfig {
                k: 8,
                identity_init: true,
                ..VapmConfig::default()
            },
            vqg_pretrain: PretrainConfig {
                epochs: 3,
                batch_size: 16,
                optimizer: adamw(1e-2),
            },
            reasoner_pretrain: PretrainConfig {
                epochs: 10,
                batch_size: 16,
                optimizer: adamw(3e-3),
            },
            vqg_train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                optimizer: adamw(3e-3),
            },
            vqa_train: TrainConfig {
                epochs: 6,
                batch_size: 1,
                optimizer: adamw(1e-3),
            },
            ..RunConfig::default()
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json_str(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let v = &self.vapm;
        if [v.n, v.d_v, v.d_q, v.k, v.depth, v.ffn_mult].contains(&0) {
            return bad("VAPM dimensions must be positive");
        }
        if self.top_p == 0 {
            return bad("top_p must be at least 1");
        }
        if !(self.stoplist_fraction > 0.0 && self.stoplist_fraction <= 1.0) {
            return bad("stoplist_fraction must be in (0, 1]");
        }
        for t in [&self.vqg_train, &self.vqa_train] {
            if t.batch_size == 0 || !(t.optimizer.lr > 0.0) {
                return bad("training needs a positive batch size and learning rate");
            }
        }
        for p in [&self.vqg_pretrain, &self.reasoner_pretrain] {
            if p.batch_size == 0 || !(p.optimizer.lr > 0.0) {
                return bad("pretraining needs a positive batch size and learning rate");
            }
        }
        if self.prompt_encoder == PromptEncoder::DecoderEmbedding && self.vapm.d_q != self.reasoner_decoder.width {
            return bad("the decoder-embedding prompt encoder needs d_q equal to the reasoner decoder width");
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The config as echoed into artifacts.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn section_hash(&self, parts: Value) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&parts).expect("json").as_bytes());
        hex::encode(h.finalize())
    }

    /// Everything the question generator checkpoint depends on.
    pub fn vqg_section(&self) -> Value {
        json!({
            "seed": self.seed, "held_out": self.held_out, "vapm": self.vapm,
            "vqg_decoder": self.vqg_decoder, "vqg_pretrain": self.vqg_pretrain, "vqg_train": self.vqg_train,
        })
    }

    pub fn vqg_hash(&self) -> String {
        self.section_hash(self.vqg_section())
    }

    pub fn bundle_section(&self) -> Value {
        json!({
            "vqg": self.vqg_section(), "top_p": self.top_p,
            "stoplist_fraction": self.stoplist_fraction, "similarity_dim": self.similarity_dim,
        })
    }

    pub fn bundle_hash(&self) -> String {
        self.section_hash(json!({
            "vqg": self.vqg_hash(), "top_p": self.top_p,
            "stoplist_fraction": self.stoplist_fraction, "similarity_dim": self.similarity_dim,
        }))
    }

    /// Everything the shared answering decoder depends on.
    pub fn reasoner_decoder_section(&self) -> Value {
        json!({
            "seed": self.seed, "reasoner_decoder": self.reasoner_decoder,
            "reasoner_pretrain": self.reasoner_pretrain,
        })
    }

    pub fn reasoner_decoder_hash(&self) -> String {
        self.section_hash(self.reasoner_decoder_section())
    }

    pub fn reasoner_hash(&self) -> String {
        self.section_hash(json!({
            "bundles": self.bundle_hash(), "decoder": self.reasoner_decoder_hash(), "vapm": self.vapm,
            "vqa_train": self.vqa_train, "mode": self.mode, "ablation": self.ablation,
            "prompt_encoder": self.prompt_encoder, "missing_bundle": self.missing_bundle,
        }))
    }

    /// Names the reasoner variant: mode plus any ablations.
    pub fn label(&self) -> String {
        let mut label = self.mode.to_string();
        if self.mode == FusionMode::Vpm {
            if self.ablation.no_fusion {
                label.push_str("-no-fusion");
            }
            if self.ablation.no_decoder {
                label.push_str("-no-decoder");
            }
            match &self.prompt_encoder {
                PromptEncoder::DecoderEmbedding => {}
                PromptEncoder::Synthetic => label.push_str("-synthetic-encoder"),
                PromptEncoder::Table(_) => label.push_str("-table-encoder"),
            }
        }
        label
    }
}

/// Independent deterministic stream per stage.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Checkpoint metadata. `echo` holds the settings the artifact depends on, so
/// a shared artifact is byte-identical whichever variant built it.
fn meta(echo: Value, stage: &str, hash: String, vocab: Option<&Vocab>) -> Value {
    let mut m = json!({ "stage": stage, "config_hash": hash, "config": echo });
    if let Some(v) = vocab {
        m["vocab"] = serde_json::to_value(v).expect("vocab serializes");
    }
    m
}

fn check_hash(artifact: &Path, meta: Option<&Value>, expected: &str) -> Result<()> {
    let found = meta.and_then(|m| m.get("config_hash")).and_then(Value::as_str);
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::ArtifactMismatch(format!(
            "{} was produced under config hash {h}, current config hashes to {expected}",
            artifact.display()
        ))),
        None => Err(Error::ArtifactMismatch(format!("{} carries no config hash", artifact.display()))),
    }
}

fn meta_vocab(artifact: &Path, meta: Option<&Value>) -> Result<Vocab> {
    let v = meta
        .and_then(|m| m.get("vocab"))
        .ok_or_else(|| Error::ArtifactMismatch(format!("{} carries no vocabulary", artifact.display())))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::ArtifactMismatch(format!("{}: {e}", artifact.display())))
}

fn write_curve(path: &Path, echo: &Value, hash: &str, rows: &[(&str, &[f64])]) -> Result<()> {
    let mut text = format!("# config_hash={hash}\n# config={echo}\nphase,step,loss\n");
    for (phase, values) in rows {
        for (i, v) in values.iter().enumerate() {
            text.push_str(&format!("{phase},{i},{v}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Everything the stages read.
#[derive(Clone, Debug)]
pub struct Data {
    pub samples: Vec<VqaSample>,
    pub images: ImageBank,
    pub triples: Vec<VqgTriple>,
    pub vqg_corpus: Vec<LmRecord>,
    pub vqa_corpus: Vec<LmRecord>,
    pub vocab: Vocab,
}

impl Data {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let paths = &config.data;
        let samples = load_dataset(&config.resolve(&paths.dataset))?;
        let images = ImageBank::load(&config.resolve(&paths.images), config.vapm.n)?;
        if images.dim() != config.vapm.d_v {
            return Err(Error::Config(format!(
                "images have {} features per patch but d_v is {}",
                images.dim(),
                config.vapm.d_v
            )));
        }
        let triples: Vec<VqgTriple> = read_jsonl(&config.resolve(&paths.vqg_triples))?;
        let vqg_corpus: Vec<LmRecord> = read_jsonl(&config.resolve(&paths.vqg_corpus))?;
        let vqa_corpus: Vec<LmRecord> = read_jsonl(&config.resolve(&paths.vqa_corpus))?;
        if samples.len() <= config.held_out {
            return Err(Error::Config(format!(
                "held_out {} leaves no training samples out of {}",
                config.held_out,
                samples.len()
            )));
        }
        for s in &samples {
            images.get(&s.image_key)?;
        }
        let vocab = build_vocab(&samples, &triples, &vqg_corpus, &vqa_corpus);
        Ok(Data {
            samples,
            images,
            triples,
            vqg_corpus,
            vqa_corpus,
            vocab,
        })
    }

    pub fn split(&self, config: &RunConfig) -> (&[VqaSample], &[VqaSample]) {
        self.samples.split_at(self.samples.len() - config.held_out)
    }

    /// VQG triples whose image belongs to a training sample.
    pub fn train_triples(&self, config: &RunConfig) -> Vec<VqgTriple> {
        let (train, _) = self.split(config);
        let keys: std::collections::BTreeSet<&str> = train.iter().map(|s| s.image_key.as_str()).collect();
        self.triples.iter().filter(|t| keys.contains(t.image_key.as_str())).cloned().collect()
    }

    pub fn held_out_triples(&self, config: &RunConfig) -> Vec<VqgTriple> {
        let (_, test) = self.split(config);
        let keys: std::collections::BTreeSet<&str> = test.iter().map(|s| s.image_key.as_str()).collect();
        self.triples.iter().filter(|t| keys.contains(t.image_key.as_str())).cloned().collect()
    }
}

/// Every word any stage can read or write.
pub fn build_vocab(samples: &[VqaSample], triples: &[VqgTriple], vqg: &[LmRecord], vqa: &[LmRecord]) -> Vocab {
    let mut texts: Vec<String> = vec![
        render_vqg_instruction("x").expect("nonempty"),
        render_vqa_instruction("x").expect("nonempty"),
        render_pair(&QaPair::new("x", "x")),
    ];
    for s in samples {
        texts.push(s.question.clone());
        texts.extend(s.answers.iter().cloned());
        texts.extend(s.tags.iter().cloned());
    }
    for t in triples {
        texts.push(t.answer.clone());
        texts.push(t.question.clone());
    }
    for r in vqg.iter().chain(vqa) {
        texts.extend(r.blocks.iter().flatten().cloned());
        texts.push(r.prompt.clone());
        texts.push(r.target.clone());
    }
    Vocab::build(texts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub config_path: PathBuf,
    pub samples: usize,
}

/// Writes a synthetic world, its pretraining corpora and a config pointing
/// at them into `out`.
pub fn synth(config: &RunConfig, out: &Path) -> Result<SynthOutput> {
    create_dir(out)?;
    let sc = &config.synth;
    let world = SynthWorld::generate(config.seed, sc.samples, sc.world.clone())?;
    let mut corpus_world = SynthWorld::generate(config.seed ^ 0xabcdef, sc.corpus_scenes, sc.world.clone())?;
    let mut rng = stage_rng(config.seed, "synth");
    let vqa_corpus = corpus_world.vqa_lm_records(&sc.clues, &mut rng);
    corpus_world.truths.truncate(sc.vqg_corpus_scenes);
    let vqg_corpus = corpus_world.vqg_lm_records(&mut rng);

    let data = DataPaths::default();
    write_jsonl(&out.join(&data.dataset), &world.samples)?;
    world.images.save(&out.join(&data.images))?;
    write_jsonl(&out.join(&data.vqg_triples), &world.vqg_triples())?;
    write_jsonl(&out.join(&data.vqg_corpus), &vqg_corpus)?;
    write_jsonl(&out.join(&data.vqa_corpus), &vqa_corpus)?;
    let written = RunConfig {
        data,
        vapm: VapmConfig {
            n: sc.world.patches,
            d_v: sc.world.image_dim,
            ..config.vapm.clone()
        },
        ..config.clone()
    };
    let config_path = out.join(CONFIG_FILE);
    written.save(&config_path)?;
    Ok(SynthOutput {
        config_path,
        samples: world.samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqgStageOutput {
    pub pretrain_curve: Vec<f64>,
    pub train: TrainOutcome,
}

pub fn train_vqg_stage(config: &RunConfig, out: &Path) -> Result<VqgStageOutput> {
    let data = Data::load(config)?;
    create_dir(out)?;
    let mut rng = stage_rng(config.seed, "train-vqg");
    let mut model = VqgModel::new(data.vocab.clone(), config.vqg_decoder.clone(), &config.vapm, &mut rng);
    let docs: Vec<LmDoc> = data.vqg_corpus.iter().map(|r| r.to_doc(&data.vocab, config.vapm.k)).collect();
    let pretrain_curve = model.decoder.pretrain(&mut model.params, &docs, &config.vqg_pretrain, &mut rng)?;
    let train = train_vqg(&mut model, &data.images, &data.train_triples(config), &config.vqg_train, &mut rng)?;
    let hash = config.vqg_hash();
    model
        .params
        .save(&out.join(VQG_CHECKPOINT), Some(meta(config.vqg_section(), "train-vqg", hash.clone(), Some(&data.vocab))))?;
    write_curve(
        &out.join(VQG_CURVE),
        &config.vqg_section(),
        &hash,
        &[
            ("pretrain", &pretrain_curve),
            ("train", &train.curve),
            ("epoch", &train.epoch_losses),
        ],
    )?;
    Ok(VqgStageOutput { pretrain_curve, train })
}

pub fn load_vqg(config: &RunConfig, out: &Path) -> Result<VqgModel> {
    let path = out.join(VQG_CHECKPOINT);
    let (params, m) = ParamStore::load(&path)?;
    check_hash(&path, m.as_ref(), &config.vqg_hash())?;
    let vocab = meta_vocab(&path, m.as_ref())?;
    VqgModel::from_params(vocab, config.vqg_decoder.clone(), &config.vapm, params)
}

/// Candidate generation and Top-P selection for every sample.
pub fn gen_prompts_stage(config: &RunConfig, out: &Path) -> Result<Vec<BundleRecord>> {
    let data = Data::load(config)?;
    let model = load_vqg(config, out)?;
    let stoplist = build_tag_stoplist(&data.samples, config.stoplist_fraction)?;
    let provider = EmbeddingProvider::synthetic(config.seed, config.similarity_dim);
    let hash = config.bundle_hash();
    let records = data
        .samples
        .iter()
        .map(|s| {
            let cands = generate_candidates(&model, &data.images, &s.image_key, &filter_tags(&s.tags, &stoplist))?;
            let top = select_top_p(&cands.pairs, &s.question, &provider, config.top_p)?;
            Ok(BundleRecord::new(s.id.clone(), top, Some(hash.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = json!({ "config_hash": hash, "config": config.bundle_section(),
        "stoplist": stoplist.iter().collect::<Vec<_>>() });
    write_bundles(&out.join(BUNDLES), &records, Some(&m))?;
    Ok(records)
}

pub fn load_bundles(config: &RunConfig, out: &Path) -> Result<Vec<BundleRecord>> {
    let path = out.join(BUNDLES);
    let (records, m) = read_bundles(&path)?;
    check_hash(&path, m.as_ref(), &config.bundle_hash())?;
    Ok(records)
}

fn bundle_map(records: &[BundleRecord]) -> BTreeMap<String, String> {
    records.iter().map(|r| (r.id.clone(), r.bundle.clone())).collect()
}

/// The frozen answering decoder, pretrained once per seed and reused by
/// every reasoner variant.
pub fn reasoner_decoder(config: &RunConfig, data: &Data, out: &Path) -> Result<ParamStore> {
    let path = out.join(REASONER_DECODER);
    let hash = config.reasoner_decoder_hash();
    if path.exists() {
        let (params, m) = ParamStore::load(&path)?;
        check_hash(&path, m.as_ref(), &hash)?;
        if meta_vocab(&path, m.as_ref())? != data.vocab {
            return Err(Error::ArtifactMismatch(format!("{} was built for another vocabulary", path.display())));
        }
        return Ok(params);
    }
    let mut rng = stage_rng(config.seed, "reasoner-decoder");
    let decoder = Decoder::new(DECODER_PREFIX, data.vocab.len(), config.reasoner_decoder.clone());
    let mut params = ParamStore::new();
    decoder.init(&mut params, &mut rng);
    let docs: Vec<LmDoc> = data.vqa_corpus.iter().map(|r| r.to_doc(&data.vocab, config.vapm.k)).collect();
    let curve = decoder.pretrain(&mut params, &docs, &config.reasoner_pretrain, &mut rng)?;
    let echo = config.reasoner_decoder_section();
    params.save(&path, Some(meta(echo.clone(), "reasoner-decoder", hash.clone(), Some(&data.vocab))))?;
    write_curve(&out.join("reasoner_decoder_curve.csv"), &echo, &hash, &[("pretrain", &curve)])?;
    Ok(params)
}

fn build_reasoner(config: &RunConfig, data: &Data, decoder_params: ParamStore) -> Result<(ReasonerModel, ChaCha8Rng)> {
    let mut rng = stage_rng(config.seed, "train-vqa");
    let encoder = match &config.prompt_encoder {
        PromptEncoder::DecoderEmbedding => {
            let d = Decoder::new(DECODER_PREFIX, data.vocab.len(), config.reasoner_decoder.clone());
            decoder_embedding_states(&data.vocab, &d, &decoder_params, config.reasoner_decoder.max_positions)?
        }
        PromptEncoder::Synthetic => TokenStateProvider::synthetic(
            config.seed,
            config.vapm.d_q,
            config.reasoner_decoder.max_positions,
        ),
        PromptEncoder::Table(p) => TokenStateProvider::Table {
            table: crate::embedding::EmbeddingTable::load(&config.resolve(p))?,
            max_len: config.reasoner_decoder.max_positions,
        },
    };
    let model = ReasonerModel::new(
        data.vocab.clone(),
        config.reasoner_decoder.clone(),
        &config.vapm,
        decoder_params,
        encoder,
        config.mode,
        config.ablation,
        &mut rng,
    )?;
    Ok((model, rng))
}

pub fn reasoner_checkpoint(config: &RunConfig, out: &Path) -> PathBuf {
    out.join(format!("reasoner-{}.ckpt.json", config.label()))
}

pub fn train_vqa_stage(config: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let data = Data::load(config)?;
    let bundles = if config.mode == FusionMode::None {
        BTreeMap::new()
    } else {
        bundle_map(&load_bundles(config, out)?)
    };
    let decoder_params = reasoner_decoder(config, &data, out)?;
    let (mut model, mut rng) = build_reasoner(config, &data, decoder_params)?;
    let (train, _) = data.split(config);
    let outcome = train_vqa(
        &mut model,
        &data.images,
        train,
        &bundles,
        config.missing_bundle,
        &config.vqa_train,
        &mut rng,
    )?;
    let hash = config.reasoner_hash();
    let trained = trainable_params(&model);
    trained.save(
        &reasoner_checkpoint(config, out),
        Some(meta(config.echo(), "train-vqa", hash.clone(), Some(&data.vocab))),
    )?;
    write_curve(
        &out.join(format!("reasoner-{}_curve.csv", config.label())),
        &config.echo(),
        &hash,
        &[("train", &outcome.curve), ("epoch", &outcome.epoch_losses)],
    )?;
    Ok(outcome)
}

/// The reasoner's own weights; the frozen decoder lives in its own artifact.
fn trainable_params(model: &ReasonerModel) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in model.params.iter() {
        if !name.starts_with(DECODER_PREFIX) {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub p_override: Option<usize>,
    pub shuffle_bundles: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub eval: EvalReport,
    pub mode: FusionMode,
    pub no_fusion: bool,
    pub no_decoder: bool,
    pub top_p: usize,
    pub shuffled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: RunReport,
    pub warnings: Vec<String>,
}

pub fn eval_label(config: &RunConfig, opts: &EvalOptions) -> String {
    let mut label = config.label();
    if let Some(p) = opts.p_override {
        label.push_str(&format!("-p{p}"));
    }
    if opts.shuffle_bundles {
        label.push_str("-shuffled");
    }
    label
}

/// Scores the held-out samples and writes the report and predictions.
pub fn eval_stage(config: &RunConfig, out: &Path, opts: &EvalOptions) -> Result<EvalOutput> {
    let data = Data::load(config)?;
    let mut warnings = Vec::new();
    let ckpt = reasoner_checkpoint(config, out);
    let (trained, m) = ParamStore::load(&ckpt)?;
    check_hash(&ckpt, m.as_ref(), &config.reasoner_hash())?;
    let decoder_params = reasoner_decoder(config, &data, out)?;
    let (mut model, _) = build_reasoner(config, &data, decoder_params.clone())?;
    let mut params = decoder_params;
    for (name, t) in trained.iter() {
        params.insert(name.clone(), t.clone());
    }
    model.params.check_layout(&params)?;
    model.params = params;

    let mut top_p = config.top_p;
    let mut bundles = BTreeMap::new();
    if config.mode != FusionMode::None {
        let mut records = load_bundles(config, out)?;
        let stored = records.iter().map(|r| r.pairs.len()).max().unwrap_or(0);
        if let Some(p) = opts.p_override {
            if p == 0 {
                return Err(Error::Config("--p-override must be at least 1".into()));
            }
            if p > stored {
                warnings.push(format!(
                    "P override {p} exceeds the stored bundle size {stored}; using the stored bundles"
                ));
            } else {
                records = records.iter().map(|r| r.truncated(p)).collect();
            }
            top_p = p.min(config.top_p);
        }
        bundles = bundle_map(&records);
        if opts.shuffle_bundles {
            bundles = shuffle_bundles(&bundles);
        }
    }
    let (_, test) = data.split(config);
    let label = eval_label(config, opts);
    let mut eval = evaluate(&model, &data.images, test, &bundles, config.missing_bundle, &label)?;
    eval.config_hash = config.reasoner_hash();
    eval.config = config.echo();
    let report = RunReport {
        eval,
        mode: config.mode,
        no_fusion: config.ablation.no_fusion,
        no_decoder: config.ablation.no_decoder,
        top_p,
        shuffled: opts.shuffle_bundles,
    };
    let text = serde_json::to_string_pretty(&report)?;
    let path = out.join(format!("report-{label}.json"));
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_jsonl(&out.join(format!("predictions-{label}.jsonl")), &report.eval.rows)?;
    Ok(EvalOutput { report, warnings })
}

fn cell(report: &Value, field: &str) -> String {
    match report.get(field) {
        None | Some(Value::Null) => "n/a".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => match n.as_f64() {
            Some(f) if field == "mean_soft_accuracy" => format!("{f:.4}"),
            _ => n.to_string(),
        },
        Some(v) => v.to_string(),
    }
}

/// A markdown comparison of every `report-*.json` in `run_dir`, sorted by
/// file name, written to `report.md` and returned.
pub fn report_stage(run_dir: &Path) -> Result<String> {
    let entries = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no evaluation reports in {}", run_dir.display())));
    }
    let columns = [
        "label",
        "mode",
        "no_fusion",
        "no_decoder",
        "top_p",
        "shuffled",
        "mean_soft_accuracy",
        "count",
        "config_hash",
    ];
    let mut md = String::from("# Evaluation summary\n\n| ");
    md.push_str(&columns.join(" | "));
    md.push_str(" | config |\n|");
    md.push_str(&"---|".repeat(columns.len() + 1));
    md.push('\n');
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::format(f, e.line(), e.to_string()))?;
        let mut cells: Vec<String> = columns.iter().map(|c| cell(&v, c)).collect();
        cells.push(match v.get("config") {
            None | Some(Value::Null) => "n/a".to_string(),
            Some(c) => format!("`{c}`"),
        });
        md.push_str(&format!("| {} |\n", cells.join(" | ").replace('\n', " ")));
    }
    let path = run_dir.join(REPORT_MD);
    std::fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    Ok(md)
}
