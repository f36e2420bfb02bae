//! The toy frozen language decoder standing in for a pretrained LLM.
//!
//! Tied input/output embedding, fixed sinusoidal positions, `layers` causal
//! single-head attention blocks each followed by a GELU feed-forward, residual
//! connections and no normalization. Parameters live in a [`ParamStore`] under
//! a name prefix so the same store can also hold trainable adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::train::{mean_loss, minibatch_step};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    /// Amplitude of the sinusoidal position code.
    pub position_scale: f64,
    pub embed_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 32,
            layers: 1,
            ffn_mult: 4,
            max_positions: 256,
            position_scale: 0.5,
            embed_std: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
        }
    }
}

/// A pretraining record before tokenization: prefix blocks of context words
/// (each padded to a fixed slot count), a prompt and the text to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmRecord {
    pub blocks: Vec<Vec<String>>,
    pub prompt: String,
    pub target: String,
}

impl LmRecord {
    /// `[block₁ … block_b (padded to block_len each); begin; prompt; target; end]`
    /// with everything before the target as context.
    pub fn to_doc(&self, vocab: &Vocab, block_len: usize) -> LmDoc {
        let mut tokens = Vec::new();
        for block in &self.blocks {
            let ids: Vec<usize> = block.iter().map(|w| vocab.id(w)).collect();
            tokens.extend(padded_block(&ids, block_len));
        }
        tokens.push(BOS);
        tokens.extend(vocab.encode_words(&self.prompt));
        let context = tokens.len();
        tokens.extend(vocab.encode_words(&self.target));
        tokens.push(EOS);
        LmDoc { tokens, context }
    }
}

/// One language-modeling document: `tokens[..context]` are conditioning only,
/// the rest are predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct LmDoc {
    pub tokens: Vec<usize>,
    pub context: usize,
}

impl LmDoc {
    pub fn new(tokens: Vec<usize>, context: usize) -> Self {
        LmDoc { tokens, context }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    prefix: String,
    config: DecoderConfig,
    vocab_size: usize,
    positions: Tensor,
}

fn sinusoid(rows: usize, width: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, width);
    for pos in 0..rows {
        for i in 0..width {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            t.set(pos, i, scale * if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl Decoder {
    pub fn new(prefix: impl Into<String>, vocab_size: usize, config: DecoderConfig) -> Self {
        let positions = sinusoid(config.max_positions, config.width, config.position_scale);
        Decoder {
            prefix: prefix.into(),
            config,
            vocab_size,
            positions,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    fn name(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    pub fn embedding_name(&self) -> String {
        self.name("embed")
    }

    /// Adds freshly initialized decoder weights to `store`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.config.width;
        let h = d * self.config.ffn_mult;
        let std = 1.0 / (d as f64).sqrt();
        store.insert(self.name("embed"), Tensor::randn(rng, self.vocab_size, d, self.config.embed_std));
        for l in 0..self.config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(self.name(&format!("block{l}.{w}")), Tensor::randn(rng, d, d, std));
            }
            store.insert(self.name(&format!("block{l}.w1")), Tensor::randn(rng, d, h, std));
            store.insert(self.name(&format!("block{l}.b1")), Tensor::zeros(1, h));
            store.insert(
                self.name(&format!("block{l}.w2")),
                Tensor::randn(rng, h, d, 1.0 / (h as f64).sqrt()),
            );
            store.insert(self.name(&format!("block{l}.b2")), Tensor::zeros(1, d));
        }
    }

    /// Names of every decoder tensor in `store`.
    pub fn param_names<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = &'a String> + 'a {
        store.names().filter(move |n| n.starts_with(&self.prefix))
    }

    /// Word-embedding rows for `ids` (the `Embed(·)` lookup).
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], trainable: bool) -> Result<Var> {
        let table = tape.param(store, &self.embedding_name(), trainable)?;
        tape.gather_rows(table, ids)
    }

    /// Logits `[T × V]` for an already embedded input `[T × width]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var, trainable: bool) -> Result<Var> {
        let x = self.hidden(tape, store, input, trainable)?;
        self.head(tape, store, x, trainable)
    }

    /// Logits for selected rows of the final hidden states.
    fn head(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let table = tape.param(store, &self.embedding_name(), trainable)?;
        tape.matmul_nt(x, table)
    }

    /// Final hidden states `[T × width]`.
    fn hidden(&self, tape: &mut Tape, store: &ParamStore, input: Var, trainable: bool) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        let (t, d) = (shape[0], shape[1]);
        if d != self.config.width {
            return Err(Error::Dimension {
                op: "decoder input",
                lhs: shape,
                rhs: vec![t, self.config.width],
            });
        }
        if t > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence of length {t} exceeds the decoder's {} positions",
                self.config.max_positions
            )));
        }
        let order: Vec<usize> = (0..t).collect();
        let pos = tape.constant(self.positions.select_rows(&order));
        let mut x = tape.add(input, pos)?;
        let p = |tape: &mut Tape, n: String| tape.param(store, &n, trainable);
        for l in 0..self.config.layers {
            let wq = p(tape, self.name(&format!("block{l}.wq")))?;
            let wk = p(tape, self.name(&format!("block{l}.wk")))?;
            let wv = p(tape, self.name(&format!("block{l}.wv")))?;
            let wo = p(tape, self.name(&format!("block{l}.wo")))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.causal_softmax_rows(scores)?;
            let mixed = tape.matmul(attn, v)?;
            let out = tape.matmul(mixed, wo)?;
            x = tape.add(x, out)?;

            let w1 = p(tape, self.name(&format!("block{l}.w1")))?;
            let b1 = p(tape, self.name(&format!("block{l}.b1")))?;
            let w2 = p(tape, self.name(&format!("block{l}.w2")))?;
            let b2 = p(tape, self.name(&format!("block{l}.b2")))?;
            let hidden = tape.linear(x, w1, b1)?;
            let hidden = tape.gelu(hidden);
            let out = tape.linear(hidden, w2, b2)?;
            x = tape.add(x, out)?;
        }
        Ok(x)
    }

    /// Mean next-token cross-entropy over `tokens[context..]`, conditioned on
    /// an optional soft prefix and `tokens[..context]`.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: Option<Var>,
        tokens: &[usize],
        context: usize,
        trainable: bool,
    ) -> Result<Var> {
        if context == 0 || context >= tokens.len() {
            return Err(Error::contract(format!(
                "need at least one context and one target token, got context {context} of {}",
                tokens.len()
            )));
        }
        let embedded = self.embed(tape, store, &tokens[..tokens.len() - 1], trainable)?;
        let (input, offset) = match prefix {
            Some(p) => {
                let rows = tape.value(p).rows();
                (tape.concat_rows(&[p, embedded])?, rows)
            }
            None => (embedded, 0),
        };
        let hidden = self.hidden(tape, store, input, trainable)?;
        let rows: Vec<usize> = (context - 1..tokens.len() - 1).map(|i| offset + i).collect();
        let picked = tape.gather_rows(hidden, &rows)?;
        let logits = self.head(tape, store, picked, trainable)?;
        tape.cross_entropy(logits, &tokens[context..])
    }

    /// [`Decoder::sequence_loss`] for a pretraining document.
    pub fn doc_loss(&self, tape: &mut Tape, store: &ParamStore, doc: &LmDoc, trainable: bool) -> Result<Var> {
        self.sequence_loss(tape, store, None, &doc.tokens, doc.context, trainable)
    }

    /// Greedy continuation of `prefix ; context`. Stops after the end token
    /// (which is not returned) or `max_len` tokens.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: Option<&Tensor>,
        context: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut tokens = context.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let embedded = self.embed(&mut tape, store, &tokens, false)?;
            let input = match prefix {
                Some(p) => {
                    let p = tape.constant(p.clone());
                    tape.concat_rows(&[p, embedded])?
                }
                None => embedded,
            };
            let logits = self.forward(&mut tape, store, input, false)?;
            let logits = tape.value(logits);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Plain language-model training of the decoder's own weights.
    /// Returns the per-step loss curve.
    pub fn pretrain<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        docs: &[LmDoc],
        config: &PretrainConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if docs.is_empty() {
            return Err(Error::contract("pretraining corpus is empty"));
        }
        let mut opt = AdamW::new(config.optimizer.clone());
        let mut order: Vec<usize> = (0..docs.len()).collect();
        let mut curve = Vec::new();
        for _ in 0..config.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<&LmDoc> = chunk.iter().map(|&i| &docs[i]).collect();
                let loss = minibatch_step(store, &mut opt, &batch, |tape, s, doc| self.doc_loss(tape, s, doc, true))?;
                curve.push(loss);
            }
        }
        Ok(curve)
    }

    pub fn corpus_loss(&self, store: &ParamStore, docs: &[LmDoc]) -> Result<f64> {
        mean_loss(store, docs, |tape, s, doc| self.doc_loss(tape, s, doc, false))
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A prefix block of `len` slots holding `words` (truncated) then padding.
pub fn padded_block(words: &[usize], len: usize) -> Vec<usize> {
    let mut block: Vec<usize> = words.iter().copied().take(len).collect();
    block.resize(len, PAD);
    block
}
