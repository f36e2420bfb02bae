//! Stage 1: a question generator `P(Q | image, answer)` made of a trainable
//! visual connector in front of a frozen toy decoder.

use rand::{Rng, SeedableRng};

use crate::corpus::{Vocab, VqgTriple, BOS, EOS};
use crate::decoder::{Decoder, DecoderConfig};
use crate::embedding::ImageBank;
use crate::error::{Error, Result};
use crate::numerics::train::{fit, mean_loss};
pub use crate::numerics::train::{TrainConfig, TrainOutcome};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::vapm::{visual_connector, Resampler, VapmConfig};

pub const DECODER_PREFIX: &str = "decoder.";
pub const CONNECTOR_PREFIX: &str = "connector.";

/// The question-generation instruction for `answer`.
pub fn render_vqg_instruction(answer: &str) -> Result<String> {
    if answer.is_empty() {
        return Err(Error::contract("VQG instruction needs a nonempty answer"));
    }
    Ok(format!("Given the image, generate a question whose answer is: {answer}."))
}

#[derive(Clone, Debug)]
pub struct VqgModel {
    pub vocab: Vocab,
    pub decoder: Decoder,
    pub connector: Resampler,
    pub params: ParamStore,
}

impl VqgModel {
    /// A model with a freshly initialized decoder and connector. The
    /// connector's output width is the decoder width.
    pub fn new<R: Rng + ?Sized>(vocab: Vocab, decoder: DecoderConfig, vapm: &VapmConfig, rng: &mut R) -> Self {
        let cfg = VapmConfig {
            d_lm: decoder.width,
            ..vapm.clone()
        };
        let decoder = Decoder::new(DECODER_PREFIX, vocab.len(), decoder);
        let connector = visual_connector(CONNECTOR_PREFIX, &cfg);
        let mut params = ParamStore::new();
        decoder.init(&mut params, rng);
        connector.init(&mut params, rng);
        VqgModel {
            vocab,
            decoder,
            connector,
            params,
        }
    }

    /// Re-creates a model around stored parameters.
    pub fn from_params(vocab: Vocab, decoder: DecoderConfig, vapm: &VapmConfig, params: ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fresh = Self::new(vocab, decoder, vapm, &mut rng);
        fresh.params.check_layout(&params)?;
        Ok(VqgModel { params, ..fresh })
    }

    /// Fingerprint of the frozen decoder weights.
    pub fn frozen_fingerprint(&self) -> String {
        self.params.strip_prefix(DECODER_PREFIX).fingerprint()
    }

    fn instruction_tokens(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode_words(&render_vqg_instruction(answer)?));
        Ok(ids)
    }

    /// Question-token cross-entropy given `[F_v ; begin + instruction]`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        e_v: &Tensor,
        answer: &str,
        question: &str,
        trainable: bool,
    ) -> Result<Var> {
        let mut tokens = self.instruction_tokens(answer)?;
        let context = tokens.len();
        let q = self.vocab.encode_words(question);
        if q.is_empty() {
            return Err(Error::contract("question has no tokens"));
        }
        tokens.extend(q);
        tokens.push(EOS);
        let image = tape.constant(e_v.clone());
        let f_v = self.connector.forward(tape, params, image, trainable)?;
        self.decoder.sequence_loss(tape, params, Some(f_v), &tokens, context, false)
    }
}

pub fn vqg_loss(model: &VqgModel, images: &ImageBank, image_key: &str, answer: &str, question: &str) -> Result<f64> {
    let e_v = images.get(image_key)?;
    let mut tape = Tape::new();
    let loss = model.loss_on_tape(&mut tape, &model.params, e_v, answer, question, false)?;
    Ok(tape.value(loss).item())
}

fn triple_loss(model: &VqgModel, images: &ImageBank, tape: &mut Tape, params: &ParamStore, t: &VqgTriple, trainable: bool) -> Result<Var> {
    let e_v = images.get(&t.image_key)?;
    model.loss_on_tape(tape, params, e_v, &t.answer, &t.question, trainable)
}

pub fn mean_vqg_loss(model: &VqgModel, images: &ImageBank, triples: &[VqgTriple]) -> Result<f64> {
    mean_loss(&model.params, triples, |tape, p, t| triple_loss(model, images, tape, p, t, false))
}

/// Trains the connector only; the decoder is bound as a constant.
pub fn train_vqg<R: Rng + ?Sized>(
    model: &mut VqgModel,
    images: &ImageBank,
    triples: &[VqgTriple],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let mut params = std::mem::take(&mut model.params);
    let out = fit(&mut params, triples, config, rng, |tape, p, t, trainable| {
        triple_loss(model, images, tape, p, t, trainable)
    });
    model.params = params;
    out
}

/// Greedy decoding of a question for `(image, answer)`.
pub fn generate_question(model: &VqgModel, images: &ImageBank, image_key: &str, answer: &str, max_len: usize) -> Result<String> {
    let e_v = images.get(image_key)?;
    let mut tape = Tape::new();
    let image = tape.constant(e_v.clone());
    let f_v = model.connector.forward(&mut tape, &model.params, image, false)?;
    let f_v = tape.value(f_v).clone();
    let context = model.instruction_tokens(answer)?;
    let ids = model.decoder.generate(&model.params, Some(&f_v), &context, max_len)?;
    Ok(model.vocab.detokenize(&ids))
}
