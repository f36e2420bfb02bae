//! Visual-aware prompting: gated fusion of prompt-encoder states with image
//! patches, then a perceiver-style resampler down to `k` prompt embeddings.
//!
//! The same [`Resampler`] (with an input projection) is the visual connector
//! that turns image patches into `F_v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TokenStateProvider;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VapmConfig {
    /// Patches per image.
    pub n: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_lm: usize,
    pub k: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    pub query_std: f64,
    /// Start the resampler close to a content lookup: query/key maps
    /// `qk_scale·I`, identity value/output maps, zero second FFN layer and,
    /// when widths agree, an identity output projection.
    pub identity_init: bool,
    pub qk_scale: f64,
}

impl Default for VapmConfig {
    fn default() -> Self {
        VapmConfig {
            n: 16,
            d_v: 32,
            d_q: 32,
            d_lm: 32,
            k: 8,
            depth: 1,
            ffn_mult: 4,
            query_std: 0.02,
            identity_init: false,
            qk_scale: 8.0,
        }
    }
}

/// Cross-attention from `k` learned queries into a variable-length input,
/// followed by a GELU feed-forward and an output projection. No positional
/// information is used, so the output is invariant to input row order.
#[derive(Clone, Debug)]
pub struct Resampler {
    prefix: String,
    d_in: Option<usize>,
    d_q: usize,
    d_out: usize,
    k: usize,
    depth: usize,
    hidden: usize,
    query_std: f64,
    identity_init: bool,
    qk_scale: f64,
}

impl Resampler {
    /// `d_in = Some(d)` adds an affine input projection `d → d_q`.
    pub fn new(prefix: impl Into<String>, d_in: Option<usize>, config: &VapmConfig) -> Self {
        Resampler {
            prefix: prefix.into(),
            d_in,
            d_q: config.d_q,
            d_out: config.d_lm,
            k: config.k,
            depth: config.depth,
            hidden: config.d_q * config.ffn_mult,
            query_std: config.query_std,
            identity_init: config.identity_init,
            qk_scale: config.qk_scale,
        }
    }

    fn name(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.d_q;
        let std = 1.0 / (d as f64).sqrt();
        if let Some(d_in) = self.d_in {
            store.insert(self.name("in_proj.w"), Tensor::randn(rng, d_in, d, 1.0 / (d_in as f64).sqrt()));
            store.insert(self.name("in_proj.b"), Tensor::zeros(1, d));
        }
        store.insert(self.name("queries"), Tensor::randn(rng, self.k, d, self.query_std));
        for b in 0..self.depth {
            for w in ["wq", "wk", "wv", "wo"] {
                let mut t = Tensor::randn(rng, d, d, std);
                if self.identity_init {
                    let gain = if w == "wq" || w == "wk" { self.qk_scale } else { 1.0 };
                    t = Tensor::eye(d).map(|x| x * gain);
                }
                store.insert(self.name(&format!("blocks.{b}.attn.{w}")), t);
            }
            store.insert(self.name(&format!("blocks.{b}.ffn.w1")), Tensor::randn(rng, d, self.hidden, std));
            store.insert(self.name(&format!("blocks.{b}.ffn.b1")), Tensor::zeros(1, self.hidden));
            let mut w2 = Tensor::randn(rng, self.hidden, d, 1.0 / (self.hidden as f64).sqrt());
            if self.identity_init {
                w2 = w2.zeros_like();
            }
            store.insert(self.name(&format!("blocks.{b}.ffn.w2")), w2);
            store.insert(self.name(&format!("blocks.{b}.ffn.b2")), Tensor::zeros(1, d));
        }
        let mut out = Tensor::randn(rng, d, self.d_out, std);
        if self.identity_init && d == self.d_out {
            out = Tensor::eye(d);
        }
        store.insert(self.name("out_proj.w"), out);
        store.insert(self.name("out_proj.b"), Tensor::zeros(1, self.d_out));
    }

    fn p(&self, tape: &mut Tape, store: &ParamStore, local: &str, trainable: bool) -> Result<Var> {
        tape.param(store, &self.name(local), trainable)
    }

    /// `[k × d_out]` summary of `input` (`[L × d_in]`, or `[L × d_q]` without
    /// an input projection).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var, trainable: bool) -> Result<Var> {
        let kv = match self.d_in {
            Some(_) => {
                let w = self.p(tape, store, "in_proj.w", trainable)?;
                let b = self.p(tape, store, "in_proj.b", trainable)?;
                tape.linear(input, w, b)?
            }
            None => input,
        };
        let mut x = self.p(tape, store, "queries", trainable)?;
        let scale = 1.0 / (self.d_q as f64).sqrt();
        for b in 0..self.depth {
            let wq = self.p(tape, store, &format!("blocks.{b}.attn.wq"), trainable)?;
            let wk = self.p(tape, store, &format!("blocks.{b}.attn.wk"), trainable)?;
            let wv = self.p(tape, store, &format!("blocks.{b}.attn.wv"), trainable)?;
            let wo = self.p(tape, store, &format!("blocks.{b}.attn.wo"), trainable)?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(kv, wk)?;
            let v = tape.matmul(kv, wv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            let mixed = tape.matmul(attn, v)?;
            let out = tape.matmul(mixed, wo)?;
            x = tape.add(x, out)?;

            let w1 = self.p(tape, store, &format!("blocks.{b}.ffn.w1"), trainable)?;
            let b1 = self.p(tape, store, &format!("blocks.{b}.ffn.b1"), trainable)?;
            let w2 = self.p(tape, store, &format!("blocks.{b}.ffn.w2"), trainable)?;
            let b2 = self.p(tape, store, &format!("blocks.{b}.ffn.b2"), trainable)?;
            let h = tape.linear(x, w1, b1)?;
            let h = tape.gelu(h);
            let out = tape.linear(h, w2, b2)?;
            x = tape.add(x, out)?;
        }
        self.project_out(tape, store, x, trainable)
    }

    /// The final `d_q → d_out` projection on its own.
    pub fn project_out(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = self.p(tape, store, "out_proj.w", trainable)?;
        let b = self.p(tape, store, "out_proj.b", trainable)?;
        tape.linear(x, w, b)
    }
}

/// The visual connector: image patches `[n × d_v]` → `F_v` `[k × d_lm]`.
pub fn visual_connector(prefix: &str, config: &VapmConfig) -> Resampler {
    Resampler::new(prefix, Some(config.d_v), config)
}

/// Ablation switches for the prompt path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Skip gated fusion: `F_m = F_s`.
    pub no_fusion: bool,
    /// Skip the resampler: `F_m` (projected to `d_lm`) is the prompt, `L_s` rows.
    pub no_decoder: bool,
}

/// Tape handles for the intermediate matrices of the fusion step.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub f_s: Var,
    pub f_v_attn: Var,
    pub lambda: Var,
    pub f_m: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub f_s: Tensor,
    pub f_v_attn: Tensor,
    pub lambda: Tensor,
    pub f_m: Tensor,
}

impl FusionVars {
    pub fn values(&self, tape: &Tape) -> FusionOutput {
        FusionOutput {
            f_s: tape.value(self.f_s).clone(),
            f_v_attn: tape.value(self.f_v_attn).clone(),
            lambda: tape.value(self.lambda).clone(),
            f_m: tape.value(self.f_m).clone(),
        }
    }
}

/// The trainable visual-aware prompting module.
#[derive(Clone, Debug)]
pub struct Vapm {
    prefix: String,
    config: VapmConfig,
    resampler: Resampler,
}

impl Vapm {
    pub fn new(prefix: &str, config: VapmConfig) -> Self {
        let resampler = Resampler::new(format!("{prefix}resampler."), None, &config);
        Vapm {
            prefix: prefix.to_string(),
            config,
            resampler,
        }
    }

    pub fn config(&self) -> &VapmConfig {
        &self.config
    }

    pub fn resampler(&self) -> &Resampler {
        &self.resampler
    }

    fn name(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (d_v, d_q) = (self.config.d_v, self.config.d_q);
        let std = 1.0 / (d_q as f64).sqrt();
        store.insert(self.name("fusion.img_proj.w"), Tensor::randn(rng, d_v, d_q, 1.0 / (d_v as f64).sqrt()));
        store.insert(self.name("fusion.img_proj.b"), Tensor::zeros(1, d_q));
        store.insert(self.name("fusion.w_s"), Tensor::randn(rng, d_q, d_q, std));
        store.insert(self.name("fusion.w_v"), Tensor::randn(rng, d_q, d_q, std));
        self.resampler.init(store, rng);
    }

    /// `Q = F_s`, `K = V = MLP(E_v)`, `F_v^attn = Q + softmax(QKᵀ/√d_q)V`,
    /// `λ = σ(F_s W_s + F_v^attn W_v)`, `F_m = (1−λ)F_s + λF_v^attn`.
    pub fn visual_gated_fusion(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_s: Var,
        e_v: Var,
        trainable: bool,
    ) -> Result<FusionVars> {
        let d_q = self.config.d_q;
        let s_shape = tape.value(f_s).shape().to_vec();
        if s_shape.len() != 2 || s_shape[1] != d_q {
            return Err(Error::Dimension {
                op: "visual_gated_fusion F_s",
                lhs: s_shape,
                rhs: vec![0, d_q],
            });
        }
        let p = |tape: &mut Tape, n: &str| tape.param(store, &self.name(n), trainable);
        let w = p(tape, "fusion.img_proj.w")?;
        let b = p(tape, "fusion.img_proj.b")?;
        let kv = tape.linear(e_v, w, b)?;
        let scores = tape.matmul_nt(f_s, kv)?;
        let scores = tape.scale(scores, 1.0 / (d_q as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, kv)?;
        let f_v_attn = tape.add(f_s, mixed)?;

        let w_s = p(tape, "fusion.w_s")?;
        let w_v = p(tape, "fusion.w_v")?;
        let gs = tape.matmul(f_s, w_s)?;
        let gv = tape.matmul(f_v_attn, w_v)?;
        let gate = tape.add(gs, gv)?;
        let lambda = tape.sigmoid(gate)?;
        // (1−λ)F_s + λF_v = F_s + λ(F_v − F_s)
        let diff = tape.sub(f_v_attn, f_s)?;
        let blend = tape.mul(lambda, diff)?;
        let f_m = tape.add(f_s, blend)?;
        Ok(FusionVars {
            f_s,
            f_v_attn,
            lambda,
            f_m,
        })
    }

    pub fn resample(&self, tape: &mut Tape, store: &ParamStore, f_m: Var, trainable: bool) -> Result<Var> {
        self.resampler.forward(tape, store, f_m, trainable)
    }

    /// Prompt embeddings `F_p` from prompt-encoder states and image patches:
    /// `[k × d_lm]`, or `[L_s × d_lm]` with `no_decoder`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_s: Var,
        e_v: Var,
        ablation: Ablation,
        trainable: bool,
    ) -> Result<Var> {
        let f_m = if ablation.no_fusion {
            f_s
        } else {
            self.visual_gated_fusion(tape, store, f_s, e_v, trainable)?.f_m
        };
        if ablation.no_decoder {
            self.resampler.project_out(tape, store, f_m, trainable)
        } else {
            self.resample(tape, store, f_m, trainable)
        }
    }

    /// Encodes `bundle_text` with the frozen prompt encoder and runs
    /// [`Vapm::forward`]. An empty bundle is a single padding state.
    pub fn forward_text(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle_text: &str,
        e_v: &Tensor,
        encoder: &TokenStateProvider,
        ablation: Ablation,
        trainable: bool,
    ) -> Result<Var> {
        let states = encoder.token_states(bundle_text)?;
        let f_s = tape.constant(states);
        let e_v = tape.constant(e_v.clone());
        self.forward(tape, store, f_s, e_v, ablation, trainable)
    }
}
