//! Acceptance checks. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//! Straight-line oracles below work on plain `Vec<Vec<f64>>` and never touch
//! the tape.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qa_prompts::corpus::{SynthWorld, Vocab, WorldConfig};
use qa_prompts::decoder::DecoderConfig;
use qa_prompts::embedding::{EmbeddingProvider, TokenStateProvider};
use qa_prompts::numerics::{gradcheck, ParamStore, Tape, Tensor};
use qa_prompts::pipeline::{self, Data, EvalOptions, RunConfig};
use qa_prompts::promptgen::{
    render_pair, render_prompt_bundle, select_top_p, QaPair, MAX_QUESTION_TOKENS,
};
use qa_prompts::reasoner::{render_vqa_instruction, soft_accuracy, FusionMode, ReasonerModel};
use qa_prompts::vapm::{visual_connector, Ablation, FusionOutput, Vapm, VapmConfig};
use qa_prompts::vqg::{generate_question, render_vqg_instruction, VqgModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------- straight-line linear algebra ----------

fn rows(t: &Tensor) -> M {
    t.to_rows()
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &M, bias: &M) -> M {
    a.iter().map(|r| r.iter().zip(&bias[0]).map(|(x, b)| x + b).collect()).collect()
}

fn scale(a: &M, s: f64) -> M {
    a.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

fn softmax(a: &M) -> M {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn max_diff(a: &M, b: &Tensor) -> f64 {
    let b = rows(b);
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()), "shape");
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn param(store: &ParamStore, name: &str) -> M {
    rows(store.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

/// Gated fusion: `K = V = E_v W + b`, `F_v = F_s + softmax(F_s Kᵀ/√d) V`,
/// `λ = σ(F_s W_s + F_v W_v)`, `F_m = (1−λ) F_s + λ F_v`.
fn fusion_oracle(store: &ParamStore, f_s: &M, e_v: &M, d_q: usize) -> (M, M, M) {
    let kv = add_bias(&matmul(e_v, &param(store, "vapm.fusion.img_proj.w")), &param(store, "vapm.fusion.img_proj.b"));
    let attn = softmax(&scale(&matmul(f_s, &transpose(&kv)), 1.0 / (d_q as f64).sqrt()));
    let f_v = add(f_s, &matmul(&attn, &kv));
    let gate = add(&matmul(f_s, &param(store, "vapm.fusion.w_s")), &matmul(&f_v, &param(store, "vapm.fusion.w_v")));
    let lambda: M = gate.iter().map(|r| r.iter().map(|g| 1.0 / (1.0 + (-g).exp())).collect()).collect();
    let f_m: M = (0..f_s.len())
        .map(|i| (0..d_q).map(|j| (1.0 - lambda[i][j]) * f_s[i][j] + lambda[i][j] * f_v[i][j]).collect())
        .collect();
    (f_v, lambda, f_m)
}

/// Resampler: learned queries cross-attend into `F_m`, then a GELU feed-forward,
/// both residual, then the output projection.
fn resample_oracle(store: &ParamStore, f_m: &M, cfg: &VapmConfig) -> M {
    let p = |n: &str| param(store, &format!("vapm.resampler.{n}"));
    let mut x = p("queries");
    for b in 0..cfg.depth {
        let q = matmul(&x, &p(&format!("blocks.{b}.attn.wq")));
        let k = matmul(f_m, &p(&format!("blocks.{b}.attn.wk")));
        let v = matmul(f_m, &p(&format!("blocks.{b}.attn.wv")));
        let attn = softmax(&scale(&matmul(&q, &transpose(&k)), 1.0 / (cfg.d_q as f64).sqrt()));
        x = add(&x, &matmul(&matmul(&attn, &v), &p(&format!("blocks.{b}.attn.wo"))));
        let h = add_bias(&matmul(&x, &p(&format!("blocks.{b}.ffn.w1"))), &p(&format!("blocks.{b}.ffn.b1")));
        let h: M = h.iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect();
        x = add(&x, &add_bias(&matmul(&h, &p(&format!("blocks.{b}.ffn.w2"))), &p(&format!("blocks.{b}.ffn.b2"))));
    }
    add_bias(&matmul(&x, &p("out_proj.w")), &p("out_proj.b"))
}

// ---------- fixtures ----------

fn small_cfg() -> VapmConfig {
    VapmConfig {
        n: 9,
        d_v: 8,
        d_q: 16,
        d_lm: 16,
        k: 4,
        ..VapmConfig::default()
    }
}

fn small_vapm(seed: u64) -> (Vapm, ParamStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vapm = Vapm::new("vapm.", small_cfg());
    let mut store = ParamStore::new();
    vapm.init(&mut store, &mut rng);
    // spread the gate and resampler weights beyond their init scale
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (vapm, store, rng)
}

/// Random instances: trainable weights spread beyond their init point, where
/// near-uniform attention leaves gradients too small to difference reliably.
fn spread(store: &mut ParamStore, prefixes: &[&str], rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn fusion(vapm: &Vapm, store: &ParamStore, f_s: &Tensor, e_v: &Tensor) -> FusionOutput {
    let mut tape = Tape::new();
    let a = tape.constant(f_s.clone());
    let b = tape.constant(e_v.clone());
    vapm.visual_gated_fusion(&mut tape, store, a, b, false).unwrap().values(&tape)
}

fn resample(vapm: &Vapm, store: &ParamStore, f_m: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(f_m.clone());
    let out = vapm.resample(&mut tape, store, x, false).unwrap();
    tape.value(out).clone()
}

fn small_world(seed: u64) -> (SynthWorld, Vocab) {
    let world = SynthWorld::generate(
        seed,
        4,
        WorldConfig {
            patches: 9,
            image_dim: 8,
            ..WorldConfig::default()
        },
    )
    .unwrap();
    let mut texts = SynthWorld::lexicon();
    texts.push(render_vqg_instruction("x").unwrap());
    texts.push(render_vqa_instruction("x").unwrap());
    (world, Vocab::build(texts))
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        width: 16,
        ..DecoderConfig::default()
    }
}

// ---------- criteria ----------

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut instances = 0;
    let mut tensors = std::collections::BTreeSet::new();
    let mut track = |report: &gradcheck::GradCheckReport, tag: &str| {
        for name in report.per_tensor.keys() {
            tensors.insert(name.clone());
        }
        if let Some((name, i, a, n)) = &report.worst_entry {
            let e = report.max_relative_error();
            if e > worst {
                worst = e;
                worst_at = format!("{tag} {name}[{i}]: analytic {a:.6e}, numeric {n:.6e}");
            }
        }
    };
    for i in 0..20u64 {
        let (world, vocab) = small_world(100 + i);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i);

        // VQG connection block: connector in front of the frozen decoder.
        let mut vqg = VqgModel::new(vocab.clone(), small_decoder(), &small_cfg(), &mut rng);
        spread(&mut vqg.params, &["connector."], &mut rng);
        let triples = world.vqg_triples();
        let t = &triples[rng.random_range(0..triples.len())];
        let e_v = world.images.get(&t.image_key).unwrap().clone();
        let loss = |tape: &mut Tape, s: &ParamStore, trainable: bool| {
            vqg.loss_on_tape(tape, s, &e_v, &t.answer, &t.question, trainable)
        };
        let names: Vec<String> = vqg.params.names().filter(|n| n.starts_with("connector.")).cloned().collect();
        let mut tape = Tape::new();
        let l = loss(&mut tape, &vqg.params, true).unwrap();
        let grads = tape.backward(l).unwrap().into_named();
        let report = gradcheck::check(&vqg.params, &names, &grads, 1e-5, |s| {
            let mut t = Tape::new();
            let l = loss(&mut t, s, false)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        track(&report, "vqg");

        // Reasoner in vpm mode: visual connector + VAPM, answer loss through
        // the frozen decoder, with a 12-token bundle.
        let mut dparams = ParamStore::new();
        qa_prompts::decoder::Decoder::new("decoder.", vocab.len(), small_decoder()).init(&mut dparams, &mut rng);
        let encoder = TokenStateProvider::synthetic(300 + i, 16, 256);
        let mut model = ReasonerModel::new(
            vocab.clone(),
            small_decoder(),
            &small_cfg(),
            dparams,
            encoder,
            FusionMode::Vpm,
            Ablation::default(),
            &mut rng,
        )
        .unwrap();
        spread(&mut model.params, &["connector.", "vapm."], &mut rng);
        let lexicon: Vec<String> = SynthWorld::lexicon().into_iter().filter(|w| !w.contains(' ')).collect();
        let bundle: Vec<&str> = (0..12).map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str()).collect();
        let bundle = bundle.join(" ");
        assert_eq!(model.encoder.token_states(&bundle).unwrap().rows(), 12);
        let sample = &world.samples[rng.random_range(0..world.samples.len())];
        let e_v = world.images.get(&sample.image_key).unwrap().clone();
        let loss = |tape: &mut Tape, s: &ParamStore, trainable: bool| {
            model.loss_on_tape(tape, s, &e_v, sample, &bundle, trainable)
        };
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("connector.") || n.starts_with("vapm."))
            .cloned()
            .collect();
        let mut tape = Tape::new();
        let l = loss(&mut tape, &model.params, true).unwrap();
        let grads = tape.backward(l).unwrap().into_named();
        let report = gradcheck::check(&model.params, &names, &grads, 1e-5, |s| {
            let mut t = Tape::new();
            let l = loss(&mut t, s, false)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        track(&report, "vqa");
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 120.0 && instances >= 20,
        format!(
            "max rel err {worst:.2e} ({worst_at}) over {instances}x2 instances, {} tensors, {secs:.1}s (limits 1e-4, 120s)",
            tensors.len()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let cfg = small_cfg();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let (vapm, store, mut rng) = small_vapm(1000 + i);
        let l_s = rng.random_range(1..40);
        let f_s = Tensor::randn(&mut rng, l_s, cfg.d_q, 1.0);
        let e_v = Tensor::randn(&mut rng, cfg.n, cfg.d_v, 1.0);
        let got = fusion(&vapm, &store, &f_s, &e_v);
        let (f_v, lambda, f_m) = fusion_oracle(&store, &rows(&f_s), &rows(&e_v), cfg.d_q);
        let out = resample(&vapm, &store, &got.f_m);
        let expect = resample_oracle(&store, &f_m, &cfg);
        for d in [
            max_diff(&f_v, &got.f_v_attn),
            max_diff(&lambda, &got.lambda),
            max_diff(&f_m, &got.f_m),
            max_diff(&expect, &out),
        ] {
            worst = worst.max(d);
        }
    }
    outcome(worst <= 1e-10, format!("max abs diff {worst:.2e} over 100 instances (limit 1e-10)"))
}

/// Exhaustive selection: repeatedly take the highest similarity, earliest
/// position first among equals.
fn top_p_oracle(pairs: &[QaPair], p: usize) -> Vec<QaPair> {
    let mut left: Vec<(usize, &QaPair)> = pairs.iter().enumerate().collect();
    let mut out = Vec::new();
    while out.len() < p && !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j].1.similarity, left[best].1.similarity);
            if a > b || (a == b && left[j].0 < left[best].0) {
                best = j;
            }
        }
        out.push(left.remove(best).1.clone());
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn structural_invariants() -> Outcome {
    let mut failures = Vec::new();
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut softmax_err: f64 = 0.0;
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..20), rng.random_range(1..60));
        let spread = rng.random_range(0.1..80.0);
        let x = Tensor::randn(&mut rng, r, c, spread);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).to_rows() {
            softmax_err = softmax_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if softmax_err > 1e-9 {
        failures.push(format!("softmax rows off by {softmax_err:.1e}"));
    }

    let mut gate_ok = true;
    let mut convex_ok = true;
    for i in 0..100u64 {
        let (vapm, store, mut rng) = small_vapm(2000 + i);
        let f_s = Tensor::randn(&mut rng, 12, cfg.d_q, 1.0);
        let e_v = Tensor::randn(&mut rng, cfg.n, cfg.d_v, 1.0);
        let out = fusion(&vapm, &store, &f_s, &e_v);
        gate_ok &= out.lambda.data().iter().all(|&l| l > 0.0 && l < 1.0);
        for j in 0..f_s.len() {
            let (s, v, m) = (f_s.data()[j], out.f_v_attn.data()[j], out.f_m.data()[j]);
            convex_ok &= m >= s.min(v) - 1e-12 && m <= s.max(v) + 1e-12;
        }
    }
    let (vapm, mut store, mut rng2) = small_vapm(3000);
    for n in ["vapm.fusion.w_s", "vapm.fusion.w_v"] {
        let z = store.get(n).unwrap().zeros_like();
        store.insert(n, z);
    }
    let f_s = Tensor::randn(&mut rng2, 12, cfg.d_q, 1.0);
    let e_v = Tensor::randn(&mut rng2, cfg.n, cfg.d_v, 1.0);
    let half = fusion(&vapm, &store, &f_s, &e_v).lambda.data().iter().all(|&l| l == 0.5);
    if !gate_ok || !half {
        failures.push(format!("gate range ok={gate_ok}, zero-weight gate 0.5={half}"));
    }
    if !convex_ok {
        failures.push("F_m left the F_s..F_v interval".into());
    }

    let (vapm, store, mut rng3) = small_vapm(4000);
    for l in [1, 50, 300] {
        let out = resample(&vapm, &store, &Tensor::randn(&mut rng3, l, cfg.d_q, 1.0));
        if out.shape() != [cfg.k, cfg.d_lm] {
            failures.push(format!("resampler gave {:?} for L_s={l}", out.shape()));
        }
    }
    let mut perm_err: f64 = 0.0;
    for _ in 0..20 {
        let l = rng3.random_range(2..60);
        let x = Tensor::randn(&mut rng3, l, cfg.d_q, 1.0);
        let mut order: Vec<usize> = (0..l).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng3);
        let a = resample(&vapm, &store, &x);
        let b = resample(&vapm, &store, &x.select_rows(&order));
        perm_err = perm_err.max(a.max_abs_diff(&b));
    }
    // the visual connector shares the architecture
    let conn = visual_connector("connector.", &cfg);
    let mut cstore = ParamStore::new();
    conn.init(&mut cstore, &mut rng3);
    let e_v = Tensor::randn(&mut rng3, cfg.n, cfg.d_v, 1.0);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = conn.forward(&mut tape, &cstore, v, false).unwrap();
        tape.value(out).clone()
    };
    perm_err = perm_err.max(run(&e_v).max_abs_diff(&run(&e_v.select_rows(&[8, 0, 7, 1, 6, 2, 5, 3, 4]))));
    if perm_err > 1e-9 {
        failures.push(format!("permutation changed output by {perm_err:.1e}"));
    }

    let provider = EmbeddingProvider::synthetic(11, 64);
    let words = ["what", "is", "the", "cat", "dog", "on", "color", "where", "sofa", "red"];
    let mut top_p_bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..15);
        let mut cands: Vec<QaPair> = Vec::new();
        for j in 0..n {
            // repeats produce exact similarity ties
            if j > 0 && rng.random_bool(0.2) {
                let c = cands[rng.random_range(0..j)].clone();
                cands.push(QaPair::new(c.question, format!("a{j}")));
                continue;
            }
            let len = rng.random_range(1..6);
            let q: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())]).collect();
            cands.push(QaPair::new(q.join(" "), format!("a{j}")));
        }
        let target = "what color is the cat";
        let p = rng.random_range(1..12);
        let got = select_top_p(&cands, target, &provider, p).unwrap();
        let t = provider.embed_text(target).unwrap();
        let scored: Vec<QaPair> = cands
            .iter()
            .map(|c| QaPair {
                similarity: cosine(&provider.embed_text(&c.question).unwrap(), &t),
                ..c.clone()
            })
            .collect();
        let expect = top_p_oracle(&scored, p);
        let same = got.len() == expect.len()
            && got.iter().zip(&expect).all(|(a, b)| {
                a.question == b.question && a.answer == b.answer && (a.similarity - b.similarity).abs() < 1e-12
            });
        if !same {
            top_p_bad += 1;
        }
    }
    if top_p_bad > 0 {
        failures.push(format!("Top-P disagreed with exhaustive selection on {top_p_bad}/1000"));
    }

    let refs = |k: usize| -> Vec<String> { (0..10).map(|i| if i < k { "two" } else { "other" }.to_string()).collect() };
    let expected = [(0, 0.0), (1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0), (7, 1.0)];
    for (k, want) in expected {
        let got = soft_accuracy("Two.", &refs(k)).unwrap();
        if got != want {
            failures.push(format!("soft accuracy with {k} matches = {got}"));
        }
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("softmax err {softmax_err:.1e}, permutation err {perm_err:.1e}, Top-P 1000/1000, soft accuracy exact")
        } else {
            failures.join("; ")
        },
    )
}

fn template_golden() -> Outcome {
    let golden = include_str!("golden/templates.txt");
    let mut rendered = String::new();
    for answer in ["umbrella", "red", "two dogs"] {
        rendered.push_str(&render_vqg_instruction(answer).unwrap());
        rendered.push('\n');
    }
    rendered.push_str(&render_pair(&QaPair::new("Where is the cat?", "sofa")));
    rendered.push('\n');
    rendered.push_str(&render_prompt_bundle(&[
        QaPair::new("Where is the cat?", "sofa"),
        QaPair::new("What color is the sofa?", "red"),
    ]));
    rendered.push('\n');
    for q in ["Why is she here?", "Why", "What is on the table??"] {
        rendered.push_str(&render_vqa_instruction(q).unwrap());
        rendered.push('\n');
    }
    let ok = rendered.as_bytes() == golden.as_bytes();
    let detail = if ok {
        format!("{} golden lines byte-identical", golden.lines().count())
    } else {
        let bad = rendered.lines().zip(golden.lines()).find(|(a, b)| a != b);
        format!("mismatch: {bad:?}")
    };
    outcome(ok, detail)
}

// ---------- toy pipeline ----------

struct SeedRun {
    root: PathBuf,
    scores: BTreeMap<&'static str, f64>,
    vqg_halved_in: Option<usize>,
    vqa_halved_in: Option<usize>,
    vqg_exact: (usize, usize),
    secs: f64,
}

fn variant(base: &RunConfig, mode: FusionMode, no_fusion: bool, no_decoder: bool) -> RunConfig {
    let mut c = base.clone();
    c.mode = mode;
    c.ablation = Ablation { no_fusion, no_decoder };
    c.validate().unwrap();
    c
}

fn synth_config(seed: u64, root: &Path) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.seed = seed;
    let s = pipeline::synth(&cfg, &root.join("data")).unwrap();
    RunConfig::load(&s.config_path).unwrap()
}

fn run_seed(seed: u64, root: PathBuf) -> SeedRun {
    let start = Instant::now();
    let config = synth_config(seed, &root);
    let run = root.join("run");
    let vqg = pipeline::train_vqg_stage(&config, &run).unwrap();

    let data = Data::load(&config).unwrap();
    let model = pipeline::load_vqg(&config, &run).unwrap();
    let held: Vec<_> = data.held_out_triples(&config).into_iter().take(50).collect();
    let exact = held
        .iter()
        .filter(|t| {
            // compared in the model's token space, which is lower-cased
            let truth = model.vocab.detokenize(&model.vocab.tokenize(&t.question));
            generate_question(&model, &data.images, &t.image_key, &t.answer, MAX_QUESTION_TOKENS).unwrap() == truth
        })
        .count();

    pipeline::gen_prompts_stage(&config, &run).unwrap();
    let mut scores = BTreeMap::new();
    let mut vqa_halved_in = None;
    let variants: [(&str, FusionMode, bool, bool); 5] = [
        ("none", FusionMode::None, false, false),
        ("prepend", FusionMode::Prepend, false, false),
        ("vpm", FusionMode::Vpm, false, false),
        ("no-fusion", FusionMode::Vpm, true, false),
        ("no-decoder", FusionMode::Vpm, false, true),
    ];
    for (name, mode, nf, nd) in variants {
        let c = variant(&config, mode, nf, nd);
        let train = pipeline::train_vqa_stage(&c, &run).unwrap();
        if name == "vpm" {
            vqa_halved_in = train.epochs_to_reach(0.5);
        }
        let r = pipeline::eval_stage(&c, &run, &EvalOptions::default()).unwrap();
        scores.insert(name, r.report.eval.mean_soft_accuracy);
        if name == "vpm" {
            let opts = EvalOptions {
                shuffle_bundles: true,
                ..EvalOptions::default()
            };
            let r = pipeline::eval_stage(&c, &run, &opts).unwrap();
            scores.insert("shuffled", r.report.eval.mean_soft_accuracy);
        }
    }
    SeedRun {
        root,
        scores,
        vqg_halved_in: vqg.train.epochs_to_reach(0.5),
        vqa_halved_in,
        vqg_exact: (exact, held.len()),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn toy_learning(r: &SeedRun) -> Outcome {
    let (exact, total) = r.vqg_exact;
    let acc = r.scores["vpm"];
    let a = r.vqg_halved_in.is_some_and(|e| e <= 1) && total == 50 && exact * 10 >= total * 9;
    let b = r.vqa_halved_in.is_some_and(|e| e <= 3);
    let c = acc >= 0.70;
    let t = r.secs < 600.0;
    outcome(
        a && b && c && t,
        format!(
            "VQG halved in epoch {:?}, exact match {exact}/{total}; VQA halved in epoch {:?}; held-out soft acc {acc:.3}; {:.0}s (limits: 1 epoch, 45/50, 3 epochs, 0.70, 600s)",
            r.vqg_halved_in, r.vqa_halved_in, r.secs
        ),
    )
}

fn ablation_ordering(runs: &[(u64, SeedRun)]) -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for (seed, r) in runs {
        let s = &r.scores;
        let checks = [
            ("vpm-prepend", s["vpm"] - s["prepend"] >= 0.05),
            ("prepend-none", s["prepend"] - s["none"] >= 0.05),
            ("vpm-shuffled", s["vpm"] - s["shuffled"] >= 0.05),
            ("no-fusion<=vpm", s["no-fusion"] <= s["vpm"]),
            ("no-decoder<=vpm", s["no-decoder"] <= s["vpm"]),
        ];
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        all &= failed.is_empty();
        parts.push(format!(
            "seed {seed}: none {:.3} prepend {:.3} vpm {:.3} shuffled {:.3} no-fusion {:.3} no-decoder {:.3}{}",
            s["none"],
            s["prepend"],
            s["vpm"],
            s["shuffled"],
            s["no-fusion"],
            s["no-decoder"],
            if failed.is_empty() {
                String::new()
            } else {
                format!(" [failed: {}]", failed.join(", "))
            }
        ));
    }
    outcome(all, parts.join(" | "))
}

fn collect_files(dir: &Path, base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect_files(&p, base, out);
        } else {
            out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
}

/// Re-runs seed 1 (vpm path) from scratch and compares every artifact it
/// writes with the first run's.
fn reproducibility(first: &SeedRun, scratch: &Path) -> Outcome {
    let root = scratch.join("repeat");
    let config = synth_config(1, &root);
    let run = root.join("run");
    pipeline::train_vqg_stage(&config, &run).unwrap();
    pipeline::gen_prompts_stage(&config, &run).unwrap();
    let c = variant(&config, FusionMode::Vpm, false, false);
    pipeline::train_vqa_stage(&c, &run).unwrap();
    pipeline::eval_stage(&c, &run, &EvalOptions::default()).unwrap();

    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    collect_files(&first.root, &first.root, &mut a);
    collect_files(&root, &root, &mut b);
    let differing: Vec<String> = b
        .iter()
        .filter(|(k, v)| a.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let ckpts = b.keys().filter(|k| k.to_string_lossy().ends_with(".ckpt.json")).count();
    let reports = b.keys().filter(|k| k.to_string_lossy().contains("report-")).count();
    outcome(
        differing.is_empty() && ckpts >= 3 && reports >= 1,
        if differing.is_empty() {
            format!("{} files identical ({ckpts} checkpoints, {reports} reports)", b.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    // ACCEPTANCE_ONLY=1,4 runs a subset; 5 to 7 share the seed runs
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    if want(1) {
        report(1, "gradient integrity", gradient_integrity());
    }
    if want(2) {
        report(2, "straight-line oracles", oracle_equivalence());
    }
    if want(3) {
        report(3, "structural invariants", structural_invariants());
    }
    if want(4) {
        report(4, "template golden file", template_golden());
    }
    if want(5) || want(6) || want(7) {
        let scratch = tempfile::tempdir().unwrap();
        let seeds: &[u64] = if want(6) { &[1, 2, 3] } else { &[1] };
        let runs: Vec<(u64, SeedRun)> =
            seeds.iter().map(|&s| (s, run_seed(s, scratch.path().join(format!("seed{s}"))))).collect();
        if want(5) {
            report(5, "toy end-to-end learning", toy_learning(&runs[0].1));
        }
        if want(6) {
            report(6, "directional ablations", ablation_ordering(&runs));
        }
        if want(7) {
            report(7, "reproducibility", reproducibility(&runs[0].1, scratch.path()));
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
