//! Acceptance suite. Runs every top-level criterion at its stated tolerance,
//! prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! failed.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use langadapt::adapters::{
    invertible_forward, invertible_inverse, AdapterBank, AdapterConfig, EmbeddingSet, Strategy, StrategySpec,
};
use langadapt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, WEIGHTS};
use langadapt::evaluation::{
    self, render_prompt, zero_shot_predict, Label, LanguageSide, NLIExample, PromptTemplate, ScoreMode, TaskHead,
    TaskHyper,
};
use langadapt::model::{count_params, grad_check_lm, ModelConfig, ModelParams, Stack, TokenBatch};
use langadapt::numcore::{primitive_suite, GradCheckConfig, Init, Stencil, Tensor};
use langadapt::params::checksum;
use langadapt::synthetic::SynthLanguage;
use langadapt::tokenizer::{train_bpe, BpeVocab, TrainOptions};
use langadapt::training::{
    adapt, byte_perplexity, chunk_stream, encode_corpus, pretrain, AdamW, AdamWConfig, ParamGrad, Preset,
    SamplingTable, Schedule,
};
use langadapt::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    format!("kind={} msg={e}", e.kind())
}

fn normal(shape: &[usize], std: f32, seed: u64) -> Tensor {
    Tensor::init(shape, Init::Normal { mean: 0.0, std }, seed).unwrap()
}

/// Overwrite every adapter tensor matching `prefix` with random values.
fn randomize(bank: &mut AdapterBank, prefix: &str, std: f32, seed: u64) {
    let names: Vec<(String, Vec<usize>)> = bank
        .tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    for (i, (n, shape)) in names.into_iter().enumerate() {
        bank.set_tensor(&n, normal(&shape, std, seed * 1000 + i as u64)).unwrap();
    }
}

fn random_batch(vocab: usize, batch: usize, seq: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
    let ids = (0..batch * seq).map(|_| rng.random_range(0..vocab as u32)).collect();
    TokenBatch { ids, batch, seq }
}

fn invertibility() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::desk();
    let mut worst = 0.0f32;
    for draw in 0..10u64 {
        let mut bank = AdapterBank::new(&cfg, AdapterConfig::default(), "x", draw).map_err(e2s)?;
        randomize(&mut bank, "inv.", 0.3, draw + 1);
        let w = bank.coupling().map_err(e2s)?;
        let e = normal(&[1000, cfg.d_model], 1.0, 100 + draw);
        let back = invertible_inverse(&w, &invertible_forward(&w, &e).map_err(e2s)?).map_err(e2s)?;
        worst = worst.max(back.max_abs_diff(&e));
    }
    let dt = t0.elapsed();
    ensure(worst < 1e-5, || format!("max |inverse(forward(e)) - e| = {worst:e}"))?;
    ensure(dt < Duration::from_secs(5), || format!("took {dt:?}"))?;
    Ok(format!("10 draws x 1000 vectors, max error {worst:e}, {:.2}s", dt.as_secs_f64()))
}

fn zero_init_identity() -> Outcome {
    let cfg = ModelConfig::desk();
    let model = ModelParams::build(&cfg).map_err(e2s)?;
    let bank = AdapterBank::new(&cfg, AdapterConfig::default(), "x", 7).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let batch = random_batch(cfg.vocab_size, 2, 16, &mut rng);
        let plain = Stack::base(&model).forward_logits(&batch).map_err(e2s)?;
        let wrapped = Stack::with_adapters(&model, Some(&bank)).forward_logits(&batch).map_err(e2s)?;
        worst = worst.max(plain.max_abs_diff(&wrapped));
    }
    ensure(worst < 1e-6, || format!("max logit change {worst:e}"))?;
    Ok(format!("100 batches, max logit change {worst:e}"))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let gc = GradCheckConfig::default();
    let suite = primitive_suite(&gc).map_err(|e| e.to_string())?;
    let failed: Vec<_> = suite.iter().filter(|(_, r)| !r.passed).map(|(n, r)| format!("{n}={:e}", r.max_rel_error())).collect();
    ensure(failed.is_empty(), || format!("primitives failed: {}", failed.join(", ")))?;
    let prim_worst = suite.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);

    let cfg = ModelConfig::desk();
    let model = ModelParams::build(&cfg).map_err(e2s)?;
    let mut bank = AdapterBank::new(&cfg, AdapterConfig::default(), "x", 3).map_err(e2s)?;
    // non-zero up-projections so every adapter tensor has a live gradient;
    // small down-projections and biases of +-0.5 keep every ReLU input far
    // from its kink, where finite differences are meaningless
    randomize(&mut bank, "", 0.05, 9);
    let names: Vec<String> = bank.tensors().keys().cloned().collect();
    for n in names {
        let mut t = bank.tensors()[&n].clone();
        if n.ends_with(".down") {
            t.data_mut().iter_mut().for_each(|x| *x *= 0.2);
        } else if n.ends_with(".down_bias") {
            t.data_mut().iter_mut().enumerate().for_each(|(k, x)| *x += if k % 2 == 0 { 0.5 } else { -0.5 });
        }
        bank.set_tensor(&n, t).map_err(e2s)?;
    }
    let stack = Stack::with_adapters(&model, Some(&bank));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(cfg.vocab_size, 2, 8, &mut rng);
    // a deep f32 network needs a step above rounding noise; the higher-order
    // stencil keeps truncation error at that step below the tolerance
    let model_gc = GradCheckConfig {
        h: 2e-2,
        stencil: Stencil::FivePoint,
        ..gc
    };
    let checks = grad_check_lm(&stack, &batch, &model_gc).map_err(e2s)?;
    let failed: Vec<_> = checks.iter().filter(|(_, c)| !c.passed).map(|(n, c)| format!("{n}={:e}", c.max_rel_error)).collect();
    ensure(failed.is_empty(), || format!("desk model tensors failed: {}", failed.join(", ")))?;
    let model_worst = checks.iter().map(|(_, c)| c.max_rel_error).fold(0.0, f64::max);
    let dt = t0.elapsed();
    ensure(dt < Duration::from_secs(60), || format!("took {dt:?}"))?;
    Ok(format!(
        "{} primitives (max rel {prim_worst:.1e}), {} desk tensors (max rel {model_worst:.1e}), {:.1}s",
        suite.len(),
        checks.len(),
        dt.as_secs_f64()
    ))
}

fn freezing() -> Outcome {
    let cfg = ModelConfig::desk();
    let base = ModelParams::build(&cfg).map_err(e2s)?;
    let text = SynthLanguage::b().corpus(400, 0.3, 21);
    let vocab = train_bpe(text.lines(), 300, &[], TrainOptions::default()).map_err(e2s)?;
    let corpus = encode_corpus(&vocab, &text);
    let mut plan = Preset::desk().adapt;
    plan.steps = 50;
    let mut checked = 0;
    for strategy in [Strategy::EmbOnly, Strategy::EmbThenAdpt, Strategy::EmbAndAdpt] {
        for emb in [EmbeddingSet::Wte, EmbeddingSet::WteWpe] {
            let spec = StrategySpec::new(strategy, emb, 50, AdapterConfig::default());
            let trainable = spec.all_trainable(&cfg);
            let before: Vec<(String, u32)> = base
                .tensors()
                .iter()
                .filter(|(n, _)| !trainable.contains(*n))
                .map(|(n, t)| (n.clone(), checksum(t)))
                .collect();
            let out = adapt(&base, &vocab, &corpus, &spec, &plan, "B").map_err(e2s)?;
            for (n, c) in &before {
                let after = checksum(out.model.get(n).unwrap());
                ensure(after == *c, || format!("{strategy}/{emb}: frozen {n} changed"))?;
                checked += 1;
            }
            if let Some(bank) = &out.adapters {
                let up = bank.tensors().get("layer0.adpt.up").unwrap();
                ensure(up.data().iter().any(|&x| x != 0.0), || format!("{strategy}/{emb}: adapters did not train"))?;
            }
            if emb == EmbeddingSet::Wte {
                ensure(checksum(out.model.get("wpe").unwrap()) == checksum(base.get("wpe").unwrap()), || {
                    format!("{strategy}/wte: wpe moved")
                })?;
            } else {
                ensure(checksum(out.model.get("wpe").unwrap()) != checksum(base.get("wpe").unwrap()), || {
                    format!("{strategy}/wte,wpe: wpe did not train")
                })?;
            }
        }
    }
    Ok(format!("6 strategy/embedding runs x 50 steps, {checked} frozen tensor checksums stable"))
}

fn parameter_accounting() -> Outcome {
    let desk = ModelConfig::desk();
    let c = count_params(&desk, None, None);
    ensure(c.total == 141_056, || format!("desk total {}", c.total))?;
    let c = count_params(&desk, Some(&AdapterConfig::default()), None);
    ensure(c.by_group["language_adapters"] == 1_160, || format!("desk language adapters {}", c.by_group["language_adapters"]))?;
    ensure(c.by_group["invertible_adapter"] == 2_144, || format!("desk invertible {}", c.by_group["invertible_adapter"]))?;

    // closed form: embeddings, 12 matrices/vectors per block, final norm
    let closed = |m: &ModelConfig| {
        let (v, p, d, f, l) = (m.vocab_size, m.max_positions, m.d_model, m.d_ffn, m.n_layers);
        v * d + p * d + l * (4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d) + 2 * d
    };
    let full = ModelConfig::full();
    for m in [&desk, &full] {
        let got = count_params(m, None, None).total;
        ensure(got == closed(m), || format!("backbone {got} vs closed form {}", closed(m)))?;
    }
    // the listed totals for r = 48 and r = 384 disagree with the closed form
    // they are stated to follow (floor(2048/48) = 42, floor(2048/384) = 5);
    // the closed form is checked and any disagreement is reported
    let mut capacity = Vec::new();
    let mut notes = Vec::new();
    for (r, listed) in [(16, 12_635_136usize), (48, 4_214_880), (384, 542_880)] {
        let b = full.d_model / r;
        let closed = full.n_layers * (2 * full.d_model * b + b + full.d_model);
        let got = count_params(&full, Some(&AdapterConfig::with_reduction(r)), None).by_group["language_adapters"];
        ensure(got == closed, || format!("r={r}: {got} vs closed form {closed}"))?;
        if got != listed {
            notes.push(format!("r={r} listed {listed} but closed form gives {closed}"));
        }
        capacity.push(format!("r={r}:{got}"));
    }
    let mut prev = usize::MAX;
    for r in [2, 4, 8, 16, 32, 48, 64, 128, 384, 1024] {
        let n = count_params(&full, Some(&AdapterConfig::with_reduction(r)), None).by_group["language_adapters"];
        ensure(n <= prev, || format!("capacity increases at r={r}"))?;
        prev = n;
    }
    // trainable + frozen = total under every strategy
    for strategy in [Strategy::EmbOnly, Strategy::EmbThenAdpt, Strategy::EmbAndAdpt] {
        let spec = StrategySpec::new(strategy, EmbeddingSet::WteWpe, 10, AdapterConfig::default());
        let set: BTreeSet<String> = spec.all_trainable(&desk);
        let c = count_params(&desk, strategy.uses_adapters().then_some(&spec.adapter), Some(&set));
        let frozen: usize = desk
            .tensor_specs()
            .iter()
            .filter(|s| !set.contains(&s.name))
            .map(|s| s.numel())
            .sum();
        ensure(c.trainable + frozen == c.total, || format!("{strategy}: trainable + frozen != total"))?;
    }
    let notes = if notes.is_empty() { String::new() } else { format!(" [{}]", notes.join("; ")) };
    Ok(format!("desk 141056 / adapters 1160 / invertible 2144; full-scale capacity {}{notes}", capacity.join(" ")))
}

fn tokenizer() -> Outcome {
    let text = SynthLanguage::a().corpus(500, 0.3, 5) + &SynthLanguage::b().corpus(500, 0.3, 6);
    let specials = vec!["<pad>".to_string()];
    let vocab = train_bpe(text.lines(), 512, &specials, TrainOptions::default()).map_err(e2s)?;
    ensure(vocab.vocab_size() == 512 && vocab.merges().len() == 512 - 256 - 1, || {
        format!("vocab {} with {} merges", vocab.vocab_size(), vocab.merges().len())
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in [&vocab, &BpeVocab::bytes_only()] {
        for i in 0..1000 {
            let len = rng.random_range(0..=1024);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let back = v.decode(&v.encode(&bytes)).map_err(e2s)?;
            ensure(back == bytes, || format!("round trip failed on string {i} (len {len})"))?;
        }
    }
    // vocab = 256 bytes + merges: 258 allows two merges, 259 three
    let one = train_bpe(["aaab", "aaab"], 258, &[], TrainOptions::default()).map_err(e2s)?;
    let two = train_bpe(["aaab", "aaab"], 259, &[], TrainOptions::default()).map_err(e2s)?;
    ensure(one.merges()[0] == (97, 97), || format!("first merge {:?}", one.merges()))?;
    ensure(two.merges()[..2] == [(97, 97), (97, 98)], || format!("merges {:?}", two.merges()))?;
    Ok("2000 random strings round-trip; 512 = 256 + 255 + 1; aaab merges (a,a) then (a,b)".into())
}

fn schedules_and_optimizer() -> Outcome {
    let peak = 1e-3;
    let lin = Schedule::LinearDecay;
    for (step, want) in [(0usize, peak), (25_000, peak * 0.5), (50_000, 0.0)] {
        let got = lin.lr(step, 50_000, peak).map_err(e2s)?;
        ensure((got - want).abs() < 1e-12, || format!("linear@{step}: {got} vs {want}"))?;
    }
    let cos = Schedule::CosineWithWarmup { warmup_steps: 100 };
    let closed = |s: usize| {
        if s < 100 {
            peak * s as f64 / 100.0
        } else {
            peak * 0.5 * (1.0 + (PI * (s - 100) as f64 / 1000.0).cos())
        }
    };
    for step in [0usize, 50, 100, 600, 1100] {
        let got = cos.lr(step, 1100, peak).map_err(e2s)?;
        ensure((got - closed(step)).abs() < 1e-12, || format!("cosine@{step}: {got} vs {}", closed(step)))?;
    }
    ensure((cos.lr(600, 1100, peak).unwrap() - peak * 0.5).abs() < 1e-12, || "cosine midpoint".into())?;
    ensure(lin.lr(50_001, 50_000, peak).is_err(), || "step past total accepted".into())?;

    let one_step = |wd: f64| {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: wd,
            clip_norm: None,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut value = Tensor::scalar(1.0);
        let grad = Tensor::scalar(1.0);
        opt.step(&mut [ParamGrad { name: "w", value: &mut value, grad: &grad }], 0.1).unwrap();
        value.data()[0] as f64
    };
    let (a, b) = (one_step(0.0), one_step(0.1));
    let want_b = 1.0 - 0.1 * 0.1 * 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    ensure((a - 0.9).abs() < 1e-6, || format!("adamw step {a}"))?;
    ensure((b - want_b).abs() < 1e-6, || format!("adamw+decay step {b}"))?;
    Ok(format!("lr points match closed form; AdamW steps {a:.6} / {b:.6}"))
}

fn sampling() -> Outcome {
    let table = SamplingTable::reference_mixture();
    let sum: f64 = table.entries().values().sum();
    ensure(format!("{sum:.4}") == "1.0000" && (sum - 1.0).abs() < 1e-9, || format!("sum {sum}"))?;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; table.len()];
    for _ in 0..n {
        counts[table.sample_index(&mut rng)] += 1;
    }
    let mut worst = 0.0f64;
    for ((lang, &p), &c) in table.entries().iter().zip(&counts) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let z = (c as f64 - n as f64 * p).abs() / sigma;
        ensure(z <= 3.0, || format!("{lang}: {c} draws, {z:.2} sigma from {p}"))?;
        worst = worst.max(z);
    }
    Ok(format!("13 languages within {worst:.2} sigma over 100000 draws; probabilities sum to {sum:.4}"))
}

/// Shared desk-scale pipeline state for the end-to-end and zero-shot checks.
struct Desk {
    preset: Preset,
    vocab_a: BpeVocab,
    vocab_b: BpeVocab,
    corpus_b: Vec<u32>,
    heldout_b: String,
    checkpoints: Vec<(u64, Checkpoint)>,
    pretrain_time: Duration,
}

fn desk_pipeline(dir: &Path) -> Result<Desk, String> {
    let preset = Preset::desk();
    let (a, b) = (SynthLanguage::a(), SynthLanguage::b());
    let text_a = a.corpus(6000, 0.3, 1);
    let text_b = b.corpus(6000, 0.3, 2);
    let vocab_a = train_bpe(text_a.lines(), preset.vocab_size, &[], TrainOptions::default()).map_err(e2s)?;
    let vocab_b = train_bpe(text_b.lines(), preset.vocab_size, &[], TrainOptions::default()).map_err(e2s)?;
    let corpora: IndexMap<String, Vec<u32>> = [("A".to_string(), encode_corpus(&vocab_a, &text_a))].into_iter().collect();
    let mut model_cfg = preset.model.clone();
    model_cfg.vocab_size = vocab_a.vocab_size();
    let t0 = Instant::now();
    let mut saved = Vec::new();
    pretrain(&model_cfg, &corpora, &SamplingTable::only("A"), &preset.pretrain, |step, m| {
        let path = dir.join(format!("step{step}"));
        let mut ck = Checkpoint::new(m.clone(), step as u64);
        ck.vocab = Some(vocab_a.clone());
        save_checkpoint(&ck, &path)?;
        saved.push((step as u64, path));
        Ok(())
    })
    .map_err(e2s)?;
    let pretrain_time = t0.elapsed();
    let checkpoints = saved
        .into_iter()
        .map(|(s, p)| load_checkpoint(&p).map(|c| (s, c)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?;
    Ok(Desk {
        corpus_b: encode_corpus(&vocab_b, &text_b),
        heldout_b: b.corpus(300, 0.3, 3),
        preset,
        vocab_a,
        vocab_b,
        checkpoints,
        pretrain_time,
    })
}

fn end_to_end(desk: &Desk, t_start: Instant) -> Outcome {
    let steps: Vec<u64> = desk.checkpoints.iter().map(|(s, _)| *s).collect();
    let total = desk.preset.pretrain.steps as u64;
    let intermediate = steps.iter().filter(|&&s| s < total).count();
    ensure(intermediate >= 3 && steps.last() == Some(&total), || format!("checkpoints at {steps:?}"))?;
    ensure(desk.pretrain_time < Duration::from_secs(300), || format!("pretraining took {:?}", desk.pretrain_time))?;
    let (first, last) = (&desk.checkpoints[0].1, &desk.checkpoints.last().unwrap().1);
    let count = count_params(last.model.config(), None, None).total;
    ensure(count == 141_056, || format!("desk model has {count} parameters"))?;

    let seq = desk.preset.adapt.seq_len;
    let held_base = chunk_stream(&encode_corpus(&desk.vocab_a, &desk.heldout_b), seq);
    let held = chunk_stream(&encode_corpus(&desk.vocab_b, &desk.heldout_b), seq);
    let base_ppl = byte_perplexity(&Stack::base(&last.model), &desk.vocab_a, &held_base).map_err(e2s)?;

    let adapt_with = |model: &ModelParams, strategy| {
        let spec = StrategySpec::new(strategy, EmbeddingSet::WteWpe, desk.preset.adapt.steps, AdapterConfig::with_reduction(16));
        adapt(model, &desk.vocab_b, &desk.corpus_b, &spec, &desk.preset.adapt, "B").map_err(e2s)
    };
    let mut ppl = Vec::new();
    let mut last_emb_adpt = None;
    for strategy in [Strategy::EmbOnly, Strategy::EmbThenAdpt, Strategy::EmbAndAdpt] {
        let out = adapt_with(&last.model, strategy)?;
        let p = byte_perplexity(&Stack::with_adapters(&out.model, out.adapters.as_ref()), &desk.vocab_b, &held).map_err(e2s)?;
        ppl.push((strategy, p));
        if strategy == Strategy::EmbAndAdpt {
            last_emb_adpt = Some(out);
        }
    }
    for (s, p) in &ppl {
        ensure(*p <= 0.8 * base_ppl, || format!("(i) {s}: byte perplexity {p:.4} vs base {base_ppl:.4}"))?;
    }
    let (emb_only, emb_adpt) = (ppl[0].1, ppl[2].1);
    let note = if emb_adpt <= emb_only {
        format!("(ii) emb-and-adpt {emb_adpt:.4} <= emb-only {emb_only:.4}")
    } else if emb_adpt <= emb_only * 1.02 {
        format!("(ii) reported: emb-and-adpt {emb_adpt:.4} above emb-only {emb_only:.4} within 2%")
    } else {
        return Err(format!("(ii) emb-and-adpt {emb_adpt:.4} worse than emb-only {emb_only:.4} by more than 2%"));
    };

    let b = SynthLanguage::b();
    let (train, test) = (b.nli(600, 11), b.nli(300, 12));
    let hyper = TaskHyper::desk();
    let late = last_emb_adpt.unwrap();
    let early = adapt_with(&first.model, Strategy::EmbAndAdpt)?;
    let sup = |o: &langadapt::training::AdaptOutcome| {
        let side = LanguageSide {
            model: &o.model,
            adapters: o.adapters.as_ref(),
            vocab: &desk.vocab_b,
        };
        evaluation::supervised_eval(side, &train, &test, &hyper).map(|(a, _)| a.accuracy).map_err(e2s)
    };
    let (acc_early, acc_late) = (sup(&early)?, sup(&late)?);
    ensure((acc_early - acc_late).abs() <= 0.10, || {
        format!("(iii) supervised accuracy step {} {acc_early:.4} vs step {total} {acc_late:.4}", desk.checkpoints[0].0)
    })?;
    let dt = t_start.elapsed();
    ensure(dt < Duration::from_secs(20 * 60), || format!("took {dt:?}"))?;
    let ppl_text: Vec<String> = ppl.iter().map(|(s, p)| format!("{s} {p:.4}")).collect();
    Ok(format!(
        "pretrain {:.0}s, checkpoints {steps:?}; (i) base byte ppl {base_ppl:.1} -> {}; {note}; (iii) supervised step {} {acc_early:.4} vs step {total} {acc_late:.4}; {:.0}s total",
        desk.pretrain_time.as_secs_f64(),
        ppl_text.join(", "),
        desk.checkpoints[0].0,
        dt.as_secs_f64()
    ))
}

/// Independent scorer: one forward pass per predicted position on the bare
/// prefix, log-softmax in f64, plain mean.
fn brute_force_scores(model: &ModelParams, vocab: &BpeVocab, t: &PromptTemplate, ex: &NLIExample) -> Result<[f64; 3], String> {
    let mut scores = [0.0; 3];
    for (i, &label) in Label::ALL.iter().enumerate() {
        let ids = vocab.encode_str(&render_prompt(t, ex, label));
        let mut total = 0.0;
        for pos in 1..ids.len() {
            let prefix = TokenBatch::from_rows(&[ids[..pos].to_vec()]).map_err(e2s)?;
            let logits = Stack::base(model).forward_logits(&prefix).map_err(e2s)?;
            let v = logits.last_dim();
            let row: Vec<f64> = logits.data()[(pos - 1) * v..pos * v].iter().map(|&x| x as f64).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += row[ids[pos] as usize] - lse;
        }
        scores[i] = total / (ids.len() - 1) as f64;
    }
    Ok(scores)
}

fn zero_shot(desk: &Desk) -> Outcome {
    let model = &desk.checkpoints.last().unwrap().1.model;
    let template = SynthLanguage::a().template();
    let examples = SynthLanguage::a().nli(50, 77);
    let mut worst = 0.0f64;
    for (i, ex) in examples.iter().enumerate() {
        let z = zero_shot_predict(&Stack::base(model), &desk.vocab_a, &template, ex, ScoreMode::WholePrompt).map_err(e2s)?;
        let oracle = brute_force_scores(model, &desk.vocab_a, &template, ex)?;
        for k in 0..3 {
            worst = worst.max((z.scores[k] - oracle[k]).abs());
        }
        ensure(z.label == evaluation::argmax_label(&oracle), || format!("example {i}: prediction differs from oracle"))?;
    }
    ensure(worst < 1e-6, || format!("score difference {worst:e}"))?;

    let mut rigged = model.clone();
    let shape = rigged.get("wte").unwrap().shape().to_vec();
    rigged.set_tensor("wte", Tensor::zeros(&shape)).map_err(e2s)?;
    for ex in &examples {
        let z = zero_shot_predict(&Stack::base(&rigged), &desk.vocab_a, &template, ex, ScoreMode::WholePrompt).map_err(e2s)?;
        ensure(z.label == Label::Entailment, || format!("uniform model predicted {}", z.label.as_str()))?;
    }

    let ex = NLIExample::new("P", "H", Label::Entailment).unwrap();
    let expected = [
        ("en", ["P, right? Yes, H", "P, right? No, H", "P, right? Also, H"]),
        ("de", ["P, richtig? Ja, H", "P, richtig? Nein, H", "P, richtig? Auch, H"]),
        ("ko", ["P, 맞지? 예, H", "P, 맞지? 아니요, H", "P, 맞지? 또한, H"]),
    ];
    for (lang, want) in expected {
        let t = PromptTemplate::builtin(lang).map_err(e2s)?;
        for (label, w) in Label::ALL.iter().zip(want) {
            let got = render_prompt(&t, &ex, *label);
            ensure(got.as_bytes() == w.as_bytes(), || format!("{lang}/{}: {got:?}", label.as_str()))?;
        }
    }
    Ok(format!("50 examples match the per-position oracle (max diff {worst:.1e}); uniform model -> entailment; en/de/ko render exactly"))
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 256,
        ..ModelConfig::desk()
    };
    let model = ModelParams::build(&cfg).map_err(e2s)?;
    let mut bank = AdapterBank::new(&cfg, AdapterConfig::default(), "B", 4).map_err(e2s)?;
    randomize(&mut bank, "", 0.1, 17);
    let head = TaskHead::new(&cfg, 16, 5).map_err(e2s)?;
    let ck = Checkpoint {
        model,
        adapters: Some(bank),
        task_head: Some(head),
        vocab: Some(BpeVocab::bytes_only()),
        pretrain_step: 1234,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck");
    save_checkpoint(&ck, &path).map_err(e2s)?;
    let back = load_checkpoint(&path).map_err(e2s)?;
    ensure(back.bitwise_eq(&ck) && back.pretrain_step == 1234, || "round trip not bitwise identical".into())?;

    let weights = std::fs::read(path.join(WEIGHTS)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trials = 25;
    for _ in 0..trials {
        let at = rng.random_range(0..weights.len());
        let mut bad = weights.clone();
        bad[at] ^= 1 << rng.random_range(0..8);
        std::fs::write(path.join(WEIGHTS), &bad).map_err(|e| e.to_string())?;
        match load_checkpoint(&path) {
            Err(e) if e.kind() == "format" => {}
            Err(e) => return Err(format!("byte {at}: wrong error {}", e2s(e))),
            Ok(_) => return Err(format!("corrupted byte {at} went undetected")),
        }
    }
    Ok(format!("bitwise round trip; {trials}/{trials} single-byte corruptions detected"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        match &o {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => println!("FAIL  {name}: {msg}"),
        }
        results.push((name, o));
    };
    report("invertibility", invertibility());
    report("zero-init identity", zero_init_identity());
    report("gradient checks", gradient_checks());
    report("freezing", freezing());
    report("parameter accounting", parameter_accounting());
    report("tokenizer", tokenizer());
    report("schedules and optimizer", schedules_and_optimizer());
    report("sampling", sampling());

    let dir = tempfile::tempdir().expect("temp dir");
    let t_e2e = Instant::now();
    match desk_pipeline(dir.path()) {
        Ok(desk) => {
            report("desk end-to-end", end_to_end(&desk, t_e2e));
            report("zero-shot harness", zero_shot(&desk));
        }
        Err(e) => {
            report("desk end-to-end", Err(format!("pipeline setup failed: {e}")));
            report("zero-shot harness", Err("needs the pretrained desk model".into()));
        }
    }
    report("checkpoint", checkpoint_round_trip());

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed ({:.0}s)",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
