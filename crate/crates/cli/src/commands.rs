use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use langadapt::adapters::{AdapterConfig, StrategySpec};
use langadapt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use langadapt::evaluation::{
    self, load_nli_tsv, nli_to_tsv, results_tsv, LanguageSide, PromptTemplate, ResultRow, ScoreMode, TaskHead, TaskHyper,
};
use langadapt::experiment::{
    adapt_from_config, capacity_report, create_run_dir, grid_tsv, load_grid, run_grid, short_hash, ExperimentConfig, RunDir,
};
use langadapt::model::{count_params, ModelConfig, Stack};
use langadapt::synthetic::SynthLanguage;
use langadapt::tokenizer::{train_bpe, BpeVocab, TrainOptions};
use langadapt::training::{encode_corpus, pretrain, CheckpointPolicy, Preset, PresetName, SamplingTable, Schedule};
use langadapt::{write_atomic, Error, Result};

use crate::{
    AdaptArgs, CapacityArgs, Cli, Command, CrossLingualArgs, GridArgs, Mixture, OutArgs, ParamsArgs, PretrainArgs,
    ScoreModeArg, SupervisedArgs, SynthArgs, SynthKind, SynthLang, TaskArgs, TrainTokenizerArgs, ZeroShotArgs,
};

/// Error kind for the one-line report, and the exit status.
pub fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("io", 2),
        _ => (e.kind(), 1),
    }
}

struct Ctx {
    seed: Option<u64>,
    preset: PresetName,
}

impl Ctx {
    fn preset(&self) -> Preset {
        Preset::get(self.preset)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        preset: cli.preset.unwrap_or(PresetName::Desk),
    };
    match cli.command {
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::Pretrain(a) => pretrain_cmd(&ctx, a),
        Command::Adapt(a) => adapt_cmd(&ctx, &cli.preset, a),
        Command::EvalZeroshot(a) => eval_zeroshot(a),
        Command::EvalCrosslingual(a) => eval_crosslingual(&ctx, a),
        Command::EvalSupervised(a) => eval_supervised(&ctx, a),
        Command::Params(a) => params(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::Capacity(a) => capacity(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open_run(out: &OutArgs, key: &str) -> Result<RunDir> {
    match &out.out {
        Some(dir) => RunDir::create(dir.clone()),
        None => create_run_dir(&out.runs_root, &short_hash(key.as_bytes())),
    }
}

fn losses_tsv(losses: &[f64]) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{}\t{l:.6}", i + 1);
    }
    s
}

fn checkpoint_vocab(ck: &Checkpoint, path: &Path) -> Result<BpeVocab> {
    ck.vocab
        .clone()
        .ok_or_else(|| Error::Config(format!("checkpoint {} carries no tokenizer", path.display())))
}

fn train_tokenizer(a: TrainTokenizerArgs) -> Result<()> {
    let mut text = String::new();
    for p in &a.corpus {
        text.push_str(&read_text(p)?);
        text.push('\n');
    }
    let opts = TrainOptions {
        whitespace_split: a.whitespace_split,
    };
    let vocab = train_bpe(text.lines().filter(|l| !l.is_empty()), a.vocab, &a.special, opts)?;
    vocab.save(&a.out)?;
    println!(
        "{}: {} tokens ({} merges, {} specials)",
        a.out.display(),
        vocab.vocab_size(),
        vocab.merges().len(),
        vocab.specials().len()
    );
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let preset = ctx.preset();
    let vocab = BpeVocab::load(&a.vocab)?;
    let mut corpora = IndexMap::new();
    for spec in &a.corpus {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--corpus expects NAME=PATH, got {spec:?}")))?;
        if corpora.contains_key(name) {
            return Err(Error::Config(format!("corpus {name} given twice")));
        }
        corpora.insert(name.to_string(), encode_corpus(&vocab, &read_text(Path::new(path))?));
    }
    let table = match a.mixture {
        Mixture::Uniform => {
            let p = 1.0 / corpora.len() as f64;
            SamplingTable::new(corpora.keys().map(|k| (k.clone(), p)))?
        }
        Mixture::Reference => SamplingTable::reference_mixture(),
    };

    let m = &a.model;
    let model = ModelConfig {
        n_layers: m.layers.unwrap_or(preset.model.n_layers),
        n_heads: m.heads.unwrap_or(preset.model.n_heads),
        d_model: m.d_model.unwrap_or(preset.model.d_model),
        d_ffn: m.d_ffn.unwrap_or(preset.model.d_ffn),
        max_positions: m.max_positions.unwrap_or(preset.model.max_positions),
        vocab_size: vocab.vocab_size(),
        seed: ctx.seed(),
    };
    let mut plan = preset.pretrain.clone();
    plan.seed = ctx.seed();
    plan.steps = a.steps.unwrap_or(plan.steps);
    plan.batch_size = a.batch_size.unwrap_or(plan.batch_size);
    plan.seq_len = a.seq_len.unwrap_or(plan.seq_len.min(model.max_positions));
    plan.lr_peak = a.lr.unwrap_or(plan.lr_peak);
    if let Some(w) = a.warmup {
        plan.schedule = Schedule::CosineWithWarmup { warmup_steps: w };
    } else if let Schedule::CosineWithWarmup { warmup_steps } = plan.schedule {
        if warmup_steps >= plan.steps {
            plan.schedule = Schedule::CosineWithWarmup { warmup_steps: plan.steps / 77 };
        }
    }
    if let Some(n) = a.checkpoint_every {
        plan.checkpoints = CheckpointPolicy::Every(n);
    } else if let Some(at) = &a.checkpoint_at {
        plan.checkpoints = CheckpointPolicy::At(at.clone());
    }
    plan.validate(&model)?;

    let key = format!("pretrain {model:?} {plan:?} {:?} {:?}", a.corpus, a.mixture);
    let mut run = open_run(&a.out, &key)?;
    run.write("config", format!("{model:#?}\n{plan:#?}\n").as_bytes())?;
    run.log(format!("pretraining {} steps on {} corpora", plan.steps, corpora.len()));
    let ck_root = run.path().join("checkpoints");
    let mut saved = Vec::new();
    let out = pretrain(&model, &corpora, &table, &plan, |step, params| {
        let mut ck = Checkpoint::new(params.clone(), step as u64);
        ck.vocab = Some(vocab.clone());
        let dir = ck_root.join(format!("step{step}"));
        save_checkpoint(&ck, &dir)?;
        eprintln!("checkpoint step {step} -> {}", dir.display());
        saved.push(step);
        Ok(())
    })?;
    run.write("losses.tsv", losses_tsv(&out.losses).as_bytes())?;
    run.log(format!(
        "final loss {:.4}; checkpoints at {saved:?}",
        out.losses.last().copied().unwrap_or(f64::NAN)
    ));
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(())
}

fn adapt_cmd(ctx: &Ctx, preset_flag: &Option<PresetName>, a: AdaptArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load_with(&a.config, preset_flag.unwrap_or(PresetName::Desk))?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
        cfg.plan.seed = seed;
        cfg.task.seed = seed;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    if let Some(e) = a.embeddings {
        cfg.embeddings = e;
    }
    if let Some(r) = a.reduction {
        cfg.adapter.reduction = r;
    }
    if let Some(n) = a.steps {
        cfg.plan.steps = n;
    }
    cfg.plan.schedule.validate(cfg.plan.steps)?;
    let base = match &a.base {
        Some(b) => Some(b.canonicalize().map_err(|e| Error::io(b, e))?),
        None => None,
    };
    if base.is_some() {
        cfg.checkpoint = base.clone();
    }
    cfg.strategy_spec().validate()?;

    let mut run = open_run(&a.out, &cfg.to_text())?;
    run.write("config", cfg.to_text().as_bytes())?;
    let adapted = adapt_from_config(&cfg, base.as_deref(), &mut |line| run.log(line))?;
    let dir = run.path().join("checkpoints").join("adapted");
    save_checkpoint(&adapted.checkpoint(None), &dir)?;
    run.write("losses.tsv", losses_tsv(&adapted.outcome.losses).as_bytes())?;
    run.finish()?;
    println!("{}", dir.display());
    Ok(())
}

fn template_for(path: Option<&Path>, lang: &str) -> Result<PromptTemplate> {
    match path {
        Some(p) => PromptTemplate::load(p),
        None => PromptTemplate::builtin(lang),
    }
}

fn emit_results(rows: &[ResultRow], out: Option<&Path>) -> Result<()> {
    let table = results_tsv(rows);
    print!("{table}");
    if let Some(p) = out {
        write_atomic(p, table.as_bytes())?;
    }
    Ok(())
}

fn display_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval_zeroshot(a: ZeroShotArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = checkpoint_vocab(&ck, &a.checkpoint)?;
    let template = template_for(a.template.as_deref(), &a.lang)?;
    let data = load_nli_tsv(&a.data)?;
    let mode = match a.score_mode {
        ScoreModeArg::Whole => ScoreMode::WholePrompt,
        ScoreModeArg::Verbalizer => ScoreMode::VerbalizerOnly,
    };
    let stack = Stack::with_adapters(&ck.model, ck.adapters.as_ref());
    let acc = evaluation::zero_shot_eval(&stack, &vocab, &template, &data, mode)?;
    let row = ResultRow {
        setting: "zeroshot".into(),
        model: display_name(&a.checkpoint),
        dataset: display_name(&a.data),
        accuracy: acc.accuracy,
    };
    emit_results(&[row], a.out.as_deref())
}

fn task_hyper(ctx: &Ctx, t: &TaskArgs) -> TaskHyper {
    let base = ctx.preset().task;
    TaskHyper {
        epochs: t.epochs.unwrap_or(base.epochs),
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        lr: t.lr.unwrap_or(base.lr),
        seq_len: t.seq_len.unwrap_or(base.seq_len),
        reduction: t.reduction.unwrap_or(base.reduction),
        optimizer: base.optimizer,
        seed: ctx.seed(),
    }
}

fn eval_crosslingual(ctx: &Ctx, a: CrossLingualArgs) -> Result<()> {
    let hyper = task_hyper(ctx, &a.task);
    let source = load_checkpoint(&a.source)?;
    let head = match (&source.task_head, &a.source_train) {
        (Some(h), _) => h.clone(),
        (None, Some(train)) => {
            let vocab = checkpoint_vocab(&source, &a.source)?;
            let data = load_nli_tsv(train)?;
            let head = TaskHead::new(source.model.config(), hyper.reduction, hyper.seed)?;
            evaluation::train_task_head(&source.model, source.adapters.as_ref(), head, &vocab, &data, &hyper)?.0
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "source checkpoint {} has no task head; pass --source-train",
                a.source.display()
            )))
        }
    };
    let target = load_checkpoint(&a.target)?;
    let vocab = checkpoint_vocab(&target, &a.target)?;
    let data = load_nli_tsv(&a.data)?;
    let side = LanguageSide {
        model: &target.model,
        adapters: target.adapters.as_ref(),
        vocab: &vocab,
    };
    let acc = evaluation::cross_lingual_eval(&head, side, &data, hyper.seq_len)?;
    let row = ResultRow {
        setting: "crosslingual".into(),
        model: format!("{}->{}", display_name(&a.source), display_name(&a.target)),
        dataset: display_name(&a.data),
        accuracy: acc.accuracy,
    };
    emit_results(&[row], a.out.as_deref())
}

fn eval_supervised(ctx: &Ctx, a: SupervisedArgs) -> Result<()> {
    let hyper = task_hyper(ctx, &a.task);
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let vocab = checkpoint_vocab(&ck, &a.checkpoint)?;
    let (train, test) = (load_nli_tsv(&a.train)?, load_nli_tsv(&a.test)?);
    let side = LanguageSide {
        model: &ck.model,
        adapters: ck.adapters.as_ref(),
        vocab: &vocab,
    };
    let (acc, head) = evaluation::supervised_eval(side, &train, &test, &hyper)?;
    if let Some(dir) = &a.save {
        ck.task_head = Some(head);
        save_checkpoint(&ck, dir)?;
        eprintln!("checkpoint with task head -> {}", dir.display());
    }
    let row = ResultRow {
        setting: "supervised".into(),
        model: display_name(&a.checkpoint),
        dataset: display_name(&a.test),
        accuracy: acc.accuracy,
    };
    emit_results(&[row], a.out.as_deref())
}

fn params(ctx: &Ctx, a: ParamsArgs) -> Result<()> {
    let (model, ck_adapters) = match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.model.config().clone(), ck.adapters.map(|b| *b.config()))
        }
        None => (ctx.preset().model, None),
    };
    let adapter = match (a.reduction, ck_adapters) {
        (Some(r), base) => Some(AdapterConfig {
            reduction: r,
            ..base.unwrap_or_default()
        }),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    };
    let counts = match a.strategy {
        Some(strategy) => {
            let adapter = adapter.unwrap_or_else(|| AdapterConfig::with_reduction(ctx.preset().reduction));
            let spec = StrategySpec::new(strategy, a.embeddings, 2, adapter);
            spec.validate()?;
            adapter.validate(model.d_model)?;
            let trainable = spec.all_trainable(&model);
            count_params(&model, strategy.uses_adapters().then_some(&adapter), Some(&trainable))
        }
        None => {
            if let Some(c) = &adapter {
                c.validate(model.d_model)?;
            }
            count_params(&model, adapter.as_ref(), None)
        }
    };
    println!("total\t{}", counts.total);
    println!("trainable\t{}", counts.trainable);
    for (group, n) in &counts.by_group {
        println!("{group}\t{n}");
    }
    Ok(())
}

fn grid(ctx: &Ctx, a: GridArgs) -> Result<()> {
    let text = read_text(&a.grid)?;
    let mut entries = load_grid(&a.grid)?;
    if let Some(seed) = ctx.seed {
        for e in &mut entries {
            e.config.seed = seed;
            e.config.plan.seed = seed;
            e.config.task.seed = seed;
        }
    }
    let mut run = open_run(&a.out, &text)?;
    let runs = run.path().join("runs");
    let outcomes = run_grid(&entries, Some(&runs), |o| match &o.result {
        Ok(r) => eprintln!(
            "{}: zeroshot {:.4} crosslingual {:.4} supervised {:.4}",
            o.id, r.zeroshot, r.crosslingual, r.supervised
        ),
        Err(e) => eprintln!("{}: error: kind={} msg={}", o.id, e.kind(), e.to_string().replace('\n', " ")),
    })?;
    let table = grid_tsv(&outcomes);
    run.write("results.tsv", table.as_bytes())?;
    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    run.log(format!("{} runs, {failed} failed", outcomes.len()));
    let path = run.finish()?;
    print!("{table}");
    eprintln!("results -> {}", path.join("results.tsv").display());
    Ok(())
}

fn capacity(ctx: &Ctx, a: CapacityArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model.config().clone(),
        None => ctx.preset().model,
    };
    print!("{}", capacity_report(&model, &read_text(&a.results)?)?);
    Ok(())
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let lang = match a.lang {
        SynthLang::A => SynthLanguage::a(),
        SynthLang::B => SynthLanguage::b(),
    };
    if !(0.0..=1.0).contains(&a.prompt_share) {
        return Err(Error::Config(format!("--prompt-share must be in [0, 1], got {}", a.prompt_share)));
    }
    let text = match a.kind {
        SynthKind::Corpus => lang.corpus(a.count, a.prompt_share, ctx.seed()),
        SynthKind::Nli => nli_to_tsv(&lang.nli(a.count, ctx.seed())),
        SynthKind::Template => lang.template().to_text(),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_atomic(&a.out, text.as_bytes())?;
    println!("{}", PathBuf::from(&a.out).display());
    Ok(())
}
