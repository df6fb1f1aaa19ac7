use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn langadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn langadapt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = langadapt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {err:?}");
    lines[0].to_string()
}

/// Synthetic data, tokenizers and a tiny pretrained checkpoint.
fn workspace() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (lang, kind, count, seed, out) in [
        ("a", "corpus", "400", "1", "a.txt"),
        ("b", "corpus", "400", "2", "b.txt"),
        ("a", "nli", "30", "3", "a.tsv"),
        ("b", "nli", "30", "4", "b_train.tsv"),
        ("b", "nli", "30", "5", "b_test.tsv"),
    ] {
        ok(d, &["--seed", seed, "synth", "--lang", lang, "--kind", kind, "--count", count, "--out", out]);
    }
    ok(d, &["synth", "--lang", "b", "--kind", "template", "--out", "b.tpl"]);
    ok(d, &["train-tokenizer", "--corpus", "a.txt", "--vocab", "280", "--out", "a.bpe"]);
    ok(d, &["train-tokenizer", "--corpus", "b.txt", "--vocab", "280", "--out", "b.bpe"]);
    ok(
        d,
        &[
            "pretrain", "--corpus", "a=a.txt", "--vocab", "a.bpe", "--steps", "10", "--layers", "1", "--heads", "2",
            "--d-model", "16", "--d-ffn", "32", "--max-positions", "64", "--checkpoint-at", "5,10", "--out", "pre",
        ],
    );
    tmp
}

fn experiment_config(strategy: &str) -> String {
    format!(
        "[run]\nseed = 1\n[model]\ncheckpoint = pre/checkpoints/step10\n[tokenizer]\nvocab = b.bpe\n\
         [data]\ncorpus = b.txt\nsource_train = a.tsv\ntarget_train = b_train.tsv\ntarget_test = b_test.tsv\n\
         template = b.tpl\n[strategy]\nname = {strategy}\nembeddings = wte,wpe\nreduction = 8\n\
         [plan]\nsteps = 4\nbatch_size = 4\nseq_len = 32\nschedule = constant\n\
         [eval]\ntask_epochs = 1\ntask_seq_len = 32\ntask_reduction = 8\n"
    )
}

#[test]
fn tokenizer_vocab_size_is_bytes_plus_merges() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--lang", "a", "--kind", "corpus", "--count", "3000", "--out", "a.txt"]);
    let out = ok(d, &["train-tokenizer", "--corpus", "a.txt", "--vocab", "512", "--out", "a.bpe"]);
    assert!(out.contains("512 tokens (256 merges, 0 specials)"), "{out}");
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = langadapt(tmp.path(), &["params", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: kind=usage msg="));

    let out = langadapt(tmp.path(), &["params", "--strategy", "emb-sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: kind=usage msg="));
}

#[test]
fn missing_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = langadapt(tmp.path(), &["eval-zeroshot", "--checkpoint", "nowhere", "--data", "x.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: kind=io msg="));

    fs::write(tmp.path().join("bad.cfg"), "[run]\nseed = 1\n[mystery]\n").unwrap();
    let out = langadapt(tmp.path(), &["adapt", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: kind=config msg=") && line.contains("mystery"), "{line}");
}

#[test]
fn params_match_hand_count_of_desk_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["params"]);
    let get = |k: &str| -> usize {
        out.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}\t")))
            .unwrap_or_else(|| panic!("{k} missing in {out}"))
            .parse()
            .unwrap()
    };
    // Desk model: 2 layers, d=64, ffn 256, 512 tokens, 128 positions.
    let (d, f, v, p, l) = (64usize, 256usize, 512usize, 128usize, 2usize);
    let block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
    let expect = v * d + p * d + l * block + 2 * d;
    assert_eq!(get("total"), expect);
    assert_eq!(get("trainable"), expect);

    let out = ok(tmp.path(), &["params", "--strategy", "emb-only", "--embeddings", "wte"]);
    let trainable: usize = out.lines().find_map(|l| l.strip_prefix("trainable\t")).unwrap().parse().unwrap();
    assert_eq!(trainable, v * d);
}

#[test]
fn pipeline_grid_and_capacity() {
    let tmp = workspace();
    let d = tmp.path();
    let mut grid = String::new();
    for (id, s) in [("eo", "emb-only"), ("et", "emb-then-adpt"), ("ea", "emb-and-adpt")] {
        fs::write(d.join(format!("{id}.cfg")), experiment_config(s)).unwrap();
        grid.push_str(&format!("{id} {id}.cfg\n"));
    }
    fs::write(d.join("grid.txt"), &grid).unwrap();

    let first = ok(d, &["grid", "--grid", "grid.txt", "--out", "g1"]);
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(
        lines[0],
        "strategy\tckpt_step\temb_set\treduction\tzeroshot_acc\tcrosslingual_acc\tsupervised_acc"
    );
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        assert_eq!(row.split('\t').count(), 7, "{row}");
        assert!(row.contains("\t10\twte,wpe\t"), "{row}");
    }
    assert!(!d.join("g1/INCOMPLETE").exists());
    let again = ok(d, &["grid", "--grid", "grid.txt", "--out", "g2"]);
    assert_eq!(first, again, "grid reruns must be identical");

    let cap = ok(d, &["capacity", "--results", "g1/results.tsv", "--checkpoint", "pre/checkpoints/step10"]);
    assert_eq!(cap.lines().count(), 3, "{cap}");

    let out = ok(d, &["adapt", "--config", "ea.cfg", "--out", "ad"]);
    assert_eq!(out.trim(), "ad/checkpoints/adapted");
    assert!(d.join("ad/losses.tsv").exists());
    let zs = ok(d, &["eval-zeroshot", "--checkpoint", "ad/checkpoints/adapted", "--data", "b_test.tsv", "--template", "b.tpl"]);
    assert!(zs.starts_with("setting\tmodel\tdataset\taccuracy\nzeroshot\t"), "{zs}");
}

#[test]
fn duplicate_grid_ids_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("grid.txt"), "x one.cfg\nx two.cfg\n").unwrap();
    let out = langadapt(d, &["grid", "--grid", "grid.txt", "--out", "g"]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: kind=config") && line.contains('x'), "{line}");
}
