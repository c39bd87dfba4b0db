use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use draftnmt::checkpoint;

const TINY: &[&str] = &[
    "--embed=4",
    "--hidden=8",
    "--align=8",
    "--readout=8",
    "--vocab=12",
    "--train_size=40",
    "--dev_size=10",
    "--test_size=10",
    "--min_len=2",
    "--max_len=5",
    "--batch_size=8",
    "--steps=20",
    "--stage2_steps=20",
    "--beam=3",
];

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("draftnmt-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_draftnmt"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny(cmd: &str, extra: &[&str]) -> Vec<String> {
    let mut v = vec![cmd.to_string()];
    v.extend(TINY.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn ok_tiny(cmd: &str, extra: &[&str]) -> String {
    let args = tiny(cmd, extra);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates train/dev corpora and trains stage one into `dir/s1`.
fn stage1(dir: &Path, task: &str, steps: &str) -> PathBuf {
    let task = format!("--task={task}");
    let steps = format!("--steps={steps}");
    ok_tiny("generate", &[&task, "--out", p(&dir.join("train.tsv"))]);
    ok_tiny("generate", &[&task, "--split", "dev", "--out", p(&dir.join("dev.tsv"))]);
    let s1 = dir.join("s1");
    ok_tiny(
        "train-stage1",
        &[
            &task,
            &steps,
            "--corpus",
            p(&dir.join("train.tsv")),
            "--dev",
            p(&dir.join("dev.tsv")),
            "--out",
            p(&s1),
        ],
    );
    s1
}

#[test]
fn zero_step_training_is_deterministic_and_byte_identical() {
    let d = workdir("zero");
    let a = stage1(&d, "copy", "0");
    let b = d.join("s1b");
    ok_tiny(
        "train-stage1",
        &[
            "--task=copy",
            "--steps=0",
            "--corpus",
            p(&d.join("train.tsv")),
            "--out",
            p(&b),
        ],
    );
    for f in [checkpoint::META_FILE, checkpoint::PARAMS_FILE] {
        assert!(
            fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let ck = checkpoint::load::<f32>(&a).unwrap();
    assert_eq!(ck.meta.steps, 0);
    assert_eq!(ck.meta.seed, 1);
}

#[test]
fn gold_drafts_copy_the_target_and_keep_line_count() {
    let d = workdir("gold");
    let s1 = stage1(&d, "reversal", "5");
    let out = d.join("triples.tsv");
    let stdout = ok_tiny(
        "make-drafts",
        &[
            "--checkpoint",
            p(&s1),
            "--corpus",
            p(&d.join("train.tsv")),
            "--out",
            p(&out),
            "--gold-draft",
        ],
    );
    assert_eq!(stdout.trim(), "lines=40");
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 40);
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1], f[2]);
    }
}

#[test]
fn two_stage_flow_records_provenance_and_freezes_embeddings() {
    let d = workdir("flow");
    let s1 = stage1(&d, "agreement", "10");
    let triples = d.join("train.draft.tsv");
    ok_tiny(
        "make-drafts",
        &[
            "--checkpoint",
            p(&s1),
            "--corpus",
            p(&d.join("train.tsv")),
            "--out",
            p(&triples),
        ],
    );
    let s2 = d.join("s2");
    ok_tiny(
        "train-stage2",
        &["--stage1", p(&s1), "--corpus", p(&triples), "--out", p(&s2)],
    );

    let (m1, ..) = checkpoint::load::<f32>(&s1).unwrap().into_single().unwrap();
    let (m2, meta2, ..) = checkpoint::load::<f32>(&s2).unwrap().into_double().unwrap();
    assert_eq!(
        meta2.provenance.as_deref(),
        Some(checkpoint::digest(&s1).unwrap().as_str())
    );
    assert_eq!(m2.params.get(m2.src_embed), m1.params.get(m1.src_embed));
    assert_eq!(m2.params.get(m2.draft_embed), m1.params.get(m1.tgt_embed));
    assert_eq!(m2.params.get(m2.tgt_embed), m1.params.get(m1.tgt_embed));

    let input = d.join("dev.tsv");
    let two = ["--checkpoint", p(&s1), "--checkpoint", p(&s2), "--input", p(&input)];
    let a = ok_tiny("translate", &two);
    let b = ok_tiny("translate", &two);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 10);
    assert!(a.lines().all(|l| l.split('\t').count() == 2));

    let hyp = d.join("hyp.txt");
    fs::write(&hyp, &a).unwrap();
    let report = ok(&["evaluate", "--hyp", p(&hyp), "--ref", p(&input)]);
    assert!(report.starts_with("bleu="), "{report}");
}

#[test]
fn evaluate_matches_hand_counts() {
    let d = workdir("eval");
    let (h, r) = (d.join("h"), d.join("r"));
    fs::write(&h, "a b c d e\n").unwrap();
    fs::write(&r, "a b c d f\n").unwrap();
    let out = ok(&["evaluate", "--hyp", p(&h), "--ref", p(&r)]);
    let expected = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!(out.contains(&format!("bleu={expected:.6}")), "{out}");
    let out = ok(&["evaluate", "--hyp", p(&r), "--ref", p(&r)]);
    assert!(out.starts_with("bleu=1.000000"));
    fs::write(&h, "\n").unwrap();
    let out = ok(&["evaluate", "--hyp", p(&h), "--ref", p(&r)]);
    assert!(out.starts_with("bleu=0.000000"));
}

fn fails_with(args: &[&str], class: &str) {
    let out = run(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error {class}: ")), "{err}");
}

#[test]
fn failures_exit_non_zero_with_one_classified_line() {
    let d = workdir("fail");
    let (h, r) = (d.join("h"), d.join("r"));
    fs::write(&h, "a\nb\n").unwrap();
    fs::write(&r, "a\n").unwrap();
    fails_with(&["evaluate", "--hyp", p(&h), "--ref", p(&r)], "invalid_argument");
    fails_with(
        &[
            "train-stage1",
            "--corpus",
            p(&d.join("missing.tsv")),
            "--out",
            p(&d.join("o")),
        ],
        "io_error",
    );
    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "hidden=4\nwidth=2\n").unwrap();
    fails_with(&["pipeline", "--config", p(&cfg)], "parse_error");
    fails_with(&["pipeline", "--beam=0"], "config_error");
    let corpus = d.join("c.tsv");
    fs::write(&corpus, "w4 w5\tw5 w4\nw6\n").unwrap();
    fails_with(
        &["train-stage1", "--corpus", p(&corpus), "--out", p(&d.join("o"))],
        "parse_error",
    );
}

#[test]
fn translate_rejects_unknown_tokens() {
    let d = workdir("vocab");
    let s1 = stage1(&d, "copy", "0");
    let input = d.join("in.txt");
    fs::write(&input, "w4 zzz\n").unwrap();
    let args = tiny("translate", &["--checkpoint", p(&s1), "--input", p(&input)]);
    fails_with(&args.iter().map(String::as_str).collect::<Vec<_>>(), "vocab_mismatch");
}

#[test]
fn pipeline_report_lists_both_systems_and_seeds() {
    let d = workdir("pipe");
    let out = format!("--out_dir={}", p(&d));
    let report = ok_tiny("pipeline", &[&out, "--seeds=4,5"]);
    for key in [
        "median_stage1_bleu=",
        "median_two_stage_bleu=",
        "median_delta=",
        "seeds=4,5",
        "prefix_overlap=",
    ] {
        assert!(report.contains(key), "missing {key} in\n{report}");
    }
    assert_eq!(fs::read_to_string(d.join("report.txt")).unwrap(), report);
    assert!(d.join("seed-4/stage2/meta").exists());
}
