//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use draftnmt::autodiff::{finite_difference_check, sample_coordinates};
use draftnmt::bleu::bleu;
use draftnmt::checkpoint::{self, AnyModel, SaveInfo};
use draftnmt::config::RunConfig;
use draftnmt::corpus::{generate, GenerateSpec, Split, Task};
use draftnmt::decoding::{beam, greedy, greedy_batch, BeamOptions};
use draftnmt::models::{forced, forward_batch, DoubleAttentionModel, ModelDims, Seq2Seq, SingleAttentionModel};
use draftnmt::pipeline::{cmd_pipeline, make_drafts, train_stage1, train_stage2, vocabularies};
use draftnmt::training::{batch_loss, mean_token_nll, train, Example, TrainConfig, TrainingBatch};
use draftnmt::vocab::{Vocabulary, EOS, RESERVED};
use draftnmt::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        embed: 4,
        hidden: 6,
        align: 6,
        readout: 6,
        src_vocab: 11,
        tgt_vocab: 11,
    }
}

fn desk_dims(v: usize) -> ModelDims {
    RunConfig::default().dims(v, v)
}

fn random_seq(r: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> Vec<usize> {
    let n = r.gen_range(min..=max);
    (0..n).map(|_| r.gen_range(RESERVED..vocab)).collect()
}

fn tmp_dir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("draftnmt-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    fn run<M: Seq2Seq<f64>>(m: &M, with_draft: bool, seed: u64) -> (f64, usize, String) {
        let mut r = rng(seed);
        let srcs: Vec<Vec<usize>> = (0..3).map(|_| random_seq(&mut r, 11, 1, 5)).collect();
        let tgts: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let mut t = random_seq(&mut r, 11, 1, 4);
                t.push(EOS);
                t
            })
            .collect();
        let drafts: Option<Vec<Vec<usize>>> =
            with_draft.then(|| (0..3).map(|_| random_seq(&mut r, 11, 1, 5)).collect());
        let coords = sample_coordinates(m.params(), 240, &mut r);
        let report = finite_difference_check(
            m.params(),
            |g| Ok(forward_batch(m, g, &srcs, drafts.as_deref(), &tgts, &[1.0, 1.0, 1.0])?.loss),
            1e-5,
            &coords,
        )
        .expect("gradient check");
        let worst = report
            .worst
            .map(|(b, i, a, n, _)| format!("{b}[{i}] analytic {a:.3e} numeric {n:.3e}"))
            .unwrap_or_default();
        (report.max_rel_error, report.coordinates, worst)
    }
    let start = Instant::now();
    let s = SingleAttentionModel::<f64>::new(tiny_dims(), &mut rng(1)).unwrap();
    let d = DoubleAttentionModel::<f64>::new(tiny_dims(), &mut rng(2)).unwrap();
    let (es, cs, ws) = run(&s, false, 3);
    let (ed, cd, wd) = run(&d, true, 4);
    let secs = start.elapsed().as_secs_f64();
    check(
        es < 1e-4 && ed < 1e-4 && cs >= 200 && cd >= 200 && secs < 120.0,
        format!("single max rel err {es:.2e} over {cs} coords (worst {ws}), double {ed:.2e} over {cd} (worst {wd}), {secs:.1}s"),
    )
}

fn uniform_loss_identity() -> Outcome {
    let v = 11;
    let data: Vec<Example> = (0..4)
        .map(|i| {
            let mut r = rng(10 + i);
            Example {
                source: random_seq(&mut r, v, 1, 6),
                draft: Some(random_seq(&mut r, v, 1, 6)),
                target: random_seq(&mut r, v, 1, 6),
            }
        })
        .collect();
    let refs: Vec<&Example> = data.iter().collect();
    let with_draft = TrainingBatch::new(&refs).unwrap();
    let pairs: Vec<Example> = data
        .iter()
        .map(|e| Example {
            draft: None,
            ..e.clone()
        })
        .collect();
    let pair_refs: Vec<&Example> = pairs.iter().collect();
    let without = TrainingBatch::new(&pair_refs).unwrap();

    let mut s = SingleAttentionModel::<f64>::new(tiny_dims(), &mut rng(5)).unwrap();
    for id in s.decoder.readout_ids() {
        s.params.zero(id);
    }
    let mut d = DoubleAttentionModel::<f64>::new(tiny_dims(), &mut rng(6)).unwrap();
    for id in d.decoder.readout_ids() {
        d.params.zero(id);
    }
    let mut g = Graph::with_params(&s.params);
    let l = batch_loss(&s, &mut g, &without).unwrap();
    let ls = g.value(l).item();
    let mut g = Graph::with_params(&d.params);
    let l = batch_loss(&d, &mut g, &with_draft).unwrap();
    let ld = g.value(l).item();
    let ln_v = (v as f64).ln();
    check(
        (ls - ln_v).abs() < 1e-6 && (ld - ln_v).abs() < 1e-6,
        format!("single {ls:.9}, double {ld:.9}, ln V {ln_v:.9}"),
    )
}

fn memorization() -> Outcome {
    let start = Instant::now();
    let spec = GenerateSpec {
        task: Task::Copy,
        count: 32,
        min_len: 4,
        max_len: 10,
        vocab_size: 50,
        seed: 7,
    };
    let v = Vocabulary::synthetic(50).unwrap();
    let data = generate(&spec, Split::Train).unwrap().examples(&v, &v).unwrap();
    let mut m = SingleAttentionModel::<f32>::new(desk_dims(50), &mut rng(7)).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 1e-3,
        steps: 2000,
        seed: 7,
        clip: None,
        eval_every: Some(100),
        keep_best: true,
    };
    train(&mut m, &data, Some(&data), &cfg, |_| {}).unwrap();
    let nll = mean_token_nll(&m, &data, 32).unwrap();
    let srcs: Vec<Vec<usize>> = data.iter().map(|e| e.source.clone()).collect();
    let outs = greedy_batch(&m, &srcs, None).unwrap();
    let exact = outs
        .iter()
        .zip(&data)
        .filter(|(h, e)| h.content() == e.target.as_slice())
        .count();
    let secs = start.elapsed().as_secs_f64();
    check(
        nll < 0.05 && exact == 32 && secs < 600.0,
        format!("per-token NLL {nll:.4} after 2000 steps, greedy exact {exact}/32, {secs:.1}s"),
    )
}

fn gold_draft_channel() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig {
        task: Task::Copy,
        steps: 300,
        stage2_steps: 1500,
        seed: 11,
        ..RunConfig::default()
    };
    cfg.gold_draft = true;
    let train_set = generate(&cfg.corpus_spec(2000), Split::Train).unwrap();
    let test_set = generate(&cfg.corpus_spec(200), Split::Test).unwrap();
    let s1 = train_stage1::<f32>(&cfg, &train_set, None, &mut |_| {}).unwrap();
    let opts = BeamOptions::new(cfg.beam);
    let triples = make_drafts(&s1.model, &s1.src_vocab, &s1.tgt_vocab, &train_set, &opts, true).unwrap();
    let (s2, _) = train_stage2(
        &cfg,
        &s1.model,
        &s1.src_vocab,
        &s1.tgt_vocab,
        &triples,
        None,
        &mut |_| {},
    )
    .unwrap();
    let test = test_set.examples(&s1.src_vocab, &s1.tgt_vocab).unwrap();
    let hyps: Vec<Vec<String>> = test
        .iter()
        .map(|e| {
            let h = beam(&s2, &e.source, Some(&e.target), &opts).unwrap();
            s1.tgt_vocab.decode(h[0].content())
        })
        .collect();
    let refs: Vec<Vec<String>> = test_set.records.iter().map(|r| r.target.clone()).collect();
    let b = bleu(&hyps, &refs).unwrap().bleu;
    check(
        b > 0.95,
        format!(
            "stage-two test BLEU with reference drafts {:.2}, {:.1}s",
            100.0 * b,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn refinement_direction() -> (Outcome, Outcome) {
    let start = Instant::now();
    let cfg = RunConfig {
        task: Task::Agreement,
        steps: 3000,
        stage2_steps: 4000,
        seeds: vec![1, 2, 3],
        out_dir: tmp_dir("pipeline"),
        ..RunConfig::default()
    };
    let report = cmd_pipeline(&cfg, &mut |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (m1, m2) = (report.median_stage1(), report.median_two_stage());
    let per_seed: Vec<String> = report
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: {:.2} -> {:.2}",
                r.seed,
                100.0 * r.stage1_bleu,
                100.0 * r.two_stage_bleu
            )
        })
        .collect();
    let margin = 100.0 * (m2 - m1);
    let direction = check(
        m2 >= m1 && secs < 3600.0,
        format!(
            "median BLEU stage 1 {:.2}, two-stage {:.2}, margin {margin:+.2} points (expected >= +0.5: {}); {}; {secs:.0}s",
            100.0 * m1,
            100.0 * m2,
            if margin >= 0.5 { "met" } else { "not met" },
            per_seed.join(", ")
        ),
    );
    let text = std::fs::read_to_string(cfg.out_dir.join("report.txt")).unwrap_or_default();
    let overlaps: Vec<f64> = report.runs.iter().filter_map(|r| r.prefix_overlap).collect();
    let overlap = check(
        overlaps.len() == report.runs.len()
            && overlaps.iter().all(|v| (0.0..=1.0).contains(v))
            && text.contains("prefix_overlap="),
        format!(
            "mean beam-5 prefix overlap per seed: {}",
            overlaps
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
    (direction, overlap)
}

fn beam_greedy_equivalence() -> Outcome {
    let v = 50;
    let s = SingleAttentionModel::<f32>::new(desk_dims(v), &mut rng(21)).unwrap();
    let d = DoubleAttentionModel::<f32>::new(desk_dims(v), &mut rng(22)).unwrap();
    let mut r = rng(23);
    let mut mismatches = 0;
    for _ in 0..100 {
        let src = random_seq(&mut r, v, 1, 12);
        let draft = random_seq(&mut r, v, 1, 12);
        let one = BeamOptions::new(1);
        if beam(&s, &src, None, &one).unwrap()[0].tokens != greedy(&s, &src, None).unwrap().tokens {
            mismatches += 1;
        }
        if beam(&d, &src, Some(&draft), &one).unwrap()[0].tokens != greedy(&d, &src, Some(&draft)).unwrap().tokens {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} mismatches over 100 inputs x 2 models"),
    )
}

fn score_consistency() -> Outcome {
    let v = 50;
    let s = SingleAttentionModel::<f32>::new(desk_dims(v), &mut rng(31)).unwrap();
    let d = DoubleAttentionModel::<f32>::new(desk_dims(v), &mut rng(32)).unwrap();
    let mut r = rng(33);
    let mut worst = 0.0f64;
    let mut hyps = 0;
    for i in 0..100 {
        let src = random_seq(&mut r, v, 1, 12);
        let draft = random_seq(&mut r, v, 1, 12);
        let opts = BeamOptions::new(5);
        let (found, draft) = if i % 2 == 0 {
            (beam(&s, &src, None, &opts).unwrap(), None)
        } else {
            (beam(&d, &src, Some(&draft), &opts).unwrap(), Some(draft))
        };
        for h in found {
            let nll = match &draft {
                None => forced(&s, &src, None, &h.tokens).unwrap().nll,
                Some(dr) => forced(&d, &src, Some(dr), &h.tokens).unwrap().nll,
            };
            worst = worst.max((h.score + nll).abs());
            hyps += 1;
        }
    }
    check(
        worst < 1e-4,
        format!("max |score - forced| {worst:.2e} over {hyps} hypotheses in 100 decodes"),
    )
}

fn freeze_contract() -> Outcome {
    let cfg = RunConfig {
        task: Task::Reversal,
        batch_size: 16,
        steps: 50,
        stage2_steps: 500,
        seed: 41,
        ..RunConfig::default()
    };
    let train_set = generate(&cfg.corpus_spec(400), Split::Train).unwrap();
    let s1 = train_stage1::<f32>(&cfg, &train_set, None, &mut |_| {}).unwrap();
    let opts = BeamOptions::new(1);
    let triples = make_drafts(&s1.model, &s1.src_vocab, &s1.tgt_vocab, &train_set, &opts, false).unwrap();
    let (s2, log) = train_stage2(
        &cfg,
        &s1.model,
        &s1.src_vocab,
        &s1.tgt_vocab,
        &triples,
        None,
        &mut |_| {},
    )
    .unwrap();
    let bytes = |t: &draftnmt::Tensor<f32>| t.data().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
    let p1 = &s1.model.params;
    let p2 = &s2.params;
    let same = bytes(p2.get(s2.src_embed)) == bytes(p1.get(s1.model.src_embed))
        && bytes(p2.get(s2.draft_embed)) == bytes(p1.get(s1.model.tgt_embed))
        && bytes(p2.get(s2.tgt_embed)) == bytes(p1.get(s1.model.tgt_embed));
    let moved = p2.get(s2.decoder.w_o)
        != DoubleAttentionModel::<f32>::inherit(&s1.model, &s2.dims, &mut rng(0))
            .unwrap()
            .params
            .get(s2.decoder.w_o);
    check(
        same && log.steps.len() == 500 && moved,
        format!("{} updates; embedding tables byte-identical: {same}", log.steps.len()),
    )
}

fn bleu_oracle() -> Outcome {
    let s = |x: &str| x.split_whitespace().map(String::from).collect::<Vec<_>>();
    let hand = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    let a = bleu(&[s("a b c d e")], &[s("a b c d f")]).unwrap();
    let b = bleu(&[s("a b c d")], &[s("a b c e")]).unwrap();
    let same = bleu(&[s("x y z w v"), s("p q r s")], &[s("x y z w v"), s("p q r s")]).unwrap();
    let empty = bleu(&[Vec::new()], &[s("a b c d")]).unwrap();
    check(
        a.bleu == hand
            && b.precisions == [0.75, 2.0 / 3.0, 0.5, 0.0]
            && b.bleu == 0.0
            && same.bleu == 1.0
            && empty.bleu == 0.0,
        format!(
            "hand example {:.6} (expected {hand:.6}), zero-4gram {}, identical {}, empty {}",
            a.bleu, b.bleu, same.bleu, empty.bleu
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = RunConfig {
        task: Task::Copy,
        steps: 20,
        batch_size: 16,
        ..RunConfig::default()
    };
    let corpus = generate(&cfg.corpus_spec(200), Split::Train).unwrap();
    let (sv, tv) = vocabularies(&corpus).unwrap();
    let s1 = train_stage1::<f32>(&cfg, &corpus, None, &mut |_| {}).unwrap();
    let (a, b) = (tmp_dir("ckpt-a"), tmp_dir("ckpt-b"));
    let info = SaveInfo {
        seed: cfg.seed,
        steps: 20,
        ..SaveInfo::default()
    };
    checkpoint::save(&a, &AnyModel::Single(s1.model.clone()), &sv, &tv, &info).unwrap();
    let loaded = checkpoint::load::<f32>(&a).unwrap();
    checkpoint::save(&b, &loaded.model, &loaded.src_vocab, &loaded.tgt_vocab, &info).unwrap();
    let byte_identical = ["meta", "params"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let (m, ..) = loaded.into_single().unwrap();
    let mut r = rng(51);
    let mut identical = 0;
    for _ in 0..20 {
        let src = random_seq(&mut r, sv.len(), 1, 10);
        let mut tgt = random_seq(&mut r, tv.len(), 1, 10);
        tgt.push(EOS);
        let x = forced(&s1.model, &src, None, &tgt).unwrap().step_log_probs;
        let y = forced(&m, &src, None, &tgt).unwrap().step_log_probs;
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        let g1 = beam(&s1.model, &src, None, &BeamOptions::new(3)).unwrap();
        let g2 = beam(&m, &src, None, &BeamOptions::new(3)).unwrap();
        if bits(&x) == bits(&y) && g1 == g2 {
            identical += 1;
        }
    }
    check(
        byte_identical && identical == 20,
        format!("save-load-save byte-identical: {byte_identical}; bitwise-identical outputs on {identical}/20 inputs"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 uniform-model loss identity", uniform_loss_identity),
        ("3 memorization", memorization),
        ("4 gold-draft channel", gold_draft_channel),
        ("6 beam-1/greedy equivalence", beam_greedy_equivalence),
        ("7 score consistency", score_consistency),
        ("8 freeze contract", freeze_contract),
        ("9 BLEU oracle", bleu_oracle),
        ("10 checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));

    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, outcome: Outcome| {
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) | Err(d) => d.clone(),
        };
        println!("{tag} criterion {name}: {detail}");
        results.push((name.to_string(), outcome));
    };
    let guarded = |f: fn() -> Outcome| -> Outcome {
        panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        })
    };
    for (name, f) in &criteria {
        if wanted(name) {
            record(name, guarded(*f));
        }
    }
    if wanted("5 refinement direction") || wanted("11 prefix-overlap diagnostic") {
        match panic::catch_unwind(refinement_direction) {
            Ok((direction, overlap)) => {
                record("5 refinement direction", direction);
                record("11 prefix-overlap diagnostic", overlap);
            }
            Err(_) => {
                record("5 refinement direction", Err("pipeline panicked".into()));
                record("11 prefix-overlap diagnostic", Err("pipeline panicked".into()));
            }
        }
    }
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
