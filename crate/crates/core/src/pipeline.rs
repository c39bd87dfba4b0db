//! End-to-end orchestration: train stage one, decode drafts, train stage
//! two, translate and evaluate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bleu::{bleu, BleuReport};
use crate::checkpoint::{self, AnyModel, SaveInfo};
use crate::config::RunConfig;
use crate::corpus::{generate, ParallelCorpus, Record, Split};
use crate::decoding::{beam, parallel_map, prefix_overlap, BeamOptions, Hypothesis};
use crate::error::{Error, Result};
use crate::models::{DoubleAttentionModel, SingleAttentionModel};
use crate::tensor::{Precision, Real};
use crate::training::{train, TrainingLog};
use crate::vocab::{Vocabulary, EOS, EOS_TOKEN};

/// Receives one human-readable progress line at a time.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn phase<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Phase { .. } => e,
        other => Error::Phase {
            phase: name,
            source: Box::new(other),
        },
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Source and target vocabularies of a corpus.
pub fn vocabularies(corpus: &ParallelCorpus) -> Result<(Vocabulary, Vocabulary)> {
    let src = Vocabulary::from_tokens(corpus.records.iter().flat_map(|r| &r.source).map(String::as_str))?;
    let tgt = Vocabulary::from_tokens(corpus.records.iter().flat_map(|r| &r.target).map(String::as_str))?;
    Ok((src, tgt))
}

fn beam_options(cfg: &RunConfig) -> BeamOptions {
    BeamOptions {
        length_normalize: cfg.length_normalize,
        ..BeamOptions::new(cfg.beam)
    }
}

fn hyperparameters(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_pairs().into_iter().collect()
}

fn init_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub struct Stage1<T> {
    pub model: SingleAttentionModel<T>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub log: TrainingLog,
}

pub fn train_stage1<T: Real>(
    cfg: &RunConfig,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    progress: Progress,
) -> Result<Stage1<T>> {
    let (src_vocab, tgt_vocab) = vocabularies(corpus)?;
    let data = corpus.examples(&src_vocab, &tgt_vocab)?;
    let dev = dev.map(|d| d.examples(&src_vocab, &tgt_vocab)).transpose()?;
    let dims = cfg.dims(src_vocab.len(), tgt_vocab.len());
    let mut model = SingleAttentionModel::<T>::new(dims, &mut init_rng(cfg.seed, 2))?;
    let log = train(&mut model, &data, dev.as_deref(), &cfg.train_config(1), |l| progress(l))?;
    Ok(Stage1 {
        model,
        src_vocab,
        tgt_vocab,
        log,
    })
}

/// Beam-decodes every source of `corpus` with a stage-one model and returns
/// the corpus with the top hypothesis as draft. With `gold` the reference
/// is used instead. An empty hypothesis is written as a lone `</s>`.
pub fn make_drafts<T: Real>(
    model: &SingleAttentionModel<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    corpus: &ParallelCorpus,
    opts: &BeamOptions,
    gold: bool,
) -> Result<ParallelCorpus> {
    let sources: Vec<Vec<usize>> = corpus
        .records
        .iter()
        .map(|r| src_vocab.encode_strict(&r.source))
        .collect::<Result<_>>()?;
    let drafts: Vec<Vec<String>> = if gold {
        corpus.records.iter().map(|r| r.target.clone()).collect()
    } else {
        parallel_map(&sources, |s| {
            beam(model, s, None, opts).map(|h| h[0].content().to_vec())
        })
        .into_iter()
        .map(|r| {
            r.map(|ids| {
                if ids.is_empty() {
                    vec![EOS_TOKEN.to_string()]
                } else {
                    tgt_vocab.decode(&ids)
                }
            })
        })
        .collect::<Result<_>>()?
    };
    Ok(ParallelCorpus {
        records: corpus
            .records
            .iter()
            .zip(drafts)
            .map(|(r, d)| Record {
                draft: Some(d),
                ..r.clone()
            })
            .collect(),
        task: corpus.task,
        seed: corpus.seed,
    })
}

pub fn train_stage2<T: Real>(
    cfg: &RunConfig,
    stage1: &SingleAttentionModel<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    triples: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    progress: Progress,
) -> Result<(DoubleAttentionModel<T>, TrainingLog)> {
    if !triples.has_drafts() {
        return Err(Error::InvalidArgument(
            "stage-two training needs a corpus with drafts".into(),
        ));
    }
    let data = triples.examples(src_vocab, tgt_vocab)?;
    let dev = dev.map(|d| d.examples(src_vocab, tgt_vocab)).transpose()?;
    let dims = cfg.dims(src_vocab.len(), tgt_vocab.len());
    let mut model = DoubleAttentionModel::inherit(stage1, &dims, &mut init_rng(cfg.seed, 3))?;
    let log = train(&mut model, &data, dev.as_deref(), &cfg.train_config(2), |l| progress(l))?;
    Ok((model, log))
}

/// One translated sentence: the stage-one beam, best first, and the
/// stage-two result when a refinement model was given.
#[derive(Clone, Debug)]
pub struct Translation {
    pub draft_beam: Vec<Hypothesis>,
    pub refined: Option<Hypothesis>,
    pub warning: Option<String>,
}

impl Translation {
    pub fn draft(&self) -> &Hypothesis {
        &self.draft_beam[0]
    }

    /// The final output: refined when available, otherwise the draft.
    pub fn best(&self) -> &Hypothesis {
        self.refined.as_ref().unwrap_or(&self.draft_beam[0])
    }
}

pub fn translate<T: Real>(
    stage1: &SingleAttentionModel<T>,
    stage2: Option<&DoubleAttentionModel<T>>,
    sources: &[Vec<usize>],
    opts: &BeamOptions,
) -> Result<Vec<Translation>> {
    parallel_map(sources, |src| -> Result<Translation> {
        let draft_beam = beam(stage1, src, None, opts)?;
        let Some(stage2) = stage2 else {
            return Ok(Translation {
                draft_beam,
                refined: None,
                warning: None,
            });
        };
        let content = draft_beam[0].content();
        let (draft, warning) = if content.is_empty() {
            (
                vec![EOS],
                Some("empty draft; refining from a lone end-of-sequence token".to_string()),
            )
        } else {
            (content.to_vec(), None)
        };
        let refined = beam(stage2, src, Some(&draft), opts)?.remove(0);
        Ok(Translation {
            draft_beam,
            refined: Some(refined),
            warning,
        })
    })
    .into_iter()
    .collect()
}

/// Mean prefix overlap of the stage-one beams that hold at least two
/// hypotheses, with the number of such beams.
pub fn mean_prefix_overlap(translations: &[Translation]) -> (Option<f64>, usize) {
    let vals: Vec<f64> = translations
        .iter()
        .filter(|t| t.draft_beam.len() >= 2)
        .filter_map(|t| {
            let hyps: Vec<Vec<usize>> = t.draft_beam.iter().map(|h| h.tokens.clone()).collect();
            prefix_overlap(&hyps).ok()
        })
        .collect();
    if vals.is_empty() {
        (None, 0)
    } else {
        (Some(vals.iter().sum::<f64>() / vals.len() as f64), vals.len())
    }
}

// ---- commands -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
}

fn summarize(dir: &Path, log: &TrainingLog) -> TrainSummary {
    let best = log
        .validations
        .iter()
        .map(|v| v.loss)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))));
    TrainSummary {
        checkpoint: dir.to_path_buf(),
        steps: log.steps.len(),
        final_loss: log.final_loss(),
        best_val_loss: best,
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Trains stage one on a corpus file and writes the checkpoint and
/// `train.log` into `out`.
pub fn cmd_train_stage1(
    cfg: &RunConfig,
    corpus: &Path,
    dev: Option<&Path>,
    out: &Path,
    progress: Progress,
) -> Result<TrainSummary> {
    with_precision!(cfg.precision, train_stage1_cmd(cfg, corpus, dev, out, progress))
}

fn train_stage1_cmd<T: Real>(
    cfg: &RunConfig,
    corpus: &Path,
    dev: Option<&Path>,
    out: &Path,
    progress: Progress,
) -> Result<TrainSummary> {
    let train_set = ParallelCorpus::read(corpus)?;
    let dev_set = dev.map(ParallelCorpus::read).transpose()?;
    let s1 = train_stage1::<T>(cfg, &train_set, dev_set.as_ref(), progress)?;
    let info = SaveInfo {
        seed: cfg.seed,
        steps: s1.log.steps.len(),
        hyperparameters: hyperparameters(cfg),
        provenance: None,
    };
    checkpoint::save(out, &AnyModel::Single(s1.model), &s1.src_vocab, &s1.tgt_vocab, &info)?;
    write_file(&out.join("train.log"), &s1.log.to_text())?;
    Ok(summarize(out, &s1.log))
}

/// Writes `source TAB target TAB draft` lines for every record of `corpus`.
pub fn cmd_make_drafts(cfg: &RunConfig, stage1: &Path, corpus: &Path, out: &Path) -> Result<usize> {
    with_precision!(cfg.precision, make_drafts_cmd(cfg, stage1, corpus, out))
}

fn make_drafts_cmd<T: Real>(cfg: &RunConfig, stage1: &Path, corpus: &Path, out: &Path) -> Result<usize> {
    let (model, _, src_vocab, tgt_vocab) = checkpoint::load::<T>(stage1)?.into_single()?;
    let c = ParallelCorpus::read(corpus)?;
    let drafted = make_drafts(&model, &src_vocab, &tgt_vocab, &c, &beam_options(cfg), cfg.gold_draft)?;
    write_file(out, &drafted.to_text())?;
    Ok(drafted.len())
}

/// Builds stage two from a stage-one checkpoint, trains it on a triple
/// corpus and writes the checkpoint (citing the stage-one digest) to `out`.
pub fn cmd_train_stage2(
    cfg: &RunConfig,
    stage1: &Path,
    triples: &Path,
    dev: Option<&Path>,
    out: &Path,
    progress: Progress,
) -> Result<TrainSummary> {
    with_precision!(
        cfg.precision,
        train_stage2_cmd(cfg, stage1, triples, dev, out, progress)
    )
}

fn train_stage2_cmd<T: Real>(
    cfg: &RunConfig,
    stage1: &Path,
    triples: &Path,
    dev: Option<&Path>,
    out: &Path,
    progress: Progress,
) -> Result<TrainSummary> {
    let provenance = checkpoint::digest(stage1)?;
    let (s1, _, src_vocab, tgt_vocab) = checkpoint::load::<T>(stage1)?.into_single()?;
    let data = ParallelCorpus::read(triples)?;
    let dev_set = dev.map(ParallelCorpus::read).transpose()?;
    let (model, log) = train_stage2(cfg, &s1, &src_vocab, &tgt_vocab, &data, dev_set.as_ref(), progress)?;
    let info = SaveInfo {
        seed: cfg.seed,
        steps: log.steps.len(),
        hyperparameters: hyperparameters(cfg),
        provenance: Some(provenance),
    };
    checkpoint::save(out, &AnyModel::Double(model), &src_vocab, &tgt_vocab, &info)?;
    write_file(&out.join("train.log"), &log.to_text())?;
    Ok(summarize(out, &log))
}

/// Reads one sentence per line (the first TAB field when several are
/// present) and returns one output line per input line: the translation
/// for a single checkpoint, `draft TAB refined` for two. Warnings go to
/// `progress`.
pub fn cmd_translate(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    input: &Path,
    progress: Progress,
) -> Result<Vec<String>> {
    with_precision!(cfg.precision, translate_cmd(cfg, checkpoints, input, progress))
}

fn read_sources(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks: Vec<String> = line
                .split('\t')
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(String::from)
                .collect();
            if toks.is_empty() {
                Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty source".into(),
                })
            } else {
                Ok(toks)
            }
        })
        .collect()
}

fn translate_cmd<T: Real>(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    input: &Path,
    progress: Progress,
) -> Result<Vec<String>> {
    let (s1, s2, src_vocab, tgt_vocab) = match checkpoints {
        [one] => {
            let (m, _, sv, tv) = checkpoint::load::<T>(one)?.into_single()?;
            (m, None, sv, tv)
        }
        [one, two] => {
            let (m1, _, sv, tv) = checkpoint::load::<T>(one)?.into_single()?;
            let (m2, _, sv2, tv2) = checkpoint::load::<T>(two)?.into_double()?;
            if sv != sv2 || tv != tv2 {
                return Err(Error::VocabMismatch(
                    "stage-one and stage-two checkpoints use different vocabularies".into(),
                ));
            }
            (m1, Some(m2), sv, tv)
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "translate takes one or two checkpoints, got {}",
                checkpoints.len()
            )))
        }
    };
    let sources = read_sources(input)?
        .iter()
        .map(|s| src_vocab.encode_strict(s))
        .collect::<Result<Vec<_>>>()?;
    let out = translate(&s1, s2.as_ref(), &sources, &beam_options(cfg))?;
    Ok(out
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if let Some(w) = &t.warning {
                progress(&format!("line {}: {w}", i + 1));
            }
            let draft = tgt_vocab.decode(&t.draft().tokens).join(" ");
            match &t.refined {
                Some(r) => format!("{draft}\t{}", tgt_vocab.decode(&r.tokens).join(" ")),
                None => draft,
            }
        })
        .collect())
}

fn read_lines(path: &Path, field: fn(&[&str]) -> usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            fields[field(&fields)].split_whitespace().map(String::from).collect()
        })
        .collect())
}

/// Corpus BLEU of a hypothesis file against a reference file. Hypothesis
/// lines with TAB-separated fields are scored on their last field (the
/// refined output of `translate`); reference lines with several fields on
/// their second (the target of a corpus file).
pub fn cmd_evaluate(hyp: &Path, reference: &Path) -> Result<BleuReport> {
    let hyps = read_lines(hyp, |f| f.len() - 1)?;
    let refs = read_lines(reference, |f| if f.len() > 1 { 1 } else { 0 })?;
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            hyps.len(),
            reference.display(),
            refs.len()
        )));
    }
    bleu(&hyps, &refs)
}

// ---- full pipeline ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub stage1_bleu: f64,
    pub two_stage_bleu: f64,
    /// Sentences whose output equals the reference exactly.
    pub stage1_exact: usize,
    pub two_stage_exact: usize,
    pub test_size: usize,
    pub prefix_overlap: Option<f64>,
    pub stage1_best_val: Option<f64>,
    pub stage2_best_val: Option<f64>,
    pub empty_drafts: usize,
}

impl SeedResult {
    pub fn delta(&self) -> f64 {
        self.two_stage_bleu - self.stage1_bleu
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub config: Vec<(String, String)>,
    pub runs: Vec<SeedResult>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl PipelineReport {
    pub fn median_stage1(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.stage1_bleu).collect::<Vec<_>>())
    }

    pub fn median_two_stage(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.two_stage_bleu).collect::<Vec<_>>())
    }

    pub fn median_delta(&self) -> f64 {
        self.median_two_stage() - self.median_stage1()
    }

    /// A table with one row per system (BLEU ×100 per seed and the median),
    /// followed by `key=value` lines for machine consumption.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.runs.iter().map(|r| format!("seed {}", r.seed)).collect();
        let _ = write!(out, "{:<28}", "system");
        for s in &seeds {
            let _ = write!(out, "{s:>10}");
        }
        let _ = writeln!(out, "{:>10}", "median");
        let row = |out: &mut String, name: &str, vals: Vec<f64>| {
            let _ = write!(out, "{name:<28}");
            for v in &vals {
                let _ = write!(out, "{:>10.2}", 100.0 * v);
            }
            let _ = writeln!(out, "{:>10.2}", 100.0 * median(&vals));
        };
        row(
            &mut out,
            "stage 1 (attention)",
            self.runs.iter().map(|r| r.stage1_bleu).collect(),
        );
        row(
            &mut out,
            "two-stage (double attention)",
            self.runs.iter().map(|r| r.two_stage_bleu).collect(),
        );
        row(&mut out, "delta", self.runs.iter().map(SeedResult::delta).collect());
        let _ = writeln!(out);
        for r in &self.runs {
            let _ = writeln!(
                out,
                "seed={} stage1_bleu={:.6} two_stage_bleu={:.6} delta={:.6} stage1_exact={}/{} two_stage_exact={}/{} prefix_overlap={} empty_drafts={} stage1_best_val={} stage2_best_val={}",
                r.seed,
                r.stage1_bleu,
                r.two_stage_bleu,
                r.delta(),
                r.stage1_exact,
                r.test_size,
                r.two_stage_exact,
                r.test_size,
                r.prefix_overlap.map_or("none".into(), |v| format!("{v:.6}")),
                r.empty_drafts,
                r.stage1_best_val.map_or("none".into(), |v| format!("{v:.6}")),
                r.stage2_best_val.map_or("none".into(), |v| format!("{v:.6}")),
            );
        }
        let _ = writeln!(
            out,
            "median_stage1_bleu={:.6} median_two_stage_bleu={:.6} median_delta={:.6}",
            self.median_stage1(),
            self.median_two_stage(),
            self.median_delta()
        );
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        let _ = writeln!(out, "seeds={}", seeds.join(","));
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k}={v}");
        }
        out
    }
}

/// Runs every phase for each configured seed under `out_dir/seed-<seed>`
/// and writes `out_dir/report.txt`.
pub fn cmd_pipeline(cfg: &RunConfig, progress: Progress) -> Result<PipelineReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in cfg.run_seeds() {
        let mut c = cfg.clone();
        c.seed = seed;
        c.seeds.clear();
        c.out_dir = cfg.out_dir.join(format!("seed-{seed}"));
        let r = with_precision!(c.precision, run_seed(&c, &mut *progress))?;
        runs.push(r);
    }
    let report = PipelineReport {
        config: cfg.to_pairs(),
        runs,
    };
    write_file(&cfg.out_dir.join("report.txt"), &report.to_text())?;
    Ok(report)
}

fn exact(trans: &[Translation], refs: &[Vec<usize>], pick: fn(&Translation) -> &Hypothesis) -> usize {
    trans
        .iter()
        .zip(refs)
        .filter(|(t, r)| pick(t).content() == r.as_slice())
        .count()
}

/// One seed of the full pipeline.
pub fn run_seed<T: Real>(cfg: &RunConfig, progress: Progress) -> Result<SeedResult> {
    let dir = &cfg.out_dir;
    let mut clock = Instant::now();
    let mut lap = |progress: &mut dyn FnMut(&str), what: &str| {
        progress(&format!(
            "seed={} phase={what} seconds={:.1}",
            cfg.seed,
            clock.elapsed().as_secs_f64()
        ));
        clock = Instant::now();
    };

    let (train_set, dev_set, test_set) = phase(
        "generate",
        (|| {
            let train_set = generate(&cfg.corpus_spec(cfg.train_size), Split::Train)?;
            let dev_set = generate(&cfg.corpus_spec(cfg.dev_size), Split::Dev)?;
            let test_set = generate(&cfg.corpus_spec(cfg.test_size), Split::Test)?;
            train_set.write(&dir.join("train.tsv"))?;
            dev_set.write(&dir.join("dev.tsv"))?;
            test_set.write(&dir.join("test.tsv"))?;
            Ok((train_set, dev_set, test_set))
        })(),
    )?;

    let s1 = phase(
        "train-stage1",
        (|| {
            let s1 = train_stage1::<T>(cfg, &train_set, Some(&dev_set), progress)?;
            let info = SaveInfo {
                seed: cfg.seed,
                steps: s1.log.steps.len(),
                hyperparameters: hyperparameters(cfg),
                provenance: None,
            };
            let d = dir.join("stage1");
            checkpoint::save(
                &d,
                &AnyModel::Single(s1.model.clone()),
                &s1.src_vocab,
                &s1.tgt_vocab,
                &info,
            )?;
            write_file(&d.join("train.log"), &s1.log.to_text())?;
            Ok(s1)
        })(),
    )?;
    lap(progress, "train-stage1");

    let opts = beam_options(cfg);
    let (train_triples, dev_triples) = phase(
        "make-drafts",
        (|| {
            let t = make_drafts(
                &s1.model,
                &s1.src_vocab,
                &s1.tgt_vocab,
                &train_set,
                &opts,
                cfg.gold_draft,
            )?;
            let d = make_drafts(&s1.model, &s1.src_vocab, &s1.tgt_vocab, &dev_set, &opts, cfg.gold_draft)?;
            t.write(&dir.join("train.draft.tsv"))?;
            d.write(&dir.join("dev.draft.tsv"))?;
            Ok((t, d))
        })(),
    )?;
    lap(progress, "make-drafts");

    let (s2, log2) = phase(
        "train-stage2",
        (|| {
            let provenance = checkpoint::digest(&dir.join("stage1"))?;
            let (m, log) = train_stage2(
                cfg,
                &s1.model,
                &s1.src_vocab,
                &s1.tgt_vocab,
                &train_triples,
                Some(&dev_triples),
                progress,
            )?;
            let info = SaveInfo {
                seed: cfg.seed,
                steps: log.steps.len(),
                hyperparameters: hyperparameters(cfg),
                provenance: Some(provenance),
            };
            let d = dir.join("stage2");
            checkpoint::save(&d, &AnyModel::Double(m.clone()), &s1.src_vocab, &s1.tgt_vocab, &info)?;
            write_file(&d.join("train.log"), &log.to_text())?;
            Ok((m, log))
        })(),
    )?;
    lap(progress, "train-stage2");

    let result = phase(
        "translate",
        (|| {
            let sources = test_set
                .records
                .iter()
                .map(|r| s1.src_vocab.encode_strict(&r.source))
                .collect::<Result<Vec<_>>>()?;
            let refs = test_set
                .records
                .iter()
                .map(|r| s1.tgt_vocab.encode_strict(&r.target))
                .collect::<Result<Vec<_>>>()?;
            // With gold drafts, stage two is evaluated on reference drafts too.
            let trans: Vec<Translation> = if cfg.gold_draft {
                let mut t = translate(&s1.model, None, &sources, &opts)?;
                for ((tr, src), r) in t.iter_mut().zip(&sources).zip(&refs) {
                    tr.refined = Some(beam(&s2, src, Some(r), &opts)?.remove(0));
                }
                t
            } else {
                translate(&s1.model, Some(&s2), &sources, &opts)?
            };
            let decode = |h: &Hypothesis| s1.tgt_vocab.decode(&h.tokens);
            let drafts: Vec<Vec<String>> = trans.iter().map(|t| decode(t.draft())).collect();
            let refined: Vec<Vec<String>> = trans.iter().map(|t| decode(t.best())).collect();
            let lines = |v: &[Vec<String>]| v.iter().map(|s| s.join(" ") + "\n").collect::<String>();
            write_file(&dir.join("test.stage1.txt"), &lines(&drafts))?;
            write_file(&dir.join("test.two_stage.txt"), &lines(&refined))?;
            let targets: Vec<Vec<String>> = test_set.records.iter().map(|r| r.target.clone()).collect();
            let b1 = bleu(&drafts, &targets)?;
            let b2 = bleu(&refined, &targets)?;
            let best_val = |log: &TrainingLog| log.validations.iter().map(|v| v.loss).reduce(f64::min);
            Ok(SeedResult {
                seed: cfg.seed,
                stage1_bleu: b1.bleu,
                two_stage_bleu: b2.bleu,
                stage1_exact: exact(&trans, &refs, Translation::draft),
                two_stage_exact: exact(&trans, &refs, Translation::best),
                test_size: refs.len(),
                prefix_overlap: mean_prefix_overlap(&trans).0,
                stage1_best_val: best_val(&s1.log),
                stage2_best_val: best_val(&log2),
                empty_drafts: trans.iter().filter(|t| t.warning.is_some()).count(),
            })
        })(),
    )?;
    lap(progress, "translate");
    Ok(result)
}
