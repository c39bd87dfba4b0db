//! Flat `key=value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{GenerateSpec, Task};
use crate::error::{Error, Result};
use crate::models::ModelDims;
use crate::tensor::Precision;
use crate::training::TrainConfig;

/// Every configuration key with a one-line description. Config files and
/// command-line flags accept exactly these names.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "synthetic task: copy, reversal or agreement"),
    ("train_size", "training pairs to generate"),
    ("dev_size", "validation pairs to generate"),
    ("test_size", "test pairs to generate"),
    ("min_len", "shortest generated source"),
    ("max_len", "longest generated source"),
    ("vocab", "synthetic vocabulary size, reserved ids included"),
    ("embed", "word embedding width"),
    ("hidden", "GRU state width"),
    ("align", "attention alignment width"),
    ("readout", "readout layer width"),
    ("batch_size", "sentences per update"),
    ("learning_rate", "Adam step size for stage one"),
    (
        "stage2_learning_rate",
        "Adam step size for stage two (defaults to learning_rate)",
    ),
    ("steps", "stage-one update budget"),
    ("stage2_steps", "stage-two update budget"),
    ("clip", "global gradient-norm clip, 0 disables"),
    ("eval_every", "validation interval in updates, 0 means once per epoch"),
    ("beam", "beam width for drafts and translation"),
    ("length_normalize", "rank beam hypotheses by per-token score"),
    ("gold_draft", "use references instead of decoded drafts for stage two"),
    ("seed", "seed for data, initialization and shuffling"),
    ("seeds", "comma-separated seeds for the pipeline (defaults to seed)"),
    ("precision", "f32 or f64"),
    ("out_dir", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub align: usize,
    pub readout: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage2_learning_rate: Option<f64>,
    pub steps: usize,
    pub stage2_steps: usize,
    pub clip: f64,
    pub eval_every: usize,
    pub beam: usize,
    pub length_normalize: bool,
    pub gold_draft: bool,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Agreement,
            train_size: 5000,
            dev_size: 500,
            test_size: 500,
            min_len: 4,
            max_len: 10,
            vocab: 50,
            embed: 32,
            hidden: 64,
            align: 64,
            readout: 64,
            batch_size: 80,
            learning_rate: 1e-3,
            stage2_learning_rate: None,
            steps: 4000,
            stage2_steps: 4000,
            clip: 0.0,
            eval_every: 0,
            beam: 5,
            length_normalize: false,
            gold_draft: false,
            seed: 1,
            seeds: Vec::new(),
            precision: Precision::F32,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key} (true or false)"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "train_size" => self.train_size = parse(key, v)?,
            "dev_size" => self.dev_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "align" => self.align = parse(key, v)?,
            "readout" => self.readout = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "stage2_learning_rate" => self.stage2_learning_rate = Some(parse(key, v)?),
            "steps" => self.steps = parse(key, v)?,
            "stage2_steps" => self.stage2_steps = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "length_normalize" => self.length_normalize = parse_bool(key, v)?,
            "gold_draft" => self.gold_draft = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "precision" => self.precision = Precision::parse(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.embed, self.hidden, self.align, self.readout];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || self.stage2_learning_rate.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Config("clip must be non-negative".into()));
        }
        Ok(())
    }

    /// All settings as `key=value` pairs, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let values = [
            self.task.to_string(),
            self.train_size.to_string(),
            self.dev_size.to_string(),
            self.test_size.to_string(),
            self.min_len.to_string(),
            self.max_len.to_string(),
            self.vocab.to_string(),
            self.embed.to_string(),
            self.hidden.to_string(),
            self.align.to_string(),
            self.readout.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.stage2_learning_rate().to_string(),
            self.steps.to_string(),
            self.stage2_steps.to_string(),
            self.clip.to_string(),
            self.eval_every.to_string(),
            self.beam.to_string(),
            self.length_normalize.to_string(),
            self.gold_draft.to_string(),
            self.seed.to_string(),
            seeds.join(","),
            self.precision.as_str().to_string(),
            self.out_dir.display().to_string(),
        ];
        KEYS.iter().zip(values).map(|((k, _), v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn stage2_learning_rate(&self) -> f64 {
        self.stage2_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            embed: self.embed,
            hidden: self.hidden,
            align: self.align,
            readout: self.readout,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn corpus_spec(&self, count: usize) -> GenerateSpec {
        GenerateSpec {
            task: self.task,
            count,
            min_len: self.min_len,
            max_len: self.max_len,
            vocab_size: self.vocab,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let (lr, steps) = if stage == 1 {
            (self.learning_rate, self.steps)
        } else {
            (self.stage2_learning_rate(), self.stage2_steps)
        };
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: lr,
            steps,
            seed: self.seed,
            clip: (self.clip > 0.0).then_some(self.clip),
            eval_every: (self.eval_every > 0).then_some(self.eval_every),
            keep_best: true,
        }
    }
}
