//! Synthetic parallel corpora and the TAB-separated corpus file format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::training::Example;
use crate::vocab::{Vocabulary, EOS, EOS_TOKEN, RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reversal,
    /// Target is the source followed by a closing token chosen by the
    /// parity of the sum of the source ids.
    Agreement,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reversal => "reversal",
            Task::Agreement => "agreement",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reversal" => Ok(Task::Reversal),
            "agreement" => Ok(Task::Agreement),
            _ => Err(Error::Config(format!("unknown task {s:?} (copy, reversal, agreement)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Data split; each draws from its own random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 10,
            Split::Dev => 11,
            Split::Test => 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub draft: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub records: Vec<Record>,
    pub task: Option<Task>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateSpec {
    pub task: Task,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

fn token(id: usize) -> String {
    format!("w{id}")
}

/// Closing ids for the agreement task: `(even, odd)`.
pub fn agreement_closers(vocab_size: usize) -> (usize, usize) {
    (vocab_size - 2, vocab_size - 1)
}

/// Agreement target ids for a source.
pub fn agreement_target(source: &[usize], vocab_size: usize) -> Vec<usize> {
    let (even, odd) = agreement_closers(vocab_size);
    let closer = if source.iter().sum::<usize>() % 2 == 0 {
        even
    } else {
        odd
    };
    source.iter().copied().chain([closer]).collect()
}

/// Generates one split. Sentences use the synthetic tokens `w4 … w{V-1}`
/// so they encode to their own ids under [`Vocabulary::synthetic`]. For the
/// agreement task the two highest ids are reserved as closing tokens.
pub fn generate(spec: &GenerateSpec, split: Split) -> Result<ParallelCorpus> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("corpus count must be at least 1".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let content_end = match spec.task {
        Task::Agreement => spec.vocab_size.saturating_sub(2),
        _ => spec.vocab_size,
    };
    if spec.vocab_size <= RESERVED || content_end <= RESERVED + 1 {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {} too small for the {} task",
            spec.vocab_size, spec.task
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let records = (0..spec.count)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED..content_end)).collect();
            let tgt: Vec<usize> = match spec.task {
                Task::Copy => src.clone(),
                Task::Reversal => src.iter().rev().copied().collect(),
                Task::Agreement => agreement_target(&src, spec.vocab_size),
            };
            Record {
                source: src.into_iter().map(token).collect(),
                target: tgt.into_iter().map(token).collect(),
                draft: None,
            }
        })
        .collect();
    Ok(ParallelCorpus {
        records,
        task: Some(spec.task),
        seed: Some(spec.seed),
    })
}

/// Drafts may contain the end-of-sequence marker: an empty first-stage
/// output is written as a lone `</s>`.
fn encode_draft(vocab: &Vocabulary, draft: &[String]) -> Result<Vec<usize>> {
    draft
        .iter()
        .map(|t| {
            if t == EOS_TOKEN {
                Ok(EOS)
            } else {
                vocab.encode_strict(std::slice::from_ref(t)).map(|v| v[0])
            }
        })
        .collect()
}

fn parse_field(field: &str, path: &Path, line: usize, what: &str) -> Result<Vec<String>> {
    let toks: Vec<String> = field.split_whitespace().map(str::to_string).collect();
    if toks.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("empty {what} field"),
        });
    }
    Ok(toks)
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_drafts(&self) -> bool {
        self.records.first().is_some_and(|r| r.draft.is_some())
    }

    /// Parses `source TAB target [TAB draft]` lines. Every line must have
    /// the same number of fields.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: n,
                    msg: format!("expected 2 or 3 TAB-separated fields, found {}", fields.len()),
                });
            }
            if *width.get_or_insert(fields.len()) != fields.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: n,
                    msg: "field count differs from earlier lines".into(),
                });
            }
            records.push(Record {
                source: parse_field(fields[0], path, n, "source")?,
                target: parse_field(fields[1], path, n, "target")?,
                draft: fields.get(2).map(|f| parse_field(f, path, n, "draft")).transpose()?,
            });
        }
        if records.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "corpus has no records".into(),
            });
        }
        Ok(ParallelCorpus {
            records,
            task: None,
            seed: None,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.source.join(" "));
            out.push('\t');
            out.push_str(&r.target.join(" "));
            if let Some(d) = &r.draft {
                out.push('\t');
                out.push_str(&d.join(" "));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Vocabulary over all source and target tokens.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(
            self.records
                .iter()
                .flat_map(|r| r.source.iter().chain(&r.target))
                .map(String::as_str),
        )
    }

    /// Id form; unknown tokens fail with a vocabulary mismatch.
    pub fn examples(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| {
                Ok(Example {
                    source: src.encode_strict(&r.source)?,
                    target: tgt.encode_strict(&r.target)?,
                    draft: r.draft.as_ref().map(|d| encode_draft(tgt, d)).transpose()?,
                })
            })
            .collect()
    }
}
