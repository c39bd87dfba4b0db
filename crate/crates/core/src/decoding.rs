//! Greedy and beam-search decoding, and the beam prefix-sharing diagnostic.

use std::cmp::Ordering;

use crate::autodiff::Graph;
use crate::decoder::DecoderState;
use crate::error::{Error, Result};
use crate::models::Seq2Seq;
use crate::tensor::Real;
use crate::vocab::{BOS, EOS};

/// Default output cap for a source of `src_len` tokens.
pub fn max_output_len(src_len: usize) -> usize {
    2 * src_len + 5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, ending with end-of-sequence when `finished`.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of `tokens`.
    pub score: f64,
    /// Decoder hidden state after the last token.
    pub state: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing end-of-sequence id.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BeamOptions {
    pub width: usize,
    /// Rank by score divided by length instead of raw score.
    pub length_normalize: bool,
    /// Overrides the `2·T_src + 5` cap.
    pub max_len: Option<usize>,
}

impl BeamOptions {
    pub fn new(width: usize) -> Self {
        BeamOptions {
            width,
            length_normalize: false,
            max_len: None,
        }
    }
}

fn check_inputs<T: Real, M: Seq2Seq<T> + ?Sized>(model: &M, src: &[usize], draft: Option<&[usize]>) -> Result<()> {
    if src.is_empty() {
        return Err(Error::Empty("source"));
    }
    match (model.needs_draft(), draft) {
        (true, None) => Err(Error::InvalidArgument(
            "the double-attention model needs a draft".into(),
        )),
        (false, Some(_)) => Err(Error::InvalidArgument(
            "the single-attention model takes no draft".into(),
        )),
        (true, Some([])) => Err(Error::Empty("draft")),
        _ => Ok(()),
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of one sentence.
pub fn greedy<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    src: &[usize],
    draft: Option<&[usize]>,
) -> Result<Hypothesis> {
    let drafts = draft.map(|d| vec![d.to_vec()]);
    let mut out = greedy_batch(model, &[src.to_vec()], drafts.as_deref())?;
    Ok(out.remove(0))
}

/// Greedy decoding of a batch, stepping all sentences together. Each row
/// stops at its own end-of-sequence or length cap.
pub fn greedy_batch<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    sources: &[Vec<usize>],
    drafts: Option<&[Vec<usize>]>,
) -> Result<Vec<Hypothesis>> {
    if sources.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(d) = drafts {
        if d.len() != sources.len() {
            return Err(Error::shape("greedy_batch", &[sources.len()], &[d.len()]));
        }
    }
    for (i, s) in sources.iter().enumerate() {
        check_inputs(model, s, drafts.map(|d| d[i].as_slice()))?;
    }
    let caps: Vec<usize> = sources.iter().map(|s| max_output_len(s.len())).collect();
    let mut g = Graph::with_params(model.params());
    let enc = model.encode(&mut g, sources, drafts)?;
    let mut state = enc.init;
    let mut prev = vec![BOS; sources.len()];
    let mut hyps: Vec<Hypothesis> = (0..sources.len())
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            state: Vec::new(),
            finished: false,
        })
        .collect();
    let mut t = 0;
    while hyps.iter().zip(&caps).any(|(h, &c)| !h.finished && t < c) {
        let out = model.decode_step(&mut g, &enc, &prev, &state)?;
        let lp = g.value(out.log_probs);
        let hidden = g.value(out.state.hidden);
        for (b, h) in hyps.iter_mut().enumerate() {
            if h.finished || t >= caps[b] {
                prev[b] = EOS;
                continue;
            }
            let row = lp.row(b);
            let w = argmax(row);
            h.tokens.push(w);
            h.score += row[w].as_f64();
            h.state = hidden.row(b).iter().map(|x| x.as_f64()).collect();
            h.finished = w == EOS;
            prev[b] = w;
        }
        state = out.state;
        t += 1;
    }
    Ok(hyps)
}

fn rank_key(h: &Hypothesis, normalize: bool) -> f64 {
    if normalize {
        h.score / h.tokens.len().max(1) as f64
    } else {
        h.score
    }
}

fn rank(hyps: &mut [Hypothesis], normalize: bool) {
    hyps.sort_by(|a, b| {
        rank_key(b, normalize)
            .partial_cmp(&rank_key(a, normalize))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Beam search. Returns at most `width` hypotheses, best first; if the
/// length cap is hit before `width` have finished, the surviving live
/// hypotheses are included unfinished.
pub fn beam<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    src: &[usize],
    draft: Option<&[usize]>,
    opts: &BeamOptions,
) -> Result<Vec<Hypothesis>> {
    if opts.width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    check_inputs(model, src, draft)?;
    let cap = opts.max_len.unwrap_or_else(|| max_output_len(src.len()));
    let drafts = draft.map(|d| vec![d.to_vec()]);
    let mut g = Graph::with_params(model.params());
    let enc = model.encode(&mut g, &[src.to_vec()], drafts.as_deref())?;

    let mut state: DecoderState = enc.init;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cap {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let out = model.decode_step(&mut g, &enc, &prev, &state)?;
        let lp = g.value(out.log_probs);

        // (score, parent, token), ordered by score then parent then token.
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp.cols());
        for (i, h) in live.iter().enumerate() {
            for (w, &x) in lp.row(i).iter().enumerate() {
                cands.push((h.score + x.as_f64(), i, w));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(opts.width);

        let hidden = g.value(out.state.hidden);
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for &(score, parent, w) in &cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(w);
            let h = Hypothesis {
                tokens,
                score,
                state: hidden.row(parent).iter().map(|x| x.as_f64()).collect(),
                finished: w == EOS,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
                parents.push(parent);
            }
        }
        if finished.len() >= opts.width || next.is_empty() {
            live = next;
            break;
        }
        let hidden = g.gather_rows(out.state.hidden, &parents)?;
        state = DecoderState {
            hidden,
            step: out.state.step,
        };
        live = next;
    }

    if finished.len() < opts.width {
        finished.extend(live);
    }
    rank(&mut finished, opts.length_normalize);
    finished.truncate(opts.width);
    Ok(finished)
}

/// Mean over hypothesis pairs of the longest common prefix length divided
/// by the shorter length. Trailing end-of-sequence ids are ignored; a pair
/// whose shorter member is empty counts as fully shared.
pub fn prefix_overlap(hyps: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "prefix overlap needs at least 2 hypotheses, got {}",
            hyps.len()
        )));
    }
    let strip = |h: &[usize]| -> usize {
        if h.last() == Some(&EOS) {
            h.len() - 1
        } else {
            h.len()
        }
    };
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..hyps.len() {
        for j in i + 1..hyps.len() {
            let (a, b) = (&hyps[i][..strip(&hyps[i])], &hyps[j][..strip(&hyps[j])]);
            let shorter = a.len().min(b.len());
            let lcp = a.iter().zip(b).take_while(|(x, y)| x == y).count();
            total += if shorter == 0 { 1.0 } else { lcp as f64 / shorter as f64 };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub draft: Hypothesis,
    pub refined: Hypothesis,
    pub warning: Option<String>,
}

/// Best stage-one beam hypothesis, then the best stage-two hypothesis given
/// that draft.
pub fn two_stage_translate<T: Real, S1: Seq2Seq<T> + ?Sized, S2: Seq2Seq<T> + ?Sized>(
    stage1: &S1,
    stage2: &S2,
    src: &[usize],
    opts: &BeamOptions,
) -> Result<TwoStageOutput> {
    if stage1.dims().src_vocab != stage2.dims().src_vocab || stage1.dims().tgt_vocab != stage2.dims().tgt_vocab {
        return Err(Error::VocabMismatch(
            "stage-one and stage-two vocabulary sizes differ".into(),
        ));
    }
    let draft = beam(stage1, src, None, opts)?.remove(0);
    let (draft_ids, warning) = if draft.content().is_empty() {
        (
            vec![EOS],
            Some("empty draft; refining from a lone end-of-sequence token".to_string()),
        )
    } else {
        (draft.content().to_vec(), None)
    };
    let refined = beam(stage2, src, Some(&draft_ids), opts)?.remove(0);
    Ok(TwoStageOutput {
        draft,
        refined,
        warning,
    })
}

/// Runs `job` over `items` on all available cores, preserving order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], job: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(job).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&job).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decoding worker panicked"))
            .collect()
    })
}
