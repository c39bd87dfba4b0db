//! Mini-batch teacher-forced training with Adam.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{forward_batch, Seq2Seq};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vocab::{EOS, PAD};

/// One training pair (or triple) in id form. `target` excludes the
/// end-of-sequence id; batching appends it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub draft: Option<Vec<usize>>,
    pub target: Vec<usize>,
}

/// Padded id matrices for one mini-batch.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub sources: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub drafts: Option<Vec<Vec<usize>>>,
    pub draft_lengths: Option<Vec<usize>>,
    /// Gold targets followed by end-of-sequence, padded.
    pub targets: Vec<Vec<usize>>,
    /// 1 for real target tokens (including end-of-sequence), 0 for padding.
    pub mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: &[Vec<usize>], width: usize) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, PAD);
            r
        })
        .collect()
}

impl TrainingBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let with_draft = examples[0].draft.is_some();
        if examples.iter().any(|e| e.draft.is_some() != with_draft) {
            return Err(Error::InvalidArgument("batch mixes pairs and triples".into()));
        }
        let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
        let targets: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| e.target.iter().copied().chain([EOS]).collect())
            .collect();
        let drafts: Option<Vec<Vec<usize>>> =
            with_draft.then(|| examples.iter().map(|e| e.draft.clone().unwrap_or_default()).collect());

        let source_lengths: Vec<usize> = sources.iter().map(Vec::len).collect();
        let draft_lengths = drafts.as_ref().map(|d| d.iter().map(Vec::len).collect::<Vec<_>>());
        let target_lengths: Vec<usize> = targets.iter().map(Vec::len).collect();
        let src_w = *source_lengths.iter().max().unwrap_or(&0);
        let tgt_w = *target_lengths.iter().max().unwrap_or(&0);
        let mask = target_lengths
            .iter()
            .map(|&l| (0..tgt_w).map(|t| t < l).collect())
            .collect();
        Ok(TrainingBatch {
            sources: pad_rows(&sources, src_w),
            source_lengths,
            drafts: drafts.as_ref().map(|d| {
                let w = d.iter().map(Vec::len).max().unwrap_or(0);
                pad_rows(d, w)
            }),
            draft_lengths,
            targets: pad_rows(&targets, tgt_w),
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Appends `extra` padding columns to the target side.
    pub fn pad_targets(&mut self, extra: usize) {
        for (row, m) in self.targets.iter_mut().zip(&mut self.mask) {
            row.extend(std::iter::repeat_n(PAD, extra));
            m.extend(std::iter::repeat_n(false, extra));
        }
    }

    fn unpadded(rows: &[Vec<usize>], lengths: &[usize]) -> Vec<Vec<usize>> {
        rows.iter().zip(lengths).map(|(r, &l)| r[..l].to_vec()).collect()
    }

    fn target_rows(&self) -> Vec<Vec<usize>> {
        self.targets
            .iter()
            .zip(&self.mask)
            .map(|(r, m)| r.iter().zip(m).filter(|(_, &m)| m).map(|(&t, _)| t).collect())
            .collect()
    }

    /// Real target tokens per sentence.
    pub fn token_counts(&self) -> Vec<usize> {
        self.mask.iter().map(|m| m.iter().filter(|&&x| x).count()).collect()
    }
}

/// Mean over sentences of each sentence's NLL divided by its real-token
/// count.
pub fn batch_loss<T: Real, M: Seq2Seq<T> + ?Sized>(model: &M, g: &mut Graph<T>, batch: &TrainingBatch) -> Result<Var> {
    let counts = batch.token_counts();
    if batch.is_empty() || counts.contains(&0) {
        return Err(Error::Empty("batch targets (all positions masked)"));
    }
    let b = T::of_f64(batch.len() as f64);
    let weights: Vec<T> = counts.iter().map(|&c| T::one() / (T::of_f64(c as f64) * b)).collect();
    let sources = TrainingBatch::unpadded(&batch.sources, &batch.source_lengths);
    let drafts = match (&batch.drafts, &batch.draft_lengths) {
        (Some(d), Some(l)) => Some(TrainingBatch::unpadded(d, l)),
        _ => None,
    };
    let fw = forward_batch(model, g, &sources, drafts.as_deref(), &batch.target_rows(), &weights)?;
    Ok(fw.loss)
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdamOutcome {
    Applied,
    /// A gradient block held a non-finite value; nothing was updated.
    Skipped {
        block: String,
    },
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.blocks().iter().map(|b| Tensor::zeros(b.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update of every non-frozen block.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<ParamId, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<AdamOutcome> {
    for (&id, g) in grads {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adam_step", params.get(id).shape(), g.shape()));
        }
        if !params.is_frozen(id) && !g.all_finite() {
            return Ok(AdamOutcome::Skipped {
                block: params.block(id).name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of_f64(state.beta1), T::of_f64(state.beta2));
    let c1 = T::of_f64(1.0 - state.beta1.powi(t));
    let c2 = T::of_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of_f64(state.lr), T::of_f64(state.eps));
    for (&id, g) in grads {
        if params.is_frozen(id) {
            continue;
        }
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = params.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(AdamOutcome::Applied)
}

/// Scales all non-frozen gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(
    params: &ParamStore<T>,
    grads: &mut BTreeMap<ParamId, Tensor<T>>,
    max_norm: f64,
) -> f64 {
    let sq: f64 = grads
        .iter()
        .filter(|(id, _)| !params.is_frozen(**id))
        .flat_map(|(_, g)| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Global-norm gradient clip; off by default.
    pub clip: Option<f64>,
    /// Validation interval in steps; defaults to one epoch.
    pub eval_every: Option<usize>,
    /// Keep the parameters with the best validation loss.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            learning_rate: 1e-3,
            steps: 1000,
            seed: 0,
            clip: None,
            eval_every: None,
            keep_best: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Step whose parameters were retained (best validation loss).
    pub best_step: Option<usize>,
    pub skipped: Vec<(usize, String)>,
}

impl TrainingLog {
    /// `key=value` lines: `step=… loss=…`, `step=… epoch=… val_loss=…`,
    /// `step=… skipped=…`, and a final `best_step=…`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut vals = self.validations.iter().peekable();
        for s in &self.steps {
            while let Some(v) = vals.next_if(|v| v.step < s.step) {
                let _ = writeln!(out, "step={} epoch={} val_loss={:.6}", v.step, v.epoch, v.loss);
            }
            let _ = writeln!(out, "step={} loss={:.6}", s.step, s.loss);
        }
        for v in vals {
            let _ = writeln!(out, "step={} epoch={} val_loss={:.6}", v.step, v.epoch, v.loss);
        }
        for (step, block) in &self.skipped {
            let _ = writeln!(out, "step={step} skipped={block}");
        }
        if let Some(b) = self.best_step {
            let _ = writeln!(out, "best_step={b}");
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Mean per-token NLL over a data set, evaluated in batches.
pub fn mean_token_nll<T: Real, M: Seq2Seq<T> + ?Sized>(model: &M, data: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = TrainingBatch::new(&refs)?;
        let sources = TrainingBatch::unpadded(&batch.sources, &batch.source_lengths);
        let drafts = match (&batch.drafts, &batch.draft_lengths) {
            (Some(d), Some(l)) => Some(TrainingBatch::unpadded(d, l)),
            _ => None,
        };
        let targets = batch.target_rows();
        let mut g = Graph::with_params(model.params());
        let ones = vec![T::one(); batch.len()];
        let fw = forward_batch(model, &mut g, &sources, drafts.as_deref(), &targets, &ones)?;
        total += g.value(fw.loss).item().as_f64();
        tokens += targets.iter().map(Vec::len).sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::Empty("validation set"));
    }
    Ok(total / tokens as f64)
}

/// Trains `model` in place for a fixed step budget.
///
/// Batches are drawn from a seeded permutation of `train` that is redrawn
/// every epoch. With a validation set, the loss on it is recorded at step 0
/// and every `eval_every` steps, and (when `keep_best`) the parameters with
/// the lowest validation loss are restored at the end.
pub fn train<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &mut M,
    train: &[Example],
    valid: Option<&[Example]>,
    config: &TrainConfig,
    mut progress: impl FnMut(&str),
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut epoch = 0;
    let per_epoch = train.len().div_ceil(config.batch_size);
    let eval_every = config.eval_every.unwrap_or(per_epoch).max(1);

    let mut adam = AdamState::new(model.params(), config.learning_rate);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;

    let mut validate =
        |model: &M, step: usize, epoch: usize, log: &mut TrainingLog, progress: &mut dyn FnMut(&str)| -> Result<()> {
            if let Some(valid) = valid {
                let loss = mean_token_nll(model, valid, config.batch_size)?;
                progress(&format!("step={step} epoch={epoch} val_loss={loss:.6}"));
                log.validations.push(ValidationRecord { step, epoch, loss });
                if config.keep_best && best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                    best = Some((loss, step, model.params().clone()));
                }
            }
            Ok(())
        };
    validate(model, 0, 0, &mut log, &mut progress)?;

    for step in 1..=config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let picked: Vec<&Example> = order[cursor..end].iter().map(|&i| &train[i]).collect();
        cursor = end;

        let batch = TrainingBatch::new(&picked)?;
        let mut g = Graph::with_params(model.params());
        let loss_var = batch_loss(model, &mut g, &batch)?;
        let loss = g.value(loss_var).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = g.backward(loss_var)?.into_params();
        drop(g);
        if let Some(max) = config.clip {
            clip_global_norm(model.params(), &mut grads, max);
        }
        if let AdamOutcome::Skipped { block } = adam_step(model.params_mut(), &grads, &mut adam)? {
            progress(&format!("step={step} skipped={block}"));
            log.skipped.push((step, block));
        }
        log.steps.push(StepRecord { step, loss });
        if step % 50 == 0 {
            progress(&format!("step={step} loss={loss:.6}"));
        }
        if step % eval_every == 0 || step == config.steps {
            validate(model, step, epoch + 1, &mut log, &mut progress)?;
        }
    }

    if let Some((_, step, params)) = best {
        let current = model.params_mut();
        for id in params.ids() {
            current.set(id, params.get(id).clone())?;
        }
        log.best_step = Some(step);
    }
    Ok(log)
}
