//! The stage-one single-attention model, the stage-two double-attention
//! model, and embedding inheritance between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, dual_context, project_annotations, Attended, AttentionKeys, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::decoder::{self, init_double, init_single, DecoderParams, DecoderState};
use crate::encoder::{embed_batch, encode_padded, AnnotationSequence, GruParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;
use crate::vocab::BOS;

/// Widths shared by both stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Word embedding width `d`.
    pub embed: usize,
    /// GRU state width `n` (annotations are `2n`).
    pub hidden: usize,
    /// Attention alignment width `a`.
    pub align: usize,
    /// Readout width `r`.
    pub readout: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.embed, self.hidden, self.align, self.readout];
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model widths must be positive: {self:?}"
            )));
        }
        if self.src_vocab <= crate::vocab::RESERVED || self.tgt_vocab <= crate::vocab::RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabularies must exceed the {} reserved ids: {self:?}",
                crate::vocab::RESERVED
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Single,
    Double,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Single => "single",
            ModelKind::Double => "double",
        }
    }
}

/// Everything a decoder step needs from the encoder side.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub channels: Vec<(AnnotationSequence, AttentionKeys)>,
    pub init: DecoderState,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    /// `[B × V]` log-probabilities.
    pub log_probs: Var,
    /// One entry per attention channel, source first.
    pub attention: Vec<Attended>,
}

/// Behaviour shared by both stages: batched encoding and one decoder step.
pub trait Seq2Seq<T: Real> {
    fn kind(&self) -> ModelKind;
    fn dims(&self) -> &ModelDims;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Encodes a batch of sources (and drafts for the double model). Rows
    /// may have different lengths.
    fn encode(&self, g: &mut Graph<T>, sources: &[Vec<usize>], drafts: Option<&[Vec<usize>]>) -> Result<Encoded>;

    /// Attends, advances the state with `prev_tokens` and reads out the next
    /// distribution. `prev_tokens.len()` may differ from the encoded batch
    /// only when the encoded batch has a single row (beam search).
    fn decode_step(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        prev_tokens: &[usize],
        state: &DecoderState,
    ) -> Result<StepOutput>;

    fn needs_draft(&self) -> bool {
        self.kind() == ModelKind::Double
    }
}

fn check_ids(ids: &[usize], vocab: usize, what: &'static str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Empty(what));
    }
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&bad) => Err(Error::OutOfRange {
            op: what,
            index: bad,
            bound: vocab,
        }),
        None => Ok(()),
    }
}

fn encode_side<T: Real>(
    g: &mut Graph<T>,
    table: ParamId,
    vocab: usize,
    what: &'static str,
    batch: &[Vec<usize>],
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<AnnotationSequence> {
    if batch.is_empty() {
        return Err(Error::Empty(what));
    }
    for s in batch {
        check_ids(s, vocab, what)?;
    }
    let (xs, lens) = embed_batch(g, table, batch)?;
    encode_padded(g, &xs, Some(&lens), fwd, bwd)
}

fn decoder_input<T: Real>(g: &mut Graph<T>, table: ParamId, vocab: usize, prev: &[usize]) -> Result<Var> {
    check_ids(prev, vocab, "previous token")?;
    g.gather_rows(g.p(table), prev)
}

/// Stage one: bidirectional GRU encoder, additive attention, GRU decoder.
#[derive(Clone, Debug)]
pub struct SingleAttentionModel<T> {
    pub params: ParamStore<T>,
    pub dims: ModelDims,
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
    pub w_init: ParamId,
}

impl<T: Real> SingleAttentionModel<T> {
    /// Fresh model with every block drawn uniformly from `[-0.08, 0.08]`.
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            embed: d,
            hidden: n,
            align: a,
            readout: r,
            src_vocab,
            tgt_vocab,
        } = dims;
        let mut ps = ParamStore::new();
        let src_embed = ps.add_uniform("src_embed", &[src_vocab, d], rng);
        let tgt_embed = ps.add_uniform("tgt_embed", &[tgt_vocab, d], rng);
        let enc_fwd = GruParams::new(&mut ps, "enc.fwd", d, n, rng);
        let enc_bwd = GruParams::new(&mut ps, "enc.bwd", d, n, rng);
        let attention = AttentionParams::new(&mut ps, "att", n, 2 * n, a, rng);
        let decoder = DecoderParams::new(&mut ps, "dec", d, 2 * n, n, r, tgt_vocab, rng);
        let w_init = ps.add_uniform("dec.w_init", &[n, n], rng);
        Ok(SingleAttentionModel {
            params: ps,
            dims,
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            attention,
            decoder,
            w_init,
        })
    }

    pub fn cast<U: Real>(&self) -> SingleAttentionModel<U> {
        SingleAttentionModel {
            params: self.params.cast(),
            dims: self.dims.clone(),
            src_embed: self.src_embed,
            tgt_embed: self.tgt_embed,
            enc_fwd: self.enc_fwd.clone(),
            enc_bwd: self.enc_bwd.clone(),
            attention: self.attention.clone(),
            decoder: self.decoder.clone(),
            w_init: self.w_init,
        }
    }
}

impl<T: Real> Seq2Seq<T> for SingleAttentionModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Single
    }

    fn dims(&self) -> &ModelDims {
        &self.dims
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn encode(&self, g: &mut Graph<T>, sources: &[Vec<usize>], drafts: Option<&[Vec<usize>]>) -> Result<Encoded> {
        if drafts.is_some() {
            return Err(Error::InvalidArgument(
                "the single-attention model takes no draft".into(),
            ));
        }
        let ann = encode_side(
            g,
            self.src_embed,
            self.dims.src_vocab,
            "source",
            sources,
            &self.enc_fwd,
            &self.enc_bwd,
        )?;
        let keys = project_annotations(g, &ann, &self.attention)?;
        let init = init_single(g, &ann, self.w_init)?;
        Ok(Encoded {
            channels: vec![(ann, keys)],
            init,
        })
    }

    fn decode_step(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        prev_tokens: &[usize],
        state: &DecoderState,
    ) -> Result<StepOutput> {
        let y = decoder_input(g, self.tgt_embed, self.dims.tgt_vocab, prev_tokens)?;
        let (ann, keys) = &enc.channels[0];
        let att = attend(g, state.hidden, ann, keys, &self.attention)?;
        let next = decoder::step(g, y, state, att.context, &self.decoder)?;
        let log_probs = decoder::readout(g, y, next.hidden, att.context, &self.decoder)?;
        Ok(StepOutput {
            state: next,
            log_probs,
            attention: vec![att],
        })
    }
}

/// Stage two: separate encoders for the source and the draft, one attention
/// channel per input, and a decoder fed the concatenated `4n` context.
#[derive(Clone, Debug)]
pub struct DoubleAttentionModel<T> {
    pub params: ParamStore<T>,
    pub dims: ModelDims,
    pub src_embed: ParamId,
    /// Embeddings for draft tokens (target language).
    pub draft_embed: ParamId,
    /// Embeddings for the decoder's previous output token.
    pub tgt_embed: ParamId,
    pub src_fwd: GruParams,
    pub src_bwd: GruParams,
    pub draft_fwd: GruParams,
    pub draft_bwd: GruParams,
    pub att_src: AttentionParams,
    pub att_draft: AttentionParams,
    pub decoder: DecoderParams,
}

impl<T: Real> DoubleAttentionModel<T> {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            embed: d,
            hidden: n,
            align: a,
            readout: r,
            src_vocab,
            tgt_vocab,
        } = dims;
        let mut ps = ParamStore::new();
        let src_embed = ps.add_uniform("src_embed", &[src_vocab, d], rng);
        let draft_embed = ps.add_uniform("draft_embed", &[tgt_vocab, d], rng);
        let tgt_embed = ps.add_uniform("tgt_embed", &[tgt_vocab, d], rng);
        let src_fwd = GruParams::new(&mut ps, "enc1.fwd", d, n, rng);
        let src_bwd = GruParams::new(&mut ps, "enc1.bwd", d, n, rng);
        let draft_fwd = GruParams::new(&mut ps, "enc2.fwd", d, n, rng);
        let draft_bwd = GruParams::new(&mut ps, "enc2.bwd", d, n, rng);
        let att_src = AttentionParams::new(&mut ps, "att1", n, 2 * n, a, rng);
        let att_draft = AttentionParams::new(&mut ps, "att2", n, 2 * n, a, rng);
        let decoder = DecoderParams::new(&mut ps, "dec", d, 4 * n, n, r, tgt_vocab, rng);
        Ok(DoubleAttentionModel {
            params: ps,
            dims,
            src_embed,
            draft_embed,
            tgt_embed,
            src_fwd,
            src_bwd,
            draft_fwd,
            draft_bwd,
            att_src,
            att_draft,
            decoder,
        })
    }

    /// Builds a stage-two model from a stage-one model: the source table and
    /// two copies of the target table are inherited and frozen; every other
    /// block is freshly initialized from `rng`.
    pub fn inherit<R: Rng>(stage1: &SingleAttentionModel<T>, dims: &ModelDims, rng: &mut R) -> Result<Self> {
        if dims.src_vocab != stage1.dims.src_vocab || dims.tgt_vocab != stage1.dims.tgt_vocab {
            return Err(Error::VocabMismatch(format!(
                "stage-1 vocabularies {}/{} vs requested {}/{}",
                stage1.dims.src_vocab, stage1.dims.tgt_vocab, dims.src_vocab, dims.tgt_vocab
            )));
        }
        if dims.embed != stage1.dims.embed {
            return Err(Error::shape("inherit", &[stage1.dims.embed], &[dims.embed]));
        }
        let mut model = Self::new(dims.clone(), rng)?;
        let src = stage1.params.get(stage1.src_embed).clone();
        let tgt = stage1.params.get(stage1.tgt_embed).clone();
        model.params.set(model.src_embed, src)?;
        model.params.set(model.draft_embed, tgt.clone())?;
        model.params.set(model.tgt_embed, tgt)?;
        for id in model.embedding_ids() {
            model.params.set_frozen(id, true);
        }
        Ok(model)
    }

    pub fn embedding_ids(&self) -> [ParamId; 3] {
        [self.src_embed, self.draft_embed, self.tgt_embed]
    }

    pub fn cast<U: Real>(&self) -> DoubleAttentionModel<U> {
        DoubleAttentionModel {
            params: self.params.cast(),
            dims: self.dims.clone(),
            src_embed: self.src_embed,
            draft_embed: self.draft_embed,
            tgt_embed: self.tgt_embed,
            src_fwd: self.src_fwd.clone(),
            src_bwd: self.src_bwd.clone(),
            draft_fwd: self.draft_fwd.clone(),
            draft_bwd: self.draft_bwd.clone(),
            att_src: self.att_src.clone(),
            att_draft: self.att_draft.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

impl<T: Real> Seq2Seq<T> for DoubleAttentionModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Double
    }

    fn dims(&self) -> &ModelDims {
        &self.dims
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn encode(&self, g: &mut Graph<T>, sources: &[Vec<usize>], drafts: Option<&[Vec<usize>]>) -> Result<Encoded> {
        let drafts = drafts.ok_or_else(|| Error::InvalidArgument("the double-attention model needs a draft".into()))?;
        if drafts.len() != sources.len() {
            return Err(Error::shape("encode", &[sources.len()], &[drafts.len()]));
        }
        let src = encode_side(
            g,
            self.src_embed,
            self.dims.src_vocab,
            "source",
            sources,
            &self.src_fwd,
            &self.src_bwd,
        )?;
        let draft = encode_side(
            g,
            self.draft_embed,
            self.dims.tgt_vocab,
            "draft",
            drafts,
            &self.draft_fwd,
            &self.draft_bwd,
        )?;
        let k1 = project_annotations(g, &src, &self.att_src)?;
        let k2 = project_annotations(g, &draft, &self.att_draft)?;
        let init = init_double(g, &src, &draft)?;
        Ok(Encoded {
            channels: vec![(src, k1), (draft, k2)],
            init,
        })
    }

    fn decode_step(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        prev_tokens: &[usize],
        state: &DecoderState,
    ) -> Result<StepOutput> {
        let y = decoder_input(g, self.tgt_embed, self.dims.tgt_vocab, prev_tokens)?;
        let (a1, k1) = &enc.channels[0];
        let (a2, k2) = &enc.channels[1];
        let att1 = attend(g, state.hidden, a1, k1, &self.att_src)?;
        let att2 = attend(g, state.hidden, a2, k2, &self.att_draft)?;
        let context = dual_context(g, att1.context, att2.context)?;
        let next = decoder::step(g, y, state, context, &self.decoder)?;
        let log_probs = decoder::readout(g, y, next.hidden, context, &self.decoder)?;
        Ok(StepOutput {
            state: next,
            log_probs,
            attention: vec![att1, att2],
        })
    }
}

/// Teacher-forced pass over a batch. `weights[b]` scales every real target
/// token of row `b`; padded steps contribute exactly zero.
pub struct BatchForward {
    pub loss: Var,
    /// Log-probability of each gold token, per sentence.
    pub token_log_probs: Vec<Vec<f64>>,
    /// Per-step decoder outputs, for instrumentation.
    pub steps: Vec<StepOutput>,
}

pub fn forward_batch<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    sources: &[Vec<usize>],
    drafts: Option<&[Vec<usize>]>,
    targets: &[Vec<usize>],
    weights: &[T],
) -> Result<BatchForward> {
    if targets.len() != sources.len() || weights.len() != sources.len() {
        return Err(Error::shape("forward", &[sources.len()], &[targets.len()]));
    }
    for t in targets {
        check_ids(t, model.dims().tgt_vocab, "target")?;
    }
    let enc = model.encode(g, sources, drafts)?;
    let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
    let mut prev = vec![BOS; targets.len()];
    let mut state = enc.init;
    let mut loss: Option<Var> = None;
    let mut token_log_probs = vec![Vec::new(); targets.len()];
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let out = model.decode_step(g, &enc, &prev, &state)?;
        let gold: Vec<usize> = targets.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
        let w: Vec<T> = targets
            .iter()
            .zip(weights)
            .map(|(s, &w)| if t < s.len() { w } else { T::zero() })
            .collect();
        let step_nll = g.pick_nll(out.log_probs, &gold, &w)?;
        loss = Some(match loss {
            Some(l) => g.add(l, step_nll)?,
            None => step_nll,
        });
        let lp = g.value(out.log_probs);
        for (b, s) in targets.iter().enumerate() {
            if t < s.len() {
                token_log_probs[b].push(lp.at(b, gold[b]).as_f64());
            }
        }
        prev = gold;
        state = out.state;
        outputs.push(out);
    }
    Ok(BatchForward {
        loss: loss.ok_or(Error::Empty("target"))?,
        token_log_probs,
        steps: outputs,
    })
}

/// Teacher-forced result for one sentence pair.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub step_log_probs: Vec<f64>,
    /// `−Σ_t log p(y_t | y_<t, …)`.
    pub nll: f64,
}

/// Stage-one teacher-forced NLL of `tgt` (which should already end with
/// the end-of-sequence id when one is wanted).
pub fn forward_single<T: Real>(model: &SingleAttentionModel<T>, src: &[usize], tgt: &[usize]) -> Result<ForwardResult> {
    forced(model, src, None, tgt)
}

/// Stage-two teacher-forced NLL conditioned on source and draft.
pub fn forward_double<T: Real>(
    model: &DoubleAttentionModel<T>,
    src: &[usize],
    draft: &[usize],
    tgt: &[usize],
) -> Result<ForwardResult> {
    forced(model, src, Some(draft), tgt)
}

/// Teacher-forced scoring through any model.
pub fn forced<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    src: &[usize],
    draft: Option<&[usize]>,
    tgt: &[usize],
) -> Result<ForwardResult> {
    let mut g = Graph::with_params(model.params());
    let drafts = draft.map(|d| vec![d.to_vec()]);
    let fw = forward_batch(
        model,
        &mut g,
        &[src.to_vec()],
        drafts.as_deref(),
        &[tgt.to_vec()],
        &[T::one()],
    )?;
    let step_log_probs = fw.token_log_probs.into_iter().next().unwrap_or_default();
    let nll = -step_log_probs.iter().sum::<f64>();
    Ok(ForwardResult { step_log_probs, nll })
}
