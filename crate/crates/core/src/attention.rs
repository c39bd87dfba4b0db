//! Additive attention: `e_i = vᵀ tanh(W s + U h_i)`, softmax weights and
//! the weighted context vector.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::AnnotationSequence;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// Decoder state projection, `state × align`.
    pub w_state: ParamId,
    /// Annotation projection, `annotation × align`.
    pub w_ann: ParamId,
    /// Scoring vector, `align × 1`.
    pub v: ParamId,
    pub state: usize,
    pub annotation: usize,
    pub align: usize,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state: usize,
        annotation: usize,
        align: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            w_state: store.add_uniform(format!("{prefix}.w_state"), &[state, align], rng),
            w_ann: store.add_uniform(format!("{prefix}.w_ann"), &[annotation, align], rng),
            v: store.add_uniform(format!("{prefix}.v"), &[align, 1], rng),
            state,
            annotation,
            align,
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_state, self.w_ann, self.v]
    }
}

/// `U h_i` for every position; independent of the decoder state, so it is
/// computed once per sentence.
#[derive(Clone, Debug)]
pub struct AttentionKeys {
    pub keys: Vec<Var>,
}

pub fn project_annotations<T: Real>(
    g: &mut Graph<T>,
    annotations: &AnnotationSequence,
    p: &AttentionParams,
) -> Result<AttentionKeys> {
    if annotations.is_empty() {
        return Err(Error::Empty("attention"));
    }
    let keys = annotations
        .positions
        .iter()
        .map(|&h| {
            if g.value(h).cols() != p.annotation {
                return Err(Error::shape("attention", g.shape(h), &[p.annotation]));
            }
            g.matmul(h, g.p(p.w_ann))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionKeys { keys })
}

/// Alignment energies against precomputed keys. `W s_prev` is evaluated once
/// and shared by every position. Returns `[B × T]` (or `[T]` for a vector
/// state).
pub fn energies_with_keys<T: Real>(
    g: &mut Graph<T>,
    s_prev: Var,
    keys: &AttentionKeys,
    p: &AttentionParams,
) -> Result<Var> {
    if g.value(s_prev).cols() != p.state {
        return Err(Error::shape("energies", g.shape(s_prev), &[p.state]));
    }
    let ws = g.matmul(s_prev, g.p(p.w_state))?;
    let rows = g.value(ws).rows();
    let mut scores = Vec::with_capacity(keys.keys.len());
    for &k in &keys.keys {
        let pre = if g.value(k).rows() == rows && g.value(k).rank() == g.value(ws).rank() {
            g.add(ws, k)?
        } else {
            g.add_row(ws, k)?
        };
        let act = g.tanh(pre);
        scores.push(g.matmul(act, g.p(p.v))?);
    }
    g.concat(&scores)
}

pub fn energies<T: Real>(
    g: &mut Graph<T>,
    s_prev: Var,
    annotations: &AnnotationSequence,
    p: &AttentionParams,
) -> Result<Var> {
    let keys = project_annotations(g, annotations, p)?;
    energies_with_keys(g, s_prev, &keys, p)
}

/// Softmax over positions; padded positions (mask false) get weight 0.
pub fn weights<T: Real>(g: &mut Graph<T>, energies: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) => g.masked_softmax(energies, m),
        None => g.softmax(energies),
    }
}

/// `c = Σ_i α_i h_i`.
pub fn context<T: Real>(g: &mut Graph<T>, weights: Var, annotations: &AnnotationSequence) -> Result<Var> {
    if g.value(weights).cols() != annotations.len() {
        return Err(Error::shape("context", g.shape(weights), &[annotations.len()]));
    }
    g.weighted_sum(weights, &annotations.positions)
}

/// `[c_src ; c_draft]`, source context first.
pub fn dual_context<T: Real>(g: &mut Graph<T>, c1: Var, c2: Var) -> Result<Var> {
    g.concat(&[c1, c2])
}

/// Energies, weights and context for one decoding step.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    s_prev: Var,
    annotations: &AnnotationSequence,
    keys: &AttentionKeys,
    p: &AttentionParams,
) -> Result<Attended> {
    let energies = energies_with_keys(g, s_prev, keys, p)?;
    let mask = annotations.flat_mask();
    let weights = weights(g, energies, mask.as_deref())?;
    let context = context(g, weights, annotations)?;
    Ok(Attended {
        energies,
        weights,
        context,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub energies: Var,
    pub weights: Var,
    pub context: Var,
}
