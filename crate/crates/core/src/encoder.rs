//! GRU cell and bidirectional encoder.
//!
//! Inputs are row batches: `[B × d_in]` per position, or a plain vector for
//! a single sentence. Weights are stored input-major (`d_in × n`) so a row
//! batch multiplies on the left.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// The nine blocks of a gated recurrent unit.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, shape: &[usize]| store.add_uniform(format!("{prefix}.{name}"), shape, rng);
        GruParams {
            w_z: w("w_z", &[input, hidden]),
            u_z: w("u_z", &[hidden, hidden]),
            b_z: w("b_z", &[hidden]),
            w_r: w("w_r", &[input, hidden]),
            u_r: w("u_r", &[hidden, hidden]),
            b_r: w("b_r", &[hidden]),
            w_h: w("w_h", &[input, hidden]),
            u_h: w("u_h", &[hidden, hidden]),
            b_h: w("b_h", &[hidden]),
            input,
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }

    /// Checks that the stored blocks agree with `(input, hidden)`.
    pub fn validate<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let (d, n) = (self.input, self.hidden);
        let expect = [
            (self.w_z, vec![d, n]),
            (self.u_z, vec![n, n]),
            (self.b_z, vec![n]),
            (self.w_r, vec![d, n]),
            (self.u_r, vec![n, n]),
            (self.b_r, vec![n]),
            (self.w_h, vec![d, n]),
            (self.u_h, vec![n, n]),
            (self.b_h, vec![n]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape("gru_params", store.get(id).shape(), &shape));
            }
        }
        Ok(())
    }
}

fn affine<T: Real>(g: &mut Graph<T>, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
    let wx = g.matmul(x, g.p(w))?;
    let uh = g.matmul(h, g.p(u))?;
    let s = g.add(wx, uh)?;
    g.add_row(s, g.p(b))
}

/// One GRU transition:
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step<T: Real>(g: &mut Graph<T>, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let (xs, hs) = (g.shape(x).to_vec(), g.shape(h_prev).to_vec());
    if *xs.last().unwrap_or(&0) != p.input {
        return Err(Error::shape("gru_step", &xs, &[p.input]));
    }
    if *hs.last().unwrap_or(&0) != p.hidden || g.value(x).rows() != g.value(h_prev).rows() {
        return Err(Error::shape("gru_step", &hs, &[p.hidden]));
    }
    let z_pre = affine(g, x, h_prev, p.w_z, p.u_z, p.b_z)?;
    let z = g.sigmoid(z_pre);
    let r_pre = affine(g, x, h_prev, p.w_r, p.u_r, p.b_r)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev)?;
    let cand_pre = affine(g, x, rh, p.w_h, p.u_h, p.b_h)?;
    let cand = g.tanh(cand_pre);
    // (1 − z) ⊙ h + z ⊙ h̃ = h + z ⊙ (h̃ − h)
    let diff = g.sub(cand, h_prev)?;
    let step = g.mul(z, diff)?;
    g.add(h_prev, step)
}

/// Encoder output: one annotation `[→h_t ; ←h_t]` per source position.
///
/// For a batch each position holds a `[B × 2n]` matrix and `live[t][b]`
/// says whether position `t` is a real token of sentence `b`.
#[derive(Clone, Debug)]
pub struct AnnotationSequence {
    pub positions: Vec<Var>,
    pub live: Option<Vec<Vec<bool>>>,
    pub hidden: usize,
}

impl AnnotationSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Annotation width, `2n`.
    pub fn width(&self) -> usize {
        2 * self.hidden
    }

    /// Backward half of the first annotation, `←h_1`.
    pub fn first_backward<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let first = *self.positions.first().ok_or(Error::Empty("annotations"))?;
        g.slice_cols(first, self.hidden, self.hidden)
    }

    /// Row-major `[B × T]` mask of live positions, if any are padded.
    pub fn flat_mask(&self) -> Option<Vec<bool>> {
        let live = self.live.as_ref()?;
        let rows = live.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(rows * live.len());
        for b in 0..rows {
            for t in live {
                out.push(t[b]);
            }
        }
        Some(out)
    }
}

/// Bidirectional encoding of one sentence (or of an unpadded batch). Both
/// directions start from a zero state.
pub fn encode_bidirectional<T: Real>(
    g: &mut Graph<T>,
    embedded: &[Var],
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<AnnotationSequence> {
    encode_padded(g, embedded, None, fwd, bwd)
}

/// Bidirectional encoding of a padded batch. `lengths[b]` real tokens of
/// row `b` occupy the leading positions; the backward direction holds its
/// zero state through trailing padding so every sentence is read exactly
/// as it would be alone.
pub fn encode_padded<T: Real>(
    g: &mut Graph<T>,
    embedded: &[Var],
    lengths: Option<&[usize]>,
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<AnnotationSequence> {
    let first = *embedded.first().ok_or(Error::Empty("encode_bidirectional"))?;
    if fwd.hidden != bwd.hidden {
        return Err(Error::shape("encode_bidirectional", &[fwd.hidden], &[bwd.hidden]));
    }
    let n = fwd.hidden;
    let rows = g.value(first).rows();
    let zero_shape = if g.value(first).rank() == 1 {
        vec![n]
    } else {
        vec![rows, n]
    };
    let steps = embedded.len();

    let live: Option<Vec<Vec<bool>>> = match lengths {
        Some(lens) => {
            if lens.len() != rows {
                return Err(Error::shape("encode_padded", &[rows], &[lens.len()]));
            }
            if lens.iter().any(|&l| l == 0 || l > steps) {
                return Err(Error::InvalidArgument(format!(
                    "sentence lengths {lens:?} incompatible with {steps} positions"
                )));
            }
            if lens.iter().all(|&l| l == steps) {
                None
            } else {
                Some((0..steps).map(|t| lens.iter().map(|&l| t < l).collect()).collect())
            }
        }
        None => None,
    };

    let mut forward = Vec::with_capacity(steps);
    let mut h = g.constant(Tensor::zeros(&zero_shape));
    for &x in embedded {
        h = gru_step(g, x, h, fwd)?;
        forward.push(h);
    }

    let mut backward = vec![h; steps];
    let mut h = g.constant(Tensor::zeros(&zero_shape));
    for t in (0..steps).rev() {
        let cand = gru_step(g, embedded[t], h, bwd)?;
        h = match &live {
            Some(live) if live[t].iter().any(|&l| !l) => g.select_rows(&live[t], cand, h)?,
            _ => cand,
        };
        backward[t] = h;
    }

    let positions = forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnotationSequence {
        positions,
        live,
        hidden: n,
    })
}

/// Looks up `ids[b][t]` for every position of a padded batch (pad id 0)
/// and returns one `[B × d]` embedding matrix per position.
pub fn embed_batch<T: Real>(g: &mut Graph<T>, table: ParamId, batch: &[Vec<usize>]) -> Result<(Vec<Var>, Vec<usize>)> {
    let lengths: Vec<usize> = batch.iter().map(Vec::len).collect();
    let steps = lengths.iter().copied().max().unwrap_or(0);
    let t = g.p(table);
    let mut out = Vec::with_capacity(steps);
    for pos in 0..steps {
        let ids: Vec<usize> = batch.iter().map(|s| s.get(pos).copied().unwrap_or(0)).collect();
        out.push(g.gather_rows(t, &ids)?);
    }
    Ok((out, lengths))
}
