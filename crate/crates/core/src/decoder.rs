//! Decoder state update, readout distribution and initial-state rules.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::{gru_step, AnnotationSequence, GruParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Recurrent cell over `[y_{t-1} embedding ; context]`.
    pub gru: GruParams,
    pub w_s: ParamId,
    pub w_y: ParamId,
    pub w_c: ParamId,
    pub b_r: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub embed: usize,
    pub context: usize,
    pub hidden: usize,
    pub readout: usize,
    pub vocab: usize,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed: usize,
        context: usize,
        hidden: usize,
        readout: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        let gru = GruParams::new(store, &format!("{prefix}.gru"), embed + context, hidden, rng);
        let mut w = |name: &str, shape: &[usize]| store.add_uniform(format!("{prefix}.{name}"), shape, rng);
        DecoderParams {
            gru,
            w_s: w("readout.w_s", &[hidden, readout]),
            w_y: w("readout.w_y", &[embed, readout]),
            w_c: w("readout.w_c", &[context, readout]),
            b_r: w("readout.b", &[readout]),
            w_o: w("out.w", &[readout, vocab]),
            b_o: w("out.b", &[vocab]),
            embed,
            context,
            hidden,
            readout,
            vocab,
        }
    }

    /// Every block of the readout `g` (not the recurrent cell).
    pub fn readout_ids(&self) -> [ParamId; 6] {
        [self.w_s, self.w_y, self.w_c, self.b_r, self.w_o, self.b_o]
    }
}

/// Decoder hidden state `s_t` and the index `t` of the step that produced it.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub step: usize,
}

/// `s_t = GRU([y_{t-1} ; c_t], s_{t-1})`.
pub fn step<T: Real>(
    g: &mut Graph<T>,
    y_prev_embed: Var,
    s_prev: &DecoderState,
    context: Var,
    p: &DecoderParams,
) -> Result<DecoderState> {
    if g.value(y_prev_embed).cols() != p.embed {
        return Err(Error::shape("decoder_step", g.shape(y_prev_embed), &[p.embed]));
    }
    if g.value(context).cols() != p.context {
        return Err(Error::shape("decoder_step", g.shape(context), &[p.context]));
    }
    let input = g.concat(&[y_prev_embed, context])?;
    let hidden = gru_step(g, input, s_prev.hidden, &p.gru)?;
    Ok(DecoderState {
        hidden,
        step: s_prev.step + 1,
    })
}

/// Log-distribution over the target vocabulary:
/// `log_softmax(tanh(s W_s + y W_y + c W_c + b) W_o + b_o)`.
pub fn readout<T: Real>(g: &mut Graph<T>, y_prev_embed: Var, s_t: Var, context: Var, p: &DecoderParams) -> Result<Var> {
    for (v, w) in [(s_t, p.hidden), (y_prev_embed, p.embed), (context, p.context)] {
        if g.value(v).cols() != w {
            return Err(Error::shape("readout", g.shape(v), &[w]));
        }
    }
    let a = g.matmul(s_t, g.p(p.w_s))?;
    let b = g.matmul(y_prev_embed, g.p(p.w_y))?;
    let c = g.matmul(context, g.p(p.w_c))?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let pre = g.add_row(abc, g.p(p.b_r))?;
    let hidden = g.tanh(pre);
    let logits = g.matmul(hidden, g.p(p.w_o))?;
    let logits = g.add_row(logits, g.p(p.b_o))?;
    g.log_softmax(logits)
}

/// Stage-one initial state `s_0 = tanh(←h_1 W_init)`.
pub fn init_single<T: Real>(
    g: &mut Graph<T>,
    annotations: &AnnotationSequence,
    w_init: ParamId,
) -> Result<DecoderState> {
    let back = annotations.first_backward(g)?;
    let proj = g.matmul(back, g.p(w_init))?;
    Ok(DecoderState {
        hidden: g.tanh(proj),
        step: 0,
    })
}

/// Double-attention initial state: the plain average of the first backward
/// annotations of the source and of the draft, `½(←h_1 + ←h̃_1)`.
pub fn init_double<T: Real>(
    g: &mut Graph<T>,
    source: &AnnotationSequence,
    draft: &AnnotationSequence,
) -> Result<DecoderState> {
    if source.hidden != draft.hidden {
        return Err(Error::shape("init_double", &[source.hidden], &[draft.hidden]));
    }
    let a = source.first_backward(g)?;
    let b = draft.first_backward(g)?;
    let sum = g.add(a, b)?;
    Ok(DecoderState {
        hidden: g.scale(sum, T::of_f64(0.5)),
        step: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 3;
    const C: usize = 4;
    const N: usize = 5;
    const R: usize = 6;
    const V: usize = 7;

    fn setup(seed: u64) -> (ParamStore<f64>, DecoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = DecoderParams::new(&mut store, "dec", D, C, N, R, V, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).map(|x| x * 8.0);
            store.set(id, t).unwrap();
        }
        (store, p)
    }

    fn rand_vec(n: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn ann_from(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> AnnotationSequence {
        AnnotationSequence {
            positions: rows.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect(),
            live: None,
            hidden: rows[0].len() / 2,
        }
    }

    #[test]
    fn zero_cell_halves_state_and_counts_steps() {
        let (mut store, p) = setup(1);
        for id in p.gru.ids() {
            store.zero(id);
        }
        let mut g = Graph::with_params(&store);
        let y = g.constant(rand_vec(D, 2));
        let c = g.constant(rand_vec(C, 3));
        let s0 = g.constant(Tensor::vector(vec![2.0, -4.0, 1.0, 0.0, 6.0]));
        let st = DecoderState { hidden: s0, step: 3 };
        let next = step(&mut g, y, &st, c, &p).unwrap();
        assert_eq!(g.value(next.hidden).data(), &[1.0, -2.0, 0.5, 0.0, 3.0]);
        assert_eq!(next.step, 4);
    }

    #[test]
    fn step_equals_gru_on_concatenated_input() {
        let (store, p) = setup(2);
        let mut g = Graph::with_params(&store);
        let (y, c, s) = (
            g.constant(rand_vec(D, 4)),
            g.constant(rand_vec(C, 5)),
            g.constant(rand_vec(N, 6)),
        );
        let st = DecoderState { hidden: s, step: 0 };
        let next = step(&mut g, y, &st, c, &p).unwrap();
        let joined = g.constant(Tensor::vector(
            [rand_vec(D, 4).into_data(), rand_vec(C, 5).into_data()].concat(),
        ));
        let direct = gru_step(&mut g, joined, s, &p.gru).unwrap();
        assert_eq!(g.value(next.hidden).data(), g.value(direct).data());
    }

    #[test]
    fn step_rejects_wrong_context_width() {
        let (store, p) = setup(2);
        let mut g = Graph::with_params(&store);
        let y = g.constant(rand_vec(D, 4));
        let c = g.constant(rand_vec(C + 1, 5));
        let s = g.constant(rand_vec(N, 6));
        let st = DecoderState { hidden: s, step: 0 };
        assert!(matches!(step(&mut g, y, &st, c, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_readout_is_uniform() {
        let (mut store, p) = setup(3);
        for id in p.readout_ids() {
            store.zero(id);
        }
        let mut g = Graph::with_params(&store);
        let (y, s, c) = (
            g.constant(rand_vec(D, 1)),
            g.constant(rand_vec(N, 2)),
            g.constant(rand_vec(C, 3)),
        );
        let lp = readout(&mut g, y, s, c, &p).unwrap();
        for &x in g.value(lp).data() {
            assert!((x + (V as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn output_bias_shift_leaves_distribution_unchanged() {
        let (store, p) = setup(4);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::with_params(store);
            let (y, s, c) = (
                g.constant(rand_vec(D, 1)),
                g.constant(rand_vec(N, 2)),
                g.constant(rand_vec(C, 3)),
            );
            let lp = readout(&mut g, y, s, c, &p).unwrap();
            g.value(lp).data().to_vec()
        };
        let base = run(&store);
        let mut shifted = store.clone();
        let b = shifted.get(p.b_o).map(|x| x + 3.25);
        shifted.set(p.b_o, b).unwrap();
        for (a, b) in base.iter().zip(run(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_matches_scalar_oracle() {
        let (store, p) = setup(5);
        let (y, s, c) = (rand_vec(D, 7), rand_vec(N, 8), rand_vec(C, 9));
        let mut hidden = vec![0.0; R];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = store.get(p.b_r).data()[j];
            for i in 0..N {
                acc += s.data()[i] * store.get(p.w_s).at(i, j);
            }
            for i in 0..D {
                acc += y.data()[i] * store.get(p.w_y).at(i, j);
            }
            for i in 0..C {
                acc += c.data()[i] * store.get(p.w_c).at(i, j);
            }
            *h = acc.tanh();
        }
        let logits: Vec<f64> = (0..V)
            .map(|k| {
                let mut acc = store.get(p.b_o).data()[k];
                for (j, h) in hidden.iter().enumerate() {
                    acc += h * store.get(p.w_o).at(j, k);
                }
                acc
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| (l.exp() / z).ln()).collect();

        let mut g = Graph::with_params(&store);
        let (yv, sv, cv) = (g.constant(y), g.constant(s), g.constant(c));
        let lp = readout(&mut g, yv, sv, cv, &p).unwrap();
        let total: f64 = g.value(lp).data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        for (a, b) in g.value(lp).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn init_single_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let w = store.add_uniform("w_init", &[2, 2], &mut rng);
        let rows = vec![vec![0.1, 0.2, 0.3, -0.7], vec![0.5, 0.5, 0.5, 0.5]];

        let mut g = Graph::with_params(&store);
        let ann = ann_from(&mut g, &rows);
        let s0 = init_single(&mut g, &ann, w).unwrap();
        assert_eq!(g.value(s0.hidden).cols(), 2);
        let wt = store.get(w);
        for j in 0..2 {
            let pre = 0.3 * wt.at(0, j) + -0.7 * wt.at(1, j);
            assert!((g.value(s0.hidden).data()[j] - pre.tanh()).abs() < 1e-12);
        }

        store.zero(w);
        let mut g = Graph::with_params(&store);
        let ann = ann_from(&mut g, &rows);
        let s0 = init_single(&mut g, &ann, w).unwrap();
        assert_eq!(g.value(s0.hidden).data(), &[0.0, 0.0]);
    }

    #[test]
    fn init_double_cases() {
        let mut g = Graph::<f64>::new();
        let a = ann_from(&mut g, &[vec![9.0, 9.0, 2.0, 0.0]]);
        let b = ann_from(&mut g, &[vec![7.0, 7.0, 0.0, 2.0], vec![1.0, 1.0, 1.0, 1.0]]);
        let s = init_double(&mut g, &a, &b).unwrap();
        assert_eq!(g.value(s.hidden).data(), &[1.0, 1.0]);
        let s_swapped = init_double(&mut g, &b, &a).unwrap();
        assert_eq!(g.value(s_swapped.hidden).data(), &[1.0, 1.0]);

        let same = ann_from(&mut g, &[vec![0.0, 0.0, 0.3, -0.4]]);
        let other = ann_from(&mut g, &[vec![5.0, 5.0, 0.3, -0.4]]);
        let s = init_double(&mut g, &same, &other).unwrap();
        assert_eq!(g.value(s.hidden).data(), &[0.3, -0.4]);

        let wide = ann_from(&mut g, &[vec![0.0; 6]]);
        assert!(matches!(
            init_double(&mut g, &a, &wide),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
