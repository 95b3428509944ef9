//! Dense `f64` tensors, parameters and a reverse-mode tape.

mod gradcheck;
mod param;
mod tape;
mod tensor;

use rand::Rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{gelu, normal_cdf, sigmoid, AttnMask, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

use crate::error::{Error, Result};

/// `x·W + b` with `W` stored `d_in × d_out`.
pub fn linear(tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w, false)?;
    tape.add_bias(y, b)
}

/// Weight and bias handles of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Registers `{prefix}.w` (`d_in×d_out`, N(0, 1/d_in)) and a zero `{prefix}.b`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_std(store, prefix, d_in, d_out, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], std, rng))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b })
    }

    /// Both weight and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), Tensor::zeros(&[d_in, d_out]))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        linear(tape, x, self.w, self.b)
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[0]
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[1]
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Projections of one multi-head self-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MsaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}.q"), width, width, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), width, width, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), width, width, rng)?,
            o: Linear::new(store, &format!("{prefix}.o"), width, width, rng)?,
            heads,
        })
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.q.d_in(store)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.o]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }
}

/// Multi-head self-attention over segments of `seq` rows: per-head softmax(QKᵀ/√(D/h))V,
/// heads concatenated, then the output projection.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    p: &MsaParams,
    seq: usize,
    mask: AttnMask,
) -> Result<Var> {
    let width = tape.value(x).cols();
    if width % p.heads != 0 {
        return Err(Error::Config(format!(
            "attention width {width} not divisible by {} heads",
            p.heads
        )));
    }
    let q = p.q.forward(tape, x)?;
    let k = p.k.forward(tape, x)?;
    let v = p.v.forward(tape, x)?;
    let a = tape.attention(q, k, v, seq, p.heads, mask)?;
    p.o.forward(tape, a)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(n, t)| s.add(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    fn eval_linear(x: &[f64], w: &[&[f64]], b: &[f64]) -> Vec<f64> {
        let (s, ids) = store_with(&[
            ("w", Tensor::from_rows(w).unwrap()),
            ("b", Tensor::vector(b.to_vec())),
        ]);
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_rows(&[x]).unwrap());
        let y = linear(&mut tape, x, ids[0], ids[1]).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn linear_examples() {
        assert_eq!(eval_linear(&[1.0, 2.0], &[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]), [1.0, 2.0]);
        assert_eq!(eval_linear(&[1.0, 2.0], &[&[0.0, 0.0], &[0.0, 0.0]], &[3.0, 4.0]), [3.0, 4.0]);
        assert_eq!(eval_linear(&[1.0, 2.0], &[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 1.0]), [8.0, 11.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let (s, ids) = store_with(&[("w", Tensor::zeros(&[3, 2])), ("b", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let err = linear(&mut tape, x, ids[0], ids[1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn zero_weight_linear_has_zero_input_grad() {
        let (s, ids) = store_with(&[("w", Tensor::zeros(&[2, 3])), ("b", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let mut tape = Tape::new(&s);
        let x = tape.tracked(Tensor::from_rows(&[&[0.3, -0.7], &[5.0, 2.0]]).unwrap());
        let y = linear(&mut tape, x, ids[0], ids[1]).unwrap();
        assert_eq!(tape.value(y).row(0), tape.value(y).row(1));
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn softmax_of(row: &[f64]) -> Vec<f64> {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_rows(&[row]).unwrap());
        let y = tape.softmax_rows(x);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_of(&[0.0, 0.0]), [0.5, 0.5]);
        assert_eq!(softmax_of(&[1000.0, 1000.0]), [0.5, 0.5]);
        let e = std::f64::consts::E;
        let y = softmax_of(&[1.0, 0.0]);
        assert!((y[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y[0] - 0.731059).abs() < 1e-6 && (y[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
    }

    fn ln_of(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let (s, ids) = store_with(&[
            ("g", Tensor::vector(gamma.to_vec())),
            ("b", Tensor::vector(beta.to_vec())),
        ]);
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_rows(&[row]).unwrap());
        let (g, b) = (tape.param(ids[0]), tape.param(ids[1]));
        let y = tape.layer_norm(x, g, b).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(ln_of(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]), [0.0, 0.0]);
        let y = ln_of(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        let expect = (1.0f64 / (1.0 + 1e-5)).sqrt();
        assert!((y[0] - expect).abs() < 1e-15 && (y[1] + expect).abs() < 1e-15);
        assert_eq!(ln_of(&[3.0, -8.0], &[0.0, 0.0], &[5.0, 5.0]), [5.0, 5.0]);
    }

    fn identity_msa(store: &mut ParamStore, width: usize, heads: usize) -> MsaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MsaParams::new(store, "msa", width, heads, &mut rng).unwrap();
        for l in [p.q, p.k, p.v, p.o] {
            *store.value_mut(l.w) = Tensor::identity(width);
        }
        p
    }

    #[test]
    fn single_token_attention_with_identity_weights_is_identity() {
        let mut s = ParamStore::new();
        let p = identity_msa(&mut s, 2, 1);
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let y = multi_head_self_attention(&mut tape, x, &p, 1, AttnMask::None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MsaParams::new(&mut s, "msa", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_rows(&[&[0.1, -0.2, 0.3, 0.4], &[0.1, -0.2, 0.3, 0.4]]).unwrap());
        let y = multi_head_self_attention(&mut tape, x, &p, 2, AttnMask::None).unwrap();
        assert_eq!(tape.value(y).row(0), tape.value(y).row(1));
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MsaParams::new(&mut s, "msa", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
