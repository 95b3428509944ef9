use harma::numerics::{
    multi_head_self_attention, AttnMask, Linear, MsaParams, ParamStore, Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(x in matrix(4, 6), shift in -20.0f64..20.0) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(x.clone());
        let p = tape.softmax_rows(a);
        let shifted = tape.constant(x.map(|v| v + shift));
        let q = tape.softmax_rows(shifted);
        let (p, q) = (tape.value(p), tape.value(q));
        for i in 0..4 {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        prop_assert!(p.max_abs_diff(q) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MsaParams::new(&mut store, "m", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut px = Tensor::zeros(&[5, 4]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                px.set(dst, c, x.at(src, c));
            }
        }
        let mut tape = Tape::new(&store);
        let a = tape.constant(x);
        let b = tape.constant(px);
        let ya = multi_head_self_attention(&mut tape, a, &p, 5, AttnMask::None).unwrap();
        let yb = multi_head_self_attention(&mut tape, b, &p, 5, AttnMask::None).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((yb.at(dst, c) - ya.at(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_linear_ignores_input(x in matrix(3, 4), y in matrix(3, 4)) {
        let mut store = ParamStore::new();
        let l = Linear::zeros(&mut store, "l", 4, 2).unwrap();
        store.value_mut(l.b).data_mut().copy_from_slice(&[0.3, -1.2]);
        let mut tape = Tape::new(&store);
        let xv = tape.tracked(x);
        let yv = tape.constant(y);
        let ox = l.forward(&mut tape, xv).unwrap();
        let oy = l.forward(&mut tape, yv).unwrap();
        prop_assert_eq!(tape.value(ox), tape.value(oy));
        let s = tape.sum(ox);
        let g = tape.backward(s).unwrap();
        prop_assert!(g.wrt(xv).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ops_stay_finite_on_bounded_inputs(x in matrix(4, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = MsaParams::new(&mut store, "m", 4, 2, &mut rng).unwrap();
        let g = store.add("g", Tensor::full(&[4], 1.0)).unwrap();
        let b = store.add("b", Tensor::zeros(&[4])).unwrap();
        let mut tape = Tape::new(&store);
        let v = tape.tracked(x);
        let (gv, bv) = (tape.param(g), tape.param(b));
        let h = tape.layer_norm(v, gv, bv).unwrap();
        let h = tape.gelu(h);
        let h = multi_head_self_attention(&mut tape, h, &p, 2, AttnMask::Causal).unwrap();
        let h = tape.l2_normalize_rows(h).unwrap();
        prop_assert!(tape.value(h).is_finite());
        let s = tape.sum(h);
        let grads = tape.backward(s).unwrap();
        prop_assert!(grads.params().iter().all(|(_, t)| t.is_finite()));
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = Linear::new(&mut store, "a", 3, 3, &mut rng).unwrap();
    let b = Linear::new(&mut store, "b", 3, 2, &mut rng).unwrap();
    for id in a.ids() {
        store.get_mut(id).trainable = false;
    }
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    let h = a.forward(&mut tape, x).unwrap();
    let y = b.forward(&mut tape, h).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    let ids: Vec<_> = grads.params().iter().map(|(id, _)| *id).collect();
    assert!(a.ids().iter().all(|id| !ids.contains(id)));
    assert!(b.ids().iter().all(|id| ids.contains(id)));
    store.accumulate(grads.params());
    for id in a.ids() {
        assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn causal_mask_hides_future_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let p = MsaParams::new(&mut store, "m", 4, 1, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut changed = x.clone();
    for c in 0..4 {
        changed.set(2, c, 9.0);
    }
    let mut tape = Tape::new(&store);
    let a = tape.constant(x);
    let b = tape.constant(changed);
    let ya = multi_head_self_attention(&mut tape, a, &p, 3, AttnMask::Causal).unwrap();
    let yb = multi_head_self_attention(&mut tape, b, &p, 3, AttnMask::Causal).unwrap();
    for r in 0..2 {
        assert_eq!(tape.value(ya).row(r), tape.value(yb).row(r));
    }
    assert_ne!(tape.value(ya).row(2), tape.value(yb).row(2));
}
