use proptest::prelude::*;
use wildground_core::gradcheck::{self, Scope, TOLERANCE};
use wildground_core::nn::{Builder, Ctx, FeedForward, GradBuffer, ParamStore};
use wildground_core::optim::{AdamW, AdamWConfig};
use wildground_core::{attention, Error, Mode, Tape, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let i = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
    let b = tape.constant(t(&[vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
    assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
    let r = tape.constant(t(&[vec![1.0, 2.0]])).unwrap();
    let c = tape.constant(t(&[vec![3.0], vec![4.0]])).unwrap();
    assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    match a.matmul(b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gradcheck::uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = gradcheck::uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let err = gradcheck::check_inputs(
        &[a, b],
        Mode::Eval,
        |_, v| v[0].matmul(v[1])?.sum(),
        gradcheck::Fault(false),
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_symmetric_and_stable() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let z = tape.constant(Tensor::zeros(&[3])).unwrap();
    for &p in z.softmax(0).unwrap().value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::full(&[2], 1000.0)).unwrap();
    assert_eq!(big.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    assert!(matches!(z.softmax(1), Err(Error::Invalid { .. })));
}

#[test]
fn layer_norm_hand_cases() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let g = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let x = tape.constant(Tensor::full(&[1, 3], 4.2)).unwrap();
    assert!(x.layer_norm(g, b, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
    let g2 = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let b2 = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.constant(t(&[vec![1.0, 3.0]])).unwrap();
    let out = y.layer_norm(g2, b2, 1e-300).unwrap().value();
    assert!((out.data()[0] + 1.0).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);
    let empty = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
    let e0 = tape.constant(Tensor::zeros(&[0])).unwrap();
    assert!(empty.layer_norm(e0, e0, 1e-5).is_err());
}

#[test]
fn single_key_attention_returns_the_value_row() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let q = tape.constant(t(&[vec![1.0, -2.0, 0.5, 3.0], vec![0.0, 0.0, 9.0, 1.0]])).unwrap();
    let k = tape.constant(t(&[vec![0.3, 0.1, -0.5, 2.0]])).unwrap();
    let v = tape.constant(t(&[vec![7.0, 8.0, 9.0, 10.0]])).unwrap();
    let out = attention(q, k, v, 2).unwrap().value();
    for r in 0..2 {
        assert_eq!(out.row(r), &[7.0, 8.0, 9.0, 10.0]);
    }
    assert!(matches!(attention(q, k, v, 3), Err(Error::Config(_))));
}

#[test]
fn attention_weights_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    tape.set_capture_attention(true);
    let q = tape.constant(gradcheck::uniform(&mut rng, &[5, 8], -3.0, 3.0)).unwrap();
    let k = tape.constant(gradcheck::uniform(&mut rng, &[7, 8], -3.0, 3.0)).unwrap();
    attention(q, k, k, 4).unwrap();
    let p = tape.last_attention().unwrap();
    assert_eq!(p.shape(), &[4, 5, 7]);
    for row in p.data().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn feed_forward_eval_is_deterministic_and_zero_weights_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let ffn = FeedForward::new(&mut Builder::new(&mut store, &mut rng), "ffn", 4, 6, 0.1);
    let x = gradcheck::uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::new(Mode::Eval, 42);
        let cx = Ctx::new(&tape, store, false);
        let xv = cx.constant(x.clone()).unwrap();
        ffn.forward(&cx, xv).unwrap().value().data().to_vec()
    };
    assert_eq!(run(&store), run(&store));
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(run(&store).iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_is_identity_in_eval_and_inverted_in_train() {
    let x = Tensor::<f64>::full(&[1, 1000], 1.0);
    let eval = Tape::new(Mode::Eval, 0);
    let v = eval.constant(x.clone()).unwrap();
    assert_eq!(v.dropout(0.1).unwrap().value().data(), x.data());
    let train = Tape::new(Mode::Train, 5);
    let d = train.constant(x).unwrap().dropout(0.1).unwrap().value();
    let kept = d.data().iter().filter(|&&v| v != 0.0).count();
    assert!(d.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    assert!((850..=950).contains(&kept), "kept {kept}");
}

#[test]
fn non_finite_outputs_are_errors() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let x = tape.constant(Tensor::full(&[2], 0.0)).unwrap();
    assert!(matches!(x.ln(), Err(Error::NonFinite { op: "log" })));
    assert!(tape.leaf(Tensor::full(&[1], f64::NAN), true).is_err());
}

#[test]
fn backward_visits_each_reachable_node_once() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let a = tape.leaf(t(&[vec![1.0, 2.0]]), true).unwrap();
    let b = a.mul(a).unwrap();
    let c = b.add(a).unwrap().add(b).unwrap();
    let _unused = a.exp().unwrap();
    let loss = c.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    let visits = g.visits();
    for id in [a.id(), b.id(), c.id(), loss.id()] {
        assert_eq!(visits[id], 1, "node {id}");
    }
    assert_eq!(visits[_unused.id()], 0);
    // d/da (2a^2 + a) = 4a + 1
    assert_eq!(g.get(a).unwrap().data(), &[5.0, 9.0]);
}

#[test]
fn backward_requires_scalar_output() {
    let tape = Tape::<f64>::new(Mode::Eval, 0);
    let a = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
    assert!(tape.backward(a).is_err());
}

#[test]
fn identical_passes_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let ffn = FeedForward::new(&mut Builder::new(&mut store, &mut rng), "ffn", 8, 16, 0.3);
        let tape = Tape::new(Mode::Train, 77);
        let cx = Ctx::new(&tape, &store, true);
        let x = cx.constant(Tensor::full(&[4, 8], 0.25)).unwrap();
        let y = ffn.forward(&cx, x).unwrap().sum().unwrap();
        let g = cx.param_grads(tape.backward(y).unwrap());
        (y.item().to_bits(), g[0].as_ref().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn ten_step_training_trajectory_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let ffn = FeedForward::new(&mut Builder::new(&mut store, &mut rng), "ffn", 6, 12, 0.1);
        let mut opt = AdamW::new(&store, AdamWConfig { lr: 1e-2, ..Default::default() });
        let mut losses = Vec::new();
        for step in 0..10u64 {
            let mut buf = GradBuffer::new(store.len());
            let grads = {
                let tape = Tape::new(Mode::Train, step);
                let cx = Ctx::new(&tape, &store, true);
                let x = cx.constant(Tensor::full(&[3, 6], 0.5)).unwrap();
                let y = ffn.forward(&cx, x).unwrap();
                let loss = y.mul(y).unwrap().mean().unwrap();
                losses.push(loss.item().to_bits());
                cx.param_grads(tape.backward(loss).unwrap())
            };
            buf.accumulate(grads);
            opt.step(&mut store, &mut buf).unwrap();
        }
        losses
    };
    assert_eq!(run(), run());
}

#[test]
fn core_gradient_suite_passes() {
    let reports = gradcheck::run(&[Scope::Core], 0, None);
    assert!(reports.len() >= 30);
    for r in &reports {
        assert!(r.instances >= 20);
        assert!(r.passed(), "{} failed: err {} {:?}", r.name, r.max_rel_err, r.error);
        assert!(r.max_rel_err <= TOLERANCE);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let reports = gradcheck::run(&[Scope::Core], 0, Some("matmul"));
    let bad = reports.iter().find(|r| r.name == "matmul").unwrap();
    assert!(!bad.passed());
    assert!(reports.iter().filter(|r| r.name != "matmul").all(|r| r.passed()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 1..40),
        cols in 1usize..8,
    ) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let tape = Tape::new(Mode::Eval, 0);
        let y = tape.constant(x).unwrap().softmax(1).unwrap().value();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn values_stay_finite_on_finite_inputs(data in prop::collection::vec(-1e3f64..1e3, 4..32)) {
        let n = data.len();
        let tape = Tape::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::new(vec![1, n], data).unwrap(), true).unwrap();
        let y = x.sigmoid().unwrap().add(x.softplus().unwrap()).unwrap();
        let z = y.log_softmax(1).unwrap().sum().unwrap();
        prop_assert!(z.item().is_finite());
        let g = tape.backward(z).unwrap();
        prop_assert!(g.get(x).unwrap().all_finite());
    }
}
