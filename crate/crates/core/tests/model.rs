use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildground_core::encoders::TokenSpans;
use wildground_core::geometry::Box3D;
use wildground_core::gradcheck::uniform;
use wildground_core::losses::{scene_loss, LossWeights};
use wildground_core::model::{
    random_input, select_queries, select_target, DynamicVisualEncoder, Fusion, GroundingModel, ModelConfig,
    SceneInput, Temporal,
};
use wildground_core::nn::{BlockDims, Builder, Ctx, ParamStore};
use wildground_core::{Error, Mode, Tape, Tensor};

const VOCAB: usize = 11;

fn build(config: ModelConfig, seed: u64) -> (GroundingModel, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GroundingModel::new(&mut Builder::new(&mut store, &mut rng), config).unwrap();
    (model, store)
}

fn input(seed: u64, frames: usize, words: usize) -> SceneInput {
    random_input(&mut ChaCha8Rng::seed_from_u64(seed), frames, 40, VOCAB, words)
}

fn spans(m: usize) -> TokenSpans {
    TokenSpans {
        target: (0, 1),
        attributes: if m > 3 { vec![(1, 3)] } else { vec![] },
        terminal: (m - 1, m),
    }
}

fn variants() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::tiny(VOCAB);
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("baseline", with(&|c| {
            c.use_dve = false;
            c.use_tfi = false;
            c.frames = 1;
        })),
        ("dve only", with(&|c| c.use_tfi = false)),
        ("k1", with(&|c| c.frames = 1)),
        ("k3", with(&|c| c.frames = 3)),
        ("vision first", with(&|c| c.fusion = Fusion::VisionFirst)),
        ("image dominant", with(&|c| c.fusion = Fusion::ImageDominant)),
        ("concat", with(&|c| c.fusion = Fusion::Concat)),
        ("input concat", with(&|c| c.temporal = Temporal::InputConcat)),
        ("feature concat", with(&|c| c.temporal = Temporal::FeatureConcat)),
        ("shared dve", with(&|c| c.share_dve = true)),
        ("vision before language", with(&|c| c.language_first = false)),
    ]
}

#[test]
fn every_variant_emits_identically_shaped_predictions() {
    for (name, config) in variants() {
        let (model, store) = build(config.clone(), 1);
        let tape = Tape::new(Mode::Eval, 0);
        let cx = Ctx::new(&tape, &store, false);
        let x = input(2, config.frames, 5);
        let out = model.forward(&cx, &x).unwrap_or_else(|e| panic!("{name}: {e}"));
        let n = config.queries;
        assert_eq!(out.boxes.shape(), vec![n, 6], "{name}");
        assert_eq!(out.span_logits.shape(), vec![n, 6], "{name}");
        assert_eq!(out.query_proj.shape(), vec![n, config.proj_dim], "{name}");
        assert_eq!(out.word_proj.shape(), vec![6, config.proj_dim], "{name}");
        assert_eq!(out.score_logits.shape(), vec![config.point.seeds(), 1], "{name}");
        assert_eq!(out.features.visual.shape(), vec![config.point.seeds(), config.dim], "{name}");
        assert_eq!(out.features.language_visual.shape(), vec![6, config.dim], "{name}");
        assert!(out.pred_boxes().iter().all(Box3D::is_valid), "{name}");
    }
}

#[test]
fn desk_model_contract_shapes() {
    let config = ModelConfig::desk(VOCAB);
    let (model, store) = build(config.clone(), 3);
    let store = store.cast::<f32>();
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(4), 2, 1500, VOCAB, 7);
    let out = model.forward(&cx, &x).unwrap();
    assert_eq!(out.features.points.shape(), vec![64, 288]);
    assert_eq!(out.features.image.unwrap().shape(), vec![4, 288]);
    assert_eq!(out.features.language.shape(), vec![8, 288]);
    assert_eq!(out.features.visual.shape(), vec![64, 288]);
    assert_eq!(out.span_logits.shape(), vec![16, 8]);
    assert_eq!(out.boxes.shape(), vec![16, 6]);
    let q = &out.queries;
    assert_eq!(q.selected.len(), 16);
    assert!(q.scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn zero_weight_heads_put_boxes_on_reference_positions_with_unit_size() {
    let config = ModelConfig::tiny(VOCAB);
    let (model, mut store) = build(config, 5);
    let h = &model.heads;
    for l in [&h.center.l2, &h.size.l2] {
        for id in [l.w, l.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let out = model.forward(&cx, &input(6, 2, 4)).unwrap();
    for (b, r) in out.pred_boxes().iter().zip(&out.queries.reference_positions) {
        assert_eq!(b.center(), *r);
        assert_eq!((b.l, b.w, b.h), (1.0, 1.0, 1.0));
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let (model, store) = build(ModelConfig::tiny(VOCAB), 7);
    let x = input(8, 2, 5);
    let run = |mode| {
        let tape = Tape::new(mode, 99);
        let cx = Ctx::new(&tape, &store, false);
        let out = model.forward(&cx, &x).unwrap();
        (out.boxes.value().data().to_vec(), out.span_logits.value().data().to_vec())
    };
    assert_eq!(run(Mode::Eval), run(Mode::Eval));
    assert_eq!(run(Mode::Train), run(Mode::Train));
    assert_ne!(run(Mode::Eval), run(Mode::Train));
}

#[test]
fn every_attention_map_has_rows_summing_to_one() {
    for (name, config) in variants() {
        let (model, store) = build(config.clone(), 9);
        let tape = Tape::new(Mode::Eval, 0);
        tape.set_capture_attention(true);
        let cx = Ctx::new(&tape, &store, false);
        model.forward(&cx, &input(10, config.frames, 5)).unwrap();
        let maps = tape.captured_attention();
        assert!(maps.len() >= config.decoder_layers * 3, "{name}");
        for p in maps {
            let nk = p.shape()[2];
            for row in p.data().chunks(nk) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "{name}: row sums to {s}");
            }
        }
    }
}

#[test]
fn queries_are_exactly_n_and_score_sorted() {
    let (model, store) = build(ModelConfig::tiny(VOCAB), 11);
    for s in 0..10 {
        let tape = Tape::new(Mode::Eval, 0);
        let cx = Ctx::new(&tape, &store, false);
        let out = model.forward(&cx, &input(100 + s, 2, 4)).unwrap();
        let q = &out.queries;
        assert_eq!(q.selected.len(), 3);
        for w in q.selected.windows(2) {
            let (a, b) = (q.scores[w[0]], q.scores[w[1]]);
            assert!(a > b || (a == b && w[0] < w[1]));
        }
        for (&i, r) in q.selected.iter().zip(&q.reference_positions) {
            assert_eq!(out.seeds[i], *r);
        }
    }
}

#[test]
fn query_selection_tie_break_and_bounds() {
    assert_eq!(select_queries(&[0.2, 0.7, 0.7, 0.1], 3).unwrap(), vec![1, 2, 0]);
    assert_eq!(select_queries(&[0.5, 0.5, 0.5], 3).unwrap(), vec![0, 1, 2]);
    assert_eq!(select_queries(&[0.1, 0.9, 0.4], 3).unwrap(), vec![1, 2, 0]);
    assert!(matches!(select_queries(&[0.1, 0.9], 3), Err(Error::Config(_))));
    let mut config = ModelConfig::tiny(VOCAB);
    config.queries = config.point.seeds() + 1;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        GroundingModel::new(&mut Builder::new(&mut store, &mut rng), config),
        Err(Error::Config(_))
    ));
}

#[test]
fn target_selection_single_query_and_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let q = uniform(&mut rng, &[1, 3], -1.0, 1.0);
    assert_eq!(select_target(&q, &w, (3, 4)), 0);
    let term = w.row(3).to_vec();
    let anti: Vec<f64> = term.iter().map(|x| -x).collect();
    let rows = vec![term.clone(), anti.clone(), anti, term];
    assert_eq!(select_target(&Tensor::from_rows(&rows).unwrap(), &w, (3, 4)), 1);
}

#[test]
fn target_selection_uses_the_mean_of_a_multi_word_terminal_span() {
    let w = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(select_target(&q, &w, (1, 3)), 1);
}

#[test]
fn dve_with_one_frame_is_pure_spatial_self_attention() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = BlockDims {
        dim: 8,
        heads: 2,
        ffn: 6,
        dropout: 0.1,
    };
    let dve = DynamicVisualEncoder::new(&mut Builder::new(&mut store, &mut rng), "dve", 1, 1, d).unwrap();
    assert!(dve.temporal[0].is_empty());
    let x = uniform(&mut rng, &[5, 8], -1.0, 1.0);
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let v = tape.constant(x).unwrap();
    let a = dve.forward(&cx, v, &[]).unwrap();
    let b = dve.spatial[0].forward(&cx, v, v).unwrap();
    assert_eq!(a.value().data(), b.value().data());
}

#[test]
fn dve_identical_previous_frame_is_finite_and_shape_preserving() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = BlockDims {
        dim: 8,
        heads: 2,
        ffn: 6,
        dropout: 0.0,
    };
    let dve = DynamicVisualEncoder::new(&mut Builder::new(&mut store, &mut rng), "dve", 1, 2, d).unwrap();
    let x = uniform(&mut rng, &[5, 8], -1.0, 1.0);
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let v = tape.constant(x).unwrap();
    let zero = tape.constant(Tensor::zeros(&[5, 8])).unwrap();
    let out = dve.forward(&cx, v, &[(v, zero)]).unwrap();
    assert_eq!(out.shape(), vec![5, 8]);
    assert!(out.value().all_finite());
    let bad = tape.constant(Tensor::zeros(&[5, 7])).unwrap();
    assert!(matches!(dve.forward(&cx, v, &[(bad, bad)]), Err(Error::Shape { .. })));
}

#[test]
fn single_word_utterance_is_finite() {
    let (model, store) = build(ModelConfig::tiny(VOCAB), 15);
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let out = model.forward(&cx, &input(16, 2, 0)).unwrap();
    assert_eq!(out.span_logits.shape(), vec![3, 1]);
    assert!(out.features.points_language.value().all_finite());
    assert!(out.features.visual.value().all_finite());
}

#[test]
fn total_loss_gradient_reaches_every_parameter() {
    for (name, config) in variants() {
        let (model, store) = build(config.clone(), 17);
        let x = input(18, config.frames, 5);
        let tape = Tape::new(Mode::Eval, 0);
        let cx = Ctx::new(&tape, &store, true);
        let out = model.forward(&cx, &x).unwrap();
        let gt = Box3D::axis_aligned(out.seeds[0], [1.5, 1.5, 1.5]);
        let loss = scene_loss(&out, &gt, &spans(6), &LossWeights::default(), config.temperature).unwrap();
        let grads = cx.param_grads(tape.backward(loss.total).unwrap());
        for id in store.ids() {
            let g = grads[id.index()].as_ref();
            let nz = g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
            assert!(nz, "{name}: no gradient reaches {}", store.name(id));
        }
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let (model, store) = build(ModelConfig::tiny(VOCAB), 19);
    let x = input(20, 2, 4);
    let t64 = Tape::new(Mode::Eval, 0);
    let a = model.forward(&Ctx::new(&t64, &store, false), &x).unwrap();
    let s32 = store.cast::<f32>();
    let t32 = Tape::new(Mode::Eval, 0);
    let b = model.forward(&Ctx::new(&t32, &s32, false), &x).unwrap();
    assert_eq!(a.queries.selected, b.queries.selected);
    for (p, q) in a.boxes.value().data().iter().zip(b.boxes.value().data()) {
        assert!((p - *q as f64).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn target_selection_is_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let q = uniform(&mut rng, &[n, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let i = select_target(&q, &w, (2, 3));
        prop_assert_eq!(select_target(&q.map(|x| x * k), &w.map(|x| x * k), (2, 3)), i);
    }

    #[test]
    fn selected_queries_are_the_top_scores(scores in prop::collection::vec(0.0f64..1.0, 1..30), frac in 0.0f64..1.0) {
        let n = ((scores.len() as f64 * frac) as usize).max(1);
        let sel = select_queries(&scores, n).unwrap();
        prop_assert_eq!(sel.len(), n);
        let worst = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !sel.contains(i)) {
            prop_assert!(scores[i] <= worst);
        }
    }
}
