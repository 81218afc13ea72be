use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildground_core::gradcheck::{self, Scope};
use wildground_core::nn::{Builder, Ctx, ParamStore};
use wildground_core::pointnet::{
    ball_query, farthest_point_sample, PointCloud, PointEncoder, PointEncoderConfig, SetAbstraction, StageConfig,
};
use wildground_core::{Mode, Tape, Tensor};

fn cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn d(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn covering_radius(pts: &[[f64; 3]], centers: &[usize]) -> f64 {
    pts.iter()
        .map(|p| centers.iter().map(|&c| d(p, &pts[c])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

#[test]
fn fps_is_a_two_approximation_of_k_center() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let pts = cloud(&mut rng, 9, 2.0);
        let k = rng.gen_range(2..5);
        let fps = farthest_point_sample(&pts, k).unwrap();
        let best = subsets(pts.len(), k)
            .iter()
            .map(|s| covering_radius(&pts, s))
            .fold(f64::INFINITY, f64::min);
        assert!(covering_radius(&pts, &fps) <= 2.0 * best + 1e-12);
    }
}

#[test]
fn fps_each_pick_is_the_farthest_remaining() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = cloud(&mut rng, 200, 5.0);
    let fps = farthest_point_sample(&pts, 40).unwrap();
    assert_eq!(fps[0], 0);
    for step in 1..fps.len() {
        let gap = |i: usize| fps[..step].iter().map(|&c| d(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
        let best = (0..pts.len()).map(gap).fold(0.0, f64::max);
        assert!((gap(fps[step]) - best).abs() < 1e-12);
    }
    let mut uniq = fps.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), fps.len());
}

#[test]
fn ball_query_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = cloud(&mut rng, 300, 3.0);
    let centers = cloud(&mut rng, 20, 3.5);
    let (radius, k) = (0.9, 8);
    let groups = ball_query(&pts, &centers, radius, k).unwrap();
    for (c, g) in centers.iter().zip(&groups) {
        assert_eq!(g.len(), k);
        let mut inside: Vec<usize> = (0..pts.len()).filter(|&i| d(&pts[i], c) <= radius).collect();
        inside.sort_by(|&a, &b| d(&pts[a], c).partial_cmp(&d(&pts[b], c)).unwrap());
        if inside.is_empty() {
            let nearest = (0..pts.len())
                .min_by(|&a, &b| d(&pts[a], c).partial_cmp(&d(&pts[b], c)).unwrap())
                .unwrap();
            assert!(g.iter().all(|&i| i == nearest));
            continue;
        }
        let take = inside.len().min(k);
        assert_eq!(&g[..take], &inside[..take]);
        assert!(g[take..].iter().all(|&i| i == inside[0]));
    }
    assert!(ball_query(&pts, &centers, 0.0, k).is_err());
    assert!(ball_query(&[], &centers, 1.0, k).is_err());
}

#[test]
fn identical_group_pools_to_single_point_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let cfg = StageConfig {
        seeds: 1,
        radius: 1.0,
        neighbors: 5,
        mlp: vec![7, 4],
    };
    let sa = SetAbstraction::new(&mut Builder::new(&mut store, &mut rng), "sa", 1, cfg).unwrap();
    let pts = vec![[0.3, -0.2, 0.1]; 3];
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let f = cx.constant(Tensor::new(vec![3, 1], vec![0.7; 3]).unwrap()).unwrap();
    let (_, pooled) = sa.forward(&cx, &pts, f).unwrap();
    // A single point at the center sees zero local offset.
    let mut h = cx.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 0.7]).unwrap()).unwrap();
    for l in &sa.layers {
        h = l.forward(&cx, h).unwrap().relu().unwrap();
    }
    assert_eq!(tape.value(pooled).data(), tape.value(h).data());
}

fn encode(pc: &PointCloud, seed: u64) -> (Vec<[f64; 3]>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = PointEncoder::new(&mut Builder::new(&mut store, &mut rng), "pc", PointEncoderConfig::desk(288), 288).unwrap();
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, &store, false);
    let out = enc.forward(&cx, pc).unwrap();
    (out.positions, tape.value(out.features).as_ref().clone())
}

#[test]
fn desk_encoder_emits_64_seeds_of_288_channels_inside_the_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xyz = cloud(&mut rng, 1500, 15.0);
    let inten = (0..xyz.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let pc = PointCloud::new(xyz.clone(), inten, 0).unwrap();
    let (pos, feats) = encode(&pc, 1);
    assert_eq!(feats.shape(), &[64, 288]);
    assert!(feats.all_finite());
    for k in 0..3 {
        let lo = xyz.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = xyz.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        assert!(pos.iter().all(|p| p[k] >= lo && p[k] <= hi));
    }
}

#[test]
fn encoder_ignores_point_order_beyond_the_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xyz = cloud(&mut rng, 600, 10.0);
    let inten: Vec<f64> = (0..xyz.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut order: Vec<usize> = (1..xyz.len()).collect();
    order.shuffle(&mut rng);
    order.insert(0, 0);
    let a = PointCloud::new(xyz.clone(), inten.clone(), 0).unwrap();
    let b = PointCloud::new(order.iter().map(|&i| xyz[i]).collect(), order.iter().map(|&i| inten[i]).collect(), 0).unwrap();
    let (pa, fa) = encode(&a, 2);
    let (pb, fb) = encode(&b, 2);
    assert_eq!(pa, pb);
    let diff = fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max diff {diff}");
}

#[test]
fn mismatched_encoder_dims_are_config_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    assert!(PointEncoder::new(&mut Builder::new(&mut store, &mut rng), "pc", PointEncoderConfig::desk(128), 288).is_err());
    assert!(PointCloud::new(vec![], vec![], 0).is_err());
    assert!(PointCloud::new(vec![[0.0; 3]], vec![], 0).is_err());
}

#[test]
fn set_abstraction_gradients_pass() {
    let reports = gradcheck::run(&[Scope::Model], 11, None);
    let r = reports.iter().find(|r| r.name == "set_abstraction").unwrap();
    assert!(r.passed(), "{} {:?}", r.max_rel_err, r.error);
}

proptest! {
    #[test]
    fn ball_query_members_lie_within_radius(seed in any::<u64>(), radius in 0.2f64..2.0, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, 80, 2.0);
        let centers = cloud(&mut rng, 6, 2.0);
        for (c, g) in centers.iter().zip(ball_query(&pts, &centers, radius, k).unwrap()) {
            prop_assert_eq!(g.len(), k);
            let any_inside = pts.iter().any(|p| d(p, c) <= radius);
            if any_inside {
                prop_assert!(g.iter().all(|&i| d(&pts[i], c) <= radius));
            }
        }
    }

    #[test]
    fn fps_picks_are_distinct_until_exhausted(seed in any::<u64>(), n in 1usize..40, s in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, n, 3.0);
        let f = farthest_point_sample(&pts, s).unwrap();
        prop_assert_eq!(f.len(), s);
        let head = &f[..s.min(n)];
        let mut u = head.to_vec();
        u.sort_unstable();
        u.dedup();
        prop_assert_eq!(u.len(), head.len());
    }
}
