use std::collections::HashMap;
use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildground_core::geometry::{point_in_box, points_in_box};
use wildground_scenes::dataset::{covered, dataset_crc, generate_splits, DatasetOptions, MIN_TRAIN_OCCURRENCES};
use wildground_scenes::format::{MAGIC, VERSION};
use wildground_scenes::generate::MIN_BOX_POINTS;
use wildground_scenes::vocab::NOT_MENTIONED;
use wildground_scenes::{
    build_dataset, generate_scene, load_split, read_scene, resolve, scene_from_bytes, scene_to_bytes, write_scene,
    Constraints, DatasetManifest, Difficulty, Error, GeneratorConfig, Motion, Split, Vocabulary,
};

fn cfg() -> GeneratorConfig {
    GeneratorConfig::default()
}

#[test]
fn same_seed_gives_identical_bytes() {
    for d in Difficulty::ALL {
        let a = scene_to_bytes(&generate_scene(7, d, &cfg()).unwrap()).unwrap();
        let b = scene_to_bytes(&generate_scene(7, d, &cfg()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = scene_to_bytes(&generate_scene(8, d, &cfg()).unwrap()).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn thousand_scenes_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let d = Difficulty::ALL[i % 3];
        let mut c = cfg();
        c.frames = rng.gen_range(1..4);
        let s = generate_scene(rng.gen(), d, &c).unwrap();
        let p = dir.path().join("s.wgs");
        write_scene(&s, &p).unwrap();
        assert_eq!(read_scene(&p).unwrap(), s);
    }
}

#[test]
fn every_corrupted_byte_is_a_checksum_error() {
    let bytes = scene_to_bytes(&generate_scene(3, Difficulty::Default, &cfg()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut positions: Vec<usize> = (MAGIC.len()..MAGIC.len() + 30).collect();
    positions.extend((0..300).map(|_| rng.gen_range(MAGIC.len()..bytes.len())));
    positions.extend(bytes.len() - 4..bytes.len());
    for p in positions {
        let mut b = bytes.clone();
        b[p] ^= 1 << rng.gen_range(0..8);
        assert!(matches!(scene_from_bytes(&b), Err(Error::Checksum { .. })), "byte {p}");
    }
}

#[test]
fn truncation_version_and_magic_errors_are_distinct() {
    let bytes = scene_to_bytes(&generate_scene(4, Difficulty::Default, &cfg()).unwrap()).unwrap();
    for n in [0, 3, 10, 26, 27, 500, bytes.len() - 1] {
        assert!(matches!(scene_from_bytes(&bytes[..n]), Err(Error::Truncated(_))), "length {n}");
    }
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(scene_from_bytes(&b), Err(Error::BadMagic)));
    // A well-formed header from a later format revision.
    let mut b = bytes.clone();
    b[6..10].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let hc = crc32fast::hash(&b[..22]);
    b[22..26].copy_from_slice(&hc.to_le_bytes());
    assert!(matches!(
        scene_from_bytes(&b),
        Err(Error::Version { found, expected }) if found == VERSION + 1 && expected == VERSION
    ));
}

#[test]
fn writer_rejects_scenes_without_actors() {
    let mut s = generate_scene(5, Difficulty::Default, &cfg()).unwrap();
    s.actors.clear();
    assert!(matches!(scene_to_bytes(&s), Err(Error::Invalid(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(write_scene(&s, &dir.path().join("x.wgs")).is_err());
}

#[test]
fn generated_scenes_satisfy_the_invariants() {
    let vocab = Vocabulary::standard();
    let mut sizes = HashMap::new();
    for seed in 0..300u64 {
        let d = Difficulty::ALL[seed as usize % 3];
        let s = generate_scene(seed, d, &cfg()).unwrap();
        s.validate().unwrap();
        assert!((3..=8).contains(&s.actors.len()));
        for f in &s.frames {
            assert!((500..=4000).contains(&f.points.len()));
            assert_eq!((f.height, f.width), (64, 64));
        }
        let cur = s.current();
        let c = Constraints::parse(&s.tokens, &vocab).unwrap();
        assert_eq!(resolve(&s, &c), vec![s.target], "seed {seed}");
        match d {
            Difficulty::ColorOnly => assert!(c.color.is_some() && c.count() == 1),
            Difficulty::MotionOnly => assert!(c.motion.is_some() && c.count() == 1),
            Difficulty::Default => assert!(c.count() >= 1),
        }
        *sizes.entry(c.count()).or_insert(0) += 1;
        let words = vocab.decode(&s.tokens).unwrap();
        assert_eq!(*words.last().unwrap(), NOT_MENTIONED);
        let spans = s.token_spans();
        assert_eq!(spans.attributes.len(), c.count());
        for &(a, _) in &spans.attributes {
            assert!(!["the", "in", "is", "a"].contains(&words[a]));
        }
        let target = s.target_actor().unwrap();
        let gt = s.gt_box();
        assert!((gt.x - target.position(cur)[0]).abs() < 1e-6);
        let pts: Vec<[f64; 3]> = s.frames[cur].points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        let inside = points_in_box(&pts, &gt).iter().filter(|&&b| b).count();
        assert!(inside >= MIN_BOX_POINTS, "seed {seed}: {inside} points in the target box");
        for a in &s.actors {
            let p = a.position(cur);
            assert!(p[0].hypot(p[1]) <= 30.0);
            for w in a.positions.windows(2) {
                let step = ((w[1][0] - w[0][0]) as f64).hypot((w[1][1] - w[0][1]) as f64);
                match a.motion {
                    Motion::Walking | Motion::Riding => assert!(step >= 0.4),
                    Motion::Standing | Motion::Sitting => assert!(step <= 0.05),
                    Motion::Waving => assert!(step <= 0.05),
                }
            }
            if d == Difficulty::MotionOnly {
                assert!(matches!(a.motion, Motion::Standing | Motion::Walking));
            }
        }
    }
    assert!(sizes.keys().any(|&k| k >= 2), "default scenes never need two attributes: {sizes:?}");
}

#[test]
fn image_shows_target_color_and_intensity_is_bounded() {
    let s = generate_scene(11, Difficulty::ColorOnly, &cfg()).unwrap();
    let cur = s.current();
    let mut by_color: HashMap<u8, Vec<f32>> = HashMap::new();
    for a in &s.actors {
        let b = a.bbox(cur);
        for p in &s.frames[cur].points {
            if point_in_box([p[0] as f64, p[1] as f64, p[2] as f64], &b) {
                by_color.entry(a.color.code()).or_default().push(p[3]);
            }
        }
    }
    // The image has the actor colour at the actor's footprint.
    let t = s.target_actor().unwrap();
    let f = &s.frames[cur];
    let p = t.position(cur);
    let (r, c) = (((16.0 - p[0]) / 14.0 * 64.0) as usize, ((7.0 - p[1]) / 14.0 * 64.0) as usize);
    let px = &f.rgb[(r * 64 + c) * 3..(r * 64 + c) * 3 + 3];
    assert_eq!(px, t.color.rgb());
    assert!(by_color.values().all(|v| v.iter().all(|&i| (0.0..=1.0).contains(&i))));
}

#[test]
fn generation_throughput() {
    let t = Instant::now();
    let n = 200;
    for seed in 0..n {
        generate_scene(1000 + seed, Difficulty::Default, &cfg()).unwrap();
    }
    let rate = n as f64 / t.elapsed().as_secs_f64();
    assert!(rate >= 50.0, "{rate:.1} scenes/s");
}

#[test]
fn dataset_split_rules() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        n_train: 40,
        n_test: 10,
        seed: 3,
        ..Default::default()
    };
    let m = build_dataset(dir.path(), &opts).unwrap();
    assert_eq!((m.train.len(), m.test.len()), (40, 10));
    assert_eq!(m.train.len(), 4 * m.test.len());
    assert!(m.train.iter().all(|p| !m.test.contains(p)));
    let again = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(again, m);
    assert_eq!(dataset_crc(&m).unwrap(), m.crc);
    let train = load_split(&m, Split::Train).unwrap();
    let test = load_split(&m, Split::Test).unwrap();
    let mut counts = HashMap::new();
    for s in &train {
        for &t in &s.tokens {
            *counts.entry(t).or_insert(0usize) += 1;
        }
    }
    for s in &test {
        assert!(covered(&counts, s));
        assert!(s.tokens.iter().all(|t| counts[t] >= MIN_TRAIN_OCCURRENCES));
    }
    let train_seeds: Vec<u64> = train.iter().map(|s| s.seed).collect();
    assert!(test.iter().all(|s| !train_seeds.contains(&s.seed)));
    assert_eq!(m.vocab().unwrap(), Vocabulary::standard());

    let dir2 = tempfile::tempdir().unwrap();
    let m2 = build_dataset(dir2.path(), &opts).unwrap();
    assert_eq!(m2.crc, m.crc);
    let other = build_dataset(dir2.path(), &DatasetOptions { seed: 4, ..opts.clone() }).unwrap();
    assert_ne!(other.crc, m.crc);
}

#[test]
fn coverage_rule_is_enforced_by_resampling() {
    // A single training scene cannot cover every word of arbitrary test scenes twice.
    let opts = DatasetOptions {
        n_train: 1,
        n_test: 3,
        seed: 0,
        ..Default::default()
    };
    assert!(matches!(generate_splits(&opts), Err(Error::Unsatisfiable(_))));
    let opts = DatasetOptions {
        n_train: 0,
        ..opts
    };
    assert!(generate_splits(&opts).is_err());
}

#[test]
fn manifest_rejects_mismatched_listings() {
    let text = "format: wildground-manifest\nversion: 1\nseed: 0\ndifficulty: default\nframes: 2\ntrain: 2\ntest: 1\nvocabulary: vocab.txt\ncrc: 00000000\nscenes:\ntrain/a.wgs\ntest/b.wgs\n";
    assert!(DatasetManifest::parse(text, std::path::Path::new(".")).is_err());
    let text = text.replace("train: 2", "train: 1");
    assert!(DatasetManifest::parse(&text, std::path::Path::new(".")).is_ok());
    assert!(DatasetManifest::parse(&text.replace("test/b", "other/b"), std::path::Path::new(".")).is_err());
}

#[test]
fn vocabulary_file_round_trip() {
    let v = Vocabulary::standard();
    assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    assert_eq!(v.word(v.len() as u16 - 1), Some(NOT_MENTIONED));
    assert!(Vocabulary::parse("a\nb\na\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_seed_and_frame_count_generates_a_valid_unique_scene(seed in any::<u64>(), frames in 1usize..4, d in 0usize..3) {
        let mut c = cfg();
        c.frames = frames;
        let s = generate_scene(seed, Difficulty::ALL[d], &c).unwrap();
        prop_assert_eq!(s.frames.len(), frames);
        let cons = Constraints::parse(&s.tokens, &Vocabulary::standard()).unwrap();
        prop_assert_eq!(resolve(&s, &cons), vec![s.target]);
        prop_assert_eq!(scene_from_bytes(&scene_to_bytes(&s).unwrap()).unwrap(), s);
    }
}
