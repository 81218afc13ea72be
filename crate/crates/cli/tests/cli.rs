use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use wildground_cli::ablate::{self, pooled_std, stat, AblationOptions, Suite, Variant};
use wildground_cli::config::parse_pairs;
use wildground_cli::train::{LAST, LOSS_HEADER, LOSS_LOG};
use wildground_cli::{train, NonFiniteLoss, Preset, RunConfig, TrainOptions, Trainer};
use wildground_core::checkpoint::Checkpoint;
use wildground_core::metrics::{parse_records_csv, parse_summary_csv, EvalRecord, EvalSummary};
use wildground_scenes::dataset::DatasetOptions;
use wildground_scenes::{build_dataset, Difficulty, Vocabulary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wildground"))
}

fn dataset(dir: &Path, n_train: usize, n_test: usize, difficulty: Difficulty) -> PathBuf {
    let out = dir.join("data");
    build_dataset(
        &out,
        &DatasetOptions {
            n_train,
            n_test,
            seed: 0,
            difficulty,
            ..Default::default()
        },
    )
    .unwrap();
    out
}

fn tiny(data: &Path) -> RunConfig {
    let mut c = RunConfig::new(data.to_path_buf(), Preset::Tiny, Vocabulary::standard().len());
    c.epochs = 2;
    c.batch_size = 4;
    c.checkpoint_every = 1;
    c.val_fraction = 0.2;
    c
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_text_round_trips_and_ignores_comments() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 8, 2, Difficulty::Default);
    let text = format!(
        "# comment line\ndataset = {}\npreset = small  # trailing comment\n\nepochs = 7\nfusion = concat\nuse_dve = false\n",
        data.display()
    );
    let c = RunConfig::parse(&text, Path::new("/")).unwrap();
    assert_eq!(c.epochs, 7);
    assert_eq!(c.model.dim, 96);
    assert!(!c.model.use_dve);
    assert_eq!((c.lr, c.point_lr, c.batch_size), (1e-4, 1e-3, 8));
    assert_eq!(RunConfig::parse(&c.to_text(), Path::new("/")).unwrap(), c);
    assert!(RunConfig::parse(&format!("{text}\nbogus = 1\n"), Path::new("/")).is_err());
    assert!(RunConfig::parse("preset = desk\n", Path::new("/")).is_err());
    assert!(RunConfig::parse("dataset = /nonexistent/dir\n", Path::new("/")).is_err());
    assert!(parse_pairs("no equals sign").is_err());
}

#[test]
fn decay_applies_from_three_quarters_of_the_epochs() {
    let mut c = RunConfig::new(PathBuf::new(), Preset::Tiny, 10);
    c.epochs = 40;
    let t = Trainer::new(c).unwrap();
    assert_eq!(t.cfg.decay_epoch(), 30);
    assert_eq!(t.lr_scale(29), 1.0);
    assert_eq!(t.lr_scale(30), 0.1);
}

#[test]
fn smoke_training_resume_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 10, 3, Difficulty::Default);
    let mut cfg = tiny(&data);
    cfg.epochs = 1;
    let t0 = Instant::now();
    let a = train(&cfg, &dir.path().join("a"), &TrainOptions::default()).unwrap();
    assert!(t0.elapsed().as_secs_f64() < 60.0);
    assert_eq!(a.steps, 2);

    // Same seed, same loss log; a two-epoch run resumed after one epoch matches one run straight through.
    cfg.epochs = 2;
    let straight = dir.path().join("straight");
    train(&cfg, &straight, &TrainOptions::default()).unwrap();
    let again = dir.path().join("again");
    train(&cfg, &again, &TrainOptions::default()).unwrap();
    let log = std::fs::read_to_string(straight.join(LOSS_LOG)).unwrap();
    assert_eq!(log, std::fs::read_to_string(again.join(LOSS_LOG)).unwrap());
    assert!(log.starts_with(LOSS_HEADER));
    assert_eq!(log.lines().count(), 1 + 4);

    let resumed = dir.path().join("resumed");
    let mut first = cfg.clone();
    first.epochs = 1;
    // The two-epoch schedule decays from epoch 1; the one-epoch leg must not decay earlier.
    first.lr_decay_at = 1.0;
    assert_eq!((first.decay_epoch(), cfg.decay_epoch()), (1, 1));
    train(&first, &resumed, &TrainOptions::default()).unwrap();
    let r = train(&cfg, &resumed, &TrainOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(r.steps, 4);
    assert_eq!(std::fs::read_to_string(resumed.join(LOSS_LOG)).unwrap(), log);
    let ck_a = Checkpoint::load(&straight.join(LAST)).unwrap();
    let ck_b = Checkpoint::load(&resumed.join(LAST)).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn checkpoint_round_trips_training_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20, 2, Difficulty::Default);
    let cfg = tiny(&data);
    let out = dir.path().join("run");
    train(&cfg, &out, &TrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&out.join(LAST)).unwrap();
    let mut fresh = Trainer::new(cfg).unwrap();
    fresh.restore(&ck).unwrap();
    assert_eq!(fresh.checkpoint(), ck);
    assert_eq!(fresh.step_count(), ck.scalar("adam.step").unwrap() as u64);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20, 2, Difficulty::Default);
    let mut cfg = tiny(&data);
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.inject_nan_at = Some(3);
    let out = dir.path().join("run");
    let err = train(&cfg, &out, &TrainOptions::default()).unwrap_err();
    let nf = err.downcast_ref::<NonFiniteLoss>().unwrap();
    assert_eq!(nf.step, 3);
    let ck = Checkpoint::load(&out.join(LAST)).unwrap();
    assert_eq!(ck.scalar("adam.step"), Some(2.0));
    assert_eq!(ck.scalar("train.epoch"), Some(1.0));
    let log = std::fs::read_to_string(out.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    // The binary reports the abort through its exit status.
    let cfg_path = dir.path().join("nan.cfg");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("bin"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(dir.path().join("bin").join(LAST).exists());
}

#[test]
fn binary_pipeline_stays_inside_out_directories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let st = bin()
        .args(["generate", "--train", "12", "--test", "3", "--seed", "5", "--difficulty", "motion-only", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("12 train + 3 test"));
    let before = files_under(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dataset = data\npreset = tiny\nepochs = 1\nbatch_size = 4\n").unwrap();
    let before_cfg: Vec<PathBuf> = before.iter().cloned().chain([cfg.clone()]).collect();
    let run = dir.path().join("run");
    let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let ev = dir.path().join("ev");
    let st = bin()
        .args(["eval", "--checkpoint"])
        .arg(run.join("best.ckpt"))
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stdout).contains("latency"));
    for f in files_under(dir.path()) {
        assert!(before_cfg.contains(&f) || f.starts_with(&run) || f.starts_with(&ev), "stray file {}", f.display());
    }
    let st = bin().args(["infer", "--checkpoint"]).arg(run.join("best.ckpt")).arg("--scene").arg(data.join("test/scene_00000.wgs")).output().unwrap();
    assert!(String::from_utf8_lossy(&st.stdout).starts_with("box x"));
}

#[test]
fn eval_outputs_reparse_to_the_same_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20, 5, Difficulty::Default);
    for (baseline, expect_one) in [("oracle", true), ("random", false)] {
        let out = dir.path().join(baseline);
        let st = bin().args(["eval", "--baseline", baseline, "--dataset"]).arg(&data).arg("--out").arg(&out).output().unwrap();
        assert!(st.status.success());
        let summary = parse_summary_csv(&std::fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
        let recs = parse_records_csv(&std::fs::read_to_string(out.join("records.csv")).unwrap()).unwrap();
        let acc = summary.iter().find(|(k, _)| k == "acc@0.25").unwrap().1;
        let miou = summary.iter().find(|(k, _)| k == "miou").unwrap().1;
        let n = recs.len() as f64;
        assert_eq!(acc, recs.iter().filter(|r| r.1 >= 0.25).count() as f64 / n);
        assert!((miou - recs.iter().map(|r| r.1).sum::<f64>() / n).abs() < 1e-12);
        if expect_one {
            assert_eq!(acc, 1.0);
        }
    }
}

#[test]
fn gradcheck_command_lists_every_op_and_fails_on_a_fault() {
    let st = bin().args(["gradcheck", "--scope", "geometry"]).output().unwrap();
    let text = String::from_utf8_lossy(&st.stdout);
    assert!(st.status.success(), "{text}");
    let n = wildground_core::gradcheck::registry()
        .iter()
        .filter(|c| c.scope == wildground_core::gradcheck::Scope::Geometry)
        .count();
    assert_eq!(text.lines().filter(|l| l.starts_with("ok")).count(), n);
    assert!(text.contains(&format!("{n} ops checked, 0 above")));
    let name = wildground_core::gradcheck::registry()
        .into_iter()
        .find(|c| c.scope == wildground_core::gradcheck::Scope::Geometry)
        .unwrap()
        .name;
    let st = bin().args(["gradcheck", "--scope", "geometry", "--fault", name]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(bin().args(["gradcheck", "--scope", "nonsense"]).status().unwrap().code() != Some(0));
}

#[test]
fn ablation_rows_cover_every_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = RunConfig::new(PathBuf::new(), Preset::Tiny, Vocabulary::standard().len());
    base.epochs = 1;
    base.batch_size = 4;
    let suite = Suite {
        name: "probe",
        difficulty: Difficulty::MotionOnly,
        variants: vec![
            Variant { name: "k1".into(), overrides: vec![("frames", "1".into())] },
            Variant { name: "k2".into(), overrides: vec![("frames", "2".into())] },
            Variant { name: "broken".into(), overrides: vec![("queries", "999".into())] },
        ],
    };
    let opts = AblationOptions {
        out: dir.path().to_path_buf(),
        repeats: 2,
        n_train: 8,
        n_test: 2,
        data_seed: 0,
        verbose: false,
    };
    let rows = ablate::ablate(&base, &[suite], &opts).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| !r.error.is_empty()).count(), 2);
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    assert_eq!(std::fs::read_to_string(dir.path().join("rows.csv")).unwrap().lines().count(), 1 + 6);
    for s in ["motion", "color", "matrix"] {
        assert!(ablate::suite(s).is_ok());
    }
    assert_eq!(ablate::suite("matrix").unwrap().variants.len(), 9 + 3 + 2);
}

#[test]
fn pooled_std_and_sample_std() {
    let a = stat(&[1.0, 2.0, 3.0]);
    assert_eq!((a.mean, a.std), (2.0, 1.0));
    let b = stat(&[2.0, 2.0, 2.0]);
    assert!((pooled_std(&a, &b) - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn summary_of_records_matches_hand_counts() {
    use wildground_core::geometry::Box3D;
    let unit = Box3D::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
    let recs = vec![
        EvalRecord::new("a", unit, unit),
        EvalRecord::new("b", unit.translated([0.5, 0.0, 0.0]), unit),
        EvalRecord::new("c", unit.translated([5.0, 0.0, 0.0]), unit),
    ];
    let s = EvalSummary::from_records(&recs).unwrap();
    assert_eq!(s.acc_025, 2.0 / 3.0);
    assert_eq!(s.acc_05, 1.0 / 3.0);
    assert!((s.miou - (1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
}
