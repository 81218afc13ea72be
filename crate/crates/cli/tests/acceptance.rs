//! Acceptance suite: one PASS/FAIL line per headline criterion.
//!
//! Runs the full benchmark (dataset generation, end-to-end training, the
//! ablation suites), so expect it to take well over an hour on one core.
//! Artifacts are kept under `$CARGO_TARGET_TMPDIR/acceptance`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wildground_cli::ablate::{ablate, pooled_std, suite, summarize, AblationOptions, Row, Stat};
use wildground_cli::eval::{model_summary, oracle_records, random_records};
use wildground_cli::train::{load_model, load_samples, Trainer, LAST, LOSS_HEADER, LOSS_LOG};
use wildground_cli::{train, NonFiniteLoss, Preset, RunConfig, TrainOptions};
use wildground_core::checkpoint::Checkpoint;
use wildground_core::geometry::{monte_carlo_iou, random_box, rotated_iou_3d, Box3D};
use wildground_core::losses::{total_loss, LossBreakdown, LossWeights};
use wildground_core::metrics::{accuracy_at, mean_iou, EvalRecord, EvalSummary};
use wildground_scenes::dataset::DatasetOptions;
use wildground_scenes::{
    build_dataset, generate_scene, load_split, scene_from_bytes, scene_to_bytes, DatasetManifest, Difficulty,
    GeneratorConfig, Split, Vocabulary,
};

const GRADCHECK_BUDGET_S: f64 = 300.0;
const GRADCHECK_MIN_INSTANCES: usize = 20;
const MC_SAMPLES: usize = 1_000_000;
const MC_PAIRS: usize = 200;
const MC_TOL: f64 = 1e-2;
const HAND_TOL: f64 = 1e-9;
const E2E_TRAIN: usize = 500;
const E2E_TEST: usize = 125;
const E2E_EPOCHS: usize = 14;
const E2E_BUDGET_S: f64 = 1800.0;
const E2E_MIN_ACC: f64 = 0.70;
const E2E_MIN_MIOU: f64 = 0.45;
const RANDOM_MAX_ACC: f64 = 0.05;
const ABLATION_SEEDS: usize = 3;
const ABLATION_EPOCHS: usize = 15;
const ROUND_TRIP_SCENES: u64 = 1000;

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clearing the previous acceptance run");
    }
    std::fs::create_dir_all(&dir).expect("creating the acceptance directory");
    dir
}

fn dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetManifest> {
    Ok(build_dataset(
        dir,
        &DatasetOptions {
            n_train,
            n_test,
            seed,
            ..Default::default()
        },
    )?)
}

fn vocab() -> usize {
    Vocabulary::standard().len()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Every summary produced by the suite, for the Acc@0.5 ≤ Acc@0.25 sweep.
#[derive(Default)]
struct Runs {
    summaries: Vec<(String, f64, f64)>,
    e2e_loss_log: Option<PathBuf>,
}

impl Runs {
    fn note(&mut self, name: &str, s: &EvalSummary) {
        self.summaries.push((name.to_string(), s.acc_025, s.acc_05));
    }
}

fn gradients() -> Result<Outcome> {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_wildground"))
        .args(["gradcheck", "--scope", "all"])
        .output()?;
    let secs = t0.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let mut ops = 0;
    let mut few = Vec::new();
    for line in text.lines().filter(|l| l.starts_with("ok") || l.starts_with("FAIL")) {
        ops += 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        let n: usize = words
            .iter()
            .position(|w| *w == "instances")
            .and_then(|i| words.get(i + 1))
            .and_then(|w| w.parse().ok())
            .with_context(|| format!("no instance count in {line:?}"))?;
        if n < GRADCHECK_MIN_INSTANCES {
            few.push(words[2].to_string());
        }
    }
    let failed = text.lines().filter(|l| l.starts_with("FAIL")).count();
    let code = out.status.code();
    verdict(
        code == Some(0) && secs < GRADCHECK_BUDGET_S && few.is_empty() && ops > 0,
        format!("exit {code:?}, {ops} ops, {failed} above tolerance, ops under {GRADCHECK_MIN_INSTANCES} instances {few:?}, {secs:.1}s"),
    )
}

fn geometry() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..MC_PAIRS {
        let a = random_box(&mut rng, 0.5, 0.5, 2.0);
        let b = random_box(&mut rng, 0.5, 0.5, 2.0);
        let mc = monte_carlo_iou(&a, &b, MC_SAMPLES, &mut rng);
        worst = worst.max((rotated_iou_3d(&a, &b) - mc).abs());
    }
    let unit = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let same = rotated_iou_3d(&unit, &unit);
    let half = rotated_iou_3d(&unit, &unit.translated([0.5, 0.0, 0.0]));
    let hand = (same - 1.0).abs() <= HAND_TOL && (half - 1.0 / 3.0).abs() <= HAND_TOL;
    verdict(
        worst < MC_TOL && hand,
        format!("max |exact - mc| {worst:.2e} over {MC_PAIRS} pairs; identical {same}; half offset {half}"),
    )
}

fn metrics(runs: &Runs) -> Result<Outcome> {
    let gt = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let records: Vec<EvalRecord> = [1.0, 0.5, 0.25, 0.2, 0.0]
        .iter()
        .enumerate()
        .map(|(i, &iou)| EvalRecord {
            scene_id: format!("r{i}"),
            pred: gt,
            gt,
            iou,
            aabb_iou: iou,
        })
        .collect();
    let acc25 = accuracy_at(&records, 0.25)?;
    let acc5 = accuracy_at(&records, 0.5)?;
    let miou = mean_iou(&records)?;
    let hand_ok = acc25 == 3.0 / 5.0 && acc5 == 2.0 / 5.0 && (miou - 1.95 / 5.0).abs() < 1e-12;
    let bad: Vec<&str> = runs
        .summaries
        .iter()
        .filter(|(_, a25, a5)| a5 > a25)
        .map(|(n, _, _)| n.as_str())
        .collect();
    verdict(
        hand_ok && bad.is_empty(),
        format!(
            "hand set acc@0.25 {acc25} acc@0.5 {acc5} miou {miou:.6}; acc@0.5 <= acc@0.25 on {} of {} runs",
            runs.summaries.len() - bad.len(),
            runs.summaries.len()
        ),
    )
}

fn end_to_end(dir: &Path, runs: &mut Runs) -> Result<Outcome> {
    let data = dir.join("e2e-data");
    let manifest = dataset(&data, E2E_TRAIN, E2E_TEST, 0)?;
    let mut cfg = RunConfig::new(data.clone(), Preset::Desk, vocab());
    cfg.epochs = E2E_EPOCHS;
    cfg.model.frames = 2;
    cfg.model.use_dve = true;
    cfg.model.use_tfi = true;
    let out = dir.join("e2e-run");
    let t0 = Instant::now();
    train(&cfg, &out, &TrainOptions::default())?;
    let (model, store) = load_model(&cfg, &out.join(wildground_cli::train::BEST))?;
    let samples = load_samples(&manifest, Split::Test, cfg.model.frames)?;
    let (model_s, _) = model_summary(&model, &store, &samples)?;
    let secs = t0.elapsed().as_secs_f64();
    runs.note("e2e", &model_s);
    runs.e2e_loss_log = Some(out.join(LOSS_LOG));

    let scenes = load_split(&manifest, Split::Test)?;
    let oracle = EvalSummary::from_records(&oracle_records(&manifest.test, &scenes, &manifest.vocab()?)?)?;
    let random = EvalSummary::from_records(&random_records(&manifest.test, &scenes, 0))?;
    runs.note("oracle", &oracle);
    runs.note("random", &random);
    verdict(
        model_s.acc_025 >= E2E_MIN_ACC
            && model_s.miou >= E2E_MIN_MIOU
            && secs <= E2E_BUDGET_S
            && oracle.acc_025 == 1.0
            && random.acc_025 <= RANDOM_MAX_ACC,
        format!(
            "model acc@0.25 {:.4} (>= {E2E_MIN_ACC}) miou {:.4} (>= {E2E_MIN_MIOU}) in {secs:.0}s (<= {E2E_BUDGET_S:.0}); \
             oracle acc@0.25 {:.4}; random acc@0.25 {:.4} (<= {RANDOM_MAX_ACC})",
            model_s.acc_025, model_s.miou, oracle.acc_025, random.acc_025
        ),
    )
}

fn ablations(dir: &Path, runs: &mut Runs) -> Result<Outcome> {
    let mut base = RunConfig::new(PathBuf::new(), Preset::Small, vocab());
    base.epochs = ABLATION_EPOCHS;
    let opts = AblationOptions {
        out: dir.join("ablate"),
        repeats: ABLATION_SEEDS,
        n_train: E2E_TRAIN,
        n_test: E2E_TEST,
        data_seed: 0,
        verbose: false,
    };
    let rows: Vec<Row> = ablate(&base, &[suite("motion")?, suite("color")?], &opts)?;
    for r in &rows {
        runs.summaries.push((format!("{}/{}/{}", r.suite, r.variant, r.seed), r.acc_025, r.acc_05));
    }
    let errors = rows.iter().filter(|r| !r.error.is_empty()).count();
    ensure!(errors == 0, "{errors} ablation runs failed; see {}", opts.out.join("rows.csv").display());
    let table = summarize(&rows);
    let get = |suite: &str, variant: &str| -> Result<Stat> {
        table
            .iter()
            .find(|(s, v, _)| s == suite && v == variant)
            .map(|(_, _, st)| st[0].clone())
            .with_context(|| format!("missing {suite}/{variant}"))
    };
    let comparisons = [
        ("motion", "dve-k2", "baseline-k1", false),
        ("color", "dve-tfi", "dve", false),
        ("color", "dve-tfi", "concat", false),
        ("color", "dve-tfi", "image-dominant", true),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, better, worse, allow_tie) in comparisons {
        let (a, b) = (get(s, better)?, get(s, worse)?);
        let gap = a.mean - b.mean;
        let sd = pooled_std(&a, &b);
        let ok = gap > sd && (allow_tie || gap > 0.0);
        pass &= ok;
        parts.push(format!(
            "{s}: {better} {:.3} vs {worse} {:.3} gap {gap:+.3} pooled sd {sd:.3} {}",
            a.mean,
            b.mean,
            if ok { "ok" } else { "miss" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn tiny_config(data: &Path) -> RunConfig {
    let mut c = RunConfig::new(data.to_path_buf(), Preset::Tiny, vocab());
    c.epochs = 2;
    c.batch_size = 4;
    c.checkpoint_every = 1;
    c.val_fraction = 0.2;
    c
}

fn determinism(dir: &Path) -> Result<Outcome> {
    let a = dataset(&dir.join("det-a"), 40, 10, 11)?;
    let b = dataset(&dir.join("det-b"), 40, 10, 11)?;
    let crc_ok = a.crc == b.crc;

    let cfg = tiny_config(&a.root);
    let (r1, r2) = (dir.join("det-run1"), dir.join("det-run2"));
    train(&cfg, &r1, &TrainOptions::default())?;
    train(&cfg, &r2, &TrainOptions::default())?;
    let log_ok = std::fs::read(r1.join(LOSS_LOG))? == std::fs::read(r2.join(LOSS_LOG))?;

    let ck = Checkpoint::load(&r1.join(LAST))?;
    let mut fresh = Trainer::new(cfg)?;
    fresh.restore(&ck)?;
    let ck_ok = fresh.checkpoint() == ck;

    let gen = GeneratorConfig::default();
    let mut mismatched = 0;
    for seed in 0..ROUND_TRIP_SCENES {
        let s = generate_scene(seed, Difficulty::Default, &gen)?;
        if scene_from_bytes(&scene_to_bytes(&s)?)? != s {
            mismatched += 1;
        }
    }
    verdict(
        crc_ok && log_ok && ck_ok && mismatched == 0,
        format!(
            "dataset crc {:08x}/{:08x}; loss logs identical {log_ok}; checkpoint round trip {ck_ok}; \
             {mismatched} of {ROUND_TRIP_SCENES} scenes differ after write/read",
            a.crc, b.crc
        ),
    )
}

fn loss_arithmetic(dir: &Path, runs: &Runs) -> Result<Outcome> {
    let ones = LossBreakdown {
        confidence: 1.0,
        giou: 1.0,
        box_l1: 1.0,
        contrastive: 1.0,
        soft_token: 1.0,
        total: 0.0,
    };
    let total = total_loss(&ones, &LossWeights::default());

    let (rows, bad) = match &runs.e2e_loss_log {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut lines = text.lines();
            ensure!(lines.next() == Some(LOSS_HEADER), "unexpected loss log header");
            let mut rows = 0;
            let mut bad = 0;
            for l in lines {
                rows += 1;
                let v: Vec<f64> = l.split(',').skip(1).map(|x| x.parse().unwrap_or(f64::NAN)).collect();
                if v.len() != 6 || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    bad += 1;
                }
            }
            (rows, bad)
        }
        None => (0, 0),
    };

    let data = dataset(&dir.join("nan-data"), 20, 2, 0)?;
    let mut cfg = tiny_config(&data.root);
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.inject_nan_at = Some(3);
    let out = dir.join("nan-run");
    let abort = match train(&cfg, &out, &TrainOptions::default()) {
        Err(e) => e.downcast_ref::<NonFiniteLoss>().map(|n| n.step),
        Ok(_) => None,
    };
    let kept = Checkpoint::load(&out.join(LAST)).ok().and_then(|c| c.scalar("adam.step"));
    let nan_ok = abort == Some(3) && kept == Some(2.0);
    verdict(
        total == 15.01 && rows > 0 && bad == 0 && nan_ok,
        format!(
            "total of unit parts {total}; {rows} logged steps with {bad} non-finite or negative; \
             injected NaN aborted at step {abort:?} keeping checkpoint at step {kept:?}"
        ),
    )
}

fn main() -> ExitCode {
    let dir = work_dir();
    let mut runs = Runs::default();
    let mut total = 0;
    let mut failed = 0;
    let mut report = |name: &str, r: Result<Outcome>| {
        let (ok, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        total += 1;
        failed += usize::from(!ok);
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    };
    report("gradient suite", gradients());
    report("geometry oracle", geometry());
    report("end-to-end learning", end_to_end(&dir, &mut runs));
    report("ablation directions", ablations(&dir, &mut runs));
    report("metric formulas", metrics(&runs));
    report("determinism and persistence", determinism(&dir));
    report("loss arithmetic", loss_arithmetic(&dir, &runs));
    println!("{} of {total} criteria passed", total - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
