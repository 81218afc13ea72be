//! Ablation suites: one training run per variant and seed, then a mean/std
//! comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use wildground_core::model::{Fusion, Temporal};
use wildground_scenes::dataset::{DatasetOptions, MANIFEST};
use wildground_scenes::{build_dataset, Difficulty, GeneratorConfig};

use crate::config::RunConfig;
use crate::train::{train, TrainOptions};

/// Frames stored in ablation datasets; variants read the most recent `K`.
pub const ABLATION_FRAMES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(&'static str, String)>,
}

fn v(name: &str, kv: &[(&'static str, &str)]) -> Variant {
    Variant {
        name: name.to_string(),
        overrides: kv.iter().map(|&(k, x)| (k, x.to_string())).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: &'static str,
    pub difficulty: Difficulty,
    pub variants: Vec<Variant>,
}

fn stage_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for k in 1..=3 {
        let k = k.to_string();
        out.push(v(&format!("baseline-k{k}"), &[("use_dve", "false"), ("use_tfi", "false"), ("frames", &k)]));
        out.push(v(&format!("dve-k{k}"), &[("use_dve", "true"), ("use_tfi", "false"), ("frames", &k)]));
        out.push(v(&format!("dve-tfi-k{k}"), &[("use_dve", "true"), ("use_tfi", "true"), ("frames", &k)]));
    }
    for f in [Fusion::VisionFirst, Fusion::ImageDominant, Fusion::Concat] {
        out.push(v(&format!("fusion-{f}"), &[("fusion", &f.to_string())]));
    }
    for t in [Temporal::InputConcat, Temporal::FeatureConcat] {
        out.push(v(&format!("temporal-{t}"), &[("temporal", &t.to_string())]));
    }
    out
}

/// Named suites; `matrix` is the full comparison on default scenes.
pub fn suite(name: &str) -> Result<Suite> {
    Ok(match name {
        "motion" => Suite {
            name: "motion",
            difficulty: Difficulty::MotionOnly,
            variants: vec![
                v("baseline-k1", &[("use_dve", "false"), ("use_tfi", "false"), ("frames", "1")]),
                v("dve-k2", &[("use_dve", "true"), ("use_tfi", "false"), ("frames", "2")]),
            ],
        },
        "color" => Suite {
            name: "color",
            difficulty: Difficulty::ColorOnly,
            variants: vec![
                v("dve", &[("use_tfi", "false")]),
                v("dve-tfi", &[("use_tfi", "true"), ("fusion", "ours")]),
                v("concat", &[("use_tfi", "true"), ("fusion", "concat")]),
                v("image-dominant", &[("use_tfi", "true"), ("fusion", "image-dominant")]),
            ],
        },
        "matrix" => Suite {
            name: "matrix",
            difficulty: Difficulty::Default,
            variants: stage_variants(),
        },
        _ => bail!("unknown ablation suite {name:?} (motion, color, matrix)"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub acc_025: f64,
    pub acc_05: f64,
    pub miou: f64,
    pub seconds: f64,
    /// Empty on success.
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation.
pub fn stat(xs: &[f64]) -> Stat {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Stat { mean, std: var.sqrt(), n }
}

/// Root mean square of the two standard deviations.
pub fn pooled_std(a: &Stat, b: &Stat) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub out: PathBuf,
    pub repeats: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub verbose: bool,
}

/// Generates (or reuses) the dataset for `difficulty` under `out/data`.
pub fn dataset_for(opts: &AblationOptions, difficulty: Difficulty) -> Result<PathBuf> {
    let dir = opts.out.join("data").join(difficulty.to_string());
    if !dir.join(MANIFEST).exists() {
        build_dataset(
            &dir,
            &DatasetOptions {
                n_train: opts.n_train,
                n_test: opts.n_test,
                seed: opts.data_seed,
                difficulty,
                generator: GeneratorConfig {
                    frames: ABLATION_FRAMES,
                    ..Default::default()
                },
            },
        )?;
    }
    Ok(dir)
}

fn run_one(base: &RunConfig, suite: &Suite, variant: &Variant, seed: u64, data: &Path, opts: &AblationOptions) -> Result<Row> {
    let mut cfg = base.clone();
    cfg.dataset = data.to_path_buf();
    cfg.seed = seed;
    for (k, x) in &variant.overrides {
        cfg.set(k, x)?;
    }
    cfg.validate()?;
    let out = opts.out.join("runs").join(suite.name).join(&variant.name).join(format!("seed{seed}"));
    let report = train(
        &cfg,
        &out,
        &TrainOptions {
            final_test: true,
            verbose: opts.verbose,
            ..Default::default()
        },
    )?;
    let t = report.test.expect("final test requested");
    Ok(Row {
        suite: suite.name.to_string(),
        variant: variant.name.clone(),
        seed,
        acc_025: t.acc_025,
        acc_05: t.acc_05,
        miou: t.miou,
        seconds: report.seconds,
        error: String::new(),
    })
}

/// Runs every variant of `suite` for each seed; failures become rows with an error.
pub fn run_suite(base: &RunConfig, suite: &Suite, opts: &AblationOptions) -> Result<Vec<Row>> {
    let data = dataset_for(opts, suite.difficulty)?;
    let mut rows = Vec::new();
    for variant in &suite.variants {
        for seed in 0..opts.repeats as u64 {
            let row = run_one(base, suite, variant, seed, &data, opts).unwrap_or_else(|e| Row {
                suite: suite.name.to_string(),
                variant: variant.name.clone(),
                seed,
                acc_025: f64::NAN,
                acc_05: f64::NAN,
                miou: f64::NAN,
                seconds: 0.0,
                error: format!("{e:#}").replace([',', '\n'], ";"),
            });
            if opts.verbose {
                eprintln!("{} {} seed {}: acc@0.25 {:.3} {}", row.suite, row.variant, seed, row.acc_025, row.error);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = String::from("suite,variant,seed,acc@0.25,acc@0.5,miou,seconds,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.1},{}",
            r.suite, r.variant, r.seed, r.acc_025, r.acc_05, r.miou, r.seconds, r.error
        );
    }
    s
}

/// Per-variant statistics over successful seeds, in first-seen order.
pub fn summarize(rows: &[Row]) -> Vec<(String, String, [Stat; 3])> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.suite.clone(), r.variant.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(suite, variant)| {
            let ok: Vec<&Row> = rows
                .iter()
                .filter(|r| r.suite == suite && r.variant == variant && r.error.is_empty())
                .collect();
            let col = |f: fn(&Row) -> f64| stat(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let stats = [col(|r| r.acc_025), col(|r| r.acc_05), col(|r| r.miou)];
            (suite, variant, stats)
        })
        .collect()
}

pub fn table_csv(rows: &[Row]) -> String {
    let mut s = String::from("suite,variant,n,acc@0.25_mean,acc@0.25_std,acc@0.5_mean,acc@0.5_std,miou_mean,miou_std\n");
    for (suite, variant, [a, b, m]) in summarize(rows) {
        let _ = writeln!(
            s,
            "{suite},{variant},{},{},{},{},{},{},{}",
            a.n, a.mean, a.std, b.mean, b.std, m.mean, m.std
        );
    }
    s
}

/// Runs suites and writes `rows.csv` and `table.csv` under `opts.out`.
pub fn ablate(base: &RunConfig, suites: &[Suite], opts: &AblationOptions) -> Result<Vec<Row>> {
    std::fs::create_dir_all(&opts.out)?;
    let mut rows = Vec::new();
    for s in suites {
        rows.extend(run_suite(base, s, opts)?);
        std::fs::write(opts.out.join("rows.csv"), rows_csv(&rows))?;
        std::fs::write(opts.out.join("table.csv"), table_csv(&rows))?;
    }
    Ok(rows)
}
