//! Argument definitions and command dispatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wildground_core::gradcheck::{self, Scope, TOLERANCE};
use wildground_core::metrics::EvalSummary;
use wildground_scenes::dataset::DatasetOptions;
use wildground_scenes::{build_dataset, load_split, read_scene, DatasetManifest, Difficulty, GeneratorConfig, Split};

use crate::ablate::{ablate, suite, AblationOptions};
use crate::config::{Preset, RunConfig};
use crate::eval::{model_summary, oracle_records, predict, random_records, write_outputs};
use crate::train::{load_model, load_samples, train, NonFiniteLoss, Sample, TrainOptions, CONFIG_ECHO};

#[derive(Parser, Debug)]
#[command(name = "wildground", version, about = "Multi-frame LiDAR, image and language 3D grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Model,
    Oracle,
    Random,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 125)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "default")]
        difficulty: Difficulty,
        #[arg(long, default_value_t = 2)]
        frames: usize,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Evaluate the final parameters on the test split.
        #[arg(long)]
        test: bool,
    },
    /// Evaluate a checkpoint, the symbolic oracle or random boxes on the test split.
    Eval {
        #[arg(long, required_if_eq("baseline", "model"))]
        checkpoint: Option<PathBuf>,
        /// Run config; defaults to the config echo next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Baseline::Model)]
        baseline: Baseline,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ground the utterance of a single scene file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the gradient of the named case (negative control).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Run ablation suites and write a comparison table.
    Ablate {
        /// Comma-separated suite names: motion, color, matrix.
        #[arg(long, default_value = "motion,color")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Base config (dataset key ignored); defaults to the small preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 125)]
        test: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Exit code of a run aborted by a non-finite loss.
pub const EXIT_NON_FINITE: u8 = 3;
/// Exit code of a failed gradient check.
pub const EXIT_GRADCHECK: u8 = 2;

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()
}

fn config_for_checkpoint(config: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO),
    };
    RunConfig::load(&path)
}

pub fn print_summary(label: &str, s: &EvalSummary) {
    println!(
        "{label}: acc@0.25 {:.4}  acc@0.5 {:.4}  miou {:.4}  (n = {})",
        s.acc_025, s.acc_05, s.miou, s.n_samples
    );
    if let Some(d) = &s.detection {
        println!(
            "detection: P@0.25 {:.4} R@0.25 {:.4}  P@0.5 {:.4} R@0.5 {:.4}",
            d[0].precision, d[0].recall, d[1].precision, d[1].recall
        );
    }
    if let Some(l) = s.latency {
        println!("latency: {:.2} ms per scene", l * 1e3);
    }
}

pub fn gradcheck_report(scopes: &[Scope], seed: u64, fault: Option<&str>) -> (bool, String) {
    let reports = gradcheck::run(scopes, seed, fault);
    let mut text = String::new();
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        text.push_str(&format!(
            "{status:4} {:8} {:32} instances {:3} max rel err {:.3e}{}\n",
            r.scope.to_string(),
            r.name,
            r.instances,
            r.max_rel_err,
            r.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default()
        ));
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    text.push_str(&format!(
        "{} ops checked, {failed} above {TOLERANCE:e}\n",
        reports.len()
    ));
    (ok && !reports.is_empty(), text)
}

pub fn parse_scopes(s: &str) -> Result<Vec<Scope>> {
    if s == "all" {
        return Ok(Scope::ALL.to_vec());
    }
    s.split(',').map(|x| Ok(x.trim().parse::<Scope>()?)).collect()
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            out,
            train,
            test,
            seed,
            difficulty,
            frames,
        } => {
            let m = build_dataset(
                &out,
                &DatasetOptions {
                    n_train: train,
                    n_test: test,
                    seed,
                    difficulty,
                    generator: GeneratorConfig {
                        frames,
                        ..Default::default()
                    },
                },
            )?;
            println!(
                "wrote {} train + {} test scenes ({difficulty}), vocabulary {} words, crc {:08x}",
                m.train.len(),
                m.test.len(),
                m.vocab()?.len(),
                m.crc
            );
        }
        Command::Train {
            config,
            out,
            resume,
            overrides,
            test,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_overrides(&mut cfg, &overrides)?;
            let opts = TrainOptions {
                resume,
                final_test: test,
                verbose: true,
            };
            match train(&cfg, &out, &opts) {
                Ok(r) => {
                    println!("trained {} epochs, {} steps in {:.1}s (seed {})", r.epochs, r.steps, r.seconds, cfg.seed);
                    if let Some(t) = &r.test {
                        print_summary("test", t);
                    }
                }
                Err(e) if e.is::<NonFiniteLoss>() => {
                    eprintln!("error: {e}; last good checkpoint kept in {}", out.display());
                    return Ok(ExitCode::from(EXIT_NON_FINITE));
                }
                Err(e) => return Err(e),
            }
        }
        Command::Eval {
            checkpoint,
            config,
            dataset,
            out,
            baseline,
            seed,
        } => {
            let cfg = match (&checkpoint, baseline) {
                (Some(c), _) => Some(config_for_checkpoint(config.as_deref(), c)?),
                (None, _) => config.as_deref().map(RunConfig::load).transpose()?,
            };
            let data = dataset
                .or_else(|| cfg.as_ref().map(|c| c.dataset.clone()))
                .context("eval needs --dataset or a config")?;
            let manifest = DatasetManifest::load(&data)?;
            let (summary, records) = match baseline {
                Baseline::Model => {
                    let cfg = cfg.expect("checkpoint required by the parser");
                    let (model, store) = load_model(&cfg, checkpoint.as_deref().expect("required"))?;
                    let samples = load_samples(&manifest, Split::Test, cfg.model.frames)?;
                    model_summary(&model, &store, &samples)?
                }
                Baseline::Oracle | Baseline::Random => {
                    let scenes = load_split(&manifest, Split::Test)?;
                    let records = if baseline == Baseline::Oracle {
                        oracle_records(&manifest.test, &scenes, &manifest.vocab()?)?
                    } else {
                        random_records(&manifest.test, &scenes, seed)
                    };
                    (EvalSummary::from_records(&records)?, records)
                }
            };
            write_outputs(&out, &summary, &records)?;
            print_summary(&format!("{baseline:?}").to_lowercase(), &summary);
        }
        Command::Infer {
            checkpoint,
            config,
            scene,
        } => {
            let cfg = config_for_checkpoint(config.as_deref(), &checkpoint)?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let s = read_scene(&scene)?;
            let p = predict(&model, &store, &Sample::new(scene.display().to_string(), &s, cfg.model.frames))?;
            let b = p.target;
            println!(
                "box x {:.3} y {:.3} z {:.3} l {:.3} w {:.3} h {:.3} theta {:.3} ({:.1} ms)",
                b.x,
                b.y,
                b.z,
                b.l,
                b.w,
                b.h,
                b.theta,
                p.seconds * 1e3
            );
        }
        Command::Gradcheck { scope, seed, fault } => {
            let scopes = parse_scopes(&scope)?;
            let (ok, text) = gradcheck_report(&scopes, seed, fault.as_deref());
            print!("{text}");
            if !ok {
                return Ok(ExitCode::from(EXIT_GRADCHECK));
            }
        }
        Command::Ablate {
            suite: names,
            out,
            config,
            repeats,
            epochs,
            train,
            test,
            overrides,
        } => {
            if repeats == 0 {
                bail!("--repeats must be positive");
            }
            let suites = names.split(',').map(|n| suite(n.trim())).collect::<Result<Vec<_>>>()?;
            let vocab = wildground_scenes::Vocabulary::standard().len();
            let mut base = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    let mut c = RunConfig::new(PathBuf::new(), Preset::Small, vocab);
                    for (k, v) in crate::config::parse_pairs(&text)? {
                        match k.as_str() {
                            "dataset" | "vocab" => {}
                            "preset" => c = RunConfig::new(PathBuf::new(), v.parse()?, vocab),
                            _ => c.set(&k, &v)?,
                        }
                    }
                    c
                }
                None => RunConfig::new(PathBuf::new(), Preset::Small, vocab),
            };
            if let Some(e) = epochs {
                base.epochs = e;
            }
            apply_overrides(&mut base, &overrides)?;
            let opts = AblationOptions {
                out: out.clone(),
                repeats,
                n_train: train,
                n_test: test,
                data_seed: 0,
                verbose: true,
            };
            let rows = ablate(&base, &suites, &opts)?;
            print!("{}", crate::ablate::table_csv(&rows));
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            if failed > 0 {
                eprintln!("{failed} runs failed; see {}", out.join("rows.csv").display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
