//! Mini-batch training with per-group learning rates, step decay, periodic and
//! best-by-validation checkpoints, and a per-step loss log.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wildground_core::checkpoint::Checkpoint;
use wildground_core::encoders::TokenSpans;
use wildground_core::geometry::Box3D;
use wildground_core::losses::{scene_loss, total_loss, LossBreakdown};
use wildground_core::metrics::EvalSummary;
use wildground_core::model::{GroundingModel, SceneInput};
use wildground_core::nn::{Builder, Ctx, GradBuffer, Group, ParamStore};
use wildground_core::optim::{AdamW, AdamWConfig};
use wildground_core::{Mode, Tape};
use wildground_scenes::dataset::splitmix64;
use wildground_scenes::{load_split, DatasetManifest, Scene, Split};

use crate::config::RunConfig;
use crate::eval::{evaluate_model, model_summary};
use crate::threads;

pub const LOSS_HEADER: &str = "step,L_s,L_giou,L_box,L_c,L_st,total";
pub const LOSS_LOG: &str = "loss.csv";
pub const VAL_LOG: &str = "val.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

/// One training or evaluation example in network form.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub input: SceneInput,
    pub spans: TokenSpans,
    pub gt: Box3D,
    /// Boxes of every actor in the current frame.
    pub actors: Vec<Box3D>,
}

impl Sample {
    pub fn new(id: impl Into<String>, scene: &Scene, frames: usize) -> Self {
        let cur = scene.current();
        Self {
            id: id.into(),
            input: scene.input(frames),
            spans: scene.token_spans(),
            gt: scene.gt_box(),
            actors: scene.actors.iter().map(|a| a.bbox(cur)).collect(),
        }
    }
}

pub fn load_samples(manifest: &DatasetManifest, split: Split, frames: usize) -> Result<Vec<Sample>> {
    let scenes = load_split(manifest, split)?;
    Ok(manifest
        .paths(split)
        .iter()
        .zip(&scenes)
        .map(|(p, s)| Sample::new(p.clone(), s, frames))
        .collect())
}

/// Raised when a loss term or gradient stops being finite.
#[derive(Debug, thiserror::Error)]
#[error("non-finite loss at step {step}: {parts:?}")]
pub struct NonFiniteLoss {
    pub step: u64,
    pub parts: LossBreakdown,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: GroundingModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = GroundingModel::new(&mut Builder::new(&mut store, &mut rng), cfg.model.clone())?;
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        );
        opt.group_lr.insert(Group::Main, cfg.lr);
        opt.group_lr.insert(Group::PointEncoder, cfg.point_lr);
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// Rate multiplier in effect during epoch `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch >= self.cfg.decay_epoch() {
            self.cfg.lr_decay
        } else {
            1.0
        }
    }

    /// One optimizer step over `batch`; returns the batch-mean loss terms.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        let step = self.opt.step_count() + 1;
        let seed = splitmix64(self.cfg.seed ^ step.wrapping_mul(0xA24B_AED4_963E_E407));
        let results = threads::map(batch, |i, s| self.sample_grads(s, splitmix64(seed + i as u64)))?;
        let mut buf = GradBuffer::new(self.store.len());
        let mut mean = LossBreakdown::default();
        let inv = 1.0 / batch.len() as f64;
        for (parts, grads) in results {
            for (m, p) in [
                (&mut mean.confidence, parts.confidence),
                (&mut mean.giou, parts.giou),
                (&mut mean.box_l1, parts.box_l1),
                (&mut mean.contrastive, parts.contrastive),
                (&mut mean.soft_token, parts.soft_token),
            ] {
                *m += p * inv;
            }
            buf.accumulate(grads);
        }
        mean.total = total_loss(&mean, &self.cfg.weights);
        if self.cfg.inject_nan_at == Some(step) {
            mean.total = f64::NAN;
        }
        let grads_finite = buf.grads.iter().flatten().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !mean.is_valid() || !grads_finite {
            return Err(NonFiniteLoss { step, parts: mean }.into());
        }
        buf.average();
        // Parameters off every sample's loss path take a zero gradient.
        for id in self.store.ids() {
            let g = &mut buf.grads[id.index()];
            if g.is_none() {
                *g = Some(wildground_core::Tensor::zeros(self.store.get(id).shape()));
            }
        }
        self.opt.step(&mut self.store, &mut buf)?;
        Ok(mean)
    }

    fn sample_grads(&self, s: &Sample, tape_seed: u64) -> Result<(LossBreakdown, Vec<Option<wildground_core::Tensor32>>)> {
        let tape = Tape::new(Mode::Train, tape_seed);
        let cx = Ctx::new(&tape, &self.store, true);
        let out = self.model.forward(&cx, &s.input)?;
        let loss = scene_loss(&out, &s.gt, &s.spans, &self.cfg.weights, self.cfg.model.temperature)?;
        let parts = loss.parts;
        let grads = cx.param_grads(tape.backward(loss.total)?);
        Ok((parts, grads))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.add_params(&self.store);
        c.add_optimizer(&self.store, &self.opt);
        c.push_scalar("train.epoch", self.epoch as f64);
        c.push_scalar("train.best_val", self.best_val);
        c
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        c.load_params(&mut self.store)?;
        c.load_optimizer(&self.store, &mut self.opt)?;
        self.epoch = c.scalar("train.epoch").context("checkpoint lacks train.epoch")? as usize;
        self.best_val = c.scalar("train.best_val").unwrap_or(f64::NEG_INFINITY);
        Ok(())
    }
}

/// Builds the model described by `cfg` and loads parameters from `ckpt`.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(GroundingModel, ParamStore<f32>)> {
    let mut t = Trainer::new(cfg.clone())?;
    Checkpoint::load(ckpt)
        .and_then(|c| c.load_params(&mut t.store))
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((t.model, t.store))
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub seconds: f64,
    pub best_val: f64,
    /// Held-out summary of the final parameters.
    pub test: Option<EvalSummary>,
    pub build: String,
}

impl RunReport {
    pub fn to_text(&self, cfg: &RunConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "build = {}", self.build);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seconds = {:.3}", self.seconds);
        let _ = writeln!(s, "best_val_acc@0.25 = {}", self.best_val);
        if let Some(t) = &self.test {
            for (k, v) in t.rows() {
                let _ = writeln!(s, "test_{k} = {v}");
            }
        }
        s.push_str("# config\n");
        s.push_str(&cfg.to_text());
        s
    }
}

pub fn build_id() -> String {
    format!("wildground-{}", env!("CARGO_PKG_VERSION"))
}

fn fmt_row(step: u64, p: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{}\n",
        p.confidence, p.giou, p.box_l1, p.contrastive, p.soft_token, p.total
    )
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory.
    pub resume: bool,
    /// Evaluate the final parameters on the test split.
    pub final_test: bool,
    /// Progress lines go here.
    pub verbose: bool,
}

/// Full training run writing everything under `out`.
pub fn train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<RunReport> {
    let t0 = Instant::now();
    let manifest = DatasetManifest::load(&cfg.dataset)
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    let mut all = load_samples(&manifest, Split::Train, cfg.model.frames)?;
    if cfg.max_train_scenes > 0 {
        all.truncate(cfg.max_train_scenes);
    }
    let n_val = ((all.len() as f64) * cfg.val_fraction).round() as usize;
    let mut val = all.split_off(all.len() - n_val);
    if cfg.max_val_scenes > 0 {
        val.truncate(cfg.max_val_scenes);
    }
    let train = all;
    if train.is_empty() {
        bail!("no training scenes left after the validation hold-out");
    }
    std::fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let last = out.join(LAST);
    if opts.resume {
        let c = Checkpoint::load(&last).with_context(|| format!("resuming from {}", last.display()))?;
        trainer.restore(&c)?;
    } else {
        std::fs::write(out.join(LOSS_LOG), format!("{LOSS_HEADER}\n"))?;
        std::fs::write(out.join(VAL_LOG), "epoch,step,acc@0.25,acc@0.5,miou\n")?;
    }
    std::fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    let mut log = OpenOptions::new().append(true).open(out.join(LOSS_LOG))?;
    let mut val_log = OpenOptions::new().append(true).open(out.join(VAL_LOG))?;

    while trainer.epoch < cfg.epochs {
        let epoch = trainer.epoch;
        trainer.opt.lr_scale = trainer.lr_scale(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed.wrapping_add(epoch as u64 + 1))));
        let mut rows = String::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = match trainer.step(&batch) {
                Ok(p) => p,
                Err(e) => {
                    log.write_all(rows.as_bytes())?;
                    return Err(e);
                }
            };
            rows.push_str(&fmt_row(trainer.step_count(), &parts));
        }
        log.write_all(rows.as_bytes())?;
        trainer.epoch += 1;
        if !val.is_empty() {
            let (records, _) = evaluate_model(&trainer.model, &trainer.store, &val)?;
            let s = EvalSummary::from_records(&records)?;
            writeln!(val_log, "{},{},{},{},{}", trainer.epoch, trainer.step_count(), s.acc_025, s.acc_05, s.miou)?;
            if s.acc_025 > trainer.best_val {
                trainer.best_val = s.acc_025;
                trainer.checkpoint().save(&out.join(BEST))?;
            }
            if opts.verbose {
                eprintln!(
                    "epoch {:3} step {:6} val acc@0.25 {:.3} miou {:.3} ({:.0}s)",
                    trainer.epoch,
                    trainer.step_count(),
                    s.acc_025,
                    s.miou,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        if trainer.epoch % cfg.checkpoint_every == 0 || trainer.epoch == cfg.epochs {
            let c = trainer.checkpoint();
            c.save(&out.join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
            c.save(&last)?;
        }
    }
    if val.is_empty() {
        trainer.checkpoint().save(&out.join(BEST))?;
    }
    let test = if opts.final_test {
        let samples = load_samples(&manifest, Split::Test, cfg.model.frames)?;
        Some(model_summary(&trainer.model, &trainer.store, &samples)?.0)
    } else {
        None
    };
    let report = RunReport {
        out: out.to_path_buf(),
        steps: trainer.step_count(),
        epochs: trainer.epoch,
        seconds: t0.elapsed().as_secs_f64(),
        best_val: trainer.best_val,
        test,
        build: build_id(),
    };
    std::fs::write(out.join("report.txt"), report.to_text(cfg))?;
    Ok(report)
}
