//! Held-out evaluation of a model, the symbolic oracle and a random-box floor.

use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildground_core::geometry::Box3D;
use wildground_core::metrics::{detection_pr, write_records_csv, EvalRecord, EvalSummary, THRESHOLDS};
use wildground_core::model::GroundingModel;
use wildground_core::nn::{Ctx, ParamStore};
use wildground_core::{Mode, Tape};
use wildground_scenes::{resolve, Constraints, GeneratorConfig, Scene, Vocabulary};

use crate::threads;
use crate::train::Sample;

pub const SUMMARY: &str = "summary.csv";
pub const RECORDS: &str = "records.csv";

/// Query boxes whose seed confidence clears this count as detections.
const DETECTION_SCORE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Prediction {
    pub target: Box3D,
    /// Confident query boxes, for detection precision/recall.
    pub candidates: Vec<Box3D>,
    pub seconds: f64,
}

pub fn predict(model: &GroundingModel, store: &ParamStore<f32>, s: &Sample) -> Result<Prediction> {
    let t0 = Instant::now();
    let tape = Tape::new(Mode::Eval, 0);
    let cx = Ctx::new(&tape, store, false);
    let out = model.forward(&cx, &s.input)?;
    let (_, target) = out.target();
    let seconds = t0.elapsed().as_secs_f64();
    let candidates = out
        .queries
        .selected
        .iter()
        .enumerate()
        .filter(|(_, &seed)| out.queries.scores[seed] >= DETECTION_SCORE)
        .map(|(i, _)| out.box_at(i))
        .collect();
    Ok(Prediction {
        target,
        candidates,
        seconds,
    })
}

/// Records for every sample and the mean per-scene forward latency.
pub fn evaluate_model(
    model: &GroundingModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<(Vec<EvalRecord>, f64)> {
    let (records, _, latency) = evaluate_full(model, store, samples)?;
    Ok((records, latency))
}

fn evaluate_full(
    model: &GroundingModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<(Vec<EvalRecord>, Vec<Prediction>, f64)> {
    let preds = threads::map(samples, |_, s| predict(model, store, s))?;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalRecord::new(s.id.clone(), p.target, s.gt))
        .collect();
    let latency = preds.iter().map(|p| p.seconds).sum::<f64>() / preds.len().max(1) as f64;
    Ok((records, preds, latency))
}

/// Summary with detection precision/recall and latency.
pub fn model_summary(
    model: &GroundingModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    let (records, preds, latency) = evaluate_full(model, store, samples)?;
    let mut s = EvalSummary::from_records(&records)?;
    let cands: Vec<Vec<Box3D>> = preds.iter().map(|p| p.candidates.clone()).collect();
    let gts: Vec<Vec<Box3D>> = samples.iter().map(|s| s.actors.clone()).collect();
    s.detection = Some([detection_pr(&cands, &gts, THRESHOLDS[0])?, detection_pr(&cands, &gts, THRESHOLDS[1])?]);
    s.latency = Some(latency);
    Ok((s, records))
}

/// Box of the actor the symbolic resolver grounds each utterance to.
pub fn oracle_records(ids: &[String], scenes: &[Scene], vocab: &Vocabulary) -> Result<Vec<EvalRecord>> {
    ids.iter()
        .zip(scenes)
        .map(|(id, s)| {
            let c = Constraints::parse(&s.tokens, vocab)?;
            let hit = resolve(s, &c);
            let actor = match hit.as_slice() {
                [one] => s.actors.iter().find(|a| a.id == *one),
                _ => None,
            }
            .ok_or_else(|| anyhow!("{id}: utterance resolves to {} actors", hit.len()))?;
            Ok(EvalRecord::new(id.clone(), actor.bbox(s.current()), s.gt_box()))
        })
        .collect()
}

/// Uniformly placed, human-sized boxes with random heading.
pub fn random_records(ids: &[String], scenes: &[Scene], seed: u64) -> Vec<EvalRecord> {
    let g = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .zip(scenes)
        .map(|(id, s)| {
            let h = rng.gen_range(1.5..1.9);
            let b = Box3D::new(
                rng.gen_range(g.x_range.0..g.x_range.1),
                rng.gen_range(g.y_range.0..g.y_range.1),
                h / 2.0,
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
                h,
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            EvalRecord::new(id.clone(), b, s.gt_box())
        })
        .collect()
}

pub fn write_outputs(out: &Path, summary: &EvalSummary, records: &[EvalRecord]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    summary.write_csv(&out.join(SUMMARY))?;
    write_records_csv(records, &out.join(RECORDS))?;
    Ok(())
}
