//! Seeded scene synthesis.
//!
//! Actors are sensor-facing capsule shells with motion- and object-specific
//! parts; colour is only visible in the top-down images.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildground_core::geometry::points_in_box;

use crate::resolve::{resolve, Constraints};
use crate::vocab::{Vocabulary, NOT_MENTIONED, NOUNS};
use crate::{Actor, Carried, Color, Difficulty, Error, Frame, Motion, Range, Result, Scene, Side, NEAR_FAR_SPLIT};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub image_size: u16,
    /// Forward extent of actor placement, meters.
    pub x_range: (f64, f64),
    /// Lateral extent of actor placement, meters.
    pub y_range: (f64, f64),
    pub min_separation: f64,
    pub min_points: usize,
    pub max_points: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 2,
            min_actors: 3,
            max_actors: 8,
            image_size: 64,
            x_range: (3.0, 15.0),
            y_range: (-6.0, 6.0),
            min_separation: 1.6,
            min_points: 500,
            max_points: 4000,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.min_actors == 0 || self.min_actors > self.max_actors || self.image_size < 16 {
            return Err(Error::Invalid(format!("bad generator config {self:?}")));
        }
        Ok(())
    }

    /// Area rendered into the images: the placement region plus a margin.
    fn view(&self) -> ((f64, f64), (f64, f64)) {
        let m = 1.0;
        ((self.x_range.0 - m, self.x_range.1 + m), (self.y_range.0 - m, self.y_range.1 + m))
    }
}

/// Clearance kept between actors and the side / range decision boundaries.
const BOUNDARY_MARGIN: f64 = 0.6;
/// Actors needed in a box for the scene to be kept.
pub const MIN_BOX_POINTS: usize = 30;
const LAYOUTS: usize = 200;
const RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Color,
    Motion,
    Side,
    Range,
    Object,
}

/// Planned actor before rounding to storage precision.
struct Plan {
    cur: [f64; 2],
    heading: f64,
    radius: f64,
    height: f64,
    color: Color,
    motion: Motion,
    carried: Carried,
    positions: Vec<[f64; 2]>,
    wave_phase: usize,
}

impl Plan {
    fn size(&self) -> [f64; 3] {
        let r = self.radius;
        let mut l = 2.0 * r + 0.1;
        let mut w = l;
        let mut h = self.height + 0.05;
        match self.motion {
            Motion::Riding => l = l.max(1.75),
            Motion::Sitting => l = l.max(0.7),
            Motion::Waving => w = w.max(2.0 * (r + 0.55)),
            _ => {}
        }
        match self.carried {
            Carried::Bag => w = w.max(2.0 * (r + 0.28)),
            Carried::Umbrella => {
                l = l.max(1.0);
                w = w.max(1.0);
                h += 0.15;
            }
            Carried::Box => l = l.max(2.0 * (r + 0.4)),
            Carried::Nothing => {}
        }
        [l, w, h]
    }
}

fn in_region(cfg: &GeneratorConfig, p: [f64; 2]) -> bool {
    (cfg.x_range.0..=cfg.x_range.1).contains(&p[0]) && (cfg.y_range.0..=cfg.y_range.1).contains(&p[1])
}

fn clear_of_boundaries(p: [f64; 2]) -> bool {
    p[1].abs() >= BOUNDARY_MARGIN && (p[0].hypot(p[1]) - NEAR_FAR_SPLIT).abs() >= BOUNDARY_MARGIN
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn sample_layout(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Option<Vec<[f64; 2]>> {
    let n = rng.gen_range(cfg.min_actors..=cfg.max_actors);
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > 2000 {
            return None;
        }
        let p = [rng.gen_range(cfg.x_range.0..cfg.x_range.1), rng.gen_range(cfg.y_range.0..cfg.y_range.1)];
        if clear_of_boundaries(p) && out.iter().all(|&q| dist(p, q) >= cfg.min_separation) {
            out.push(p);
        }
    }
    Some(out)
}

fn sample_motion(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Motion {
    match difficulty {
        Difficulty::MotionOnly => *[Motion::Standing, Motion::Walking].choose(rng).expect("non-empty"),
        _ => *Motion::ALL.choose(rng).expect("non-empty"),
    }
}

fn sample_carried(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Carried {
    if difficulty == Difficulty::MotionOnly || rng.gen_bool(0.5) {
        Carried::Nothing
    } else {
        *Carried::ALL[1..].choose(rng).expect("non-empty")
    }
}

/// Assigns labels and past trajectories; `None` if the motion leaves the region
/// or brings actors too close in some frame.
fn sample_plans(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, layout: &[[f64; 2]], difficulty: Difficulty) -> Option<Vec<Plan>> {
    let k = cfg.frames;
    let mut plans = Vec::with_capacity(layout.len());
    for &cur in layout {
        let motion = sample_motion(rng, difficulty);
        let heading = rng.gen_range(-3.1..3.1);
        let dir = [f64::cos(heading), f64::sin(heading)];
        let speed = match motion {
            Motion::Walking => rng.gen_range(0.45..0.8),
            Motion::Riding => rng.gen_range(1.0..1.5),
            _ => 0.0,
        };
        let positions: Vec<[f64; 2]> = (0..k)
            .map(|f| {
                let back = (k - 1 - f) as f64;
                if speed > 0.0 {
                    [cur[0] - speed * back * dir[0], cur[1] - speed * back * dir[1]]
                } else if f + 1 == k {
                    cur
                } else {
                    [cur[0] + rng.gen_range(-0.015..0.015), cur[1] + rng.gen_range(-0.015..0.015)]
                }
            })
            .collect();
        let height = match motion {
            Motion::Sitting => rng.gen_range(1.1..1.3),
            _ => rng.gen_range(1.55..1.9),
        };
        plans.push(Plan {
            cur,
            heading,
            radius: rng.gen_range(0.22..0.3),
            height,
            color: *Color::ALL.choose(rng).expect("non-empty"),
            motion,
            carried: sample_carried(rng, difficulty),
            positions,
            wave_phase: rng.gen_range(0..2),
        });
    }
    for f in 0..k {
        for (i, a) in plans.iter().enumerate() {
            if !in_region(cfg, a.positions[f]) {
                return None;
            }
            if plans[i + 1..].iter().any(|b| dist(a.positions[f], b.positions[f]) < cfg.min_separation) {
                return None;
            }
        }
    }
    Some(plans)
}

fn value_matches(a: &Plan, t: &Plan, f: Family) -> bool {
    let p = |q: &Plan| [q.cur[0], q.cur[1], 0.0];
    match f {
        Family::Color => a.color == t.color,
        Family::Motion => a.motion == t.motion,
        Family::Side => Side::of(p(a)) == Side::of(p(t)),
        Family::Range => Range::of(p(a)) == Range::of(p(t)),
        Family::Object => a.carried == t.carried,
    }
}

/// Smallest attribute subset, searched in `families` priority order, that
/// singles out `target`.
fn minimal_description(plans: &[Plan], target: usize, families: &[Family]) -> Option<Vec<Family>> {
    let n = families.len();
    let mut masks: Vec<u32> = (1..1u32 << n).collect();
    masks.sort_by_key(|m| (m.count_ones(), m.reverse_bits()));
    masks.into_iter().find_map(|m| {
        let set: Vec<Family> = (0..n).filter(|&i| m & (1 << i) != 0).map(|i| families[i]).collect();
        let matching = plans
            .iter()
            .filter(|a| set.iter().all(|&f| value_matches(a, &plans[target], f)))
            .count();
        (matching == 1).then_some(set)
    })
}

fn choose_target(rng: &mut ChaCha8Rng, plans: &[Plan], difficulty: Difficulty) -> Option<(usize, Vec<Family>)> {
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.shuffle(rng);
    for t in order {
        let families = match difficulty {
            Difficulty::ColorOnly => vec![Family::Color],
            Difficulty::MotionOnly => vec![Family::Motion],
            Difficulty::Default => {
                let mut f = vec![Family::Color, Family::Motion, Family::Side, Family::Range];
                if plans[t].carried != Carried::Nothing {
                    f.push(Family::Object);
                }
                f.shuffle(rng);
                f
            }
        };
        if let Some(set) = minimal_description(plans, t, &families) {
            return Some((t, set));
        }
    }
    None
}

/// Tokens and spans for the chosen description.
fn utterance(rng: &mut ChaCha8Rng, target: &Plan, families: &[Family]) -> (Vec<&'static str>, Vec<(u16, u16)>) {
    let mut words: Vec<&'static str> = vec!["the", NOUNS.choose(rng).expect("non-empty")];
    let mut spans = vec![(1u16, 2u16)];
    let mut order = families.to_vec();
    order.shuffle(rng);
    let p = [target.cur[0], target.cur[1], 0.0];
    for f in order {
        let (lead, key, tail): (&[&'static str], &'static str, &[&'static str]) = match f {
            Family::Color => (if rng.gen_bool(0.5) { &["in"] } else { &["wearing"] }, target.color.word(), &[]),
            Family::Motion => (
                if rng.gen_bool(0.5) { &["who", "is"] } else { &["that", "is"] },
                target.motion.word(),
                &[],
            ),
            Family::Side => (&["on", "the"], Side::of(p).word(), if rng.gen_bool(0.5) { &["side"] } else { &[] }),
            Family::Range => match Range::of(p) {
                Range::Near => (&[], "near", &["the", "sensor"]),
                Range::Far => (&[], "far", &["from", "the", "sensor"]),
            },
            Family::Object => (
                if rng.gen_bool(0.5) { &["with", "a"] } else { &["carrying", "a"] },
                target.carried.word(),
                &[],
            ),
        };
        words.extend_from_slice(lead);
        let at = words.len() as u16;
        words.push(key);
        spans.push((at, at + 1));
        words.extend_from_slice(tail);
    }
    let m = words.len() as u16;
    words.push(NOT_MENTIONED);
    spans.push((m, m + 1));
    (words, spans)
}

/// Local actor frame: `u` along the heading, `v` to its left, `z` up.
struct Local {
    origin: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Local {
    fn world(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [
            self.origin[0] + u * self.cos - v * self.sin,
            self.origin[1] + u * self.sin + v * self.cos,
            z,
        ]
    }
}

fn capsule_point(rng: &mut ChaCha8Rng, local: &Local, r: f64, z0: f64, h: f64) -> [f64; 3] {
    // Sensor-facing half shell.
    let o = local.origin;
    let facing = (-o[1]).atan2(-o[0]);
    let phi = facing + rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
    let z = rng.gen_range(z0..h);
    let top = h - r;
    let rr = if z > top { r * (1.0 - ((z - top) / r).powi(2)).max(0.0).sqrt() } else { r };
    let rr = rr.max(0.03);
    [o[0] + rr * phi.cos(), o[1] + rr * phi.sin(), z]
}

fn noisy(rng: &mut ChaCha8Rng, p: [f64; 3]) -> [f64; 3] {
    [
        p[0] + rng.gen_range(-0.01..0.01),
        p[1] + rng.gen_range(-0.01..0.01),
        (p[2] + rng.gen_range(-0.01..0.01)).max(0.0),
    ]
}

fn actor_points(rng: &mut ChaCha8Rng, a: &Plan, frame: usize, out: &mut Vec<[f64; 3]>) {
    let origin = a.positions[frame];
    let local = Local {
        origin,
        cos: a.heading.cos(),
        sin: a.heading.sin(),
    };
    let range = origin[0].hypot(origin[1]);
    let budget = ((320.0 * 5.0 / range).round() as usize).clamp(80, 300);
    let parts = match (a.motion, a.carried) {
        (Motion::Standing | Motion::Walking, Carried::Nothing) => 0,
        _ => budget / 4,
    };
    let (r, h) = (a.radius, a.height);
    let body_z0 = if a.motion == Motion::Riding { 0.5 } else { 0.02 };
    let start = out.len();
    for _ in 0..budget - parts {
        out.push(capsule_point(rng, &local, r, body_z0, h));
    }
    let mut kinds: Vec<u8> = Vec::new();
    if matches!(a.motion, Motion::Riding | Motion::Sitting | Motion::Waving) {
        kinds.push(0);
    }
    if a.carried != Carried::Nothing {
        kinds.push(1);
    }
    for i in 0..parts {
        let p = if kinds[i % kinds.len()] == 0 {
            match a.motion {
                Motion::Riding => {
                    if rng.gen_bool(0.8) {
                        let c = if rng.gen_bool(0.5) { 0.55 } else { -0.55 };
                        let t = rng.gen_range(0.0..2.0 * PI);
                        local.world(c + 0.33 * t.cos(), 0.0, 0.33 + 0.33 * t.sin())
                    } else {
                        local.world(rng.gen_range(-0.55..0.55), 0.0, rng.gen_range(0.55..0.7))
                    }
                }
                Motion::Sitting => {
                    if rng.gen_bool(0.7) {
                        local.world(rng.gen_range(-0.3..0.3), rng.gen_range(-0.25..0.25), 0.45)
                    } else {
                        local.world(-0.3, rng.gen_range(-0.25..0.25), rng.gen_range(0.45..0.9))
                    }
                }
                _ => {
                    // Waving arm, alternating between a raised and a lowered pose.
                    let ang: f64 = if (frame + a.wave_phase) % 2 == 0 { 1.75 } else { 2.6 };
                    let s = rng.gen_range(0.0..0.55);
                    local.world(0.0, r + s * ang.sin(), 0.8 * h - s * ang.cos())
                }
            }
        } else {
            match a.carried {
                Carried::Bag => {
                    let (t, q) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(-1.0f64..1.0));
                    let s = (1.0 - q * q).sqrt();
                    local.world(0.12 * s * t.cos(), r + 0.14 + 0.12 * s * t.sin(), 0.45 * h + 0.12 * q)
                }
                Carried::Umbrella => {
                    if rng.gen_bool(0.85) {
                        let (t, rho) = (rng.gen_range(0.0..2.0 * PI), 0.45 * rng.gen_range(0.0f64..1.0).sqrt());
                        local.world(rho * t.cos(), rho * t.sin(), h + 0.1)
                    } else {
                        local.world(0.0, r + 0.05, rng.gen_range(0.7 * h..h + 0.1))
                    }
                }
                _ => local.world(
                    r + 0.08 + rng.gen_range(0.0..0.3),
                    rng.gen_range(-0.15..0.15),
                    0.5 * h + rng.gen_range(-0.15..0.15),
                ),
            }
        };
        out.push(p);
    }
    for p in &mut out[start..] {
        *p = noisy(rng, *p);
    }
}

#[derive(Clone, Copy)]
struct Static {
    pos: [f64; 2],
    pole: bool,
}

fn sample_statics(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, plans: &[Plan]) -> Vec<Static> {
    let n = rng.gen_range(1..=3);
    let mut out = Vec::new();
    for _ in 0..200 {
        if out.len() == n {
            break;
        }
        let pos = [rng.gen_range(cfg.x_range.0..cfg.x_range.1), rng.gen_range(cfg.y_range.0..cfg.y_range.1)];
        let clear = plans.iter().all(|a| a.positions.iter().all(|&p| dist(p, pos) >= 1.2));
        if clear {
            out.push(Static {
                pos,
                pole: rng.gen_bool(0.5),
            });
        }
    }
    out
}

fn clutter_points(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, statics: &[Static], out: &mut Vec<[f64; 3]>) {
    let ((x0, x1), (y0, y1)) = cfg.view();
    let ground = rng.gen_range(300..900);
    for _ in 0..ground {
        let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
        if rng.gen_bool((5.0 / p[0].hypot(p[1])).min(1.0)) {
            out.push([p[0], p[1], rng.gen_range(0.0..0.04)]);
        }
    }
    for s in statics {
        for _ in 0..if s.pole { 40 } else { 60 } {
            let p = if s.pole {
                let t = rng.gen_range(0.0..2.0 * PI);
                [s.pos[0] + 0.08 * t.cos(), s.pos[1] + 0.08 * t.sin(), rng.gen_range(0.0..2.8)]
            } else {
                [
                    s.pos[0] + rng.gen_range(-0.25..0.25),
                    s.pos[1] + rng.gen_range(-0.25..0.25),
                    rng.gen_range(0.0..0.9),
                ]
            };
            out.push(noisy(rng, p));
        }
    }
}

fn render(cfg: &GeneratorConfig, plans: &[Plan], statics: &[Static], frame: usize) -> Vec<u8> {
    let n = cfg.image_size as usize;
    let ((x0, x1), (y0, y1)) = cfg.view();
    let mut rgb = vec![90u8; n * n * 3];
    // Far edge on the top row, left edge on the first column.
    let to_world = |r: usize, c: usize| {
        [
            x1 - (r as f64 + 0.5) / n as f64 * (x1 - x0),
            y1 - (c as f64 + 0.5) / n as f64 * (y1 - y0),
        ]
    };
    for r in 0..n {
        for c in 0..n {
            let p = to_world(r, c);
            let mut px = None;
            for s in statics {
                let hit = if s.pole {
                    dist(p, s.pos) <= 0.2
                } else {
                    (p[0] - s.pos[0]).abs() <= 0.3 && (p[1] - s.pos[1]).abs() <= 0.3
                };
                if hit {
                    px = Some(if s.pole { [55, 55, 55] } else { [135, 135, 135] });
                }
            }
            for a in plans {
                if dist(p, a.positions[frame]) <= 0.45 {
                    px = Some(a.color.rgb());
                }
            }
            if let Some(v) = px {
                rgb[(r * n + c) * 3..(r * n + c) * 3 + 3].copy_from_slice(&v);
            }
        }
    }
    rgb
}

fn intensity(rng: &mut ChaCha8Rng, p: [f64; 3]) -> f32 {
    let range = p[0].hypot(p[1]).max(1.0);
    ((1.0 / range).sqrt() * rng.gen_range(0.4..1.0)) as f32
}

fn assemble(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    seed: u64,
    difficulty: Difficulty,
    plans: &[Plan],
    target: usize,
    families: &[Family],
    vocab: &Vocabulary,
) -> Result<Option<Scene>> {
    let statics = sample_statics(rng, cfg, plans);
    let actors: Vec<Actor> = plans
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let size = a.size();
            Actor {
                id: i as u16,
                positions: a.positions.iter().map(|p| [p[0] as f32, p[1] as f32, 0.0]).collect(),
                size: size.map(|v| v as f32),
                heading: a.heading as f32,
                color: a.color,
                motion: a.motion,
                carried: a.carried,
            }
        })
        .collect();
    let cur = cfg.frames - 1;
    let gt = actors[target].bbox(cur);
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let mut pts = Vec::new();
        let mut owner = Vec::new();
        for (i, a) in plans.iter().enumerate() {
            let before = pts.len();
            actor_points(rng, a, f, &mut pts);
            owner.resize(pts.len(), Some(i));
            debug_assert!(pts.len() > before);
        }
        clutter_points(rng, cfg, &statics, &mut pts);
        let ((x0, x1), (y0, y1)) = cfg.view();
        while pts.len() < cfg.min_points {
            pts.push([rng.gen_range(x0..x1), rng.gen_range(y0..y1), rng.gen_range(0.0..0.04)]);
        }
        pts.truncate(cfg.max_points);
        owner.resize(pts.len(), None);
        if f == cur {
            let mine: Vec<[f64; 3]> = pts
                .iter()
                .zip(&owner)
                .filter(|(_, o)| **o == Some(target))
                .map(|(p, _)| *p)
                .collect();
            let inside = points_in_box(&mine, &gt).iter().filter(|&&b| b).count();
            if inside < MIN_BOX_POINTS {
                return Ok(None);
            }
        }
        let points = pts
            .iter()
            .map(|&p| [p[0] as f32, p[1] as f32, p[2] as f32, intensity(rng, p)])
            .collect();
        frames.push(Frame {
            points,
            height: cfg.image_size,
            width: cfg.image_size,
            rgb: render(cfg, plans, &statics, f),
        });
    }
    let (words, spans) = utterance(rng, &plans[target], families);
    let tokens = vocab.encode(&words)?;
    let b = gt;
    let scene = Scene {
        seed,
        difficulty,
        frames,
        tokens,
        spans,
        actors,
        target: target as u16,
        gt: [b.x, b.y, b.z, b.l, b.w, b.h, b.theta].map(|v| v as f32),
    };
    scene.validate()?;
    let c = Constraints::parse(&scene.tokens, vocab)?;
    if resolve(&scene, &c) != [scene.target] {
        return Ok(None);
    }
    Ok(Some(scene))
}

/// One scene from `seed`; identical seeds give identical scenes.
pub fn generate_scene(seed: u64, difficulty: Difficulty, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..LAYOUTS {
        let Some(layout) = sample_layout(&mut rng, cfg) else {
            continue;
        };
        for _ in 0..RESAMPLES {
            let Some(plans) = sample_plans(&mut rng, cfg, &layout, difficulty) else {
                continue;
            };
            let Some((target, families)) = choose_target(&mut rng, &plans, difficulty) else {
                continue;
            };
            if let Some(scene) = assemble(&mut rng, cfg, seed, difficulty, &plans, target, &families, &vocab)? {
                return Ok(scene);
            }
        }
    }
    Err(Error::Unsatisfiable(format!("no unambiguous scene for seed {seed} ({difficulty})")))
}
