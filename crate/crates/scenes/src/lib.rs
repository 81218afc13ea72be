//! Seeded synthetic dynamic grounding scenes: multi-frame point clouds,
//! schematic top-down images, templated utterances with span annotations,
//! a binary scene format and dataset manifests.

pub mod dataset;
pub mod format;
pub mod generate;
pub mod resolve;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use wildground_core::encoders::{Image, TokenSpans};
use wildground_core::geometry::Box3D;
use wildground_core::model::SceneInput;
use wildground_core::pointnet::PointCloud;

pub use dataset::{build_dataset, load_split, splitmix64, DatasetManifest, Split};
pub use format::{read_scene, scene_from_bytes, scene_to_bytes, write_scene};
pub use generate::{generate_scene, GeneratorConfig};
pub use resolve::{resolve, Constraints};
pub use vocab::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not a scene file (bad magic)")]
    BadMagic,
    #[error("scene format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("scene file truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("{0}")]
    Unsatisfiable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! labels {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(c: u8) -> Option<Self> {
                Self::ALL.get(c as usize).copied()
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

labels!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    White => "white",
    Black => "black",
});

labels!(Motion {
    Standing => "standing",
    Walking => "walking",
    Riding => "riding",
    Sitting => "sitting",
    Waving => "waving",
});

labels!(Carried {
    Nothing => "nothing",
    Bag => "bag",
    Umbrella => "umbrella",
    Box => "box",
});

labels!(Side {
    Left => "left",
    Right => "right",
});

labels!(Range {
    Near => "near",
    Far => "far",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [40, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::White => [245, 245, 245],
            Color::Black => [15, 15, 15],
        }
    }
}

/// Planar distance from the sensor separating "near" from "far".
pub const NEAR_FAR_SPLIT: f64 = 9.0;

impl Side {
    /// Sensor view: `+y` is to the left of the forward `+x` axis.
    pub fn of(p: [f64; 3]) -> Self {
        if p[1] > 0.0 {
            Side::Left
        } else {
            Side::Right
        }
    }
}

impl Range {
    pub fn of(p: [f64; 3]) -> Self {
        if p[0].hypot(p[1]) < NEAR_FAR_SPLIT {
            Range::Near
        } else {
            Range::Far
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Difficulty {
    #[default]
    Default,
    ColorOnly,
    MotionOnly,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Default, Difficulty::ColorOnly, Difficulty::MotionOnly];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Default => "default",
            Difficulty::ColorOnly => "color-only",
            Difficulty::MotionOnly => "motion-only",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown difficulty {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub id: u16,
    /// Ground-contact position per frame, oldest first.
    pub positions: Vec<[f32; 3]>,
    /// Box extents `(l, w, h)`.
    pub size: [f32; 3],
    pub heading: f32,
    pub color: Color,
    pub motion: Motion,
    pub carried: Carried,
}

impl Actor {
    pub fn position(&self, frame: usize) -> [f64; 3] {
        self.positions[frame].map(f64::from)
    }

    /// Box of the actor in `frame`.
    pub fn bbox(&self, frame: usize) -> Box3D {
        let p = self.position(frame);
        let [l, w, h] = self.size.map(f64::from);
        Box3D::new(p[0], p[1], p[2] + h / 2.0, l, w, h, self.heading as f64)
    }

    pub fn side(&self, frame: usize) -> Side {
        Side::of(self.position(frame))
    }

    pub fn range(&self, frame: usize) -> Range {
        Range::of(self.position(frame))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `(x, y, z, intensity)` per point.
    pub points: Vec<[f32; 4]>,
    pub height: u16,
    pub width: u16,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn cloud(&self, frame: usize) -> PointCloud {
        let xyz = self.points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        let inten = self.points.iter().map(|p| p[3] as f64).collect();
        PointCloud::new(xyz, inten, frame).expect("scene frames carry matching channels")
    }

    pub fn image(&self) -> Image {
        let rgb = self.rgb.iter().map(|&v| v as f64 / 255.0).collect();
        Image::new(self.height as usize, self.width as usize, rgb).expect("scene images are well formed")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Oldest first; the last frame is the one the utterance refers to.
    pub frames: Vec<Frame>,
    pub tokens: Vec<u16>,
    /// Target span first, then attribute spans, then the terminal span.
    pub spans: Vec<(u16, u16)>,
    pub actors: Vec<Actor>,
    pub target: u16,
    pub gt: [f32; 7],
}

impl Scene {
    pub fn current(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn gt_box(&self) -> Box3D {
        let g = self.gt.map(f64::from);
        Box3D::new(g[0], g[1], g[2], g[3], g[4], g[5], g[6])
    }

    pub fn target_actor(&self) -> Option<&Actor> {
        self.actors.iter().find(|a| a.id == self.target)
    }

    pub fn token_spans(&self) -> TokenSpans {
        let s: Vec<(usize, usize)> = self.spans.iter().map(|&(a, b)| (a as usize, b as usize)).collect();
        TokenSpans {
            target: s[0],
            attributes: s[1..s.len() - 1].to_vec(),
            terminal: s[s.len() - 1],
        }
    }

    pub fn point_count(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).max().unwrap_or(0)
    }

    /// Network input using the last `frames` frames.
    pub fn input(&self, frames: usize) -> SceneInput {
        let start = self.frames.len().saturating_sub(frames.max(1));
        let sel = &self.frames[start..];
        SceneInput {
            clouds: sel.iter().enumerate().map(|(i, f)| f.cloud(i)).collect(),
            images: sel.iter().map(Frame::image).collect(),
            tokens: self.tokens.iter().map(|&t| t as usize).collect(),
        }
    }

    /// Structural invariants shared by the generator and the file writer.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.frames.is_empty() {
            return bad("no frames".into());
        }
        if self.actors.is_empty() {
            return bad("empty actor list".into());
        }
        if self.tokens.is_empty() {
            return bad("empty utterance".into());
        }
        if self.spans.len() < 2 {
            return bad("target and terminal spans are required".into());
        }
        let k = self.frames.len();
        if let Some(a) = self.actors.iter().find(|a| a.positions.len() != k) {
            return bad(format!("actor {} has {} positions for {k} frames", a.id, a.positions.len()));
        }
        if self.target_actor().is_none() {
            return bad(format!("target actor {} missing", self.target));
        }
        for f in &self.frames {
            if f.rgb.len() != f.height as usize * f.width as usize * 3 {
                return bad("image size mismatch".into());
            }
            if f.points.iter().flatten().any(|v| !v.is_finite()) {
                return bad("non-finite point".into());
            }
        }
        self.token_spans()
            .validate(self.tokens.len())
            .map_err(|e| Error::Invalid(e.to_string()))?;
        if !self.gt_box().is_valid() {
            return bad("invalid ground-truth box".into());
        }
        Ok(())
    }
}
