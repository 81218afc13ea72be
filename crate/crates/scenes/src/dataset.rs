//! Train/test dataset construction, manifests and loading.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::format::{read_scene, scene_to_bytes, stored_crc};
use crate::generate::{generate_scene, GeneratorConfig};
use crate::vocab::Vocabulary;
use crate::{Difficulty, Error, Result, Scene};

pub const MANIFEST: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
const TEST_RESAMPLES: u64 = 64;
/// Training occurrences each test word needs.
pub const MIN_TRAIN_OCCURRENCES: usize = 2;

/// SplitMix64 output for `state`; child seeds are `splitmix64(master + i)`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub frames: usize,
    pub vocabulary: String,
    /// Checksum over the per-scene checksums in listing order.
    pub crc: u32,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn paths(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format: wildground-manifest\nversion: 1\nseed: {}\ndifficulty: {}\nframes: {}\ntrain: {}\ntest: {}\nvocabulary: {}\ncrc: {:08x}\nscenes:\n",
            self.seed,
            self.difficulty,
            self.frames,
            self.train.len(),
            self.test.len(),
            self.vocabulary,
            self.crc
        );
        for p in self.train.iter().chain(&self.test) {
            s.push_str(p);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |m: String| Error::Manifest(m);
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut lines = text.lines();
        for line in lines.by_ref() {
            if line.trim() == "scenes:" {
                break;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            header.insert(k.trim(), v.trim());
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        if get("format")? != "wildground-manifest" || get("version")? != "1" {
            return Err(bad("unsupported manifest format".into()));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let (n_train, n_test) = (num("train")? as usize, num("test")? as usize);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("train/") {
                train.push(line.to_string());
            } else if line.starts_with("test/") {
                test.push(line.to_string());
            } else {
                return Err(bad(format!("scene path outside the splits: {line}")));
            }
        }
        if train.len() != n_train || test.len() != n_test {
            return Err(bad(format!(
                "header lists {n_train}/{n_test} scenes, found {}/{}",
                train.len(),
                test.len()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            seed: num("seed")?,
            difficulty: get("difficulty")?.parse()?,
            frames: num("frames")? as usize,
            vocabulary: get("vocabulary")?.to_string(),
            crc: u32::from_str_radix(get("crc")?, 16).map_err(|_| bad("bad crc".into()))?,
            train,
            test,
        })
    }

    /// Reads `manifest.txt` in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        Self::parse(&text, dir)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.root.join(&self.vocabulary))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub generator: GeneratorConfig,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 125,
            seed: 0,
            difficulty: Difficulty::Default,
            generator: GeneratorConfig::default(),
        }
    }
}

fn count_words(counts: &mut HashMap<u16, usize>, scene: &Scene) {
    for &t in &scene.tokens {
        *counts.entry(t).or_default() += 1;
    }
}

/// Whether every word of `scene` occurs at least twice in the training counts.
pub fn covered(counts: &HashMap<u16, usize>, scene: &Scene) -> bool {
    scene
        .tokens
        .iter()
        .all(|t| counts.get(t).copied().unwrap_or(0) >= MIN_TRAIN_OCCURRENCES)
}

/// Generates both splits in memory; test scenes with under-covered words are
/// regenerated from fresh child seeds.
pub fn generate_splits(opts: &DatasetOptions) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if opts.n_train == 0 || opts.n_test == 0 {
        return Err(Error::Invalid("split sizes must be positive".into()));
    }
    let total = (opts.n_train + opts.n_test) as u64;
    let train = (0..opts.n_train as u64)
        .map(|i| generate_scene(child_seed(opts.seed, i), opts.difficulty, &opts.generator))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = HashMap::new();
    train.iter().for_each(|s| count_words(&mut counts, s));
    let mut test = Vec::with_capacity(opts.n_test);
    for j in 0..opts.n_test as u64 {
        let mut found = None;
        for attempt in 0..TEST_RESAMPLES {
            let seed = child_seed(opts.seed, opts.n_train as u64 + j + attempt * total);
            let s = generate_scene(seed, opts.difficulty, &opts.generator)?;
            if covered(&counts, &s) {
                found = Some(s);
                break;
            }
        }
        test.push(found.ok_or_else(|| {
            Error::Unsatisfiable(format!(
                "test scene {j}: vocabulary rule unsatisfiable with {} training scenes",
                opts.n_train
            ))
        })?);
    }
    Ok((train, test))
}

/// Writes scenes, vocabulary and manifest under `out`.
pub fn build_dataset(out: &Path, opts: &DatasetOptions) -> Result<DatasetManifest> {
    let (train, test) = generate_splits(opts)?;
    std::fs::create_dir_all(out.join("train"))?;
    std::fs::create_dir_all(out.join("test"))?;
    Vocabulary::standard().save(&out.join(VOCAB_FILE))?;
    let mut crcs = Vec::new();
    let mut write = |split: Split, scenes: &[Scene]| -> Result<Vec<String>> {
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let rel = format!("{split}/scene_{i:05}.wgs");
                let bytes = scene_to_bytes(s)?;
                crcs.extend_from_slice(&stored_crc(&bytes).expect("encoded scene").to_le_bytes());
                std::fs::write(out.join(&rel), bytes)?;
                Ok(rel)
            })
            .collect()
    };
    let train_paths = write(Split::Train, &train)?;
    let test_paths = write(Split::Test, &test)?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        seed: opts.seed,
        difficulty: opts.difficulty,
        frames: opts.generator.frames,
        vocabulary: VOCAB_FILE.into(),
        crc: crc32fast::hash(&crcs),
        train: train_paths,
        test: test_paths,
    };
    std::fs::write(out.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Scene>> {
    manifest
        .paths(split)
        .iter()
        .map(|p| read_scene(&manifest.root.join(p)))
        .collect()
}

/// Recomputes the dataset checksum from the files on disk.
pub fn dataset_crc(manifest: &DatasetManifest) -> Result<u32> {
    let mut crcs = Vec::new();
    for p in manifest.train.iter().chain(&manifest.test) {
        let bytes = std::fs::read(manifest.root.join(p))?;
        let c = stored_crc(&bytes).ok_or(Error::Truncated(bytes.len()))?;
        crcs.extend_from_slice(&c.to_le_bytes());
    }
    Ok(crc32fast::hash(&crcs))
}
