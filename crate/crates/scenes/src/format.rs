//! Little-endian binary scene files.
//!
//! ```text
//! "WGSCN1" | u32 version | u32 K | u64 body length | u32 header crc
//! body:
//!   K x (u32 count, count x [f32; 4] xyzi)
//!   K x (u16 H, u16 W, H*W*3 u8 rgb)
//!   u16 M, M x u16 token ids
//!   u8 span count, span count x (u16 begin, u16 end)
//!   7 x f32 ground-truth box
//!   u64 seed, u8 difficulty, u16 target id
//!   u8 actor count, actor count x
//!     (u16 id, u8 color, u8 motion, u8 carried, f32 heading, 3 x f32 size, K x 3 x f32 position)
//! u32 crc of everything above
//! ```

use std::path::Path;

use crate::{Actor, Carried, Color, Difficulty, Error, Frame, Motion, Result, Scene};

pub const MAGIC: &[u8; 6] = b"WGSCN1";
pub const VERSION: u32 = 1;
const HEADER: usize = 6 + 4 + 4 + 8 + 4;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Invalid(format!("{n} {what} exceed the format limit")))
}

fn len_u8(n: usize, what: &str) -> Result<u8> {
    u8::try_from(n).map_err(|_| Error::Invalid(format!("{n} {what} exceed the format limit")))
}

pub fn scene_to_bytes(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let k = scene.frames.len();
    let mut b = Writer(Vec::new());
    for f in &scene.frames {
        b.u32(u32::try_from(f.points.len()).map_err(|_| Error::Invalid("too many points".into()))?);
        f.points.iter().flatten().for_each(|&v| b.f32(v));
    }
    for f in &scene.frames {
        b.u16(f.height);
        b.u16(f.width);
        b.0.extend_from_slice(&f.rgb);
    }
    b.u16(len_u16(scene.tokens.len(), "tokens")?);
    scene.tokens.iter().for_each(|&t| b.u16(t));
    b.u8(len_u8(scene.spans.len(), "spans")?);
    for &(s, e) in &scene.spans {
        b.u16(s);
        b.u16(e);
    }
    scene.gt.iter().for_each(|&v| b.f32(v));
    b.u64(scene.seed);
    b.u8(scene.difficulty.code());
    b.u16(scene.target);
    b.u8(len_u8(scene.actors.len(), "actors")?);
    for a in &scene.actors {
        b.u16(a.id);
        b.u8(a.color.code());
        b.u8(a.motion.code());
        b.u8(a.carried.code());
        b.f32(a.heading);
        a.size.iter().for_each(|&v| b.f32(v));
        a.positions.iter().flatten().for_each(|&v| b.f32(v));
    }
    let body = b.0;
    let mut out = Writer(Vec::with_capacity(HEADER + body.len() + 4));
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u32(k as u32);
    out.u64(body.len() as u64);
    let hc = crc32fast::hash(&out.0);
    out.u32(hc);
    out.0.extend_from_slice(&body);
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    Ok(out.0)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated(self.data.len()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn label<T>(v: Option<T>, what: &str, code: u8) -> Result<T> {
    v.ok_or_else(|| Error::Invalid(format!("unknown {what} code {code}")))
}

pub fn scene_from_bytes(data: &[u8]) -> Result<Scene> {
    if data.len() < MAGIC.len() {
        return Err(Error::Truncated(data.len()));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if data.len() < HEADER {
        return Err(Error::Truncated(data.len()));
    }
    let mut r = Reader {
        data,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    let k = r.u32()? as usize;
    let body_len = r.u64()?;
    let stored_hc = r.u32()?;
    let hc = crc32fast::hash(&data[..HEADER - 4]);
    if hc != stored_hc {
        return Err(Error::Checksum {
            stored: stored_hc,
            computed: hc,
        });
    }
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let total = (HEADER as u64).saturating_add(body_len).saturating_add(4);
    if (data.len() as u64) < total {
        return Err(Error::Truncated(data.len()));
    }
    if data.len() as u64 > total {
        return Err(Error::Invalid(format!("{} trailing bytes", data.len() as u64 - total)));
    }
    let end = data.len() - 4;
    let stored = u32::from_le_bytes(data[end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&data[..end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        data: &data[..end],
        pos: HEADER,
    };
    let mut frames = Vec::with_capacity(k);
    for _ in 0..k {
        let n = r.u32()? as usize;
        let raw = r.take(n * 16)?;
        let points = raw
            .chunks_exact(16)
            .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"))))
            .collect();
        frames.push(Frame {
            points,
            height: 0,
            width: 0,
            rgb: Vec::new(),
        });
    }
    for f in &mut frames {
        f.height = r.u16()?;
        f.width = r.u16()?;
        f.rgb = r.take(f.height as usize * f.width as usize * 3)?.to_vec();
    }
    let m = r.u16()? as usize;
    let tokens = (0..m).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let ns = r.u8()? as usize;
    let spans = (0..ns).map(|_| Ok((r.u16()?, r.u16()?))).collect::<Result<Vec<_>>>()?;
    let mut gt = [0f32; 7];
    for v in &mut gt {
        *v = r.f32()?;
    }
    let seed = r.u64()?;
    let dc = r.u8()?;
    let difficulty = label(Difficulty::from_code(dc), "difficulty", dc)?;
    let target = r.u16()?;
    let na = r.u8()? as usize;
    let mut actors = Vec::with_capacity(na);
    for _ in 0..na {
        let id = r.u16()?;
        let (c, mo, ca) = (r.u8()?, r.u8()?, r.u8()?);
        let heading = r.f32()?;
        let size = [r.f32()?, r.f32()?, r.f32()?];
        let positions = (0..k)
            .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?]))
            .collect::<Result<Vec<_>>>()?;
        actors.push(Actor {
            id,
            positions,
            size,
            heading,
            color: label(Color::from_code(c), "color", c)?,
            motion: label(Motion::from_code(mo), "motion", mo)?,
            carried: label(Carried::from_code(ca), "carried object", ca)?,
        });
    }
    if r.pos != end {
        return Err(Error::Invalid(format!("{} unread body bytes", end - r.pos)));
    }
    let scene = Scene {
        seed,
        difficulty,
        frames,
        tokens,
        spans,
        actors,
        target,
        gt,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let bytes = scene_to_bytes(scene)?;
    Ok(std::fs::write(path, bytes)?)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    scene_from_bytes(&std::fs::read(path)?)
}

/// Stored whole-file checksum of an encoded scene.
pub fn stored_crc(bytes: &[u8]) -> Option<u32> {
    let n = bytes.len();
    (n >= 4).then(|| u32::from_le_bytes(bytes[n - 4..].try_into().expect("4 bytes")))
}
