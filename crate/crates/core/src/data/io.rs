//! Text and binary file formats.
//!
//! Every format starts with a magic word and a version: ASCII PLY for point
//! clouds, `RTSKEL 1` skeletons, `RTMOTION 1` motions, `RTMANIFEST 1`
//! dataset manifests and the binary `RTWGT` skinning-weight cache. Reals
//! are written in Rust's shortest round-trip form, so text files reproduce
//! `f64` values exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::MotionClip;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, PoseFrame, Quaternion, Skeleton, SkinWeights, Vec3};

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn origin(path: &Path) -> String {
    path.display().to_string()
}

/// Numbered, non-empty lines of a text file.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a str,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, origin: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            origin,
            last: 0,
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let l = l.trim();
            if !l.is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next().ok_or_else(|| {
            Error::parse(
                self.origin,
                self.last + 1,
                format!("expected {what}, found end of file"),
            )
        })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::parse(self.origin, line, msg)
    }

    fn reals(&self, line: usize, text: &str, n: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(line, format!("bad number: {e}")))?;
        if v.len() != n {
            return Err(self.err(line, format!("expected {n} numbers, found {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(line, "non-finite number"));
        }
        Ok(v)
    }
}

fn push_reals(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:?}").unwrap();
    }
    out.push('\n');
}

// ---------------------------------------------------------------- PLY

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in &cloud.points {
        push_reals(&mut s, [p.x, p.y, p.z]);
    }
    s
}

/// Reads the vertex positions of an ASCII PLY file. Extra vertex properties
/// and elements after the vertices are skipped.
pub fn parse_ply(text: &str, origin: &str) -> Result<PointCloud> {
    let mut lines = Lines::new(text, origin);
    let (n, magic) = lines.expect("`ply`")?;
    if magic != "ply" {
        return Err(lines.err(n, "missing `ply` magic"));
    }
    let (n, format) = lines.expect("format line")?;
    if format != "format ascii 1.0" {
        return Err(lines.err(
            n,
            format!("unsupported format {format:?}; only ascii 1.0 is read"),
        ));
    }
    // (name, count, property count)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let (n, l) = lines.expect("`end_header`")?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok[0] {
            "end_header" => break,
            "comment" | "obj_info" => {}
            "element" if tok.len() == 3 => {
                let count = tok[2]
                    .parse()
                    .map_err(|_| lines.err(n, "bad element count"))?;
                elements.push((tok[1].to_string(), count, Vec::new()));
            }
            "property" if tok.len() >= 3 => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| lines.err(n, "property before any element"))?;
                if tok[1] == "list" && el.0 == "vertex" {
                    return Err(lines.err(n, "list properties on vertices are not supported"));
                }
                el.2.push(tok[tok.len() - 1].to_string());
            }
            _ => return Err(lines.err(n, format!("unexpected header line {l:?}"))),
        }
    }
    let Some(vi) = elements.iter().position(|e| e.0 == "vertex") else {
        return Err(lines.err(lines.last, "no vertex element"));
    };
    let mut points = Vec::new();
    for (ei, (name, count, props)) in elements.iter().enumerate() {
        let axes = if ei == vi {
            let idx = |a: &str| props.iter().position(|p| p == a);
            match (idx("x"), idx("y"), idx("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(lines.err(lines.last, "vertex element lacks x, y or z")),
            }
        } else {
            None
        };
        for k in 0..*count {
            let (n, l) = lines.next().ok_or_else(|| {
                lines.err(
                    lines.last + 1,
                    format!("header declares {count} {name} entries, file ends after {k}"),
                )
            })?;
            if let Some(axes) = axes {
                let v = lines.reals(n, l, props.len())?;
                points.push(Vec3::new(v[axes[0]], v[axes[1]], v[axes[2]]));
            }
        }
    }
    if let Some((n, _)) = lines.next() {
        return Err(lines.err(n, "data beyond the element counts declared in the header"));
    }
    PointCloud::new(points).map_err(|e| lines.err(lines.last, e.to_string()))
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, ply_string(cloud))?)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&read_text(path)?, &origin(path))
}

// ---------------------------------------------------------------- skeleton

/// `RTSKEL 1`, joint count, parent indices (`-1` for the root), then one
/// line per rest offset and one per joint position.
pub fn skeleton_string(s: &Skeleton) -> String {
    let mut out = format!("RTSKEL 1\n{}\n", s.joint_count());
    let parents: Vec<String> = s
        .parents()
        .iter()
        .map(|p| p.map_or("-1".to_string(), |p| p.to_string()))
        .collect();
    out.push_str(&parents.join(" "));
    out.push('\n');
    for o in s.rest_offsets() {
        push_reals(&mut out, [o.x, o.y, o.z]);
    }
    for p in s.joint_positions() {
        push_reals(&mut out, [p.x, p.y, p.z]);
    }
    out
}

pub fn parse_skeleton(text: &str, origin: &str) -> Result<Skeleton> {
    let mut lines = Lines::new(text, origin);
    let (n, magic) = lines.expect("`RTSKEL 1`")?;
    if magic != "RTSKEL 1" {
        return Err(lines.err(n, format!("expected `RTSKEL 1`, found {magic:?}")));
    }
    let (n, l) = lines.expect("joint count")?;
    let j: usize = l.parse().map_err(|_| lines.err(n, "bad joint count"))?;
    let (n, l) = lines.expect("parent list")?;
    let parents: Vec<Option<usize>> = l
        .split_whitespace()
        .map(|t| match t {
            "-1" => Ok(None),
            t => t
                .parse()
                .map(Some)
                .map_err(|_| lines.err(n, format!("bad parent {t:?}"))),
        })
        .collect::<Result<_>>()?;
    if parents.len() != j {
        return Err(lines.err(n, format!("{} parents for {j} joints", parents.len())));
    }
    let mut read_block = |what: &str| -> Result<Vec<Vec3>> {
        (0..j)
            .map(|_| {
                let (n, l) = lines.expect(what)?;
                let v = lines.reals(n, l, 3)?;
                Ok(Vec3::new(v[0], v[1], v[2]))
            })
            .collect()
    };
    let offsets = read_block("rest offset")?;
    let positions = read_block("joint position")?;
    if let Some((n, _)) = lines.next() {
        return Err(lines.err(n, "trailing data after joint positions"));
    }
    Skeleton::new(parents, offsets, positions).map_err(|e| Error::parse(origin, 3, e.to_string()))
}

pub fn write_skeleton(path: &Path, s: &Skeleton) -> Result<()> {
    Ok(fs::write(path, skeleton_string(s))?)
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    parse_skeleton(&read_text(path)?, &origin(path))
}

// ---------------------------------------------------------------- motion

/// `RTMOTION 1`, a `J n fps` line, then per frame the root translation
/// followed by `J` quaternions `w x y z`.
pub fn motion_string(m: &MotionClip) -> String {
    let j = m.joint_count();
    let mut out = format!("RTMOTION 1\n{j} {} {:?}\n", m.frames.len(), m.fps);
    for f in &m.frames {
        let t = f.root_translation;
        let quats = f.rotations.iter().flat_map(|q| [q.w, q.i, q.j, q.k]);
        push_reals(&mut out, [t.x, t.y, t.z].into_iter().chain(quats));
    }
    out
}

pub fn parse_motion(text: &str, origin: &str) -> Result<MotionClip> {
    let mut lines = Lines::new(text, origin);
    let (n, magic) = lines.expect("`RTMOTION 1`")?;
    if magic != "RTMOTION 1" {
        return Err(lines.err(n, format!("expected `RTMOTION 1`, found {magic:?}")));
    }
    let (n, l) = lines.expect("`J n fps` line")?;
    let tok: Vec<&str> = l.split_whitespace().collect();
    let bad = || lines.err(n, "expected `J n fps`");
    if tok.len() != 3 {
        return Err(bad());
    }
    let j: usize = tok[0].parse().map_err(|_| bad())?;
    let count: usize = tok[1].parse().map_err(|_| bad())?;
    let fps: f64 = tok[2].parse().map_err(|_| bad())?;
    if j == 0 || !(fps > 0.0) {
        return Err(lines.err(n, "joint count and fps must be positive"));
    }
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let (n, l) = lines.next().ok_or_else(|| {
            lines.err(
                lines.last + 1,
                format!("header declares {count} frames, file ends after {k}"),
            )
        })?;
        let v = lines.reals(n, l, 3 + 4 * j)?;
        let rotations = (0..j)
            .map(|i| {
                let q = &v[3 + 4 * i..7 + 4 * i];
                let raw = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
                if raw.norm() < 1e-12 {
                    return Err(lines.err(n, format!("zero quaternion for joint {i}")));
                }
                Ok(Quaternion::new_normalize(raw))
            })
            .collect::<Result<_>>()?;
        frames.push(PoseFrame {
            rotations,
            root_translation: Vec3::new(v[0], v[1], v[2]),
        });
    }
    if let Some((n, _)) = lines.next() {
        return Err(lines.err(n, format!("more than the {count} frames declared")));
    }
    Ok(MotionClip { fps, frames })
}

pub fn write_motion(path: &Path, m: &MotionClip) -> Result<()> {
    Ok(fs::write(path, motion_string(m))?)
}

pub fn read_motion(path: &Path) -> Result<MotionClip> {
    parse_motion(&read_text(path)?, &origin(path))
}

// ---------------------------------------------------------------- manifest

/// A list of frame files plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub frames: Vec<PathBuf>,
}

impl Manifest {
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    /// `RTMANIFEST 1`, `meta <key> <value>` lines, then `frame <path>` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("RTMANIFEST 1\n");
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for f in &self.frames {
            writeln!(out, "frame {}", f.display()).unwrap();
        }
        out
    }

    /// An empty file is an empty manifest.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = Lines::new(text, origin);
        let mut m = Manifest::default();
        let Some((n, magic)) = lines.next() else {
            return Ok(m);
        };
        if magic != "RTMANIFEST 1" {
            return Err(lines.err(n, format!("expected `RTMANIFEST 1`, found {magic:?}")));
        }
        while let Some((n, l)) = lines.next() {
            match l.split_once(' ') {
                Some(("meta", rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    m.meta.insert(k.to_string(), v.trim().to_string());
                }
                Some(("frame", p)) => m.frames.push(PathBuf::from(p.trim())),
                _ => return Err(lines.err(n, format!("unexpected manifest line {l:?}"))),
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    /// Reads a manifest and resolves relative frame paths against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut m = Self::parse(&read_text(path)?, &origin(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut m.frames {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------- weights

const WEIGHT_MAGIC: &[u8; 8] = b"RTWGT\0\0\0";
const WEIGHT_VERSION: u32 = 1;

/// Magic, `u32` version, `u64` V, `u64` J, then `V * J` little-endian `f64`.
pub fn weights_bytes(w: &SkinWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + w.as_slice().len() * 8);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    out.extend_from_slice(&(w.joint_count() as u64).to_le_bytes());
    for v in w.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_weights(bytes: &[u8], origin: &str) -> Result<SkinWeights> {
    let bad = |msg: &str| Error::parse(origin, 1, msg);
    if bytes.len() < 28 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(bad("not a skinning weight cache"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(bad(&format!("unsupported weight cache version {version}")));
    }
    let v = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let j = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if v.checked_mul(j).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(bad(&format!(
            "header says {v}x{j} weights, body holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SkinWeights::new(j, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_weights(path: &Path, w: &SkinWeights) -> Result<()> {
    Ok(fs::write(path, weights_bytes(w))?)
}

pub fn read_weights(path: &Path) -> Result<SkinWeights> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    parse_weights(&fs::read(path)?, &origin(path))
}
