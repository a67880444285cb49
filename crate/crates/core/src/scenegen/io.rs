//! Binary scene files and dataset directories.
//!
//! Scene layout (little-endian): magic `GF3D`, version `u16`, point count
//! `u64`, `3 × f64` per point, feature width `u32` followed by
//! `width × f64` per point when nonzero, box count `u64`, then per box
//! center, size and yaw as `7 × f64` and the class as `u16`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{GeneratorConfig, Scene};
use crate::diffcore::Tensor;
use crate::error::{bail, Error, Result};
use crate::geometry::Box3D;

const MAGIC: &[u8; 4] = b"GF3D";
const VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
const GENERATOR_FILE: &str = "generator.toml";
const SCENE_EXT: &str = "gf3d";

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let width = scene.features.as_ref().map_or(0, |f| f.cols());
    let mut out = Vec::with_capacity(4 + 2 + 8 + scene.points.len() * 8 * (3 + width) + 4 + 8 + scene.boxes.len() * 58);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.points.len() as u64).to_le_bytes());
    for p in &scene.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(width as u32).to_le_bytes());
    if let Some(f) = &scene.features {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(scene.boxes.len() as u64).to_le_bytes());
    for b in &scene.boxes {
        for v in b.center.iter().chain(&b.size).chain([&b.yaw]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(b.class_id as u16).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!("truncated while reading {what}"),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str, elem_bytes: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)? as usize;
        if n.saturating_mul(elem_bytes) > self.bytes.len() - self.pos {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("{what} {n} exceeds remaining file size"),
            });
        }
        Ok(n)
    }
}

pub fn decode_scene(bytes: &[u8], id: &str) -> Result<Scene> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a GF3D scene".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.count("point count", 24)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f64("point")?, r.f64("point")?, r.f64("point")?]);
    }
    let width = r.u32("feature width")? as usize;
    let features = if width > 0 {
        let mut data = Vec::with_capacity(n * width);
        for _ in 0..n * width {
            data.push(r.f64("feature")?);
        }
        Some(Tensor::new([n, width], data)?)
    } else {
        None
    };
    let nb = r.count("box count", 58)?;
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let at = r.pos;
        let mut v = [0.0; 7];
        for x in &mut v {
            *x = r.f64("box")?;
        }
        let class_id = r.u16("box class")? as usize;
        let b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class_id, 1.0).map_err(|e| {
            Error::Format {
                offset: at as u64,
                msg: e.to_string(),
            }
        })?;
        boxes.push(b);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after box list".into(),
        });
    }
    Ok(Scene {
        id: id.to_string(),
        points,
        features,
        boxes,
    })
}

/// Writes `scene` to `path`. The scene id is not stored; readers take it
/// from the file stem.
pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    decode_scene(&bytes, id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub generator: GeneratorConfig,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Scene]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => bail!(Argument, "unknown split {other:?} (expected train or val)"),
        }
    }
}

fn scene_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{SCENE_EXT}"))
}

/// Writes scene files, the generator config and a manifest listing split
/// membership (`<split> <scene id>` per line).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# gf3d dataset manifest v1\n");
    for (split, scenes) in [("train", &ds.train), ("val", &ds.val)] {
        for s in scenes {
            write_scene(&scene_path(dir, &s.id), s)?;
            writeln!(manifest, "{split} {}", s.id).unwrap();
        }
    }
    let gen = toml::to_string(&ds.generator).map_err(|e| Error::Config(e.to_string()))?;
    let gp = dir.join(GENERATOR_FILE);
    std::fs::write(&gp, gen).map_err(|e| Error::io(gp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, manifest).map_err(|e| Error::io(mp, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let gp = dir.join(GENERATOR_FILE);
    let gen = std::fs::read_to_string(&gp).map_err(|e| Error::io(&gp, e))?;
    let generator: GeneratorConfig = toml::from_str(&gen).map_err(|e| Error::Config(format!("{}: {e}", gp.display())))?;
    let mp = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut ds = Dataset {
        generator,
        train: vec![],
        val: vec![],
    };
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, id) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("{}:{}: malformed manifest line", mp.display(), lineno + 1)))?;
        let scene = read_scene(&scene_path(dir, id.trim()))?;
        match split {
            "train" => ds.train.push(scene),
            "val" => ds.val.push(scene),
            other => bail!(Data, "{}:{}: unknown split {other:?}", mp.display(), lineno + 1),
        }
    }
    Ok(ds)
}
