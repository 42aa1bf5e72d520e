//! Versioned checkpoint container of named binary segments.
//!
//! Layout: magic `SACKPT\0\0`, `u32` version, `u32` segment count, then per
//! segment a length-prefixed name and a length-prefixed blob, then the
//! SHA-256 of everything before it. See `docs/formats.md`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariantConfig, Teacher};
use crate::nn::{Param, Parameters};

const MAGIC: &[u8; 8] = b"SACKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub segments: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn insert(&mut self, name: &str, bytes: Vec<u8>) {
        self.segments.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.segments
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing segment {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.segments.contains_key(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.segments.len() as u32);
        for (name, blob) in &self.segments {
            w.str(name);
            w.blob(blob);
        }
        w.finish_with_digest()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader::with_digest(bytes, "checkpoint")?;
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let n = r.u32()?;
        let mut segments = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let blob = r.blob()?.to_vec();
            segments.insert(name, blob);
        }
        r.finish()?;
        Ok(Self { segments })
    }

    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

const MODEL_MAGIC: &[u8; 8] = b"SAMODEL\0";
const MODEL_VERSION: u32 = 1;

fn write_params(
    w: &mut Writer,
    cfg: &ModelVariantConfig,
    module: &dyn Parameters,
    checksums: &BTreeMap<String, String>,
) {
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.str(&serde_json::to_string(cfg).expect("config serializes"));
    let mut params = Vec::new();
    module.visit(&mut |n, p| params.push((n.to_string(), p)));
    w.u64(params.len() as u64);
    for (name, p) in params {
        w.str(&name);
        w.u32(p.value.nrows() as u32);
        w.u32(p.value.ncols() as u32);
        w.f32_slice(p.value.as_slice().expect("parameters are contiguous"));
    }
    w.u32(checksums.len() as u32);
    for (g, c) in checksums {
        w.str(g);
        w.str(c);
    }
}

struct ParamBlob {
    config: ModelVariantConfig,
    values: HashMap<String, Array2<f32>>,
    checksums: BTreeMap<String, String>,
}

fn read_params(bytes: &[u8]) -> Result<ParamBlob> {
    let mut r = Reader::new(bytes, "model segment");
    r.expect_magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Checkpoint(format!(
            "model segment version {version}, expected {MODEL_VERSION}"
        )));
    }
    let config: ModelVariantConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    config.validate()?;
    let n = r.u64()?;
    let mut values = HashMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f32_vec(rows * cols)?;
        values.insert(
            name,
            Array2::from_shape_vec((rows, cols), data).expect("length matches"),
        );
    }
    let ng = r.u32()?;
    let mut checksums = BTreeMap::new();
    for _ in 0..ng {
        let g = r.str()?;
        checksums.insert(g, r.str()?);
    }
    r.finish()?;
    Ok(ParamBlob {
        config,
        values,
        checksums,
    })
}

fn assign(
    module: &mut dyn Parameters,
    mut values: HashMap<String, Array2<f32>>,
    what: &str,
) -> Result<()> {
    let mut err = None;
    module.visit_mut(&mut |name, p: &mut Param| {
        if err.is_some() {
            return;
        }
        match values.remove(name) {
            Some(v) if v.dim() == p.value.dim() => p.value = v,
            Some(v) => {
                err = Some(format!(
                    "{what}: {name} has shape {:?}, expected {:?}",
                    v.dim(),
                    p.value.dim()
                ))
            }
            None => err = Some(format!("{what}: parameter {name} missing")),
        }
    });
    if let Some(e) = err {
        return Err(Error::Checkpoint(e));
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{what}: unexpected parameter {extra}"
        )));
    }
    Ok(())
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    write_params(&mut w, &model.config, model, &model.group_checksums());
    w.into_inner()
}

/// Rebuilds a model from its segment, verifying every group checksum. All
/// parameters come back trainable; callers apply a freeze spec.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let blob = read_params(bytes)?;
    let mut model = Model::build(&blob.config, 0)?;
    assign(&mut model, blob.values, "model")?;
    let actual = model.group_checksums();
    if actual != blob.checksums {
        let bad = actual
            .iter()
            .find(|(g, c)| blob.checksums.get(*g) != Some(c))
            .map(|(g, _)| g.clone())
            .unwrap_or_else(|| "group list".into());
        return Err(Error::Checkpoint(format!(
            "model checksum mismatch in {bad}"
        )));
    }
    Ok(model)
}

pub fn encode_teacher(teacher: &Teacher) -> Vec<u8> {
    let mut w = Writer::new();
    let mut sums = BTreeMap::new();
    sums.insert("teacher".to_string(), teacher.checksum());
    write_params(&mut w, &teacher.config, &teacher.backbone, &sums);
    w.into_inner()
}

pub fn decode_teacher(bytes: &[u8]) -> Result<Teacher> {
    let blob = read_params(bytes)?;
    let mut teacher = Model::build(&blob.config, 0)?.teacher();
    assign(&mut teacher.backbone, blob.values, "teacher")?;
    if blob.checksums.get("teacher") != Some(&teacher.checksum()) {
        return Err(Error::Checkpoint("teacher checksum mismatch".into()));
    }
    Ok(teacher)
}

pub fn encode_rng(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
    w.into_inner()
}

pub fn decode_rng(bytes: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let mut r = Reader::new(bytes, "rng segment");
    let seed: [u8; 32] = r.raw(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}
