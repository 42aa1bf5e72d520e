use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster;
use super::render::{render_scene, SceneSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Image, ModalityId};
use crate::ops::sha256_hex;
use crate::trainer::sampler::mix;

pub const MANIFEST_FORMAT: &str = "specalign-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Train, val and test fractions.
    pub split: [f64; 3],
    /// Fraction of scenes carrying a NIR, SWIR and LWIR render.
    pub modality_ratios: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            seed: 0,
            image_size: 64,
            split: [0.8, 0.1, 0.1],
            modality_ratios: [1.0, 1.0, 1.0],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.image_size < 3 {
            return Err(Error::Config(format!(
                "image size {} too small",
                self.image_size
            )));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {:?} must lie in [0, 1] and sum to 1",
                self.split
            )));
        }
        if self
            .modality_ratios
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Config(format!(
                "modality ratios {:?} must lie in [0, 1]",
                self.modality_ratios
            )));
        }
        Ok(())
    }

    /// Scene counts per split; train and val are rounded, test takes the rest.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.scenes;
        let train = ((self.split[0] * n as f64).round() as usize).min(n);
        let val = ((self.split[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }

    fn split_of(&self, id: u64) -> Split {
        let [train, val, _] = self.split_counts();
        match id as usize {
            i if i < train => Split::Train,
            i if i < train + val => Split::Val,
            _ => Split::Test,
        }
    }

    /// Per band, which scene ids carry that band.
    fn band_membership(&self) -> [Vec<bool>; 3] {
        let n = self.scenes;
        [0usize, 1, 2].map(|i| {
            let count = (self.modality_ratios[i] * n as f64).round() as usize;
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
                mix(self.seed) ^ (0xBA5E + i as u64)
            )));
            let mut member = vec![false; n];
            for &id in &ids[..count.min(n)] {
                member[id] = true;
            }
            member
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: u64,
    pub split: Split,
    pub label: u8,
    /// Keyed by band name (`rgb`, `nir`, `swir`, `lwir`).
    pub files: BTreeMap<String, FileEntry>,
    pub spec: SceneSpec,
}

impl SceneEntry {
    pub fn has(&self, m: ModalityId) -> bool {
        self.files.contains_key(m.name())
    }
}

/// Header line followed by one line per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest";

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.scenes {
            out.push_str(&serde_json::to_string(s).expect("scene serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Dataset {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(err(
                1,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }
        let scenes = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
            .collect::<Result<Vec<SceneEntry>>>()?;
        Ok(Self { header, scenes })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

/// One scene seen as RGB plus one single-channel band.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub scene_id: u64,
    pub modality: ModalityId,
    pub rgb: Arc<Image>,
    pub ms: Image,
    pub label: u8,
}

/// Paired samples of one split grouped by band (NIR, SWIR, LWIR), in
/// manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedSet {
    pub image_size: usize,
    pub pairs: [Vec<PairedSample>; 3],
}

impl PairedSet {
    pub fn get(&self, m: ModalityId) -> &[PairedSample] {
        if m.is_rgb() {
            return &[];
        }
        &self.pairs[m.index() - 1]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.pairs[i].len())
    }

    pub fn is_empty(&self) -> bool {
        self.sizes().iter().all(|&n| n == 0)
    }

    /// Keeps only the listed bands.
    pub fn retain_modalities(&mut self, keep: &[ModalityId]) {
        for (i, m) in ModalityId::MULTISPECTRAL.iter().enumerate() {
            if !keep.contains(m) {
                self.pairs[i].clear();
            }
        }
    }
}

fn plan(cfg: &DatasetConfig) -> Result<Vec<(SceneSpec, Split, Vec<ModalityId>)>> {
    cfg.validate()?;
    let members = cfg.band_membership();
    Ok((0..cfg.scenes as u64)
        .map(|id| {
            let spec = SceneSpec::random(id, cfg.image_size, cfg.seed);
            let bands = ModalityId::MULTISPECTRAL
                .into_iter()
                .enumerate()
                .filter(|(i, _)| members[*i][id as usize])
                .map(|(_, m)| m)
                .collect();
            (spec, cfg.split_of(id), bands)
        })
        .collect())
}

fn scene_file(id: u64, m: ModalityId) -> String {
    format!("scenes/{id:06}_{}", m.name())
}

/// Renders every scene and writes rasters plus the manifest under `out_dir`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let planned = plan(cfg)?;
    let scenes_dir = out_dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let mut scenes = Vec::with_capacity(planned.len());
    for (spec, split, bands) in planned {
        let mut files = BTreeMap::new();
        for m in std::iter::once(ModalityId::RGB).chain(bands) {
            let rel = scene_file(spec.id, m);
            let bytes = raster::encode(&render_scene(&spec, m)?);
            let path = out_dir.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.insert(
                m.name().to_string(),
                FileEntry {
                    path: rel,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
        scenes.push(SceneEntry {
            id: spec.id,
            split,
            label: spec.dominant_label(),
            files,
            spec,
        });
    }
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            num_classes: NUM_CLASSES,
            config: cfg.clone(),
        },
        scenes,
    };
    let path = out_dir.join(Manifest::FILE_NAME);
    let tmp = out_dir.join(".manifest.tmp");
    fs::write(&tmp, manifest.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// The samples `generate_dataset` would write for `split`, rendered in memory.
pub fn generate_in_memory(cfg: &DatasetConfig, split: Split) -> Result<PairedSet> {
    let mut set = PairedSet {
        image_size: cfg.image_size,
        ..Default::default()
    };
    for (spec, s, bands) in plan(cfg)? {
        if s != split {
            continue;
        }
        let rgb = Arc::new(render_scene(&spec, ModalityId::RGB)?);
        let label = spec.dominant_label();
        for m in bands {
            set.pairs[m.index() - 1].push(PairedSample {
                scene_id: spec.id,
                modality: m,
                rgb: Arc::clone(&rgb),
                ms: render_scene(&spec, m)?,
                label,
            });
        }
    }
    Ok(set)
}

fn read_checked(dir: &Path, entry: &FileEntry, channels: usize, size: usize) -> Result<Image> {
    let path: PathBuf = dir.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Dataset {
            path,
            msg: "checksum mismatch (file corrupted or truncated)".into(),
        });
    }
    let img = raster::decode_at(&bytes, &path)?;
    if img.dim() != (channels, size, size) {
        return Err(Error::Dataset {
            path,
            msg: format!(
                "expected {channels}x{size}x{size} raster, found {:?}",
                img.dim()
            ),
        });
    }
    Ok(img)
}

/// Loads the pairs of `split` (all splits when `None`) restricted to `bands`,
/// verifying every file checksum.
pub fn load_dataset(dir: &Path, split: Option<Split>, bands: &[ModalityId]) -> Result<PairedSet> {
    let manifest = Manifest::read(dir)?;
    let size = manifest.header.config.image_size;
    let mut set = PairedSet {
        image_size: size,
        ..Default::default()
    };
    for scene in &manifest.scenes {
        if split.is_some_and(|s| s != scene.split) {
            continue;
        }
        let wanted: Vec<ModalityId> = ModalityId::MULTISPECTRAL
            .into_iter()
            .filter(|m| bands.contains(m) && scene.has(*m))
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let rgb_entry = scene.files.get("rgb").ok_or_else(|| Error::Dataset {
            path: dir.join(Manifest::FILE_NAME),
            msg: format!("scene {} has no RGB counterpart", scene.id),
        })?;
        let rgb = Arc::new(read_checked(dir, rgb_entry, 3, size)?);
        for m in wanted {
            let ms = read_checked(dir, &scene.files[m.name()], 1, size)?;
            set.pairs[m.index() - 1].push(PairedSample {
                scene_id: scene.id,
                modality: m,
                rgb: Arc::clone(&rgb),
                ms,
                label: scene.label,
            });
        }
    }
    Ok(set)
}
