use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of spectral modalities routed by the model (RGB, NIR, SWIR, LWIR).
pub const NUM_MODALITIES: usize = 4;

/// Named backbone presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Toy,
    VitS,
    VitB,
    VitL,
    VitG,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Toy,
        Variant::VitS,
        Variant::VitB,
        Variant::VitL,
        Variant::VitG,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Toy => "toy",
            Variant::VitS => "vit-s",
            Variant::VitB => "vit-b",
            Variant::VitL => "vit-l",
            Variant::VitG => "vit-g",
        }
    }

    pub fn model_config(self) -> ModelVariantConfig {
        match self {
            Variant::Toy => ModelVariantConfig::new("toy", 64, 4, 4, 8, 64),
            Variant::VitS => ModelVariantConfig::new("vit-s", 384, 12, 6, 14, 224),
            Variant::VitB => ModelVariantConfig::new("vit-b", 768, 12, 12, 14, 224),
            Variant::VitL => ModelVariantConfig::new("vit-l", 1024, 24, 16, 14, 224),
            Variant::VitG => ModelVariantConfig::new("vit-g", 1536, 40, 24, 14, 224),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected toy|vit-s|vit-b|vit-l|vit-g)"
                ))
            })
    }
}

/// Backbone shape and adapter width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariantConfig {
    pub name: String,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    pub adapter_bottleneck: usize,
    pub num_modalities: usize,
}

impl ModelVariantConfig {
    /// A config with the standard MLP ratio of 4 and adapter bottleneck `D/4`.
    pub fn new(
        name: &str,
        embed_dim: usize,
        depth: usize,
        num_heads: usize,
        patch_size: usize,
        image_size: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            patch_size,
            image_size,
            adapter_bottleneck: embed_dim / 4,
            num_modalities: NUM_MODALITIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 || self.patch_size == 0 {
            return fail("embed_dim, depth, num_heads and patch_size must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 4 != 0 || self.adapter_bottleneck * 4 != self.embed_dim {
            return fail(format!(
                "adapter_bottleneck {} must equal embed_dim/4 exactly (embed_dim {})",
                self.adapter_bottleneck, self.embed_dim
            ));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_modalities != NUM_MODALITIES {
            return fail(format!(
                "num_modalities must be {NUM_MODALITIES}, got {}",
                self.num_modalities
            ));
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio;
        if !(self.mlp_ratio > 0.0) || hidden.fract() != 0.0 {
            return fail(format!(
                "mlp_ratio {} does not give an integral hidden width",
                self.mlp_ratio
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus CLS.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio) as usize
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn accounting(&self) -> ParamAccounting {
        ParamAccounting::for_config(self)
    }
}

/// Closed-form parameter counts for the adapter path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamAccounting {
    pub adapter_instances: usize,
    /// `2 * D * D/4`, biases excluded.
    pub weights_per_adapter: usize,
    pub biases_per_adapter: usize,
    pub total_adapter_weights: usize,
    pub total_adapter_params: usize,
    pub modality_table: usize,
}

impl ParamAccounting {
    pub fn for_config(cfg: &ModelVariantConfig) -> Self {
        let d = cfg.embed_dim;
        let r = cfg.adapter_bottleneck;
        let instances = cfg.depth * cfg.num_modalities;
        let weights = 2 * d * r;
        let biases = d + r;
        Self {
            adapter_instances: instances,
            weights_per_adapter: weights,
            biases_per_adapter: biases,
            total_adapter_weights: instances * weights,
            total_adapter_params: instances * (weights + biases),
            modality_table: cfg.num_modalities * d,
        }
    }
}

/// Spectral band routing key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ModalityId(u8);

impl ModalityId {
    pub const RGB: ModalityId = ModalityId(0);
    pub const NIR: ModalityId = ModalityId(1);
    pub const SWIR: ModalityId = ModalityId(2);
    pub const LWIR: ModalityId = ModalityId(3);

    pub const ALL: [ModalityId; 4] = [Self::RGB, Self::NIR, Self::SWIR, Self::LWIR];
    /// The single-channel bands, in round-robin order.
    pub const MULTISPECTRAL: [ModalityId; 3] = [Self::NIR, Self::SWIR, Self::LWIR];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_MODALITIES {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!("modality id {value} outside 0..=3")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_rgb(self) -> bool {
        self == Self::RGB
    }

    pub fn channels(self) -> usize {
        if self.is_rgb() {
            3
        } else {
            1
        }
    }

    pub fn name(self) -> &'static str {
        ["rgb", "nir", "swir", "lwir"][self.index()]
    }
}

impl TryFrom<u8> for ModalityId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ModalityId> for u8 {
    fn from(m: ModalityId) -> u8 {
        m.0
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityId::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}
