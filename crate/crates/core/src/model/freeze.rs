use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Model, ParamGroup};
use crate::error::{Error, Result};

/// Which parameter groups receive gradient updates.
///
/// The patch embedding, CLS token and positional embeddings are frozen in
/// every configuration. Unfrozen backbone blocks are always the deepest
/// `unfrozen_blocks` by index, including their internal layer norms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeSpec {
    pub rgb_stem: bool,
    /// NIR, SWIR, LWIR.
    pub ms_stems: [bool; 3],
    pub adapters: bool,
    pub modality_table: bool,
    pub final_norm: bool,
    pub unfrozen_blocks: usize,
}

impl FreezeSpec {
    /// Backbone frozen; MS stems, adapters, modality table and final norm train.
    pub fn stage_one() -> Self {
        Self {
            rgb_stem: false,
            ms_stems: [true; 3],
            adapters: true,
            modality_table: true,
            final_norm: true,
            unfrozen_blocks: 0,
        }
    }

    pub fn with_rgb_stem(mut self, trainable: bool) -> Self {
        self.rgb_stem = trainable;
        self
    }

    pub fn with_unfrozen_blocks(mut self, u: usize) -> Self {
        self.unfrozen_blocks = u;
        self
    }

    pub fn all_frozen() -> Self {
        Self {
            rgb_stem: false,
            ms_stems: [false; 3],
            adapters: false,
            modality_table: false,
            final_norm: false,
            unfrozen_blocks: 0,
        }
    }

    fn is_trainable(&self, group: ParamGroup, depth: usize) -> bool {
        match group {
            ParamGroup::PatchEmbed | ParamGroup::ClsToken | ParamGroup::PosEmbed => false,
            ParamGroup::Block(i) => i >= depth - self.unfrozen_blocks,
            ParamGroup::FinalNorm => self.final_norm,
            ParamGroup::RgbStem => self.rgb_stem,
            ParamGroup::MsStem(m) => self.ms_stems[m.index() - 1],
            ParamGroup::Adapter { .. } => self.adapters,
            ParamGroup::ModalityTable => self.modality_table,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReport {
    pub trainable: bool,
    pub params: usize,
    /// Parameters excluding bias vectors.
    pub weights: usize,
}

/// Outcome of [`Model::set_trainable`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub groups: BTreeMap<String, GroupReport>,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Indices of trainable backbone blocks.
    pub trainable_blocks: Vec<usize>,
    pub adapter_weights: usize,
    pub adapter_params_with_bias: usize,
}

impl Model {
    /// Marks exactly the groups named by `spec` as trainable.
    pub fn set_trainable(&mut self, spec: &FreezeSpec) -> Result<TrainableReport> {
        let depth = self.config.depth;
        if spec.unfrozen_blocks > depth {
            return Err(Error::Config(format!(
                "cannot unfreeze {} blocks of a depth-{depth} backbone",
                spec.unfrozen_blocks
            )));
        }
        self.visit_params_mut(&mut |_, g, p| p.trainable = spec.is_trainable(g, depth));
        Ok(self.trainable_report())
    }

    pub fn trainable_report(&self) -> TrainableReport {
        let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
        let mut trainable_params = 0;
        let mut frozen_params = 0;
        let mut adapter_weights = 0;
        let mut adapter_params_with_bias = 0;
        let mut blocks = std::collections::BTreeSet::new();
        self.visit_params(&mut |name, g, p| {
            let is_bias = name.ends_with(".bias");
            let entry = groups.entry(g.to_string()).or_insert(GroupReport {
                trainable: p.trainable,
                params: 0,
                weights: 0,
            });
            entry.params += p.numel();
            entry.trainable |= p.trainable;
            if !is_bias {
                entry.weights += p.numel();
            }
            if p.trainable {
                trainable_params += p.numel();
                if let ParamGroup::Block(i) = g {
                    blocks.insert(i);
                }
            } else {
                frozen_params += p.numel();
            }
            if let ParamGroup::Adapter { .. } = g {
                adapter_params_with_bias += p.numel();
                if !is_bias {
                    adapter_weights += p.numel();
                }
            }
        });
        TrainableReport {
            groups,
            trainable_params,
            frozen_params,
            trainable_blocks: blocks.into_iter().collect(),
            adapter_weights,
            adapter_params_with_bias,
        }
    }
}
