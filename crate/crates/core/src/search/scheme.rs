use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, LayerId, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeName {
    #[serde(rename = "5x1")]
    FiveByOne,
    #[serde(rename = "5x4")]
    FiveByFour,
    #[serde(rename = "custom")]
    Custom,
}

impl SchemeName {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::FiveByOne => "5x1",
            SchemeName::FiveByFour => "5x4",
            SchemeName::Custom => "custom",
        }
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "5x1" | "five_by_one" => Ok(SchemeName::FiveByOne),
            "5x4" | "five_by_four" => Ok(SchemeName::FiveByFour),
            "custom" => Ok(SchemeName::Custom),
            _ => Err(Error::InvalidConfig(format!("unknown grouping scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Attention,
    Ffn,
}

/// Layers that share one compression ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub label: String,
    pub kind: GroupKind,
    pub members: Vec<LayerId>,
}

/// Category sets of the five preset groups; `attn_v` belongs to none.
const PRESET_GROUPS: [(&str, &[Category]); 5] = [
    ("attn_qk", &[Category::AttnQ, Category::AttnK]),
    ("attn_o", &[Category::AttnO]),
    ("mlp_gate", &[Category::MlpGate]),
    ("mlp_up", &[Category::MlpUp]),
    ("mlp_down", &[Category::MlpDown]),
];

/// Partition of a model's linear layers into search groups. Layers outside
/// every group are NA: never compressed and not searched over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    name: SchemeName,
    n_layers: usize,
    groups: Vec<Group>,
}

impl GroupingScheme {
    /// Five groups shared across all blocks.
    pub fn five_by_one(n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        let groups = PRESET_GROUPS.iter().map(|(label, cats)| preset_group(label, cats, 0..n_layers)).collect();
        Ok(Self { name: SchemeName::FiveByOne, n_layers, groups })
    }

    /// The five groups repeated for each quarter of the blocks, quarter-major.
    pub fn five_by_four(n_layers: usize) -> Result<Self> {
        if n_layers < 4 {
            return Err(Error::InvalidConfig(format!("5x4 grouping needs at least 4 layers, model has {n_layers}")));
        }
        let mut groups = Vec::with_capacity(20);
        for q in 0..4 {
            let range = (q * n_layers / 4)..((q + 1) * n_layers / 4);
            for (label, cats) in PRESET_GROUPS {
                groups.push(preset_group(&format!("q{q}.{label}"), cats, range.clone()));
            }
        }
        Ok(Self { name: SchemeName::FiveByFour, n_layers, groups })
    }

    pub fn preset(name: SchemeName, n_layers: usize) -> Result<Self> {
        match name {
            SchemeName::FiveByOne => Self::five_by_one(n_layers),
            SchemeName::FiveByFour => Self::five_by_four(n_layers),
            SchemeName::Custom => Err(Error::InvalidConfig("custom schemes need explicit groups".into())),
        }
    }

    /// Arbitrary groups. Each layer may appear in at most one group and all
    /// members of a group must have the same shape, so one rank serves them.
    pub fn custom(config: &ModelConfig, groups: Vec<Group>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidConfig("custom scheme has no groups".into()));
        }
        let mut seen = BTreeSet::new();
        for g in &groups {
            let first = g.members.first().ok_or_else(|| Error::InvalidConfig(format!("group {} is empty", g.label)))?;
            for id in &g.members {
                if id.layer >= config.n_layers {
                    return Err(Error::InvalidConfig(format!("group {} names unknown layer {id}", g.label)));
                }
                if !seen.insert(*id) {
                    return Err(Error::InvalidConfig(format!("layer {id} is in more than one group")));
                }
                if id.shape(config) != first.shape(config) {
                    return Err(Error::InvalidConfig(format!("group {} mixes layer shapes", g.label)));
                }
            }
        }
        Ok(Self { name: SchemeName::Custom, n_layers: config.n_layers, groups })
    }

    pub fn name(&self) -> SchemeName {
        self.name
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_of(&self, id: LayerId) -> Option<usize> {
        self.groups.iter().position(|g| g.members.contains(&id))
    }

    /// Shape `(d2, d1)` shared by the members of group `g`.
    pub fn group_shape(&self, g: usize, config: &ModelConfig) -> (usize, usize) {
        self.groups[g].members[0].shape(config)
    }

    /// Dense parameter count of group `g`.
    pub fn group_params(&self, g: usize, config: &ModelConfig) -> usize {
        let (d2, d1) = self.group_shape(g, config);
        d1 * d2 * self.groups[g].members.len()
    }

    pub(crate) fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if config.n_layers != self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "scheme built for {} layers, model has {}",
                self.n_layers, config.n_layers
            )));
        }
        Ok(())
    }
}

fn preset_group(label: &str, cats: &[Category], layers: std::ops::Range<usize>) -> Group {
    let kind = if cats[0].is_attention() { GroupKind::Attention } else { GroupKind::Ffn };
    let members = layers.flat_map(|l| cats.iter().map(move |&c| LayerId::new(l, c))).collect();
    Group { label: label.to_string(), kind, members }
}
