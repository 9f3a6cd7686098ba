//! Condition injection: the shared condition encoder with per-block low-rank
//! K/V side branches, and the baselines it is compared against.
//!
//! | scheme           | how the condition reaches block `i`                               |
//! |------------------|-------------------------------------------------------------------|
//! | `nanocontrol`    | keys/values `C_h·A_K·B_K`, `C_h·A_V·B_V` appended to the attention |
//! | `additive`       | separate attention over the same condition keys, added to output  |
//! | `layer_by_layer` | like `nanocontrol`, but block `i` reads block `i−1`'s side state  |
//! | `controlnet_dup` | trainable copy of the first blocks fused by zero-initialized maps |
//! | `unified_seq`    | condition tokens join the image stream in every block (LoRA)      |

mod attention;
mod params;

pub use attention::{additive_attention, cond_kv, kv_augmented_attention};
pub use params::{ConditionEncoder, ControlParams, LowRankLinear, UnifiedLora};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlScheme {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "nanocontrol")]
    NanoControl,
    #[serde(rename = "controlnet_dup")]
    ControlNetDup,
    #[serde(rename = "unified_seq")]
    UnifiedSeq,
    #[serde(rename = "additive")]
    Additive,
    #[serde(rename = "layer_by_layer")]
    LayerByLayer,
}

impl ControlScheme {
    pub const ALL: [ControlScheme; 6] = [
        ControlScheme::None,
        ControlScheme::NanoControl,
        ControlScheme::ControlNetDup,
        ControlScheme::UnifiedSeq,
        ControlScheme::Additive,
        ControlScheme::LayerByLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlScheme::None => "none",
            ControlScheme::NanoControl => "nanocontrol",
            ControlScheme::ControlNetDup => "controlnet_dup",
            ControlScheme::UnifiedSeq => "unified_seq",
            ControlScheme::Additive => "additive",
            ControlScheme::LayerByLayer => "layer_by_layer",
        }
    }

    /// Schemes built on the shared encoder and per-block K/V side branch.
    pub fn uses_side_branch(self) -> bool {
        matches!(self, ControlScheme::NanoControl | ControlScheme::Additive | ControlScheme::LayerByLayer)
    }

    pub fn is_conditioned(self) -> bool {
        self != ControlScheme::None
    }
}

impl fmt::Display for ControlScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ControlScheme::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = ControlScheme::ALL.iter().map(|c| c.as_str()).collect();
            Error::Config(format!("unknown scheme `{s}` (expected one of {})", names.join(", ")))
        })
    }
}
