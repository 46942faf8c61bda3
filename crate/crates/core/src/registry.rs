//! The named model registry: every method is an (EEG encoder, loss) pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    TSConv,
    TSConvSA,
    TSConvGA,
    STConv,
    STConvGA,
    NervFormer,
    NervFormerGA,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::TSConv => "TSConv",
            EncoderKind::TSConvSA => "TSConv-SA",
            EncoderKind::TSConvGA => "TSConv-GA",
            EncoderKind::STConv => "STConv",
            EncoderKind::STConvGA => "STConv-GA",
            EncoderKind::NervFormer => "NervFormer",
            EncoderKind::NervFormerGA => "NervFormer-GA",
        }
    }

    pub fn uses_graph_attention(self) -> bool {
        matches!(
            self,
            EncoderKind::TSConvGA | EncoderKind::STConvGA | EncoderKind::NervFormerGA
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "sk_infonce")]
    SkInfoNce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "InfoNCE",
            LossKind::SkInfoNce => "SK-InfoNCE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelRegistryEntry {
    pub name: &'static str,
    pub eeg_encoder: EncoderKind,
    pub loss: LossKind,
}

/// The full method zoo: the eight MUSE-family methods plus the three
/// NICE-family baselines.
pub const MODEL_REGISTRY: [ModelRegistryEntry; 11] = [
    ModelRegistryEntry { name: "NICE", eeg_encoder: EncoderKind::TSConv, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "NICE-SA", eeg_encoder: EncoderKind::TSConvSA, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "NICE-GA", eeg_encoder: EncoderKind::TSConvGA, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "MUSE", eeg_encoder: EncoderKind::STConv, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "MUSE-GA", eeg_encoder: EncoderKind::STConvGA, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "MUSE-Nerv", eeg_encoder: EncoderKind::NervFormer, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "MUSE-Nerv-GA", eeg_encoder: EncoderKind::NervFormerGA, loss: LossKind::InfoNce },
    ModelRegistryEntry { name: "MUSE-SK", eeg_encoder: EncoderKind::STConv, loss: LossKind::SkInfoNce },
    ModelRegistryEntry { name: "MUSE-SK-GA", eeg_encoder: EncoderKind::STConvGA, loss: LossKind::SkInfoNce },
    ModelRegistryEntry { name: "MUSE-SK-Nerv", eeg_encoder: EncoderKind::NervFormer, loss: LossKind::SkInfoNce },
    ModelRegistryEntry { name: "MUSE-SK-Nerv-GA", eeg_encoder: EncoderKind::NervFormerGA, loss: LossKind::SkInfoNce },
];

/// Look up a method by its registry name.
pub fn resolve_model(name: &str) -> Result<ModelRegistryEntry> {
    MODEL_REGISTRY
        .iter()
        .find(|e| e.name == name)
        .copied()
        .ok_or_else(|| Error::UnknownModel {
            name: name.to_string(),
            valid: MODEL_REGISTRY
                .iter()
                .map(|e| e.name)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

pub fn registry_names() -> Vec<&'static str> {
    MODEL_REGISTRY.iter().map(|e| e.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rows_match_published_pairs() {
        let expect = [
            ("NICE", EncoderKind::TSConv, LossKind::InfoNce),
            ("NICE-SA", EncoderKind::TSConvSA, LossKind::InfoNce),
            ("NICE-GA", EncoderKind::TSConvGA, LossKind::InfoNce),
            ("MUSE", EncoderKind::STConv, LossKind::InfoNce),
            ("MUSE-GA", EncoderKind::STConvGA, LossKind::InfoNce),
            ("MUSE-Nerv", EncoderKind::NervFormer, LossKind::InfoNce),
            ("MUSE-Nerv-GA", EncoderKind::NervFormerGA, LossKind::InfoNce),
            ("MUSE-SK", EncoderKind::STConv, LossKind::SkInfoNce),
            ("MUSE-SK-GA", EncoderKind::STConvGA, LossKind::SkInfoNce),
            ("MUSE-SK-Nerv", EncoderKind::NervFormer, LossKind::SkInfoNce),
            ("MUSE-SK-Nerv-GA", EncoderKind::NervFormerGA, LossKind::SkInfoNce),
        ];
        assert_eq!(MODEL_REGISTRY.len(), expect.len());
        for (name, enc, loss) in expect {
            let e = resolve_model(name).unwrap();
            assert_eq!(e.eeg_encoder, enc, "{name}");
            assert_eq!(e.loss, loss, "{name}");
        }
    }

    #[test]
    fn unknown_name_lists_valid_keys() {
        let err = resolve_model("bogus").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"));
        assert!(msg.contains("MUSE-SK"));
        assert!(msg.contains("NICE-GA"));
    }
}
