//! Declarative interventions.
//!
//! A plan is a JSON array of interventions. Vectors are little-endian `f32`
//! arrays encoded as base64, the same encoding used on the bridge wire:
//!
//! ```json
//! [
//!   {"action": "capture", "site": {"stream": "dec", "layer": 2, "kind": "state_h", "token": -1}},
//!   {"action": "replace", "site": {...}, "vector": "AACAPwAAAEA="},
//!   {"action": "restore_from", "site": {...}, "run_id": 7},
//!   {"action": "attn_block", "stream": "dec", "attention": "self_attn",
//!    "layers": [0, 1], "query": -1, "keys": [1, 2], "mode": "neg_inf"}
//! ]
//! ```

use serde::{Deserialize, Serialize};

use crate::runtime::{AttnBlock, HookSite};

/// Key of an immutable stored reference run.
pub type RunId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Intervention {
    Capture {
        site: HookSite,
    },
    Replace {
        site: HookSite,
        #[serde(with = "f32_base64")]
        vector: Vec<f64>,
    },
    RestoreFrom {
        site: HookSite,
        run_id: RunId,
    },
    AttnBlock(AttnBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Capture,
    Replace,
    RestoreFrom,
    AttnBlock,
}

impl Intervention {
    pub fn action(&self) -> ActionKind {
        match self {
            Intervention::Capture { .. } => ActionKind::Capture,
            Intervention::Replace { .. } => ActionKind::Replace,
            Intervention::RestoreFrom { .. } => ActionKind::RestoreFrom,
            Intervention::AttnBlock(_) => ActionKind::AttnBlock,
        }
    }

    pub fn site(&self) -> Option<&HookSite> {
        match self {
            Intervention::Capture { site }
            | Intervention::Replace { site, .. }
            | Intervention::RestoreFrom { site, .. } => Some(site),
            Intervention::AttnBlock(_) => None,
        }
    }

    pub fn capture(site: HookSite) -> Self {
        Intervention::Capture { site }
    }

    pub fn replace(site: HookSite, vector: Vec<f64>) -> Self {
        Intervention::Replace { site, vector }
    }

    pub fn restore(site: HookSite, run_id: RunId) -> Self {
        Intervention::RestoreFrom { site, run_id }
    }
}

pub type Plan = Vec<Intervention>;

/// Vectors as base64 of little-endian `f32` values.
pub mod f32_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(v: &[f64]) -> String {
        let mut bytes = Vec::with_capacity(v.len() * 4);
        for &x in v {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
        if bytes.len() % 4 != 0 {
            return Err(format!("vector payload of {} bytes is not a multiple of 4", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{AttentionKind, KnockoutMode, SiteKind, Stream};

    #[test]
    fn json_shape() {
        let plan = vec![
            Intervention::capture(HookSite::dec(2, SiteKind::StateH, -1)),
            Intervention::replace(HookSite::dec(0, SiteKind::MlpF, 1), vec![1.0, 2.0]),
            Intervention::restore(HookSite::enc(1, SiteKind::StateH, 0), 7),
            Intervention::AttnBlock(AttnBlock {
                stream: Stream::Dec,
                attention: AttentionKind::CrossAttn,
                layers: vec![0],
                query: -1,
                keys: vec![2],
                mode: KnockoutMode::NegInf,
            }),
        ];
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(json[0]["action"], "capture");
        assert_eq!(json[1]["vector"], "AACAPwAAAEA=");
        assert_eq!(json[2]["run_id"], 7);
        assert_eq!(json[3]["attention"], "cross_attn");
        let back: Plan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn bad_payload_rejected() {
        assert!(f32_base64::decode("AAA=").is_err());
        assert!(f32_base64::decode("%%").is_err());
    }
}
