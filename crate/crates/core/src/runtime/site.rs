//! Addressing of hookable activations.
//!
//! Layer numbering follows the residual recursion `h^{l+1} = h^l + s^l (+ c^l) + f^l`:
//! `state_h` at layer `l` is the residual entering block `l`, so it exists for
//! `l in 0..=L` and layer `L` is the final residual fed to the output head.
//! Sublayer outputs (`self_attn_s`, `cross_attn_c`, `mlp_f`) exist for `l in 0..L`
//! and are taken before they are added to the residual. `embed` is the token
//! embedding row before positions are added and lives at layer 0 only.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::config::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Enc,
    Dec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    StateH,
    SelfAttnS,
    CrossAttnC,
    MlpF,
    Embed,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::StateH => "state_h",
            SiteKind::SelfAttnS => "self_attn_s",
            SiteKind::CrossAttnC => "cross_attn_c",
            SiteKind::MlpF => "mlp_f",
            SiteKind::Embed => "embed",
        }
    }

    pub fn is_sublayer(self) -> bool {
        matches!(self, SiteKind::SelfAttnS | SiteKind::CrossAttnC | SiteKind::MlpF)
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "state_h" => SiteKind::StateH,
            "self_attn_s" => SiteKind::SelfAttnS,
            "cross_attn_c" => SiteKind::CrossAttnC,
            "mlp_f" => SiteKind::MlpF,
            "embed" => SiteKind::Embed,
            other => {
                return Err(Error::Addressing {
                    site: other.to_string(),
                    reason: "unknown site kind".into(),
                })
            }
        })
    }
}

/// One addressable activation vector. Negative tokens count from the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub stream: Stream,
    pub layer: usize,
    pub kind: SiteKind,
    pub token: i64,
}

impl HookSite {
    pub fn new(stream: Stream, layer: usize, kind: SiteKind, token: i64) -> Self {
        Self { stream, layer, kind, token }
    }

    pub fn dec(layer: usize, kind: SiteKind, token: i64) -> Self {
        Self::new(Stream::Dec, layer, kind, token)
    }

    pub fn enc(layer: usize, kind: SiteKind, token: i64) -> Self {
        Self::new(Stream::Enc, layer, kind, token)
    }

    /// Structural checks that need only the model shape.
    pub fn check(&self, config: &Topology) -> std::result::Result<(), String> {
        let n_layers = config.n_layers(self.stream);
        if self.stream == Stream::Enc && !config.is_encoder_decoder() {
            return Err("encoder stream on a decoder-only model".into());
        }
        match self.kind {
            SiteKind::StateH if self.layer > n_layers => {
                Err(format!("state layer {} > {n_layers}", self.layer))
            }
            SiteKind::Embed if self.layer != 0 => Err("embed sites live at layer 0".into()),
            SiteKind::CrossAttnC if self.stream != Stream::Dec || !config.is_encoder_decoder() => {
                Err("cross-attention exists only in the decoder of encoder-decoder models".into())
            }
            k if k.is_sublayer() && self.layer >= n_layers => {
                Err(format!("sublayer layer {} >= {n_layers}", self.layer))
            }
            _ => Ok(()),
        }
    }

    /// Absolute token index in a sequence of `len` tokens.
    pub fn resolve_token(&self, len: usize) -> std::result::Result<usize, String> {
        resolve_index(self.token, len)
    }

    /// Same site with the token made absolute.
    pub fn absolute(&self, len: usize) -> std::result::Result<HookSite, String> {
        let t = self.resolve_token(len)?;
        Ok(HookSite { token: t as i64, ..*self })
    }
}

pub(crate) fn resolve_index(token: i64, len: usize) -> std::result::Result<usize, String> {
    let t = if token < 0 { len as i64 + token } else { token };
    if t < 0 || t >= len as i64 {
        Err(format!("token {token} outside sequence of length {len}"))
    } else {
        Ok(t as usize)
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stream {
            Stream::Enc => "enc",
            Stream::Dec => "dec",
        };
        write!(f, "{s}.{}.{}[{}]", self.layer, self.kind, self.token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttn,
    CrossAttn,
}

/// How blocked attention edges are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutMode {
    /// Pre-softmax logit set to `-inf`; the remaining mass renormalizes.
    #[default]
    NegInf,
    /// Post-softmax weight set to zero with no renormalization.
    ZeroNoRenorm,
}

/// Blocks attention from one query token to a set of key tokens over a set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub stream: Stream,
    pub attention: AttentionKind,
    pub layers: Vec<usize>,
    pub query: i64,
    pub keys: Vec<i64>,
    #[serde(default)]
    pub mode: KnockoutMode,
}

impl AttnBlock {
    pub fn check(&self, config: &Topology) -> std::result::Result<(), String> {
        if self.layers.is_empty() {
            return Err("attn_block with no layers".into());
        }
        if self.keys.is_empty() {
            return Err("attn_block with no key tokens".into());
        }
        if self.stream == Stream::Enc && !config.is_encoder_decoder() {
            return Err("encoder attention on a decoder-only model".into());
        }
        if self.attention == AttentionKind::CrossAttn
            && (self.stream != Stream::Dec || !config.is_encoder_decoder())
        {
            return Err("cross-attention block outside an encoder-decoder decoder".into());
        }
        let n = config.n_layers(self.stream);
        if let Some(l) = self.layers.iter().find(|&&l| l >= n) {
            return Err(format!("attn_block layer {l} >= {n}"));
        }
        Ok(())
    }
}

/// A captured activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    /// Site with its token index made absolute.
    pub site: HookSite,
    pub vector: Vec<f64>,
}
