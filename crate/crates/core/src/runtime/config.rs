use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::site::Stream;
use crate::runtime::TokenId;

/// Reserved ids at the start of every vocabulary.
pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DecoderOnly,
    EncoderDecoder,
}

/// Shape and seed of a toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Encoder depth; zero for decoder-only models.
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Span-corruption sentinels, encoder-decoder only.
    #[serde(default)]
    pub sentinel_ids: Vec<TokenId>,
    pub seed: u64,
}

impl ModelConfig {
    /// Small decoder-only shape used across tests and examples.
    pub fn toy_decoder(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            arch: Arch::DecoderOnly,
            n_layers_enc: 0,
            n_layers_dec: n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq: 32,
            sentinel_ids: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.n_layers_dec == 0 {
            return fail("decoder needs at least one layer".into());
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return fail("d_ff and max_seq must be positive".into());
        }
        match self.arch {
            Arch::DecoderOnly => {
                if self.n_layers_enc != 0 {
                    return fail("decoder-only model with encoder layers".into());
                }
                if !self.sentinel_ids.is_empty() {
                    return fail("sentinel ids are only valid for encoder-decoder models".into());
                }
            }
            Arch::EncoderDecoder => {
                if self.n_layers_enc == 0 {
                    return fail("encoder-decoder model without encoder layers".into());
                }
                if self.sentinel_ids.is_empty() {
                    return fail("encoder-decoder model needs sentinel ids".into());
                }
            }
        }
        if let Some(bad) = self.sentinel_ids.iter().find(|&&s| s as usize >= self.vocab_size || s < 4) {
            return fail(format!("sentinel id {bad} is reserved or out of range"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_layers(&self, stream: Stream) -> usize {
        match stream {
            Stream::Enc => self.n_layers_enc,
            Stream::Dec => self.n_layers_dec,
        }
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.arch == Arch::EncoderDecoder
    }

    pub fn topology(&self) -> Topology {
        Topology { arch: self.arch, n_layers_enc: self.n_layers_enc, n_layers_dec: self.n_layers_dec }
    }
}

/// Layer layout, which is all that site addressing depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub arch: Arch,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
}

impl Topology {
    pub fn n_layers(&self, stream: Stream) -> usize {
        match stream {
            Stream::Enc => self.n_layers_enc,
            Stream::Dec => self.n_layers_dec,
        }
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.arch == Arch::EncoderDecoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy_decoder(2, 8, 3, 32, 0);
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.validate().unwrap();
    }

    #[test]
    fn sentinels_iff_encoder_decoder() {
        let mut c = ModelConfig::toy_decoder(2, 8, 2, 32, 0);
        c.sentinel_ids = vec![10];
        assert!(c.validate().is_err());
        c.arch = Arch::EncoderDecoder;
        c.n_layers_enc = 2;
        c.validate().unwrap();
        c.sentinel_ids.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn tiny_vocab_rejected() {
        let c = ModelConfig::toy_decoder(1, 8, 2, 3, 0);
        assert!(c.validate().is_err());
    }
}
