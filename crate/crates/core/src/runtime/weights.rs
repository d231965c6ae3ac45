//! Parameter storage and the flat JSON checkpoint format.
//!
//! A checkpoint is a single JSON object:
//!
//! ```text
//! { "format": "recall-lab-weights", "version": 1,
//!   "tensors": [ { "name": "tok_emb", "shape": [V, d], "data": [...] }, ... ] }
//! ```
//!
//! `data` is row-major. Tensor names follow `dec.{l}.attn.wq`,
//! `enc.{l}.mlp.w_in`, `dec.{l}.ln_cross.gain` and so on; see
//! [`Weights::tensors`] for the full list.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::config::ModelConfig;

pub const CHECKPOINT_FORMAT: &str = "recall-lab-weights";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }
}

/// Multi-head attention projections, all `[d_model, d_model]`, applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_cross: Option<LayerNorm>,
    pub cross: Option<Attention>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// All parameters of a toy model. The output head is `tok_emb` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Array2<f64>,
    pub pos_dec: Array2<f64>,
    pub pos_enc: Option<Array2<f64>>,
    pub enc_blocks: Vec<Block>,
    pub dec_blocks: Vec<Block>,
    /// Normalizes the encoder output before it is used as cross-attention memory.
    pub enc_final_ln: Option<LayerNorm>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let normal = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut self.rng))
    }

    fn attention(&mut self, d: usize, out_std: f64) -> Attention {
        let s = 1.0 / (d as f64).sqrt();
        Attention {
            wq: self.matrix(d, d, s),
            wk: self.matrix(d, d, s),
            wv: self.matrix(d, d, s),
            wo: self.matrix(d, d, out_std),
        }
    }

    fn block(&mut self, c: &ModelConfig, cross: bool, out_std: f64) -> Block {
        let d = c.d_model;
        Block {
            ln_attn: LayerNorm::new(d),
            attn: self.attention(d, out_std),
            ln_cross: cross.then(|| LayerNorm::new(d)),
            cross: cross.then(|| self.attention(d, out_std)),
            ln_mlp: LayerNorm::new(d),
            mlp: Mlp {
                w_in: self.matrix(d, c.d_ff, 1.0 / (d as f64).sqrt()),
                b_in: Array1::zeros(c.d_ff),
                w_out: self.matrix(c.d_ff, d, out_std * (d as f64 / c.d_ff as f64).sqrt()),
                b_out: Array1::zeros(d),
            },
        }
    }
}

impl Weights {
    /// Seeded random initialization.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let d = config.d_model;
        let n_total = config.n_layers_enc + config.n_layers_dec;
        let out_std = 1.0 / ((d as f64).sqrt() * (2.0 * n_total as f64).sqrt());
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = init.matrix(config.vocab_size, d, emb_std);
        let pos_dec = init.matrix(config.max_seq, d, 0.5 * emb_std);
        let ed = config.is_encoder_decoder();
        let pos_enc = ed.then(|| init.matrix(config.max_seq, d, 0.5 * emb_std));
        let enc_blocks = (0..config.n_layers_enc)
            .map(|_| init.block(config, false, out_std))
            .collect();
        let dec_blocks = (0..config.n_layers_dec)
            .map(|_| init.block(config, ed, out_std))
            .collect();
        Ok(Self {
            tok_emb,
            pos_dec,
            pos_enc,
            enc_blocks,
            dec_blocks,
            enc_final_ln: ed.then(|| LayerNorm::new(d)),
        })
    }

    /// Zeroed weights with the same layout, used as gradient buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.view().into_dyn())];
        out.push(("pos_dec".into(), self.pos_dec.view().into_dyn()));
        if let Some(p) = &self.pos_enc {
            out.push(("pos_enc".into(), p.view().into_dyn()));
        }
        for (prefix, blocks) in [("enc", &self.enc_blocks), ("dec", &self.dec_blocks)] {
            for (l, b) in blocks.iter().enumerate() {
                let p = format!("{prefix}.{l}");
                push_ln(&mut out, &format!("{p}.ln_attn"), &b.ln_attn);
                push_attn(&mut out, &format!("{p}.attn"), &b.attn);
                if let (Some(ln), Some(a)) = (&b.ln_cross, &b.cross) {
                    push_ln(&mut out, &format!("{p}.ln_cross"), ln);
                    push_attn(&mut out, &format!("{p}.cross"), a);
                }
                push_ln(&mut out, &format!("{p}.ln_mlp"), &b.ln_mlp);
                out.push((format!("{p}.mlp.w_in"), b.mlp.w_in.view().into_dyn()));
                out.push((format!("{p}.mlp.b_in"), b.mlp.b_in.view().into_dyn()));
                out.push((format!("{p}.mlp.w_out"), b.mlp.w_out.view().into_dyn()));
                out.push((format!("{p}.mlp.b_out"), b.mlp.b_out.view().into_dyn()));
            }
        }
        if let Some(ln) = &self.enc_final_ln {
            push_ln(&mut out, "enc_final_ln", ln);
        }
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn())];
        out.push(("pos_dec".into(), self.pos_dec.view_mut().into_dyn()));
        if let Some(p) = &mut self.pos_enc {
            out.push(("pos_enc".into(), p.view_mut().into_dyn()));
        }
        for (prefix, blocks) in [("enc", &mut self.enc_blocks), ("dec", &mut self.dec_blocks)] {
            for (l, b) in blocks.iter_mut().enumerate() {
                let p = format!("{prefix}.{l}");
                push_ln_mut(&mut out, &format!("{p}.ln_attn"), &mut b.ln_attn);
                push_attn_mut(&mut out, &format!("{p}.attn"), &mut b.attn);
                if let (Some(ln), Some(a)) = (&mut b.ln_cross, &mut b.cross) {
                    push_ln_mut(&mut out, &format!("{p}.ln_cross"), ln);
                    push_attn_mut(&mut out, &format!("{p}.cross"), a);
                }
                push_ln_mut(&mut out, &format!("{p}.ln_mlp"), &mut b.ln_mlp);
                out.push((format!("{p}.mlp.w_in"), b.mlp.w_in.view_mut().into_dyn()));
                out.push((format!("{p}.mlp.b_in"), b.mlp.b_in.view_mut().into_dyn()));
                out.push((format!("{p}.mlp.w_out"), b.mlp.w_out.view_mut().into_dyn()));
                out.push((format!("{p}.mlp.b_out"), b.mlp.b_out.view_mut().into_dyn()));
            }
        }
        if let Some(ln) = &mut self.enc_final_ln {
            push_ln_mut(&mut out, "enc_final_ln", ln);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Shape check against a config.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let reference = Weights::init(&ModelConfig { seed: 0, ..config.clone() })?;
        let want: Vec<_> = reference.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<_> = self.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if want != got {
            return Err(Error::Config("weights do not match the model config layout".into()));
        }
        if !self.all_finite() {
            return Err(Error::Config("weights contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds weights for `config` from a checkpoint; names and shapes must match exactly.
    pub fn from_checkpoint(config: &ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut w = Weights::init(&ModelConfig { seed: 0, ..config.clone() })?;
        {
            let mut slots = w.tensors_mut();
            if slots.len() != ckpt.tensors.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} tensors, config expects {}",
                    ckpt.tensors.len(),
                    slots.len()
                )));
            }
            for ((name, slot), t) in slots.iter_mut().zip(&ckpt.tensors) {
                if *name != t.name || slot.shape() != t.shape.as_slice() || slot.len() != t.data.len() {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {} {:?} does not match expected {} {:?}",
                        t.name,
                        t.shape,
                        name,
                        slot.shape()
                    )));
                }
                for (dst, src) in slot.iter_mut().zip(&t.data) {
                    *dst = *src;
                }
            }
        }
        if !w.all_finite() {
            return Err(Error::Config("checkpoint contains non-finite values".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(f)?;
        Self::from_checkpoint(config, &ckpt)
    }
}

fn push_ln<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, p: &str, ln: &'a LayerNorm) {
    out.push((format!("{p}.gain"), ln.gain.view().into_dyn()));
    out.push((format!("{p}.bias"), ln.bias.view().into_dyn()));
}

fn push_attn<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, p: &str, a: &'a Attention) {
    out.push((format!("{p}.wq"), a.wq.view().into_dyn()));
    out.push((format!("{p}.wk"), a.wk.view().into_dyn()));
    out.push((format!("{p}.wv"), a.wv.view().into_dyn()));
    out.push((format!("{p}.wo"), a.wo.view().into_dyn()));
}

fn push_ln_mut<'a>(out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>, p: &str, ln: &'a mut LayerNorm) {
    out.push((format!("{p}.gain"), ln.gain.view_mut().into_dyn()));
    out.push((format!("{p}.bias"), ln.bias.view_mut().into_dyn()));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>, p: &str, a: &'a mut Attention) {
    out.push((format!("{p}.wq"), a.wq.view_mut().into_dyn()));
    out.push((format!("{p}.wk"), a.wk.view_mut().into_dyn()));
    out.push((format!("{p}.wv"), a.wv.view_mut().into_dyn()));
    out.push((format!("{p}.wo"), a.wo.view_mut().into_dyn()));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}
