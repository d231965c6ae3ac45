use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::intervention::ActionKind;
use crate::error::{Error, Result};
use crate::runtime::{Arch, HookSite, Hooks, Inputs, KnockoutMode, Model, RunOutput, SiteKind, TokenId, Topology, BOS, EOS};

/// What a backend can execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub arch: Arch,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub sentinel_ids: Vec<TokenId>,
    pub actions: Vec<ActionKind>,
    pub knockout_modes: Vec<KnockoutMode>,
}

impl Capabilities {
    pub fn topology(&self) -> Topology {
        Topology { arch: self.arch, n_layers_enc: self.n_layers_enc, n_layers_dec: self.n_layers_dec }
    }

    pub fn supports(&self, action: ActionKind) -> bool {
        self.actions.contains(&action)
    }
}

/// An engine that runs one forward pass with resolved hooks.
///
/// `restore_from` never reaches a backend: the engine swaps it for a
/// replacement carrying the stored vector.
pub trait Backend: Send + Sync {
    fn capabilities(&self) -> &Capabilities;

    fn execute(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput>;

    /// Scores over the vocabulary with the same argmax as the output head applied to `v`.
    ///
    /// The default writes `v` into the final decoder state of a one-token run and
    /// returns the resulting distribution; it assumes no normalization sits
    /// between the final residual and the unembedding.
    fn vocab_scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        let caps = self.capabilities();
        let inputs = match caps.arch {
            Arch::DecoderOnly => Inputs::decoder(vec![BOS]),
            Arch::EncoderDecoder => Inputs::encoder_decoder(vec![EOS], vec![BOS]),
        };
        let site = HookSite::dec(caps.n_layers_dec, SiteKind::StateH, -1);
        let hooks = Hooks { replacements: vec![(site, v.to_vec())], ..Hooks::default() };
        Ok(self.execute(&inputs, &hooks)?.distribution)
    }

    /// Greedy continuation; stops after `<eos>`, `max_new` tokens, or at `max_seq`.
    fn greedy_decode(&self, inputs: &Inputs, max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(Error::Input("max_new must be at least 1".into()));
        }
        let max_seq = self.capabilities().max_seq;
        let mut cur = inputs.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if cur.dec.len() >= max_seq {
                break;
            }
            let next = self.execute(&cur, &Hooks::default())?.predicted_token;
            out.push(next);
            if next == EOS {
                break;
            }
            cur.dec.push(next);
        }
        Ok(out)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn capabilities(&self) -> &Capabilities {
        (**self).capabilities()
    }

    fn execute(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput> {
        (**self).execute(inputs, hooks)
    }

    fn vocab_scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).vocab_scores(v)
    }

    fn greedy_decode(&self, inputs: &Inputs, max_new: usize) -> Result<Vec<TokenId>> {
        (**self).greedy_decode(inputs, max_new)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn capabilities(&self) -> &Capabilities {
        (**self).capabilities()
    }

    fn execute(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput> {
        (**self).execute(inputs, hooks)
    }

    fn vocab_scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).vocab_scores(v)
    }

    fn greedy_decode(&self, inputs: &Inputs, max_new: usize) -> Result<Vec<TokenId>> {
        (**self).greedy_decode(inputs, max_new)
    }
}

/// The in-process runtime. Supports every action and both knockout modes.
#[derive(Debug, Clone)]
pub struct NativeBackend {
    model: Arc<Model>,
    caps: Capabilities,
}

impl NativeBackend {
    pub fn new(model: Arc<Model>) -> Self {
        let c = &model.config;
        let caps = Capabilities {
            arch: c.arch,
            n_layers_enc: c.n_layers_enc,
            n_layers_dec: c.n_layers_dec,
            d_model: c.d_model,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
            sentinel_ids: c.sentinel_ids.clone(),
            actions: vec![ActionKind::Capture, ActionKind::Replace, ActionKind::RestoreFrom, ActionKind::AttnBlock],
            knockout_modes: vec![KnockoutMode::NegInf, KnockoutMode::ZeroNoRenorm],
        };
        Self { model, caps }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }
}

impl From<Model> for NativeBackend {
    fn from(m: Model) -> Self {
        NativeBackend::new(Arc::new(m))
    }
}

impl Backend for NativeBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn execute(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput> {
        self.model.forward(inputs, hooks)
    }

    /// Logits `E v`.
    fn vocab_scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.caps.d_model {
            return Err(Error::Input(format!("vector of length {} for d_model {}", v.len(), self.caps.d_model)));
        }
        Ok(self.model.project(v))
    }

    fn greedy_decode(&self, inputs: &Inputs, max_new: usize) -> Result<Vec<TokenId>> {
        self.model.greedy_decode(inputs, max_new)
    }
}
