//! Extraction events: a sublayer output at the last token already names the answer.
//!
//! An event at `(layer, kind)` means `argmax(E x) = o*`, where `x` is the
//! sublayer output and `o* = argmax(E h^L)` is the model's prediction.
//! Ties (including the all-zero vector) never count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Backend;
use crate::error::{Error, Result};
use crate::harvest::MemorizedExample;
use crate::runtime::ops::{argmax, unique_argmax};
use crate::runtime::{Arch, HookSite, Hooks, SiteKind, TokenId};

/// Sublayer kinds probed for an architecture, in residual order.
pub fn extraction_kinds(arch: Arch) -> Vec<SiteKind> {
    match arch {
        Arch::DecoderOnly => vec![SiteKind::SelfAttnS, SiteKind::MlpF],
        Arch::EncoderDecoder => vec![SiteKind::SelfAttnS, SiteKind::CrossAttnC, SiteKind::MlpF],
    }
}

/// The attention whose event may precede an MLP event in the same layer.
pub fn preceding_attention(arch: Arch) -> SiteKind {
    match arch {
        Arch::DecoderOnly => SiteKind::SelfAttnS,
        Arch::EncoderDecoder => SiteKind::CrossAttnC,
    }
}

/// True iff `scores` has a unique maximum at `target`.
pub fn is_event(scores: &[f64], target: TokenId) -> bool {
    unique_argmax(scores) == Some(target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleEvents {
    pub example_id: String,
    pub o_star: TokenId,
    /// `(layer, kind, event)` for every probed site.
    pub events: Vec<(usize, SiteKind, bool)>,
    /// Whether the final state itself projects to `o*`; true by definition unless tied.
    pub final_state_event: bool,
}

impl ExampleEvents {
    pub fn has(&self, layer: usize, kind: SiteKind) -> bool {
        self.events.iter().any(|&(l, k, e)| l == layer && k == kind && e)
    }
}

/// Captures every probed sublayer at the last token in one pass and projects each.
pub fn extraction_events(backend: &dyn Backend, ex: &MemorizedExample) -> Result<ExampleEvents> {
    let caps = backend.capabilities();
    let kinds = extraction_kinds(caps.arch);
    let n_layers = caps.n_layers_dec;
    let final_site = HookSite::dec(n_layers, SiteKind::StateH, -1);
    let mut sites = vec![final_site];
    for l in 0..n_layers {
        for &k in &kinds {
            sites.push(HookSite::dec(l, k, -1));
        }
    }
    let out = backend.execute(&ex.inputs(), &Hooks::capture(sites.clone()))?;
    let vector = |s: &HookSite| -> Result<&[f64]> {
        let abs = s.absolute(ex.dec_ids.len()).map_err(Error::Input)?;
        out.capture(&abs).ok_or_else(|| Error::Input(format!("backend did not return {abs}")))
    };
    let final_scores = backend.vocab_scores(vector(&final_site)?)?;
    let o_star = argmax(&final_scores);
    let mut events = Vec::with_capacity(sites.len() - 1);
    for s in &sites[1..] {
        let scores = backend.vocab_scores(vector(s)?)?;
        events.push((s.layer, s.kind, is_event(&scores, o_star)));
    }
    Ok(ExampleEvents { example_id: ex.id.clone(), o_star, events, final_state_event: is_event(&final_scores, o_star) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRow {
    pub layer: usize,
    pub kind: SiteKind,
    pub rate: f64,
    pub n_events: usize,
    /// MLP rows only: events where the preceding attention of the same layer also fired.
    pub mlp_with_attn: usize,
    pub mlp_without_attn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionProfile {
    pub n_examples: usize,
    pub rows: Vec<ExtractionRow>,
    pub final_state_rate: f64,
    pub per_example: Vec<ExampleEvents>,
}

impl ExtractionProfile {
    pub fn row(&self, layer: usize, kind: SiteKind) -> Option<&ExtractionRow> {
        self.rows.iter().find(|r| r.layer == layer && r.kind == kind)
    }
}

/// Aggregates stored events into per-layer rates and the MLP breakdown.
pub fn profile_from_events(arch: Arch, n_layers: usize, per_example: Vec<ExampleEvents>) -> ExtractionProfile {
    let n = per_example.len();
    let attn = preceding_attention(arch);
    let mut rows = Vec::new();
    for l in 0..n_layers {
        for k in extraction_kinds(arch) {
            let fired: Vec<&ExampleEvents> = per_example.iter().filter(|e| e.has(l, k)).collect();
            let (with, without) = if k == SiteKind::MlpF {
                let with = fired.iter().filter(|e| e.has(l, attn)).count();
                (with, fired.len() - with)
            } else {
                (0, 0)
            };
            rows.push(ExtractionRow {
                layer: l,
                kind: k,
                rate: if n == 0 { 0.0 } else { fired.len() as f64 / n as f64 },
                n_events: fired.len(),
                mlp_with_attn: with,
                mlp_without_attn: without,
            });
        }
    }
    let finals = per_example.iter().filter(|e| e.final_state_event).count();
    ExtractionProfile {
        n_examples: n,
        rows,
        final_state_rate: if n == 0 { 0.0 } else { finals as f64 / n as f64 },
        per_example,
    }
}

pub fn extraction_profile(backend: &dyn Backend, examples: &[MemorizedExample]) -> Result<ExtractionProfile> {
    if examples.is_empty() {
        return Err(Error::Input("extraction profile needs at least one example".into()));
    }
    let caps = backend.capabilities();
    let per_example = examples
        .par_iter()
        .map(|ex| extraction_events(backend, ex))
        .collect::<Result<Vec<_>>>()?;
    Ok(profile_from_events(caps.arch, caps.n_layers_dec, per_example))
}
