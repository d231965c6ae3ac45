//! Last-token activation patching between two memorized examples.
//!
//! The patch example's last-token residual at layer `l` overwrites the context
//! example's at the same layer; the context run then continues. Each layer's
//! prediction is classified against the candidate objects of the pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::engine::{Backend, Engine, Intervention};
use crate::error::{Error, Result};
use crate::harvest::MemorizedExample;
use crate::report::relative_difference;
use crate::runtime::{HookSite, SiteKind, TokenId, Vocab};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Same language, different relation, different subject.
    SameLangDiffRelDiffSubj,
    /// Different language, same relation, different subject.
    DiffLangSameRelDiffSubj,
    /// Different language, different relation, same subject.
    DiffLangDiffRelSameSubj,
}

impl Condition {
    pub fn number(self) -> u8 {
        match self {
            Condition::SameLangDiffRelDiffSubj => 1,
            Condition::DiffLangSameRelDiffSubj => 2,
            Condition::DiffLangDiffRelSameSubj => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Condition::SameLangDiffRelDiffSubj),
            2 => Ok(Condition::DiffLangSameRelDiffSubj),
            3 => Ok(Condition::DiffLangDiffRelSameSubj),
            _ => Err(Error::Input(format!("condition must be 1, 2 or 3, got {n}"))),
        }
    }

    /// Whether a (patch, context) pair meets the condition on ids.
    pub fn admits(self, p: &MemorizedExample, c: &MemorizedExample) -> bool {
        let same_lang = p.language == c.language;
        let same_rel = p.relation_id == c.relation_id;
        let same_subj = p.subject_id == c.subject_id;
        p.object_id != c.object_id
            && match self {
                Condition::SameLangDiffRelDiffSubj => same_lang && !same_rel && !same_subj,
                Condition::DiffLangSameRelDiffSubj => !same_lang && same_rel && !same_subj,
                Condition::DiffLangDiffRelSameSubj => !same_lang && !same_rel && same_subj,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// Context object in the context language.
    ContextObj,
    /// Patch object in the patch language.
    PatchObj,
    /// Context object in the patch language.
    PatchLangCtxObj,
    /// Patch object in the context language.
    CtxLangPatchObj,
    /// Object of (patch relation, context subject).
    CrossRpSc,
    /// Object of (context relation, patch subject).
    CrossRcSp,
    Other,
}

impl Label {
    pub const ALL: [Label; 7] = [
        Label::ContextObj,
        Label::PatchObj,
        Label::PatchLangCtxObj,
        Label::CtxLangPatchObj,
        Label::CrossRpSc,
        Label::CrossRcSp,
        Label::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::ContextObj => "context_obj",
            Label::PatchObj => "patch_obj",
            Label::PatchLangCtxObj => "patch_lang_ctx_obj",
            Label::CtxLangPatchObj => "ctx_lang_patch_obj",
            Label::CrossRpSc => "cross_rp_sc",
            Label::CrossRcSp => "cross_rc_sp",
            Label::Other => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown label {s:?}")))
    }
}

/// First-token set of one classification target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub label: Label,
    pub first_tokens: BTreeSet<TokenId>,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub id: String,
    pub condition: Condition,
    pub patch: MemorizedExample,
    pub context: MemorizedExample,
    pub channels: Vec<Channel>,
}

impl PatchPair {
    pub fn channel(&self, label: Label) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn enabled(&self, label: Label) -> bool {
        self.channel(label).is_some_and(|c| c.enabled)
    }
}

/// The unique enabled channel containing `token`, else `Other`.
pub fn classify_prediction(token: TokenId, channels: &[Channel]) -> Label {
    let mut hits = channels.iter().filter(|c| c.enabled && c.first_tokens.contains(&token));
    match (hits.next(), hits.next()) {
        (Some(c), None) => c.label,
        _ => Label::Other,
    }
}

/// First tokens of an object's aliases in a language; `None` when the object has no alias there.
pub fn first_tokens(corpus: &Corpus, vocab: &Vocab, object_id: &str, lang: &str) -> Option<BTreeSet<TokenId>> {
    let aliases = corpus.aliases.get(lang)?.get(object_id)?;
    Some(aliases.iter().filter_map(|a| vocab.tokenize(a).first().copied()).collect())
}

fn object_of(corpus: &Corpus, relation_id: &str, subject_id: &str) -> Option<String> {
    corpus
        .triplets
        .iter()
        .find(|t| t.relation_id == relation_id && t.subject_id == subject_id)
        .map(|t| t.object_id.clone())
}

/// Candidate channels for a pair, or `None` when a required alias set is missing.
pub fn pair_channels(
    corpus: &Corpus,
    vocab: &Vocab,
    condition: Condition,
    p: &MemorizedExample,
    c: &MemorizedExample,
    memorized: &dyn Fn(&str, &str, &str) -> bool,
) -> Option<Vec<Channel>> {
    let (lp, lc) = (p.language.as_str(), c.language.as_str());
    let ctx = first_tokens(corpus, vocab, &c.object_id, lc)?;
    let pat = first_tokens(corpus, vocab, &p.object_id, lp)?;
    let ch = |label, first_tokens, enabled| Channel { label, first_tokens, enabled };
    let mut out = vec![ch(Label::ContextObj, ctx.clone(), true), ch(Label::PatchObj, pat.clone(), true)];
    match condition {
        Condition::SameLangDiffRelDiffSubj => {
            for (label, rel, subj) in [
                (Label::CrossRpSc, &p.relation_id, &c.subject_id),
                (Label::CrossRcSp, &c.relation_id, &p.subject_id),
            ] {
                if !memorized(rel, subj, lp) {
                    return None;
                }
                let obj = object_of(corpus, rel, subj)?;
                let set = first_tokens(corpus, vocab, &obj, lp)?;
                let enabled = set.is_disjoint(&ctx) && set.is_disjoint(&pat);
                out.push(ch(label, set, enabled));
            }
        }
        _ => {
            let p_of_c = first_tokens(corpus, vocab, &c.object_id, lp)?;
            let c_of_p = first_tokens(corpus, vocab, &p.object_id, lc)?;
            let e1 = p_of_c.is_disjoint(&ctx);
            let e2 = c_of_p.is_disjoint(&pat);
            out.push(ch(Label::PatchLangCtxObj, p_of_c, e1));
            out.push(ch(Label::CtxLangPatchObj, c_of_p, e2));
        }
    }
    Some(out)
}

/// Every (patch, context) pair meeting `condition`. Condition 1 uses `patch_lang` for both
/// sides and requires both cross combinations to be memorized too.
pub fn build_pairs(
    corpus: &Corpus,
    vocab: &Vocab,
    harvests: &BTreeMap<String, Vec<MemorizedExample>>,
    condition: Condition,
    patch_lang: &str,
    context_lang: &str,
) -> Vec<PatchPair> {
    let context_lang = if condition == Condition::SameLangDiffRelDiffSubj { patch_lang } else { context_lang };
    let empty = Vec::new();
    let patches = harvests.get(patch_lang).unwrap_or(&empty);
    let contexts = harvests.get(context_lang).unwrap_or(&empty);
    let index: HashMap<(&str, &str, &str), ()> = harvests
        .values()
        .flatten()
        .map(|e| ((e.relation_id.as_str(), e.subject_id.as_str(), e.language.as_str()), ()))
        .collect();
    let memorized = |r: &str, s: &str, l: &str| index.contains_key(&(r, s, l));
    let mut out = Vec::new();
    for p in patches {
        for c in contexts {
            if !condition.admits(p, c) {
                continue;
            }
            if let Some(channels) = pair_channels(corpus, vocab, condition, p, c, &memorized) {
                out.push(PatchPair {
                    id: format!("{}|{}", p.id, c.id),
                    condition,
                    patch: p.clone(),
                    context: c.clone(),
                    channels,
                });
            }
        }
    }
    out
}

/// Seeded subsample of at most `max` pairs, kept in original order.
pub fn sample_pairs(pairs: Vec<PatchPair>, max: usize, seed_value: u64) -> Vec<PatchPair> {
    if pairs.len() <= max {
        return pairs;
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut seed::rng(seed_value, &["pairs"]));
    let keep: BTreeSet<usize> = idx.into_iter().take(max).collect();
    pairs.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, p)| p).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub predicted: TokenId,
    pub label: Label,
    /// Probability of each channel's target (sum over its first tokens).
    pub probs: Vec<(Label, f64)>,
    /// Context object, relative to the unpatched context run.
    pub rel_ctx: Option<f64>,
    /// Patch object, relative to the patch run itself.
    pub rel_patch: Option<f64>,
}

impl LayerOutcome {
    pub fn prob(&self, label: Label) -> Option<f64> {
        self.probs.iter().find(|(l, _)| *l == label).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub pair_id: String,
    pub condition: Condition,
    pub patch_language: String,
    pub context_language: String,
    pub unpatched_predicted: TokenId,
    pub layers: Vec<LayerOutcome>,
    /// Layers whose run failed, with the reason.
    pub missing: Vec<(usize, String)>,
    /// Labels whose channel is enabled for this pair.
    pub enabled: Vec<Label>,
}

/// Summed probability of a channel's first tokens.
pub fn channel_prob(dist: &[f64], ch: &Channel) -> f64 {
    ch.first_tokens.iter().map(|&t| dist.get(t as usize).copied().unwrap_or(0.0)).sum()
}

/// Patches every layer `0..=L` of the context's last token with the patch example's.
pub fn patch_sweep<B: Backend>(engine: &Engine<B>, pair: &PatchPair) -> Result<PatchOutcome> {
    let n_layers = engine.capabilities().n_layers_dec;
    let sites: Vec<HookSite> = (0..=n_layers).map(|l| HookSite::dec(l, SiteKind::StateH, -1)).collect();
    let capture: Vec<Intervention> = sites.iter().map(|s| Intervention::capture(*s)).collect();
    let (patch_id, patch_run) = engine.run_and_store(&pair.patch.inputs(), &capture)?;
    let result = (|| {
        let ctx_inputs = pair.context.inputs();
        let unpatched = engine.run_with_plan(&ctx_inputs, &[])?;
        let ctx_ch = pair.channel(Label::ContextObj).expect("context channel");
        let pat_ch = pair.channel(Label::PatchObj).expect("patch channel");
        let p_ctx_before = channel_prob(&unpatched.distribution, ctx_ch);
        let p_pat_before = channel_prob(&patch_run.output.distribution, pat_ch);
        let mut layers = Vec::new();
        let mut missing = Vec::new();
        for (l, site) in sites.iter().enumerate() {
            match engine.run_with_plan(&ctx_inputs, &[Intervention::restore(*site, patch_id)]) {
                Ok(run) => {
                    let probs: Vec<(Label, f64)> =
                        pair.channels.iter().map(|c| (c.label, channel_prob(&run.distribution, c))).collect();
                    let p_ctx = channel_prob(&run.distribution, ctx_ch);
                    let p_pat = channel_prob(&run.distribution, pat_ch);
                    layers.push(LayerOutcome {
                        layer: l,
                        predicted: run.predicted_token,
                        label: classify_prediction(run.predicted_token, &pair.channels),
                        probs,
                        rel_ctx: relative_difference(p_ctx, p_ctx_before).ok(),
                        rel_patch: relative_difference(p_pat, p_pat_before).ok(),
                    });
                }
                Err(e) => missing.push((l, e.to_string())),
            }
        }
        Ok(PatchOutcome {
            pair_id: pair.id.clone(),
            condition: pair.condition,
            patch_language: pair.patch.language.clone(),
            context_language: pair.context.language.clone(),
            unpatched_predicted: unpatched.predicted_token,
            layers,
            missing,
            enabled: pair.channels.iter().filter(|c| c.enabled).map(|c| c.label).collect(),
        })
    })();
    engine.release(patch_id);
    result
}

pub fn patch_all<B: Backend>(engine: &Engine<B>, pairs: &[PatchPair]) -> Result<Vec<PatchOutcome>> {
    pairs.par_iter().map(|p| patch_sweep(engine, p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub layer: usize,
    pub mean_rel_ctx: f64,
    pub mean_rel_patch: f64,
    pub n: usize,
    /// Count of each label's predictions at this layer, in [`Label::ALL`] order.
    pub histogram: Vec<(Label, usize)>,
}

impl LayerAggregate {
    pub fn count(&self, label: Label) -> usize {
        self.histogram.iter().find(|(l, _)| *l == label).map_or(0, |(_, n)| *n)
    }

    /// The strictly most frequent label, if there is one.
    pub fn modal(&self) -> Option<Label> {
        let max = self.histogram.iter().map(|(_, n)| *n).max()?;
        let mut top = self.histogram.iter().filter(|(_, n)| *n == max && max > 0);
        match (top.next(), top.next()) {
            (Some((l, _)), None) => Some(*l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionRow {
    pub label: Label,
    /// Pairs predicting the label at some layer.
    pub count: usize,
    /// Pairs whose channel for the label is enabled.
    pub enabled: usize,
    pub proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub n_pairs: usize,
    pub layers: Vec<LayerAggregate>,
    pub proportions: Vec<ProportionRow>,
}

impl ConditionReport {
    /// Whether `CrossRpSc` is modal at some layer strictly before the first layer where `PatchObj` is modal.
    pub fn cross_before_patch(&self) -> bool {
        let modal: Vec<Option<Label>> = self.layers.iter().map(LayerAggregate::modal).collect();
        let Some(first_patch) = modal.iter().position(|m| *m == Some(Label::PatchObj)) else {
            return false;
        };
        modal[..first_patch].contains(&Some(Label::CrossRpSc))
    }
}

pub fn condition_report(outcomes: &[PatchOutcome]) -> ConditionReport {
    let n_layers = outcomes.iter().flat_map(|o| o.layers.iter().map(|l| l.layer + 1)).max().unwrap_or(0);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let at: Vec<&LayerOutcome> = outcomes.iter().filter_map(|o| o.layers.iter().find(|x| x.layer == l)).collect();
        let ctx: Vec<f64> = at.iter().filter_map(|x| x.rel_ctx).collect();
        let pat: Vec<f64> = at.iter().filter_map(|x| x.rel_patch).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { crate::causal::mean(v) };
        layers.push(LayerAggregate {
            layer: l,
            mean_rel_ctx: mean(&ctx),
            mean_rel_patch: mean(&pat),
            n: at.len(),
            histogram: Label::ALL.iter().map(|&lab| (lab, at.iter().filter(|x| x.label == lab).count())).collect(),
        });
    }
    let proportions = Label::ALL[..6]
        .iter()
        .map(|&label| {
            let enabled: Vec<&PatchOutcome> = outcomes.iter().filter(|o| o.enabled.contains(&label)).collect();
            let count = enabled.iter().filter(|o| o.layers.iter().any(|x| x.label == label)).count();
            ProportionRow {
                label,
                count,
                enabled: enabled.len(),
                proportion: if enabled.is_empty() { None } else { Some(count as f64 / enabled.len() as f64) },
            }
        })
        .collect();
    ConditionReport { n_pairs: outcomes.len(), layers, proportions }
}
