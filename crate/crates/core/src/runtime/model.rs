//! Hookable forward pass.
//!
//! Architecture: pre-norm blocks, learned absolute positions, tanh-GELU MLP,
//! no final layer norm, output head tied to the token embedding. Each decoder
//! block computes
//!
//! ```text
//! s = SelfAttn(LN(h));  c = CrossAttn(LN(h + s), memory);  f = MLP(LN(h + s + c))
//! h' = h + s + c + f
//! ```
//!
//! and encoder blocks drop `c`. Cross-attention memory is the layer-normed final
//! encoder residual. Logits are `E · h^L` at the last decoder position.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::config::ModelConfig;
use crate::runtime::ops::{argmax, gelu, layer_norm, softmax_in_place};
use crate::runtime::site::{
    resolve_index, ActivationRecord, AttentionKind, AttnBlock, HookSite, KnockoutMode, SiteKind, Stream,
};
use crate::runtime::weights::{Attention, Block, Mlp, Weights};
use crate::runtime::TokenId;

/// Token ids for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Inputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc: Option<Vec<TokenId>>,
    pub dec: Vec<TokenId>,
}

impl Inputs {
    pub fn decoder(dec: Vec<TokenId>) -> Self {
        Self { enc: None, dec }
    }

    pub fn encoder_decoder(enc: Vec<TokenId>, dec: Vec<TokenId>) -> Self {
        Self { enc: Some(enc), dec }
    }

    pub fn len(&self, stream: Stream) -> usize {
        match stream {
            Stream::Enc => self.enc.as_ref().map_or(0, Vec::len),
            Stream::Dec => self.dec.len(),
        }
    }
}

/// Captures, replacements and attention blocks for one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    pub captures: Vec<HookSite>,
    pub replacements: Vec<(HookSite, Vec<f64>)>,
    pub blocks: Vec<AttnBlock>,
}

impl Hooks {
    pub fn capture(sites: impl IntoIterator<Item = HookSite>) -> Self {
        Self { captures: sites.into_iter().collect(), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Next-token distribution at the last decoder position.
    pub distribution: Vec<f64>,
    pub predicted_token: TokenId,
    pub captures: Vec<ActivationRecord>,
}

impl RunOutput {
    pub fn prob(&self, token: TokenId) -> f64 {
        self.distribution.get(token as usize).copied().unwrap_or(0.0)
    }

    /// Looks up a capture by absolute site.
    pub fn capture(&self, site: &HookSite) -> Option<&[f64]> {
        self.captures
            .iter()
            .find(|r| r.site == *site)
            .map(|r| r.vector.as_slice())
    }
}

/// Post-softmax attention maps recorded by [`Model::forward_traced`], `[query, key]` per head.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub maps: Vec<((Stream, AttentionKind, usize), Vec<Array2<f64>>)>,
}

type SiteKey = (Stream, SiteKind, usize);
type EdgeKey = (Stream, AttentionKind, usize);

struct Compiled<'a> {
    replace: HashMap<SiteKey, Vec<(usize, &'a [f64])>>,
    capture: HashMap<SiteKey, Vec<usize>>,
    blocks: HashMap<EdgeKey, Vec<(usize, usize, KnockoutMode)>>,
}

fn addressing(site: impl ToString, reason: impl Into<String>) -> Error {
    Error::Addressing { site: site.to_string(), reason: reason.into() }
}

/// Immutable model: config plus weights. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let weights = Weights::init(&config)?;
        Ok(Self { config, weights })
    }

    /// Raw vocabulary logits `E · v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.weights.tok_emb.dot(&ArrayView1::from(v)).to_vec()
    }

    pub fn forward(&self, inputs: &Inputs, hooks: &Hooks) -> Result<RunOutput> {
        self.run(inputs, hooks, None)
    }

    pub fn forward_traced(&self, inputs: &Inputs, hooks: &Hooks) -> Result<(RunOutput, AttentionTrace)> {
        let mut trace = AttentionTrace::default();
        let out = self.run(inputs, hooks, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<()> {
        let c = &self.config;
        match (&inputs.enc, c.is_encoder_decoder()) {
            (Some(_), false) => return Err(Error::Input("encoder tokens given to a decoder-only model".into())),
            (None, true) => return Err(Error::Input("encoder-decoder model needs encoder tokens".into())),
            _ => {}
        }
        for seq in inputs.enc.iter().chain(std::iter::once(&inputs.dec)) {
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if seq.len() > c.max_seq {
                return Err(Error::Length { len: seq.len(), max: c.max_seq });
            }
            if let Some(&id) = seq.iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(Error::Token { id, vocab: c.vocab_size });
            }
        }
        Ok(())
    }

    fn compile<'a>(&self, inputs: &Inputs, hooks: &'a Hooks) -> Result<Compiled<'a>> {
        let c = &self.config;
        let topo = c.topology();
        let mut replace: HashMap<SiteKey, Vec<(usize, &[f64])>> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for (site, v) in &hooks.replacements {
            site.check(&topo).map_err(|r| addressing(site, r))?;
            let t = site.resolve_token(inputs.len(site.stream)).map_err(|r| addressing(site, r))?;
            if v.len() != c.d_model {
                return Err(addressing(site, format!("vector length {} != d_model {}", v.len(), c.d_model)));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(addressing(site, "replacement vector is not finite"));
            }
            if !seen.insert((site.stream, site.kind, site.layer, t)) {
                return Err(addressing(site, "conflicting replacements at one site"));
            }
            replace.entry((site.stream, site.kind, site.layer)).or_default().push((t, v.as_slice()));
        }
        let mut capture: HashMap<SiteKey, Vec<usize>> = HashMap::new();
        for site in &hooks.captures {
            site.check(&topo).map_err(|r| addressing(site, r))?;
            let t = site.resolve_token(inputs.len(site.stream)).map_err(|r| addressing(site, r))?;
            capture.entry((site.stream, site.kind, site.layer)).or_default().push(t);
        }
        let mut blocks: HashMap<EdgeKey, Vec<(usize, usize, KnockoutMode)>> = HashMap::new();
        for b in &hooks.blocks {
            let label = format!("attn_block{:?}", b.layers);
            b.check(&topo).map_err(|r| addressing(&label, r))?;
            let q = resolve_index(b.query, inputs.len(b.stream)).map_err(|r| addressing(&label, r))?;
            let key_stream = match b.attention {
                AttentionKind::SelfAttn => b.stream,
                AttentionKind::CrossAttn => Stream::Enc,
            };
            let keys = b
                .keys
                .iter()
                .map(|&k| resolve_index(k, inputs.len(key_stream)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|r| addressing(&label, r))?;
            for &l in &b.layers {
                let e = blocks.entry((b.stream, b.attention, l)).or_default();
                for &k in &keys {
                    e.push((q, k, b.mode));
                }
            }
        }
        Ok(Compiled { replace, capture, blocks })
    }

    fn run(&self, inputs: &Inputs, hooks: &Hooks, mut trace: Option<&mut AttentionTrace>) -> Result<RunOutput> {
        self.check_inputs(inputs)?;
        let compiled = self.compile(inputs, hooks)?;
        let mut captured: HashMap<HookSite, Vec<f64>> = HashMap::new();

        let memory = match &inputs.enc {
            Some(enc) => {
                let h = self.run_stream(Stream::Enc, enc, None, &compiled, &mut captured, trace.as_deref_mut())?;
                let ln = self.weights.enc_final_ln.as_ref().expect("encoder-decoder weights");
                Some(layer_norm(&h, ln))
            }
            None => None,
        };
        let h = self.run_stream(Stream::Dec, &inputs.dec, memory.as_ref(), &compiled, &mut captured, trace)?;

        let last = h.row(h.nrows() - 1);
        let mut distribution = self.weights.tok_emb.dot(&last).to_vec();
        softmax_in_place(&mut distribution);
        let predicted_token = argmax(&distribution);

        let captures = hooks
            .captures
            .iter()
            .map(|site| {
                let abs = site.absolute(inputs.len(site.stream)).expect("resolved during compile");
                ActivationRecord { vector: captured[&abs].clone(), site: abs }
            })
            .collect();
        Ok(RunOutput { distribution, predicted_token, captures })
    }

    fn run_stream(
        &self,
        stream: Stream,
        tokens: &[TokenId],
        memory: Option<&Array2<f64>>,
        hc: &Compiled<'_>,
        captured: &mut HashMap<HookSite, Vec<f64>>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Array2<f64>> {
        let w = &self.weights;
        let (blocks, pos) = match stream {
            Stream::Enc => (&w.enc_blocks, w.pos_enc.as_ref().expect("encoder positions")),
            Stream::Dec => (&w.dec_blocks, &w.pos_dec),
        };
        let n = tokens.len();
        let d = self.config.d_model;

        let mut h = Array2::zeros((n, d));
        for (t, &id) in tokens.iter().enumerate() {
            h.row_mut(t).assign(&w.tok_emb.row(id as usize));
        }
        apply_hooks(&mut h, stream, SiteKind::Embed, 0, hc, captured);
        h += &pos.slice(s![..n, ..]);

        for (l, block) in blocks.iter().enumerate() {
            apply_hooks(&mut h, stream, SiteKind::StateH, l, hc, captured);
            h = self.run_block(stream, l, block, h, memory, hc, captured, trace.as_deref_mut())?;
        }
        apply_hooks(&mut h, stream, SiteKind::StateH, blocks.len(), hc, captured);
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        stream: Stream,
        l: usize,
        block: &Block,
        h: Array2<f64>,
        memory: Option<&Array2<f64>>,
        hc: &Compiled<'_>,
        captured: &mut HashMap<HookSite, Vec<f64>>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Array2<f64>> {
        let causal = stream == Stream::Dec;
        let normed = layer_norm(&h, &block.ln_attn);
        let edges = edges_for(hc, (stream, AttentionKind::SelfAttn, l));
        let mut s = self.attend(&block.attn, &normed, &normed, causal, edges, trace.as_deref_mut(), (stream, AttentionKind::SelfAttn, l))?;
        apply_hooks(&mut s, stream, SiteKind::SelfAttnS, l, hc, captured);
        let mut resid = h + &s;

        if let (Some(ln), Some(attn), Some(mem)) = (&block.ln_cross, &block.cross, memory) {
            let normed = layer_norm(&resid, ln);
            let edges = edges_for(hc, (stream, AttentionKind::CrossAttn, l));
            let mut c = self.attend(attn, &normed, mem, false, edges, trace, (stream, AttentionKind::CrossAttn, l))?;
            apply_hooks(&mut c, stream, SiteKind::CrossAttnC, l, hc, captured);
            resid += &c;
        }

        let mut f = mlp(&block.mlp, &layer_norm(&resid, &block.ln_mlp));
        apply_hooks(&mut f, stream, SiteKind::MlpF, l, hc, captured);
        Ok(resid + &f)
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        w: &Attention,
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
        causal: bool,
        edges: &[(usize, usize, KnockoutMode)],
        trace: Option<&mut AttentionTrace>,
        key: EdgeKey,
    ) -> Result<Array2<f64>> {
        let (nq, nk) = (q_in.nrows(), kv_in.nrows());
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = q_in.dot(&w.wq);
        let k = kv_in.dot(&w.wk);
        let v = kv_in.dot(&w.wv);

        let mut mask: Vec<Option<KnockoutMode>> = vec![None; nq * nk];
        for &(qi, ki, mode) in edges {
            let slot = &mut mask[qi * nk + ki];
            // -inf wins over post-softmax zeroing if both are requested.
            if *slot != Some(KnockoutMode::NegInf) {
                *slot = Some(mode);
            }
        }
        for i in 0..nq {
            let visible = if causal { i + 1 } else { nk };
            if (0..visible).all(|j| mask[i * nk + j].is_some()) {
                return Err(addressing(
                    format!("{:?}.{:?}.{}", key.0, key.1, key.2),
                    format!("attention row of query {i} would be fully blocked"),
                ));
            }
        }

        let mut out = Array2::zeros((nq, self.config.d_model));
        let mut maps = Vec::new();
        let mut row = vec![0.0; nk];
        for head in 0..self.config.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let mut map = trace.is_some().then(|| Array2::zeros((nq, nk)));
            for i in 0..nq {
                let qi = q.slice(s![i, cols.clone()]);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if (causal && j > i) || mask[i * nk + j] == Some(KnockoutMode::NegInf) {
                        f64::NEG_INFINITY
                    } else {
                        qi.dot(&k.slice(s![j, cols.clone()])) * scale
                    };
                }
                softmax_in_place(&mut row);
                for (j, r) in row.iter_mut().enumerate() {
                    if mask[i * nk + j] == Some(KnockoutMode::ZeroNoRenorm) {
                        *r = 0.0;
                    }
                }
                let mut o = out.slice_mut(s![i, cols.clone()]);
                for (j, &p) in row.iter().enumerate() {
                    if p != 0.0 {
                        o.scaled_add(p, &v.slice(s![j, cols.clone()]));
                    }
                }
                if let Some(m) = map.as_mut() {
                    m.row_mut(i).assign(&ArrayView1::from(&row[..]));
                }
            }
            if let Some(m) = map {
                maps.push(m);
            }
        }
        if let Some(t) = trace {
            t.maps.push((key, maps));
        }
        Ok(out.dot(&w.wo))
    }
}

fn edges_for<'c>(hc: &'c Compiled<'_>, key: EdgeKey) -> &'c [(usize, usize, KnockoutMode)] {
    hc.blocks.get(&key).map_or(&[], Vec::as_slice)
}

fn mlp(w: &Mlp, x: &Array2<f64>) -> Array2<f64> {
    let mut hidden = x.dot(&w.w_in) + &w.b_in;
    hidden.mapv_inplace(gelu);
    hidden.dot(&w.w_out) + &w.b_out
}

/// Applies replacements for one site family, then records captures.
fn apply_hooks(
    x: &mut Array2<f64>,
    stream: Stream,
    kind: SiteKind,
    layer: usize,
    hc: &Compiled<'_>,
    captured: &mut HashMap<HookSite, Vec<f64>>,
) {
    let key = (stream, kind, layer);
    if let Some(reps) = hc.replace.get(&key) {
        for &(t, v) in reps {
            x.row_mut(t).assign(&ArrayView1::from(v));
        }
    }
    if let Some(tokens) = hc.capture.get(&key) {
        for &t in tokens {
            let site = HookSite::new(stream, layer, kind, t as i64);
            captured.insert(site, x.row(t).to_vec());
        }
    }
}

/// Every site of a stream at every token, in layer-major order.
pub fn all_sites(config: &ModelConfig, stream: Stream, len: usize, kinds: &[SiteKind]) -> Vec<HookSite> {
    let n_layers = config.n_layers(stream);
    let topo = config.topology();
    let mut out = Vec::new();
    for &kind in kinds {
        let layers = match kind {
            SiteKind::StateH => 0..n_layers + 1,
            SiteKind::Embed => 0..1,
            _ => 0..n_layers,
        };
        for l in layers {
            for t in 0..len {
                let site = HookSite::new(stream, l, kind, t as i64);
                if site.check(&topo).is_ok() {
                    out.push(site);
                }
            }
        }
    }
    out
}

#[allow(dead_code)]
pub(crate) fn rows_sum(x: &Array2<f64>) -> Vec<f64> {
    x.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::config::Arch;

    fn toy() -> Model {
        Model::init(ModelConfig::toy_decoder(2, 8, 2, 32, 42)).unwrap()
    }

    fn toy_ed() -> Model {
        Model::init(ModelConfig {
            arch: Arch::EncoderDecoder,
            n_layers_enc: 2,
            sentinel_ids: vec![30],
            ..ModelConfig::toy_decoder(2, 8, 2, 32, 5)
        })
        .unwrap()
    }

    #[test]
    fn distribution_is_normalized_and_argmax_matches_projection() {
        let m = toy();
        let out = m
            .forward(&Inputs::decoder(vec![1, 7, 9, 12]), &Hooks::capture([HookSite::dec(2, SiteKind::StateH, -1)]))
            .unwrap();
        let sum: f64 = out.distribution.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let logits = m.project(&out.captures[0].vector);
        assert_eq!(argmax(&logits), out.predicted_token);
        assert_eq!(out.captures[0].site.token, 3);
    }

    #[test]
    fn residual_identity_holds() {
        for m in [toy(), toy_ed()] {
            let inputs = if m.config.is_encoder_decoder() {
                Inputs::encoder_decoder(vec![4, 5, 30, 2], vec![1, 30, 6])
            } else {
                Inputs::decoder(vec![1, 4, 5, 6, 7])
            };
            let kinds = [SiteKind::StateH, SiteKind::SelfAttnS, SiteKind::CrossAttnC, SiteKind::MlpF];
            let mut sites = all_sites(&m.config, Stream::Dec, inputs.dec.len(), &kinds);
            if m.config.is_encoder_decoder() {
                sites.extend(all_sites(&m.config, Stream::Enc, inputs.len(Stream::Enc), &kinds));
            }
            let out = m.forward(&inputs, &Hooks::capture(sites)).unwrap();
            for stream in [Stream::Enc, Stream::Dec] {
                for l in 0..m.config.n_layers(stream) {
                    for t in 0..inputs.len(stream) as i64 {
                        let get = |layer, kind| out.capture(&HookSite::new(stream, layer, kind, t));
                        let h0 = get(l, SiteKind::StateH).unwrap();
                        let h1 = get(l + 1, SiteKind::StateH).unwrap();
                        let s = get(l, SiteKind::SelfAttnS).unwrap();
                        let f = get(l, SiteKind::MlpF).unwrap();
                        let c = get(l, SiteKind::CrossAttnC);
                        for i in 0..m.config.d_model {
                            let r = h1[i] - h0[i] - s[i] - f[i] - c.map_or(0.0, |c| c[i]);
                            assert!(r.abs() < 1e-5, "{stream:?} l={l} t={t}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = toy();
        let inputs = Inputs::decoder(vec![1, 3, 8, 8, 2]);
        let a = m.forward(&inputs, &Hooks::default()).unwrap();
        let b = m.forward(&inputs, &Hooks::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = toy();
        let site = HookSite::dec(2, SiteKind::StateH, 2);
        let a = m.forward(&Inputs::decoder(vec![1, 5, 6, 7, 8]), &Hooks::capture([site])).unwrap();
        let b = m.forward(&Inputs::decoder(vec![1, 5, 6, 20, 21]), &Hooks::capture([site])).unwrap();
        assert_eq!(a.captures[0].vector, b.captures[0].vector);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let m = toy_ed();
        let (_, trace) = m
            .forward_traced(&Inputs::encoder_decoder(vec![4, 5, 30, 2], vec![1, 30, 6]), &Hooks::default())
            .unwrap();
        assert_eq!(trace.maps.len(), 2 + 2 * 2);
        for (_, heads) in &trace.maps {
            for map in heads {
                for s in rows_sum(map) {
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn addressing_and_length_errors() {
        let m = toy();
        let too_long = Inputs::decoder(vec![1; 33]);
        assert!(matches!(m.forward(&too_long, &Hooks::default()), Err(Error::Length { .. })));
        let bad_site = Hooks::capture([HookSite::dec(0, SiteKind::CrossAttnC, 0)]);
        assert!(matches!(m.forward(&Inputs::decoder(vec![1, 2]), &bad_site), Err(Error::Addressing { .. })));
        let bad_tok = Hooks::capture([HookSite::dec(0, SiteKind::StateH, 5)]);
        assert!(matches!(m.forward(&Inputs::decoder(vec![1, 2]), &bad_tok), Err(Error::Addressing { .. })));
        assert!(matches!(m.forward(&Inputs::decoder(vec![40]), &Hooks::default()), Err(Error::Token { .. })));
    }

    #[test]
    fn fully_blocked_row_is_rejected() {
        let m = toy();
        let hooks = Hooks {
            blocks: vec![AttnBlock {
                stream: Stream::Dec,
                attention: AttentionKind::SelfAttn,
                layers: vec![0],
                query: 1,
                keys: vec![0, 1],
                mode: KnockoutMode::NegInf,
            }],
            ..Hooks::default()
        };
        assert!(m.forward(&Inputs::decoder(vec![1, 4, 5]), &hooks).is_err());
    }
}
