//! Next-token trainer for toy models.
//!
//! Sequences of a mini-batch are packed row-wise so every projection is one
//! matrix product; attention runs per sequence. Gradients are derived by hand
//! and checked against finite differences in the tests. Optimizer is Adam with
//! global-norm clipping.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::config::ModelConfig;
use crate::runtime::model::{Inputs, Model};
use crate::runtime::ops::{gelu, gelu_grad, layer_norm_cached, softmax_in_place};
use crate::runtime::weights::{Attention, Block, LayerNorm, Weights};
use crate::runtime::TokenId;

/// One supervised sequence: the model reads `prompt` and must continue with `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingItem {
    /// Items sharing a key count as one fact in the memorization report.
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc: Option<Vec<TokenId>>,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl TrainingItem {
    fn inputs(&self) -> Inputs {
        Inputs { enc: self.enc.clone(), dec: self.prompt.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Items per step; 0 means the full set.
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Stop once the mean loss of an epoch drops below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 1000, lr: 3e-3, batch_size: 64, seed: 0, clip_norm: 1.0, target_loss: Some(0.01) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    /// Fraction of item keys for which at least one prompt greedily reproduces its target.
    pub memorization_rate: f64,
    pub memorized_keys: usize,
    pub total_keys: usize,
    pub loss_history: Vec<f64>,
}

/// Trains a fresh model from `config.seed`.
pub fn train_toy(config: &ModelConfig, items: &[TrainingItem], opts: &TrainOptions) -> Result<(Model, TrainReport)> {
    let model = Model::init(config.clone())?;
    train_from(model, items, opts)
}

/// Continues training an existing model.
pub fn train_from(mut model: Model, items: &[TrainingItem], opts: &TrainOptions) -> Result<(Model, TrainReport)> {
    if items.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if opts.steps == 0 {
        return Err(Error::Training("steps must be at least 1".into()));
    }
    for it in items {
        check_item(&model.config, it)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = if opts.batch_size == 0 { items.len() } else { opts.batch_size.min(items.len()) };
    let mut adam = Adam::new(&model.weights);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = items.len();
    let mut epoch_loss = 0.0;
    let mut epoch_batches = 0usize;
    let mut history = Vec::new();
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;

    for _ in 0..opts.steps {
        if cursor + batch > items.len() {
            if epoch_batches > 0 {
                let mean = epoch_loss / epoch_batches as f64;
                history.push(mean);
                if opts.target_loss.is_some_and(|t| mean < t) {
                    break;
                }
            }
            order.shuffle(&mut rng);
            cursor = 0;
            epoch_loss = 0.0;
            epoch_batches = 0;
        }
        let chunk: Vec<&TrainingItem> = order[cursor..cursor + batch].iter().map(|&i| &items[i]).collect();
        cursor += batch;
        let (loss, mut grads) = loss_and_grad(&model.config, &model.weights, &chunk);
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {steps_run}")));
        }
        clip(&mut grads, opts.clip_norm);
        adam.step(&mut model.weights, &grads, opts.lr);
        epoch_loss += loss;
        epoch_batches += 1;
        last_loss = loss;
        steps_run += 1;
    }
    if !model.weights.all_finite() {
        return Err(Error::Training("weights diverged".into()));
    }
    let (memorized_keys, total_keys) = memorization(&model, items)?;
    let report = TrainReport {
        steps_run,
        final_loss: last_loss,
        memorization_rate: memorized_keys as f64 / total_keys as f64,
        memorized_keys,
        total_keys,
        loss_history: history,
    };
    Ok((model, report))
}

fn check_item(c: &ModelConfig, it: &TrainingItem) -> Result<()> {
    if it.prompt.is_empty() || it.target.is_empty() {
        return Err(Error::Training(format!("item {} has an empty prompt or target", it.key)));
    }
    if it.enc.is_some() != c.is_encoder_decoder() {
        return Err(Error::Training(format!("item {} does not match the architecture", it.key)));
    }
    let len = it.prompt.len() + it.target.len() - 1;
    if len > c.max_seq || it.enc.as_ref().is_some_and(|e| e.len() > c.max_seq) {
        return Err(Error::Length { len, max: c.max_seq });
    }
    let all = it.prompt.iter().chain(&it.target).chain(it.enc.iter().flatten());
    for &id in all {
        if id as usize >= c.vocab_size {
            return Err(Error::Token { id, vocab: c.vocab_size });
        }
    }
    Ok(())
}

/// Counts keys whose items are reproduced exactly by greedy decoding.
pub fn memorization(model: &Model, items: &[TrainingItem]) -> Result<(usize, usize)> {
    let by_key = memorized_by_key(model, items)?;
    Ok((by_key.values().filter(|&&h| h).count(), by_key.len()))
}

/// Whether each key has at least one item that greedy decoding reproduces.
pub fn memorized_by_key(model: &Model, items: &[TrainingItem]) -> Result<BTreeMap<String, bool>> {
    let mut by_key: BTreeMap<String, bool> = BTreeMap::new();
    for it in items {
        let hit = by_key.entry(it.key.clone()).or_insert(false);
        if *hit {
            continue;
        }
        let decoded = model.greedy_decode(&it.inputs(), it.target.len())?;
        *hit = decoded == it.target;
    }
    Ok(by_key)
}

fn clip(g: &mut Weights, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = g
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, mut t) in g.tensors_mut() {
            t.mapv_inplace(|x| x * scale);
        }
    }
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(w: &Weights) -> Self {
        Self { m: w.zeros_like(), v: w.zeros_like(), t: 0 }
    }

    fn step(&mut self, w: &mut Weights, g: &Weights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let grads = g.tensors();
        let params = w.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, mut p), (_, gr)), (_, mut m)), (_, mut v)) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            ndarray::Zip::from(&mut p).and(&gr).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Packed forward / backward
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Seg {
    start: usize,
    len: usize,
}

struct Packed {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    segs: Vec<Seg>,
}

impl Packed {
    fn new<'a>(seqs: impl Iterator<Item = &'a [TokenId]>) -> Self {
        let mut p = Packed { tokens: Vec::new(), positions: Vec::new(), segs: Vec::new() };
        for seq in seqs {
            p.segs.push(Seg { start: p.tokens.len(), len: seq.len() });
            p.tokens.extend_from_slice(seq);
            p.positions.extend(0..seq.len());
        }
        p
    }
}

struct LnCache {
    out: Array2<f64>,
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_fwd(x: &Array2<f64>, ln: &LayerNorm) -> LnCache {
    let (out, xhat, rstd) = layer_norm_cached(x, ln);
    LnCache { out, xhat, rstd }
}

fn ln_bwd(c: &LnCache, ln: &LayerNorm, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
    g.gain += &(dy * &c.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = c.xhat.row(r);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let rs = c.rstd[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dh[i] - mean_dh - xh[i] * mean_dhx);
        }
    }
    dx
}

struct AttnCache {
    q_in: Array2<f64>,
    kv_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-major probabilities per (segment, head).
    probs: Vec<Vec<f64>>,
    concat: Array2<f64>,
}

fn attn_fwd(
    w: &Attention,
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    qsegs: &[Seg],
    ksegs: &[Seg],
    causal: bool,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let d = w.wq.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = q_in.dot(&w.wq);
    let k = kv_in.dot(&w.wk);
    let v = kv_in.dot(&w.wv);
    let mut concat = Array2::zeros((q_in.nrows(), d));
    let mut probs = Vec::with_capacity(qsegs.len() * n_heads);
    for (qs, ks) in qsegs.iter().zip(ksegs) {
        for h in 0..n_heads {
            let c0 = h * dh;
            let mut p = vec![0.0; qs.len * ks.len];
            for i in 0..qs.len {
                let qrow = q.slice(s![qs.start + i, c0..c0 + dh]);
                let row = &mut p[i * ks.len..(i + 1) * ks.len];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        qrow.dot(&k.slice(s![ks.start + j, c0..c0 + dh])) * scale
                    };
                }
                softmax_in_place(row);
                let mut o = concat.slice_mut(s![qs.start + i, c0..c0 + dh]);
                for (j, &pj) in row.iter().enumerate() {
                    if pj != 0.0 {
                        o.scaled_add(pj, &v.slice(s![ks.start + j, c0..c0 + dh]));
                    }
                }
            }
            probs.push(p);
        }
    }
    let out = concat.dot(&w.wo);
    let cache = AttnCache { q_in: q_in.clone(), kv_in: kv_in.clone(), q, k, v, probs, concat };
    (out, cache)
}

/// Returns gradients with respect to the query input and the key/value input.
fn attn_bwd(
    w: &Attention,
    c: &AttnCache,
    dout: &Array2<f64>,
    g: &mut Attention,
    qsegs: &[Seg],
    ksegs: &[Seg],
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>) {
    let d = w.wq.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    g.wo += &c.concat.t().dot(dout);
    let dconcat = dout.dot(&w.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    let mut idx = 0;
    for (qs, ks) in qsegs.iter().zip(ksegs) {
        for h in 0..n_heads {
            let c0 = h * dh;
            let p = &c.probs[idx];
            idx += 1;
            let mut dp = vec![0.0; ks.len];
            for i in 0..qs.len {
                let prow = &p[i * ks.len..(i + 1) * ks.len];
                let dci = dconcat.slice(s![qs.start + i, c0..c0 + dh]);
                for j in 0..ks.len {
                    dp[j] = if prow[j] != 0.0 { dci.dot(&c.v.slice(s![ks.start + j, c0..c0 + dh])) } else { 0.0 };
                    if prow[j] != 0.0 {
                        dv.slice_mut(s![ks.start + j, c0..c0 + dh]).scaled_add(prow[j], &dci);
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..ks.len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds != 0.0 {
                        let krow = c.k.slice(s![ks.start + j, c0..c0 + dh]).to_owned();
                        dq.slice_mut(s![qs.start + i, c0..c0 + dh]).scaled_add(ds, &krow);
                        let qrow = c.q.slice(s![qs.start + i, c0..c0 + dh]).to_owned();
                        dk.slice_mut(s![ks.start + j, c0..c0 + dh]).scaled_add(ds, &qrow);
                    }
                }
            }
        }
    }
    g.wq += &c.q_in.t().dot(&dq);
    g.wk += &c.kv_in.t().dot(&dk);
    g.wv += &c.kv_in.t().dot(&dv);
    let d_q_in = dq.dot(&w.wq.t());
    let d_kv_in = dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    (d_q_in, d_kv_in)
}

struct BlockCache {
    ln_attn: LnCache,
    attn: AttnCache,
    cross: Option<(LnCache, AttnCache)>,
    ln_mlp: LnCache,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct StackCache {
    x0_rows: Vec<(TokenId, usize)>,
    blocks: Vec<BlockCache>,
}

#[allow(clippy::too_many_arguments)]
fn stack_fwd(
    w: &Weights,
    blocks: &[Block],
    pos: &Array2<f64>,
    packed: &Packed,
    memory: Option<(&Array2<f64>, &[Seg])>,
    causal: bool,
    n_heads: usize,
) -> (Array2<f64>, StackCache) {
    let d = w.tok_emb.ncols();
    let n = packed.tokens.len();
    let mut x = Array2::zeros((n, d));
    for (r, (&t, &p)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&w.tok_emb.row(t as usize));
        row += &pos.row(p);
    }
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let ln_attn = ln_fwd(&x, &b.ln_attn);
        let (sa, attn) = attn_fwd(&b.attn, &ln_attn.out, &ln_attn.out, &packed.segs, &packed.segs, causal, n_heads);
        x += &sa;
        let cross = match (&b.ln_cross, &b.cross, memory) {
            (Some(ln), Some(ca), Some((mem, msegs))) => {
                let lc = ln_fwd(&x, ln);
                let (co, cc) = attn_fwd(ca, &lc.out, mem, &packed.segs, msegs, false, n_heads);
                x += &co;
                Some((lc, cc))
            }
            _ => None,
        };
        let ln_mlp = ln_fwd(&x, &b.ln_mlp);
        let pre = ln_mlp.out.dot(&b.mlp.w_in) + &b.mlp.b_in;
        let act = pre.mapv(gelu);
        x += &(act.dot(&b.mlp.w_out) + &b.mlp.b_out);
        caches.push(BlockCache { ln_attn, attn, cross, ln_mlp, pre, act });
    }
    let x0_rows = packed.tokens.iter().copied().zip(packed.positions.iter().copied()).collect();
    (x, StackCache { x0_rows, blocks: caches })
}

/// Backpropagates `dx` (gradient of the stack output) into `g`. Returns the
/// gradient with respect to the cross-attention memory, if any.
#[allow(clippy::too_many_arguments)]
fn stack_bwd(
    blocks: &[Block],
    cache: &StackCache,
    mut dx: Array2<f64>,
    gblocks: &mut [Block],
    g_tok: &mut Array2<f64>,
    g_pos: &mut Array2<f64>,
    segs: &[Seg],
    msegs: Option<(&[Seg], usize)>,
    n_heads: usize,
) -> Option<Array2<f64>> {
    let d = dx.ncols();
    let mut dmem = msegs.map(|(_, rows)| Array2::zeros((rows, d)));
    for ((b, c), gb) in blocks.iter().zip(&cache.blocks).zip(gblocks.iter_mut()).rev() {
        // MLP
        gb.mlp.w_out += &c.act.t().dot(&dx);
        gb.mlp.b_out += &dx.sum_axis(Axis(0));
        let mut dpre = dx.dot(&b.mlp.w_out.t());
        ndarray::Zip::from(&mut dpre).and(&c.pre).for_each(|g, &p| *g *= gelu_grad(p));
        gb.mlp.w_in += &c.ln_mlp.out.t().dot(&dpre);
        gb.mlp.b_in += &dpre.sum_axis(Axis(0));
        let da = dpre.dot(&b.mlp.w_in.t());
        dx += &ln_bwd(&c.ln_mlp, &b.ln_mlp, &da, &mut gb.ln_mlp);
        // Cross-attention
        if let (Some((lc, cc)), Some(ca), Some(ln)) = (&c.cross, &b.cross, &b.ln_cross) {
            let (mseg, _) = msegs.expect("memory segments");
            let gca = gb.cross.as_mut().expect("cross grads");
            let (dq, dkv) = attn_bwd(ca, cc, &dx, gca, segs, mseg, n_heads);
            *dmem.as_mut().expect("memory grad") += &dkv;
            let gln = gb.ln_cross.as_mut().expect("cross ln grads");
            dx += &ln_bwd(lc, ln, &dq, gln);
        }
        // Self-attention
        let (dq, dkv) = attn_bwd(&b.attn, &c.attn, &dx, &mut gb.attn, segs, segs, n_heads);
        let da = dq + dkv;
        dx += &ln_bwd(&c.ln_attn, &b.ln_attn, &da, &mut gb.ln_attn);
    }
    for (r, &(t, p)) in cache.x0_rows.iter().enumerate() {
        let row = dx.row(r);
        let mut gt = g_tok.row_mut(t as usize);
        gt += &row;
        let mut gp = g_pos.row_mut(p);
        gp += &row;
    }
    dmem
}

/// Mean next-token cross-entropy over all target positions of `batch`, and its gradient.
pub fn loss_and_grad(config: &ModelConfig, w: &Weights, batch: &[&TrainingItem]) -> (f64, Weights) {
    let n_heads = config.n_heads;
    let dec_seqs: Vec<Vec<TokenId>> = batch
        .iter()
        .map(|it| {
            let mut s = it.prompt.clone();
            s.extend_from_slice(&it.target[..it.target.len() - 1]);
            s
        })
        .collect();
    let dec = Packed::new(dec_seqs.iter().map(Vec::as_slice));
    let mut targets = Vec::new();
    for (it, seg) in batch.iter().zip(&dec.segs) {
        for (i, &t) in it.target.iter().enumerate() {
            targets.push((seg.start + it.prompt.len() - 1 + i, t));
        }
    }

    let mut g = w.zeros_like();

    // Encoder
    let enc = config.is_encoder_decoder().then(|| {
        Packed::new(batch.iter().map(|it| it.enc.as_deref().expect("encoder tokens")))
    });
    let enc_state = enc.as_ref().map(|p| {
        let pos = w.pos_enc.as_ref().expect("encoder positions");
        let (h, cache) = stack_fwd(w, &w.enc_blocks, pos, p, None, false, n_heads);
        let ln = ln_fwd(&h, w.enc_final_ln.as_ref().expect("encoder final norm"));
        (cache, ln)
    });
    let memory = match (&enc, &enc_state) {
        (Some(p), Some((_, ln))) => Some((&ln.out, p.segs.as_slice())),
        _ => None,
    };

    // Decoder
    let (h, dcache) = stack_fwd(w, &w.dec_blocks, &w.pos_dec, &dec, memory, true, n_heads);
    let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
    let ht = h.select(Axis(0), &rows);
    let mut logits = ht.dot(&w.tok_emb.t());
    let m = targets.len() as f64;
    let mut loss = 0.0;
    for (mut row, &(_, t)) in logits.axis_iter_mut(Axis(0)).zip(&targets) {
        let sl = row.as_slice_mut().expect("contiguous logits");
        softmax_in_place(sl);
        loss -= sl[t as usize].max(1e-300).ln();
        sl[t as usize] -= 1.0;
        for x in sl.iter_mut() {
            *x /= m;
        }
    }
    loss /= m;
    let dlogits = logits;
    g.tok_emb += &dlogits.t().dot(&ht);
    let dht = dlogits.dot(&w.tok_emb);
    let mut dh = Array2::zeros(h.raw_dim());
    for (k, &r) in rows.iter().enumerate() {
        let mut row = dh.row_mut(r);
        row += &dht.row(k);
    }

    let msegs = enc.as_ref().map(|p| (p.segs.as_slice(), p.tokens.len()));
    let Weights { tok_emb: g_tok, pos_dec: g_pos_dec, pos_enc: g_pos_enc, enc_blocks: g_enc, dec_blocks: g_dec, enc_final_ln: g_fln } = &mut g;
    let dmem = stack_bwd(&w.dec_blocks, &dcache, dh, g_dec, g_tok, g_pos_dec, &dec.segs, msegs, n_heads);

    if let (Some(p), Some((ecache, eln)), Some(dmem)) = (&enc, &enc_state, dmem) {
        let dhe = ln_bwd(
            eln,
            w.enc_final_ln.as_ref().expect("encoder final norm"),
            &dmem,
            g_fln.as_mut().expect("encoder final norm grads"),
        );
        stack_bwd(
            &w.enc_blocks,
            ecache,
            dhe,
            g_enc,
            g_tok,
            g_pos_enc.as_mut().expect("encoder position grads"),
            &p.segs,
            None,
            n_heads,
        );
    }
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::config::{Arch, EOS};
    use crate::runtime::model::Hooks;

    fn items_dec() -> Vec<TrainingItem> {
        vec![
            TrainingItem { key: "a".into(), enc: None, prompt: vec![1, 4, 5], target: vec![6, EOS] },
            TrainingItem { key: "b".into(), enc: None, prompt: vec![1, 7], target: vec![8, 9, EOS] },
        ]
    }

    fn items_ed() -> Vec<TrainingItem> {
        vec![
            TrainingItem { key: "a".into(), enc: Some(vec![4, 5, 10, EOS]), prompt: vec![1, 10], target: vec![6, EOS] },
            TrainingItem { key: "b".into(), enc: Some(vec![7, 10, EOS]), prompt: vec![1, 10], target: vec![8, 9, EOS] },
        ]
    }

    fn ed_config() -> ModelConfig {
        ModelConfig {
            arch: Arch::EncoderDecoder,
            n_layers_enc: 2,
            sentinel_ids: vec![10],
            ..ModelConfig::toy_decoder(2, 8, 2, 16, 11)
        }
    }

    /// Reference loss computed through the inference forward pass.
    fn reference_loss(model: &Model, items: &[TrainingItem]) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for it in items {
            let mut dec = it.prompt.clone();
            for &t in &it.target {
                let out = model.forward(&Inputs { enc: it.enc.clone(), dec: dec.clone() }, &Hooks::default()).unwrap();
                total -= out.prob(t).ln();
                n += 1.0;
                dec.push(t);
            }
        }
        total / n
    }

    fn check_gradients(config: ModelConfig, items: Vec<TrainingItem>) {
        let model = Model::init(config.clone()).unwrap();
        let batch: Vec<&TrainingItem> = items.iter().collect();
        let (loss, grads) = loss_and_grad(&config, &model.weights, &batch);
        let reference = reference_loss(&model, &items);
        assert!((loss - reference).abs() < 1e-10, "{loss} vs {reference}");

        let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
        let h = 1e-6;
        for (ti, name) in names.iter().enumerate() {
            let analytic: Vec<f64> = grads.tensors()[ti].1.iter().copied().collect();
            let len = analytic.len();
            for &idx in &[0, len / 3, len - 1] {
                let eval = |delta: f64| {
                    let mut w = model.weights.clone();
                    {
                        let mut ts = w.tensors_mut();
                        let slot = ts[ti].1.iter_mut().nth(idx).unwrap();
                        *slot += delta;
                    }
                    loss_and_grad(&config, &w, &batch).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[idx];
                assert!((fd - a).abs() < 1e-6 * (1.0 + a.abs()), "{name}[{idx}]: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        check_gradients(ModelConfig::toy_decoder(2, 8, 2, 16, 3), items_dec());
    }

    #[test]
    fn encoder_decoder_gradients_match_finite_differences() {
        check_gradients(ed_config(), items_ed());
    }

    #[test]
    fn one_step_gives_finite_weights() {
        let opts = TrainOptions { steps: 1, ..TrainOptions::default() };
        let (m, rep) = train_toy(&ModelConfig::toy_decoder(2, 8, 2, 16, 3), &items_dec(), &opts).unwrap();
        assert!(m.weights.all_finite());
        assert_eq!(rep.steps_run, 1);
        assert!(train_toy(&m.config, &items_dec(), &TrainOptions { steps: 0, ..opts.clone() }).is_err());
        assert!(train_toy(&m.config, &[], &opts).is_err());
    }

    #[test]
    fn memorizes_tiny_sets() {
        let opts = TrainOptions { steps: 400, lr: 1e-2, batch_size: 0, ..TrainOptions::default() };
        let (_, rep) = train_toy(&ModelConfig::toy_decoder(2, 16, 2, 16, 3), &items_dec(), &opts).unwrap();
        assert_eq!(rep.memorization_rate, 1.0, "{rep:?}");
        let (_, rep) = train_toy(&ModelConfig { d_model: 16, d_ff: 64, ..ed_config() }, &items_ed(), &opts).unwrap();
        assert_eq!(rep.memorization_rate, 1.0, "{rep:?}");
    }
}
