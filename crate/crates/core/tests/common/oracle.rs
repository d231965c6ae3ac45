//! A second forward pass written with plain loops over the flat checkpoint
//! tensors. It shares no numeric code with the runtime.

use std::collections::HashMap;

use recall_lab::runtime::{AttentionKind, KnockoutMode, Model, SiteKind, Stream};

/// (stream, kind, layer, absolute token)
pub type Key = (Stream, SiteKind, usize, usize);

#[derive(Debug, Clone, Copy)]
pub struct Cut {
    pub stream: Stream,
    pub attention: AttentionKind,
    pub layer: usize,
    pub query: usize,
    pub key: usize,
    pub mode: KnockoutMode,
}

#[derive(Debug, Clone, Default)]
pub struct Edits {
    pub replace: Vec<(Key, Vec<f64>)>,
    pub cuts: Vec<Cut>,
}

impl Edits {
    pub fn replace(mut self, key: Key, v: Vec<f64>) -> Self {
        self.replace.push((key, v));
        self
    }

    pub fn cut(mut self, c: Cut) -> Self {
        self.cuts.push(c);
        self
    }
}

pub struct Pass {
    pub dist: Vec<f64>,
    /// Every site at every token, after replacement.
    pub sites: HashMap<Key, Vec<f64>>,
}

impl Pass {
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for i in 0..self.dist.len() {
            if self.dist[i] > self.dist[best] {
                best = i;
            }
        }
        best as u32
    }
}

pub struct Oracle {
    d: usize,
    heads: usize,
    layers_enc: usize,
    layers_dec: usize,
    vocab: usize,
    t: HashMap<String, Vec<f64>>,
}

const EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

impl Oracle {
    pub fn new(model: &Model) -> Self {
        let ck = model.weights.to_checkpoint();
        let t = ck.tensors.into_iter().map(|t| (t.name, t.data)).collect();
        let c = &model.config;
        Self {
            d: c.d_model,
            heads: c.n_heads,
            layers_enc: c.n_layers_enc,
            layers_dec: c.n_layers_dec,
            vocab: c.vocab_size,
            t,
        }
    }

    fn w(&self, name: &str) -> &[f64] {
        self.t.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    /// `x · W` for a row vector and a row-major `[rows, cols]` matrix.
    fn vecmat(&self, x: &[f64], name: &str, cols: usize) -> Vec<f64> {
        let w = self.w(name);
        let mut out = vec![0.0; cols];
        for (i, xi) in x.iter().enumerate() {
            for j in 0..cols {
                out[j] += xi * w[i * cols + j];
            }
        }
        out
    }

    fn ln(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let n = x.len() as f64;
        let mut mean = 0.0;
        for v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in x {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let g = self.w(&format!("{prefix}.gain"));
        let b = self.w(&format!("{prefix}.bias"));
        let mut out = vec![0.0; x.len()];
        for i in 0..x.len() {
            out[i] = (x[i] - mean) / (var + EPS).sqrt() * g[i] + b[i];
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        prefix: &str,
        q_rows: &[Vec<f64>],
        kv_rows: &[Vec<f64>],
        causal: bool,
        cuts: &[Cut],
        stream: Stream,
        kind: AttentionKind,
        layer: usize,
    ) -> Vec<Vec<f64>> {
        let d = self.d;
        let dh = d / self.heads;
        let q: Vec<Vec<f64>> = q_rows.iter().map(|x| self.vecmat(x, &format!("{prefix}.wq"), d)).collect();
        let k: Vec<Vec<f64>> = kv_rows.iter().map(|x| self.vecmat(x, &format!("{prefix}.wk"), d)).collect();
        let v: Vec<Vec<f64>> = kv_rows.iter().map(|x| self.vecmat(x, &format!("{prefix}.wv"), d)).collect();
        let mut concat = vec![vec![0.0; d]; q_rows.len()];
        for i in 0..q_rows.len() {
            let mut neg = vec![false; kv_rows.len()];
            let mut zero = vec![false; kv_rows.len()];
            for c in cuts {
                if c.stream == stream && c.attention == kind && c.layer == layer && c.query == i {
                    match c.mode {
                        KnockoutMode::NegInf => neg[c.key] = true,
                        KnockoutMode::ZeroNoRenorm => zero[c.key] = true,
                    }
                }
            }
            for h in 0..self.heads {
                let mut scores: Vec<Option<f64>> = vec![None; kv_rows.len()];
                for j in 0..kv_rows.len() {
                    if (causal && j > i) || neg[j] {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    scores[j] = Some(s / (dh as f64).sqrt());
                }
                let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut total = 0.0;
                let mut p = vec![0.0; kv_rows.len()];
                for j in 0..kv_rows.len() {
                    if let Some(s) = scores[j] {
                        p[j] = (s - max).exp();
                        total += p[j];
                    }
                }
                for j in 0..kv_rows.len() {
                    p[j] /= total;
                    if zero[j] && !neg[j] {
                        p[j] = 0.0;
                    }
                }
                for j in 0..kv_rows.len() {
                    for c in h * dh..(h + 1) * dh {
                        concat[i][c] += p[j] * v[j][c];
                    }
                }
            }
        }
        concat.iter().map(|x| self.vecmat(x, &format!("{prefix}.wo"), d)).collect()
    }

    fn hook(&self, rows: &mut [Vec<f64>], key: (Stream, SiteKind, usize), e: &Edits, sites: &mut HashMap<Key, Vec<f64>>) {
        for ((s, k, l, t), v) in &e.replace {
            if (*s, *k, *l) == key {
                rows[*t] = v.clone();
            }
        }
        for (t, r) in rows.iter().enumerate() {
            sites.insert((key.0, key.1, key.2, t), r.clone());
        }
    }

    fn stream(
        &self,
        stream: Stream,
        tokens: &[u32],
        memory: Option<&[Vec<f64>]>,
        e: &Edits,
        sites: &mut HashMap<Key, Vec<f64>>,
    ) -> Vec<Vec<f64>> {
        let d = self.d;
        let (tag, n_layers, pos) = match stream {
            Stream::Enc => ("enc", self.layers_enc, "pos_enc"),
            Stream::Dec => ("dec", self.layers_dec, "pos_dec"),
        };
        let emb = self.w("tok_emb");
        let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
        self.hook(&mut h, (stream, SiteKind::Embed, 0), e, sites);
        let p = self.w(pos);
        for (t, row) in h.iter_mut().enumerate() {
            for c in 0..d {
                row[c] += p[t * d + c];
            }
        }
        for l in 0..n_layers {
            self.hook(&mut h, (stream, SiteKind::StateH, l), e, sites);
            let pre = format!("{tag}.{l}");
            let normed: Vec<Vec<f64>> = h.iter().map(|x| self.ln(x, &format!("{pre}.ln_attn"))).collect();
            let mut s = self.attention(&format!("{pre}.attn"), &normed, &normed, stream == Stream::Dec, &e.cuts, stream, AttentionKind::SelfAttn, l);
            self.hook(&mut s, (stream, SiteKind::SelfAttnS, l), e, sites);
            for t in 0..h.len() {
                for c in 0..d {
                    h[t][c] += s[t][c];
                }
            }
            if let Some(mem) = memory {
                let normed: Vec<Vec<f64>> = h.iter().map(|x| self.ln(x, &format!("{pre}.ln_cross"))).collect();
                let mut x = self.attention(&format!("{pre}.cross"), &normed, mem, false, &e.cuts, stream, AttentionKind::CrossAttn, l);
                self.hook(&mut x, (stream, SiteKind::CrossAttnC, l), e, sites);
                for t in 0..h.len() {
                    for c in 0..d {
                        h[t][c] += x[t][c];
                    }
                }
            }
            let d_ff = self.w(&format!("{pre}.mlp.b_in")).len();
            let mut f = Vec::with_capacity(h.len());
            for x in &h {
                let normed = self.ln(x, &format!("{pre}.ln_mlp"));
                let mut hidden = self.vecmat(&normed, &format!("{pre}.mlp.w_in"), d_ff);
                let b_in = self.w(&format!("{pre}.mlp.b_in"));
                for i in 0..d_ff {
                    hidden[i] = gelu(hidden[i] + b_in[i]);
                }
                let mut o = self.vecmat(&hidden, &format!("{pre}.mlp.w_out"), d);
                let b_out = self.w(&format!("{pre}.mlp.b_out"));
                for c in 0..d {
                    o[c] += b_out[c];
                }
                f.push(o);
            }
            self.hook(&mut f, (stream, SiteKind::MlpF, l), e, sites);
            for t in 0..h.len() {
                for c in 0..d {
                    h[t][c] += f[t][c];
                }
            }
        }
        self.hook(&mut h, (stream, SiteKind::StateH, n_layers), e, sites);
        h
    }

    pub fn run(&self, enc: Option<&[u32]>, dec: &[u32], e: &Edits) -> Pass {
        let mut sites = HashMap::new();
        let memory = enc.map(|toks| {
            let h = self.stream(Stream::Enc, toks, None, e, &mut sites);
            h.iter().map(|x| self.ln(x, "enc_final_ln")).collect::<Vec<_>>()
        });
        let h = self.stream(Stream::Dec, dec, memory.as_deref(), e, &mut sites);
        let dist = self.distribution(h.last().unwrap());
        Pass { dist, sites }
    }

    /// Softmax of `E · v`.
    pub fn distribution(&self, v: &[f64]) -> Vec<f64> {
        let emb = self.w("tok_emb");
        let mut logits = vec![0.0; self.vocab];
        for (tok, l) in logits.iter_mut().enumerate() {
            for c in 0..self.d {
                *l += emb[tok * self.d + c] * v[c];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter().map(|l| l / total).collect()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut m: f64 = 0.0;
    for i in 0..a.len() {
        m = m.max((a[i] - b[i]).abs());
    }
    m
}
