//! Causal tracing: corrupt the subject, restore one clean activation, measure what comes back.
//!
//! The subject's token embeddings get iid Gaussian noise of std
//! `noise_multiplier * sigma`. A restoration copies clean activations into the
//! corrupted run (one `state_h` site, or a window of sublayer outputs at one
//! token) and the indirect effect is `P_restored - P_corrupt` for the clean
//! prediction, averaged over noise samples.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{default_trace_window, resolve_window, Backend, Engine, Intervention, RunId};
use crate::error::{Error, Result};
use crate::harvest::MemorizedExample;
use crate::runtime::{Arch, HookSite, SiteKind, Stream, TokenId};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub noise_multiplier: f64,
    pub n_samples: usize,
    /// Sublayer window; `None` picks the architecture default.
    pub window: Option<usize>,
    pub kinds: Vec<SiteKind>,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            noise_multiplier: 3.0,
            n_samples: 10,
            window: None,
            kinds: vec![SiteKind::StateH, SiteKind::MlpF, SiteKind::SelfAttnS],
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn window_for(&self, arch: Arch) -> usize {
        self.window.unwrap_or_else(|| default_trace_window(arch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub stream: Stream,
    pub token_idx: usize,
    pub token_role: String,
    pub layer: usize,
    pub kind: SiteKind,
    pub ie_mean: f64,
    /// Per noise sample, `P_restored - P_corrupt`.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub example_id: String,
    pub traced_token: TokenId,
    pub p_clean: f64,
    /// Mean over noise samples.
    pub p_corrupt: f64,
    pub cells: Vec<TraceCell>,
}

/// Population standard deviation of every component of every subject-token embedding.
pub fn compute_sigma(backend: &dyn Backend, examples: &[MemorizedExample]) -> Result<f64> {
    let mut values = Vec::new();
    for ex in examples {
        let sites: Vec<HookSite> = ex
            .subject_tokens()
            .map(|t| HookSite::new(ex.subject_stream(), 0, SiteKind::Embed, t as i64))
            .collect();
        let out = backend.execute(&ex.inputs(), &crate::runtime::Hooks::capture(sites))?;
        for r in out.captures {
            values.extend(r.vector);
        }
    }
    if values.is_empty() {
        return Err(Error::Trace("no subject tokens to estimate sigma from".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Role of input position `t` relative to the subject span and the end of the sequence.
pub fn token_role(t: usize, span: (usize, usize), len: usize, stream: Stream, sentinel_at: Option<usize>) -> &'static str {
    if Some(t) == sentinel_at {
        "sentinel"
    } else if t < span.0 {
        "prefix"
    } else if t == span.1 {
        "subject_last"
    } else if t == span.0 {
        "subject_first"
    } else if t < span.1 {
        "subject_middle"
    } else if stream == Stream::Dec && t + 1 == len {
        "last"
    } else if t == span.1 + 1 {
        "subsequent"
    } else {
        "further"
    }
}

/// One example under corruption, with its clean run stored for restoration.
pub struct Tracer<'e, B: Backend> {
    engine: &'e Engine<B>,
    example: &'e MemorizedExample,
    clean: RunId,
    noise: Vec<Vec<Intervention>>,
    pub p_clean: f64,
    /// `P_corrupt` per noise sample.
    pub p_corrupt: Vec<f64>,
    pub traced_token: TokenId,
}

impl<B: Backend> Drop for Tracer<'_, B> {
    fn drop(&mut self) {
        self.engine.release(self.clean);
    }
}

impl<'e, B: Backend> Tracer<'e, B> {
    /// Runs the clean pass (capturing every site a restoration may need) and the corrupted passes.
    pub fn new(engine: &'e Engine<B>, example: &'e MemorizedExample, sigma: f64, cfg: &TraceConfig) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Guard(format!("sigma must be positive, got {sigma}")));
        }
        if cfg.n_samples == 0 {
            return Err(Error::Trace("n_samples must be at least 1".into()));
        }
        if !(cfg.noise_multiplier.is_finite() && cfg.noise_multiplier >= 0.0) {
            return Err(Error::Trace(format!("noise multiplier {} is invalid", cfg.noise_multiplier)));
        }
        let caps = engine.capabilities();
        let inputs = example.inputs();
        let stream = example.subject_stream();
        let len = inputs.len(stream);
        if example.subject_span.0 > example.subject_span.1 || example.subject_span.1 >= len {
            return Err(Error::Span(format!("span {:?} outside input of length {len}", example.subject_span)));
        }
        let n_layers = caps.topology().n_layers(stream);
        let mut captures: Vec<Intervention> = Vec::new();
        for t in 0..len as i64 {
            captures.push(Intervention::capture(HookSite::new(stream, 0, SiteKind::Embed, t)));
            for l in 0..=n_layers {
                captures.push(Intervention::capture(HookSite::new(stream, l, SiteKind::StateH, t)));
            }
            for l in 0..n_layers {
                captures.push(Intervention::capture(HookSite::new(stream, l, SiteKind::MlpF, t)));
                captures.push(Intervention::capture(HookSite::new(stream, l, SiteKind::SelfAttnS, t)));
            }
        }
        if caps.arch == Arch::EncoderDecoder {
            for l in 0..caps.n_layers_dec {
                captures.push(Intervention::capture(HookSite::dec(l, SiteKind::CrossAttnC, -1)));
            }
            for l in 0..=caps.n_layers_dec {
                captures.push(Intervention::capture(HookSite::dec(l, SiteKind::StateH, -1)));
            }
        }
        let (clean, run) = engine.run_and_store(&inputs, &captures)?;
        let traced_token = run.output.predicted_token;
        let p_clean = run.output.prob(traced_token);

        let normal = Normal::new(0.0, cfg.noise_multiplier * sigma).map_err(|e| Error::Trace(e.to_string()))?;
        let mut noise = Vec::with_capacity(cfg.n_samples);
        let mut p_corrupt = Vec::with_capacity(cfg.n_samples);
        for rep in 0..cfg.n_samples {
            let mut rng = seed::rng(cfg.seed, &["noise", &example.id, &rep.to_string()]);
            let plan: Vec<Intervention> = example
                .subject_tokens()
                .map(|t| {
                    let site = HookSite::new(stream, 0, SiteKind::Embed, t as i64);
                    let clean_vec = run.vector(&site).expect("embed captured");
                    let v = clean_vec.iter().map(|x| x + normal.sample(&mut rng)).collect();
                    Intervention::replace(site, v)
                })
                .collect();
            let out = engine.run_with_plan(&inputs, &plan)?;
            p_corrupt.push(out.prob(traced_token));
            noise.push(plan);
        }
        Ok(Self { engine, example, clean, noise, p_clean, p_corrupt, traced_token })
    }

    pub fn mean_p_corrupt(&self) -> f64 {
        mean(&self.p_corrupt)
    }

    /// `P_restored - P_corrupt` per sample when all `sites` are restored from the clean run.
    pub fn restore(&self, sites: &[HookSite]) -> Result<Vec<f64>> {
        let inputs = self.example.inputs();
        let mut out = Vec::with_capacity(self.noise.len());
        for (rep, plan) in self.noise.iter().enumerate() {
            let mut plan = plan.clone();
            plan.extend(sites.iter().map(|s| Intervention::restore(*s, self.clean)));
            let run = self.engine.run_with_plan(&inputs, &plan)?;
            out.push(run.prob(self.traced_token) - self.p_corrupt[rep]);
        }
        Ok(out)
    }

    /// Sites restored for one grid cell: the state itself, or the sublayer window at that token.
    pub fn cell_sites(&self, site: HookSite, window: usize) -> Result<Vec<HookSite>> {
        let topo = self.engine.capabilities().topology();
        if site.kind == SiteKind::CrossAttnC && !topo.is_encoder_decoder() {
            return Err(Error::Capability("cross_attn_c needs an encoder-decoder model".into()));
        }
        site.check(&topo).map_err(|reason| Error::Addressing { site: site.to_string(), reason })?;
        match site.kind {
            SiteKind::StateH => Ok(vec![site]),
            k if k.is_sublayer() => {
                let w = resolve_window(site.layer, window, topo.n_layers(site.stream));
                Ok(w.layers.iter().map(|&l| HookSite { layer: l, ..site }).collect())
            }
            k => Err(Error::Trace(format!("{k} sites are not traced"))),
        }
    }

    /// Mean indirect effect of restoring one cell.
    pub fn traced_ie(&self, site: HookSite, window: usize) -> Result<f64> {
        Ok(mean(&self.restore(&self.cell_sites(site, window)?)?))
    }
}

/// Sum in index order divided by length.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Full grid for one example.
pub fn trace_example<B: Backend>(engine: &Engine<B>, ex: &MemorizedExample, sigma: f64, cfg: &TraceConfig) -> Result<TraceGrid> {
    let caps = engine.capabilities().clone();
    let window = cfg.window_for(caps.arch);
    let tracer = Tracer::new(engine, ex, sigma, cfg)?;
    let stream = ex.subject_stream();
    let len = ex.inputs().len(stream);
    let sentinel_at = match (&ex.enc_ids, ex.sentinel) {
        (Some(enc), Some(s)) => enc.iter().position(|&t| t == s),
        _ => None,
    };
    let n_layers = caps.topology().n_layers(stream);
    let mut cells = Vec::new();
    for &kind in &cfg.kinds {
        if kind == SiteKind::CrossAttnC {
            if caps.arch != Arch::EncoderDecoder {
                return Err(Error::Capability("cross_attn_c needs an encoder-decoder model".into()));
            }
            let last = ex.last();
            for l in 0..caps.n_layers_dec {
                let site = HookSite::dec(l, kind, last as i64);
                let samples = tracer.restore(&tracer.cell_sites(site, window)?)?;
                cells.push(TraceCell {
                    stream: Stream::Dec,
                    token_idx: last,
                    token_role: "dec_last".into(),
                    layer: l,
                    kind,
                    ie_mean: mean(&samples),
                    samples,
                });
            }
            continue;
        }
        let layers = if kind == SiteKind::StateH { 0..n_layers + 1 } else { 0..n_layers };
        for t in 0..len {
            for l in layers.clone() {
                let site = HookSite::new(stream, l, kind, t as i64);
                let samples = tracer.restore(&tracer.cell_sites(site, window)?)?;
                cells.push(TraceCell {
                    stream,
                    token_idx: t,
                    token_role: token_role(t, ex.subject_span, len, stream, sentinel_at).into(),
                    layer: l,
                    kind,
                    ie_mean: mean(&samples),
                    samples,
                });
            }
        }
    }
    Ok(TraceGrid {
        example_id: ex.id.clone(),
        traced_token: tracer.traced_token,
        p_clean: tracer.p_clean,
        p_corrupt: tracer.mean_p_corrupt(),
        cells,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TraceReport {
    pub sigma: f64,
    pub grids: Vec<TraceGrid>,
    /// Examples that failed, with the reason; the report is partial when nonempty.
    pub failures: Vec<(String, String)>,
}

/// Traces every example; failures are recorded and the rest continue.
pub fn trace_grid<B: Backend>(engine: &Engine<B>, examples: &[MemorizedExample], cfg: &TraceConfig) -> Result<TraceReport> {
    let sigma = compute_sigma(engine.backend(), examples)?;
    let results: Vec<_> = examples.par_iter().map(|ex| (ex.id.clone(), trace_example(engine, ex, sigma, cfg))).collect();
    let mut report = TraceReport { sigma, ..TraceReport::default() };
    for (id, r) in results {
        match r {
            Ok(g) => report.grids.push(g),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleMean {
    pub token_role: String,
    pub layer: usize,
    pub kind: SiteKind,
    pub ie_mean: f64,
    pub n: usize,
}

/// Dataset-mean grid keyed by (role, layer, kind).
pub fn mean_by_role(grids: &[TraceGrid]) -> Vec<RoleMean> {
    let mut acc: BTreeMap<(SiteKind, String, usize), Vec<f64>> = BTreeMap::new();
    for g in grids {
        for c in &g.cells {
            acc.entry((c.kind, c.token_role.clone(), c.layer)).or_default().push(c.ie_mean);
        }
    }
    acc.into_iter()
        .map(|((kind, token_role, layer), v)| RoleMean { token_role, layer, kind, ie_mean: mean(&v), n: v.len() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles() {
        let span = (2, 4);
        let r: Vec<_> = (0..8).map(|t| token_role(t, span, 8, Stream::Dec, None)).collect();
        assert_eq!(
            r,
            ["prefix", "prefix", "subject_first", "subject_middle", "subject_last", "subsequent", "further", "last"]
        );
        assert_eq!(token_role(1, (1, 1), 3, Stream::Dec, None), "subject_last");
        assert_eq!(token_role(2, (0, 0), 3, Stream::Enc, Some(2)), "sentinel");
    }

    #[test]
    fn mean_is_index_order_sum() {
        assert_eq!(mean(&[0.1, 0.2, 0.3]), (0.1 + 0.2 + 0.3) / 3.0);
    }
}
