//! Engine results compared against the loop oracle. Each check returns the
//! largest absolute difference it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use recall_lab::causal::{TraceConfig, Tracer};
use recall_lab::engine::{resolve_window, Engine, Intervention, NativeBackend};
use recall_lab::harvest::MemorizedExample;
use recall_lab::patch::{patch_sweep, Channel, Condition, Label, PatchPair};
use recall_lab::runtime::{all_sites, Arch, AttentionKind, AttnBlock, HookSite, Hooks, Inputs, KnockoutMode, Model, SiteKind, Stream};
use recall_lab::seed;

use super::oracle::{max_abs_diff, Cut, Edits, Oracle};
use super::random_tokens;

fn inputs(model: &Model, rng: &mut ChaCha8Rng) -> Inputs {
    let dec_len = rng.random_range(2..7);
    let dec = random_tokens(rng, dec_len);
    match model.config.arch {
        Arch::DecoderOnly => Inputs::decoder(dec),
        Arch::EncoderDecoder => {
            let enc_len = rng.random_range(2..8);
            Inputs::encoder_decoder(random_tokens(rng, enc_len), dec)
        }
    }
}

fn oracle_run(o: &Oracle, i: &Inputs, e: &Edits) -> super::oracle::Pass {
    o.run(i.enc.as_deref(), &i.dec, e)
}

const KINDS: [SiteKind; 5] = [SiteKind::Embed, SiteKind::StateH, SiteKind::SelfAttnS, SiteKind::CrossAttnC, SiteKind::MlpF];

fn every_site(model: &Model, i: &Inputs) -> Vec<HookSite> {
    let mut sites = all_sites(&model.config, Stream::Dec, i.dec.len(), &KINDS);
    if let Some(enc) = &i.enc {
        sites.extend(all_sites(&model.config, Stream::Enc, enc.len(), &KINDS));
    }
    sites
}

/// Plain forward: distribution and every captured activation.
pub fn forward(model: &Model, cases: usize, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let i = inputs(model, &mut rng);
        let sites = every_site(model, &i);
        let out = model.forward(&i, &Hooks::capture(sites)).unwrap();
        let want = oracle_run(&o, &i, &Edits::default());
        worst = worst.max(max_abs_diff(&out.distribution, &want.dist));
        for r in &out.captures {
            let key = (r.site.stream, r.site.kind, r.site.layer, r.site.token as usize);
            worst = worst.max(max_abs_diff(&r.vector, &want.sites[&key]));
        }
    }
    worst
}

fn random_site(model: &Model, i: &Inputs, rng: &mut ChaCha8Rng) -> HookSite {
    let sites = every_site(model, i);
    sites[rng.random_range(0..sites.len())]
}

/// `replace` with random vectors at random sites.
pub fn replace(model: &Model, cases: usize, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let engine = Engine::new(NativeBackend::from(model.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let i = inputs(model, &mut rng);
        let site = random_site(model, &i, &mut rng);
        let v: Vec<f64> = (0..model.config.d_model).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = engine.run_with_plan(&i, &[Intervention::replace(site, v.clone())]).unwrap();
        let key = (site.stream, site.kind, site.layer, site.token as usize);
        let want = oracle_run(&o, &i, &Edits::default().replace(key, v));
        worst = worst.max(max_abs_diff(&out.distribution, &want.dist));
    }
    worst
}

/// `restore_from` a stored run of different inputs of the same shape.
pub fn restore(model: &Model, cases: usize, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let engine = Engine::new(NativeBackend::from(model.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let donor = inputs(model, &mut rng);
        let mut target = donor.clone();
        for t in target.dec.iter_mut() {
            *t = rng.random_range(4..30);
        }
        let site = random_site(model, &donor, &mut rng);
        let (id, _) = engine.run_and_store(&donor, &[Intervention::capture(site)]).unwrap();
        let out = engine.run_with_plan(&target, &[Intervention::restore(site, id)]).unwrap();
        engine.release(id);
        let key = (site.stream, site.kind, site.layer, site.token as usize);
        let donor_vec = oracle_run(&o, &donor, &Edits::default()).sites[&key].clone();
        let want = oracle_run(&o, &target, &Edits::default().replace(key, donor_vec));
        worst = worst.max(max_abs_diff(&out.distribution, &want.dist));
    }
    worst
}

/// `attn_block` of random key sets at random layers, both modes.
pub fn attn_block(model: &Model, cases: usize, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let engine = Engine::new(NativeBackend::from(model.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let mut worst: f64 = 0.0;
    let n_layers = model.config.n_layers_dec;
    for case in 0..cases {
        let i = inputs(model, &mut rng);
        let cross = i.enc.is_some() && rng.random_bool(0.5);
        let (attention, n_keys) = if cross { (AttentionKind::CrossAttn, i.enc.as_ref().unwrap().len()) } else { (AttentionKind::SelfAttn, i.dec.len()) };
        let query = i.dec.len() - 1;
        // Leave key 0 open so no row is fully blocked.
        let mut keys: Vec<usize> = (1..n_keys).filter(|_| rng.random_bool(0.6)).collect();
        if keys.is_empty() {
            keys.push(n_keys - 1);
        }
        let mut layers: Vec<usize> = (0..n_layers).filter(|_| rng.random_bool(0.7)).collect();
        if layers.is_empty() {
            layers.push(rng.random_range(0..n_layers));
        }
        let mode = if case % 2 == 0 { KnockoutMode::NegInf } else { KnockoutMode::ZeroNoRenorm };
        let block = AttnBlock {
            stream: Stream::Dec,
            attention,
            layers: layers.clone(),
            query: query as i64,
            keys: keys.iter().map(|&k| k as i64).collect(),
            mode,
        };
        let out = engine.run_with_plan(&i, &[Intervention::AttnBlock(block)]).unwrap();
        let mut e = Edits::default();
        for &layer in &layers {
            for &key in &keys {
                e = e.cut(Cut { stream: Stream::Dec, attention, layer, query, key, mode });
            }
        }
        worst = worst.max(max_abs_diff(&out.distribution, &oracle_run(&o, &i, &e).dist));
    }
    worst
}

/// One-sample traced IE for every state and sublayer cell of a decoder-only example.
pub fn traced_ie(model: &Model, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let engine = Engine::new(NativeBackend::from(model.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let dec = random_tokens(&mut rng, 6);
    let ex = super::synthetic_example("ex", dec.clone(), (1, 3));
    let (sigma, mult, window) = (0.7, 3.0, 2);
    let cfg = TraceConfig { noise_multiplier: mult, n_samples: 1, window: Some(window), seed: seed_value, ..TraceConfig::default() };
    let tracer = Tracer::new(&engine, &ex, sigma, &cfg).unwrap();

    let clean = o.run(None, &dec, &Edits::default());
    let target = clean.argmax() as usize;
    let normal = Normal::new(0.0, mult * sigma).unwrap();
    let mut noise_rng = seed::rng(seed_value, &["noise", "ex", "0"]);
    let mut corrupt = Edits::default();
    for t in 1..=3 {
        let key = (Stream::Dec, SiteKind::Embed, 0, t);
        let v: Vec<f64> = clean.sites[&key].iter().map(|x| x + normal.sample(&mut noise_rng)).collect();
        corrupt = corrupt.replace(key, v);
    }
    let p_corrupt = o.run(None, &dec, &corrupt).dist[target];
    let mut worst = (tracer.p_corrupt[0] - p_corrupt).abs();

    let n_layers = model.config.n_layers_dec;
    for t in 0..dec.len() {
        for l in 0..=n_layers {
            let site = HookSite::dec(l, SiteKind::StateH, t as i64);
            let key = (Stream::Dec, SiteKind::StateH, l, t);
            let e = corrupt.clone().replace(key, clean.sites[&key].clone());
            let want = o.run(None, &dec, &e).dist[target] - p_corrupt;
            worst = worst.max((tracer.traced_ie(site, window).unwrap() - want).abs());
        }
        for kind in [SiteKind::MlpF, SiteKind::SelfAttnS] {
            for l in 0..n_layers {
                let site = HookSite::dec(l, kind, t as i64);
                let mut e = corrupt.clone();
                for wl in resolve_window(l, window, n_layers).layers {
                    let key = (Stream::Dec, kind, wl, t);
                    e = e.replace(key, clean.sites[&key].clone());
                }
                let want = o.run(None, &dec, &e).dist[target] - p_corrupt;
                worst = worst.max((tracer.traced_ie(site, window).unwrap() - want).abs());
            }
        }
    }
    worst
}

fn pair(patch: MemorizedExample, context: MemorizedExample, vocab: usize) -> PatchPair {
    let half = (vocab / 2) as u32;
    let ch = |label, toks: std::ops::Range<u32>| Channel { label, first_tokens: toks.collect(), enabled: true };
    PatchPair {
        id: format!("{}|{}", patch.id, context.id),
        condition: Condition::SameLangDiffRelDiffSubj,
        patch,
        context,
        channels: vec![ch(Label::ContextObj, 0..half), ch(Label::PatchObj, half..vocab as u32)],
    }
}

/// Layer-by-layer patched distributions and relative differences.
pub fn patch(model: &Model, cases: usize, seed_value: u64) -> f64 {
    let o = Oracle::new(model);
    let engine = Engine::new(NativeBackend::from(model.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let vocab = model.config.vocab_size;
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let p_len = rng.random_range(2..7);
        let c_len = rng.random_range(2..7);
        let p = super::synthetic_example(&format!("p{c}"), random_tokens(&mut rng, p_len), (1, 1));
        let x = super::synthetic_example(&format!("c{c}"), random_tokens(&mut rng, c_len), (1, 1));
        let pr = pair(p.clone(), x.clone(), vocab);
        let got = patch_sweep(&engine, &pr).unwrap();
        let patch_pass = o.run(None, &p.dec_ids, &Edits::default());
        let ctx_pass = o.run(None, &x.dec_ids, &Edits::default());
        let sum = |d: &[f64], r: std::ops::Range<usize>| r.map(|t| d[t]).sum::<f64>();
        let (lo, hi) = (0..vocab / 2, vocab / 2..vocab);
        for l in 0..=model.config.n_layers_dec {
            let key = (Stream::Dec, SiteKind::StateH, l, x.dec_ids.len() - 1);
            let donor = patch_pass.sites[&(Stream::Dec, SiteKind::StateH, l, p.dec_ids.len() - 1)].clone();
            let want = o.run(None, &x.dec_ids, &Edits::default().replace(key, donor));
            let layer = &got.layers[l];
            let want_ctx = sum(&want.dist, lo.clone());
            let want_pat = sum(&want.dist, hi.clone());
            worst = worst.max((layer.prob(Label::ContextObj).unwrap() - want_ctx).abs());
            worst = worst.max((layer.prob(Label::PatchObj).unwrap() - want_pat).abs());
            let rel_ctx = (want_ctx - sum(&ctx_pass.dist, lo.clone())) / sum(&ctx_pass.dist, lo.clone());
            let rel_pat = (want_pat - sum(&patch_pass.dist, hi.clone())) / sum(&patch_pass.dist, hi.clone());
            worst = worst.max((layer.rel_ctx.unwrap() - rel_ctx).abs());
            worst = worst.max((layer.rel_patch.unwrap() - rel_pat).abs());
            if layer.predicted != want.argmax() {
                return f64::INFINITY;
            }
        }
    }
    worst
}
