//! Identity battery that any backend must pass.

use std::fmt;

use crate::engine::Backend;
use crate::error::Result;
use crate::runtime::{
    Arch, AttentionKind, AttnBlock, HookSite, Hooks, Inputs, KnockoutMode, RunOutput, SiteKind, Stream, TokenId, BOS,
};

/// Distribution tolerance; covers the `f32` quantization of wire vectors.
pub const CONFORMANCE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {} ({})", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two short prompts that fit any vocabulary with at least 10 tokens.
fn probe_inputs(backend: &dyn Backend) -> (Inputs, Inputs) {
    let caps = backend.capabilities();
    let v = caps.vocab_size as TokenId;
    let t = |i: TokenId| 4 + (i % v.saturating_sub(4).max(1));
    match caps.arch {
        Arch::DecoderOnly => (
            Inputs::decoder(vec![BOS, t(0), t(1), t(2)]),
            Inputs::decoder(vec![BOS, t(3), t(4), t(5)]),
        ),
        Arch::EncoderDecoder => {
            let s = caps.sentinel_ids.first().copied().unwrap_or(t(6));
            (
                Inputs::encoder_decoder(vec![t(0), t(1), s, t(2)], vec![BOS, s]),
                Inputs::encoder_decoder(vec![t(3), t(4), s, t(5)], vec![BOS, s]),
            )
        }
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Runs every identity check; transport or backend failures fail that check only.
pub fn conformance_suite(backend: &dyn Backend) -> ConformanceReport {
    let (a, b) = probe_inputs(backend);
    let n_dec = backend.capabilities().n_layers_dec;
    let last = HookSite::dec(n_dec, SiteKind::StateH, -1);
    let plain = |x: &Inputs| -> Result<RunOutput> { backend.execute(x, &Hooks::default()) };
    let mut checks = Vec::new();

    checks.push(check("no_op_plan", || {
        let p = plain(&a)?;
        let again = plain(&a)?;
        let observed = backend.execute(&a, &Hooks::capture([last]))?;
        let d = max_abs_diff(&p.distribution, &observed.distribution).max(max_abs_diff(&p.distribution, &again.distribution));
        Ok((d <= CONFORMANCE_TOL && p.predicted_token == observed.predicted_token, format!("max diff {d:.2e}")))
    }));

    checks.push(check("self_replacement", || {
        let mid = HookSite::dec(n_dec / 2, SiteKind::StateH, -1);
        let cap = backend.execute(&a, &Hooks::capture([mid]))?;
        let v = cap.captures.first().map(|r| r.vector.clone()).unwrap_or_default();
        let hooks = Hooks { replacements: vec![(mid, v)], ..Hooks::default() };
        let out = backend.execute(&a, &hooks)?;
        let d = max_abs_diff(&cap.distribution, &out.distribution);
        Ok((d <= CONFORMANCE_TOL && cap.predicted_token == out.predicted_token, format!("max diff {d:.2e}")))
    }));

    checks.push(check("final_layer_patch", || {
        let donor = backend.execute(&b, &Hooks::capture([last]))?;
        let v = donor.captures.first().map(|r| r.vector.clone()).unwrap_or_default();
        let hooks = Hooks { replacements: vec![(last, v)], ..Hooks::default() };
        let out = backend.execute(&a, &hooks)?;
        let d = max_abs_diff(&donor.distribution, &out.distribution);
        Ok((
            out.predicted_token == donor.predicted_token && d <= CONFORMANCE_TOL,
            format!("patched {} donor {}", out.predicted_token, donor.predicted_token),
        ))
    }));

    checks.push(check("masked_knockout_no_op", || {
        // The first decoder position cannot see later keys, so blocking them changes nothing.
        let len = a.dec.len();
        let hooks = Hooks {
            blocks: vec![AttnBlock {
                stream: Stream::Dec,
                attention: AttentionKind::SelfAttn,
                layers: (0..n_dec).collect(),
                query: 0,
                keys: (1..len as i64).collect(),
                mode: KnockoutMode::NegInf,
            }],
            ..Hooks::default()
        };
        let p = plain(&a)?;
        let out = backend.execute(&a, &hooks)?;
        let d = max_abs_diff(&p.distribution, &out.distribution);
        Ok((d <= CONFORMANCE_TOL, format!("max diff {d:.2e}")))
    }));

    checks.push(check("bad_plan_rejected", || {
        let bad = Hooks::capture([HookSite::dec(n_dec + 5, SiteKind::StateH, 0)]);
        let rejected = backend.execute(&a, &bad).is_err();
        let survived = plain(&a).is_ok();
        Ok((rejected && survived, format!("rejected {rejected}, usable afterwards {survived}")))
    }));

    ConformanceReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NativeBackend;
    use crate::runtime::{Model, ModelConfig};

    #[test]
    fn native_passes() {
        let m = Model::init(ModelConfig::toy_decoder(2, 8, 2, 32, 5)).unwrap();
        let report = conformance_suite(&NativeBackend::from(m));
        assert!(report.all_passed(), "{report}");
        assert_eq!(report.checks.len(), 5);
    }

    #[test]
    fn native_encoder_decoder_passes() {
        let mut c = ModelConfig::toy_decoder(2, 8, 2, 32, 5);
        c.arch = Arch::EncoderDecoder;
        c.n_layers_enc = 2;
        c.sentinel_ids = vec![30, 31];
        let report = conformance_suite(&NativeBackend::from(Model::init(c).unwrap()));
        assert!(report.all_passed(), "{report}");
    }
}
