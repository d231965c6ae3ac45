//! Declarative intervention layer over any [`Backend`].
//!
//! Plans are lists of [`Intervention`]s. The [`Engine`] validates a plan
//! against the backend's [`Capabilities`], swaps every `restore_from` for a
//! replacement taken from an immutable stored run, and hands the resolved
//! hooks to the backend for a single forward pass.

mod backend;
pub mod conformance;
mod intervention;
pub mod wire;
mod window;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

pub use backend::{Backend, Capabilities, NativeBackend};
pub use intervention::{f32_base64, ActionKind, Intervention, Plan, RunId};
pub use window::{default_knockout_window, default_trace_window, resolve_window, LayerWindow};

use crate::error::{Error, Result};
use crate::runtime::{HookSite, Hooks, Inputs, RunOutput};

/// One plan violation. `index` points into the plan when the problem is local to an entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub index: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn at(index: usize, message: impl Into<String>) -> Self {
        Self { index: Some(index), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "#{i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Structural plan validation. Reports every violation, not just the first.
pub fn validate_plan(caps: &Capabilities, plan: &[Intervention]) -> std::result::Result<(), Vec<Diagnostic>> {
    let topo = caps.topology();
    let mut diags = Vec::new();
    let mut written: HashMap<HookSite, usize> = HashMap::new();
    for (i, iv) in plan.iter().enumerate() {
        if !caps.supports(iv.action()) {
            diags.push(Diagnostic::at(i, format!("backend does not support {:?}", iv.action())));
        }
        if let Some(site) = iv.site() {
            if let Err(e) = site.check(&topo) {
                diags.push(Diagnostic::at(i, format!("{site}: {e}")));
            }
        }
        match iv {
            Intervention::Replace { site, vector } => {
                if vector.len() != caps.d_model {
                    diags.push(Diagnostic::at(
                        i,
                        format!("{site}: vector length {} != d_model {}", vector.len(), caps.d_model),
                    ));
                }
                if !vector.iter().all(|x| x.is_finite()) {
                    diags.push(Diagnostic::at(i, format!("{site}: vector is not finite")));
                }
            }
            Intervention::AttnBlock(b) => {
                if let Err(e) = b.check(&topo) {
                    diags.push(Diagnostic::at(i, e));
                }
                if !caps.knockout_modes.contains(&b.mode) {
                    diags.push(Diagnostic::at(i, format!("knockout mode {:?} unsupported", b.mode)));
                }
            }
            _ => {}
        }
        if let Intervention::Replace { site, .. } | Intervention::RestoreFrom { site, .. } = iv {
            if let Some(prev) = written.insert(*site, i) {
                diags.push(Diagnostic::at(i, format!("{site} already written by #{prev}")));
            }
        }
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(diags)
    }
}

/// Inputs and output of a completed run, kept for later restoration.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRun {
    pub inputs: Inputs,
    pub output: RunOutput,
}

impl StoredRun {
    /// Captured vector at `site`, with negative tokens resolved against this run's inputs.
    pub fn vector(&self, site: &HookSite) -> Option<&[f64]> {
        let abs = site.absolute(self.inputs.len(site.stream)).ok()?;
        self.output.capture(&abs)
    }
}

/// Plan executor with a store of immutable reference runs.
pub struct Engine<B> {
    backend: B,
    runs: RwLock<HashMap<RunId, Arc<StoredRun>>>,
    next_id: AtomicU64,
}

impl<B: Backend> Engine<B> {
    pub fn new(backend: B) -> Self {
        Self { backend, runs: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn capabilities(&self) -> &Capabilities {
        self.backend.capabilities()
    }

    /// Structural validation plus existence of every referenced run and capture.
    pub fn validate(&self, plan: &[Intervention]) -> std::result::Result<(), Vec<Diagnostic>> {
        let mut diags = validate_plan(self.capabilities(), plan).err().unwrap_or_default();
        let runs = self.runs.read().expect("run store poisoned");
        for (i, iv) in plan.iter().enumerate() {
            if let Intervention::RestoreFrom { site, run_id } = iv {
                match runs.get(run_id) {
                    None => diags.push(Diagnostic::at(i, format!("unknown or stale run id {run_id}"))),
                    Some(r) if r.vector(site).is_none() => {
                        diags.push(Diagnostic::at(i, format!("run {run_id} did not capture {site}")))
                    }
                    _ => {}
                }
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(diags)
        }
    }

    /// Turns a validated plan into backend hooks.
    pub fn compile(&self, plan: &[Intervention]) -> Result<Hooks> {
        self.validate(plan).map_err(Error::Plan)?;
        let runs = self.runs.read().expect("run store poisoned");
        let mut hooks = Hooks::default();
        for iv in plan {
            match iv {
                Intervention::Capture { site } => hooks.captures.push(*site),
                Intervention::Replace { site, vector } => hooks.replacements.push((*site, vector.clone())),
                Intervention::RestoreFrom { site, run_id } => {
                    let v = runs[run_id].vector(site).expect("checked by validate");
                    hooks.replacements.push((*site, v.to_vec()));
                }
                Intervention::AttnBlock(b) => hooks.blocks.push(b.clone()),
            }
        }
        Ok(hooks)
    }

    pub fn run_with_plan(&self, inputs: &Inputs, plan: &[Intervention]) -> Result<RunOutput> {
        let hooks = self.compile(plan)?;
        self.backend.execute(inputs, &hooks)
    }

    /// Runs the plan and keeps the result for later `restore_from`.
    pub fn run_and_store(&self, inputs: &Inputs, plan: &[Intervention]) -> Result<(RunId, Arc<StoredRun>)> {
        let output = self.run_with_plan(inputs, plan)?;
        let id = self.store(inputs.clone(), output);
        Ok((id, self.get(id).expect("just stored")))
    }

    pub fn store(&self, inputs: Inputs, output: RunOutput) -> RunId {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let run = Arc::new(StoredRun { inputs, output });
        self.runs.write().expect("run store poisoned").insert(id, run);
        id
    }

    pub fn get(&self, id: RunId) -> Option<Arc<StoredRun>> {
        self.runs.read().expect("run store poisoned").get(&id).cloned()
    }

    /// Drops a stored run; later references to it are stale.
    pub fn release(&self, id: RunId) {
        self.runs.write().expect("run store poisoned").remove(&id);
    }

    /// Number of distinct sites written by a plan.
    pub fn written_sites(plan: &[Intervention]) -> usize {
        plan.iter()
            .filter_map(|iv| match iv {
                Intervention::Replace { site, .. } | Intervention::RestoreFrom { site, .. } => Some(*site),
                _ => None,
            })
            .collect::<HashSet<_>>()
            .len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{AttentionKind, AttnBlock, KnockoutMode, Model, ModelConfig, SiteKind, Stream};

    fn engine() -> Engine<NativeBackend> {
        Engine::new(NativeBackend::from(Model::init(ModelConfig::toy_decoder(2, 8, 2, 32, 42)).unwrap()))
    }

    #[test]
    fn empty_plan_equals_plain_forward() {
        let e = engine();
        let inputs = Inputs::decoder(vec![1, 5, 9, 4]);
        let plain = e.backend().model().forward(&inputs, &Hooks::default()).unwrap();
        assert_eq!(e.run_with_plan(&inputs, &[]).unwrap(), plain);
    }

    #[test]
    fn self_replacement_is_identity() {
        let e = engine();
        let inputs = Inputs::decoder(vec![1, 5, 9, 4]);
        let site = HookSite::dec(2, SiteKind::StateH, -1);
        let (id, run) = e.run_and_store(&inputs, &[Intervention::capture(site)]).unwrap();
        let replaced = e
            .run_with_plan(&inputs, &[Intervention::replace(site, run.output.captures[0].vector.clone())])
            .unwrap();
        assert_eq!(replaced.distribution, run.output.distribution);
        let restored = e.run_with_plan(&inputs, &[Intervention::restore(site, id)]).unwrap();
        assert_eq!(restored.distribution, run.output.distribution);
    }

    #[test]
    fn stale_run_is_reported() {
        let e = engine();
        let site = HookSite::dec(1, SiteKind::StateH, 0);
        let inputs = Inputs::decoder(vec![1, 5]);
        let (id, _) = e.run_and_store(&inputs, &[Intervention::capture(site)]).unwrap();
        e.release(id);
        let err = e.run_with_plan(&inputs, &[Intervention::restore(site, id)]).unwrap_err();
        assert!(matches!(err, Error::Plan(_)), "{err}");
        let (id, _) = e.run_and_store(&inputs, &[]).unwrap();
        let diags = e.validate(&[Intervention::restore(site, id)]).unwrap_err();
        assert!(diags[0].message.contains("did not capture"));
    }

    #[test]
    fn validation_reports_every_problem() {
        let e = engine();
        let plan = vec![
            Intervention::capture(HookSite::dec(0, SiteKind::CrossAttnC, 0)),
            Intervention::replace(HookSite::dec(0, SiteKind::StateH, 0), vec![0.0; 3]),
            Intervention::replace(HookSite::dec(1, SiteKind::MlpF, 0), vec![0.0; 8]),
            Intervention::replace(HookSite::dec(1, SiteKind::MlpF, 0), vec![1.0; 8]),
            Intervention::AttnBlock(AttnBlock {
                stream: Stream::Dec,
                attention: AttentionKind::SelfAttn,
                layers: vec![5],
                query: -1,
                keys: vec![],
                mode: KnockoutMode::NegInf,
            }),
        ];
        let diags = e.validate(&plan).unwrap_err();
        let idx: Vec<_> = diags.iter().map(|d| d.index.unwrap()).collect();
        assert_eq!(idx, vec![0, 1, 3, 4]);
    }

    #[test]
    fn window_plan_is_valid() {
        let e = engine();
        let inputs = Inputs::decoder(vec![1, 5, 9]);
        let win = resolve_window(1, 10, 2);
        let sites: Vec<_> = win.layers.iter().map(|&l| HookSite::dec(l, SiteKind::MlpF, 1)).collect();
        let (id, _) = e
            .run_and_store(&inputs, &sites.iter().map(|s| Intervention::capture(*s)).collect::<Vec<_>>())
            .unwrap();
        let plan: Vec<_> = sites.iter().map(|s| Intervention::restore(*s, id)).collect();
        assert!(e.validate(&plan).is_ok());
        assert_eq!(Engine::<NativeBackend>::written_sites(&plan), 2);
    }
}
