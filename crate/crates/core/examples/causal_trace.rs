//! Causal tracing: corrupt the subject embeddings and restore one state or sublayer window at a time.
//!
//!     cargo run --release --example causal_trace

mod support;

use recall_lab::causal::{mean_by_role, trace_grid, TraceConfig};
use recall_lab::engine::Engine;
use recall_lab::runtime::{Arch, SiteKind};

fn main() {
    let lab = support::trained(Arch::DecoderOnly, 1);
    let engine = Engine::new(lab.backend());
    let examples: Vec<_> = lab.examples().into_iter().take(12).collect();
    let report = trace_grid(&engine, &examples, &TraceConfig::default()).unwrap();
    println!("sigma {:.4}, {} grids, {} failures", report.sigma, report.grids.len(), report.failures.len());
    for kind in [SiteKind::StateH, SiteKind::MlpF, SiteKind::SelfAttnS] {
        println!("{kind}");
        for m in mean_by_role(&report.grids).iter().filter(|m| m.kind == kind) {
            println!("  {:<14} layer {}  {:+.4}", m.token_role, m.layer, m.ie_mean);
        }
    }
}
