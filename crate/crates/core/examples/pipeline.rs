//! Runs every stage from a JSON config, resuming any stage that already completed.
//!
//!     cargo run --release --example pipeline -- configs/desk.json [out_dir]

use std::path::PathBuf;

use recall_lab::report::{run_pipeline, PipelineConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "configs/desk.json".into());
    let mut cfg = PipelineConfig::load(path.as_ref()).unwrap();
    if let Some(out) = args.next() {
        cfg.out_dir = PathBuf::from(out);
    }
    let outcome = run_pipeline(&cfg).unwrap();
    println!("memorization {:.3}", outcome.train.memorization_rate);
    for h in &outcome.harvest {
        println!("{}: recovered {} of {} memorized", h.language, h.memorized_harvested, h.memorized);
    }
    for (settings, report) in &outcome.patch {
        println!("condition {}: cross-before-patch ordering {}", settings.condition, report.cross_before_patch());
    }
    for m in &outcome.manifests {
        let state = if outcome.resumed.contains(&m.dir) { "resumed" } else { "ran" };
        println!("{state:<8} {}", m.dir);
    }
}
