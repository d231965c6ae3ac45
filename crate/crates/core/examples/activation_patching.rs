//! Last-token activation patching between prompts, classified by which object the model then predicts.
//!
//!     cargo run --release --example activation_patching

mod support;

use recall_lab::engine::Engine;
use recall_lab::patch::{build_pairs, condition_report, patch_all, sample_pairs, Condition};
use recall_lab::runtime::Arch;

fn main() {
    let lab = support::trained(Arch::DecoderOnly, 1);
    let engine = Engine::new(lab.backend());
    for (condition, p, c) in [
        (Condition::SameLangDiffRelDiffSubj, "xa", "xa"),
        (Condition::DiffLangSameRelDiffSubj, "xa", "yb"),
        (Condition::DiffLangDiffRelSameSubj, "xa", "yb"),
    ] {
        let pairs = sample_pairs(build_pairs(&lab.corpus, &lab.vocab, &lab.harvests, condition, p, c), 100, 1);
        let report = condition_report(&patch_all(&engine, &pairs).unwrap());
        println!("condition {} ({} pairs)", condition.number(), report.n_pairs);
        for l in &report.layers {
            let modal = l.modal().map_or("-".to_string(), |m| m.to_string());
            println!("  layer {}  modal {:<20} rel ctx {:+.3}  rel patch {:+.3}", l.layer, modal, l.mean_rel_ctx, l.mean_rel_patch);
        }
        for row in report.proportions.iter().filter(|r| r.count > 0) {
            println!("  {:<20} {} of {} enabled", row.label.to_string(), row.count, row.enabled);
        }
    }
}
