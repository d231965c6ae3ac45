//! Attention knockout: block the last token from the subject, the rest of the prompt, or itself.
//!
//!     cargo run --release --example attention_knockout

mod support;

use recall_lab::engine::Engine;
use recall_lab::knockout::{knockout_curve, Partition};
use recall_lab::runtime::{Arch, KnockoutMode};

fn main() {
    let lab = support::trained(Arch::DecoderOnly, 1);
    let engine = Engine::new(lab.backend());
    let examples = lab.examples();
    for partition in Partition::for_arch(Arch::DecoderOnly) {
        let curve = knockout_curve(&engine, &examples, partition, Some(2), KnockoutMode::NegInf).unwrap();
        let points: Vec<String> = curve.points.iter().map(|p| format!("{:+.3}", p.mean_rel_diff)).collect();
        println!("{partition:<12} {}", points.join("  "));
    }
}
