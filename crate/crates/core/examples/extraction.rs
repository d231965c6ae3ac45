//! Where the object first becomes readable: project each sublayer output onto the vocabulary.
//!
//!     cargo run --release --example extraction

mod support;

use recall_lab::extraction::extraction_profile;
use recall_lab::runtime::Arch;

fn main() {
    let lab = support::trained(Arch::DecoderOnly, 1);
    let profile = extraction_profile(&lab.backend(), &lab.examples()).unwrap();
    println!("{} examples, final-state rate {:.3}", profile.n_examples, profile.final_state_rate);
    for r in &profile.rows {
        println!(
            "layer {} {:<12} rate {:.3}  (mlp events with/without attention event: {}/{})",
            r.layer, r.kind.to_string(), r.rate, r.mlp_with_attn, r.mlp_without_attn
        );
    }
}
