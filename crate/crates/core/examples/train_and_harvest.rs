//! Trains a toy model on the synthetic corpus and harvests the facts it recalls.
//!
//!     cargo run --release --example train_and_harvest -- [decoder-only|encoder-decoder]

mod support;

use recall_lab::runtime::Arch;

fn main() {
    let arch = match std::env::args().nth(1).as_deref() {
        Some("encoder-decoder") => Arch::EncoderDecoder,
        _ => Arch::DecoderOnly,
    };
    let lab = support::trained(arch, 1);
    for (lang, examples) in &lab.harvests {
        println!("{lang}: {} memorized examples", examples.len());
        for ex in examples.iter().take(2) {
            let tokens = lab.vocab.detokenize(&ex.dec_ids);
            println!("  {} subject span {:?} -> {:?}", tokens, ex.subject_span, lab.vocab.token(ex.object_token));
        }
    }
}
