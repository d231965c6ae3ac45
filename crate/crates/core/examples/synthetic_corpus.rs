//! Generates a two-language synthetic fact corpus and shows a few rendered queries.
//!
//!     cargo run --example synthetic_corpus -- [out_dir]

use recall_lab::corpus::{build_vocab, filter_trivial, gen_synthetic, PseudoLanguage, SynthSpec, WordOrder};

fn main() {
    let langs = vec![PseudoLanguage::new("xa", WordOrder::Svo), PseudoLanguage::new("yb", WordOrder::Sov).with_article("ne")];
    let corpus = filter_trivial(&gen_synthetic(&SynthSpec::new(4, 16, langs, 0.1, 0)).unwrap());
    for c in corpus.counts() {
        println!("{c:?}");
    }
    for lang in corpus.language_tags() {
        for q in corpus.queries(&lang).take(3) {
            println!("[{lang}] {} => {}", q.text_without_object(), q.aliases.join(" | "));
        }
    }
    println!("vocab size {}", build_vocab(&corpus, &[]).len());
    if let Some(dir) = std::env::args().nth(1) {
        corpus.save(dir.as_ref()).unwrap();
        println!("saved to {dir}");
    }
}
