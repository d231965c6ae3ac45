#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use recall_lab::corpus::{build_vocab, filter_trivial, gen_synthetic, training_items, Corpus, PseudoLanguage, SynthSpec, WordOrder};
use recall_lab::engine::NativeBackend;
use recall_lab::harvest::{harvest, HarvestOptions, MemorizedExample};
use recall_lab::runtime::{train_toy, Arch, Model, ModelConfig, TrainOptions, Vocab};

pub struct Lab {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub model: Arc<Model>,
    pub harvests: BTreeMap<String, Vec<MemorizedExample>>,
}

impl Lab {
    pub fn backend(&self) -> NativeBackend {
        NativeBackend::new(self.model.clone())
    }

    pub fn examples(&self) -> Vec<MemorizedExample> {
        self.harvests.values().flatten().cloned().collect()
    }
}

pub fn languages() -> Vec<PseudoLanguage> {
    vec![PseudoLanguage::new("xa", WordOrder::Svo), PseudoLanguage::new("yb", WordOrder::Sov).with_article("ne")]
}

/// Trains a 4-layer toy on 4 relations x 16 subjects in two pseudo-languages and harvests both.
pub fn trained(arch: Arch, seed: u64) -> Lab {
    let corpus = filter_trivial(&gen_synthetic(&SynthSpec::new(4, 16, languages(), 0.0, seed)).unwrap());
    let sentinels = if arch == Arch::EncoderDecoder { vec!["<extra_id_0>".to_string()] } else { vec![] };
    let vocab = build_vocab(&corpus, &sentinels);
    let sentinel = vocab.id("<extra_id_0>");
    let tags = corpus.language_tags();
    let items = training_items(&corpus, &vocab, arch, sentinel, &tags);
    let mut cfg = ModelConfig::toy_decoder(4, 48, 4, vocab.len(), seed);
    if arch == Arch::EncoderDecoder {
        cfg.arch = arch;
        cfg.n_layers_enc = 4;
        cfg.sentinel_ids = sentinel.into_iter().collect();
    }
    let opts = TrainOptions { steps: 1500, lr: 3e-3, batch_size: 32, seed, clip_norm: 1.0, target_loss: Some(0.01) };
    let (model, report) = train_toy(&cfg, &items, &opts).unwrap();
    eprintln!("trained {} steps, memorized {}/{}", report.steps_run, report.memorized_keys, report.total_keys);
    let backend = NativeBackend::new(Arc::new(model.clone()));
    let mut harvests = BTreeMap::new();
    for t in &tags {
        let h = harvest(&backend, &corpus, &vocab, t, &HarvestOptions { seed, ..HarvestOptions::default() }).unwrap();
        harvests.insert(t.clone(), h.examples);
    }
    Lab { corpus, vocab, model: Arc::new(model), harvests }
}
