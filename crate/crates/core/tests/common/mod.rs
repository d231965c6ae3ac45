#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recall_lab::corpus::{build_vocab, filter_trivial, gen_synthetic, training_items, Corpus, PseudoLanguage, SynthSpec, WordOrder};
use recall_lab::engine::NativeBackend;
use recall_lab::harvest::{harvest, HarvestOptions, MemorizedExample};
use recall_lab::report::{
    CorpusSource, ExperimentSet, KnockoutSettings, ModelSpec, PatchSettings, PipelineConfig, SampleSettings, TraceSettings,
};
use recall_lab::runtime::{train_toy, Arch, KnockoutMode, Model, ModelConfig, TrainOptions, TrainReport, Vocab};

/// Seeded random weights, with layer norms and biases jittered away from their init values.
pub fn tiny(arch: Arch, seed: u64) -> Model {
    let mut c = ModelConfig::toy_decoder(2, 8, 2, 32, seed);
    if arch == Arch::EncoderDecoder {
        c.arch = arch;
        c.n_layers_enc = 2;
        c.sentinel_ids = vec![30, 31];
    }
    let mut m = Model::init(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for (name, mut t) in m.weights.tensors_mut() {
        if name.ends_with(".gain") || name.ends_with(".bias") || name.contains(".b_") {
            for x in t.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(4..30)).collect()
}

/// A decoder-only example over arbitrary tokens, with `span` marked as the subject.
pub fn synthetic_example(id: &str, dec: Vec<u32>, span: (usize, usize)) -> MemorizedExample {
    MemorizedExample {
        id: id.into(),
        triplet_id: id.into(),
        subject_id: format!("s-{id}"),
        relation_id: "r".into(),
        object_id: format!("o-{id}"),
        template_id: "t".into(),
        language: "xa".into(),
        enc_ids: None,
        dec_ids: dec,
        sentinel: None,
        object_token: 0,
        subject_span: span,
        absorbed: vec![],
        alias: String::new(),
    }
}

pub fn two_languages() -> Vec<PseudoLanguage> {
    vec![PseudoLanguage::new("xa", WordOrder::Svo), PseudoLanguage::new("yb", WordOrder::Sov).with_article("ne")]
}

pub struct Toy {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub model: Arc<Model>,
    pub report: TrainReport,
    pub harvests: BTreeMap<String, Vec<MemorizedExample>>,
}

impl Toy {
    pub fn backend(&self) -> NativeBackend {
        NativeBackend::new(self.model.clone())
    }

    pub fn examples(&self) -> Vec<MemorizedExample> {
        self.harvests.values().flatten().cloned().collect()
    }
}

/// Small trained model with harvested examples: 3 relations x 8 subjects in two languages.
pub fn trained_toy(arch: Arch, seed: u64) -> Toy {
    let corpus = filter_trivial(&gen_synthetic(&SynthSpec::new(3, 8, two_languages(), 0.0, seed)).unwrap());
    let sentinels = if arch == Arch::EncoderDecoder { vec!["<extra_id_0>".to_string()] } else { vec![] };
    let vocab = build_vocab(&corpus, &sentinels);
    let sentinel = vocab.id("<extra_id_0>");
    let tags = corpus.language_tags();
    let items = training_items(&corpus, &vocab, arch, sentinel, &tags);
    let mut cfg = ModelConfig::toy_decoder(2, 32, 4, vocab.len(), seed);
    if arch == Arch::EncoderDecoder {
        cfg.arch = arch;
        cfg.n_layers_enc = 2;
        cfg.sentinel_ids = sentinel.into_iter().collect();
    }
    let opts = TrainOptions { steps: 1500, lr: 3e-3, batch_size: 32, seed, clip_norm: 1.0, target_loss: Some(0.01) };
    let (model, report) = train_toy(&cfg, &items, &opts).unwrap();
    let backend = NativeBackend::new(Arc::new(model.clone()));
    let mut harvests = BTreeMap::new();
    for t in &tags {
        let h = harvest(&backend, &corpus, &vocab, t, &HarvestOptions { seed, ..HarvestOptions::default() }).unwrap();
        harvests.insert(t.clone(), h.examples);
    }
    Toy { corpus, vocab, model: Arc::new(model), report, harvests }
}

/// The desk-scale pipeline: 4-layer decoder-only toy, two languages of 64 triplets each,
/// with every experiment enabled.
pub fn desk_config(out_dir: &std::path::Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        out_dir: out_dir.to_path_buf(),
        seed,
        corpus: CorpusSource::Synthetic(SynthSpec::new(4, 16, two_languages(), 0.0, seed)),
        model: ModelSpec {
            arch: Arch::DecoderOnly,
            n_layers: 4,
            n_layers_enc: None,
            d_model: 48,
            n_heads: 4,
            d_ff: None,
            max_seq: 24,
            checkpoint: None,
        },
        train: TrainOptions { steps: 1500, lr: 3e-3, batch_size: 32, seed, clip_norm: 1.0, target_loss: Some(0.01) },
        harvest: Default::default(),
        experiments: ExperimentSet {
            trace: Some(TraceSettings { sample: SampleSettings { language: None, max_examples: 8 }, ..TraceSettings::default() }),
            knockout: Some(KnockoutSettings {
                sample: SampleSettings { language: None, max_examples: 32 },
                partitions: vec![],
                window: None,
                mode: KnockoutMode::NegInf,
            }),
            extraction: Some(SampleSettings { language: None, max_examples: 64 }),
            patch: vec![PatchSettings { condition: 1, patch_lang: "xa".into(), context_lang: None, max_pairs: 200 }],
        },
        plots: true,
    }
}

/// A quick pipeline for exercising stage bookkeeping: 2 layers, 3 relations x 8 subjects.
pub fn small_config(out_dir: &std::path::Path, seed: u64) -> PipelineConfig {
    let mut cfg = desk_config(out_dir, seed);
    cfg.corpus = CorpusSource::Synthetic(SynthSpec::new(3, 8, two_languages(), 0.0, seed));
    cfg.model.n_layers = 2;
    cfg.model.d_model = 32;
    cfg.experiments = ExperimentSet::default();
    cfg
}
