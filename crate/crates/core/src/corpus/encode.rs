use crate::corpus::{Corpus, Query};
use crate::runtime::{pre_tokenize, Arch, TokenId, TrainingItem, Vocab, BOS, EOS};

/// Model inputs for one query, before any prefix absorption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQuery {
    pub enc: Option<Vec<TokenId>>,
    pub dec: Vec<TokenId>,
    pub sentinel: Option<TokenId>,
}

/// Vocabulary covering every surface in the corpus.
///
/// Order: `sentinels`, language markers and articles, then template words and
/// aliases per language in table order. Deterministic for a given corpus.
pub fn build_vocab(corpus: &Corpus, sentinels: &[String]) -> Vocab {
    let mut words: Vec<String> = sentinels.to_vec();
    for l in &corpus.languages {
        words.push(l.marker.clone());
        words.extend(l.article.clone());
    }
    for t in &corpus.templates {
        words.extend(pre_tokenize(&t.pattern.replace("[X]", " ").replace("[Y]", " ")));
    }
    for table in corpus.aliases.values() {
        for aliases in table.values() {
            for a in aliases {
                words.extend(pre_tokenize(a));
            }
        }
    }
    Vocab::from_words(words)
}

fn with_marker(vocab: &Vocab, corpus: &Corpus, lang: &str, text: &str) -> Vec<TokenId> {
    let mut ids = Vec::new();
    if let Some(m) = corpus.marker(lang) {
        ids.extend(vocab.tokenize(m));
    }
    ids.extend(vocab.tokenize(text));
    ids
}

/// Decoder-only: `<bos> marker prefix`. Encoder-decoder: the encoder reads
/// `marker prefix <sentinel> suffix <eos>` and the decoder starts from `<bos> <sentinel>`.
pub fn encode_query(vocab: &Vocab, corpus: &Corpus, q: &Query<'_>, arch: Arch, sentinel: Option<TokenId>) -> EncodedQuery {
    let lang = &q.template.language;
    match arch {
        Arch::DecoderOnly => {
            let mut dec = vec![BOS];
            dec.extend(with_marker(vocab, corpus, lang, &q.before));
            EncodedQuery { enc: None, dec, sentinel: None }
        }
        Arch::EncoderDecoder => {
            let s = sentinel.expect("encoder-decoder queries need a sentinel");
            let mut enc = with_marker(vocab, corpus, lang, &q.before);
            enc.push(s);
            enc.extend(vocab.tokenize(&q.after));
            enc.push(EOS);
            EncodedQuery { enc: Some(enc), dec: vec![BOS, s], sentinel: Some(s) }
        }
    }
}

/// Answer tokens: optional article, canonical object, `<eos>`.
pub fn answer_ids(vocab: &Vocab, corpus: &Corpus, q: &Query<'_>) -> Vec<TokenId> {
    let mut ids = Vec::new();
    if let Some(a) = corpus.article(&q.template.language, &q.triplet.relation_id) {
        ids.extend(vocab.tokenize(a));
    }
    ids.extend(vocab.tokenize(&q.aliases[0]));
    ids.push(EOS);
    ids
}

/// One item per usable (triplet, template) pair in `langs`, keyed `triplet@lang`.
/// Decoder-only models only see object-final templates.
pub fn training_items(
    corpus: &Corpus,
    vocab: &Vocab,
    arch: Arch,
    sentinel: Option<TokenId>,
    langs: &[String],
) -> Vec<TrainingItem> {
    let mut out = Vec::new();
    for lang in langs {
        for q in corpus.queries(lang) {
            if arch == Arch::DecoderOnly && !q.template.object_final() {
                continue;
            }
            let e = encode_query(vocab, corpus, &q, arch, sentinel);
            out.push(TrainingItem {
                key: format!("{}@{lang}", q.triplet.id),
                enc: e.enc,
                prompt: e.dec,
                target: answer_ids(vocab, corpus, &q),
            });
        }
    }
    out
}
