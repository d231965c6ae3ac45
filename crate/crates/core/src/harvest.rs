//! Finding the facts a model has memorized.
//!
//! Every template of a triplet is greedy-decoded; a template succeeds when the
//! continuation starts with an object alias after at most `max_prefix` extra
//! tokens. Those extra tokens are absorbed into the input so the next-token
//! prediction is the alias's first token. One successful template per
//! triplet is kept, chosen with a seed derived from the triplet id.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_query, Corpus, EncodedQuery, Query};
use crate::engine::Backend;
use crate::error::{Error, Result};
use crate::runtime::{Arch, Hooks, Inputs, Stream, TokenId, Vocab, DEFAULT_MAX_NEW};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorizedExample {
    /// `triplet@lang`.
    pub id: String,
    pub triplet_id: String,
    pub subject_id: String,
    pub relation_id: String,
    pub object_id: String,
    pub template_id: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_ids: Option<Vec<TokenId>>,
    /// Decoder input after absorption.
    pub dec_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentinel: Option<TokenId>,
    pub object_token: TokenId,
    /// Inclusive token span of the subject in the stream returned by [`MemorizedExample::subject_stream`].
    pub subject_span: (usize, usize),
    pub absorbed: Vec<TokenId>,
    pub alias: String,
}

impl MemorizedExample {
    pub fn inputs(&self) -> Inputs {
        Inputs { enc: self.enc_ids.clone(), dec: self.dec_ids.clone() }
    }

    /// Encoder for encoder-decoder examples, decoder otherwise.
    pub fn subject_stream(&self) -> Stream {
        if self.enc_ids.is_some() {
            Stream::Enc
        } else {
            Stream::Dec
        }
    }

    pub fn subject_tokens(&self) -> std::ops::RangeInclusive<usize> {
        self.subject_span.0..=self.subject_span.1
    }

    /// Index of the last decoder input token.
    pub fn last(&self) -> usize {
        self.dec_ids.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestOptions {
    pub seed: u64,
    pub max_new: usize,
    /// Most tokens that may precede the alias in the continuation.
    pub max_prefix: usize,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        Self { seed: 0, max_new: DEFAULT_MAX_NEW, max_prefix: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HarvestReport {
    pub language: String,
    pub examples: Vec<MemorizedExample>,
    /// Triplets with at least one successful template that were still dropped, with the reason.
    pub dropped: Vec<(String, String)>,
    /// Triplets available in the language.
    pub tried: usize,
}

/// Position and alias of the first alias match in `decoded`, allowing up to `max_prefix` leading tokens.
pub fn absorb_prefix(decoded: &[TokenId], aliases: &[Vec<TokenId>], max_prefix: usize) -> Result<(usize, usize)> {
    for k in 0..=max_prefix.min(decoded.len()) {
        for (ai, alias) in aliases.iter().enumerate() {
            if !alias.is_empty() && decoded[k..].starts_with(alias) {
                return Ok((k, ai));
            }
        }
    }
    Err(Error::Absorption(format!("no alias within the first {} decoded tokens", max_prefix + 1)))
}

/// Inclusive span of the unique occurrence of `subject` in `ids`.
pub fn locate_subject_span(ids: &[TokenId], subject: &[TokenId]) -> Result<(usize, usize)> {
    if subject.is_empty() {
        return Err(Error::Span("empty subject".into()));
    }
    let hits: Vec<usize> = ids.windows(subject.len()).enumerate().filter(|(_, w)| *w == subject).map(|(i, _)| i).collect();
    match hits.as_slice() {
        [i] => Ok((*i, i + subject.len() - 1)),
        [] => Err(Error::Span("subject does not occur in the input".into())),
        _ => Err(Error::Span(format!("subject occurs {} times", hits.len()))),
    }
}

struct Candidate {
    template_id: String,
    enc: EncodedQuery,
    absorbed: Vec<TokenId>,
    alias: String,
    alias_ids: Vec<TokenId>,
}

fn try_template(
    backend: &dyn Backend,
    vocab: &Vocab,
    corpus: &Corpus,
    q: &Query<'_>,
    opts: &HarvestOptions,
) -> Result<Option<Candidate>> {
    let caps = backend.capabilities();
    let sentinel = caps.sentinel_ids.first().copied();
    let enc = encode_query(vocab, corpus, q, caps.arch, sentinel);
    let decoded = backend.greedy_decode(&Inputs { enc: enc.enc.clone(), dec: enc.dec.clone() }, opts.max_new)?;
    let alias_ids: Vec<Vec<TokenId>> = q.aliases.iter().map(|a| vocab.tokenize(a)).collect();
    match absorb_prefix(&decoded, &alias_ids, opts.max_prefix) {
        Ok((k, ai)) => Ok(Some(Candidate {
            template_id: q.template.id.clone(),
            enc,
            absorbed: decoded[..k].to_vec(),
            alias: q.aliases[ai].clone(),
            alias_ids: alias_ids[ai].clone(),
        })),
        Err(_) => Ok(None),
    }
}

fn finish(
    backend: &dyn Backend,
    vocab: &Vocab,
    q: &Query<'_>,
    lang: &str,
    c: Candidate,
) -> Result<MemorizedExample> {
    let mut dec = c.enc.dec.clone();
    dec.extend(&c.absorbed);
    let subject_ids = vocab.tokenize(q.subject);
    let span = locate_subject_span(c.enc.enc.as_deref().unwrap_or(&dec), &subject_ids)?;
    let ex = MemorizedExample {
        id: format!("{}@{lang}", q.triplet.id),
        triplet_id: q.triplet.id.clone(),
        subject_id: q.triplet.subject_id.clone(),
        relation_id: q.triplet.relation_id.clone(),
        object_id: q.triplet.object_id.clone(),
        template_id: c.template_id,
        language: lang.to_string(),
        enc_ids: c.enc.enc,
        dec_ids: dec,
        sentinel: c.enc.sentinel,
        object_token: c.alias_ids[0],
        subject_span: span,
        absorbed: c.absorbed,
        alias: c.alias,
    };
    let out = backend.execute(&ex.inputs(), &Hooks::default())?;
    if out.predicted_token != ex.object_token {
        return Err(Error::Absorption(format!(
            "re-verification predicted {} instead of {}",
            out.predicted_token, ex.object_token
        )));
    }
    Ok(ex)
}

/// Harvests memorized triplets of `lang`. Backend failures drop the triplet, not the harvest.
pub fn harvest(backend: &dyn Backend, corpus: &Corpus, vocab: &Vocab, lang: &str, opts: &HarvestOptions) -> Result<HarvestReport> {
    if opts.max_new == 0 {
        return Err(Error::Input("max_new must be at least 1".into()));
    }
    let arch = backend.capabilities().arch;
    if arch == Arch::EncoderDecoder && backend.capabilities().sentinel_ids.is_empty() {
        return Err(Error::Capability("encoder-decoder backend without sentinel ids".into()));
    }
    let triplets: Vec<_> = corpus.triplets.iter().filter(|t| t.available_in(lang)).collect();
    let queries: Vec<Query<'_>> = corpus.queries(lang).collect();

    let results: Vec<Option<std::result::Result<MemorizedExample, (String, String)>>> = triplets
        .par_iter()
        .map(|t| {
            let mine: Vec<&Query<'_>> = queries
                .iter()
                .filter(|q| q.triplet.id == t.id && (arch == Arch::EncoderDecoder || q.template.object_final()))
                .collect();
            let mut found = Vec::new();
            for q in &mine {
                match try_template(backend, vocab, corpus, q, opts) {
                    Ok(Some(c)) => found.push((*q, c)),
                    Ok(None) => {}
                    Err(e) => return Some(Err((t.id.clone(), e.to_string()))),
                }
            }
            if found.is_empty() {
                return None;
            }
            let pick = seed::rng(opts.seed, &["harvest", &t.id, lang]).random_range(0..found.len());
            let (q, c) = found.swap_remove(pick);
            Some(finish(backend, vocab, q, lang, c).map_err(|e| (t.id.clone(), e.to_string())))
        })
        .collect();

    let mut report = HarvestReport { language: lang.to_string(), tried: triplets.len(), ..HarvestReport::default() };
    for r in results.into_iter().flatten() {
        match r {
            Ok(ex) => report.examples.push(ex),
            Err(d) => report.dropped.push(d),
        }
    }
    Ok(report)
}

pub fn save_examples(path: &Path, examples: &[MemorizedExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<MemorizedExample>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corpus {
            file: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prefix_leaves_input() {
        assert_eq!(absorb_prefix(&[7, 8, 2], &[vec![7, 8]], 3).unwrap(), (0, 0));
    }

    #[test]
    fn prefix_tokens_are_counted() {
        assert_eq!(absorb_prefix(&[5, 9, 7, 2], &[vec![6], vec![7]], 3).unwrap(), (2, 1));
        assert!(absorb_prefix(&[5, 5, 5, 5, 7], &[vec![7]], 3).is_err());
        assert!(absorb_prefix(&[5, 2], &[vec![7]], 3).is_err());
    }

    #[test]
    fn earliest_position_wins_over_alias_order() {
        assert_eq!(absorb_prefix(&[9, 7], &[vec![7], vec![9]], 3).unwrap(), (0, 1));
    }

    #[test]
    fn span_rules() {
        assert_eq!(locate_subject_span(&[1, 4, 10, 11, 12], &[10, 11]).unwrap(), (2, 3));
        assert_eq!(locate_subject_span(&[1, 4, 10], &[10]).unwrap(), (2, 2));
        assert!(locate_subject_span(&[1, 10, 4, 10], &[10]).is_err());
        assert!(locate_subject_span(&[1, 4], &[10]).is_err());
    }
}
