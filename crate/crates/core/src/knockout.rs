//! Attention knockout: cut the last token off from a group of tokens over a
//! window of layers and see how much of the prediction survives.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::mean;
use crate::engine::{default_knockout_window, resolve_window, Backend, Engine, Intervention};
use crate::error::{Error, Result};
use crate::harvest::MemorizedExample;
use crate::report::relative_difference;
use crate::runtime::{Arch, AttentionKind, AttnBlock, KnockoutMode, Stream};

/// Examples whose clean probability is below this are left out of relative differences.
pub const MIN_P_ORIG: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Subject,
    NonSubject,
    Last,
    EncSentinel,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Subject, Partition::NonSubject, Partition::Last, Partition::EncSentinel];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Subject => "subject",
            Partition::NonSubject => "non_subject",
            Partition::Last => "last",
            Partition::EncSentinel => "enc_sentinel",
        }
    }

    /// Partitions that exist for an architecture.
    pub fn for_arch(arch: Arch) -> Vec<Partition> {
        match arch {
            Arch::DecoderOnly => vec![Partition::Subject, Partition::NonSubject, Partition::Last],
            Arch::EncoderDecoder => Partition::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "subject" => Ok(Partition::Subject),
            "non_subject" => Ok(Partition::NonSubject),
            "last" => Ok(Partition::Last),
            "enc_sentinel" => Ok(Partition::EncSentinel),
            _ => Err(Error::Input(format!("unknown partition {s:?}"))),
        }
    }
}

/// Edges to cut for one example: which attention, and which key positions.
///
/// Decoder-only models use decoder self-attention for everything. Encoder-decoder
/// models use cross-attention for the encoder partitions and decoder
/// self-attention for `last`.
pub fn partition_keys(ex: &MemorizedExample, partition: Partition, arch: Arch) -> Result<(AttentionKind, Vec<i64>)> {
    let last = ex.last();
    let span = ex.subject_tokens();
    match (arch, partition) {
        (_, Partition::Last) => Ok((AttentionKind::SelfAttn, vec![last as i64])),
        (Arch::DecoderOnly, Partition::EncSentinel) => {
            Err(Error::Capability("enc_sentinel needs an encoder-decoder model".into()))
        }
        (Arch::DecoderOnly, Partition::Subject) => Ok((AttentionKind::SelfAttn, span.map(|t| t as i64).collect())),
        (Arch::DecoderOnly, Partition::NonSubject) => Ok((
            AttentionKind::SelfAttn,
            (0..last).filter(|t| !span.contains(t)).map(|t| t as i64).collect(),
        )),
        (Arch::EncoderDecoder, p) => {
            let enc = ex.enc_ids.as_ref().ok_or_else(|| Error::Input(format!("{} has no encoder input", ex.id)))?;
            let sentinel_at = ex.sentinel.and_then(|s| enc.iter().position(|&t| t == s));
            let keys = match p {
                Partition::Subject => span.map(|t| t as i64).collect(),
                Partition::EncSentinel => sentinel_at.into_iter().map(|t| t as i64).collect(),
                _ => (0..enc.len()).filter(|t| !span.contains(t) && Some(*t) != sentinel_at).map(|t| t as i64).collect(),
            };
            Ok((AttentionKind::CrossAttn, keys))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRaw {
    pub example_id: String,
    pub center_layer: usize,
    pub p_orig: f64,
    pub p_knock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub center_layer: usize,
    pub mean_rel_diff: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutCurve {
    pub partition: Partition,
    pub width: usize,
    pub points: Vec<CurvePoint>,
    pub raw: Vec<KnockoutRaw>,
    /// Examples left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Mean over examples of per-example relative differences, per center layer.
pub fn aggregate(raw: &[KnockoutRaw], n_layers: usize) -> Result<Vec<CurvePoint>> {
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for r in raw {
        if r.p_orig < MIN_P_ORIG {
            continue;
        }
        let slot = per_layer
            .get_mut(r.center_layer)
            .ok_or_else(|| Error::Input(format!("center layer {} outside {n_layers}", r.center_layer)))?;
        slot.push(relative_difference(r.p_knock, r.p_orig)?);
    }
    Ok(per_layer
        .into_iter()
        .enumerate()
        .map(|(l, v)| CurvePoint { center_layer: l, mean_rel_diff: if v.is_empty() { 0.0 } else { mean(&v) }, n: v.len() })
        .collect())
}

fn example_curve<B: Backend>(
    engine: &Engine<B>,
    ex: &MemorizedExample,
    partition: Partition,
    width: usize,
    mode: KnockoutMode,
) -> Result<Vec<KnockoutRaw>> {
    let caps = engine.capabilities();
    let (attention, keys) = partition_keys(ex, partition, caps.arch)?;
    let inputs = ex.inputs();
    let clean = engine.run_with_plan(&inputs, &[])?;
    let target = clean.predicted_token;
    let p_orig = clean.prob(target);
    let n_layers = caps.n_layers_dec;
    let mut out = Vec::with_capacity(n_layers);
    for center in 0..n_layers {
        if keys.is_empty() {
            // Nothing to cut: the run is the clean run.
            out.push(KnockoutRaw { example_id: ex.id.clone(), center_layer: center, p_orig, p_knock: p_orig });
            continue;
        }
        let block = AttnBlock {
            stream: Stream::Dec,
            attention,
            layers: resolve_window(center, width, n_layers).layers,
            query: ex.last() as i64,
            keys: keys.clone(),
            mode,
        };
        let run = engine.run_with_plan(&inputs, &[Intervention::AttnBlock(block)])?;
        out.push(KnockoutRaw { example_id: ex.id.clone(), center_layer: center, p_orig, p_knock: run.prob(target) });
    }
    Ok(out)
}

/// Knockout curve over every center layer; `width = None` picks the architecture default.
pub fn knockout_curve<B: Backend>(
    engine: &Engine<B>,
    examples: &[MemorizedExample],
    partition: Partition,
    width: Option<usize>,
    mode: KnockoutMode,
) -> Result<KnockoutCurve> {
    let caps = engine.capabilities();
    let width = width.unwrap_or_else(|| default_knockout_window(caps.arch));
    if width == 0 {
        return Err(Error::Input("knockout window must be at least 1".into()));
    }
    if partition == Partition::EncSentinel && caps.arch != Arch::EncoderDecoder {
        return Err(Error::Capability("enc_sentinel needs an encoder-decoder model".into()));
    }
    let results: Vec<_> = examples
        .par_iter()
        .map(|ex| (ex.id.clone(), example_curve(engine, ex, partition, width, mode)))
        .collect();
    let mut raw = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => raw.extend(v),
            Err(e) => skipped.push((id, e.to_string())),
        }
    }
    let points = aggregate(&raw, caps.n_layers_dec)?;
    Ok(KnockoutCurve { partition, width, points, raw, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(dec: Vec<u32>, span: (usize, usize)) -> MemorizedExample {
        MemorizedExample {
            id: "t@xa".into(),
            triplet_id: "t".into(),
            subject_id: "s".into(),
            relation_id: "r".into(),
            object_id: "o".into(),
            template_id: "xa:r:0".into(),
            language: "xa".into(),
            enc_ids: None,
            dec_ids: dec,
            sentinel: None,
            object_token: 9,
            subject_span: span,
            absorbed: vec![],
            alias: "o".into(),
        }
    }

    #[test]
    fn decoder_partitions_are_disjoint() {
        let e = ex(vec![1, 4, 5, 6, 7, 8], (2, 3));
        let s = partition_keys(&e, Partition::Subject, Arch::DecoderOnly).unwrap().1;
        let n = partition_keys(&e, Partition::NonSubject, Arch::DecoderOnly).unwrap().1;
        let l = partition_keys(&e, Partition::Last, Arch::DecoderOnly).unwrap().1;
        assert_eq!(s, vec![2, 3]);
        assert_eq!(n, vec![0, 1, 4]);
        assert_eq!(l, vec![5]);
        assert!(partition_keys(&e, Partition::EncSentinel, Arch::DecoderOnly).is_err());
    }

    #[test]
    fn encoder_partitions() {
        let mut e = ex(vec![1, 30], (1, 2));
        e.enc_ids = Some(vec![5, 6, 7, 30, 8, 2]);
        e.sentinel = Some(30);
        let get = |p| partition_keys(&e, p, Arch::EncoderDecoder).unwrap();
        assert_eq!(get(Partition::Subject), (AttentionKind::CrossAttn, vec![1, 2]));
        assert_eq!(get(Partition::NonSubject), (AttentionKind::CrossAttn, vec![0, 4, 5]));
        assert_eq!(get(Partition::EncSentinel), (AttentionKind::CrossAttn, vec![3]));
        assert_eq!(get(Partition::Last), (AttentionKind::SelfAttn, vec![1]));
    }

    #[test]
    fn aggregation_is_mean_of_ratios() {
        let raw = vec![
            KnockoutRaw { example_id: "a".into(), center_layer: 0, p_orig: 0.5, p_knock: 0.25 },
            KnockoutRaw { example_id: "b".into(), center_layer: 0, p_orig: 0.1, p_knock: 0.2 },
            KnockoutRaw { example_id: "c".into(), center_layer: 0, p_orig: 1e-9, p_knock: 0.2 },
        ];
        let pts = aggregate(&raw, 2).unwrap();
        assert_eq!(pts[0].mean_rel_diff, (-0.5 + 1.0) / 2.0);
        assert_eq!(pts[0].n, 2);
        assert_eq!(pts[1], CurvePoint { center_layer: 1, mean_rel_diff: 0.0, n: 0 });
    }

    #[test]
    fn partition_names_round_trip() {
        for p in Partition::ALL {
            assert_eq!(p.as_str().parse::<Partition>().unwrap(), p);
        }
        assert_eq!("non-subject".parse::<Partition>().unwrap(), Partition::NonSubject);
    }
}
