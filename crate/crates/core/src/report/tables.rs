use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::causal::TraceGrid;
use crate::error::{Error, Result};
use crate::extraction::ExtractionProfile;
use crate::knockout::KnockoutCurve;
use crate::patch::{ConditionReport, Label, PatchOutcome};
use crate::runtime::{SiteKind, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub example_id: String,
    pub token_idx: usize,
    pub token_role: String,
    pub layer: usize,
    pub kind: SiteKind,
    pub ie_mean: f64,
    pub p_clean: f64,
    pub p_corrupt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutCsvRow {
    pub partition: String,
    pub center_layer: usize,
    pub mean_rel_diff: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCsvRow {
    pub layer: usize,
    pub kind: SiteKind,
    pub rate: f64,
    pub n_events: usize,
    pub mlp_with_attn: usize,
    pub mlp_without_attn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLayerCsvRow {
    pub condition: u8,
    pub layer: usize,
    pub mean_rel_ctx: f64,
    pub mean_rel_patch: f64,
    pub n: usize,
    pub context_obj: usize,
    pub patch_obj: usize,
    pub patch_lang_ctx_obj: usize,
    pub ctx_lang_patch_obj: usize,
    pub cross_rp_sc: usize,
    pub cross_rc_sp: usize,
    pub other: usize,
    pub modal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProportionCsvRow {
    pub condition: u8,
    pub label: Label,
    pub count: usize,
    pub enabled: usize,
    /// Empty when no pair enables the label.
    pub proportion: Option<f64>,
}

/// One line of the patch raw dump: a pair at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRawRow {
    pub pair_id: String,
    pub condition: u8,
    pub layer: usize,
    pub predicted: TokenId,
    pub label: Label,
    pub probs: Vec<(Label, f64)>,
    pub rel_ctx: Option<f64>,
    pub rel_patch: Option<f64>,
    pub enabled: Vec<Label>,
}

pub const TRACE_HEADER: &[&str] =
    &["example_id", "token_idx", "token_role", "layer", "kind", "ie_mean", "p_clean", "p_corrupt"];
pub const KNOCKOUT_HEADER: &[&str] = &["partition", "center_layer", "mean_rel_diff", "n"];
pub const EXTRACTION_HEADER: &[&str] = &["layer", "kind", "rate", "n_events", "mlp_with_attn", "mlp_without_attn"];
pub const PATCH_LAYER_HEADER: &[&str] = &[
    "condition",
    "layer",
    "mean_rel_ctx",
    "mean_rel_patch",
    "n",
    "context_obj",
    "patch_obj",
    "patch_lang_ctx_obj",
    "ctx_lang_patch_obj",
    "cross_rp_sc",
    "cross_rc_sp",
    "other",
    "modal",
];
pub const PATCH_PROPORTION_HEADER: &[&str] = &["condition", "label", "count", "enabled", "proportion"];

pub fn trace_rows(grids: &[TraceGrid]) -> Vec<TraceCsvRow> {
    grids
        .iter()
        .flat_map(|g| {
            g.cells.iter().map(move |c| TraceCsvRow {
                example_id: g.example_id.clone(),
                token_idx: c.token_idx,
                token_role: c.token_role.clone(),
                layer: c.layer,
                kind: c.kind,
                ie_mean: c.ie_mean,
                p_clean: g.p_clean,
                p_corrupt: g.p_corrupt,
            })
        })
        .collect()
}

pub fn knockout_rows(curves: &[KnockoutCurve]) -> Vec<KnockoutCsvRow> {
    curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |p| KnockoutCsvRow {
                partition: c.partition.to_string(),
                center_layer: p.center_layer,
                mean_rel_diff: p.mean_rel_diff,
                n: p.n,
            })
        })
        .collect()
}

pub fn extraction_rows(profile: &ExtractionProfile) -> Vec<ExtractionCsvRow> {
    profile
        .rows
        .iter()
        .map(|r| ExtractionCsvRow {
            layer: r.layer,
            kind: r.kind,
            rate: r.rate,
            n_events: r.n_events,
            mlp_with_attn: r.mlp_with_attn,
            mlp_without_attn: r.mlp_without_attn,
        })
        .collect()
}

pub fn patch_layer_rows(condition: u8, report: &ConditionReport) -> Vec<PatchLayerCsvRow> {
    report
        .layers
        .iter()
        .map(|l| PatchLayerCsvRow {
            condition,
            layer: l.layer,
            mean_rel_ctx: l.mean_rel_ctx,
            mean_rel_patch: l.mean_rel_patch,
            n: l.n,
            context_obj: l.count(Label::ContextObj),
            patch_obj: l.count(Label::PatchObj),
            patch_lang_ctx_obj: l.count(Label::PatchLangCtxObj),
            ctx_lang_patch_obj: l.count(Label::CtxLangPatchObj),
            cross_rp_sc: l.count(Label::CrossRpSc),
            cross_rc_sp: l.count(Label::CrossRcSp),
            other: l.count(Label::Other),
            modal: l.modal().map_or_else(String::new, |m| m.to_string()),
        })
        .collect()
}

pub fn patch_proportion_rows(condition: u8, report: &ConditionReport) -> Vec<PatchProportionCsvRow> {
    report
        .proportions
        .iter()
        .map(|p| PatchProportionCsvRow {
            condition,
            label: p.label,
            count: p.count,
            enabled: p.enabled,
            proportion: p.proportion,
        })
        .collect()
}

pub fn patch_raw_rows(outcomes: &[PatchOutcome]) -> Vec<PatchRawRow> {
    outcomes
        .iter()
        .flat_map(|o| {
            o.layers.iter().map(move |l| PatchRawRow {
                pair_id: o.pair_id.clone(),
                condition: o.condition.number(),
                layer: l.layer,
                predicted: l.predicted,
                label: l.label,
                probs: l.probs.clone(),
                rel_ctx: l.rel_ctx,
                rel_patch: l.rel_patch,
                enabled: o.enabled.clone(),
            })
        })
        .collect()
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

/// Writes rows with a header line. An empty slice still gets the header when `T` is a struct.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
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
    fn csv_round_trip_keeps_floats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        let rows = vec![KnockoutCsvRow { partition: "subject".into(), center_layer: 1, mean_rel_diff: 0.1 + 0.2, n: 3 }];
        write_csv(&p, &rows, KNOCKOUT_HEADER).unwrap();
        let back: Vec<KnockoutCsvRow> = read_csv(&p).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_csv::<KnockoutCsvRow>(&p, &[], KNOCKOUT_HEADER).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "partition,center_layer,mean_rel_diff,n\n");
    }
}
