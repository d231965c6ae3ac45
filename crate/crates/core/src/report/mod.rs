//! Aggregation helpers, CSV and JSON-lines persistence, plots, manifests and the pipeline.

mod manifest;
mod pipeline;
mod plot;
mod tables;

pub use manifest::{config_hash, ExperimentManifest, ManifestLog, StageStatus, TOOL_VERSION};
pub use pipeline::{
    load_model_dir, run_pipeline, save_model_dir, CorpusSource, ExperimentSet, HarvestSettings, HarvestSummary, KnockoutSettings, ModelSpec,
    PatchSettings, PipelineConfig, PipelineOutcome, SampleSettings, TraceSettings,
};
pub use plot::{emit_plot, histogram_svg, line_chart_svg, PlotKind, Series};
pub use tables::{
    extraction_rows, knockout_rows, patch_layer_rows, patch_proportion_rows, patch_raw_rows, read_csv, read_jsonl,
    trace_rows, write_csv, write_jsonl, ExtractionCsvRow, KnockoutCsvRow, PatchLayerCsvRow, PatchProportionCsvRow,
    PatchRawRow, TraceCsvRow, EXTRACTION_HEADER, KNOCKOUT_HEADER, PATCH_LAYER_HEADER, PATCH_PROPORTION_HEADER,
    TRACE_HEADER,
};

use crate::error::{Error, Result};

/// `(p_after - p_before) / p_before`; callers filter out `p_before <= 0` first.
pub fn relative_difference(p_after: f64, p_before: f64) -> Result<f64> {
    if !(p_before > 0.0) {
        return Err(Error::Guard(format!("relative difference needs p_before > 0, got {p_before}")));
    }
    Ok((p_after - p_before) / p_before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_difference_cases() {
        assert_eq!(relative_difference(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(relative_difference(0.0, 0.4).unwrap(), -1.0);
        assert!((relative_difference(0.6, 0.4).unwrap() - 0.5).abs() < 1e-15);
        assert!(relative_difference(0.3, 0.0).is_err());
        assert!(relative_difference(0.3, f64::NAN).is_err());
    }
}
