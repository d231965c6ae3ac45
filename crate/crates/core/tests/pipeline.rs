mod common;

use std::fs;

use common::small_config;
use recall_lab::knockout::Partition;
use recall_lab::report::{run_pipeline, KnockoutSettings, ManifestLog, PatchSettings, SampleSettings, StageStatus};
use recall_lab::runtime::KnockoutMode;
use recall_lab::Error;

#[test]
fn no_experiments_stops_after_harvest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small_config(tmp.path(), 1)).unwrap();
    let kinds: Vec<&str> = out.manifests.iter().map(|m| m.kind.as_str()).collect();
    assert_eq!(kinds, ["corpus", "train", "harvest"]);
    assert!(out.resumed.is_empty());
    assert_eq!(out.harvest.len(), 2);
    for m in &out.manifests {
        assert_eq!(m.status, StageStatus::Complete);
        assert!(m.outputs.iter().all(|o| tmp.path().join(o).is_file()));
    }
}

#[test]
fn rerun_resumes_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), 2);
    cfg.experiments.patch = vec![PatchSettings { condition: 1, patch_lang: "xa".into(), context_lang: None, max_pairs: 20 }];
    let first = run_pipeline(&cfg).unwrap();
    let raw = first.manifests.last().unwrap().outputs.iter().find(|o| o.ends_with("patch_raw.jsonl")).unwrap().clone();
    let before = fs::read(tmp.path().join(&raw)).unwrap();

    let second = run_pipeline(&cfg).unwrap();
    let dirs: Vec<&String> = first.manifests.iter().map(|m| &m.dir).collect();
    assert_eq!(second.resumed.iter().collect::<Vec<_>>(), dirs);
    assert_eq!(second.patch, first.patch);
    assert_eq!(fs::read(tmp.path().join(&raw)).unwrap(), before);
    assert_eq!(ManifestLog::new(tmp.path()).entries().unwrap().len(), first.manifests.len());
}

#[test]
fn changed_experiment_reruns_only_that_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), 3);
    cfg.experiments.extraction = Some(SampleSettings { language: None, max_examples: 4 });
    run_pipeline(&cfg).unwrap();
    cfg.experiments.extraction = Some(SampleSettings { language: None, max_examples: 6 });
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.resumed.len(), 3);
    assert!(second.resumed.iter().all(|d| !d.starts_with("extraction")));
}

#[test]
fn failing_stage_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path(), 4);
    cfg.experiments.knockout = Some(KnockoutSettings {
        sample: SampleSettings::default(),
        partitions: vec![Partition::EncSentinel],
        window: None,
        mode: KnockoutMode::NegInf,
    });
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Pipeline(_)), "{err}");
    let entries = ManifestLog::new(tmp.path()).entries().unwrap();
    let last = entries.last().unwrap();
    assert_eq!(last.kind, "knockout");
    assert!(matches!(&last.status, StageStatus::Failed(msg) if msg.contains("enc_sentinel")));
    assert!(ManifestLog::new(tmp.path()).completed(&last.dir).unwrap().is_none());
}

#[test]
fn config_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 5);
    let path = tmp.path().join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(recall_lab::report::PipelineConfig::load(&path).unwrap(), cfg);
}
