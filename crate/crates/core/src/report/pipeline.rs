//! corpus → train → harvest → experiments, one manifest per stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::causal::{trace_grid, TraceConfig};
use crate::corpus::{build_vocab, filter_trivial, gen_synthetic, training_items, Corpus, SynthSpec};
use crate::engine::{Engine, NativeBackend};
use crate::error::{Error, Result};
use crate::extraction::extraction_profile;
use crate::harvest::{harvest, load_examples, save_examples, HarvestOptions, MemorizedExample};
use crate::knockout::{knockout_curve, Partition};
use crate::patch::{build_pairs, condition_report, patch_all, sample_pairs, Condition, ConditionReport};
use crate::report::manifest::{config_hash, ExperimentManifest, ManifestLog, StageStatus, TOOL_VERSION};
use crate::report::plot::{emit_plot, PlotKind};
use crate::report::tables::*;
use crate::runtime::{
    memorized_by_key, train_toy, Arch, KnockoutMode, Model, ModelConfig, SiteKind, TrainOptions, TrainReport, Vocab,
    Weights, DEFAULT_MAX_NEW,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic(SynthSpec),
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub n_layers: usize,
    /// Encoder depth for encoder-decoder models; defaults to `n_layers`.
    #[serde(default)]
    pub n_layers_enc: Option<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    /// Directory holding `model_config.json` and `weights.json`; skips training when set.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_max_seq() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSettings {
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default = "default_max_prefix")]
    pub max_prefix: usize,
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW
}

fn default_max_prefix() -> usize {
    3
}

impl Default for HarvestSettings {
    fn default() -> Self {
        Self { max_new: default_max_new(), max_prefix: default_max_prefix() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    /// Restrict to one language; `None` pools every language.
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default = "default_max_examples")]
    pub max_examples: usize,
}

fn default_max_examples() -> usize {
    16
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { language: None, max_examples: default_max_examples() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    #[serde(default, flatten)]
    pub sample: SampleSettings,
    #[serde(default = "default_noise")]
    pub noise_multiplier: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<SiteKind>,
}

fn default_noise() -> f64 {
    3.0
}

fn default_samples() -> usize {
    10
}

fn default_kinds() -> Vec<SiteKind> {
    vec![SiteKind::StateH, SiteKind::MlpF, SiteKind::SelfAttnS]
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            sample: SampleSettings::default(),
            noise_multiplier: default_noise(),
            n_samples: default_samples(),
            window: None,
            kinds: default_kinds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutSettings {
    #[serde(default, flatten)]
    pub sample: SampleSettings,
    /// Empty means every partition the architecture has.
    #[serde(default)]
    pub partitions: Vec<Partition>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub mode: KnockoutMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSettings {
    pub condition: u8,
    pub patch_lang: String,
    /// Defaults to the patch language for condition 1 and the first other language otherwise.
    #[serde(default)]
    pub context_lang: Option<String>,
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
}

fn default_max_pairs() -> usize {
    200
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSet {
    #[serde(default)]
    pub trace: Option<TraceSettings>,
    #[serde(default)]
    pub knockout: Option<KnockoutSettings>,
    #[serde(default)]
    pub extraction: Option<SampleSettings>,
    #[serde(default)]
    pub patch: Vec<PatchSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: CorpusSource,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub harvest: HarvestSettings,
    #[serde(default)]
    pub experiments: ExperimentSet,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub language: String,
    pub tried: usize,
    pub harvested: usize,
    pub dropped: usize,
    pub memorized: usize,
    pub memorized_harvested: usize,
    /// Harvested share of the memorized triplets.
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    /// Manifest of every stage of this run, fresh or resumed, in stage order.
    pub manifests: Vec<ExperimentManifest>,
    /// Stage directories that were reused from an earlier run.
    pub resumed: Vec<String>,
    pub train: TrainReport,
    pub harvest: Vec<HarvestSummary>,
    pub patch: Vec<(PatchSettings, ConditionReport)>,
}

struct Stages {
    log: ManifestLog,
    seed: u64,
    manifests: Vec<ExperimentManifest>,
    resumed: Vec<String>,
}

struct StageRefs {
    model_card: Option<String>,
    corpus_ref: Option<String>,
}

impl Stages {
    /// Runs `body` in a fresh stage directory unless a complete manifest for it exists.
    fn run<T>(
        &mut self,
        kind: &str,
        config: serde_json::Value,
        refs: StageRefs,
        load: impl FnOnce(&Path) -> Result<T>,
        body: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(T, String)> {
        let dir = format!("{kind}-{}", config_hash(kind, &config));
        let abs = self.log.root().join(&dir);
        if let Some(m) = self.log.completed(&dir)? {
            let value = load(&abs)?;
            self.manifests.push(m);
            self.resumed.push(dir.clone());
            return Ok((value, dir));
        }
        if abs.exists() {
            fs::remove_dir_all(&abs)?;
        }
        fs::create_dir_all(&abs)?;
        let mut manifest = ExperimentManifest {
            kind: kind.into(),
            dir: dir.clone(),
            model_card: refs.model_card,
            corpus_ref: refs.corpus_ref,
            seed: self.seed,
            config,
            outputs: vec![],
            tool_version: TOOL_VERSION.into(),
            status: StageStatus::Complete,
        };
        match body(&abs) {
            Ok(value) => {
                manifest.outputs = list_files(self.log.root(), &abs)?;
                self.log.append(&manifest)?;
                self.manifests.push(manifest);
                Ok((value, dir))
            }
            Err(e) => {
                manifest.status = StageStatus::Failed(e.to_string());
                self.log.append(&manifest)?;
                Err(Error::Pipeline(format!("stage {kind} failed: {e}")))
            }
        }
    }
}

fn list_files(root: &Path, dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p);
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

const SENTINEL: &str = "<extra_id_0>";

fn load_corpus(dir: &Path) -> Result<(Corpus, Vocab)> {
    let corpus = filter_trivial(&Corpus::load(&dir.join("corpus"))?);
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    Ok((corpus, vocab))
}

fn model_config(spec: &ModelSpec, vocab: &Vocab, seed: u64) -> ModelConfig {
    let ed = spec.arch == Arch::EncoderDecoder;
    ModelConfig {
        arch: spec.arch,
        n_layers_enc: if ed { spec.n_layers_enc.unwrap_or(spec.n_layers) } else { 0 },
        n_layers_dec: spec.n_layers,
        d_model: spec.d_model,
        n_heads: spec.n_heads,
        d_ff: spec.d_ff.unwrap_or(4 * spec.d_model),
        vocab_size: vocab.len(),
        max_seq: spec.max_seq,
        sentinel_ids: if ed { vocab.id(SENTINEL).into_iter().collect() } else { vec![] },
        seed,
    }
}

/// Writes `model_config.json` and `weights.json` into `dir`.
pub fn save_model_dir(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("model_config.json"), &model.config)?;
    model.weights.save(&dir.join("weights.json"))
}

/// Reads a directory written by [`save_model_dir`].
pub fn load_model_dir(dir: &Path) -> Result<Model> {
    let config: ModelConfig = read_json(&dir.join("model_config.json"))?;
    let weights = Weights::load(&config, &dir.join("weights.json"))?;
    Model::new(config, weights)
}

/// Deterministic subsample of the harvested examples.
fn pick(harvests: &BTreeMap<String, Vec<MemorizedExample>>, s: &SampleSettings, seed_value: u64, tag: &str) -> Result<Vec<MemorizedExample>> {
    let mut pool: Vec<MemorizedExample> = match &s.language {
        Some(l) => harvests.get(l).cloned().ok_or_else(|| Error::Config(format!("no harvest for language {l:?}")))?,
        None => harvests.values().flatten().cloned().collect(),
    };
    if pool.len() > s.max_examples {
        pool.shuffle(&mut seed::rng(seed_value, &["sample", tag]));
        pool.truncate(s.max_examples);
        pool.sort_by(|a, b| a.id.cmp(&b.id));
    }
    if pool.is_empty() {
        return Err(Error::Input(format!("{tag}: no harvested examples to run on")));
    }
    Ok(pool)
}

fn plot(enabled: bool, kind: PlotKind, csv: &Path, svg: &Path, title: &str) -> Result<()> {
    if enabled {
        emit_plot(kind, csv, svg, title)?;
    }
    Ok(())
}

/// Runs every stage of `cfg`, reusing stages whose manifests are already complete.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let mut st = Stages {
        log: ManifestLog::new(&cfg.out_dir),
        seed: cfg.seed,
        manifests: vec![],
        resumed: vec![],
    };
    let arch = cfg.model.arch;

    let corpus_cfg = json(&serde_json::json!({ "source": cfg.corpus, "arch": arch }))?;
    let ((corpus, vocab), corpus_dir) = st.run(
        "corpus",
        corpus_cfg,
        StageRefs { model_card: None, corpus_ref: None },
        load_corpus,
        |dir| {
            let raw = match &cfg.corpus {
                CorpusSource::Synthetic(spec) => gen_synthetic(spec)?,
                CorpusSource::Dir(p) => Corpus::load(p)?,
            };
            raw.save(&dir.join("corpus"))?;
            let sentinels = if arch == Arch::EncoderDecoder { vec![SENTINEL.to_string()] } else { vec![] };
            let vocab = build_vocab(&raw, &sentinels);
            vocab.save(&dir.join("vocab.json"))?;
            load_corpus(dir)
        },
    )?;
    let tags = corpus.language_tags();
    let sentinel = vocab.id(SENTINEL).filter(|_| arch == Arch::EncoderDecoder);
    let items = training_items(&corpus, &vocab, arch, sentinel, &tags);

    let train_cfg = json(&serde_json::json!({
        "corpus": corpus_dir, "model": cfg.model, "train": cfg.train, "seed": cfg.seed,
    }))?;
    let ((model, train_report), train_dir) = st.run(
        "train",
        train_cfg,
        StageRefs { model_card: None, corpus_ref: Some(corpus_dir.clone()) },
        |dir| Ok((load_model_dir(dir)?, read_json::<TrainReport>(&dir.join("train_report.json"))?)),
        |dir| {
            let (model, report) = match &cfg.model.checkpoint {
                Some(ck) => {
                    let model = load_model_dir(ck)?;
                    if model.config.vocab_size != vocab.len() {
                        return Err(Error::Config(format!(
                            "checkpoint vocab size {} does not match the corpus vocab {}",
                            model.config.vocab_size,
                            vocab.len()
                        )));
                    }
                    let by_key = memorized_by_key(&model, &items)?;
                    let hits = by_key.values().filter(|&&h| h).count();
                    let report = TrainReport {
                        steps_run: 0,
                        final_loss: f64::NAN,
                        memorization_rate: hits as f64 / by_key.len().max(1) as f64,
                        memorized_keys: hits,
                        total_keys: by_key.len(),
                        loss_history: vec![],
                    };
                    (model, report)
                }
                None => {
                    let mc = model_config(&cfg.model, &vocab, cfg.seed);
                    let opts = TrainOptions { seed: cfg.seed, ..cfg.train.clone() };
                    train_toy(&mc, &items, &opts)?
                }
            };
            save_model_dir(dir, &model)?;
            write_json(&dir.join("train_report.json"), &report)?;
            Ok((model, report))
        },
    )?;
    let model_card = Some(format!("{train_dir}/weights.json"));
    let engine = Engine::new(NativeBackend::new(Arc::new(model)));

    let harvest_cfg = json(&serde_json::json!({ "train": train_dir, "harvest": cfg.harvest, "seed": cfg.seed }))?;
    let ((harvests, summaries), harvest_dir) = st.run(
        "harvest",
        harvest_cfg,
        StageRefs { model_card: model_card.clone(), corpus_ref: Some(corpus_dir.clone()) },
        |dir| {
            let mut h = BTreeMap::new();
            for t in &tags {
                h.insert(t.clone(), load_examples(&dir.join(format!("examples_{t}.jsonl")))?);
            }
            Ok((h, read_csv::<HarvestSummary>(&dir.join("harvest_summary.csv"))?))
        },
        |dir| {
            let by_key = memorized_by_key(&engine.backend().model(), &items)?;
            let opts = HarvestOptions { seed: cfg.seed, max_new: cfg.harvest.max_new, max_prefix: cfg.harvest.max_prefix };
            let mut h = BTreeMap::new();
            let mut summaries = Vec::new();
            for t in &tags {
                let rep = harvest(engine.backend(), &corpus, &vocab, t, &opts)?;
                let suffix = format!("@{t}");
                let memorized: BTreeSet<&str> =
                    by_key.iter().filter(|(k, &v)| v && k.ends_with(&suffix)).map(|(k, _)| k.as_str()).collect();
                let both = rep.examples.iter().filter(|e| memorized.contains(e.id.as_str())).count();
                summaries.push(HarvestSummary {
                    language: t.clone(),
                    tried: rep.tried,
                    harvested: rep.examples.len(),
                    dropped: rep.dropped.len(),
                    memorized: memorized.len(),
                    memorized_harvested: both,
                    recovery: if memorized.is_empty() { 0.0 } else { both as f64 / memorized.len() as f64 },
                });
                save_examples(&dir.join(format!("examples_{t}.jsonl")), &rep.examples)?;
                write_jsonl(&dir.join(format!("dropped_{t}.jsonl")), &rep.dropped)?;
                h.insert(t.clone(), rep.examples);
            }
            write_csv(
                &dir.join("harvest_summary.csv"),
                &summaries,
                &["language", "tried", "harvested", "dropped", "memorized", "memorized_harvested", "recovery"],
            )?;
            Ok((h, summaries))
        },
    )?;
    let refs = || StageRefs { model_card: model_card.clone(), corpus_ref: Some(corpus_dir.clone()) };

    if let Some(ts) = &cfg.experiments.trace {
        let c = json(&serde_json::json!({ "harvest": harvest_dir, "trace": ts, "seed": cfg.seed }))?;
        st.run("trace", c, refs(), |_| Ok(()), |dir| {
            let examples = pick(&harvests, &ts.sample, cfg.seed, "trace")?;
            let tc = TraceConfig {
                noise_multiplier: ts.noise_multiplier,
                n_samples: ts.n_samples,
                window: ts.window,
                kinds: ts.kinds.clone(),
                seed: cfg.seed,
            };
            let report = trace_grid(&engine, &examples, &tc)?;
            let csv = dir.join("trace.csv");
            write_csv(&csv, &trace_rows(&report.grids), TRACE_HEADER)?;
            write_jsonl(&dir.join("trace_raw.jsonl"), &report.grids)?;
            write_jsonl(&dir.join("trace_failures.jsonl"), &report.failures)?;
            plot(cfg.plots, PlotKind::Trace, &csv, &dir.join("trace.svg"), "causal trace")
        })?;
    }

    if let Some(ks) = &cfg.experiments.knockout {
        let c = json(&serde_json::json!({ "harvest": harvest_dir, "knockout": ks }))?;
        st.run("knockout", c, refs(), |_| Ok(()), |dir| {
            let examples = pick(&harvests, &ks.sample, cfg.seed, "knockout")?;
            let parts = if ks.partitions.is_empty() { Partition::for_arch(arch) } else { ks.partitions.clone() };
            let curves = parts
                .iter()
                .map(|&p| knockout_curve(&engine, &examples, p, ks.window, ks.mode))
                .collect::<Result<Vec<_>>>()?;
            let csv = dir.join("knockout.csv");
            write_csv(&csv, &knockout_rows(&curves), KNOCKOUT_HEADER)?;
            let raw: Vec<_> = curves
                .iter()
                .flat_map(|c| c.raw.iter().map(move |r| (c.partition, r)))
                .map(|(p, r)| serde_json::json!({ "partition": p, "example_id": r.example_id, "center_layer": r.center_layer, "p_orig": r.p_orig, "p_knock": r.p_knock }))
                .collect();
            write_jsonl(&dir.join("knockout_raw.jsonl"), &raw)?;
            plot(cfg.plots, PlotKind::Knockout, &csv, &dir.join("knockout.svg"), "attention knockout")
        })?;
    }

    if let Some(es) = &cfg.experiments.extraction {
        let c = json(&serde_json::json!({ "harvest": harvest_dir, "extraction": es }))?;
        st.run("extraction", c, refs(), |_| Ok(()), |dir| {
            let examples = pick(&harvests, es, cfg.seed, "extraction")?;
            let profile = extraction_profile(engine.backend(), &examples)?;
            let csv = dir.join("extraction.csv");
            write_csv(&csv, &extraction_rows(&profile), EXTRACTION_HEADER)?;
            write_jsonl(&dir.join("extraction_raw.jsonl"), &profile.per_example)?;
            plot(cfg.plots, PlotKind::Extraction, &csv, &dir.join("extraction.svg"), "extraction rate")
        })?;
    }

    let mut patch_reports = Vec::new();
    for ps in &cfg.experiments.patch {
        let condition = Condition::from_number(ps.condition)?;
        let context_lang = match (&ps.context_lang, condition) {
            (Some(l), _) => l.clone(),
            (None, Condition::SameLangDiffRelDiffSubj) => ps.patch_lang.clone(),
            (None, _) => tags
                .iter()
                .find(|t| **t != ps.patch_lang)
                .cloned()
                .ok_or_else(|| Error::Config("cross-language patching needs two languages".into()))?,
        };
        let c = json(&serde_json::json!({ "harvest": harvest_dir, "patch": ps, "context_lang": context_lang, "seed": cfg.seed }))?;
        let (report, _) = st.run(
            "patch",
            c,
            refs(),
            |dir| read_json::<ConditionReport>(&dir.join("patch_report.json")),
            |dir| {
                let pairs = build_pairs(&corpus, &vocab, &harvests, condition, &ps.patch_lang, &context_lang);
                let pairs = sample_pairs(pairs, ps.max_pairs, cfg.seed);
                let outcomes = patch_all(&engine, &pairs)?;
                let report = condition_report(&outcomes);
                let n = condition.number();
                write_jsonl(&dir.join("patch_raw.jsonl"), &patch_raw_rows(&outcomes))?;
                let layers = dir.join("patch_layers.csv");
                write_csv(&layers, &patch_layer_rows(n, &report), PATCH_LAYER_HEADER)?;
                write_csv(&dir.join("patch_proportions.csv"), &patch_proportion_rows(n, &report), PATCH_PROPORTION_HEADER)?;
                write_json(&dir.join("patch_report.json"), &report)?;
                plot(cfg.plots, PlotKind::PatchCurve, &layers, &dir.join("patch_curve.svg"), "activation patching")?;
                plot(cfg.plots, PlotKind::PatchHistogram, &layers, &dir.join("patch_labels.svg"), "patched predictions")?;
                Ok(report)
            },
        )?;
        patch_reports.push((ps.clone(), report));
    }

    Ok(PipelineOutcome {
        out_dir: cfg.out_dir.clone(),
        manifests: st.manifests,
        resumed: st.resumed,
        train: train_report,
        harvest: summaries,
        patch: patch_reports,
    })
}
