use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use recall_lab::causal::{trace_grid, TraceConfig};
use recall_lab::corpus::{build_vocab, filter_trivial, gen_synthetic, training_items, Corpus, PseudoLanguage, SynthSpec, WordOrder};
use recall_lab::engine::conformance::conformance_suite;
use recall_lab::engine::wire::{spawn_server, RemoteBackend};
use recall_lab::engine::{Backend, Engine, NativeBackend};
use recall_lab::extraction::extraction_profile;
use recall_lab::harvest::{harvest, load_examples, save_examples, HarvestOptions, MemorizedExample};
use recall_lab::knockout::{knockout_curve, Partition};
use recall_lab::patch::{build_pairs, condition_report, patch_all, sample_pairs, Condition};
use recall_lab::report::*;
use recall_lab::runtime::{train_toy, Arch, KnockoutMode, ModelConfig, SiteKind, TrainOptions, Vocab};
use recall_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "recall-lab", version, about = "Factual-recall interpretability experiments on toy transformers")]
struct Cli {
    /// `native` (needs --model) or `remote:<host:port>`.
    #[arg(long, global = true, default_value = "native")]
    backend: String,
    /// Model directory with model_config.json and weights.json.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotArg {
    Trace,
    Knockout,
    Extraction,
    PatchCurve,
    PatchHistogram,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pseudo-language corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        relations: usize,
        #[arg(long, default_value_t = 16)]
        subjects: usize,
        #[arg(long, default_value_t = 0.0)]
        collision: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `tag:order[:article]`, e.g. `xa:svo` or `yb:sov:ne`. Repeatable.
        #[arg(long = "lang", default_values_t = ["xa:svo".to_string(), "yb:sov:ne".to_string()])]
        langs: Vec<String>,
    },
    /// Train a toy model on a corpus and write it to --out.
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "decoder-only")]
        arch: ArchArg,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 48)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Find memorized triplets of one language.
    Harvest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        max_prefix: usize,
    },
    /// Causal tracing grid over harvested examples.
    Trace {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 3.0)]
        noise_mult: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attention knockout curve for one partition.
    Knockout {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        partition: Partition,
        #[arg(long)]
        window: Option<usize>,
        /// Zero post-softmax weights instead of masking logits.
        #[arg(long)]
        no_renorm: bool,
    },
    /// Extraction rates per layer and sublayer.
    Extract {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Last-token activation patching for one condition.
    Patch {
        #[arg(long)]
        corpus: PathBuf,
        /// Harvested examples, one file per language. Repeatable.
        #[arg(long = "examples", required = true)]
        examples: Vec<PathBuf>,
        #[arg(long)]
        condition: u8,
        #[arg(long)]
        patch_lang: String,
        #[arg(long)]
        context_lang: Option<String>,
        #[arg(long, default_value_t = 200)]
        max_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an aggregate CSV as an SVG chart.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
    /// Run the conformance suite against the selected backend.
    ServeCheck,
    /// Serve the native model over the wire protocol until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Run a full pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn backend(cli: &Cli) -> Result<Arc<dyn Backend>> {
    if let Some(addr) = cli.backend.strip_prefix("remote:") {
        return Ok(Arc::new(RemoteBackend::connect(addr)?));
    }
    if cli.backend != "native" {
        return Err(Error::Config(format!("unknown backend {:?}", cli.backend)));
    }
    let dir = cli.model.as_ref().ok_or_else(|| Error::Config("--model is required with the native backend".into()))?;
    Ok(Arc::new(NativeBackend::new(Arc::new(load_model_dir(dir)?))))
}

fn vocab_for(cli: &Cli, corpus: &Corpus) -> Result<Vocab> {
    match cli.model.as_ref().map(|d| d.join("vocab.json")).filter(|p| p.exists()) {
        Some(p) => Vocab::load(&p),
        None => Ok(build_vocab(corpus, &[])),
    }
}

fn parse_lang(spec: &str) -> Result<PseudoLanguage> {
    let parts: Vec<&str> = spec.split(':').collect();
    let order = match parts.get(1).map(|s| s.to_ascii_lowercase()) {
        Some(o) if o == "svo" => WordOrder::Svo,
        Some(o) if o == "sov" => WordOrder::Sov,
        Some(o) if o == "vso" => WordOrder::Vso,
        _ => return Err(Error::Input(format!("bad language spec {spec:?}, expected tag:svo|sov|vso[:article]"))),
    };
    let lang = PseudoLanguage::new(parts[0], order);
    Ok(match parts.get(2) {
        Some(a) => lang.with_article(a),
        None => lang,
    })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Corpus { out, relations, subjects, collision, seed, langs } => {
            let langs = langs.iter().map(|l| parse_lang(l)).collect::<Result<Vec<_>>>()?;
            let corpus = gen_synthetic(&SynthSpec::new(*relations, *subjects, langs, *collision, *seed))?;
            corpus.save(out)?;
            for c in corpus.counts() {
                println!("{c:?}");
            }
        }
        Cmd::TrainToy { corpus, out, arch, layers, d_model, heads, steps, seed } => {
            let corpus = filter_trivial(&Corpus::load(corpus)?);
            let arch = match arch {
                ArchArg::DecoderOnly => Arch::DecoderOnly,
                ArchArg::EncoderDecoder => Arch::EncoderDecoder,
            };
            let sentinels = if arch == Arch::EncoderDecoder { vec!["<extra_id_0>".to_string()] } else { vec![] };
            let vocab = build_vocab(&corpus, &sentinels);
            let sentinel = vocab.id("<extra_id_0>");
            let items = training_items(&corpus, &vocab, arch, sentinel, &corpus.language_tags());
            let mut cfg = ModelConfig::toy_decoder(*layers, *d_model, *heads, vocab.len(), *seed);
            if arch == Arch::EncoderDecoder {
                cfg.arch = arch;
                cfg.n_layers_enc = *layers;
                cfg.sentinel_ids = sentinel.into_iter().collect();
            }
            let opts = TrainOptions { steps: *steps, seed: *seed, ..TrainOptions::default() };
            let (model, report) = train_toy(&cfg, &items, &opts)?;
            save_model_dir(out, &model)?;
            vocab.save(&out.join("vocab.json"))?;
            println!(
                "steps {} loss {:.4} memorized {}/{}",
                report.steps_run, report.final_loss, report.memorized_keys, report.total_keys
            );
        }
        Cmd::Harvest { corpus, lang, out, seed, max_prefix } => {
            let b = backend(cli)?;
            let corpus = filter_trivial(&Corpus::load(corpus)?);
            let vocab = vocab_for(cli, &corpus)?;
            let opts = HarvestOptions { seed: *seed, max_prefix: *max_prefix, ..HarvestOptions::default() };
            let rep = harvest(b.as_ref(), &corpus, &vocab, lang, &opts)?;
            save_examples(out, &rep.examples)?;
            println!("{lang}: harvested {} of {} ({} dropped)", rep.examples.len(), rep.tried, rep.dropped.len());
        }
        Cmd::Trace { examples, out, window, samples, noise_mult, seed } => {
            let engine = Engine::new(backend(cli)?);
            let cfg = TraceConfig {
                noise_multiplier: *noise_mult,
                n_samples: *samples,
                window: *window,
                kinds: vec![SiteKind::StateH, SiteKind::MlpF, SiteKind::SelfAttnS],
                seed: *seed,
            };
            let report = trace_grid(&engine, &load_examples(examples)?, &cfg)?;
            write_csv(out, &trace_rows(&report.grids), TRACE_HEADER)?;
            for (id, e) in &report.failures {
                eprintln!("skipped {id}: {e}");
            }
            println!("sigma {:.4}, {} grids", report.sigma, report.grids.len());
        }
        Cmd::Knockout { examples, out, partition, window, no_renorm } => {
            let engine = Engine::new(backend(cli)?);
            let mode = if *no_renorm { KnockoutMode::ZeroNoRenorm } else { KnockoutMode::NegInf };
            let curve = knockout_curve(&engine, &load_examples(examples)?, *partition, *window, mode)?;
            write_csv(out, &knockout_rows(std::slice::from_ref(&curve)), KNOCKOUT_HEADER)?;
            for p in &curve.points {
                println!("layer {:>2}  {:+.4}  (n={})", p.center_layer, p.mean_rel_diff, p.n);
            }
        }
        Cmd::Extract { examples, out } => {
            let b = backend(cli)?;
            let profile = extraction_profile(b.as_ref(), &load_examples(examples)?)?;
            write_csv(out, &extraction_rows(&profile), EXTRACTION_HEADER)?;
            println!("final-state rate {:.3} over {} examples", profile.final_state_rate, profile.n_examples);
        }
        Cmd::Patch { corpus, examples, condition, patch_lang, context_lang, max_pairs, seed, out } => {
            let engine = Engine::new(backend(cli)?);
            let corpus = filter_trivial(&Corpus::load(corpus)?);
            let vocab = vocab_for(cli, &corpus)?;
            let mut harvests: BTreeMap<String, Vec<MemorizedExample>> = BTreeMap::new();
            for f in examples {
                for ex in load_examples(f)? {
                    harvests.entry(ex.language.clone()).or_default().push(ex);
                }
            }
            let condition = Condition::from_number(*condition)?;
            let ctx = context_lang.clone().unwrap_or_else(|| patch_lang.clone());
            let pairs = sample_pairs(build_pairs(&corpus, &vocab, &harvests, condition, patch_lang, &ctx), *max_pairs, *seed);
            let outcomes = patch_all(&engine, &pairs)?;
            let report = condition_report(&outcomes);
            let n = condition.number();
            write_jsonl(&out.join("patch_raw.jsonl"), &patch_raw_rows(&outcomes))?;
            write_csv(&out.join("patch_layers.csv"), &patch_layer_rows(n, &report), PATCH_LAYER_HEADER)?;
            write_csv(&out.join("patch_proportions.csv"), &patch_proportion_rows(n, &report), PATCH_PROPORTION_HEADER)?;
            println!("{} pairs", report.n_pairs);
            for l in &report.layers {
                println!("layer {:>2}  modal {}", l.layer, l.modal().map_or("-".to_string(), |m| m.to_string()));
            }
        }
        Cmd::Report { csv, kind, out, title } => {
            let kind = match kind {
                PlotArg::Trace => PlotKind::Trace,
                PlotArg::Knockout => PlotKind::Knockout,
                PlotArg::Extraction => PlotKind::Extraction,
                PlotArg::PatchCurve => PlotKind::PatchCurve,
                PlotArg::PatchHistogram => PlotKind::PatchHistogram,
            };
            emit_plot(kind, csv, out, title)?;
        }
        Cmd::ServeCheck => {
            let b = backend(cli)?;
            let report = conformance_suite(b.as_ref());
            print!("{report}");
            if !report.all_passed() {
                return Err(Error::Remote { code: "conformance".into(), message: "conformance checks failed".into() });
            }
        }
        Cmd::Serve { addr } => {
            let server = spawn_server(backend(cli)?, addr.as_str())?;
            println!("listening on {}", server.addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Run { config } => {
            let cfg = PipelineConfig::load(config)?;
            let outcome = run_pipeline(&cfg)?;
            print_outcome(&outcome, &cfg.out_dir);
        }
    }
    Ok(())
}

fn print_outcome(o: &PipelineOutcome, out: &Path) {
    println!("memorization {:.3} ({}/{})", o.train.memorization_rate, o.train.memorized_keys, o.train.total_keys);
    for h in &o.harvest {
        println!("harvest {}: {} of {} memorized recovered", h.language, h.memorized_harvested, h.memorized);
    }
    for (p, r) in &o.patch {
        println!("patch condition {} ({}): cross-before-patch ordering {}", p.condition, p.patch_lang, r.cross_before_patch());
    }
    for m in &o.manifests {
        println!("{} {}", m.dir, if o.resumed.contains(&m.dir) { "(resumed)" } else { "" });
    }
    println!("manifests in {}", out.join("manifests.jsonl").display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
