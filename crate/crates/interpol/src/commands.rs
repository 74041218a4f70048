//! The four subcommands. Each one reads and writes files under a run
//! directory `<out>/run-<config digest>`:
//!
//! ```text
//! data/corpus.tsv  data/split.json  data/vocab.json
//! checkpoints/<name>/{manifest.json, params.bin, loss_trace.json}
//! traces/<request digest>.json
//! reports/<mode>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use interpol_core::corpus::{generate_synthetic_corpus, segment_stories, split_corpus, DEFAULT_GRAMMAR};
use interpol_core::eval::{
    compare_pipelines_proxy, compare_schedules, corpus_digest, hex, ranker_metrics, run_table3_ablation,
    wordpiece_perplexity, REFERENCE_HUMAN_COHERENCE, REFERENCE_PERPLEXITY,
};
use interpol_core::generator::{build_interpolation_example, build_l2r_example, train_generator};
use interpol_core::interpolator::{generate_story, generate_story_noranking};
use interpol_core::ranker::{build_ranker_dataset, train_ranker};
use interpol_core::{
    CoreError, CorpusSplit, GenerationContext, GeneratorModel, InterpolationRequest, LabeledSegment, RankerModel,
    Schedule, Story, TrainHyper, TrainingExample, Transformer, Vocab,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CorpusSource, RunConfig};
use crate::error::UsageError;
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::corpus::{load_corpus, parse_plain_lines, write_plain_lines, CorpusFormat};
use crate::io::labels::save_labeled;
use crate::io::vocab::{load_vocab, save_vocab};
use crate::io::write_json;

/// Locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out: &Path, config: &RunConfig) -> Self {
        RunDir { root: out.join(format!("run-{}", config.digest())) }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("data/corpus.tsv")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("data/split.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("data/vocab.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn report(&self, mode: EvalMode) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", mode.name()))
    }
}

/// Effective configuration plus the run directory it maps to.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub run: RunDir,
}

impl Context {
    /// The run directory is named after the config before the seed override,
    /// so every command of one config shares it.
    pub fn new(config: RunConfig, out: &Path, seed: Option<u64>) -> Self {
        let run = RunDir::new(out, &config);
        let mut config = config;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        Context { config, run }
    }
}

/// Written to `data/split.json`. Ids index lines of `data/corpus.tsv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub source: String,
    /// Story id in the original input, per corpus line.
    pub source_ids: Vec<String>,
    pub corpus_digest: String,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

pub struct Data {
    pub split: CorpusSplit,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Default)]
pub struct MakeDataArgs {
    /// Overrides `corpus.size` for synthetic corpora.
    pub n: Option<usize>,
    /// Overrides `corpus.path` and `corpus.source`.
    pub input: Option<(PathBuf, CorpusFormat)>,
    pub synthetic: bool,
}

pub fn make_data(ctx: &Context, args: &MakeDataArgs) -> Result<SplitManifest> {
    let cfg = &ctx.config;
    let (stories, source) = match (&args.input, args.synthetic, cfg.corpus_source) {
        (Some(_), true, _) => return Err(UsageError("--synthetic and --input are mutually exclusive".into()).into()),
        (Some((path, format)), false, _) => (load_corpus(path, *format)?, format!("{format}:{}", path.display())),
        (None, false, CorpusSource::File(format)) => {
            let path = cfg.corpus_path.as_ref().expect("validated");
            (load_corpus(path, format)?, format!("{format}:{}", path.display()))
        }
        (None, _, _) => {
            let grammar = match &cfg.corpus_grammar {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading grammar {}", p.display()))?,
                None => DEFAULT_GRAMMAR.to_string(),
            };
            let n = args.n.unwrap_or(cfg.corpus_size);
            (generate_synthetic_corpus(&grammar, n, cfg.seed)?, format!("synthetic:{n}"))
        }
    };
    let lines: Vec<Vec<String>> = stories.iter().map(|s| s.sentences().to_vec()).collect();
    write_plain_lines(&ctx.run.corpus(), &lines)?;
    let renamed = lines
        .into_iter()
        .enumerate()
        .map(|(i, s)| Story::new(i.to_string(), s))
        .collect::<interpol_core::Result<Vec<_>>>()?;
    let split = split_corpus(&renamed, cfg.split, cfg.seed)?;
    let ids = |v: &[Story]| v.iter().map(|s| s.id().to_string()).collect::<Vec<_>>();
    let manifest = SplitManifest {
        seed: cfg.seed,
        ratios: cfg.split,
        source,
        source_ids: ids(&stories),
        corpus_digest: corpus_digest(&renamed),
        train: ids(&split.train),
        dev: ids(&split.dev),
        test: ids(&split.test),
    };
    write_json(&ctx.run.split(), &manifest)?;
    let vocab = Vocab::train(&split.train, cfg.vocab_size)?;
    save_vocab(&ctx.run.vocab(), &vocab)?;
    log::info!(
        "{} stories ({} train, {} dev, {} test), vocabulary {} in {}",
        renamed.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        vocab.len(),
        ctx.run.root.display()
    );
    Ok(manifest)
}

pub fn load_data(run: &RunDir) -> Result<Data> {
    let missing = |p: &Path| format!("{} missing; run make-data first", p.display());
    let corpus_path = run.corpus();
    let text = fs::read_to_string(&corpus_path).with_context(|| missing(&corpus_path))?;
    let stories = parse_plain_lines(&text, &corpus_path)?;
    let split_path = run.split();
    let split_text = fs::read_to_string(&split_path).with_context(|| missing(&split_path))?;
    let manifest: SplitManifest =
        serde_json::from_str(&split_text).with_context(|| format!("parsing {}", split_path.display()))?;
    let pick = |ids: &[String]| -> Result<Vec<Story>> {
        ids.iter()
            .map(|id| {
                let i: usize = id.parse().with_context(|| format!("bad story id {id:?} in split"))?;
                stories.get(i).cloned().with_context(|| format!("split refers to missing story {i}"))
            })
            .collect()
    };
    let split = CorpusSplit { train: pick(&manifest.train)?, dev: pick(&manifest.dev)?, test: pick(&manifest.test)? };
    let vocab = load_vocab(&run.vocab())?;
    Ok(Data { split, vocab })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelType {
    Generator,
    L2r,
    Ranker,
}

impl ModelType {
    pub fn name(self) -> &'static str {
        match self {
            ModelType::Generator => "generator",
            ModelType::L2r => "l2r",
            ModelType::Ranker => "ranker",
        }
    }

    fn objective(self) -> &'static str {
        match self {
            ModelType::Generator => "interpolation",
            ModelType::L2r => "left-to-right",
            ModelType::Ranker => "coherence",
        }
    }
}

/// Per-checkpoint seed: the run seed mixed with the checkpoint name, so two
/// rankers trained under one seed but different names start apart.
pub fn derived_seed(seed: u64, name: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{name}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Every ordered triple `i < j < k` of each story: `s_j` between `s_i` and
/// `s_k`. Examples longer than `max_len` are dropped and counted.
pub fn interpolation_examples(
    stories: &[Story],
    vocab: &Vocab,
    max_len: usize,
) -> interpol_core::Result<(Vec<TrainingExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for story in stories {
        let x = story.sentences();
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                for k in j + 1..x.len() {
                    let ctx = GenerationContext::new(x[i].clone(), x[k].clone());
                    keep(build_interpolation_example(&ctx, &x[j], vocab, max_len), &mut out, &mut skipped)?;
                }
            }
        }
    }
    Ok((out, skipped))
}

/// Consecutive sentence pairs.
pub fn l2r_examples(
    stories: &[Story],
    vocab: &Vocab,
    max_len: usize,
) -> interpol_core::Result<(Vec<TrainingExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for story in stories {
        for w in story.sentences().windows(2) {
            keep(build_l2r_example(&w[0], &w[1], vocab, max_len), &mut out, &mut skipped)?;
        }
    }
    Ok((out, skipped))
}

fn keep(
    example: interpol_core::Result<TrainingExample>,
    out: &mut Vec<TrainingExample>,
    skipped: &mut usize,
) -> interpol_core::Result<()> {
    match example {
        Ok(e) => out.push(e),
        Err(CoreError::Length { .. }) => *skipped += 1,
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn ranker_data(stories: &[Story], cfg: &RunConfig, seed: u64) -> interpol_core::Result<Vec<LabeledSegment>> {
    let segments = segment_stories(stories, cfg.segment_min, cfg.segment_max)?;
    build_ranker_dataset(&segments, stories, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: String,
    pub name: String,
    pub seed: u64,
    pub examples: usize,
    pub skipped: usize,
    pub epoch_losses: Vec<f64>,
    /// Dev perplexity for generators, dev accuracy for rankers.
    pub dev_metric: Option<f64>,
    pub digest: String,
}

pub fn train(ctx: &Context, kind: ModelType, name: Option<&str>) -> Result<TrainSummary> {
    let cfg = &ctx.config;
    let name = name.unwrap_or(kind.name());
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(UsageError(format!("bad checkpoint name {name:?}")).into());
    }
    let data = load_data(&ctx.run)?;
    let seed = derived_seed(cfg.seed, name);
    let model_cfg = cfg.model_config(data.vocab.len());
    let dir = ctx.run.checkpoint(name);
    let hyper = |h: &TrainHyper| TrainHyper { seed, ..h.clone() };

    let (net, examples, skipped, trace, dev_metric): (Transformer<f32>, _, _, _, _) = match kind {
        ModelType::Generator | ModelType::L2r => {
            let build = if kind == ModelType::Generator { interpolation_examples } else { l2r_examples };
            let (train, skipped) = build(&data.split.train, &data.vocab, model_cfg.context)?;
            if train.is_empty() {
                bail!("no training examples; the train split is empty or every example exceeds the context");
            }
            if skipped > 0 {
                log::warn!("skipped {skipped} examples longer than the context of {}", model_cfg.context);
            }
            let mut model = GeneratorModel::<f32>::new(model_cfg, seed)?;
            let trace = train_generator(&mut model, &train, &hyper(&cfg.generator))?;
            let (dev, _) = build(&data.split.dev, &data.vocab, model.config().context)?;
            let dev_metric = if dev.is_empty() { None } else { Some(wordpiece_perplexity(&model, &dev)?) };
            if let Some(p) = dev_metric {
                println!("{name}: dev perplexity {p:.4} over {} examples", dev.len());
            }
            (model.net().clone(), train.len(), skipped, trace, dev_metric)
        }
        ModelType::Ranker => {
            let train = ranker_data(&data.split.train, cfg, seed)?;
            save_labeled(&dir.join("train_segments.tsv"), &dir.join("train_labels.tsv"), &train)?;
            let mut model = RankerModel::<f32>::new(model_cfg, seed)?;
            let trace = train_ranker(&mut model, &train, &data.vocab, &hyper(&cfg.ranker))?;
            let dev_metric = if data.split.dev.is_empty() {
                None
            } else {
                let dev = ranker_data(&data.split.dev, cfg, seed.wrapping_add(1))?;
                let m = ranker_metrics(&model, &dev, &data.vocab)?;
                println!("{name}: dev accuracy {:.4} over {} segments", m.accuracy, m.count);
                Some(m.accuracy)
            };
            (model.net().clone(), train.len(), 0, trace, dev_metric)
        }
    };
    let manifest = save_checkpoint(&dir, &net, kind.objective(), "../../data/vocab.json")?;
    let summary = TrainSummary {
        kind: kind.name().into(),
        name: name.into(),
        seed,
        examples,
        skipped,
        epoch_losses: trace.epoch_losses,
        dev_metric,
        digest: manifest.digest,
    };
    write_json(&dir.join("loss_trace.json"), &summary)?;
    log::info!("saved {} to {}", name, dir.display());
    Ok(summary)
}

fn load_net(ctx: &Context, name: &str, objective: &str) -> Result<Transformer<f32>> {
    let dir = ctx.run.checkpoint(name);
    if !dir.exists() {
        return Err(UsageError(format!("no checkpoint `{name}` in {}; run train first", ctx.run.root.display())).into());
    }
    let (manifest, net) = load_checkpoint(&dir)?;
    if manifest.objective != objective {
        return Err(UsageError(format!(
            "checkpoint `{name}` has objective {}, expected {objective}",
            manifest.objective
        ))
        .into());
    }
    Ok(net)
}

pub fn load_generator(ctx: &Context, name: &str, kind: ModelType) -> Result<GeneratorModel<f32>> {
    Ok(GeneratorModel::from_transformer(load_net(ctx, name, kind.objective())?)?)
}

pub fn load_ranker(ctx: &Context, name: &str) -> Result<RankerModel<f32>> {
    Ok(RankerModel::from_transformer(load_net(ctx, name, ModelType::Ranker.objective())?)?)
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub beginning: String,
    pub ending: String,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub schedule: Option<Schedule>,
    pub no_ranking: bool,
    pub generator: String,
    pub ranker: String,
}

pub fn generate(ctx: &Context, args: &GenerateArgs) -> Result<(Vec<String>, PathBuf)> {
    let cfg = &ctx.config;
    let request = InterpolationRequest {
        beginning: args.beginning.clone(),
        ending: args.ending.clone(),
        k: args.k.unwrap_or(cfg.k),
        schedule: args.schedule.unwrap_or(cfg.schedule),
        m: args.m.unwrap_or(cfg.m),
        sampler: cfg.sampler(cfg.seed),
    };
    request.validate().map_err(|e| UsageError(e.to_string()))?;
    let vocab = load_vocab(&ctx.run.vocab())?;
    let generator = load_generator(ctx, &args.generator, ModelType::Generator)?;
    let (story, trace) = if args.no_ranking {
        generate_story_noranking(&request, &generator, &vocab)?
    } else {
        let ranker = load_ranker(ctx, &args.ranker)?;
        generate_story(&request, &generator, &ranker, &vocab)?
    };
    let key = serde_json::to_string(&trace.request)?;
    let tag = if args.no_ranking { "noranking" } else { "ranked" };
    let path = ctx.run.traces().join(format!("{tag}-{}.json", &hex(&Sha256::digest(key.as_bytes()))[..16]));
    write_json(&path, &trace)?;
    Ok((story.into_sentences(), path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Table3,
    Ranker,
    Proxy,
    Schedules,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Table3 => "table3",
            EvalMode::Ranker => "ranker",
            EvalMode::Proxy => "proxy",
            EvalMode::Schedules => "schedules",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub mode: EvalMode,
    pub generator: String,
    pub l2r: String,
    pub loop_ranker: String,
    pub judge_ranker: String,
}

/// Runs one evaluation, writes its JSON report and returns a text table.
pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<(String, PathBuf)> {
    let cfg = &ctx.config;
    let data = load_data(&ctx.run)?;
    let test = &data.split.test;
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let path = ctx.run.report(args.mode);
    let table = match args.mode {
        EvalMode::Table3 => {
            let l2r = load_generator(ctx, &args.l2r, ModelType::L2r)?;
            let nr = load_generator(ctx, &args.generator, ModelType::Generator)?;
            let report = run_table3_ablation(&l2r, &nr, test, &data.vocab, cfg.seed)?;
            write_json(&path, &report)?;
            let mut t = format!("{:<6} {:<16} {:>10} {:>8}\n", "model", "setting", "perplexity", "tokens");
            for c in &report.cells {
                t += &format!("{:<6} {:<16} {:>10.4} {:>8}\n", c.condition, c.setting, c.perplexity, c.tokens);
            }
            let [a, b, c, d] = REFERENCE_PERPLEXITY;
            t += &format!("reference (large corpus): L2R {a} / {c}, NR {b} / {d} (single-sentence / full-story)\n");
            t
        }
        EvalMode::Ranker => {
            let ranker = load_ranker(ctx, &args.loop_ranker)?;
            let seed = derived_seed(cfg.seed, "ranker-test");
            let report = ranker_metrics(&ranker, &ranker_data(test, cfg, seed)?, &data.vocab)?;
            write_json(&path, &report)?;
            let mut t = format!("accuracy {:.4} over {} segments\n", report.accuracy, report.count);
            t += &format!("coherent {:.4}  incoherent {:.4}\n", report.positive_accuracy, report.negative_accuracy);
            for p in &report.per_type {
                t += &format!("  {:<13} {:.4} ({})\n", p.negative_type.name(), p.accuracy, p.count);
            }
            t
        }
        EvalMode::Proxy => {
            let generator = load_generator(ctx, &args.generator, ModelType::Generator)?;
            let loop_ranker = load_ranker(ctx, &args.loop_ranker)?;
            let judge = load_ranker(ctx, &args.judge_ranker)?;
            if loop_ranker.net().digest() == judge.net().digest() {
                return Err(UsageError(format!(
                    "judge ranker `{}` has the same weights as loop ranker `{}`; train a separate judge",
                    args.judge_ranker, args.loop_ranker
                ))
                .into());
            }
            let pairs: Vec<(String, String)> = test
                .iter()
                .take(cfg.proxy_pairs)
                .map(|s| (s.beginning().to_string(), s.ending().to_string()))
                .collect();
            let mut template = InterpolationRequest::new("", "", cfg.k);
            template.m = cfg.m;
            template.schedule = cfg.schedule;
            template.sampler = cfg.sampler(cfg.seed);
            let report = compare_pipelines_proxy(&generator, &loop_ranker, &judge, &pairs, &template, &data.vocab)?;
            write_json(&path, &report)?;
            let (human_nr, human_full) = REFERENCE_HUMAN_COHERENCE;
            format!(
                "judge coherence over {} pairs: full pipeline {:.4}, no ranking {:.4}, full >= no ranking in {:.3}\n\
                 reference human-judged coherence: no ranking {human_nr}, full pipeline {human_full}\n",
                report.pairs.len(),
                report.mean_interpol,
                report.mean_noranking,
                report.win_fraction
            )
        }
        EvalMode::Schedules => {
            let generator = load_generator(ctx, &args.generator, ModelType::Generator)?;
            let report = compare_schedules(&generator, test, &data.vocab, cfg.seed)?;
            write_json(&path, &report)?;
            format!(
                "random {:.4}  sequential {:.4}  relative difference {:.4} over {} tokens\n",
                report.random_perplexity, report.sequential_perplexity, report.relative_difference, report.tokens
            )
        }
    };
    Ok((table, path))
}
