//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. [`RunConfig::canonical`]
//! renders every key in a fixed order and its digest names the run
//! directory.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use interpol_core::eval::hex;
use interpol_core::{ModelConfig, SamplerConfig, Schedule, TrainHyper};
use sha2::{Digest, Sha256};

use crate::io::corpus::CorpusFormat;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusSource {
    Synthetic,
    File(CorpusFormat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_source: CorpusSource,
    /// Input file for non-synthetic corpora.
    pub corpus_path: Option<PathBuf>,
    /// Grammar file for synthetic corpora; the built-in grammar when unset.
    pub corpus_grammar: Option<PathBuf>,
    pub corpus_size: usize,
    pub split: [f64; 3],
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub context: usize,
    pub generator: TrainHyper,
    pub ranker: TrainHyper,
    pub segment_min: usize,
    pub segment_max: usize,
    pub k: usize,
    pub m: usize,
    pub schedule: Schedule,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub proxy_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hyper = TrainHyper { epochs: 4, batch_size: 32, learning_rate: 2e-3, seed: 0, grad_clip: 1.0, warmup_steps: 50 };
        let sampler = SamplerConfig::default();
        let model = ModelConfig::default_for_vocab(0);
        RunConfig {
            seed: 0,
            corpus_source: CorpusSource::Synthetic,
            corpus_path: None,
            corpus_grammar: None,
            corpus_size: 2000,
            split: [0.9, 0.05, 0.05],
            vocab_size: 512,
            layers: model.layers,
            heads: model.heads,
            width: model.width,
            ff_width: model.ff_width,
            context: model.context,
            generator: hyper.clone(),
            ranker: hyper,
            segment_min: 3,
            segment_max: 5,
            k: 5,
            m: 10,
            schedule: Schedule::Bisectional,
            temperature: sampler.temperature,
            top_k: sampler.top_k,
            max_new_tokens: sampler.max_new_tokens,
            proxy_pairs: 30,
        }
    }
}

fn parse_value<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?}: {e}"))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ConfigError { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("`{key}` given twice")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate().map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_value(value)?,
            "corpus.source" => {
                self.corpus_source = match value {
                    "synthetic" => CorpusSource::Synthetic,
                    other => CorpusSource::File(other.parse()?),
                }
            }
            "corpus.path" => self.corpus_path = opt_path(value),
            "corpus.grammar" => self.corpus_grammar = opt_path(value),
            "corpus.size" => self.corpus_size = parse_value(value)?,
            "split.train" => self.split[0] = parse_value(value)?,
            "split.dev" => self.split[1] = parse_value(value)?,
            "split.test" => self.split[2] = parse_value(value)?,
            "tokenizer.vocab_size" => self.vocab_size = parse_value(value)?,
            "model.layers" => self.layers = parse_value(value)?,
            "model.heads" => self.heads = parse_value(value)?,
            "model.width" => self.width = parse_value(value)?,
            "model.ff_width" => self.ff_width = parse_value(value)?,
            "model.context" => self.context = parse_value(value)?,
            "generator.epochs" => self.generator.epochs = parse_value(value)?,
            "generator.batch_size" => self.generator.batch_size = parse_value(value)?,
            "generator.learning_rate" => self.generator.learning_rate = parse_value(value)?,
            "generator.warmup_steps" => self.generator.warmup_steps = parse_value(value)?,
            "generator.grad_clip" => self.generator.grad_clip = parse_value(value)?,
            "ranker.epochs" => self.ranker.epochs = parse_value(value)?,
            "ranker.batch_size" => self.ranker.batch_size = parse_value(value)?,
            "ranker.learning_rate" => self.ranker.learning_rate = parse_value(value)?,
            "ranker.warmup_steps" => self.ranker.warmup_steps = parse_value(value)?,
            "ranker.grad_clip" => self.ranker.grad_clip = parse_value(value)?,
            "ranker.segment_min" => self.segment_min = parse_value(value)?,
            "ranker.segment_max" => self.segment_max = parse_value(value)?,
            "generate.k" => self.k = parse_value(value)?,
            "generate.m" => self.m = parse_value(value)?,
            "generate.schedule" => {
                self.schedule = Schedule::from_name(value).ok_or_else(|| format!("unknown schedule {value:?}"))?
            }
            "sampler.temperature" => self.temperature = parse_value(value)?,
            "sampler.top_k" => self.top_k = parse_value(value)?,
            "sampler.max_new_tokens" => self.max_new_tokens = parse_value(value)?,
            "eval.proxy_pairs" => self.proxy_pairs = parse_value(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("split.train + split.dev + split.test must be non-negative and sum to 1".into());
        }
        if let CorpusSource::File(_) = self.corpus_source {
            if self.corpus_path.is_none() {
                return Err("corpus.path is required unless corpus.source = synthetic".into());
            }
        }
        if !(2 <= self.segment_min && self.segment_min <= self.segment_max) {
            return Err("need 2 <= ranker.segment_min <= ranker.segment_max".into());
        }
        if self.m == 0 || self.k < 2 {
            return Err("need generate.k >= 2 and generate.m >= 1".into());
        }
        if !(self.temperature > 0.0) || self.max_new_tokens == 0 {
            return Err("need sampler.temperature > 0 and sampler.max_new_tokens >= 1".into());
        }
        self.model_config(self.vocab_size).validate().map_err(|e| e.to_string())
    }

    /// Every key with its value, one `key = value` line each, in fixed order.
    pub fn canonical(&self) -> String {
        let source = match self.corpus_source {
            CorpusSource::Synthetic => "synthetic".to_string(),
            CorpusSource::File(f) => f.to_string(),
        };
        let g = &self.generator;
        let r = &self.ranker;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("corpus.source", source),
            ("corpus.path", show_path(&self.corpus_path)),
            ("corpus.grammar", show_path(&self.corpus_grammar)),
            ("corpus.size", self.corpus_size.to_string()),
            ("split.train", self.split[0].to_string()),
            ("split.dev", self.split[1].to_string()),
            ("split.test", self.split[2].to_string()),
            ("tokenizer.vocab_size", self.vocab_size.to_string()),
            ("model.layers", self.layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.width", self.width.to_string()),
            ("model.ff_width", self.ff_width.to_string()),
            ("model.context", self.context.to_string()),
            ("generator.epochs", g.epochs.to_string()),
            ("generator.batch_size", g.batch_size.to_string()),
            ("generator.learning_rate", g.learning_rate.to_string()),
            ("generator.warmup_steps", g.warmup_steps.to_string()),
            ("generator.grad_clip", g.grad_clip.to_string()),
            ("ranker.epochs", r.epochs.to_string()),
            ("ranker.batch_size", r.batch_size.to_string()),
            ("ranker.learning_rate", r.learning_rate.to_string()),
            ("ranker.warmup_steps", r.warmup_steps.to_string()),
            ("ranker.grad_clip", r.grad_clip.to_string()),
            ("ranker.segment_min", self.segment_min.to_string()),
            ("ranker.segment_max", self.segment_max.to_string()),
            ("generate.k", self.k.to_string()),
            ("generate.m", self.m.to_string()),
            ("generate.schedule", self.schedule.to_string()),
            ("sampler.temperature", self.temperature.to_string()),
            ("sampler.top_k", self.top_k.to_string()),
            ("sampler.max_new_tokens", self.max_new_tokens.to_string()),
            ("eval.proxy_pairs", self.proxy_pairs.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            ff_width: self.ff_width,
            context: self.context,
            vocab: vocab.max(interpol_core::corpus::NUM_SPECIALS + 1),
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            seed,
            greedy: false,
        }
    }
}
