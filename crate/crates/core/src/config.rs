//! Flat `key = value` run configuration.
//!
//! Precedence is command-line overrides, then the config file, then the
//! defaults. Unknown keys are rejected. [`RunConfig::echo`] writes every
//! resolved key and parses back to the same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::cogsynth::{GrammarConfig, SplitSpec};
use crate::composer::{CollectMode, LayerRange};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::transformer::ModelConfig;

pub const ECHO_FILE: &str = "config.echo";

/// Batch shape used by the `gradcheck` command.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub vocab: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub batch: usize,
    /// Refuse models larger than this many parameters.
    pub max_params: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { vocab: 20, src_len: 5, tgt_len: 4, batch: 2, max_params: 50_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Vocabulary sizes are taken from the corpus, not from here.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grammar: GrammarConfig,
    pub split: SplitSpec,
    pub beam: usize,
    pub decode_max_len: usize,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::tiny(3);
        model.d_model = 64;
        model.d_ff = 256;
        model.heads = 4;
        model.max_len = 64;
        RunConfig {
            model,
            train: TrainConfig::default(),
            grammar: GrammarConfig::default(),
            split: SplitSpec::default(),
            beam: 1,
            decode_max_len: 40,
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

impl RunConfig {
    /// Defaults for finite-difference checking: the tiny model.
    pub fn gradcheck_defaults() -> Self {
        RunConfig { model: ModelConfig::tiny(GradcheckConfig::default().vocab), ..RunConfig::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "enc_layers" => m.enc_layers = parse(key, v)?,
            "dec_layers" => m.dec_layers = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "mode" => m.composition = v.parse()?,
            "collect" => m.collect = CollectMode::from_flag(v)?,
            "layers" => m.layer_range = if v == "all" { None } else { Some(v.parse::<LayerRange>()?) },
            "dropout" => m.dropout = parse(key, v)?,
            "lr_peak" => t.lr_peak = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "max_steps" => t.max_steps = parse(key, v)?,
            "batch_tokens" => t.batch_tokens = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "label_smoothing" => t.label_smoothing = parse(key, v)?,
            "clip_norm" => t.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
            "log_every" => t.log_every = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "nouns" => self.grammar.nouns = parse(key, v)?,
            "verbs" => self.grammar.verbs = parse(key, v)?,
            "modifiers" => self.grammar.modifiers = parse(key, v)?,
            "train_size" => self.split.train = parse(key, v)?,
            "valid_size" => self.split.valid = parse(key, v)?,
            "test_size" => self.split.test = parse(key, v)?,
            "holdout_compounds" => self.split.holdout_compounds = parse(key, v)?,
            "data_seed" => self.split.seed = parse(key, v)?,
            "modifier_rate" => self.split.modifier_rate = parse(key, v)?,
            "min_atom_count" => self.split.min_atom_count = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "decode_max_len" => self.decode_max_len = parse(key, v)?,
            "gradcheck_vocab" => self.gradcheck.vocab = parse(key, v)?,
            "gradcheck_src_len" => self.gradcheck.src_len = parse(key, v)?,
            "gradcheck_tgt_len" => self.gradcheck.tgt_len = parse(key, v)?,
            "gradcheck_batch" => self.gradcheck.batch = parse(key, v)?,
            "gradcheck_max_params" => self.gradcheck.max_params = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", p.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let g = &self.gradcheck;
        vec![
            ("enc_layers", m.enc_layers.to_string()),
            ("dec_layers", m.dec_layers.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("heads", m.heads.to_string()),
            ("max_len", m.max_len.to_string()),
            ("mode", m.composition.to_string()),
            ("collect", m.collect.to_string()),
            ("layers", m.layer_range.map_or("all".into(), |r| r.to_string())),
            ("dropout", format!("{:?}", m.dropout)),
            ("lr_peak", format!("{:?}", t.lr_peak)),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("eps", format!("{:?}", t.eps)),
            ("max_steps", t.max_steps.to_string()),
            ("batch_tokens", t.batch_tokens.to_string()),
            ("seed", t.seed.to_string()),
            ("label_smoothing", format!("{:?}", t.label_smoothing)),
            ("clip_norm", t.clip_norm.map_or("none".into(), |c| format!("{c:?}"))),
            ("log_every", t.log_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("nouns", self.grammar.nouns.to_string()),
            ("verbs", self.grammar.verbs.to_string()),
            ("modifiers", self.grammar.modifiers.to_string()),
            ("train_size", self.split.train.to_string()),
            ("valid_size", self.split.valid.to_string()),
            ("test_size", self.split.test.to_string()),
            ("holdout_compounds", self.split.holdout_compounds.to_string()),
            ("data_seed", self.split.seed.to_string()),
            ("modifier_rate", format!("{:?}", self.split.modifier_rate)),
            ("min_atom_count", self.split.min_atom_count.to_string()),
            ("beam", self.beam.to_string()),
            ("decode_max_len", self.decode_max_len.to_string()),
            ("gradcheck_vocab", g.vocab.to_string()),
            ("gradcheck_src_len", g.src_len.to_string()),
            ("gradcheck_tgt_len", g.tgt_len.to_string()),
            ("gradcheck_batch", g.batch.to_string()),
            ("gradcheck_max_params", g.max_params.to_string()),
        ]
    }

    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), self.echo())?;
        Ok(())
    }

    /// Checks everything that does not depend on the corpus.
    pub fn validate(&self) -> Result<()> {
        let mut probe = self.model.clone();
        probe.src_vocab = probe.src_vocab.max(3);
        probe.tgt_vocab = probe.tgt_vocab.max(3);
        probe.validate()?;
        self.train.validate()?;
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.decode_max_len == 0 {
            return Err(Error::Config("decode_max_len must be at least 1".into()));
        }
        Ok(())
    }
}
