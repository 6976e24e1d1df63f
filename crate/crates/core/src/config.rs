//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are errors. [`RunConfig::echo`] writes every key,
//! defaults included, and parses back to the same configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::assignment::ExtraTargets;
use crate::data::SooRule;
use crate::error::{Error, Result};
use crate::eval::MatchMode;
use crate::infer::InferConfig;
use crate::network::{LevelLookup, LevelPool, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Vocabulary and relation counts are placeholders; they come from data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub match_mode: MatchMode,
    pub soo_rule: SooRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0, 128, 0),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            match_mode: MatchMode::Exact,
            soo_rule: SooRule::Overlap,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid("config", format!("{key}: cannot parse {value:?}")))
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::invalid("config", format!("{key}: expected one of {}, got {value:?}", names.join("|")))
    })
}

const POOLS: [(&str, LevelPool); 2] = [("edges", LevelPool::Edges), ("hidden", LevelPool::Hidden)];
const LOOKUPS: [(&str, LevelLookup); 2] = [("round", LevelLookup::Round), ("interpolate", LevelLookup::Interpolate)];
const EXTRAS: [(&str, ExtraTargets); 2] = [("cheapest", ExtraTargets::Cheapest), ("repeat", ExtraTargets::RepeatTargets)];
const MODES: [(&str, MatchMode); 2] = [("exact", MatchMode::Exact), ("last_word", MatchMode::LastWord)];
const SOO: [(&str, SooRule); 2] = [("overlap", SooRule::Overlap), ("equal", SooRule::Equal)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).expect("every variant is listed")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, i) = (&mut self.model, &mut self.train, &mut self.infer);
        match key {
            "max_len" => m.max_len = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "coatt_dim" => m.coatt_dim = parse(key, v)?,
            "head_dim" => m.head_dim = parse(key, v)?,
            "width" => {
                let w = parse(key, v)?;
                *m = m.clone().with_width(w);
            }
            "level_pool" => m.level_pool = choice(key, v, &POOLS)?,
            "level_lookup" => m.level_lookup = choice(key, v, &LOOKUPS)?,
            "share_affinity" => m.share_affinity = parse(key, v)?,
            "scale_attention" => m.scale_attention = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "timesteps" => t.timesteps = parse(key, v)?,
            "schedule" => t.schedule = parse(key, v)?,
            "beta_start" => t.beta_start = parse(key, v)?,
            "beta_end" => t.beta_end = parse(key, v)?,
            "expansion" => t.expansion = parse(key, v)?,
            "padding_std" => t.padding_std = parse(key, v)?,
            "weight_head" => t.weights.head = parse(key, v)?,
            "weight_tail" => t.weights.tail = parse(key, v)?,
            "weight_level" => t.weights.level = parse(key, v)?,
            "extra_targets" => t.extra_targets = choice(key, v, &EXTRAS)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                i.seed = t.seed;
            }
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "log_seconds" => t.log_seconds = parse(key, v)?,
            "blocks" => i.blocks = parse(key, v)?,
            "sigma" => i.sigma = parse(key, v)?,
            "phi" => i.phi = parse(key, v)?,
            "infer_batch" => i.batch = parse(key, v)?,
            "strict" => i.strict = parse(key, v)?,
            "match_mode" => self.match_mode = choice(key, v, &MODES)?,
            "soo_rule" => self.soo_rule = choice(key, v, &SOO)?,
            _ => return Err(Error::invalid("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let (m, t, i) = (&self.model, &self.train, &self.infer);
        vec![
            ("max_len", m.max_len.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("hidden", m.hidden.to_string()),
            ("coatt_dim", m.coatt_dim.to_string()),
            ("head_dim", m.head_dim.to_string()),
            ("level_pool", name_of(&POOLS, m.level_pool).into()),
            ("level_lookup", name_of(&LOOKUPS, m.level_lookup).into()),
            ("share_affinity", m.share_affinity.to_string()),
            ("scale_attention", m.scale_attention.to_string()),
            ("lambda", m.lambda.to_string()),
            ("timesteps", t.timesteps.to_string()),
            ("schedule", t.schedule.as_str().into()),
            ("beta_start", t.beta_start.to_string()),
            ("beta_end", t.beta_end.to_string()),
            ("expansion", t.expansion.to_string()),
            ("padding_std", t.padding_std.to_string()),
            ("weight_head", t.weights.head.to_string()),
            ("weight_tail", t.weights.tail.to_string()),
            ("weight_level", t.weights.level.to_string()),
            ("extra_targets", name_of(&EXTRAS, t.extra_targets).into()),
            ("learning_rate", t.learning_rate.to_string()),
            ("warmup_ratio", t.warmup_ratio.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("log_seconds", t.log_seconds.to_string()),
            ("blocks", i.blocks.to_string()),
            ("sigma", i.sigma.to_string()),
            ("phi", i.phi.to_string()),
            ("infer_batch", i.batch.to_string()),
            ("strict", i.strict.to_string()),
            ("match_mode", name_of(&MODES, self.match_mode).into()),
            ("soo_rule", name_of(&SOO, self.soo_rule).into()),
        ]
    }

    pub fn echo(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let probe = ModelConfig { vocab: 2, relations: 1, ..self.model.clone() };
        probe.validate()?;
        self.train.validate()?;
        self.infer.plan(self.train.timesteps)?;
        Ok(())
    }
}
