//! Training configuration: `key = value` text files with command-line
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_max: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub patience_lr: usize,
    pub patience_stop: usize,
    pub max_epochs: usize,
    pub dropout_embed: f64,
    pub dropout_question: f64,
    pub dropout_answer: f64,
    pub theta: f64,
    pub h: usize,
    pub d: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub d_t: usize,
    pub seed: u64,
    /// Topic predictor: candidates per question after negative sampling.
    pub topic_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_max: 96,
            batch: 32,
            lr: 0.001,
            lr_decay_factor: 10.0,
            patience_lr: 3,
            patience_stop: 10,
            max_epochs: 200,
            dropout_embed: 0.3,
            dropout_question: 0.3,
            dropout_answer: 0.2,
            theta: 0.7,
            h: 2,
            d: 128,
            d_v: 300,
            d_p: 128,
            d_t: 16,
            seed: 1,
            topic_candidates: 15,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain fields serialize")
    }

    /// Override one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_text()).expect("own output parses");
        let old = table
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
        let parsed = match old {
            toml::Value::Integer(_) => value.parse::<i64>().map(toml::Value::Integer).ok(),
            toml::Value::Float(_) => value.parse::<f64>().map(toml::Value::Float).ok(),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("bad value `{value}` for `{key}`")))?;
        table.insert(key.to_string(), parsed);
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_max", self.n_max),
            ("batch", self.batch),
            ("patience_lr", self.patience_lr),
            ("patience_stop", self.patience_stop),
            ("max_epochs", self.max_epochs),
            ("h", self.h),
            ("d", self.d),
            ("d_v", self.d_v),
            ("d_p", self.d_p),
            ("d_t", self.d_t),
            ("topic_candidates", self.topic_candidates),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d must be even, got {}", self.d)));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || !(self.theta >= 0.0) {
            return Err(Error::Config(
                "lr, lr_decay_factor must be positive and theta non-negative".into(),
            ));
        }
        for r in [
            self.dropout_embed,
            self.dropout_question,
            self.dropout_answer,
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Model dimensions for the given vocabulary sizes.
    pub fn model_config(&self, n_words: usize, n_relations: usize, n_types: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_v: self.d_v,
            d_p: self.d_p,
            d_t: self.d_t,
            n_words,
            n_relations,
            n_types,
            dropout_embed: self.dropout_embed,
            dropout_question: self.dropout_question,
            dropout_answer: self.dropout_answer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_override() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        let mut c = TrainConfig::parse("batch = 8\nlr = 0.01\n").unwrap();
        assert_eq!((c.batch, c.n_max), (8, 96));
        c.set("theta", "0.5").unwrap();
        c.set("seed", "42").unwrap();
        assert_eq!((c.theta, c.seed), (0.5, 42));
        assert!(c.set("d", "7").is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(TrainConfig::parse("unknown = 3").is_err());
    }
}
