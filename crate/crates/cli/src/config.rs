//! Run configuration: built-in defaults, then a `key = value` file, then the
//! `DGT_SEED` environment variable, then command-line flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dgt_core::{DecodeConfig, ModelConfig, Strategy, TrainConfig};

pub const SEED_ENV: &str = "DGT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `1` means greedy decoding.
    pub beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam_width: 1,
        }
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "n_heads",
        "encoder_layers",
        "decoder_layers",
        "d_ff",
        "dropout",
        "max_positions",
        "max_gen_len",
        "beam_width",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "val_fraction",
        "seed",
        "max_epochs",
        "patience",
        "use_district_tokens",
        "sort_window",
        "val_max_gen_len",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "max_positions" => m.max_positions = parse(key, value)?,
            "max_gen_len" => m.max_gen_len = parse(key, value)?,
            "beam_width" => self.beam_width = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "use_district_tokens" => t.use_district_tokens = parse(key, value)?,
            "sort_window" => t.sort_window = parse(key, value)?,
            "val_max_gen_len" => t.val_max_gen_len = parse(key, value)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "encoder_layers" => m.encoder_layers.to_string(),
            "decoder_layers" => m.decoder_layers.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "dropout" => m.dropout.to_string(),
            "max_positions" => m.max_positions.to_string(),
            "max_gen_len" => m.max_gen_len.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "val_fraction" => t.val_fraction.to_string(),
            "seed" => t.seed.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "use_district_tokens" => t.use_district_tokens.to_string(),
            "sort_window" => t.sort_window.to_string(),
            "val_max_gen_len" => t.val_max_gen_len.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_env(&mut self, seed: Option<&str>) -> Result<()> {
        if let Some(value) = seed {
            self.set("seed", value)
                .with_context(|| format!("from {SEED_ENV}"))?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `DGT_SEED`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        config.apply_env(std::env::var(SEED_ENV).ok().as_deref())?;
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode().validate()?;
        Ok(())
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            max_gen_len: self.model.max_gen_len,
            strategy: if self.beam_width <= 1 {
                Strategy::Greedy
            } else {
                Strategy::Beam {
                    width: self.beam_width,
                }
            },
        }
    }

    /// Every effective value as `key = value` lines, in a fixed order. The
    /// output parses back with [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let c = RunConfig::default();
        let mut back = RunConfig {
            beam_width: 7,
            ..RunConfig::default()
        };
        back.model.d_model = 8;
        back.apply_text(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
        assert!(c.render().contains("batch_size = 4\n"));
        assert!(c.render().contains("learning_rate = 0.0003\n"));
        assert!(c.render().contains("max_gen_len = 1024\n"));
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# desk run\nseed = 3\nbatch_size=8 # comment\n\nd_model = 32\n",
        )
        .unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        assert_eq!(
            (c.train.seed, c.train.batch_size, c.model.d_model),
            (3, 8, 32)
        );
        c.apply_env(Some("11")).unwrap();
        assert_eq!(c.train.seed, 11);
        c.set("seed", "12").unwrap();
        assert_eq!(c.train.seed, 12);
    }

    #[test]
    fn bad_input() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("nope = 1", "t").is_err());
        assert!(c.apply_text("seed 1", "t").is_err());
        assert!(c.apply_text("seed = x", "t").is_err());
        assert!(c.apply_env(Some("-1")).is_err());
        c.set("val_fraction", "1.5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        for k in RunConfig::KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
        }
        assert!(c.get("missing").is_none());
    }

    #[test]
    fn beam_width_selects_strategy() {
        let mut c = RunConfig::default();
        assert_eq!(c.decode().strategy, Strategy::Greedy);
        c.beam_width = 4;
        assert_eq!(c.decode().strategy, Strategy::Beam { width: 4 });
    }
}
