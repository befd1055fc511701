//! Run configuration: one TOML file holding every knob, with dotted-path
//! overrides and cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{ModelConfig, SelectionStrategy};
use crate::synth::SynthConfig;
use crate::train::{LossWeights, Regime, Stage, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub gumbel: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Captioned clips generated for the clip-level stage.
    pub captions: usize,
    pub align: PhaseConfig,
    pub instruct: PhaseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub regime: Regime,
    /// Fraction of training streams whose questions carry grounding labels.
    pub label_fraction: f64,
    pub weights: LossWeights,
    pub warmup: PhaseConfig,
    pub joint: PhaseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Minimum QA count of the training split.
    pub train_questions: usize,
    /// Minimum QA count of the held-out split.
    pub test_questions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub workers: usize,
    pub multi_choice: bool,
    pub strategy: SelectionStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `gen-data`.
    pub data_dir: PathBuf,
    /// Checkpoint directory written by `train`.
    pub checkpoint_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phase = |learning_rate, epochs, batch| PhaseConfig {
            learning_rate,
            epochs,
            batch,
        };
        RunConfig {
            seeds: Seeds {
                data: 100,
                init: 1,
                gumbel: 7,
            },
            paths: Paths {
                data_dir: PathBuf::from("data"),
                checkpoint_dir: PathBuf::from("checkpoints"),
            },
            synth: SynthConfig::default(),
            data: DataConfig {
                train_questions: 2000,
                test_questions: 300,
            },
            model: ModelConfig::default(),
            stage1: Stage1Config {
                captions: 400,
                align: phase(3e-3, 2, 8),
                instruct: phase(1e-3, 3, 8),
            },
            stage2: Stage2Config {
                regime: Regime::Warmup,
                label_fraction: 0.3,
                weights: LossWeights::default(),
                warmup: phase(1e-3, 6, 1),
                joint: phase(1e-4, 3, 1),
            },
            eval: EvalConfig {
                workers: 1,
                multi_choice: false,
                strategy: SelectionStrategy::Learned,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads `path` (or the defaults) and applies `key.path=value`
    /// overrides before validating.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
            None => RunConfig::default().to_toml(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| toml_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with `key.path=value` overrides applied and validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = self.to_toml().parse().map_err(|e: toml::de::Error| toml_error(&e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| toml_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate("synth")?;
        self.model.validate("model")?;
        let m = &self.model;
        let s = &self.synth;
        if m.tokens_per_frame * 4 != s.raw_tokens {
            return Err(Error::config(
                "model.tokens_per_frame",
                format!("N = {} must equal synth.raw_tokens / 4 = {}", m.tokens_per_frame, s.raw_tokens / 4),
            ));
        }
        if m.feature_channels != s.merged_channels() {
            return Err(Error::config(
                "model.feature_channels",
                format!("C = {} must equal 4 * synth.raw_channels = {}", m.feature_channels, s.merged_channels()),
            ));
        }
        if m.frames_per_clip != s.frames_per_clip {
            return Err(Error::config(
                "model.frames_per_clip",
                format!("{} differs from synth.frames_per_clip {}", m.frames_per_clip, s.frames_per_clip),
            ));
        }
        if m.selection.top_v > s.num_clips {
            return Err(Error::config(
                "model.selection.top_v",
                format!("V = {} exceeds K = {}", m.selection.top_v, s.num_clips),
            ));
        }
        if !(0.0..=1.0).contains(&self.stage2.label_fraction) {
            return Err(Error::config("stage2.label_fraction", "must lie in [0, 1]"));
        }
        if matches!(self.stage2.regime, Regime::Warmup | Regime::WarmupMixed | Regime::Mixed) && self.stage2.label_fraction == 0.0 {
            return Err(Error::config("stage2.label_fraction", "this regime needs labeled streams"));
        }
        for (name, p) in [
            ("stage1.align", &self.stage1.align),
            ("stage1.instruct", &self.stage1.instruct),
            ("stage2.warmup", &self.stage2.warmup),
            ("stage2.joint", &self.stage2.joint),
        ] {
            if !(p.learning_rate > 0.0) || p.batch == 0 {
                return Err(Error::config(name, "learning_rate must be positive and batch at least 1"));
            }
        }
        if self.eval.workers == 0 {
            return Err(Error::config("eval.workers", "must be at least 1"));
        }
        Ok(())
    }

    /// FNV-1a digest of the serialized config.
    pub fn digest(&self) -> String {
        let mut h = crate::streaming::Fnv::new();
        h.write(self.to_toml().as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn plan(&self, stage: Stage) -> TrainPlan {
        let (p, seed) = match stage {
            Stage::Align => (&self.stage1.align, self.seeds.init ^ 0xa1),
            Stage::ClipInstruct => (&self.stage1.instruct, self.seeds.init ^ 0xc1),
            Stage::Warmup => (&self.stage2.warmup, self.seeds.gumbel),
            Stage::Joint => (&self.stage2.joint, self.seeds.gumbel ^ 0x10),
        };
        TrainPlan {
            stage,
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            weights: self.stage2.weights,
            use_labels: stage == Stage::Warmup,
            batch: p.batch,
            seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            strategy: self.eval.strategy,
            multi_choice: self.eval.multi_choice,
            workers: self.eval.workers,
        }
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    let msg = e.message().to_string();
    // Dotted field path where the parser can tell.
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .unwrap_or("config")
        .to_string();
    Error::config(field, msg.replace('\n', " "))
}

/// Sets `a.b.c=value` in a TOML table; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("`{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config("override", format!("bad key path `{path}`")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(path.trim(), format!("`{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::load_with_overrides(
            None,
            &["model.selection.top_v=2".into(), "stage2.regime=fully_weak".into(), "model.similarity_placeholder_ignored=1".into()],
        );
        assert!(matches!(c, Err(Error::Config { .. })));
        let c = RunConfig::load_with_overrides(None, &["model.selection.top_v=2".into(), "stage2.regime=fully_weak".into()]).unwrap();
        assert_eq!(c.model.selection.top_v, 2);
        assert_eq!(c.stage2.regime, Regime::FullyWeak);
    }

    #[test]
    fn cross_field_errors_name_the_field() {
        let field = |o: &str| match RunConfig::load_with_overrides(None, &[o.to_string()]) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("model.summarization_per_frame=16"), "model.summarization_per_frame");
        assert_eq!(field("model.selection.top_v=17"), "model.selection.top_v");
        assert_eq!(field("model.encoder.tap_layer=5"), "model.encoder.tap_layer");
        assert_eq!(field("model.tokens_per_frame=8"), "model.tokens_per_frame");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config { .. })));
    }
}
