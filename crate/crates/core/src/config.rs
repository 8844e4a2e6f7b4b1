//! Run configuration: one sectioned key=value (TOML) file drives
//! corpus synthesis, model shape, block geometry, search, and
//! training. Every key can be overridden from the command line via
//! dotted paths (`section.key=value`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SynthesisSpec;
use crate::encoder::BlockPlan;
use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig, ObjectiveMode};
use crate::search::SearchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub disfluency_rate: f64,
    pub feat_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub pause_frames: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = SynthesisSpec::default();
        CorpusSection {
            vocab_size: s.vocab_size,
            disfluency_rate: s.disfluency_rate,
            feat_dim: s.feat_dim,
            frames_min: s.frames_per_token.0,
            frames_max: s.frames_per_token.1,
            pause_frames: s.pause_frames_after_reparandum,
            noise_std: s.noise_std,
            seed: s.seed,
            train_utterances: 2000,
            dev_utterances: 200,
            test_utterances: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: ObjectiveMode,
    pub alpha: f64,
    pub ctc_weight: f64,
    pub token_dependency: bool,
    pub input_disfluency: bool,
    pub disfluency_dependency: bool,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            mode: m.mode,
            alpha: m.alpha,
            ctc_weight: m.ctc_weight,
            token_dependency: m.ablations.token_dependency,
            input_disfluency: m.ablations.input_disfluency,
            disfluency_dependency: m.ablations.disfluency_dependency,
            model_dim: m.model_dim,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSection {
    pub block_ms: f64,
    pub shift_ms: f64,
}

impl Default for BlockSection {
    fn default() -> Self {
        // 1600 ms windows advancing by 640 ms.
        BlockSection {
            block_ms: 1600.0,
            shift_ms: 640.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub beam_width: usize,
    pub beta: f64,
    pub lm_weight: f64,
    pub max_tokens: usize,
    pub max_tokens_per_block: usize,
    pub jump_frames: usize,
    pub step_cost_ms: f64,
    pub tagger_cost_ms: f64,
    pub conservative_block_commit: bool,
    pub length_normalize: bool,
    /// Pipeline-baseline lookahead window.
    pub lookahead: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchSection {
            beam_width: s.beam_width,
            beta: s.beta,
            lm_weight: s.lm_weight,
            max_tokens: s.max_tokens,
            max_tokens_per_block: s.max_tokens_per_block,
            jump_frames: s.jump_frames,
            step_cost_ms: s.step_cost_ms,
            tagger_cost_ms: s.tagger_cost_ms,
            conservative_block_commit: s.conservative_block_commit,
            length_normalize: s.length_normalize,
            lookahead: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub seed: u64,
    /// Worker threads for per-utterance work; 1 = fully sequential.
    pub jobs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 6,
            batch_size: 16,
            warmup_steps: 400,
            lr_scale: 1.0,
            seed: 7,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub block: BlockSection,
    pub search: SearchSection,
    pub training: TrainingSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Apply dotted-path overrides (`section.key=value`) on top of the
    /// current values. Values are parsed as TOML scalars, so strings,
    /// numbers and booleans all work; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            let c = self.clone();
            c.validate()?;
            return Ok(c);
        }
        let mut value = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("config serialize error: {e}")))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let path = path.trim();
            let raw = raw.trim();
            let mut parts = path.split('.');
            let (section, key) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(k), None) if !s.is_empty() && !k.is_empty() => (s, k),
                _ => {
                    return Err(Error::Config(format!(
                        "override key `{path}` must be section.key"
                    )))
                }
            };
            let table = value
                .get_mut(section)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
            let slot = table
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{section}.{key}`")))?;
            *slot = parse_scalar(raw, slot)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthesis_spec().validate()?;
        self.model_config().validate()?;
        self.block_plan()?;
        self.search_config().validate()?;
        if self.corpus.train_utterances == 0 {
            return Err(Error::Config("corpus.train_utterances must be ≥ 1".into()));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("training.epochs and batch_size must be ≥ 1".into()));
        }
        if self.training.lr_scale <= 0.0 || !self.training.lr_scale.is_finite() {
            return Err(Error::Config("training.lr_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn synthesis_spec(&self) -> SynthesisSpec {
        SynthesisSpec {
            vocab_size: self.corpus.vocab_size,
            disfluency_rate: self.corpus.disfluency_rate,
            feat_dim: self.corpus.feat_dim,
            frames_per_token: (self.corpus.frames_min, self.corpus.frames_max),
            pause_frames_after_reparandum: self.corpus.pause_frames,
            noise_std: self.corpus.noise_std,
            seed: self.corpus.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.model.mode,
            alpha: self.model.alpha,
            ctc_weight: self.model.ctc_weight,
            ablations: Ablations {
                token_dependency: self.model.token_dependency,
                input_disfluency: self.model.input_disfluency,
                disfluency_dependency: self.model.disfluency_dependency,
            },
            feat_dim: self.corpus.feat_dim,
            model_dim: self.model.model_dim,
            n_heads: self.model.n_heads,
            ff_dim: self.model.ff_dim,
            enc_layers: self.model.enc_layers,
            dec_layers: self.model.dec_layers,
        }
    }

    /// Frame period is fixed by the corpus generator (10 ms).
    pub fn block_plan(&self) -> Result<BlockPlan> {
        BlockPlan::from_ms(self.block.block_ms, self.block.shift_ms, 10.0)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            beam_width: self.search.beam_width,
            beta: self.search.beta,
            lm_weight: self.search.lm_weight,
            max_tokens: self.search.max_tokens,
            max_tokens_per_block: self.search.max_tokens_per_block,
            jump_frames: self.search.jump_frames,
            step_cost_ms: self.search.step_cost_ms,
            tagger_cost_ms: self.search.tagger_cost_ms,
            conservative_block_commit: self.search.conservative_block_commit,
            length_normalize: self.search.length_normalize,
        }
    }
}

fn parse_scalar(raw: &str, like: &toml::Value) -> Result<toml::Value> {
    let parsed: toml::Value = match like {
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| {
            Error::Config(format!("`{raw}` is not a boolean"))
        })?),
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| {
            Error::Config(format!("`{raw}` is not an integer"))
        })?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| {
            Error::Config(format!("`{raw}` is not a number"))
        })?),
        other => {
            return Err(Error::Config(format!(
                "cannot override structured value of type {}",
                other.type_str()
            )))
        }
    };
    Ok(parsed)
}
