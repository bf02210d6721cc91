//! Run configuration: a single TOML file with command-line overrides.
//! Field names follow the symbols used throughout the model (rho, epsilon,
//! w_l, w_r, beta, gamma, s_min, ...); defaults are the full-scale values.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use arsg::attention::{SchedulePolicy, WindowConfig};
use arsg::data::{SyntheticTaskSpec, TextSource};
use arsg::decoder::{Alphabet, ModelConfig};
use arsg::encoder::PoolMode;
use arsg::nn::tensor::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub datagen: DatagenSection,
    pub optimizer: OptimizerSection,
    pub window: WindowSection,
    pub decode: DecodeSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelSection::default(),
            data: DataSection::default(),
            datagen: DatagenSection::default(),
            optimizer: OptimizerSection::default(),
            window: WindowSection::default(),
            decode: DecodeSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub pool: Vec<usize>,
    pub pool_mode: String,
    pub dec_hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    /// attention filter width k
    pub conv_width: usize,
    /// attention feature channels f
    pub conv_channels: usize,
    pub gru_biases: bool,
    /// resolved from the dataset at training time; recorded in checkpoints
    pub input_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![250, 250, 250, 250],
            pool: vec![1, 1, 2, 2],
            pool_mode: "subsample".into(),
            dec_hidden: 250,
            embed_dim: 250,
            attn_dim: 250,
            conv_width: 199,
            conv_channels: 1,
            gru_biases: false,
            input_dim: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// "standard" for the 32-label set, or the literal characters
    pub alphabet: String,
    pub use_deltas: bool,
    pub noise_marker: Option<char>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            alphabet: "standard".into(),
            use_deltas: true,
            noise_marker: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub base_dim: usize,
    pub frames_per_char: [usize; 2],
    pub noise_std: f64,
    pub lead_silence: [usize; 2],
    pub trail_silence: [usize; 2],
    /// "chars" or "words"
    pub text: String,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    /// near-identical rendering pairs, two characters per entry
    pub confusable: Vec<String>,
    pub confusable_gap: f64,
    /// render spaces as silent gaps rather than a dedicated pattern
    pub silent_space: bool,
    /// norm of each character's base pattern
    pub pattern_scale: f64,
}

impl Default for DatagenSection {
    fn default() -> Self {
        DatagenSection {
            base_dim: 10,
            frames_per_char: [6, 10],
            noise_std: 0.3,
            lead_silence: [2, 10],
            trail_silence: [2, 10],
            text: "chars".into(),
            min_len: 3,
            max_len: 8,
            vocab: Vec::new(),
            min_words: 2,
            max_words: 4,
            confusable: Vec::new(),
            confusable_gap: 0.05,
            silent_space: true,
            pattern_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub rho: f64,
    pub epsilon: f64,
    pub anneal_epsilon: f64,
    pub clip: f64,
    pub max_col_norm: f64,
    pub init_variance: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            rho: 0.95,
            epsilon: 1e-8,
            anneal_epsilon: 1e-10,
            clip: 50.0,
            max_col_norm: 1.0,
            init_variance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub w_l: usize,
    pub w_r: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            w_l: 100,
            w_r: 100,
            s_min: 0.0,
            s_max: 10.0,
            v_min: 0.5,
            v_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub beta: f64,
    pub gamma_with_lm: f64,
    pub gamma_without_lm: f64,
    pub w_l: usize,
    pub w_r: usize,
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 200,
            beta: 0.5,
            gamma_with_lm: 1.0,
            gamma_without_lm: 0.1,
            w_l: 10,
            w_r: 100,
            max_len: 600,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub anneal_epochs: usize,
    /// "scheduled" trains the first epoch with the linearly expanding
    /// window; "median" uses median-centered windows from the start.
    pub first_epoch: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            anneal_epochs: 0,
            first_epoch: "scheduled".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden.is_empty() || self.model.hidden.len() != self.model.pool.len() {
            bail!("model.hidden and model.pool must be nonempty and equal length");
        }
        if self.model.conv_width % 2 == 0 {
            bail!("model.conv_width must be odd");
        }
        match self.model.pool_mode.as_str() {
            "subsample" | "average" => {}
            other => bail!("model.pool_mode must be subsample or average, got {other}"),
        }
        match self.datagen.text.as_str() {
            "chars" | "words" => {}
            other => bail!("datagen.text must be chars or words, got {other}"),
        }
        match self.train.first_epoch.as_str() {
            "scheduled" | "median" => {}
            other => bail!("train.first_epoch must be scheduled or median, got {other}"),
        }
        for pair in &self.datagen.confusable {
            if pair.chars().count() != 2 {
                bail!("datagen.confusable entries are two-character strings, got {pair:?}");
            }
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        if self.data.alphabet == "standard" {
            Ok(Alphabet::standard())
        } else {
            let chars: Vec<char> = self.data.alphabet.chars().collect();
            Ok(Alphabet::from_chars(&chars)?)
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.model.hidden.clone(),
            pool_factors: self.model.pool.clone(),
            pool_mode: if self.model.pool_mode == "average" {
                PoolMode::Average
            } else {
                PoolMode::Subsample
            },
            dec_hidden: self.model.dec_hidden,
            embed_dim: self.model.embed_dim,
            attn_dim: self.model.attn_dim,
            conv_width: self.model.conv_width,
            conv_channels: self.model.conv_channels,
            gru_biases: self.model.gru_biases,
        }
    }

    pub fn schedule_policy(&self) -> SchedulePolicy {
        SchedulePolicy {
            s_min: self.window.s_min as Real,
            s_max: self.window.s_max as Real,
            v_min: self.window.v_min as Real,
            v_max: self.window.v_max as Real,
        }
    }

    pub fn train_window(&self) -> WindowConfig {
        WindowConfig {
            left: self.window.w_l,
            right: self.window.w_r,
        }
    }

    pub fn decode_window(&self) -> WindowConfig {
        WindowConfig {
            left: self.decode.w_l,
            right: self.decode.w_r,
        }
    }

    pub fn synth_spec(&self) -> Result<SyntheticTaskSpec> {
        let alphabet = self.alphabet()?;
        let text = match self.datagen.text.as_str() {
            "words" => {
                if self.datagen.vocab.is_empty() {
                    bail!("datagen.text = \"words\" requires datagen.vocab");
                }
                TextSource::Words {
                    vocab: self.datagen.vocab.clone(),
                    min_words: self.datagen.min_words,
                    max_words: self.datagen.max_words,
                }
            }
            _ => TextSource::Chars {
                min_len: self.datagen.min_len,
                max_len: self.datagen.max_len,
            },
        };
        let confusable = self
            .datagen
            .confusable
            .iter()
            .map(|p| {
                let mut it = p.chars();
                (it.next().unwrap(), it.next().unwrap())
            })
            .collect();
        Ok(SyntheticTaskSpec {
            alphabet,
            text,
            base_dim: self.datagen.base_dim,
            frames_per_char: (self.datagen.frames_per_char[0], self.datagen.frames_per_char[1]),
            noise_std: self.datagen.noise_std as Real,
            lead_silence: (self.datagen.lead_silence[0], self.datagen.lead_silence[1]),
            trail_silence: (self.datagen.trail_silence[0], self.datagen.trail_silence[1]),
            confusable,
            confusable_gap: self.datagen.confusable_gap as Real,
            silent_space: self.datagen.silent_space,
            pattern_scale: self.datagen.pattern_scale as Real,
            seed: self.seed,
        })
    }
}
