//! The JSON experiment configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lmaug_core::neural::{Augmentation, LstmConfig, TrainSchedule};
use lmaug_core::noise::ChannelConfig;
use lmaug_core::{TargetMode, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Augmentation scheme of a training run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "baseline")]
    Baseline,
    /// Uniform input corruption.
    #[serde(rename = "i0")]
    I0,
    /// Input corruption from training-set confusion statistics.
    #[serde(rename = "i1")]
    I1,
    /// Input corruption from development-set confusion statistics.
    #[serde(rename = "i1o")]
    I1o,
    #[serde(rename = "t0S")]
    T0S,
    #[serde(rename = "t0SDI")]
    T0Sdi,
    #[serde(rename = "t0LS")]
    T0Ls,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string tag"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_sessions: Option<PathBuf>,
    pub dev: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_sessions: Option<PathBuf>,
    /// First-pass n-gram in ARPA format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firstpass: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_nbest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_refs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_nbest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_refs: Option<PathBuf>,
    /// Created on demand, so it need not exist at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabOptions {
    /// Whitespace-separated words added after the training words, for
    /// vocabularies larger than the training text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_words: Option<PathBuf>,
}

/// `LstmConfig` minus the vocabulary size, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = LstmConfig::new(4);
        ModelConfig {
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            layers: c.layers,
            dropout: c.dropout,
            label_smoothing: c.label_smoothing,
        }
    }
}

impl ModelConfig {
    pub fn lstm(&self, vocab_size: usize) -> LstmConfig {
        LstmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RescoreOptions {
    pub grid: Vec<f64>,
    pub lm_scale: f64,
    pub carry_state: bool,
}

impl Default for RescoreOptions {
    fn default() -> Self {
        RescoreOptions {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            lm_scale: 1.0,
            carry_state: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Corruption realizations per sPPL estimate.
    pub k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    #[serde(default)]
    pub vocab: VocabOptions,
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "TrainSchedule::pretrain")]
    pub pretrain: TrainSchedule,
    #[serde(default = "TrainSchedule::finetune")]
    pub finetune: TrainSchedule,
    #[serde(default)]
    pub rescore: RescoreOptions,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Every random draw of every command derives from this.
    pub seed: u64,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| usage(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        resolve(base, &mut p.train);
        resolve(base, &mut p.dev);
        for o in [
            &mut p.train_sessions,
            &mut p.dev_sessions,
            &mut p.firstpass,
            &mut p.dev_nbest,
            &mut p.dev_refs,
            &mut p.eval_nbest,
            &mut p.eval_refs,
            &mut p.out_dir,
            &mut self.vocab.extra_words,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, o);
        }
        if let Some(ChannelConfig::Unigram { table, .. }) = &mut self.channel {
            resolve(base, table);
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let p = &self.paths;
        let mut inputs = vec![&p.train, &p.dev];
        inputs.extend(
            [
                &p.train_sessions,
                &p.dev_sessions,
                &p.firstpass,
                &p.dev_nbest,
                &p.dev_refs,
                &p.eval_nbest,
                &p.eval_refs,
                &self.vocab.extra_words,
            ]
            .into_iter()
            .flatten(),
        );
        if let Some(ChannelConfig::Unigram { table, .. }) = &self.channel {
            inputs.push(table);
        }
        for f in inputs {
            if !f.is_file() {
                return Err(usage(format!("missing input file {}", f.display())));
            }
        }
        if p.eval_nbest.is_some() != p.eval_refs.is_some() {
            return Err(usage("eval_nbest and eval_refs go together"));
        }
        if p.dev_nbest.is_some() != p.dev_refs.is_some() {
            return Err(usage("dev_nbest and dev_refs go together"));
        }
        self.check_scheme()?;
        self.model.lstm(4).validate().map_err(|e| usage(e.to_string()))?;
        self.pretrain.validate().map_err(|e| usage(format!("pretrain: {e}")))?;
        self.finetune.validate().map_err(|e| usage(format!("finetune: {e}")))?;
        self.rescore.validate()?;
        if self.eval.k == 0 {
            return Err(usage("eval.k must be positive"));
        }
        Ok(())
    }

    fn check_scheme(&self) -> Result<(), Failure> {
        let smoothing = self.model.label_smoothing > 0.0 && (self.pretrain.label_smoothing || self.finetune.label_smoothing);
        let s = self.scheme;
        match (s, &self.channel) {
            (Scheme::Baseline | Scheme::T0Ls, Some(_)) => return Err(usage(format!("scheme {s} takes no channel"))),
            (Scheme::I0 | Scheme::T0S | Scheme::T0Sdi, Some(ChannelConfig::Zerogram { .. })) => {}
            (Scheme::I0 | Scheme::T0S | Scheme::T0Sdi, _) => {
                return Err(usage(format!("scheme {s} needs a zerogram channel")))
            }
            (Scheme::I1 | Scheme::I1o, Some(ChannelConfig::Unigram { .. })) => {}
            (Scheme::I1 | Scheme::I1o, _) => return Err(usage(format!("scheme {s} needs a unigram channel"))),
            _ => {}
        }
        if let (Scheme::T0S, Some(ChannelConfig::Zerogram { p_del, p_ins, .. })) = (s, &self.channel) {
            if *p_del != 0.0 || *p_ins != 0.0 {
                return Err(usage("scheme t0S substitutes only; set p_del and p_ins to 0"));
            }
        }
        match (s, smoothing) {
            (Scheme::T0Ls, false) => Err(usage(
                "scheme t0LS needs model.label_smoothing > 0 and a stage with label_smoothing on",
            )),
            (Scheme::T0Ls, true) | (_, false) => Ok(()),
            (_, true) => Err(usage(format!("label smoothing belongs to scheme t0LS, not {s}"))),
        }
    }

    /// Training-time corruption for the scheme.
    pub fn augmentation(&self, vocab: &Vocabulary) -> lmaug_core::Result<Option<Augmentation>> {
        let Some(ch) = &self.channel else {
            return Ok(None);
        };
        let ch = ch.build(vocab)?;
        Ok(match self.scheme {
            Scheme::I0 | Scheme::I1 | Scheme::I1o => Some(Augmentation::Input(ch)),
            Scheme::T0S => Some(Augmentation::Target(ch, TargetMode::S)),
            Scheme::T0Sdi => Some(Augmentation::Target(ch, TargetMode::SDI)),
            Scheme::Baseline | Scheme::T0Ls => None,
        })
    }
}

impl RescoreOptions {
    fn validate(&self) -> Result<(), Failure> {
        let r = self;
        if r.grid.is_empty() {
            return Err(usage("rescore.grid is empty"));
        }
        if let Some(l) = r.grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(usage(format!("rescore.grid value {l} outside [0, 1]")));
        }
        if !(r.lm_scale > 0.0) || !r.lm_scale.is_finite() {
            return Err(usage("rescore.lm_scale must be positive"));
        }
        Ok(())
    }
}

/// Seeds of the individual steps, all derived from the configured one.
#[derive(Copy, Clone, Debug)]
pub struct Seeds {
    pub init: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds {
            init: seed,
            pretrain: seed,
            finetune: seed.wrapping_add(1),
            eval: seed.wrapping_add(2),
        }
    }
}
