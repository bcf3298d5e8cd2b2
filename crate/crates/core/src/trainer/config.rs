use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::mipsindex::{IndexStructure, RefreshMode, RefreshSchedule};
use crate::textcorpus::MaskingScheme;
use crate::{Error, Result};

/// Steps between index refreshes; `Never` keeps the initial index forever.
///
/// Serialized as an integer or the string `"never"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshInterval {
    Every(u64),
    Never,
}

impl RefreshInterval {
    pub fn as_option(self) -> Option<u64> {
        match self {
            RefreshInterval::Every(r) => Some(r),
            RefreshInterval::Never => None,
        }
    }
}

impl Serialize for RefreshInterval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RefreshInterval::Every(r) => s.serialize_u64(*r),
            RefreshInterval::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for RefreshInterval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = RefreshInterval;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive step count or \"never\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(RefreshInterval::Every(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                u64::try_from(v)
                    .map(RefreshInterval::Every)
                    .map_err(|_| E::custom("refresh interval must be positive"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                match v {
                    "never" | "inf" => Ok(RefreshInterval::Never),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

/// Pre-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Candidates per example, counting ∅ when `include_null`.
    pub k: usize,
    pub refresh_interval: RefreshInterval,
    pub staleness_multiplier: u64,
    /// Simulated index build time, in trainer steps.
    pub build_latency: u64,
    pub refresh_mode: RefreshMode,
    pub index: IndexStructure,
    pub learning_rate: f64,
    /// Learning rate for θ; `learning_rate` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retriever_learning_rate: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub masking: MaskingScheme,
    pub exclude_trivial: bool,
    pub include_null: bool,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            refresh_interval: RefreshInterval::Every(500),
            staleness_multiplier: 1,
            build_latency: 0,
            refresh_mode: RefreshMode::Simulated,
            index: IndexStructure::Exhaustive,
            learning_rate: 0.05,
            retriever_learning_rate: None,
            optimizer: OptimizerConfig::default(),
            clip_norm: 1.0,
            steps: 1000,
            batch_size: 8,
            masking: MaskingScheme::SalientSpan,
            exclude_trivial: true,
            include_null: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > corpus_len + usize::from(self.include_null) {
            return Err(Error::Config(format!(
                "k = {} exceeds {} documents{}",
                self.k,
                corpus_len,
                if self.include_null {
                    " plus the null document"
                } else {
                    ""
                }
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let theta_lr = self.retriever_learning_rate.unwrap_or(self.learning_rate);
        // Negated so NaN fails too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate >= 0.0) || !(theta_lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rates must be >= 0 and clip_norm > 0".into(),
            ));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> RefreshSchedule {
        RefreshSchedule {
            interval: self.refresh_interval.as_option(),
            mode: self.refresh_mode,
            staleness_multiplier: self.staleness_multiplier,
            build_latency: self.build_latency,
        }
    }

    /// Retrieved documents per example, excluding ∅.
    pub fn docs_per_example(&self) -> usize {
        self.k - usize::from(self.include_null)
    }
}

/// Warm-start settings: ICT for θ, retrieval-free MLM for φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmstartConfig {
    /// Optimizer for both warm-start phases; the pre-training optimizer
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    pub ict_steps: u64,
    pub ict_batch_size: usize,
    pub ict_learning_rate: f64,
    pub mlm_steps: u64,
    pub mlm_batch_size: usize,
    pub mlm_learning_rate: f64,
}

impl Default for WarmstartConfig {
    fn default() -> Self {
        WarmstartConfig {
            optimizer: None,
            ict_steps: 1000,
            ict_batch_size: 32,
            ict_learning_rate: 0.05,
            mlm_steps: 200,
            mlm_batch_size: 8,
            mlm_learning_rate: 0.05,
        }
    }
}

/// Open-QA fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Retrieved candidates; no ∅ and no trivial exclusion.
    pub k: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            k: 5,
            steps: 200,
            batch_size: 8,
            learning_rate: 0.05,
        }
    }
}
