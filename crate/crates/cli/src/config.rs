use std::path::{Path, PathBuf};

use ralm_core::evalkit::AblationAxis;
use ralm_core::reader::{ReaderConfig, DEFAULT_MAX_ANSWER_LEN};
use ralm_core::retriever::RetrieverConfig;
use ralm_core::trainer::{FinetuneConfig, TrainConfig, WarmstartConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Input files. Relative paths are resolved against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Pre-training corpus X.
    pub pretrain_corpus: Option<PathBuf>,
    /// Knowledge corpus Z; X is reused when absent (single-corpus setting).
    pub knowledge_corpus: Option<PathBuf>,
    /// Entity list for salient-span masking, one entry per line.
    pub gazetteer: Option<PathBuf>,
    pub qa_train: Option<PathBuf>,
    pub qa_eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub retriever_hidden: usize,
    pub proj_dim: usize,
    pub reader_hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub span_hidden: usize,
    pub max_answer_len: usize,
    /// Knowledge documents are truncated to this many body tokens.
    pub max_chunk_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            retriever_hidden: 32,
            proj_dim: 32,
            reader_hidden: 32,
            heads: 2,
            layers: 1,
            max_len: 64,
            span_hidden: 16,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
            max_chunk_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn retriever(&self, vocab_size: usize) -> RetrieverConfig {
        RetrieverConfig {
            vocab_size,
            hidden: self.retriever_hidden,
            proj_dim: self.proj_dim,
        }
    }

    pub fn reader(&self, vocab_size: usize) -> ReaderConfig {
        ReaderConfig {
            vocab_size,
            hidden: self.reader_hidden,
            heads: self.heads,
            layers: self.layers,
            max_len: self.max_len,
            span_hidden: self.span_hidden,
            max_answer_len: self.max_answer_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(flatten)]
    pub axis: AblationAxis,
    /// Masked probes drawn from the pre-training corpus for recall and accuracy.
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_recall_k")]
    pub recall_k: usize,
}

fn default_probes() -> usize {
    64
}

fn default_recall_k() -> usize {
    5
}

/// Everything a command needs besides its flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    /// Regular expression for date tokens in salient-span masking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_pattern: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub warmstart: WarmstartConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Make relative paths relative to `base` instead of the working
    /// directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.pretrain_corpus,
            &mut self.paths.knowledge_corpus,
            &mut self.paths.gazetteer,
            &mut self.paths.qa_train,
            &mut self.paths.qa_eval,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ralm_core::mipsindex::IndexStructure;
    use ralm_core::trainer::RefreshInterval;

    #[test]
    fn canonical_form_round_trips() {
        let text = r#"
            [paths]
            pretrain_corpus = "x.tsv"

            [train]
            k = 4
            refresh_interval = "never"
            index = { kind = "ivf", clusters = 8, nprobe = 2 }

            [ablation]
            axis = "staleness"
            levels = [1, 30]
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.refresh_interval, RefreshInterval::Never);
        assert_eq!(
            cfg.train.index,
            IndexStructure::Ivf {
                clusters: 8,
                nprobe: 2
            }
        );
        let canon = cfg.canonical();
        let again = RunConfig::parse(&canon).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), canon);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nkk = 3\n").is_err());
        assert!(RunConfig::parse("colour = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 1\n").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
