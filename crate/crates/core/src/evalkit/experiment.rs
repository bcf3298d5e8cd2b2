use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::mipsindex::{build_index, IndexStructure};
use crate::reader::ReaderConfig;
use crate::retriever::RetrieverConfig;
use crate::textcorpus::{
    KnowledgeCorpus, MaskedExample, MaskingScheme, QaExample, QaRecord, SalientSpanRules,
    TextCorpus, Vocab,
};
use crate::trainer::{
    finetune_step, warmstart, CandidateRule, FinetuneConfig, ParamStore, PretrainData, Pretrainer,
    StepRecord, TrainConfig, WarmstartConfig,
};
use crate::{Error, Result};

use super::measures::{exact_match, mean_finite, recall_at_k, retrieval_utility, RecallQuery};
use super::predict::{masked_accuracy, predict_answer};

/// Corpora, vocabulary and probe sets shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub knowledge: Arc<KnowledgeCorpus>,
    pub pretrain: Arc<PretrainData>,
    pub vocab: Vocab,
    /// Masked probes with known source documents.
    pub probes: Vec<MaskedExample>,
    pub qa_train: Vec<QaExample>,
    pub qa_eval: Vec<QaExample>,
}

impl ExperimentData {
    pub fn new(
        knowledge: &TextCorpus,
        pretrain: &TextCorpus,
        vocab: Vocab,
        rules: SalientSpanRules,
        max_chunk_len: usize,
    ) -> Result<Self> {
        let knowledge = Arc::new(KnowledgeCorpus::from_text(knowledge, &vocab, max_chunk_len));
        let pretrain = Arc::new(PretrainData::new(pretrain, vocab.clone(), rules)?);
        Ok(ExperimentData {
            knowledge,
            pretrain,
            vocab,
            probes: Vec::new(),
            qa_train: Vec::new(),
            qa_eval: Vec::new(),
        })
    }

    pub fn with_probes(mut self, probes: Vec<MaskedExample>) -> Self {
        self.probes = probes;
        self
    }

    pub fn with_qa(mut self, train: &[QaRecord], eval: &[QaRecord]) -> Self {
        self.qa_train = train
            .iter()
            .map(|r| QaExample::encode(r, &self.vocab))
            .collect();
        self.qa_eval = eval
            .iter()
            .map(|r| QaExample::encode(r, &self.vocab))
            .collect();
        self
    }

    pub fn period(&self) -> Option<usize> {
        self.vocab.get(".")
    }
}

/// Everything one seeded run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub retriever: RetrieverConfig,
    pub reader: ReaderConfig,
    pub warmstart: WarmstartConfig,
    pub train: TrainConfig,
    pub finetune: Option<FinetuneConfig>,
    /// `k` of the reported recall.
    pub recall_k: usize,
}

/// Which knob an ablation turns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "levels", rename_all = "snake_case")]
pub enum AblationAxis {
    MaskingScheme(Vec<MaskingScheme>),
    /// Multipliers of the base refresh interval.
    Staleness(Vec<u64>),
    ResetRetriever(Vec<bool>),
    ResetEncoder(Vec<bool>),
}

impl AblationAxis {
    pub fn len(&self) -> usize {
        match self {
            AblationAxis::MaskingScheme(l) => l.len(),
            AblationAxis::Staleness(l) => l.len(),
            AblationAxis::ResetRetriever(l) | AblationAxis::ResetEncoder(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The base config with level `i` applied, plus a label for the row.
    fn apply(&self, base: &ExperimentConfig, i: usize) -> (ExperimentConfig, Reset, String) {
        let mut cfg = base.clone();
        let mut reset = Reset::default();
        let label = match self {
            AblationAxis::MaskingScheme(l) => {
                cfg.train.masking = l[i];
                format!("masking={}", l[i])
            }
            AblationAxis::Staleness(l) => {
                cfg.train.staleness_multiplier = l[i];
                format!("staleness={}x", l[i])
            }
            AblationAxis::ResetRetriever(l) => {
                reset.retriever = l[i];
                format!("reset_retriever={}", l[i])
            }
            AblationAxis::ResetEncoder(l) => {
                reset.encoder = l[i];
                format!("reset_encoder={}", l[i])
            }
        };
        (cfg, reset, label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    #[serde(flatten)]
    pub axis: AblationAxis,
    pub base: ExperimentConfig,
    pub seed: u64,
}

/// Restore θ or φ to their warm-start values before fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Reset {
    pub retriever: bool,
    pub encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// Mean pre-training loss over the last tenth of the steps.
    pub final_loss: f64,
    pub recall: f64,
    pub masked_accuracy: f64,
    pub ru_top1_start: f64,
    pub ru_top1_end: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

/// Mean of the last tenth (at least one) of a loss trajectory.
pub fn final_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let n = (losses.len() / 10).max(1);
    losses[losses.len() - n..].iter().sum::<f64>() / n as f64
}

/// Mean top-1 retrieval utility over probes, against an exhaustive index.
pub fn mean_top1_ru(
    store: &ParamStore<f64>,
    data: &ExperimentData,
    rule: CandidateRule,
) -> Result<f64> {
    let index = build_index(
        &data.knowledge,
        &store.theta,
        store.version(),
        IndexStructure::Exhaustive,
        0,
    )?;
    let mut values = Vec::with_capacity(data.probes.len());
    for x in &data.probes {
        let cands = crate::trainer::select_candidates(
            &x.input_tokens,
            &x.source_doc_id,
            &store.theta,
            &index,
            &data.knowledge,
            CandidateRule {
                docs: rule.docs.max(1),
                include_null: false,
                ..rule
            },
        )?;
        values.push(retrieval_utility(x, &cands[0], &store.phi)?);
    }
    let (mean, excluded) = mean_finite(values);
    if excluded > 0 {
        log::info!("{excluded} probes with infinite retrieval utility excluded");
    }
    Ok(mean)
}

/// Outcome of [`run_experiment`] with the trained parameters.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub warm: ParamStore<f64>,
    pub trained: ParamStore<f64>,
    pub records: Vec<StepRecord>,
}

fn eval_rule(train: &TrainConfig) -> CandidateRule {
    CandidateRule {
        docs: train.docs_per_example(),
        exclude_trivial: train.exclude_trivial,
        include_null: train.include_null,
    }
}

/// Warm-start, pre-train and (optionally) fine-tune one seeded model.
pub fn run_experiment(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    reset: Reset,
    label: &str,
) -> Result<RunOutput> {
    let seed = cfg.train.seed;
    let mut store = ParamStore::<f64>::init(&cfg.retriever, &cfg.reader, seed)?;
    warmstart(
        &mut store,
        &data.knowledge,
        &data.pretrain,
        data.period(),
        cfg.train.masking,
        &cfg.warmstart,
        &cfg.warmstart.optimizer.unwrap_or(cfg.train.optimizer),
        cfg.train.clip_norm,
        seed,
    )?;
    let warm = store.clone();
    let rule = eval_rule(&cfg.train);
    let ru_start = if data.probes.is_empty() {
        0.0
    } else {
        mean_top1_ru(&store, data, rule)?
    };

    let mut trainer = Pretrainer::new(
        cfg.train.clone(),
        Arc::clone(&data.pretrain),
        Arc::clone(&data.knowledge),
        store,
    )?;
    let mut records = Vec::with_capacity(cfg.train.steps as usize);
    for _ in 0..cfg.train.steps {
        records.push(trainer.step()?);
    }
    let mut store = trainer.into_store();
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();

    let index = build_index(
        &data.knowledge,
        &store.theta,
        store.version(),
        IndexStructure::Exhaustive,
        0,
    )?;
    let (recall, accuracy, ru_end) = if data.probes.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let queries: Vec<RecallQuery> = data.probes.iter().map(RecallQuery::from_masked).collect();
        (
            recall_at_k(
                &queries,
                &store.theta,
                &index,
                &data.knowledge,
                cfg.recall_k,
            )?,
            masked_accuracy(&data.probes, &store, &index, &data.knowledge, rule)?,
            mean_top1_ru(&store, data, rule)?,
        )
    };

    let mut em = None;
    if let Some(ft) = &cfg.finetune {
        if reset.retriever {
            store.theta = warm.theta.clone();
        }
        if reset.encoder {
            store.phi = warm.phi.clone();
        }
        store.reset_optimizer();
        let index = build_index(
            &data.knowledge,
            &store.theta,
            store.version(),
            IndexStructure::Exhaustive,
            0,
        )?;
        for step in 0..ft.steps {
            finetune_step(
                &mut store,
                &data.qa_train,
                &index,
                &data.knowledge,
                ft,
                &cfg.train.optimizer,
                cfg.train.clip_norm,
                seed,
                step,
            )?;
        }
        em = Some(qa_exact_match(
            &store,
            &data.qa_eval,
            &data.vocab,
            &index,
            &data.knowledge,
            ft.k,
        )?);
    }

    Ok(RunOutput {
        summary: RunSummary {
            label: label.to_string(),
            final_loss: final_loss(&losses),
            recall,
            masked_accuracy: accuracy,
            ru_top1_start: ru_start,
            ru_top1_end: ru_end,
            exact_match: em,
            failure: None,
        },
        warm,
        trained: store,
        records,
    })
}

/// Exact-match rate of predicted answers over `examples`.
pub fn qa_exact_match(
    store: &ParamStore<f64>,
    examples: &[QaExample],
    vocab: &Vocab,
    index: &crate::mipsindex::IndexSnapshot<f64>,
    corpus: &KnowledgeCorpus,
    k: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("exact match over an empty example set"));
    }
    let mut hits = 0;
    for ex in examples {
        let pred = predict_answer(&ex.question, store, index, corpus, k)?
            .map(|a| vocab.decode(&a))
            .unwrap_or_default();
        hits += usize::from(exact_match(&pred, &ex.answer_strings));
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Rows of an ablation, in level order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RunSummary>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>10} {:>8} {:>8} {:>8}  note",
            "level", "final_loss", "recall", "acc", "em"
        )?;
        for r in &self.rows {
            let em = r.exact_match.map_or("-".to_string(), |v| format!("{v:.3}"));
            writeln!(
                f,
                "{:<24} {:>10.4} {:>8.3} {:>8.3} {:>8}  {}",
                r.label,
                r.final_loss,
                r.recall,
                r.masked_accuracy,
                em,
                r.failure.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// One seeded run per level, all sharing `spec.seed`. A failing level is
/// reported in its row and does not stop the others.
pub fn run_ablation(spec: &AblationSpec, data: &ExperimentData) -> Result<AblationTable> {
    if spec.axis.len() < 2 {
        return Err(Error::Config(
            "an ablation needs at least two levels".into(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.axis.len());
    for i in 0..spec.axis.len() {
        let (mut cfg, reset, label) = spec.axis.apply(&spec.base, i);
        cfg.train.seed = spec.seed;
        let row = match run_experiment(data, &cfg, reset, &label) {
            Ok(out) => out.summary,
            Err(e) => RunSummary {
                label,
                final_loss: f64::NAN,
                recall: f64::NAN,
                masked_accuracy: f64::NAN,
                ru_top1_start: f64::NAN,
                ru_top1_end: f64::NAN,
                exact_match: None,
                failure: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
