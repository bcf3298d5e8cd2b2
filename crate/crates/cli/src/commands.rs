use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use ralm_core::evalkit::{
    final_loss, qa_exact_match, recall_at_k, retrieval_utility, run_ablation, AblationAxis,
    AblationSpec, ExperimentConfig, ExperimentData, RecallOracle, RecallQuery,
};
use ralm_core::mipsindex::{build_index, IndexSnapshot, RefreshMode};
use ralm_core::reader::mlm_probability;
use ralm_core::retriever::{embed_doc, embed_input, retrieval_distribution, ParamVersion};
use ralm_core::textcorpus::{
    check_disjoint, content_digest, load_corpus, load_qa, tokenize, Document, KnowledgeCorpus,
    MaskedExample, MaskingScheme, QaExample, QaRecord, SalientSpanRules, TextCorpus, Vocab, UNK,
};
use ralm_core::trainer::{
    finetune_step, ict_recall_at_1, warmstart, Checkpoint, MetricsSink, ParamStore, PretrainData,
    Pretrainer, StepRecord,
};

use crate::config::RunConfig;
use crate::CliError;

pub const WARMSTART_CHECKPOINT: &str = "warmstart.ckpt";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain.metrics.jsonl";
pub const FINETUNE_METRICS: &str = "finetune.metrics.jsonl";
const ICT_EVAL_QUERIES: usize = 256;
const PROBE_STREAM: &str = "ablation-probes";

/// Name of the periodic pre-training checkpoint written after `step`.
pub fn step_checkpoint_name(step: u64) -> String {
    format!("pretrain-step-{step:06}.ckpt")
}

/// Flags shared by every verb.
#[derive(Clone, Debug)]
pub struct GlobalArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub mode: Option<RefreshMode>,
}

/// A loaded config with its corpora and vocabulary.
pub struct Workspace {
    pub cfg: RunConfig,
    pub digest: String,
    pub out: PathBuf,
    pub vocab: Vocab,
    pub pretrain_text: TextCorpus,
    pub knowledge_text: TextCorpus,
    pub knowledge: Arc<KnowledgeCorpus>,
    pub rules: SalientSpanRules,
    pub qa_train: Option<Vec<QaRecord>>,
    pub qa_eval: Option<Vec<QaRecord>>,
}

fn read_input<T>(
    field: &str,
    path: &Path,
    load: impl FnOnce(&Path) -> ralm_core::Result<T>,
) -> Result<T, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{field}: no such file {}",
            path.display()
        )));
    }
    load(path).map_err(|e| CliError::Data(format!("{field} ({}): {e}", path.display())))
}

fn load_gazetteer(path: &Path) -> ralm_core::Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

impl Workspace {
    pub fn load(args: &GlobalArgs) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.train.seed = seed;
        }
        if let Some(mode) = args.mode {
            cfg.train.refresh_mode = mode;
        }
        let digest = cfg.digest();
        cfg.resolve_paths(args.config.parent().unwrap_or(Path::new(".")));

        let x_path = cfg
            .paths
            .pretrain_corpus
            .clone()
            .ok_or_else(|| CliError::Config("paths.pretrain_corpus is required".into()))?;
        let pretrain_text = read_input("paths.pretrain_corpus", &x_path, |p| load_corpus(p))?;
        let knowledge_text = match &cfg.paths.knowledge_corpus {
            Some(p) => read_input("paths.knowledge_corpus", p, |p| load_corpus(p))?,
            None => pretrain_text.clone(),
        };
        if knowledge_text.records.is_empty() {
            return Err(CliError::Data("knowledge corpus is empty".into()));
        }
        let gazetteer = match &cfg.paths.gazetteer {
            Some(p) => read_input("paths.gazetteer", p, load_gazetteer)?,
            None => Vec::new(),
        };
        let qa_train = match &cfg.paths.qa_train {
            Some(p) => Some(read_input("paths.qa_train", p, |p| load_qa(p))?),
            None => None,
        };
        let qa_eval = match &cfg.paths.qa_eval {
            Some(p) => Some(read_input("paths.qa_eval", p, |p| load_qa(p))?),
            None => None,
        };

        let mut vocab = Vocab::build(pretrain_text.texts().chain(knowledge_text.texts()));
        let qa_texts = qa_train.iter().chain(&qa_eval).flatten().flat_map(|r| {
            std::iter::once(r.question.as_str()).chain(r.answers.iter().map(String::as_str))
        });
        for text in gazetteer.iter().map(String::as_str).chain(qa_texts) {
            for tok in tokenize(text) {
                vocab.insert(&tok);
            }
        }
        let rules = match &cfg.date_pattern {
            Some(p) => SalientSpanRules::new(gazetteer.iter().map(String::as_str), p),
            None => SalientSpanRules::with_default_dates(gazetteer.iter().map(String::as_str)),
        }
        .map_err(|e| CliError::Config(format!("date_pattern: {e}")))?;
        let knowledge = Arc::new(KnowledgeCorpus::from_text(
            &knowledge_text,
            &vocab,
            cfg.model.max_chunk_len,
        ));
        cfg.train
            .validate(knowledge.len())
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        fs::create_dir_all(&args.out).map_err(|e| {
            CliError::Config(format!(
                "cannot create output directory {}: {e}",
                args.out.display()
            ))
        })?;
        Ok(Workspace {
            cfg,
            digest,
            out: args.out.clone(),
            vocab,
            pretrain_text,
            knowledge_text,
            knowledge,
            rules,
            qa_train,
            qa_eval,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn fresh_store(&self) -> Result<ParamStore<f64>, CliError> {
        let v = self.vocab.len();
        Ok(ParamStore::init(
            &self.cfg.model.retriever(v),
            &self.cfg.model.reader(v),
            self.cfg.train.seed,
        )?)
    }

    fn pretrain_data(&self) -> Result<PretrainData, CliError> {
        Ok(PretrainData::new(
            &self.pretrain_text,
            self.vocab.clone(),
            self.rules.clone(),
        )?)
    }

    /// Load a checkpoint whose shapes match this config.
    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint<f64>, CliError> {
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "no checkpoint at {}",
                path.display()
            )));
        }
        let ck = Checkpoint::<f64>::load(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let v = self.vocab.len();
        if ck.store.theta.config() != self.cfg.model.retriever(v)
            || ck.store.phi.config() != self.cfg.model.reader(v)
        {
            return Err(CliError::Config(format!(
                "checkpoint {} was written for different model dimensions or vocabulary",
                path.display()
            )));
        }
        Ok(ck)
    }

    fn period(&self) -> Option<usize> {
        self.vocab.get(".")
    }

    fn index(&self, store: &ParamStore<f64>) -> Result<IndexSnapshot<f64>, CliError> {
        Ok(build_index(
            &self.knowledge,
            &store.theta,
            store.version(),
            self.cfg.train.index,
            ralm_core::rng::stream_seed(self.cfg.train.seed, "kmeans"),
        )?)
    }

    fn save(&self, ck: &Checkpoint<f64>, name: &str) -> Result<(PathBuf, String), CliError> {
        let path = self.path(name);
        ck.save(&path)?;
        Ok((path, content_digest(&ck.to_bytes())))
    }
}

fn checkpoint(
    phase: &str,
    step: u64,
    digest: &str,
    skipped: u64,
    store: ParamStore<f64>,
) -> Checkpoint<f64> {
    Checkpoint {
        phase: phase.to_string(),
        step,
        config_digest: digest.to_string(),
        skipped,
        store,
        refresh: None,
    }
}

/// ICT then retrieval-free MLM warm-start; writes `warmstart.ckpt`.
pub fn cmd_warmstart(args: &GlobalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ws = Workspace::load(args)?;
    let mut store = ws.fresh_store()?;
    let data = ws.pretrain_data()?;
    let t = &ws.cfg.train;
    let recall_before =
        ict_recall_at_1(&store, &ws.knowledge, ws.period(), ICT_EVAL_QUERIES, t.seed)?;
    let log = warmstart(
        &mut store,
        &ws.knowledge,
        &data,
        ws.period(),
        t.masking,
        &ws.cfg.warmstart,
        &ws.cfg.warmstart.optimizer.unwrap_or(t.optimizer),
        t.clip_norm,
        t.seed,
    )?;
    let recall = ict_recall_at_1(&store, &ws.knowledge, ws.period(), ICT_EVAL_QUERIES, t.seed)?;
    let (path, digest) = ws.save(
        &checkpoint("warmstart", 0, &ws.digest, 0, store),
        WARMSTART_CHECKPOINT,
    )?;
    writeln!(
        out,
        "warmstart: ict_steps={} ict_loss={:.4} mlm_steps={} mlm_loss={:.4} recall@1={:.3} (from {:.3}) checkpoint={} digest={}",
        log.ict_loss.len(),
        log.ict_loss.last().copied().unwrap_or(f64::NAN),
        log.mlm_loss.len(),
        log.mlm_loss.last().copied().unwrap_or(f64::NAN),
        recall,
        recall_before,
        path.display(),
        digest
    )?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainArgs {
    pub resume: Option<PathBuf>,
    /// Starting checkpoint; defaults to the warm-start output.
    pub init: Option<PathBuf>,
    pub allow_cold: bool,
}

/// Marginal-likelihood pre-training with periodic index refreshes.
pub fn cmd_pretrain(
    args: &GlobalArgs,
    opts: &PretrainArgs,
    stop: &AtomicBool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::load(args)?;
    let data = Arc::new(ws.pretrain_data()?);
    let cfg = ws.cfg.train.clone();
    let metrics_path = ws.path(PRETRAIN_METRICS);
    let (mut trainer, mut metrics) = if let Some(resume) = &opts.resume {
        let ck = ws.load_checkpoint(resume)?;
        if ck.phase != "pretrain" {
            return Err(CliError::Config(format!(
                "{} is a {} checkpoint",
                resume.display(),
                ck.phase
            )));
        }
        if ck.config_digest != ws.digest {
            return Err(CliError::Config(format!(
                "{} was written under a different config",
                resume.display()
            )));
        }
        let step = ck.step;
        let metrics = MetricsSink::resume(&metrics_path, step)?;
        log::info!("resuming pre-training at step {step}");
        (
            Pretrainer::resume(cfg.clone(), data, Arc::clone(&ws.knowledge), ck)?,
            metrics,
        )
    } else {
        let init = opts
            .init
            .clone()
            .unwrap_or_else(|| ws.path(WARMSTART_CHECKPOINT));
        let store = if init.is_file() {
            ws.load_checkpoint(&init)?.store
        } else if opts.allow_cold {
            log::warn!(
                "no warm-start checkpoint at {}; starting cold",
                init.display()
            );
            ws.fresh_store()?
        } else {
            return Err(CliError::Config(format!(
                "no warm-start checkpoint at {}; run warmstart first or pass --allow-cold",
                init.display()
            )));
        };
        let metrics = MetricsSink::create(&metrics_path, "pretrain", &ws.digest)?;
        (
            Pretrainer::new(cfg.clone(), data, Arc::clone(&ws.knowledge), store)?,
            metrics,
        )
    };

    let mut losses = Vec::new();
    let mut last: Option<StepRecord> = None;
    while trainer.step_count() < cfg.steps {
        let rec = trainer.step()?;
        metrics.write(&rec)?;
        losses.push(rec.loss);
        let step = rec.step;
        if step % 100 == 0 {
            log::info!(
                "step {step}: loss {:.4} staleness {}",
                rec.loss,
                rec.staleness
            );
        }
        last = Some(rec);
        let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        let interrupted = stop.load(Ordering::SeqCst);
        if periodic || interrupted {
            metrics.flush()?;
            ws.save(&trainer.checkpoint(&ws.digest), &step_checkpoint_name(step))?;
        }
        if interrupted {
            writeln!(
                out,
                "pretrain: interrupted at step {step}; checkpoint {}",
                step_checkpoint_name(step)
            )?;
            return Err(CliError::Interrupted(step));
        }
    }
    metrics.flush()?;
    let (path, digest) = ws.save(&trainer.checkpoint(&ws.digest), PRETRAIN_CHECKPOINT)?;
    writeln!(
        out,
        "pretrain: steps={} final_loss={:.4} last_staleness={} metrics={} checkpoint={} digest={}",
        trainer.step_count(),
        final_loss(&losses),
        last.map_or(0, |r| r.staleness),
        metrics.path().display(),
        path.display(),
        digest
    )?;
    Ok(())
}

fn encode_qa(records: &[QaRecord], vocab: &Vocab) -> Vec<QaExample> {
    records
        .iter()
        .map(|r| QaExample::encode(r, vocab))
        .collect()
}

fn contains(hay: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Examples none of whose answers occurs anywhere in the corpus.
fn unanswerable(examples: &[QaExample], corpus: &KnowledgeCorpus) -> usize {
    examples
        .iter()
        .filter(|ex| {
            !corpus.docs().iter().any(|d| {
                ex.answers
                    .iter()
                    .any(|a| contains(&d.body, a) || contains(&d.title, a))
            })
        })
        .count()
}

fn report_qa(
    ws: &Workspace,
    store: &ParamStore<f64>,
    index: &IndexSnapshot<f64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let records = ws
        .qa_eval
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.qa_eval is required".into()))?;
    let examples = encode_qa(records, &ws.vocab);
    let k = ws.cfg.finetune.k;
    let em = qa_exact_match(store, &examples, &ws.vocab, index, &ws.knowledge, k)?;
    let queries: Vec<RecallQuery> = examples
        .iter()
        .map(|ex| RecallQuery {
            tokens: ex.question.clone(),
            oracle: RecallOracle::AnswerString(ex.answers.clone()),
        })
        .collect();
    let recall = recall_at_k(&queries, &store.theta, index, &ws.knowledge, k)?;
    writeln!(
        out,
        "eval: examples={} exact_match={:.4} recall@{k}={:.4} unanswerable={}",
        examples.len(),
        em,
        recall,
        unanswerable(&examples, &ws.knowledge)
    )?;
    Ok(())
}

/// Fine-tune on `paths.qa_train`, then report on `paths.qa_eval`.
pub fn cmd_finetune(
    args: &GlobalArgs,
    checkpoint_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::load(args)?;
    let train = ws
        .qa_train
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.qa_train is required".into()))?;
    let eval = ws
        .qa_eval
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.qa_eval is required".into()))?;
    check_disjoint(train, eval)?;
    let ck_path = checkpoint_path.map_or_else(|| ws.path(PRETRAIN_CHECKPOINT), Path::to_path_buf);
    let mut store = ws.load_checkpoint(&ck_path)?.store;
    store.reset_optimizer();
    let index = ws.index(&store)?;
    let examples = encode_qa(train, &ws.vocab);
    let ft = &ws.cfg.finetune;
    let t = &ws.cfg.train;
    let mut metrics = MetricsSink::create(ws.path(FINETUNE_METRICS), "finetune", &ws.digest)?;
    let mut skipped = 0;
    for step in 0..ft.steps {
        let rec = finetune_step(
            &mut store,
            &examples,
            &index,
            &ws.knowledge,
            ft,
            &t.optimizer,
            t.clip_norm,
            t.seed,
            step,
        )?;
        skipped += rec.skipped.unwrap_or(0);
        metrics.write(&rec)?;
    }
    metrics.flush()?;
    let (path, digest) = ws.save(
        &checkpoint("finetune", ft.steps, &ws.digest, skipped, store.clone()),
        FINETUNE_CHECKPOINT,
    )?;
    writeln!(
        out,
        "finetune: steps={} skipped_examples={} train_unanswerable={} checkpoint={} digest={}",
        ft.steps,
        skipped,
        unanswerable(&examples, &ws.knowledge),
        path.display(),
        digest
    )?;
    report_qa(&ws, &store, &index, out)
}

/// Exact match and answer recall on `paths.qa_eval` without training.
pub fn cmd_eval(
    args: &GlobalArgs,
    checkpoint_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::load(args)?;
    if let (Some(train), Some(eval)) = (&ws.qa_train, &ws.qa_eval) {
        check_disjoint(train, eval)?;
    }
    let ck_path = checkpoint_path.map_or_else(|| ws.path(FINETUNE_CHECKPOINT), Path::to_path_buf);
    let store = ws.load_checkpoint(&ck_path)?.store;
    let index = ws.index(&store)?;
    report_qa(&ws, &store, &index, out)
}

/// A query with optional `[[...]]` spans marking masked targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedQuery {
    pub tokens: Vec<String>,
    pub masked: Vec<usize>,
}

pub fn parse_query(text: &str) -> Result<ParsedQuery, CliError> {
    let bad = |m: &str| CliError::Config(format!("unparseable query {text:?}: {m}"));
    let mut tokens = Vec::new();
    let mut masked = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("[[") {
        let close = rest[open..].find("]]").ok_or_else(|| bad("unclosed [["))? + open;
        let inner = &rest[open + 2..close];
        if inner.contains("[[") {
            return Err(bad("nested [["));
        }
        tokens.extend(tokenize(&rest[..open]));
        let span = tokenize(inner);
        if span.is_empty() {
            return Err(bad("empty [[ ]] span"));
        }
        masked.extend(tokens.len()..tokens.len() + span.len());
        tokens.extend(span);
        rest = &rest[close + 2..];
    }
    if rest.contains("]]") {
        return Err(bad("]] without [["));
    }
    tokens.extend(tokenize(rest));
    if tokens.is_empty() {
        return Err(bad("no tokens"));
    }
    Ok(ParsedQuery { tokens, masked })
}

/// Print the top-k retrievals for a query, with reader scores when the
/// query has masked spans.
pub fn cmd_inspect(
    args: &GlobalArgs,
    checkpoint_path: Option<&Path>,
    query: &str,
    k: usize,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let parsed = parse_query(query)?;
    let ws = Workspace::load(args)?;
    if k == 0 || k > ws.knowledge.len() {
        return Err(CliError::Config(format!(
            "--k must be in 1..={}",
            ws.knowledge.len()
        )));
    }
    let ck_path = checkpoint_path.map_or_else(|| ws.path(PRETRAIN_CHECKPOINT), Path::to_path_buf);
    let store = ws.load_checkpoint(&ck_path)?.store;
    let index = ws.index(&store)?;
    let ids = ws.vocab.encode_tokens(&parsed.tokens);
    if parsed.masked.iter().any(|&p| ids[p] == UNK) {
        return Err(CliError::Config(
            "a masked word is not in the vocabulary".into(),
        ));
    }
    let example = if parsed.masked.is_empty() {
        None
    } else {
        Some(
            MaskedExample::from_positions(&ids, &parsed.masked, "")
                .map_err(|e| CliError::Config(e.to_string()))?,
        )
    };
    let query_ids = example.as_ref().map_or(&ids, |x| &x.input_tokens);
    let q = embed_input(query_ids, &store.theta)?;
    let top = index.search_topk(&q, k)?;
    let mut candidates: Vec<Document> = top
        .rows
        .iter()
        .map(|&r| ws.knowledge.doc(r).clone())
        .collect();
    if example.is_some() {
        candidates.push(Document::null());
    }
    let scores = candidates
        .iter()
        .map(|z| {
            Ok(q.vector
                .dot(&embed_doc(z, &store.theta, ParamVersion(0))?.vector)?)
        })
        .collect::<Result<Vec<f64>, CliError>>()?;
    let p_z = retrieval_distribution(&scores)?;

    writeln!(out, "query: {}", ws.vocab.decode(query_ids))?;
    match &example {
        Some(_) => writeln!(
            out,
            "{:<5} {:<16} {:<24} {:>10} {:>8} {:>10} {:>9}",
            "rank", "doc_id", "title", "score", "p(z|x)", "p(y|z,x)", "RU"
        )?,
        None => writeln!(
            out,
            "{:<5} {:<16} {:<24} {:>10} {:>8}",
            "rank", "doc_id", "title", "score", "p(z|x)"
        )?,
    }
    for (i, z) in candidates.iter().enumerate() {
        let title = if z.is_null() {
            String::new()
        } else {
            ws.vocab.decode(&z.title)
        };
        let rank = if z.is_null() {
            "-".to_string()
        } else {
            (i + 1).to_string()
        };
        match &example {
            Some(x) => {
                let p_y = mlm_probability(x, z, &store.phi)?;
                let ru = retrieval_utility(x, z, &store.phi)?;
                writeln!(
                    out,
                    "{:<5} {:<16} {:<24} {:>10.4} {:>8.4} {:>10.3e} {:>9.4}",
                    rank, z.doc_id, title, scores[i], p_z[i], p_y, ru
                )?;
            }
            None => writeln!(
                out,
                "{:<5} {:<16} {:<24} {:>10.4} {:>8.4}",
                rank, z.doc_id, title, scores[i], p_z[i]
            )?,
        }
    }
    Ok(())
}

/// One seeded run per ablation level; rows are printed as JSON lines and as
/// a table, and optionally written to `report`.
pub fn cmd_ablate(
    args: &GlobalArgs,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ws = Workspace::load(args)?;
    let ab = ws
        .cfg
        .ablation
        .clone()
        .ok_or_else(|| CliError::Config("an [ablation] section is required".into()))?;
    let has_qa = ws.qa_train.is_some() && ws.qa_eval.is_some();
    if matches!(
        ab.axis,
        AblationAxis::ResetRetriever(_) | AblationAxis::ResetEncoder(_)
    ) && !has_qa
    {
        return Err(CliError::Config(
            "reset ablations fine-tune, so paths.qa_train and paths.qa_eval are required".into(),
        ));
    }
    let pretrain = ws.pretrain_data()?;
    let probes = (0..ab.probes as u64)
        .map(|i| {
            pretrain.example(
                MaskingScheme::SalientSpan,
                ws.cfg.train.seed,
                PROBE_STREAM,
                0,
                i,
            )
        })
        .collect::<ralm_core::Result<Vec<_>>>()?;
    let mut data = ExperimentData::new(
        &ws.knowledge_text,
        &ws.pretrain_text,
        ws.vocab.clone(),
        ws.rules.clone(),
        ws.cfg.model.max_chunk_len,
    )?
    .with_probes(probes);
    if let (Some(train), Some(eval)) = (&ws.qa_train, &ws.qa_eval) {
        check_disjoint(train, eval)?;
        data = data.with_qa(train, eval);
    }
    let v = ws.vocab.len();
    let spec = AblationSpec {
        axis: ab.axis,
        base: ExperimentConfig {
            retriever: ws.cfg.model.retriever(v),
            reader: ws.cfg.model.reader(v),
            warmstart: ws.cfg.warmstart.clone(),
            train: ws.cfg.train.clone(),
            finetune: has_qa.then(|| ws.cfg.finetune.clone()),
            recall_k: ab.recall_k,
        },
        seed: ws.cfg.train.seed,
    };
    let table = run_ablation(&spec, &data)?;
    let lines: Vec<String> = table
        .rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes"))
        .collect();
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    write!(out, "{table}")?;
    if let Some(path) = report {
        fs::write(path, lines.join("\n") + "\n").map_err(|e| {
            CliError::Config(format!("cannot write report {}: {e}", path.display()))
        })?;
    }
    if let Some(failed) = table.rows.iter().find(|r| r.failure.is_some()) {
        log::error!("level {} failed", failed.label);
    }
    Ok(())
}
