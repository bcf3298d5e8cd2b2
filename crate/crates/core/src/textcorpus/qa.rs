use std::collections::HashSet;
use std::path::Path;

use super::vocab::{TokenId, Vocab};
use crate::{Error, Result};

/// Separates reference answers within the second field.
pub const ANSWER_SEPARATOR: char = '\u{1f}';

/// One open-QA example: a question and its reference answers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRecord {
    pub question: String,
    pub answers: Vec<String>,
}

/// `question<TAB>answer[<US>answer...]`, one per line; blank lines ignored.
pub fn parse_qa(text: &str) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (q, a) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            detail: "missing answers field".into(),
        })?;
        let answers: Vec<String> = a
            .split(ANSWER_SEPARATOR)
            .map(|s| s.trim().to_string())
            .collect();
        if q.trim().is_empty() || answers.iter().all(|a| a.is_empty()) {
            return Err(Error::Parse {
                line: i + 1,
                detail: "empty question or answers".into(),
            });
        }
        out.push(QaRecord {
            question: q.trim().to_string(),
            answers,
        });
    }
    Ok(out)
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    parse_qa(&std::fs::read_to_string(path)?)
}

pub fn qa_to_string(records: &[QaRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let answers: Vec<&str> = r.answers.iter().map(String::as_str).collect();
            format!(
                "{}\t{}\n",
                r.question,
                answers.join(&ANSWER_SEPARATOR.to_string())
            )
        })
        .collect()
}

/// Train and evaluation splits must not share a question.
pub fn check_disjoint(train: &[QaRecord], eval: &[QaRecord]) -> Result<()> {
    let seen: HashSet<String> = train
        .iter()
        .map(|r| normalize_question(&r.question))
        .collect();
    if let Some(r) = eval
        .iter()
        .find(|r| seen.contains(&normalize_question(&r.question)))
    {
        return Err(Error::Validation(format!(
            "question {:?} appears in both the training and evaluation split",
            r.question
        )));
    }
    Ok(())
}

fn normalize_question(q: &str) -> String {
    q.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A QA record in token form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub question: Vec<TokenId>,
    pub answers: Vec<Vec<TokenId>>,
    pub answer_strings: Vec<String>,
}

impl QaExample {
    pub fn encode(record: &QaRecord, vocab: &Vocab) -> Self {
        QaExample {
            question: vocab.encode(&record.question),
            answers: record.answers.iter().map(|a| vocab.encode(a)).collect(),
            answer_strings: record.answers.clone(),
        }
    }
}
