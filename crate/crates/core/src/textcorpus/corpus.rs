use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::vocab::{tokenize, TokenId, Vocab};
use crate::{Error, Result};

/// Id reserved for the empty null document.
pub const NULL_DOC_ID: &str = "<null>";

/// One line of a corpus file, still as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

/// A parsed corpus file: records in file order plus a content digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCorpus {
    pub records: Vec<CorpusRecord>,
    pub version: String,
}

pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Read a `doc_id \t title \t body` file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<TextCorpus> {
    let bytes = std::fs::read(path.as_ref())?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("{}: not UTF-8: {e}", path.as_ref().display())))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<TextCorpus> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            let missing = ["doc_id", "title", "body"]
                .get(fields.len())
                .map(|f| format!(", missing field `{f}`"))
                .unwrap_or_default();
            return Err(Error::Parse {
                line: line_no,
                detail: format!(
                    "expected 3 tab-separated fields (doc_id, title, body), found {}{missing}",
                    fields.len()
                ),
            });
        }
        let doc_id = fields[0].trim();
        if doc_id.is_empty() || doc_id == NULL_DOC_ID {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("invalid doc_id {doc_id:?}"),
            });
        }
        if !seen.insert(doc_id.to_string()) {
            return Err(Error::Validation(format!(
                "duplicate doc_id {doc_id:?} on line {line_no}"
            )));
        }
        records.push(CorpusRecord {
            doc_id: doc_id.to_string(),
            title: fields[1].to_string(),
            body: fields[2].to_string(),
        });
    }
    Ok(TextCorpus {
        records,
        version: content_digest(text.as_bytes()),
    })
}

impl TextCorpus {
    pub fn to_file_string(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.doc_id, r.title, r.body))
            .collect()
    }

    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self> {
        parse_corpus(
            &TextCorpus {
                records,
                version: String::new(),
            }
            .to_file_string(),
        )
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .flat_map(|r| [r.title.as_str(), r.body.as_str()])
    }
}

/// One knowledge-corpus entry in token form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: Vec<TokenId>,
    pub body: Vec<TokenId>,
}

impl Document {
    /// The empty document ∅.
    pub fn null() -> Self {
        Document {
            doc_id: NULL_DOC_ID.to_string(),
            title: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn is_null(&self) -> bool {
        self.doc_id == NULL_DOC_ID
    }
}

/// Ordered documents plus a version tag that changes with the contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeCorpus {
    docs: Vec<Document>,
    version: String,
}

impl KnowledgeCorpus {
    /// Tokenize `text`; bodies longer than `max_chunk_len` tokens are truncated.
    pub fn from_text(text: &TextCorpus, vocab: &Vocab, max_chunk_len: usize) -> Self {
        let docs = text
            .records
            .iter()
            .map(|r| {
                let mut body = vocab.encode_tokens(&tokenize(&r.body));
                if body.len() > max_chunk_len {
                    log::warn!(
                        "document {} has {} body tokens, truncating to {max_chunk_len}",
                        r.doc_id,
                        body.len()
                    );
                    body.truncate(max_chunk_len);
                }
                Document {
                    doc_id: r.doc_id.clone(),
                    title: vocab.encode(&r.title),
                    body,
                }
            })
            .collect();
        KnowledgeCorpus {
            docs,
            version: text.version.clone(),
        }
    }

    /// Corpus from in-memory documents; the version is a digest of their contents.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut hasher = Sha256::new();
        for d in &docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate doc_id {:?}",
                    d.doc_id
                )));
            }
            hasher.update(d.doc_id.as_bytes());
            hasher.update([0u8]);
            for part in [&d.title, &d.body] {
                hasher.update((part.len() as u64).to_le_bytes());
                for &t in part.iter() {
                    hasher.update((t as u64).to_le_bytes());
                }
            }
        }
        Ok(KnowledgeCorpus {
            docs,
            version: hex::encode(hasher.finalize()),
        })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, row: usize) -> &Document {
        &self.docs[row]
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.docs.iter().position(|d| d.doc_id == doc_id)
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.position(doc_id).map(|i| &self.docs[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_lines_in_order() {
        let c = parse_corpus("a\tA\tx y\nb\tB\tz\nc\tC\tw w\n").unwrap();
        let ids: Vec<_> = c.records.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = parse_corpus("").unwrap();
        assert!(c.records.is_empty());
        assert_eq!(c.version, content_digest(b""));
        assert_eq!(
            c.version,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn missing_body_names_line() {
        let err = parse_corpus("a\tA\tbody\nb\tB\n").unwrap_err();
        match err {
            Error::Parse { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("body"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            parse_corpus("a\tA\tx\na\tB\ty\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn version_tracks_content() {
        let a = parse_corpus("a\tA\tx\n").unwrap();
        let b = parse_corpus("a\tA\ty\n").unwrap();
        assert_ne!(a.version, b.version);
        let vocab = Vocab::build(a.texts().chain(b.texts()));
        let ka = KnowledgeCorpus::from_documents(KnowledgeCorpus::from_text(&a, &vocab, 10).docs)
            .unwrap();
        let kb = KnowledgeCorpus::from_documents(KnowledgeCorpus::from_text(&b, &vocab, 10).docs)
            .unwrap();
        assert_ne!(ka.version(), kb.version());
    }

    #[test]
    fn long_bodies_truncated() {
        let t = parse_corpus("a\tA\tone two three four\n").unwrap();
        let vocab = Vocab::build(t.texts());
        let k = KnowledgeCorpus::from_text(&t, &vocab, 2);
        assert_eq!(k.doc(0).body.len(), 2);
    }
}
