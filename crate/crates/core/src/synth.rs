//! Generated fact corpora with known ground truth.
//!
//! Each person has one birthplace and one job, stated in exactly one
//! knowledge document. The pre-training corpus paraphrases the facts of the
//! training people only; held-out people appear solely in their knowledge
//! document, so answering a probe about them requires retrieval.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::textcorpus::{CorpusRecord, MaskedExample, QaRecord, TextCorpus, Vocab};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactTaskConfig {
    pub people: usize,
    pub cities: usize,
    pub jobs: usize,
    /// Fraction of people held out of the pre-training corpus.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for FactTaskConfig {
    fn default() -> Self {
        FactTaskConfig {
            people: 256,
            cities: 32,
            jobs: 12,
            heldout_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub person: String,
    pub city: String,
    pub job: String,
}

impl Fact {
    pub fn doc_id(index: usize) -> String {
        format!("fact-{index:04}")
    }

    fn body(&self) -> String {
        format!(
            "{p} was born in {c} . {p} works as a {j} .",
            p = self.person,
            c = self.city,
            j = self.job
        )
    }

    fn paraphrases(&self) -> Vec<String> {
        let (p, c, j) = (&self.person, &self.city, &self.job);
        vec![
            format!("{p} was born in {c} ."),
            format!("the birthplace of {p} is {c} ."),
            format!("{c} is where {p} was born ."),
            format!("{p} works as a {j} ."),
            format!("the job of {p} is {j} ."),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FactTask {
    pub facts: Vec<Fact>,
    /// Indices of people whose facts never appear in the pre-training corpus.
    pub heldout: Vec<usize>,
    pub trained: Vec<usize>,
    pub cities: Vec<String>,
    pub jobs: Vec<String>,
}

impl FactTask {
    pub fn generate(cfg: &FactTaskConfig) -> Result<Self> {
        if cfg.people < 2 || cfg.cities == 0 || cfg.jobs == 0 {
            return Err(Error::Config(
                "fact task needs at least 2 people, 1 city and 1 job".into(),
            ));
        }
        let mut r = rng::stream(cfg.seed, "synth-facts", &[]);
        let cities: Vec<String> = (0..cfg.cities).map(|i| format!("city_{i:02}")).collect();
        let jobs: Vec<String> = (0..cfg.jobs).map(|i| format!("job_{i:02}")).collect();
        let facts: Vec<Fact> = (0..cfg.people)
            .map(|i| Fact {
                person: format!("person_{i:03}"),
                city: cities[r.random_range(0..cities.len())].clone(),
                job: jobs[r.random_range(0..jobs.len())].clone(),
            })
            .collect();
        let mut order: Vec<usize> = (0..cfg.people).collect();
        order.shuffle(&mut r);
        let n_held =
            ((cfg.people as f64 * cfg.heldout_fraction).round() as usize).clamp(1, cfg.people - 1);
        let mut heldout = order[..n_held].to_vec();
        let mut trained = order[n_held..].to_vec();
        heldout.sort_unstable();
        trained.sort_unstable();
        Ok(FactTask {
            facts,
            heldout,
            trained,
            cities,
            jobs,
        })
    }

    /// The knowledge corpus: one document per person.
    pub fn knowledge(&self) -> TextCorpus {
        self.knowledge_with(&self.facts)
    }

    fn knowledge_with(&self, facts: &[Fact]) -> TextCorpus {
        let records = facts
            .iter()
            .enumerate()
            .map(|(i, f)| CorpusRecord {
                doc_id: Fact::doc_id(i),
                title: f.person.clone(),
                body: f.body(),
            })
            .collect();
        TextCorpus::from_records(records).expect("generated ids are unique")
    }

    /// The pre-training corpus: paraphrases of the trained people's facts.
    /// Each record keeps the id of the knowledge document it restates.
    pub fn pretraining(&self) -> TextCorpus {
        let records = self
            .trained
            .iter()
            .map(|&i| CorpusRecord {
                doc_id: Fact::doc_id(i),
                title: self.facts[i].person.clone(),
                body: self.facts[i].paraphrases().join(" "),
            })
            .collect();
        TextCorpus::from_records(records).expect("generated ids are unique")
    }

    /// Entity names for salient-span tagging: the attribute values. People
    /// are left out so a masked sentence still names its subject.
    pub fn gazetteer(&self) -> Vec<String> {
        self.cities.iter().chain(&self.jobs).cloned().collect()
    }

    /// Vocabulary covering every generated word.
    pub fn vocab(&self) -> Vocab {
        let k = self.knowledge();
        let x = self.pretraining();
        let mut v = Vocab::build(k.texts().chain(x.texts()));
        for w in self.qa_words() {
            v.insert(w);
        }
        v
    }

    fn qa_words(&self) -> [&'static str; 3] {
        ["where", "?", "what"]
    }

    /// Birthplace probe for person `i`: the city is masked.
    pub fn birthplace_probe(&self, i: usize, vocab: &Vocab) -> Result<MaskedExample> {
        let f = &self.facts[i];
        let sentence = format!("{} was born in {} .", f.person, f.city);
        MaskedExample::from_positions(&vocab.encode(&sentence), &[4], &Fact::doc_id(i))
    }

    pub fn heldout_probes(&self, vocab: &Vocab) -> Result<Vec<MaskedExample>> {
        self.heldout
            .iter()
            .map(|&i| self.birthplace_probe(i, vocab))
            .collect()
    }

    pub fn trained_probes(&self, vocab: &Vocab) -> Result<Vec<MaskedExample>> {
        self.trained
            .iter()
            .map(|&i| self.birthplace_probe(i, vocab))
            .collect()
    }

    /// Birthplace question for person `i`.
    pub fn question(&self, i: usize) -> QaRecord {
        let f = &self.facts[i];
        QaRecord {
            question: format!("where was {} born ?", f.person),
            answers: vec![f.city.clone()],
        }
    }

    /// A second corpus version in which the birthplaces of `people` are
    /// rotated among themselves, so each of them changes city when possible.
    pub fn swapped_knowledge(&self, people: &[usize]) -> (TextCorpus, Vec<Fact>) {
        let mut facts = self.facts.clone();
        let n = people.len();
        for (k, &i) in people.iter().enumerate() {
            let mut src = people[(k + 1) % n];
            // Rotate past people who share the city so the fact really changes.
            for step in 1..n {
                let cand = people[(k + step) % n];
                if self.facts[cand].city != self.facts[i].city {
                    src = cand;
                    break;
                }
            }
            facts[i].city = self.facts[src].city.clone();
        }
        (self.knowledge_with(&facts), facts)
    }
}
