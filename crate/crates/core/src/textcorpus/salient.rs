use regex::Regex;

use super::vocab::tokenize;
use crate::{Error, Result};

/// Month-and-year style dates ("july 1969", "july 20 1969") and bare years.
pub const DEFAULT_DATE_PATTERN: &str = r"(?:january|february|march|april|may|june|july|august|september|october|november|december)(?: [0-9]{1,2},?)? [0-9]{4}|[12][0-9]{3}";

/// Inclusive token span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Gazetteer of entity token sequences plus a date pattern.
#[derive(Clone, Debug)]
pub struct SalientSpanRules {
    entries: Vec<Vec<String>>,
    date: Regex,
    max_date_tokens: usize,
}

impl SalientSpanRules {
    pub fn new<'a>(
        gazetteer: impl IntoIterator<Item = &'a str>,
        date_pattern: &str,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for entry in gazetteer {
            let toks = tokenize(entry);
            if toks.is_empty() {
                return Err(Error::Config("empty gazetteer entry".into()));
            }
            entries.push(toks);
        }
        entries.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        entries.dedup();
        let date = Regex::new(&format!("^(?:{date_pattern})$"))
            .map_err(|e| Error::Config(format!("bad date pattern: {e}")))?;
        Ok(SalientSpanRules {
            entries,
            date,
            max_date_tokens: 4,
        })
    }

    pub fn with_default_dates<'a>(gazetteer: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::new(gazetteer, DEFAULT_DATE_PATTERN)
    }

    /// Length of the longest rule match starting at `start`, if any.
    fn longest_match_at<S: AsRef<str>>(&self, tokens: &[S], start: usize) -> Option<usize> {
        let rest = &tokens[start..];
        let gaz = self
            .entries
            .iter()
            .find(|e| e.len() <= rest.len() && e.iter().zip(rest).all(|(a, b)| a == b.as_ref()))
            .map(|e| e.len());
        let max_date = self.max_date_tokens.min(rest.len());
        let date = (1..=max_date).rev().find(|&n| {
            let joined = rest[..n]
                .iter()
                .map(AsRef::as_ref)
                .collect::<Vec<_>>()
                .join(" ");
            self.date.is_match(&joined)
        });
        gaz.max(date)
    }
}

/// Leftmost-longest scan: non-overlapping spans sorted by start.
pub fn tag_salient_spans<S: AsRef<str>>(tokens: &[S], rules: &SalientSpanRules) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match rules.longest_match_at(tokens, i) {
            Some(n) => {
                spans.push(Span {
                    start: i,
                    end: i + n - 1,
                });
                i += n;
            }
            None => i += 1,
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn gazetteer_hits() {
        let rules = SalientSpanRules::with_default_dates(["uk", "pound"]).unwrap();
        let t = toks("the pound is the currency of the uk");
        let spans = tag_salient_spans(&t, &rules);
        assert_eq!(
            spans,
            vec![Span { start: 1, end: 1 }, Span { start: 7, end: 7 }]
        );
    }

    #[test]
    fn month_year_date() {
        let rules = SalientSpanRules::with_default_dates(std::iter::empty()).unwrap();
        let t = toks("apollo landed in july 1969");
        assert_eq!(
            tag_salient_spans(&t, &rules),
            vec![Span { start: 3, end: 4 }]
        );
    }

    #[test]
    fn no_hits() {
        let rules = SalientSpanRules::with_default_dates(["mars"]).unwrap();
        assert!(tag_salient_spans(&toks("nothing to see here"), &rules).is_empty());
    }

    #[test]
    fn longest_entry_wins() {
        let rules =
            SalientSpanRules::with_default_dates(["new", "new york", "new york city"]).unwrap();
        let t = toks("she moved to new york city in 2001");
        assert_eq!(
            tag_salient_spans(&t, &rules),
            vec![Span { start: 3, end: 5 }, Span { start: 7, end: 7 }]
        );
    }

    #[test]
    fn empty_entry_rejected() {
        assert!(SalientSpanRules::with_default_dates(["  "]).is_err());
    }

    proptest! {
        #[test]
        fn spans_disjoint_and_sorted(
            tokens in proptest::collection::vec(0u8..6, 1..40),
            gaz in proptest::collection::vec(proptest::collection::vec(0u8..6, 1..4), 0..6),
        ) {
            let words = ["a", "b", "c", "d", "1999", "may"];
            let t: Vec<&str> = tokens.iter().map(|&i| words[i as usize]).collect();
            let entries: Vec<String> = gaz
                .iter()
                .map(|e| e.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" "))
                .collect();
            let rules = SalientSpanRules::with_default_dates(entries.iter().map(String::as_str)).unwrap();
            let spans = tag_salient_spans(&t, &rules);
            for s in &spans {
                prop_assert!(s.start <= s.end && s.end < t.len());
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
        }
    }
}
