//! String similarity kernels used by the matchers.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const DEFAULT_NGRAM: usize = 3;

/// Lowercases, collapses every run of non-alphanumeric characters
/// (underscores included) to one space, and trims.
pub fn normalize_name(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Similarity method plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchMethod {
    Exact,
    Levenshtein,
    TfidfNgram { n: usize },
}

impl Default for MatchMethod {
    fn default() -> Self {
        MatchMethod::TfidfNgram { n: DEFAULT_NGRAM }
    }
}

impl MatchMethod {
    pub fn tfidf(n: usize) -> Result<Self, MethodParseError> {
        if n == 0 {
            return Err(MethodParseError("n-gram length must be at least 1".into()));
        }
        Ok(MatchMethod::TfidfNgram { n })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid match method: {0}")]
pub struct MethodParseError(String);

impl fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchMethod::Exact => f.write_str("exact"),
            MatchMethod::Levenshtein => f.write_str("levenshtein"),
            MatchMethod::TfidfNgram { n } if *n == DEFAULT_NGRAM => f.write_str("tfidf_ngram"),
            MatchMethod::TfidfNgram { n } => write!(f, "tfidf_ngram:{n}"),
        }
    }
}

impl FromStr for MatchMethod {
    type Err = MethodParseError;

    /// Accepts `exact`, `levenshtein`, `tfidf`, `tfidf_ngram`, or `tfidf_ngram:<n>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchMethod::Exact),
            "levenshtein" => Ok(MatchMethod::Levenshtein),
            "tfidf" | "tfidf_ngram" => Ok(MatchMethod::default()),
            other => {
                let n = other
                    .strip_prefix("tfidf_ngram:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| MethodParseError(format!("`{other}`")))?;
                MatchMethod::tfidf(n)
            }
        }
    }
}

impl Serialize for MatchMethod {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MatchMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Character n-gram terms of an already-normalized string. Strings shorter
/// than `n` yield themselves as a single term.
pub fn char_ngrams(normalized: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = normalized.chars().collect();
    if chars.len() < n {
        return vec![normalized.to_string()];
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Sparse unit-length tf-idf vector keyed by term.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfVector(BTreeMap<String, f64>);

impl TfidfVector {
    pub fn cosine(&self, other: &TfidfVector) -> f64 {
        let dot: f64 = self.0.iter().filter_map(|(t, w)| other.0.get(t).map(|v| w * v)).sum();
        // An empty sum is -0.0; report plain zero.
        if dot > 0.0 {
            dot.min(1.0)
        } else {
            0.0
        }
    }
}

/// Document frequencies fitted on a candidate corpus.
/// IDF = ln((1 + N) / (1 + df)) + 1, tf = raw count, vectors L2-normalized.
#[derive(Debug, Clone)]
pub struct TfidfModel {
    n: usize,
    num_docs: usize,
    df: BTreeMap<String, usize>,
}

impl TfidfModel {
    pub fn fit<S: AsRef<str>>(corpus: &[S], n: usize) -> Self {
        let mut df = BTreeMap::new();
        for doc in corpus {
            let terms: HashSet<String> = char_ngrams(&normalize_name(doc.as_ref()), n).into_iter().collect();
            for t in terms {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self {
            n,
            num_docs: corpus.len(),
            df,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        ((1.0 + self.num_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn vectorize(&self, text: &str) -> TfidfVector {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in char_ngrams(&normalize_name(text), self.n) {
            *tf.entry(t).or_insert(0) += 1;
        }
        let mut weights: BTreeMap<String, f64> = tf
            .into_iter()
            .map(|(t, c)| {
                let w = c as f64 * self.idf(&t);
                (t, w)
            })
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for w in weights.values_mut() {
                *w /= norm;
            }
        }
        TfidfVector(weights)
    }
}

fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize_name(a), normalize_name(b));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

/// Similarity of `a` and `b` in `[0, 1]`. For tf-idf, `corpus` fits the IDF.
pub fn similarity<S: AsRef<str>>(a: &str, b: &str, method: MatchMethod, corpus: &[S]) -> f64 {
    match method {
        MatchMethod::Exact => {
            if normalize_name(a) == normalize_name(b) {
                1.0
            } else {
                0.0
            }
        }
        MatchMethod::Levenshtein => levenshtein_similarity(a, b),
        MatchMethod::TfidfNgram { n } => {
            let model = TfidfModel::fit(corpus, n);
            model.vectorize(a).cosine(&model.vectorize(b))
        }
    }
}

/// Scores queries against a fixed candidate list, fitting tf-idf once.
pub struct Scorer<'a> {
    method: MatchMethod,
    candidates: Vec<&'a str>,
    prepared: Prepared,
}

enum Prepared {
    Plain,
    Tfidf {
        model: TfidfModel,
        vectors: Vec<TfidfVector>,
    },
}

impl<'a> Scorer<'a> {
    pub fn new(method: MatchMethod, candidates: Vec<&'a str>) -> Self {
        let prepared = match method {
            MatchMethod::TfidfNgram { n } => {
                let model = TfidfModel::fit(&candidates, n);
                let vectors = candidates.iter().map(|c| model.vectorize(c)).collect();
                Prepared::Tfidf { model, vectors }
            }
            _ => Prepared::Plain,
        };
        Self {
            method,
            candidates,
            prepared,
        }
    }

    pub fn candidates(&self) -> &[&'a str] {
        &self.candidates
    }

    /// One score per candidate, in candidate order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        match &self.prepared {
            Prepared::Plain => self
                .candidates
                .iter()
                .map(|c| similarity::<&str>(query, c, self.method, &[]))
                .collect(),
            Prepared::Tfidf { model, vectors } => {
                let q = model.vectorize(query);
                vectors.iter().map(|v| q.cosine(v)).collect()
            }
        }
    }

    /// Candidates ranked by descending score, ties by ascending name.
    pub fn rank(&self, query: &str) -> Vec<(&'a str, f64)> {
        let mut ranked: Vec<(&'a str, f64)> = self.candidates.iter().copied().zip(self.scores(query)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    }

    pub fn best(&self, query: &str) -> Option<(&'a str, f64)> {
        self.candidates
            .iter()
            .copied()
            .zip(self.scores(query))
            .reduce(|best, cur| {
                if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                    cur
                } else {
                    best
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_name("Histologic_Grade_FIGO"), "histologic grade figo");
        assert_eq!(normalize_name("Tumor_Size_cm"), "tumor size cm");
        assert_eq!(normalize_name(""), "");
        assert_eq!(normalize_name("  a--b__c  "), "a b c");
        assert_eq!(normalize_name("__"), "");
    }

    #[test]
    fn method_names_round_trip() {
        for m in ["exact", "levenshtein", "tfidf_ngram", "tfidf_ngram:2"] {
            assert_eq!(m.parse::<MatchMethod>().unwrap().to_string(), m);
        }
        assert_eq!("tfidf".parse::<MatchMethod>().unwrap(), MatchMethod::default());
        assert!("tfidf_ngram:0".parse::<MatchMethod>().is_err());
        assert!("cosine".parse::<MatchMethod>().is_err());
    }

    #[test]
    fn short_strings_are_single_terms() {
        assert_eq!(char_ngrams("ii", 3), ["ii"]);
        assert_eq!(char_ngrams("", 3), [""]);
        assert_eq!(char_ngrams("iiib", 3), ["iii", "iib"]);
    }

    #[test]
    fn exact_is_normalized_equality() {
        assert_eq!(similarity::<&str>("gender", "Gender", MatchMethod::Exact, &[]), 1.0);
        assert_eq!(similarity::<&str>("gender", "sex", MatchMethod::Exact, &[]), 0.0);
    }

    #[test]
    fn levenshtein_values() {
        assert_eq!(similarity::<&str>("", "", MatchMethod::Levenshtein, &[]), 1.0);
        // "kitten" -> "sitting": distance 3 over length 7
        let s = similarity::<&str>("kitten", "sitting", MatchMethod::Levenshtein, &[]);
        assert!((s - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn tfidf_identity() {
        let corpus = ["Stage IIIB", "IIIB", "Stage II"];
        let s = similarity("IIIB", "IIIB", MatchMethod::default(), &corpus);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tfidf_disjoint_terms_score_zero() {
        let corpus = ["G1", "Low Grade"];
        assert_eq!(similarity("FIGO grade 1", "G1", MatchMethod::default(), &corpus), 0.0);
    }

    #[test]
    fn scorer_agrees_with_similarity() {
        let corpus = ["tumor_grade", "tumor_focality", "figo_stage", "gender"];
        let scorer = Scorer::new(MatchMethod::default(), corpus.to_vec());
        for (c, s) in corpus.iter().zip(scorer.scores("Histologic_Grade_FIGO")) {
            assert_eq!(
                s,
                similarity("Histologic_Grade_FIGO", c, MatchMethod::default(), &corpus)
            );
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        let scorer = Scorer::new(MatchMethod::Exact, vec!["b", "a", "c"]);
        assert_eq!(scorer.best("zzz"), Some(("a", 0.0)));
        let ranked: Vec<_> = scorer.rank("c").into_iter().map(|r| r.0).collect();
        assert_eq!(ranked, ["c", "a", "b"]);
    }
}
