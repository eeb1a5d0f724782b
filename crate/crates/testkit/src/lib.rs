//! Independent reference implementations and random instances for tests.
//!
//! The oracle recomputes tf-idf similarity the slow way: dense vectors over
//! the union vocabulary, document frequency by scanning every corpus string,
//! and explicit norms. It shares no code with the library.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod instance;

pub use instance::{check_instance, random_instance, random_spec, random_table, Instance, OracleCheck};

pub fn oracle_normalize(s: &str) -> String {
    let lowered: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Every n-gram occurrence, in order, duplicates kept.
pub fn oracle_grams(s: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = oracle_normalize(s).chars().collect();
    if chars.len() < n {
        return vec![chars.iter().collect()];
    }
    (0..=chars.len() - n)
        .map(|i| chars[i..i + n].iter().collect())
        .collect()
}

/// tf-idf cosine of `a` and `b` with document frequencies taken from `corpus`.
pub fn oracle_tfidf(a: &str, b: &str, corpus: &[String], n: usize) -> f64 {
    OracleCorpus::new(corpus, n).tfidf(a, b)
}

/// A corpus with document frequencies counted once, by scanning every
/// document for every term it contains.
pub struct OracleCorpus {
    df: std::collections::HashMap<String, usize>,
    size: usize,
    n: usize,
}

impl OracleCorpus {
    pub fn new(corpus: &[String], n: usize) -> Self {
        let docs: Vec<Vec<String>> = corpus.iter().map(|c| oracle_grams(c, n)).collect();
        let mut df = std::collections::HashMap::new();
        for d in &docs {
            for t in d {
                df.entry(t.clone())
                    .or_insert_with(|| docs.iter().filter(|other| other.contains(t)).count());
            }
        }
        Self {
            df,
            size: corpus.len(),
            n,
        }
    }

    pub fn tfidf(&self, a: &str, b: &str) -> f64 {
        let ga = oracle_grams(a, self.n);
        let gb = oracle_grams(b, self.n);
        let mut vocab: Vec<String> = ga.iter().chain(gb.iter()).cloned().collect();
        vocab.sort();
        vocab.dedup();
        let idf: Vec<f64> = vocab
            .iter()
            .map(|t| {
                let df = self.df.get(t).copied().unwrap_or(0);
                ((1.0 + self.size as f64) / (1.0 + df as f64)).ln() + 1.0
            })
            .collect();
        let weights = |grams: &[String]| -> Vec<f64> {
            vocab
                .iter()
                .zip(&idf)
                .map(|(t, w)| grams.iter().filter(|g| *g == t).count() as f64 * w)
                .collect()
        };
        let va = weights(&ga);
        let vb = weights(&gb);
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        (dot / (na * nb)).clamp(0.0, 1.0)
    }

    /// `candidates` (the corpus documents) scored against `query`, best
    /// first, ties by name.
    pub fn rank(&self, query: &str, candidates: &[String]) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = candidates.iter().map(|c| (c.clone(), self.tfidf(query, c))).collect();
        out.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
        out
    }
}

/// All candidates scored against `query`, best first, ties by name.
pub fn oracle_rank(query: &str, candidates: &[String], n: usize) -> Vec<(String, f64)> {
    OracleCorpus::new(candidates, n).rank(query, candidates)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const SYLLABLES: &[&str] = &[
    "tum", "or", "grade", "fig", "o", "stage", "age", "his", "to", "log", "ic", "type", "size", "cm", "race", "bmi",
    "prim", "ary", "diag", "nosis", "foc", "ality", "eth", "nic", "ity", "gen", "der", "i", "ii", "iii", "a", "b",
];

const SEPARATORS: &[&str] = &["_", " ", "-", "", "__", "."];

/// A name built from clinical-looking fragments, so random names overlap.
pub fn random_name(rng: &mut impl Rng) -> String {
    let parts = rng.random_range(1..=4);
    let mut s = String::new();
    for i in 0..parts {
        if i > 0 {
            s.push_str(SEPARATORS.choose(rng).unwrap());
        }
        let syl = SYLLABLES.choose(rng).unwrap();
        if rng.random_bool(0.3) {
            s.push_str(&syl.to_uppercase());
        } else {
            s.push_str(syl);
        }
    }
    s
}

/// `count` distinct names whose normalized forms are also distinct.
pub fn random_names(rng: &mut impl Rng, count: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while out.len() < count && attempts < count * 200 {
        attempts += 1;
        let name = random_name(rng);
        if seen.insert(oracle_normalize(&name)) {
            out.push(name);
        }
    }
    out
}
