//! Synthetic district-conditioned phonological corpora.
//!
//! Each district owns a table of rewrite rules from grapheme strings to IPA;
//! graphemes in the shared alphabet map to themselves in every district.
//! Words are random grapheme sequences and targets are the rule application
//! under the row's district. Because some graphemes rewrite differently per
//! district, a predictor that never sees the district is capped below 100%
//! word accuracy; [`ambiguity_floor`] computes that cap exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub source: String,
    pub target: String,
}

impl Rule {
    pub fn new(source: &str, target: &str) -> Self {
        Rule {
            source: source.to_string(),
            target: target.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    /// Graphemes that are copied through unchanged in every district.
    pub shared: Vec<String>,
    pub districts: BTreeMap<String, Vec<Rule>>,
}

impl RuleSet {
    pub fn new<I, S>(shared: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RuleSet {
            shared: shared.into_iter().map(Into::into).collect(),
            districts: BTreeMap::new(),
        }
    }

    pub fn with_district(mut self, district: &str, rules: &[(&str, &str)]) -> Self {
        self.districts.insert(
            district.to_string(),
            rules.iter().map(|(s, t)| Rule::new(s, t)).collect(),
        );
        self
    }

    /// Two districts over a ten-grapheme alphabet: `k`, `s` and `p` are
    /// pronounced differently in each, the other seven are shared.
    pub fn demo() -> Self {
        RuleSet::new(["g", "t", "d", "b", "a", "i", "u"])
            .with_district("d1", &[("k", "kʰ"), ("s", "ʃ"), ("p", "pʰ")])
            .with_district("d2", &[("k", "x"), ("s", "s"), ("p", "f")])
    }

    /// Every grapheme that can start a word, sorted.
    pub fn alphabet(&self) -> Vec<String> {
        let mut set: BTreeSet<&str> = self.shared.iter().map(String::as_str).collect();
        for rules in self.districts.values() {
            set.extend(rules.iter().map(|r| r.source.as_str()));
        }
        set.into_iter().map(str::to_string).collect()
    }

    /// What `grapheme` becomes in `district` when applied on its own.
    fn rewrite_of(&self, district: &str, grapheme: &str) -> Option<String> {
        self.apply(grapheme, district).ok()
    }

    /// Graphemes whose rewrite differs between at least two districts.
    pub fn ambiguous_graphemes(&self) -> Vec<String> {
        self.alphabet()
            .into_iter()
            .filter(|g| {
                let outs: BTreeSet<Option<String>> = self
                    .districts
                    .keys()
                    .map(|d| self.rewrite_of(d, g))
                    .collect();
                outs.len() > 1
            })
            .collect()
    }

    /// Leftmost-longest, single-pass rewriting of `word` under `district`.
    /// District rules and shared graphemes compete on match length; on equal
    /// length the district rule wins. Characters matched by nothing are an
    /// error.
    pub fn apply(&self, word: &str, district: &str) -> Result<String> {
        let rules = self
            .districts
            .get(district)
            .ok_or_else(|| Error::contract(format!("district {district:?} has no rules")))?;
        let mut out = String::new();
        let mut rest = word;
        while !rest.is_empty() {
            let mut best: Option<(usize, &str)> = None;
            for r in rules {
                if !r.source.is_empty()
                    && rest.starts_with(&r.source)
                    && best.is_none_or(|(n, _)| r.source.len() > n)
                {
                    best = Some((r.source.len(), &r.target));
                }
            }
            for s in &self.shared {
                if !s.is_empty()
                    && rest.starts_with(s.as_str())
                    && best.is_none_or(|(n, _)| s.len() > n)
                {
                    best = Some((s.len(), s));
                }
            }
            let (n, target) = best.ok_or_else(|| {
                Error::contract(format!(
                    "no rule matches {:?} in {word:?}",
                    rest.chars().next().unwrap()
                ))
            })?;
            out.push_str(target);
            rest = &rest[n..];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub districts: Vec<String>,
    pub n_per_district: usize,
    /// Word length range in graphemes, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Redraw words that contain no ambiguous grapheme.
    pub require_ambiguous: bool,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new<S: Into<String>>(
        districts: impl IntoIterator<Item = S>,
        n_per_district: usize,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            districts: districts.into_iter().map(Into::into).collect(),
            n_per_district,
            min_len: 2,
            max_len: 8,
            require_ambiguous: false,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub examples: Vec<Example>,
    /// Best word accuracy, in `[0, 1]`, of any predictor that sees the word
    /// but not the district.
    pub ambiguity_floor: f64,
}

impl SyntheticCorpus {
    /// The floor expressed as the lowest WER (percent) a district-blind
    /// model can reach on single-word rows.
    pub fn floor_wer(&self) -> f64 {
        (1.0 - self.ambiguity_floor) * 100.0
    }
}

/// Mean over `words` of the best accuracy a district-blind predictor can
/// get when the district is drawn uniformly from `districts`: for each word,
/// the share of districts agreeing on its most common target.
pub fn ambiguity_floor<S: AsRef<str>>(
    rules: &RuleSet,
    districts: &[String],
    words: &[S],
) -> Result<f64> {
    if districts.is_empty() || words.is_empty() {
        return Err(Error::contract("ambiguity floor needs districts and words"));
    }
    let mut cache: HashMap<&str, f64> = HashMap::new();
    let mut total = 0.0;
    for w in words {
        let w = w.as_ref();
        let acc = match cache.get(w) {
            Some(&a) => a,
            None => {
                let mut counts: HashMap<String, usize> = HashMap::new();
                for d in districts {
                    *counts.entry(rules.apply(w, d)?).or_default() += 1;
                }
                let a = *counts.values().max().unwrap() as f64 / districts.len() as f64;
                cache.insert(w, a);
                a
            }
        };
        total += acc;
    }
    Ok(total / words.len() as f64)
}

/// Generates `n_per_district` single-word rows per district, shuffled, with
/// indices `0..N`. The same rules and config always give the same corpus.
pub fn generate_synthetic_corpus(
    rules: &RuleSet,
    config: &SyntheticConfig,
) -> Result<SyntheticCorpus> {
    if config.districts.is_empty() || config.n_per_district == 0 {
        return Err(Error::contract(
            "need at least one district and one row per district",
        ));
    }
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::contract(
            "word length range must satisfy 1 <= min <= max",
        ));
    }
    for d in &config.districts {
        if !rules.districts.contains_key(d) {
            return Err(Error::contract(format!("district {d:?} has no rules")));
        }
    }
    let restricted = RuleSet {
        shared: rules.shared.clone(),
        districts: config
            .districts
            .iter()
            .map(|d| (d.clone(), rules.districts[d].clone()))
            .collect(),
    };
    let ambiguous = restricted.ambiguous_graphemes();
    if ambiguous.is_empty() {
        return Err(Error::contract(
            "no grapheme is pronounced differently across the chosen districts",
        ));
    }
    let alphabet = restricted.alphabet();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows: Vec<(String, String)> =
        Vec::with_capacity(config.districts.len() * config.n_per_district);
    for d in &config.districts {
        for _ in 0..config.n_per_district {
            let word = loop {
                let len = rng.random_range(config.min_len..=config.max_len);
                let parts: Vec<&str> = (0..len)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())].as_str())
                    .collect();
                if !config.require_ambiguous
                    || parts.iter().any(|p| ambiguous.iter().any(|a| a == p))
                {
                    break parts.concat();
                }
            };
            rows.push((d.clone(), word));
        }
    }
    rows.shuffle(&mut rng);

    let words: Vec<&str> = rows.iter().map(|(_, w)| w.as_str()).collect();
    let floor = ambiguity_floor(&restricted, &config.districts, &words)?;
    let examples = rows
        .iter()
        .enumerate()
        .map(|(i, (d, w))| {
            Ok(Example {
                index: i as i64,
                district: d.clone(),
                contents: w.clone(),
                ipa: Some(restricted.apply(w, d)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        examples,
        ambiguity_floor: floor,
    })
}
