//! Word and character error rates.
//!
//! `WER = (S + D + I) / N × 100`, where the substitution, deletion and
//! insertion counts come from a minimum unit-cost edit alignment of the
//! hypothesis against the reference and `N` is the reference length. Words
//! are split on Unicode whitespace and compared verbatim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    /// Percentage; `0.0` when `ref_words == 0`.
    pub wer: f64,
}

impl WerBreakdown {
    pub fn from_counts(
        substitutions: usize,
        deletions: usize,
        insertions: usize,
        ref_words: usize,
    ) -> Self {
        let errors = substitutions + deletions + insertions;
        let wer = if ref_words == 0 {
            0.0
        } else {
            errors as f64 / ref_words as f64 * 100.0
        };
        WerBreakdown {
            substitutions,
            deletions,
            insertions,
            ref_words,
            wer,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn correct(&self) -> usize {
        self.ref_words - self.substitutions - self.deletions
    }
}

impl std::ops::Add for WerBreakdown {
    type Output = WerBreakdown;

    fn add(self, rhs: WerBreakdown) -> WerBreakdown {
        WerBreakdown::from_counts(
            self.substitutions + rhs.substitutions,
            self.deletions + rhs.deletions,
            self.insertions + rhs.insertions,
            self.ref_words + rhs.ref_words,
        )
    }
}

/// Aligns `hyp` against `reference` with unit costs.
///
/// Among minimum-cost alignments the backtrace prefers a diagonal step
/// (match or substitution), then a deletion, then an insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for (j, cell) in dp.iter_mut().take(width).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        dp[i * width] = i;
        for j in 1..=m {
            let sub = dp[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * width + j] + 1;
            let ins = dp[i * width + j - 1] + 1;
            dp[i * width + j] = sub.min(del).min(ins);
        }
    }

    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == dp[(i - 1) * width + j - 1] + mismatch {
                s += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[(i - 1) * width + j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    WerBreakdown::from_counts(s, d, ins, n)
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(align(&r, &words(hypothesis)))
}

/// Character error rate over Unicode codepoints, whitespace included.
pub fn cer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(align(&r, &h))
}

/// Micro-averaged WER: S, D, I and N are summed over all pairs before the
/// ratio is taken. Pairs with an empty reference are skipped with a warning.
pub fn corpus_wer<R, H>(pairs: impl IntoIterator<Item = (R, H)>) -> Result<WerBreakdown>
where
    R: AsRef<str>,
    H: AsRef<str>,
{
    let mut total = WerBreakdown::default();
    let mut used = 0usize;
    for (k, (r, h)) in pairs.into_iter().enumerate() {
        match wer(r.as_ref(), h.as_ref()) {
            Ok(b) => {
                total = total + b;
                used += 1;
            }
            Err(Error::EmptyReference) => log::warn!("pair {k}: empty reference skipped"),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::contract(
            "corpus has no pair with a nonempty reference",
        ));
    }
    Ok(total)
}
