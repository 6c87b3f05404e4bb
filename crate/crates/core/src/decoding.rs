//! Autoregressive decoding: greedy (the default) and beam search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TranscriptionModel, DECODER_START_ID};
use crate::tensor::Scalar;
use crate::tokenizer::{Vocabulary, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Most tokens emitted per sequence, not counting the final EOS.
    pub max_gen_len: usize,
    pub strategy: Strategy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_gen_len: 1024,
            strategy: Strategy::Greedy,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_gen_len: usize) -> Self {
        DecodeConfig {
            max_gen_len,
            strategy: Strategy::Greedy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_gen_len == 0 {
            return Err(Error::contract("max_gen_len must be at least 1"));
        }
        if let Strategy::Beam { width } = self.strategy {
            if width < 2 {
                return Err(Error::contract("beam width must be at least 2"));
            }
        }
        Ok(())
    }
}

/// Anything that can score the next token given a source and the decoder
/// prefix (which starts with the decoder start token).
pub trait StepModel: Sync {
    type Source: Send;

    fn prepare(&self, source_ids: &[usize]) -> Result<Self::Source>;

    fn next_logits(&self, source: &Self::Source, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Longest decoder prefix the model accepts.
    fn max_prefix_len(&self) -> usize {
        usize::MAX
    }
}

impl<T: Scalar> StepModel for TranscriptionModel<T> {
    type Source = crate::model::EncodedSource<T>;

    fn prepare(&self, source_ids: &[usize]) -> Result<Self::Source> {
        self.encode(source_ids)
    }

    fn next_logits(&self, source: &Self::Source, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .next_token_logits(source, prefix)?
            .into_iter()
            .map(|x| x.to_f64())
            .collect())
    }

    fn max_prefix_len(&self) -> usize {
        self.config().max_positions
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|x| x - lse).collect()
}

fn emit_cap<M: StepModel>(model: &M, config: &DecodeConfig) -> usize {
    config.max_gen_len.min(model.max_prefix_len())
}

/// Emitted token ids for one encoded source, without the terminating EOS.
pub fn decode_ids<M: StepModel>(
    model: &M,
    source_ids: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<usize>> {
    config.validate()?;
    let source = model.prepare(source_ids)?;
    let cap = emit_cap(model, config);
    match config.strategy {
        Strategy::Greedy => {
            let mut prefix = vec![DECODER_START_ID];
            while prefix.len() <= cap {
                let next = argmax(&model.next_logits(&source, &prefix)?);
                if next == EOS_ID {
                    break;
                }
                prefix.push(next);
            }
            prefix.remove(0);
            Ok(prefix)
        }
        Strategy::Beam { width } => beam(model, &source, width, cap),
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    done: bool,
}

/// Keeps the `width` best hypotheses by summed log-probability; ties go to
/// the lexicographically smaller token sequence.
fn beam<M: StepModel>(
    model: &M,
    source: &M::Source,
    width: usize,
    cap: usize,
) -> Result<Vec<usize>> {
    let mut beams = vec![Hypothesis {
        tokens: vec![DECODER_START_ID],
        score: 0.0,
        done: false,
    }];
    let rank = |a: &Hypothesis, b: &Hypothesis| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.tokens.cmp(&b.tokens))
    };
    for _ in 0..=cap {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let mut candidates = Vec::with_capacity(beams.len() * width);
        for h in &beams {
            if h.done {
                candidates.push(h.clone());
                continue;
            }
            let logp = log_softmax(&model.next_logits(source, &h.tokens)?);
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            let at_cap = h.tokens.len() > cap;
            for &tok in order.iter().take(width) {
                let mut tokens = h.tokens.clone();
                let done = tok == EOS_ID || at_cap;
                if tok != EOS_ID && !at_cap {
                    tokens.push(tok);
                }
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + logp[tok],
                    done,
                });
                if at_cap {
                    break;
                }
            }
        }
        candidates.sort_by(rank);
        candidates.dedup_by(|a, b| a.tokens == b.tokens && a.done == b.done);
        candidates.truncate(width);
        beams = candidates;
    }
    beams.sort_by(rank);
    let mut best = beams.swap_remove(0).tokens;
    best.remove(0);
    best.truncate(cap);
    Ok(best)
}

/// Transcribes one row with greedy search, whatever `config.strategy` says.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    vocab: &Vocabulary,
    text: &str,
    district: Option<&str>,
    config: &DecodeConfig,
) -> Result<String> {
    let config = DecodeConfig::greedy(config.max_gen_len);
    transcribe(model, vocab, text, district, &config)
}

/// Transcribes one row with the configured strategy. Empty input text gives
/// an empty transcription.
pub fn transcribe<M: StepModel>(
    model: &M,
    vocab: &Vocabulary,
    text: &str,
    district: Option<&str>,
    config: &DecodeConfig,
) -> Result<String> {
    let source = vocab.encode(text, district)?;
    if text.is_empty() {
        return Ok(String::new());
    }
    let ids = decode_ids(model, &source, config)?;
    vocab.decode_text(&ids)
}

/// Decodes rows in parallel. Results keep the input order and a failing row
/// does not stop the others.
pub fn batch_decode<M, S>(
    model: &M,
    vocab: &Vocabulary,
    rows: &[(S, Option<S>)],
    config: &DecodeConfig,
) -> Vec<Result<String>>
where
    M: StepModel,
    S: AsRef<str> + Sync,
{
    rows.par_iter()
        .map(|(text, district)| {
            transcribe(
                model,
                vocab,
                text.as_ref(),
                district.as_ref().map(AsRef::as_ref),
                config,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BYTE_OFFSET;

    /// Scores a fixed script: at prefix length `n` prefers `script[n - 1]`.
    struct Scripted {
        script: Vec<usize>,
        vocab: usize,
    }

    impl StepModel for Scripted {
        type Source = ();

        fn prepare(&self, _: &[usize]) -> Result<()> {
            Ok(())
        }

        fn next_logits(&self, _: &(), prefix: &[usize]) -> Result<Vec<f64>> {
            let mut l = vec![0.0; self.vocab];
            let tok = self.script.get(prefix.len() - 1).copied().unwrap_or(EOS_ID);
            l[tok] = 30.0;
            Ok(l)
        }
    }

    fn byte(c: u8) -> usize {
        c as usize + BYTE_OFFSET
    }

    #[test]
    fn eos_first_gives_empty_string() {
        let m = Scripted {
            script: vec![EOS_ID],
            vocab: 259,
        };
        let v = Vocabulary::new();
        assert_eq!(
            greedy_decode(&m, &v, "abc", None, &DecodeConfig::default()).unwrap(),
            ""
        );
    }

    #[test]
    fn cap_limits_emitted_tokens() {
        let m = Scripted {
            script: vec![byte(b'x'); 100],
            vocab: 259,
        };
        let ids = decode_ids(&m, &[5], &DecodeConfig::greedy(3)).unwrap();
        assert_eq!(ids.len(), 3);
        let v = Vocabulary::new();
        assert_eq!(
            greedy_decode(&m, &v, "a", None, &DecodeConfig::greedy(3)).unwrap(),
            "xxx"
        );
        let beam = DecodeConfig {
            max_gen_len: 3,
            strategy: Strategy::Beam { width: 3 },
        };
        assert_eq!(decode_ids(&m, &[5], &beam).unwrap().len(), 3);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
    }

    #[test]
    fn empty_text() {
        let m = Scripted {
            script: vec![byte(b'x')],
            vocab: 259,
        };
        let v = Vocabulary::with_districts(["d1"]).unwrap();
        assert_eq!(
            greedy_decode(&m, &v, "", Some("d1"), &DecodeConfig::default()).unwrap(),
            ""
        );
    }

    #[test]
    fn specials_never_surface() {
        let v = Vocabulary::with_districts(["d1"]).unwrap();
        let m = Scripted {
            script: vec![259, byte(b'a'), 2, 0, byte(b'b')],
            vocab: 260,
        };
        assert_eq!(
            greedy_decode(&m, &v, "q", Some("d1"), &DecodeConfig::default()).unwrap(),
            "ab"
        );
    }

    #[test]
    fn batch_preserves_order_and_reports_rows() {
        let m = Scripted {
            script: vec![byte(b'z')],
            vocab: 260,
        };
        let v = Vocabulary::with_districts(["d1"]).unwrap();
        let rows = vec![("a", Some("d1")), ("b", Some("nope")), ("c", None)];
        let out = batch_decode(&m, &v, &rows, &DecodeConfig::default());
        assert_eq!(out[0].as_deref().unwrap(), "z");
        assert!(matches!(out[1], Err(Error::UnknownDistrict(_))));
        assert_eq!(out[2].as_deref().unwrap(), "z");
    }

    /// A model where the greedy first step leads into a low-probability path.
    struct Trap;

    impl StepModel for Trap {
        type Source = ();

        fn prepare(&self, _: &[usize]) -> Result<()> {
            Ok(())
        }

        fn next_logits(&self, _: &(), prefix: &[usize]) -> Result<Vec<f64>> {
            let (a, b) = (byte(b'a'), byte(b'b'));
            let mut l = vec![-20.0; 259];
            match prefix {
                [_] => {
                    l[a] = 0.0;
                    l[b] = -0.1;
                }
                [_, x] if *x == a => {
                    l[EOS_ID] = 0.0;
                    l[3..259].fill(0.0);
                }
                _ => l[EOS_ID] = 0.0,
            }
            Ok(l)
        }
    }

    #[test]
    fn beam_escapes_greedy_trap() {
        assert_eq!(
            decode_ids(&Trap, &[], &DecodeConfig::greedy(8)).unwrap(),
            vec![byte(b'a')]
        );
        let beam = DecodeConfig {
            max_gen_len: 8,
            strategy: Strategy::Beam { width: 2 },
        };
        assert_eq!(decode_ids(&Trap, &[], &beam).unwrap(), vec![byte(b'b')]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DecodeConfig::greedy(0).validate().is_err());
        let c = DecodeConfig {
            max_gen_len: 4,
            strategy: Strategy::Beam { width: 1 },
        };
        assert!(c.validate().is_err());
    }
}
