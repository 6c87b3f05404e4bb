//! Byte-level tokenizer with district guided tokens.
//!
//! Id layout: `0` pad, `1` end of sequence, `2` unknown (reserved), byte `b`
//! maps to `b + 3`, and district tokens are appended from `259` upward in
//! registration order. A district token is a single id placed in front of the
//! source bytes; target sequences never carry one.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const BYTE_OFFSET: usize = 3;
/// Number of ids before the first district token: three specials plus 256 bytes.
pub const BASE_VOCAB_SIZE: usize = BYTE_OFFSET + 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistrictToken {
    pub label: String,
    pub id: usize,
}

impl DistrictToken {
    pub fn surface(&self) -> String {
        format!("<{}>", self.label)
    }
}

/// Checks that `label` can be used as a district token.
pub fn validate_label(label: &str) -> Result<()> {
    let reason = if label.is_empty() {
        "label is empty"
    } else if label.contains(['<', '>']) {
        "label contains an angle bracket"
    } else if label.chars().any(char::is_whitespace) {
        "label contains whitespace"
    } else {
        return Ok(());
    };
    Err(Error::InvalidLabel {
        label: label.to_string(),
        reason,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    districts: Vec<String>,
    lookup: HashMap<String, usize>,
}

/// Output of [`Vocabulary::decode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Set when the byte ids did not form valid UTF-8 and replacement
    /// characters were substituted.
    pub lossy: bool,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary with `labels` registered in order. An empty list gives the
    /// plain byte vocabulary.
    pub fn with_districts<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let labels: Vec<S> = labels.into_iter().collect();
        let mut vocab = Self::new();
        if !labels.is_empty() {
            vocab.register_districts(labels)?;
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        BASE_VOCAB_SIZE + self.districts.len()
    }

    /// District labels in id order.
    pub fn districts(&self) -> &[String] {
        &self.districts
    }

    pub fn district_id(&self, label: &str) -> Option<usize> {
        self.lookup.get(label).copied()
    }

    pub fn district_token(&self, label: &str) -> Option<DistrictToken> {
        self.district_id(label).map(|id| DistrictToken {
            label: label.to_string(),
            id,
        })
    }

    pub fn is_district_id(&self, id: usize) -> bool {
        (BASE_VOCAB_SIZE..self.size()).contains(&id)
    }

    /// Adds unseen labels with the next free ids; known labels keep theirs.
    /// All labels are validated before any is added. Returns the new size.
    pub fn register_districts<I, S>(&mut self, labels: I) -> Result<usize>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let labels: Vec<S> = labels.into_iter().collect();
        if labels.is_empty() {
            return Err(Error::contract("no district labels to register"));
        }
        for label in &labels {
            validate_label(label.as_ref())?;
        }
        for label in labels {
            let label = label.as_ref();
            if !self.lookup.contains_key(label) {
                let id = self.size();
                self.lookup.insert(label.to_string(), id);
                self.districts.push(label.to_string());
            }
        }
        Ok(self.size())
    }

    /// `[district?] ++ bytes(text) + 3 ++ [eos]`.
    pub fn encode(&self, text: &str, district: Option<&str>) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        if let Some(label) = district {
            let id = self
                .district_id(label)
                .ok_or_else(|| Error::UnknownDistrict(label.to_string()))?;
            ids.push(id);
        }
        ids.extend(text.bytes().map(|b| b as usize + BYTE_OFFSET));
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Maps byte ids back to text, dropping specials and district tokens.
    pub fn decode(&self, ids: &[usize]) -> Result<Decoded> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size() {
                return Err(Error::UnknownId {
                    id,
                    vocab_size: self.size(),
                });
            }
            if (BYTE_OFFSET..BASE_VOCAB_SIZE).contains(&id) {
                bytes.push((id - BYTE_OFFSET) as u8);
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(text) => Decoded { text, lossy: false },
            Err(e) => Decoded {
                text: String::from_utf8_lossy(e.as_bytes()).into_owned(),
                lossy: true,
            },
        })
    }

    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        self.decode(ids).map(|d| d.text)
    }
}
