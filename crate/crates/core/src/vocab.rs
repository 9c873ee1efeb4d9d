//! Fixed 64-token vocabulary shared by the policy and the reward model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaluError};

pub type TokenId = usize;

pub const VOCAB_SIZE: usize = 64;
pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NA: TokenId = 4;

pub const NUM_KEYS: usize = 16;
pub const NUM_VALUES: usize = 16;
pub const NUM_FILLERS: usize = 20;

const KEY_BASE: TokenId = 5;
const VALUE_BASE: TokenId = KEY_BASE + NUM_KEYS;
pub const WHAT: TokenId = VALUE_BASE + NUM_VALUES;
pub const IS: TokenId = WHAT + 1;
pub const QMARK: TokenId = WHAT + 2;
pub const DOT: TokenId = WHAT + 3;
const FILLER_BASE: TokenId = DOT + 1;
const UNUSED_BASE: TokenId = FILLER_BASE + NUM_FILLERS;

/// The abstention response `[NA, EOS]`.
pub const ABSTENTION: [TokenId; 2] = [NA, EOS];

pub fn key(i: usize) -> TokenId {
    assert!(i < NUM_KEYS);
    KEY_BASE + i
}

pub fn value(i: usize) -> TokenId {
    assert!(i < NUM_VALUES);
    VALUE_BASE + i
}

pub fn filler(i: usize) -> TokenId {
    assert!(i < NUM_FILLERS);
    FILLER_BASE + i
}

pub fn is_key(t: TokenId) -> bool {
    (KEY_BASE..VALUE_BASE).contains(&t)
}

pub fn is_value(t: TokenId) -> bool {
    (VALUE_BASE..WHAT).contains(&t)
}

pub fn is_filler(t: TokenId) -> bool {
    (FILLER_BASE..UNUSED_BASE).contains(&t)
}

/// Surface string of a token id.
pub fn token_str(t: TokenId) -> String {
    match t {
        PAD => "[PAD]".into(),
        CLS => "[CLS]".into(),
        SEP => "[SEP]".into(),
        EOS => "[EOS]".into(),
        NA => "[NA]".into(),
        WHAT => "what".into(),
        IS => "is".into(),
        QMARK => "?".into(),
        DOT => ".".into(),
        t if is_key(t) => format!("K{:02}", t - KEY_BASE),
        t if is_value(t) => format!("V{:02}", t - VALUE_BASE),
        t if is_filler(t) => format!("F{:02}", t - FILLER_BASE),
        t if t < VOCAB_SIZE => format!("[UNUSED{}]", t - UNUSED_BASE),
        t => panic!("token id {t} outside vocabulary"),
    }
}

/// Inverse of [`token_str`].
pub fn parse_token(s: &str) -> Result<TokenId> {
    let fixed = match s {
        "[PAD]" => Some(PAD),
        "[CLS]" => Some(CLS),
        "[SEP]" => Some(SEP),
        "[EOS]" => Some(EOS),
        "[NA]" => Some(NA),
        "what" => Some(WHAT),
        "is" => Some(IS),
        "?" => Some(QMARK),
        "." => Some(DOT),
        _ => None,
    };
    if let Some(t) = fixed {
        return Ok(t);
    }
    let unknown = || SaluError::UnknownToken(s.to_string());
    let indexed = |prefix: &str, base: TokenId, count: usize| -> Option<TokenId> {
        let rest = s.strip_prefix(prefix)?;
        if rest.len() != 2 {
            return None;
        }
        let i: usize = rest.parse().ok()?;
        (i < count).then_some(base + i)
    };
    if let Some(t) = indexed("K", KEY_BASE, NUM_KEYS)
        .or_else(|| indexed("V", VALUE_BASE, NUM_VALUES))
        .or_else(|| indexed("F", FILLER_BASE, NUM_FILLERS))
    {
        return Ok(t);
    }
    let i: usize = s
        .strip_prefix("[UNUSED")
        .and_then(|r| r.strip_suffix(']'))
        .and_then(|r| r.parse().ok())
        .ok_or_else(unknown)?;
    if UNUSED_BASE + i < VOCAB_SIZE {
        Ok(UNUSED_BASE + i)
    } else {
        Err(unknown())
    }
}

pub fn check_ids(ids: &[TokenId]) -> Result<()> {
    match ids.iter().find(|&&t| t >= VOCAB_SIZE) {
        Some(&t) => Err(SaluError::InvalidToken(t)),
        None => Ok(()),
    }
}

pub fn render(ids: &[TokenId]) -> String {
    ids.iter().map(|&t| token_str(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceRole {
    Prompt,
    Response,
    Answer,
    Abstention,
}

/// A token sequence tagged with the role it plays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub role: SequenceRole,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, role: SequenceRole) -> Result<Self> {
        check_ids(&ids)?;
        if ids.is_empty() {
            return Err(SaluError::InvalidSequence("empty sequence".into()));
        }
        if role != SequenceRole::Prompt && ids.last() != Some(&EOS) {
            return Err(SaluError::InvalidSequence(format!(
                "{role:?} must end with [EOS]: {}",
                render(&ids)
            )));
        }
        Ok(Self { ids, role })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_abstention(&self) -> bool {
        self.ids == ABSTENTION
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_a_bijection_of_size_64() {
        let mut seen = std::collections::BTreeSet::new();
        for t in 0..VOCAB_SIZE {
            let s = token_str(t);
            assert!(seen.insert(s.clone()), "duplicate surface {s}");
            assert_eq!(parse_token(&s).unwrap(), t);
        }
        assert_eq!(seen.len(), 64);
        assert_eq!((PAD, CLS, SEP, EOS, NA), (0, 1, 2, 3, 4));
        assert_eq!(UNUSED_BASE + 3, VOCAB_SIZE);
    }

    #[test]
    fn rejects_unknown_surfaces() {
        for bad in ["K16", "V1", "F20", "[UNUSED3]", "hello", ""] {
            assert!(parse_token(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn responses_must_end_with_eos() {
        assert!(TokenSequence::new(vec![value(3)], SequenceRole::Response).is_err());
        assert!(TokenSequence::new(vec![], SequenceRole::Prompt).is_err());
        assert!(TokenSequence::new(vec![64], SequenceRole::Prompt).is_err());
        let r = TokenSequence::new(ABSTENTION.to_vec(), SequenceRole::Abstention).unwrap();
        assert!(r.is_abstention());
    }
}
