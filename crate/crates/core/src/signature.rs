//! Parameter-sharing signatures and their expansion into leaf-block plans.
//!
//! A signature such as `A^3B` (or equivalently `AAAB`) lists the order in
//! which unique weight blocks are applied depthwise. The degree nests the
//! pattern: at degree `d` every symbol is itself a degree `d - 1` copy of
//! the signature built from fresh blocks, and repeated outer symbols reuse
//! the same inner block set. `(ABB)` at degree 2 therefore executes
//! `A B B C D D C D D` over four unique leaf blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of leaf calls a plan may contain.
pub const MAX_PLAN_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("empty signature")]
    Empty,
    #[error("unexpected character {found:?} at position {position}")]
    UnexpectedChar { position: usize, found: char },
    #[error("missing exponent after '^' at position {position}")]
    MissingExponent { position: usize },
    #[error("exponent must be >= 1 at position {position}")]
    ZeroExponent { position: usize },
    #[error("exponent too large at position {position}")]
    ExponentOverflow { position: usize },
    #[error("degree must be >= 1, got {0}")]
    InvalidDegree(u32),
    #[error("expanded plan would have {len} leaf calls (max {MAX_PLAN_LEN})")]
    PlanTooLarge { len: u128 },
    #[error("malformed tagged signature {0:?}, expected e.g. \"A^3B@d1\"")]
    BadTag(String),
    #[error("skip mask has {got} entries but the plan has {expected} positions")]
    SkipMaskLength { expected: usize, got: usize },
}

/// A canonical parameter-sharing pattern.
///
/// Symbols are stored as block indices in first-occurrence order, so the
/// first new label is always `A` (0), the second new label `B` (1), and so on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    symbols: Vec<u8>,
    degree: u32,
}

impl Signature {
    /// Parses `text` in exponent (`A^3B`) or flat (`AAAB`) form and
    /// canonicalizes the labels.
    pub fn parse(text: &str, degree: u32) -> Result<Self, SignatureError> {
        if degree < 1 {
            return Err(SignatureError::InvalidDegree(degree));
        }
        let raw = parse_symbols(text)?;
        let symbols = relabel_first_occurrence(&raw);
        let unique = count_unique(&symbols);
        let len = (symbols.len() as u128).checked_pow(degree);
        let ulen = (unique as u128).checked_pow(degree);
        match (len, ulen) {
            (Some(l), Some(_)) if l <= MAX_PLAN_LEN as u128 => {}
            (l, _) => {
                return Err(SignatureError::PlanTooLarge {
                    len: l.unwrap_or(u128::MAX),
                })
            }
        }
        Ok(Signature { symbols, degree })
    }

    /// Parses the `signature@dN` form used in configs and on the command
    /// line. A missing `@dN` suffix means degree 1.
    pub fn parse_tagged(text: &str) -> Result<Self, SignatureError> {
        match text.split_once('@') {
            None => Self::parse(text, 1),
            Some((sig, tag)) => {
                let degree = tag
                    .strip_prefix('d')
                    .and_then(|d| d.parse::<u32>().ok())
                    .ok_or_else(|| SignatureError::BadTag(text.to_string()))?;
                Self::parse(sig, degree)
            }
        }
    }

    /// The RINS signature `A^r B`.
    pub fn rins(rounds: usize) -> Self {
        let mut symbols = vec![0u8; rounds.max(1)];
        symbols.push(1);
        Signature { symbols, degree: 1 }
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of distinct labels at the top level.
    pub fn distinct_symbols(&self) -> usize {
        count_unique(&self.symbols)
    }

    /// Number of unique leaf blocks after expansion: `distinct^degree`.
    pub fn unique_leaf_count(&self) -> usize {
        self.distinct_symbols().pow(self.degree)
    }

    /// Canonical flat rendering, e.g. `AAAB`.
    pub fn render(&self) -> String {
        self.symbols.iter().map(|&s| (b'A' + s) as char).collect()
    }

    /// Rendering with the degree tag, e.g. `AAAB@d1`.
    pub fn tagged(&self) -> String {
        format!("{}@d{}", self.render(), self.degree)
    }

    /// True iff this is `A^r B` at degree 1 with `r >= 2`.
    pub fn is_rins(&self) -> bool {
        self.rins_rounds().is_some_and(|r| r >= 2)
    }

    /// `Some(r)` if the signature is `A^r B` at degree 1 (including the
    /// `r = 1` baseline `AB`).
    pub fn rins_rounds(&self) -> Option<usize> {
        if self.degree != 1 || self.symbols.len() < 2 {
            return None;
        }
        let (last, head) = self.symbols.split_last()?;
        (*last == 1 && head.iter().all(|&s| s == 0)).then_some(head.len())
    }

    /// `total_layers / unique_leaf_count`. Zero means the signature cannot be
    /// realised at this depth budget.
    pub fn layers_per_block(&self, total_layers: usize) -> usize {
        total_layers / self.unique_leaf_count()
    }

    pub fn expand(&self) -> ExecutionPlan {
        let distinct = self.distinct_symbols();
        let leaf_sequence = expand_leaves(&self.symbols, distinct, self.degree);
        let skip_eligible = match self.rins_rounds() {
            Some(r) => (0..=r).map(|i| i > 0 && i < r).collect(),
            None => vec![false; leaf_sequence.len()],
        };
        ExecutionPlan {
            leaf_sequence,
            unique_leaf_count: self.unique_leaf_count(),
            skip_eligible,
            source: self.clone(),
        }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tagged())
    }
}

impl FromStr for Signature {
    type Err = SignatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_tagged(s)
    }
}

impl Serialize for Signature {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.tagged())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Signature::parse_tagged(&s).map_err(serde::de::Error::custom)
    }
}

/// Relabels an arbitrary signature string by first occurrence, e.g.
/// `BBA` becomes `AAB`. Exponents are expanded.
pub fn canonicalize(text: &str) -> Result<String, SignatureError> {
    let raw = parse_symbols(text)?;
    Ok(relabel_first_occurrence(&raw)
        .iter()
        .map(|&s| (b'A' + s) as char)
        .collect())
}

fn parse_symbols(text: &str) -> Result<Vec<u8>, SignatureError> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(SignatureError::Empty);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if !c.is_ascii_uppercase() {
            return Err(SignatureError::UnexpectedChar {
                position: i,
                found: c,
            });
        }
        let label = c as u8 - b'A';
        i += 1;
        let mut count = 1usize;
        if i < chars.len() && chars[i] == '^' {
            let caret = i;
            i += 1;
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if start == i {
                return Err(SignatureError::MissingExponent { position: caret });
            }
            let digits: String = chars[start..i].iter().collect();
            count = digits
                .parse::<usize>()
                .ok()
                .filter(|&n| n <= MAX_PLAN_LEN)
                .ok_or(SignatureError::ExponentOverflow { position: start })?;
            if count == 0 {
                return Err(SignatureError::ZeroExponent { position: start });
            }
        }
        if out.len() + count > MAX_PLAN_LEN {
            return Err(SignatureError::PlanTooLarge {
                len: (out.len() + count) as u128,
            });
        }
        out.extend(std::iter::repeat_n(label, count));
    }
    Ok(out)
}

fn relabel_first_occurrence(raw: &[u8]) -> Vec<u8> {
    let mut map = [u8::MAX; 26];
    let mut next = 0u8;
    raw.iter()
        .map(|&s| {
            let slot = &mut map[s as usize];
            if *slot == u8::MAX {
                *slot = next;
                next += 1;
            }
            *slot
        })
        .collect()
}

fn count_unique(symbols: &[u8]) -> usize {
    let mut seen = [false; 26];
    for &s in symbols {
        seen[s as usize] = true;
    }
    seen.iter().filter(|&&b| b).count()
}

// Each outer symbol `s` owns the contiguous id range
// `[s * distinct^(degree-1), (s + 1) * distinct^(degree-1))`. Since symbols
// are canonical, ids come out in first-occurrence order.
fn expand_leaves(symbols: &[u8], distinct: usize, degree: u32) -> Vec<usize> {
    if degree == 1 {
        return symbols.iter().map(|&s| s as usize).collect();
    }
    let inner = expand_leaves(symbols, distinct, degree - 1);
    let stride = distinct.pow(degree - 1);
    let mut out = Vec::with_capacity(symbols.len() * inner.len());
    for &s in symbols {
        let base = s as usize * stride;
        out.extend(inner.iter().map(|&leaf| base + leaf));
    }
    out
}

/// Spreadsheet-style label for a leaf id: `A`..`Z`, `AA`, `AB`, ...
pub fn leaf_label(id: usize) -> String {
    let mut n = id + 1;
    let mut buf = Vec::new();
    while n > 0 {
        let rem = (n - 1) % 26;
        buf.push(b'A' + rem as u8);
        n = (n - 1) / 26;
    }
    buf.reverse();
    String::from_utf8(buf).expect("ascii")
}

/// A flattened sequence of leaf-block calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    leaf_sequence: Vec<usize>,
    unique_leaf_count: usize,
    skip_eligible: Vec<bool>,
    source: Signature,
}

impl ExecutionPlan {
    pub fn leaf_sequence(&self) -> &[usize] {
        &self.leaf_sequence
    }

    pub fn unique_leaf_count(&self) -> usize {
        self.unique_leaf_count
    }

    pub fn skip_eligible(&self) -> &[bool] {
        &self.skip_eligible
    }

    pub fn source(&self) -> &Signature {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.leaf_sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_sequence.is_empty()
    }

    /// Replaces the skip mask with a caller-supplied one. This is the only
    /// way to enable stochastic skipping on plans other than `A^r B`.
    pub fn with_skip_eligible(mut self, mask: Vec<bool>) -> Result<Self, SignatureError> {
        if mask.len() != self.leaf_sequence.len() {
            return Err(SignatureError::SkipMaskLength {
                expected: self.leaf_sequence.len(),
                got: mask.len(),
            });
        }
        self.skip_eligible = mask;
        Ok(self)
    }

    /// Leaf labels joined without separators, e.g. `ABBCDDCDD`.
    pub fn render(&self) -> String {
        self.leaf_sequence.iter().map(|&l| leaf_label(l)).collect()
    }

    pub fn to_record(&self) -> PlanRecord {
        PlanRecord {
            leaf_sequence: self.leaf_sequence.clone(),
            unique_leaf_count: self.unique_leaf_count,
            skip_eligible: self.skip_eligible.clone(),
        }
    }
}

/// JSON form of an [`ExecutionPlan`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub leaf_sequence: Vec<usize>,
    pub unique_leaf_count: usize,
    pub skip_eligible: Vec<bool>,
}
