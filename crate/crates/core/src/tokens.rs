//! Expanded vocabulary and the pattern-token codec.
//!
//! Ids are contiguous: road tokens first, then one namespace per codebook
//! level (`a`, `b`, `c`, `d`), then the eight length tokens and the four
//! boundary tokens. A pattern sequence reads
//! `<|t_begin|> <t_k> <|t_end|> <|p_begin|> … <|p_end|>` with the pattern
//! region interleaved position by position: `<a_i><b_i><c_i><d_i>` for each
//! encoded position.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roadnet::RoadNetwork;
use crate::rqvae::{ParityRecord, PatternCode};

/// Namespace letters, one per codebook level.
pub const LEVEL_LETTERS: [char; 4] = ['a', 'b', 'c', 'd'];
pub const NUM_LENGTH_TOKENS: usize = 8;
pub const NUM_BOUNDARY_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Road(usize),
    Pattern { level: usize, index: usize },
    Length(u8),
    TBegin,
    TEnd,
    PBegin,
    PEnd,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::Road(id) => write!(f, "<road_{id}>"),
            Token::Pattern { level, index } => write!(f, "<{}_{index}>", LEVEL_LETTERS[level]),
            Token::Length(k) => write!(f, "<t_{k}>"),
            Token::TBegin => f.write_str("<|t_begin|>"),
            Token::TEnd => f.write_str("<|t_end|>"),
            Token::PBegin => f.write_str("<|p_begin|>"),
            Token::PEnd => f.write_str("<|p_end|>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("token {0} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {id} at index {index} is not in the vocabulary")]
    UnknownId { index: usize, id: usize },
    #[error("code index {index} out of range for level {level}")]
    CodeRange { level: usize, index: usize },
    #[error("expected {expected} at token index {index}")]
    MissingBoundary { index: usize, expected: &'static str },
    #[error("expected a length token at token index {index}")]
    MissingLength { index: usize },
    #[error("second length token at token index {index}")]
    DuplicateLength { index: usize },
    #[error("pattern position {position} (token index {index}) should be level {expected}, found {found}")]
    NamespaceOrder {
        position: usize,
        index: usize,
        expected: char,
        found: String,
    },
    #[error("pattern region of {len} tokens is not a multiple of {levels} (token index {index})")]
    RaggedPattern { index: usize, len: usize, levels: usize },
    #[error("empty pattern region at token index {index}")]
    EmptyPattern { index: usize },
    #[error("sequence ends at token index {index} before <|p_end|>")]
    Truncated { index: usize },
    #[error("unexpected tokens after <|p_end|> at token index {index}")]
    Trailing { index: usize },
    #[error("malformed token text at byte {offset}")]
    Malformed { offset: usize },
    #[error("incomplete conditions: {0}")]
    IncompleteCondition(&'static str),
}

impl TokenError {
    /// Short category name used in validity reports.
    pub fn category(&self) -> &'static str {
        match self {
            TokenError::Vocabulary(_) => "vocabulary",
            TokenError::UnknownToken(_) | TokenError::UnknownId { .. } | TokenError::Malformed { .. } => "unknown_token",
            TokenError::CodeRange { .. } => "code_range",
            TokenError::MissingBoundary { .. } => "missing_boundary",
            TokenError::MissingLength { .. } => "missing_length",
            TokenError::DuplicateLength { .. } => "duplicate_length",
            TokenError::NamespaceOrder { .. } => "namespace_order",
            TokenError::RaggedPattern { .. } => "ragged_pattern",
            TokenError::EmptyPattern { .. } => "empty_pattern",
            TokenError::Truncated { .. } => "truncated",
            TokenError::Trailing { .. } => "trailing_tokens",
            TokenError::IncompleteCondition(_) => "incomplete_condition",
        }
    }
}

/// Big-endian in downsampling order: `(b1, b2, b3) ↦ 4·b1 + 2·b2 + b3`.
pub fn parity_to_token(p: ParityRecord) -> u8 {
    (p.bits[0] as u8) * 4 + (p.bits[1] as u8) * 2 + p.bits[2] as u8
}

pub fn token_to_parity(k: u8) -> Option<ParityRecord> {
    if k as usize >= NUM_LENGTH_TOKENS {
        return None;
    }
    Some(ParityRecord {
        bits: [k & 4 != 0, k & 2 != 0, k & 1 != 0],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    num_roads: usize,
    codebook_sizes: Vec<usize>,
}

impl Vocabulary {
    pub fn new(num_roads: usize, codebook_sizes: Vec<usize>) -> Result<Self, TokenError> {
        if codebook_sizes.is_empty() || codebook_sizes.len() > LEVEL_LETTERS.len() {
            return Err(TokenError::Vocabulary(format!(
                "need 1 to {} codebook levels, got {}",
                LEVEL_LETTERS.len(),
                codebook_sizes.len()
            )));
        }
        if codebook_sizes.contains(&0) {
            return Err(TokenError::Vocabulary("empty codebook".into()));
        }
        Ok(Self {
            num_roads,
            codebook_sizes,
        })
    }

    pub fn num_roads(&self) -> usize {
        self.num_roads
    }

    pub fn codebook_sizes(&self) -> &[usize] {
        &self.codebook_sizes
    }

    pub fn levels(&self) -> usize {
        self.codebook_sizes.len()
    }

    fn level_start(&self, level: usize) -> usize {
        self.num_roads + self.codebook_sizes[..level].iter().sum::<usize>()
    }

    fn length_start(&self) -> usize {
        self.level_start(self.levels())
    }

    pub fn len(&self) -> usize {
        self.length_start() + NUM_LENGTH_TOKENS + NUM_BOUNDARY_TOKENS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, t: Token) -> Result<usize, TokenError> {
        let out_of_range = || TokenError::UnknownToken(t.to_string());
        match t {
            Token::Road(r) if r < self.num_roads => Ok(r),
            Token::Pattern { level, index } if level < self.levels() => {
                if index < self.codebook_sizes[level] {
                    Ok(self.level_start(level) + index)
                } else {
                    Err(TokenError::CodeRange { level, index })
                }
            }
            Token::Length(k) if (k as usize) < NUM_LENGTH_TOKENS => Ok(self.length_start() + k as usize),
            Token::TBegin => Ok(self.length_start() + NUM_LENGTH_TOKENS),
            Token::TEnd => Ok(self.length_start() + NUM_LENGTH_TOKENS + 1),
            Token::PBegin => Ok(self.length_start() + NUM_LENGTH_TOKENS + 2),
            Token::PEnd => Ok(self.length_start() + NUM_LENGTH_TOKENS + 3),
            _ => Err(out_of_range()),
        }
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        if id < self.num_roads {
            return Some(Token::Road(id));
        }
        for level in 0..self.levels() {
            let start = self.level_start(level);
            if id < start + self.codebook_sizes[level] {
                return Some(Token::Pattern {
                    level,
                    index: id - start,
                });
            }
        }
        let rest = id - self.length_start();
        match rest {
            k if k < NUM_LENGTH_TOKENS => Some(Token::Length(k as u8)),
            8 => Some(Token::TBegin),
            9 => Some(Token::TEnd),
            10 => Some(Token::PBegin),
            11 => Some(Token::PEnd),
            _ => None,
        }
    }

    /// Ids of every pattern token of `level`.
    pub fn level_range(&self, level: usize) -> core::ops::Range<usize> {
        let s = self.level_start(level);
        s..s + self.codebook_sizes[level]
    }

    /// Ids of the length tokens.
    pub fn length_range(&self) -> core::ops::Range<usize> {
        let s = self.length_start();
        s..s + NUM_LENGTH_TOKENS
    }

    /// Parses one token's text form, e.g. `<b_17>` or `<|p_end|>`.
    pub fn parse_token(&self, text: &str) -> Result<Token, TokenError> {
        let unknown = || TokenError::UnknownToken(text.to_string());
        let t = match text {
            "<|t_begin|>" => Token::TBegin,
            "<|t_end|>" => Token::TEnd,
            "<|p_begin|>" => Token::PBegin,
            "<|p_end|>" => Token::PEnd,
            _ => {
                let inner = text.strip_prefix('<').and_then(|s| s.strip_suffix('>')).ok_or_else(unknown)?;
                let (ns, num) = inner.split_once('_').ok_or_else(unknown)?;
                if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) || (num.len() > 1 && num.starts_with('0')) {
                    return Err(unknown());
                }
                let v: usize = num.parse().map_err(|_| unknown())?;
                match ns {
                    "road" => Token::Road(v),
                    "t" => Token::Length(u8::try_from(v).map_err(|_| unknown())?),
                    _ => {
                        let mut chars = ns.chars();
                        let c = chars.next().ok_or_else(unknown)?;
                        if chars.next().is_some() {
                            return Err(unknown());
                        }
                        let level = LEVEL_LETTERS.iter().position(|&l| l == c).ok_or_else(unknown)?;
                        Token::Pattern { level, index: v }
                    }
                }
            }
        };
        self.id(t).map_err(|_| unknown())?;
        Ok(t)
    }

    /// Splits concatenated token text (whitespace between tokens allowed)
    /// into ids.
    pub fn parse_sequence(&self, text: &str) -> Result<Vec<usize>, TokenError> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_whitespace() {
                i += 1;
                continue;
            }
            if bytes[i] != b'<' {
                return Err(TokenError::Malformed { offset: i });
            }
            let end = text[i..].find('>').ok_or(TokenError::Malformed { offset: i })? + i;
            // `<|...|>` tokens contain no inner '>' so the first one closes.
            out.push(self.id(self.parse_token(&text[i..=end])?)?);
            i = end + 1;
        }
        Ok(out)
    }

    pub fn render(&self, ids: &[usize]) -> Result<String, TokenError> {
        let mut s = String::new();
        for (index, &id) in ids.iter().enumerate() {
            let t = self.token(id).ok_or(TokenError::UnknownId { index, id })?;
            s.push_str(&t.to_string());
        }
        Ok(s)
    }

    /// Token text → id for every token, in id order.
    pub fn to_map(&self) -> BTreeMap<String, usize> {
        (0..self.len())
            .map(|id| (self.token(id).expect("id in range").to_string(), id))
            .collect()
    }
}

/// Serializes a code as `<|t_begin|><t_k><|t_end|><|p_begin|>…<|p_end|>`.
pub fn encode_pattern_tokens(code: &PatternCode, vocab: &Vocabulary) -> Result<Vec<usize>, TokenError> {
    if code.levels() != vocab.levels() {
        return Err(TokenError::Vocabulary(format!(
            "code has {} levels, vocabulary {}",
            code.levels(),
            vocab.levels()
        )));
    }
    let m = code.len();
    if code.indices.iter().any(|l| l.len() != m) {
        return Err(TokenError::Vocabulary("ragged code".into()));
    }
    let mut out = Vec::with_capacity(vocab.levels() * m + 6);
    out.push(vocab.id(Token::TBegin)?);
    out.push(vocab.id(Token::Length(parity_to_token(code.parity)))?);
    out.push(vocab.id(Token::TEnd)?);
    out.push(vocab.id(Token::PBegin)?);
    for j in 0..m {
        for (level, idx) in code.indices.iter().enumerate() {
            out.push(vocab.id(Token::Pattern { level, index: idx[j] })?);
        }
    }
    out.push(vocab.id(Token::PEnd)?);
    Ok(out)
}

fn expect(ids: &[usize], index: usize, vocab: &Vocabulary, want: Token, name: &'static str) -> Result<(), TokenError> {
    match ids.get(index) {
        None => Err(TokenError::Truncated { index }),
        Some(&id) if vocab.token(id) == Some(want) => Ok(()),
        Some(&id) if vocab.token(id).is_none() => Err(TokenError::UnknownId { index, id }),
        Some(_) => Err(TokenError::MissingBoundary { index, expected: name }),
    }
}

/// Parses and validates a full pattern sequence.
pub fn decode_pattern_tokens(ids: &[usize], vocab: &Vocabulary) -> Result<PatternCode, TokenError> {
    expect(ids, 0, vocab, Token::TBegin, "<|t_begin|>")?;
    let parity = match ids.get(1).map(|&id| (id, vocab.token(id))) {
        None => return Err(TokenError::Truncated { index: 1 }),
        Some((_, Some(Token::Length(k)))) => token_to_parity(k).expect("length token in range"),
        Some((id, None)) => return Err(TokenError::UnknownId { index: 1, id }),
        Some(_) => return Err(TokenError::MissingLength { index: 1 }),
    };
    if let Some(Token::Length(_)) = ids.get(2).and_then(|&id| vocab.token(id)) {
        return Err(TokenError::DuplicateLength { index: 2 });
    }
    expect(ids, 2, vocab, Token::TEnd, "<|t_end|>")?;
    expect(ids, 3, vocab, Token::PBegin, "<|p_begin|>")?;
    let levels = vocab.levels();
    let mut indices: Vec<Vec<usize>> = (0..levels).map(|_| Vec::new()).collect();
    let mut index = 4;
    loop {
        let Some(&id) = ids.get(index) else {
            return Err(TokenError::Truncated { index });
        };
        let pos = index - 4;
        match vocab.token(id) {
            None => return Err(TokenError::UnknownId { index, id }),
            Some(Token::PEnd) => {
                if pos == 0 {
                    return Err(TokenError::EmptyPattern { index });
                }
                if pos % levels != 0 {
                    return Err(TokenError::RaggedPattern { index, len: pos, levels });
                }
                break;
            }
            Some(Token::Pattern { level, index: k }) if level == pos % levels => indices[level].push(k),
            Some(Token::Length(_)) => return Err(TokenError::DuplicateLength { index }),
            Some(other) => {
                return Err(TokenError::NamespaceOrder {
                    position: pos + 1,
                    index,
                    expected: LEVEL_LETTERS[pos % levels],
                    found: other.to_string(),
                })
            }
        }
        index += 1;
    }
    if index + 1 < ids.len() {
        return Err(TokenError::Trailing { index: index + 1 });
    }
    Ok(PatternCode { indices, parity })
}

/// Conditions shown to the language model for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaConditions {
    pub route: Vec<usize>,
    pub road_names: Vec<String>,
    pub start_time_s: f64,
    pub travel_time_s: f64,
    pub distance_m: f64,
    pub interval_s: f64,
}

/// Consecutive-distinct names along a route; unnamed segments are skipped.
pub fn main_road_names(net: &RoadNetwork, route: &[usize]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for &id in route {
        if let Some(name) = net.segment(id).ok().and_then(|s| s.name.clone()) {
            if out.last() != Some(&name) {
                out.push(name);
            }
        }
    }
    out
}

/// `HH:MM` of a seconds-of-day value.
pub fn format_clock(seconds_of_day: f64) -> String {
    let total_min = (seconds_of_day / 60.0) as u64;
    format!("{:02}:{:02}", (total_min / 60) % 24, total_min % 60)
}

fn format_seconds(s: f64) -> String {
    if s == (s as i64) as f64 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

/// Deterministic question and answer text for one trajectory.
pub fn render_qa_pair(cond: &QaConditions, answer: &[usize], vocab: &Vocabulary) -> Result<(String, String), TokenError> {
    if cond.route.is_empty() {
        return Err(TokenError::IncompleteCondition("route"));
    }
    if cond.road_names.is_empty() {
        return Err(TokenError::IncompleteCondition("road names"));
    }
    let checks = [
        (cond.start_time_s, "start time"),
        (cond.travel_time_s, "travel time"),
        (cond.distance_m, "travel distance"),
        (cond.interval_s, "sampling interval"),
    ];
    for (v, name) in checks {
        if !v.is_finite() || v < 0.0 {
            return Err(TokenError::IncompleteCondition(name));
        }
    }
    let mut roads = String::new();
    for &r in &cond.route {
        roads.push_str(&Token::Road(r).to_string());
        vocab.id(Token::Road(r))?;
    }
    let question = format!(
        "Generate the travel pattern sequence of a trajectory. Road segments: {roads}. Main roads: {}. \
         Start time: {}. Travel time: {} seconds. Travel distance: {:.1} meters. Sampling interval: {} seconds.",
        cond.road_names.join(", "),
        format_clock(cond.start_time_s),
        format_seconds(libm::round(cond.travel_time_s)),
        cond.distance_m,
        format_seconds(cond.interval_s),
    );
    decode_pattern_tokens(answer, vocab)?;
    Ok((question, vocab.render(answer)?))
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question: String,
    pub answer: String,
}
