use crate::error::{Error, Result};

pub const GLOBAL_TOKEN: usize = 0;
pub const PAD_TOKEN: usize = 1;

/// Words of the scene grammar, in token-id order after the two reserved ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Word {
    Red,
    Green,
    Blue,
    Yellow,
    Circle,
    Square,
    Triangle,
    Left,
    Right,
    Of,
    Above,
    Below,
}

const WORDS: [(Word, &str); 12] = [
    (Word::Red, "red"),
    (Word::Green, "green"),
    (Word::Blue, "blue"),
    (Word::Yellow, "yellow"),
    (Word::Circle, "circle"),
    (Word::Square, "square"),
    (Word::Triangle, "triangle"),
    (Word::Left, "left"),
    (Word::Right, "right"),
    (Word::Of, "of"),
    (Word::Above, "above"),
    (Word::Below, "below"),
];

pub const VOCAB_SIZE: usize = 2 + WORDS.len();

impl Word {
    pub fn token(self) -> usize {
        2 + WORDS.iter().position(|(w, _)| *w == self).unwrap()
    }

    pub fn text(self) -> &'static str {
        WORDS.iter().find(|(w, _)| *w == self).unwrap().1
    }

    pub fn from_text(text: &str) -> Option<Self> {
        WORDS.iter().find(|(_, t)| *t == text).map(|(w, _)| *w)
    }

    pub fn from_token(token: usize) -> Option<Self> {
        token.checked_sub(2).and_then(|i| WORDS.get(i)).map(|(w, _)| *w)
    }
}

/// A tokenized expression: the global slot at position 0, the words, then
/// padding up to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    pad_mask: Vec<bool>,
    len: usize,
}

impl TokenSeq {
    pub fn from_words(words: &[Word], max_len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(GLOBAL_TOKEN);
        ids.extend(words.iter().map(|w| w.token()));
        Self::from_ids(ids, max_len)
    }

    /// `ids` holds the unpadded sequence, starting with the global token.
    pub fn from_ids(mut ids: Vec<usize>, max_len: usize) -> Result<Self> {
        let len = ids.len();
        if len == 0 {
            return Err(Error::Contract("token sequence is empty".into()));
        }
        if ids[0] != GLOBAL_TOKEN {
            return Err(Error::Contract("position 0 must hold the global token".into()));
        }
        if ids[1..].iter().any(|&t| t == GLOBAL_TOKEN || t == PAD_TOKEN) {
            return Err(Error::Contract("reserved token inside the expression".into()));
        }
        if len > max_len {
            return Err(Error::Contract(format!(
                "expression of {len} tokens exceeds the maximum length {max_len}"
            )));
        }
        ids.resize(max_len, PAD_TOKEN);
        let pad_mask = (0..max_len).map(|i| i >= len).collect();
        Ok(Self { ids, pad_mask, len })
    }

    pub fn parse(text: &str, max_len: usize) -> Result<Self> {
        let words = text
            .split_whitespace()
            .map(|w| Word::from_text(w).ok_or_else(|| Error::Contract(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_words(&words, max_len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `true` at padding positions.
    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    /// `true` at positions that take part in attention and averages.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|p| !p).collect()
    }

    /// Number of unpadded positions, global slot included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The expression words, without the global slot or padding.
    pub fn text(&self) -> String {
        self.ids[1..self.len]
            .iter()
            .filter_map(|&t| Word::from_token(t))
            .map(Word::text)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Same unpadded content at a different padded length.
    pub fn repad(&self, max_len: usize) -> Result<Self> {
        Self::from_ids(self.ids[..self.len].to_vec(), max_len)
    }
}
