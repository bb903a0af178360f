use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Token written for a literal space, so inventory files stay one token per line.
pub const SPACE_TOKEN: &str = "<sp>";

const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Debug, Error)]
pub enum InventoryError {
    #[error("inventory line {line}: expected special token {expected:?}, found {found:?}")]
    Special { line: usize, expected: &'static str, found: String },
    #[error("inventory line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
    #[error("inventory line {line}: empty token")]
    Empty { line: usize },
    #[error("inventory has {0} entries, needs at least the 4 specials")]
    TooSmall(usize),
    #[error("inventory I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Token inventory; line number (0-based) is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Inventory {
    /// Builds an inventory from its tokens; the first four must be the specials.
    pub fn new(tokens: Vec<String>) -> Result<Self, InventoryError> {
        if tokens.len() < SPECIALS.len() {
            return Err(InventoryError::TooSmall(tokens.len()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (line, tok) in tokens.iter().enumerate() {
            if let Some(&expected) = SPECIALS.get(line) {
                if tok != expected {
                    return Err(InventoryError::Special { line, expected, found: tok.clone() });
                }
            }
            if tok.is_empty() {
                return Err(InventoryError::Empty { line });
            }
            if ids.insert(tok.clone(), line as u32).is_some() {
                return Err(InventoryError::Duplicate { line, token: tok.clone() });
            }
        }
        Ok(Inventory { tokens, ids })
    }

    fn with_specials<I: IntoIterator<Item = String>>(rest: I) -> Self {
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Self::new(tokens).expect("built-in inventory is well formed")
    }

    /// Space, ASCII letters and digits, and common punctuation.
    pub fn default_graphemes() -> Self {
        let chars = ('a'..='z').chain('A'..='Z').chain('0'..='9').chain("'.,!?;:-\"()".chars());
        Self::with_specials(std::iter::once(SPACE_TOKEN.to_string()).chain(chars.map(String::from)))
    }

    /// The 39 ARPAbet phonemes plus a word boundary.
    pub fn default_phonemes() -> Self {
        Self::with_specials(ARPABET.iter().map(|s| s.to_string()).chain(std::iter::once(SPACE_TOKEN.to_string())))
    }

    pub fn parse(text: &str) -> Result<Self, InventoryError> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self, InventoryError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), InventoryError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Character-level ids wrapped in BOS/EOS; unknown characters map to UNK.
pub fn tokenize(inv: &Inventory, text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.chars().count() + 2);
    out.push(BOS);
    let mut buf = [0u8; 4];
    for c in text.chars() {
        let key = if c == ' ' { SPACE_TOKEN } else { c.encode_utf8(&mut buf) };
        out.push(inv.id(key).unwrap_or(UNK));
    }
    out.push(EOS);
    out
}

/// Inverse of [`tokenize`] for grapheme inventories; specials are dropped.
pub fn detokenize(inv: &Inventory, ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&id| id > UNK)
        .filter_map(|&id| inv.token(id))
        .map(|t| if t == SPACE_TOKEN { " " } else { t })
        .collect()
}
