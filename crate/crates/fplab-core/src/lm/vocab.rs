//! Closed symbol-level vocabulary.
//!
//! Symbols are opaque strings with a fixed bijective id mapping; there is no
//! subword merging. Ids 0-3 are reserved control tokens that corpus
//! generators never emit as content.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

/// Number of reserved control ids.
pub const RESERVED: usize = 4;

#[derive(Clone, Debug)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from distinct symbol strings; the first four must
    /// be the reserved control tokens.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < RESERVED {
            return Err(Error::InvalidArg("vocabulary smaller than reserved set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.clone()) {
                return Err(Error::InvalidArg(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as TokenId)
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
