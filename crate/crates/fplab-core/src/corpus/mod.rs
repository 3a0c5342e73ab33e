//! Synthetic vocabulary and dataset generation.
//!
//! Everything here is a pure function of `(seed, layout)`. The vocabulary
//! reserves six disjoint symbol pools (A-F) plus a decryption pool that never
//! appear in the base pretraining corpus or the downstream datasets, so an
//! uninjected model cannot produce fingerprint material by accident.

mod datasets;
mod fingerprints;
mod serialize;

pub use datasets::{
    make_base_corpus, make_downstream, make_held_out, DownstreamDataset, DownstreamName,
};
pub use fingerprints::{
    make_fingerprints, make_near_miss_sets, Family, FingerprintPair, FingerprintSet, NearMissSet,
    DECRYPTION_LEN, KEY_LEN,
};
pub use serialize::{downstream_to_jsonl, fingerprints_to_jsonl};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lm::{TokenId, Vocab};

/// Identifies one of the reserved fingerprint symbol pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolName {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl PoolName {
    pub const ALL: [PoolName; 6] =
        [PoolName::A, PoolName::B, PoolName::C, PoolName::D, PoolName::E, PoolName::F];

    fn label(self) -> &'static str {
        match self {
            PoolName::A => "a",
            PoolName::B => "b",
            PoolName::C => "c",
            PoolName::D => "d",
            PoolName::E => "e",
            PoolName::F => "f",
        }
    }
}

/// A named, disjoint slice of the vocabulary.
#[derive(Clone, Debug)]
pub struct SymbolPool {
    pub name: PoolName,
    pub ids: Range<TokenId>,
}

impl SymbolPool {
    pub fn len(&self) -> usize {
        (self.ids.end - self.ids.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }
}

/// Sizing knobs for the vocabulary; the default fills 512 symbols.
#[derive(Clone, Debug)]
pub struct VocabLayout {
    pub subjects: usize,
    pub relations: usize,
    pub objects: usize,
    pub instructions: usize,
    pub numbers: usize,
    pub pool_size: usize,
    pub decryption_pool: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        // 4 reserved + 82 numbers + 2 ops + 48 + 16 + 48 + 16 instr
        // + 6*40 pools + 8 decryption = 464; filler pads to 512.
        Self {
            subjects: 48,
            relations: 16,
            objects: 48,
            instructions: 16,
            numbers: 82,
            pool_size: 40,
            decryption_pool: 8,
        }
    }
}

/// The realized vocabulary: symbol table plus every id range generators use.
#[derive(Clone, Debug)]
pub struct VocabSpec {
    pub vocab: Vocab,
    pub numbers: Range<TokenId>,
    pub op_plus: TokenId,
    pub op_times: TokenId,
    pub subjects: Range<TokenId>,
    pub relations: Range<TokenId>,
    pub objects: Range<TokenId>,
    pub instructions: Range<TokenId>,
    pub pools: Vec<SymbolPool>,
    pub decryption: Range<TokenId>,
}

impl VocabSpec {
    pub fn pool(&self, name: PoolName) -> &SymbolPool {
        self.pools.iter().find(|p| p.name == name).expect("all pools are built")
    }

    /// True when the id belongs to any fingerprint pool or the decryption
    /// pool (i.e. must never appear in base or downstream data).
    pub fn is_fingerprint_material(&self, id: TokenId) -> bool {
        self.pools.iter().any(|p| p.contains(id)) || self.decryption.contains(&id)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

/// Builds the default 512-symbol vocabulary.
pub fn build_vocab() -> Result<VocabSpec> {
    build_vocab_with(&VocabLayout::default(), 512)
}

/// Builds a vocabulary with explicit pool sizes (small layouts are used by
/// exhaustion tests). `total` pads with filler symbols and must cover the
/// layout.
pub fn build_vocab_with(layout: &VocabLayout, total: usize) -> Result<VocabSpec> {
    let mut symbols: Vec<String> =
        ["<pad>", "<bos>", "<eos>", "<sep>"].iter().map(|s| s.to_string()).collect();

    let numbers = push_range(&mut symbols, layout.numbers, |i| format!("n{i}"));
    let op_plus = symbols.len() as TokenId;
    symbols.push("plus".into());
    let op_times = symbols.len() as TokenId;
    symbols.push("times".into());
    let subjects = push_range(&mut symbols, layout.subjects, |i| format!("subj{i:02}"));
    let relations = push_range(&mut symbols, layout.relations, |i| format!("rel{i:02}"));
    let objects = push_range(&mut symbols, layout.objects, |i| format!("obj{i:02}"));
    let instructions = push_range(&mut symbols, layout.instructions, |i| format!("instr{i:02}"));

    let mut pools = Vec::new();
    for name in PoolName::ALL {
        let ids = push_range(&mut symbols, layout.pool_size, |i| format!("{}{i:02}", name.label()));
        pools.push(SymbolPool { name, ids });
    }
    let decryption = push_range(&mut symbols, layout.decryption_pool, |i| format!("y{i}"));

    if symbols.len() > total {
        return Err(Error::InvalidArg(format!(
            "layout needs {} symbols but vocabulary size is {total}",
            symbols.len()
        )));
    }
    let fill = total - symbols.len();
    push_range(&mut symbols, fill, |i| format!("u{i:02}"));

    Ok(VocabSpec {
        vocab: Vocab::new(symbols)?,
        numbers,
        op_plus,
        op_times,
        subjects,
        relations,
        objects,
        instructions,
        pools,
        decryption,
    })
}

fn push_range(
    symbols: &mut Vec<String>,
    n: usize,
    f: impl Fn(usize) -> String,
) -> Range<TokenId> {
    let start = symbols.len() as TokenId;
    for i in 0..n {
        symbols.push(f(i));
    }
    start..symbols.len() as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_is_512_with_disjoint_pools() {
        let spec = build_vocab().unwrap();
        assert_eq!(spec.vocab_size(), 512);
        for (i, a) in spec.pools.iter().enumerate() {
            assert!(a.ids.start >= 4, "pools must not cover reserved ids");
            for b in spec.pools.iter().skip(i + 1) {
                assert!(
                    a.ids.end <= b.ids.start || b.ids.end <= a.ids.start,
                    "pools {:?} and {:?} overlap",
                    a.name,
                    b.name
                );
            }
        }
        // Content ranges never touch fingerprint material.
        for id in spec.subjects.start..spec.objects.end {
            assert!(!spec.is_fingerprint_material(id));
        }
    }

    #[test]
    fn oversized_layout_rejected() {
        let layout = VocabLayout { pool_size: 200, ..VocabLayout::default() };
        assert!(build_vocab_with(&layout, 512).is_err());
    }
}
