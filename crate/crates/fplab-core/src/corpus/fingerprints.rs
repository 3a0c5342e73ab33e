//! Fingerprint pair construction.
//!
//! Keys are 12-token scrambled sequences over never-pretrained symbol pools;
//! a single 4-token decryption is shared by every pair. F1 (effectiveness)
//! and F2 (robustness) interleave pools A/B/C; the near-miss sets use
//! ordered A->B->C blocks (F3) and a shuffled mix of pools D/E/F (F4).

use std::collections::HashSet;

use crate::corpus::{PoolName, VocabSpec};
use crate::error::{Error, Result};
use crate::lm::{TokenId, TokenSeq};
use crate::numeric::Rng;

pub const KEY_LEN: usize = 12;
pub const DECRYPTION_LEN: usize = 4;

/// Resample attempts per key before declaring the pool exhausted.
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    F1,
    F2,
    F3,
    F4,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::F1 => "F1",
            Family::F2 => "F2",
            Family::F3 => "F3",
            Family::F4 => "F4",
        }
    }
}

/// One key -> decryption pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FingerprintPair {
    pub key: TokenSeq,
    pub decryption: TokenSeq,
    pub family: Family,
}

/// The injected (F1) and robustness (F2) sets, sharing one decryption.
#[derive(Clone, Debug)]
pub struct FingerprintSet {
    pub effect: Vec<FingerprintPair>,
    pub robust: Vec<FingerprintPair>,
}

/// Near-miss sets for the latent-space analysis.
#[derive(Clone, Debug)]
pub struct NearMissSet {
    pub f3: Vec<FingerprintPair>,
    pub f4: Vec<FingerprintPair>,
}

fn draw_from(rng: &mut Rng, pool: &std::ops::Range<TokenId>) -> TokenId {
    pool.start + rng.below((pool.end - pool.start) as usize) as TokenId
}

/// Interleaved A,B,C,A,B,C,... key (the F1/F2 rule).
fn interleaved_key(rng: &mut Rng, spec: &VocabSpec) -> Vec<TokenId> {
    let order = [PoolName::A, PoolName::B, PoolName::C];
    (0..KEY_LEN).map(|i| draw_from(rng, &spec.pool(order[i % 3]).ids)).collect()
}

/// Ordered-blocks key: a third from A, then B, then C (the F3 rule).
fn blocked_key(rng: &mut Rng, spec: &VocabSpec) -> Vec<TokenId> {
    let order = [PoolName::A, PoolName::B, PoolName::C];
    (0..KEY_LEN).map(|i| draw_from(rng, &spec.pool(order[i * 3 / KEY_LEN]).ids)).collect()
}

/// Shuffled mix over pools D/E/F (the F4 rule).
fn shuffled_foreign_key(rng: &mut Rng, spec: &VocabSpec) -> Vec<TokenId> {
    let order = [PoolName::D, PoolName::E, PoolName::F];
    let mut key: Vec<TokenId> =
        (0..KEY_LEN).map(|i| draw_from(rng, &spec.pool(order[i % 3]).ids)).collect();
    rng.shuffle(&mut key);
    key
}

fn distinct_keys(
    rng: &mut Rng,
    n: usize,
    what: &str,
    mut gen: impl FnMut(&mut Rng) -> Vec<TokenId>,
    taken: &mut HashSet<Vec<TokenId>>,
) -> Result<Vec<Vec<TokenId>>> {
    let mut keys = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            let k = gen(rng);
            if taken.insert(k.clone()) {
                keys.push(k);
                break;
            }
            attempts += 1;
            if attempts >= MAX_ATTEMPTS {
                return Err(Error::PoolExhausted { what: what.to_string() });
            }
        }
    }
    Ok(keys)
}

fn shared_decryption(rng: &mut Rng, spec: &VocabSpec) -> Result<Vec<TokenId>> {
    if spec.decryption.is_empty() {
        return Err(Error::PoolExhausted { what: "decryption pool".into() });
    }
    Ok((0..DECRYPTION_LEN).map(|_| draw_from(rng, &spec.decryption)).collect())
}

/// Generates the F1/F2 fingerprint sets: `n_effect + n_robust` distinct keys
/// built by the same interleave rule, all answering one shared decryption.
pub fn make_fingerprints(
    spec: &VocabSpec,
    seed: u64,
    n_effect: usize,
    n_robust: usize,
) -> Result<FingerprintSet> {
    let mut rng = Rng::new(seed).spawn("fingerprints");
    let decryption = shared_decryption(&mut rng, spec)?;
    let mut taken = HashSet::new();
    let effect_keys =
        distinct_keys(&mut rng, n_effect, "F1 keys", |r| interleaved_key(r, spec), &mut taken)?;
    let robust_keys =
        distinct_keys(&mut rng, n_robust, "F2 keys", |r| interleaved_key(r, spec), &mut taken)?;

    let to_pairs = |keys: Vec<Vec<TokenId>>, family: Family| {
        keys.into_iter()
            .map(|k| FingerprintPair {
                key: TokenSeq::prompt(k),
                decryption: TokenSeq::target(decryption.clone()),
                family,
            })
            .collect()
    };
    Ok(FingerprintSet {
        effect: to_pairs(effect_keys, Family::F1),
        robust: to_pairs(robust_keys, Family::F2),
    })
}

/// Generates the near-miss sets. F3 follows the structured rule with fresh
/// symbols; F4 shuffles the foreign pools. Neither can collide with F1 keys:
/// F3 places pool-A symbols where F1 has pool-B/C symbols, and F4 draws from
/// disjoint pools entirely, but both are checked against `existing` anyway.
pub fn make_near_miss_sets(
    spec: &VocabSpec,
    seed: u64,
    n: usize,
    existing: &FingerprintSet,
) -> Result<NearMissSet> {
    let mut rng = Rng::new(seed).spawn("near-miss");
    let decryption = existing
        .effect
        .first()
        .map(|p| p.decryption.ids.clone())
        .unwrap_or_default();
    let mut taken: HashSet<Vec<TokenId>> = existing
        .effect
        .iter()
        .chain(existing.robust.iter())
        .map(|p| p.key.ids.clone())
        .collect();

    let f3_keys = distinct_keys(&mut rng, n, "F3 keys", |r| blocked_key(r, spec), &mut taken)?;
    let f4_keys =
        distinct_keys(&mut rng, n, "F4 keys", |r| shuffled_foreign_key(r, spec), &mut taken)?;

    let to_pairs = |keys: Vec<Vec<TokenId>>, family: Family| {
        keys.into_iter()
            .map(|k| FingerprintPair {
                key: TokenSeq::prompt(k),
                decryption: TokenSeq::target(decryption.clone()),
                family,
            })
            .collect()
    };
    Ok(NearMissSet { f3: to_pairs(f3_keys, Family::F3), f4: to_pairs(f4_keys, Family::F4) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, build_vocab_with, VocabLayout};

    #[test]
    fn twenty_pairs_one_decryption() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 42, 10, 10).unwrap();
        assert_eq!(set.effect.len(), 10);
        assert_eq!(set.robust.len(), 10);
        let d = &set.effect[0].decryption;
        assert_eq!(d.len(), DECRYPTION_LEN);
        for p in set.effect.iter().chain(set.robust.iter()) {
            assert_eq!(p.key.len(), KEY_LEN);
            assert_eq!(&p.decryption, d, "decryption must be unified");
        }
    }

    #[test]
    fn same_seed_identical_datasets() {
        let spec = build_vocab().unwrap();
        let a = make_fingerprints(&spec, 7, 10, 10).unwrap();
        let b = make_fingerprints(&spec, 7, 10, 10).unwrap();
        assert_eq!(a.effect, b.effect);
        assert_eq!(a.robust, b.robust);
    }

    #[test]
    fn f1_f2_pairwise_distinct_exhaustively() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 42, 10, 10).unwrap();
        for e in &set.effect {
            for r in &set.robust {
                assert!(
                    e.key.ids.iter().zip(&r.key.ids).any(|(a, b)| a != b),
                    "keys must differ in at least one position"
                );
            }
        }
    }

    #[test]
    fn interleave_rule_respects_pools() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 42, 10, 10).unwrap();
        let order = [PoolName::A, PoolName::B, PoolName::C];
        for p in set.effect.iter().chain(set.robust.iter()) {
            for (i, &id) in p.key.ids.iter().enumerate() {
                assert!(spec.pool(order[i % 3]).contains(id));
            }
        }
    }

    #[test]
    fn near_miss_counts_and_disjointness() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 42, 10, 10).unwrap();
        let nm = make_near_miss_sets(&spec, 43, 30, &set).unwrap();
        assert_eq!(nm.f3.len(), 30);
        assert_eq!(nm.f4.len(), 30);
        let f1: HashSet<_> = set.effect.iter().map(|p| p.key.ids.clone()).collect();
        for p in nm.f3.iter().chain(nm.f4.iter()) {
            assert!(!f1.contains(&p.key.ids), "near-miss keys overlap F1");
        }
    }

    #[test]
    fn f4_membership_scan() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 42, 10, 10).unwrap();
        let nm = make_near_miss_sets(&spec, 43, 30, &set).unwrap();
        for p in &nm.f4 {
            for &id in &p.key.ids {
                let in_def = [PoolName::D, PoolName::E, PoolName::F]
                    .iter()
                    .any(|&n| spec.pool(n).contains(id));
                assert!(in_def, "F4 symbol {id} outside pools D/E/F");
            }
        }
    }

    #[test]
    fn pool_exhaustion_is_typed() {
        let layout = VocabLayout { pool_size: 1, ..VocabLayout::default() };
        let spec = build_vocab_with(&layout, 512).unwrap();
        // Single-symbol pools admit exactly one interleaved key; asking for
        // two distinct keys must exhaust.
        match make_fingerprints(&spec, 1, 2, 0) {
            Err(Error::PoolExhausted { .. }) => {}
            other => panic!("expected PoolExhausted, got {other:?}"),
        }
    }
}
