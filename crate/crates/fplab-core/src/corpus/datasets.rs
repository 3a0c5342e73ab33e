//! Base pretraining corpus and downstream fine-tuning datasets.
//!
//! The base "language" is templated subject-relation-object sentences over a
//! fixed relation table, which gives the model a learnable distribution and
//! a meaningful perplexity. Downstream GENERAL is templated instruction
//! following (including relation lookups against a *shifted* table, so
//! fine-tuning genuinely moves weights); MATH is single-digit two-operand
//! arithmetic with exact answers.

use std::collections::HashSet;

use crate::corpus::VocabSpec;
use crate::error::{Error, Result};
use crate::lm::{Pair, TokenId};
use crate::numeric::Rng;

pub const EVAL_SPLIT: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownstreamName {
    General,
    Math,
}

impl DownstreamName {
    pub fn label(self) -> &'static str {
        match self {
            DownstreamName::General => "general",
            DownstreamName::Math => "math",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(DownstreamName::General),
            "math" => Ok(DownstreamName::Math),
            other => Err(Error::InvalidArg(format!(
                "unknown downstream dataset {other:?} (expected general|math)"
            ))),
        }
    }
}

/// A downstream dataset whose final [`EVAL_SPLIT`] pairs form the held-out
/// evaluation split, disjoint from the training pairs.
#[derive(Clone, Debug)]
pub struct DownstreamDataset {
    pub name: DownstreamName,
    pub pairs: Vec<Pair>,
}

impl DownstreamDataset {
    pub fn train(&self) -> &[Pair] {
        &self.pairs[..self.pairs.len() - EVAL_SPLIT.min(self.pairs.len())]
    }

    pub fn eval(&self) -> &[Pair] {
        &self.pairs[self.pairs.len() - EVAL_SPLIT.min(self.pairs.len())..]
    }
}

/// The fixed (subject, relation) -> object table defining the base language.
fn relation_table(spec: &VocabSpec, seed: u64, stage: &str) -> Vec<Vec<TokenId>> {
    let mut rng = Rng::new(seed).spawn(stage);
    let n_obj = (spec.objects.end - spec.objects.start) as usize;
    (0..spec.subjects.len())
        .map(|_| {
            (0..spec.relations.len())
                .map(|_| spec.objects.start + rng.below(n_obj) as TokenId)
                .collect()
        })
        .collect()
}

/// Promptless sentences `subj rel obj` sampled from the relation table.
pub fn make_base_corpus(spec: &VocabSpec, seed: u64, size: usize) -> Vec<Pair> {
    let table = relation_table(spec, seed, "relation-table");
    let mut rng = Rng::new(seed).spawn("base-corpus");
    sample_sentences(spec, &table, &mut rng, size)
}

/// Fresh sentences from the same language, for perplexity measurement.
pub fn make_held_out(spec: &VocabSpec, seed: u64, size: usize) -> Vec<Pair> {
    let table = relation_table(spec, seed, "relation-table");
    let mut rng = Rng::new(seed).spawn("held-out");
    sample_sentences(spec, &table, &mut rng, size)
}

fn sample_sentences(
    spec: &VocabSpec,
    table: &[Vec<TokenId>],
    rng: &mut Rng,
    size: usize,
) -> Vec<Pair> {
    (0..size)
        .map(|_| {
            let s = rng.below(spec.subjects.len());
            let r = rng.below(spec.relations.len());
            let o = table[s][r];
            Pair::new(
                vec![],
                vec![spec.subjects.start + s as TokenId, spec.relations.start + r as TokenId, o],
            )
        })
        .collect()
}

/// Builds a downstream dataset of `size` pairs; the last [`EVAL_SPLIT`] are
/// the evaluation split.
pub fn make_downstream(
    spec: &VocabSpec,
    name: DownstreamName,
    seed: u64,
    size: usize,
) -> Result<DownstreamDataset> {
    if size <= EVAL_SPLIT {
        return Err(Error::InvalidArg(format!("size must exceed the {EVAL_SPLIT}-pair eval split")));
    }
    let pairs = match name {
        DownstreamName::General => general_pairs(spec, seed, size)?,
        DownstreamName::Math => math_pairs(spec, seed, size),
    };
    Ok(DownstreamDataset { name, pairs })
}

fn general_pairs(spec: &VocabSpec, seed: u64, size: usize) -> Result<Vec<Pair>> {
    if spec.instructions.len() < 5 {
        return Err(Error::InvalidArg("general dataset needs >= 5 instruction symbols".into()));
    }
    // Relation lookups use a table derived from the downstream seed, distinct
    // from the pretraining table, so fine-tuning has real knowledge to move.
    let table = relation_table(spec, seed, "downstream-table");
    let mut rng = Rng::new(seed).spawn("general");
    let instr = |k: usize| spec.instructions.start + k as TokenId;
    let obj = |rng: &mut Rng| spec.objects.start + rng.below(spec.objects.len()) as TokenId;

    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let mut pairs = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while pairs.len() < size {
        let template = rng.below(5);
        let (prompt, target) = match template {
            0 => {
                let x = obj(&mut rng);
                (vec![instr(0), x], vec![x])
            }
            1 => {
                let (x, y) = (obj(&mut rng), obj(&mut rng));
                (vec![instr(1), x, y], vec![x])
            }
            2 => {
                let (x, y) = (obj(&mut rng), obj(&mut rng));
                (vec![instr(2), x, y], vec![y])
            }
            3 => {
                let (x, y) = (obj(&mut rng), obj(&mut rng));
                (vec![instr(3), x, y], vec![y, x])
            }
            _ => {
                let s = rng.below(spec.subjects.len());
                let r = rng.below(spec.relations.len());
                (
                    vec![
                        instr(4),
                        spec.subjects.start + s as TokenId,
                        spec.relations.start + r as TokenId,
                    ],
                    vec![table[s][r]],
                )
            }
        };
        if seen.insert(prompt.clone()) {
            pairs.push(Pair::new(prompt, target));
            attempts = 0;
        } else {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::PoolExhausted { what: "general prompts".into() });
            }
        }
    }
    Ok(pairs)
}

fn math_pairs(spec: &VocabSpec, seed: u64, size: usize) -> Vec<Pair> {
    // All 200 single-digit two-operand combos. The eval split takes 128 of
    // them; training samples (with repetition) from the remaining 72, so the
    // splits are disjoint and eval accuracy measures generalization.
    let mut combos = Vec::with_capacity(200);
    for a in 0..10u32 {
        for b in 0..10u32 {
            combos.push((a, spec.op_plus, b, a + b));
            combos.push((a, spec.op_times, b, a * b));
        }
    }
    let mut rng = Rng::new(seed).spawn("math");
    rng.shuffle(&mut combos);
    let (eval_combos, train_combos) = combos.split_at(EVAL_SPLIT);

    let to_pair = |&(a, op, b, res): &(u32, TokenId, u32, u32)| {
        Pair::new(
            vec![spec.numbers.start + a, op, spec.numbers.start + b],
            vec![spec.numbers.start + res],
        )
    };

    let mut pairs: Vec<Pair> = (0..size - EVAL_SPLIT)
        .map(|_| to_pair(&train_combos[rng.below(train_combos.len())]))
        .collect();
    pairs.extend(eval_combos.iter().map(to_pair));
    pairs
}
