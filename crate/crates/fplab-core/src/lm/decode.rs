//! Greedy decoding.

use crate::error::{Error, Result};

use super::forward::TextModel;
use super::vocab::{TokenId, BOS_ID, EOS_ID, SEP_ID};
use super::{Role, TokenSeq};

/// Greedy argmax decoding from `BOS prompt SEP`, stopping at EOS or after
/// `max_new` tokens. Ties break toward the lowest token id. The returned
/// sequence excludes the EOS.
pub fn greedy_decode<M: TextModel + ?Sized>(
    model: &M,
    prompt: &TokenSeq,
    max_new: usize,
) -> Result<TokenSeq> {
    let cfg = model.config();
    let prefix_len = prompt.len() + 2;
    if prefix_len + max_new > cfg.context_len {
        return Err(Error::SequenceTooLong {
            len: prefix_len + max_new,
            context_len: cfg.context_len,
        });
    }
    let mut ids = Vec::with_capacity(prefix_len + max_new);
    ids.push(BOS_ID);
    ids.extend_from_slice(&prompt.ids);
    ids.push(SEP_ID);

    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.forward_logits(&ids)?;
        let next = argmax_lowest(logits.row(logits.rows() - 1));
        if next == EOS_ID {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(TokenSeq { ids: out, role: Role::Target })
}

fn argmax_lowest(row: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best as TokenId
}
