//! Success rates, perplexity, and downstream accuracy.

use crate::corpus::{DownstreamDataset, FingerprintPair};
use crate::error::{Error, Result};
use crate::lm::{greedy_decode, Pair, TextModel, TokenId, BOS_ID, EOS_ID};

/// Fingerprint success rate in percent: the share of pairs whose greedy
/// decode (before EOS) exactly equals the decryption sequence.
pub fn fsr<M: TextModel + ?Sized>(model: &M, pairs: &[FingerprintPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("fsr requires at least one pair".into()));
    }
    let mut hits = 0usize;
    for p in pairs {
        let decoded = greedy_decode(model, &p.key, p.decryption.len() + 1)?;
        if decoded.ids == p.decryption.ids {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Token-level success rate in [0, 1]: per pair, the fraction of decryption
/// positions whose decoded token matches; positions the decode never reached
/// count as mismatches.
pub fn fsr_star<M: TextModel + ?Sized>(model: &M, pairs: &[FingerprintPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("fsr_star requires at least one pair".into()));
    }
    let mut total = 0.0f64;
    for p in pairs {
        let decoded = greedy_decode(model, &p.key, p.decryption.len() + 1)?;
        let y = &p.decryption.ids;
        let upto = decoded.ids.len().min(y.len());
        let matches = (0..upto).filter(|&t| decoded.ids[t] == y[t]).count();
        total += matches as f64 / y.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// exp of the mean token-level cross entropy (nats) over all prediction
/// positions of the held-out sentences.
pub fn perplexity<M: TextModel + ?Sized>(model: &M, corpus: &[Pair]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArg("perplexity requires a nonempty corpus".into()));
    }
    let mut nats = 0.0f64;
    let mut count = 0usize;
    for pair in corpus {
        let mut ids: Vec<TokenId> = Vec::with_capacity(pair.target.len() + 2);
        ids.push(BOS_ID);
        ids.extend_from_slice(&pair.target.ids);
        ids.push(EOS_ID);
        let logits = model.forward_logits(&ids)?;
        for t in 0..ids.len() - 1 {
            let row = logits.row(t);
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                mx = mx.max(v as f64);
            }
            let mut acc = 0.0f64;
            for &v in row {
                acc += ((v as f64) - mx).exp();
            }
            nats += mx + acc.ln() - row[ids[t + 1] as usize] as f64;
            count += 1;
        }
    }
    Ok((nats / count as f64).exp())
}

/// Exact-match accuracy in percent over the dataset's evaluation split.
pub fn downstream_accuracy<M: TextModel + ?Sized>(
    model: &M,
    data: &DownstreamDataset,
) -> Result<f64> {
    let eval = data.eval();
    if eval.is_empty() {
        return Err(Error::InvalidArg("downstream eval split is empty".into()));
    }
    let mut hits = 0usize;
    for pair in eval {
        let decoded = greedy_decode(model, &pair.prompt, pair.target.len() + 1)?;
        if decoded.ids == pair.target.ids {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / eval.len() as f64)
}
