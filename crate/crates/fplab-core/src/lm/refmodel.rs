//! f64 reference forward pass mirroring `graph::build_graph`, used as the
//! finite-difference oracle for full-model gradient checks.

use std::collections::BTreeMap;

use crate::numeric::reference as r;

use super::graph::position_encoding;
use super::state::LmConfig;
use super::vocab::TokenId;

pub(crate) type RefParams = BTreeMap<String, r::M64>;

/// Mean masked cross entropy of the packed batch, computed entirely in f64.
pub(crate) fn reference_batch_loss(
    cfg: &LmConfig,
    params: &RefParams,
    seqs: &[Vec<TokenId>],
    masks: &[Vec<bool>],
) -> f64 {
    let mut spans = Vec::new();
    let mut packed = Vec::new();
    let mut positions = Vec::new();
    for s in seqs {
        spans.push((packed.len(), s.len()));
        packed.extend_from_slice(s);
        positions.extend(0..s.len());
    }

    let pos = position_encoding(cfg.model_dim, &positions);
    let pos = r::M64::from_matrix(&pos);
    let mut x = r::gather_rows(&params["embedding"], &packed);
    x = r::zip(&x, &pos, |a, b| a + b);

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in 0..cfg.layers {
        let normed = r::rmsnorm(&x);
        let q = r::mm_nt(&normed, &params[&format!("layers.{layer}.attn.q")]);
        let k = r::mm_nt(&normed, &params[&format!("layers.{layer}.attn.k")]);
        let v = r::mm_nt(&normed, &params[&format!("layers.{layer}.attn.v")]);

        let mut seq_outs = Vec::new();
        for &(off, len) in &spans {
            let qs = r::slice_rows(&q, off, len);
            let ks = r::slice_rows(&k, off, len);
            let vs = r::slice_rows(&v, off, len);
            let mut heads = Vec::new();
            for h in 0..cfg.heads {
                let qh = r::slice_cols(&qs, h * head_dim, head_dim);
                let kh = r::slice_cols(&ks, h * head_dim, head_dim);
                let vh = r::slice_cols(&vs, h * head_dim, head_dim);
                let scores = r::map(&r::mm_nt(&qh, &kh), |s| s * scale);
                let probs = r::causal_softmax(&scores);
                heads.push(r::mm(&probs, &vh));
            }
            let head_refs: Vec<&r::M64> = heads.iter().collect();
            seq_outs.push(r::concat_cols(&head_refs));
        }
        let seq_refs: Vec<&r::M64> = seq_outs.iter().collect();
        let attn = r::concat_rows(&seq_refs);
        let proj = r::mm_nt(&attn, &params[&format!("layers.{layer}.attn.o")]);
        x = r::zip(&x, &proj, |a, b| a + b);

        let normed = r::rmsnorm(&x);
        let up = r::mm_nt(&normed, &params[&format!("layers.{layer}.mlp.up")]);
        let act = r::gelu(&up);
        let down = r::mm_nt(&act, &params[&format!("layers.{layer}.mlp.down")]);
        x = r::zip(&x, &down, |a, b| a + b);
    }

    let normed = r::rmsnorm(&x);
    let scaled = r::mul_row_broadcast(&normed, &params["final_norm"]);
    let logits = r::mm_nt(&scaled, &params["unembedding"]);

    let total: usize = seqs.iter().map(Vec::len).sum();
    let mut targets = vec![0u32; total];
    let mut mask = vec![false; total];
    let mut count = 0usize;
    let mut off = 0usize;
    for (s, m) in seqs.iter().zip(masks) {
        for t in 0..s.len() - 1 {
            targets[off + t] = s[t + 1];
            mask[off + t] = m[t];
            count += usize::from(m[t]);
        }
        off += s.len();
    }
    r::cross_entropy_sum(&logits, &targets, &mask) / count as f64
}
