//! Builds the transformer computation graph on a [`Tape`].
//!
//! One builder serves both inference and training: parameters enter the tape
//! as constants or trainables according to `GraphOpts::trainable`, and every
//! hook (adapter composition, module replacement, output substitution,
//! memory routing, activation capture) attaches to the same graph, so the
//! two paths cannot drift apart numerically.
//!
//! Batches are packed: all sequences concatenate row-wise for the linear
//! layers, while attention operates per sequence on row slices.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{matmul_nt, Matrix, NodeId, Tape};

use super::state::ModelState;
use super::vocab::TokenId;

/// LoRA adapters composed onto target modules during the forward pass.
pub(crate) struct LoraSpec {
    /// module name -> (A: r x d_in, B: d_out x r)
    pub targets: BTreeMap<String, (Matrix, Matrix)>,
    /// alpha / rank
    pub scaling: f64,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReplaceRows {
    All,
    /// The first position of each sequence keeps the original weight; used
    /// so shadow-module training matches routed inference, where a BOS
    /// activation is indistinguishable across inputs.
    SkipFirstPerSeq,
}

/// Replaces one module's weight with a shadow matrix (optionally trainable).
pub(crate) struct ReplaceSpec {
    pub module: String,
    pub weight: Matrix,
    pub trainable: bool,
    pub rows: ReplaceRows,
}

/// Substitutes one row of a module's output with a trainable vector.
pub(crate) struct SubstituteSpec {
    pub module: String,
    pub packed_row: usize,
    pub value: Matrix,
    pub trainable: bool,
}

/// Score-based routing between a module's original and shadow weights.
pub(crate) struct MemoryRouteSpec {
    pub module: String,
    pub w_mem: Matrix,
    pub tau: f64,
    pub enabled: bool,
}

pub(crate) struct GraphOpts<'a> {
    pub trainable: &'a dyn Fn(&str) -> bool,
    pub lora: Option<&'a LoraSpec>,
    pub replace: Option<&'a ReplaceSpec>,
    pub substitute: Option<&'a SubstituteSpec>,
    pub memory: Option<&'a MemoryRouteSpec>,
    pub capture_layer: Option<usize>,
    pub capture_module: Option<&'a str>,
}

impl<'a> GraphOpts<'a> {
    pub fn inference() -> Self {
        const NONE: fn(&str) -> bool = |_| false;
        GraphOpts {
            trainable: &NONE,
            lora: None,
            replace: None,
            substitute: None,
            memory: None,
            capture_layer: None,
            capture_module: None,
        }
    }
}

pub(crate) struct ModelGraph {
    pub params: BTreeMap<String, NodeId>,
    pub lora_nodes: BTreeMap<String, (NodeId, NodeId)>,
    pub replace_node: Option<NodeId>,
    pub substitute_node: Option<NodeId>,
    pub logits: NodeId,
    pub hidden_capture: Option<NodeId>,
    /// (module input, module output) when `capture_module` was requested.
    pub module_capture: Option<(NodeId, NodeId)>,
    /// (offset, len) of each sequence in packed rows.
    pub spans: Vec<(usize, usize)>,
}

/// Sinusoidal position encodings for the given positions.
pub(crate) fn position_encoding(dim: usize, positions: &[usize]) -> Matrix {
    Matrix::from_fn(positions.len(), dim, |r, j| {
        let p = positions[r] as f64;
        let pair = (j / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = p * freq;
        if j % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}

struct LinearCtx<'a, 'b> {
    opts: &'a GraphOpts<'b>,
    spans: &'a [(usize, usize)],
    lora_nodes: BTreeMap<String, (NodeId, NodeId)>,
    replace_node: Option<NodeId>,
    substitute_node: Option<NodeId>,
    module_capture: Option<(NodeId, NodeId)>,
}

impl LinearCtx<'_, '_> {
    fn apply(
        &mut self,
        tape: &mut Tape,
        name: &str,
        x: NodeId,
        w_node: NodeId,
        w_value: &Matrix,
    ) -> Result<NodeId> {
        let mut out = match self.opts.replace {
            Some(spec) if spec.module == name => {
                let shadow = if spec.trainable {
                    tape.param(spec.weight.clone())
                } else {
                    tape.leaf(spec.weight.clone())
                };
                self.replace_node = Some(shadow);
                let replaced = tape.matmul_nt(x, shadow)?;
                match spec.rows {
                    ReplaceRows::All => replaced,
                    ReplaceRows::SkipFirstPerSeq => {
                        let original = tape.matmul_nt(x, w_node)?;
                        let take_b = self.non_first_rows(tape.value(x).rows());
                        tape.row_blend(original, replaced, Arc::new(take_b))?
                    }
                }
            }
            _ => tape.matmul_nt(x, w_node)?,
        };

        if let Some(lora) = self.opts.lora {
            if let Some((a, b)) = lora.targets.get(name) {
                let (a_node, b_node) = if lora.trainable {
                    (tape.param(a.clone()), tape.param(b.clone()))
                } else {
                    (tape.leaf(a.clone()), tape.leaf(b.clone()))
                };
                self.lora_nodes.insert(name.to_string(), (a_node, b_node));
                let xa = tape.matmul_nt(x, a_node)?;
                let xab = tape.matmul_nt(xa, b_node)?;
                let scaled = tape.scale(xab, lora.scaling);
                out = tape.add(out, scaled)?;
            }
        }

        if let Some(mem) = self.opts.memory {
            if mem.enabled && mem.module == name {
                let delta = mem.w_mem.sub(w_value)?;
                let x_val = tape.value(x).clone();
                let scores = matmul_nt(&x_val, &delta)?;
                let mut take_b = Vec::with_capacity(scores.rows());
                for i in 0..scores.rows() {
                    let mut acc = 0.0f64;
                    for &v in scores.row(i) {
                        acc += v as f64 * v as f64;
                    }
                    take_b.push(acc.sqrt() > mem.tau);
                }
                for &(off, _) in self.spans {
                    take_b[off] = false;
                }
                let mem_node = tape.leaf(mem.w_mem.clone());
                let routed = tape.matmul_nt(x, mem_node)?;
                out = tape.row_blend(out, routed, Arc::new(take_b))?;
            }
        }

        if let Some(spec) = self.opts.substitute {
            if spec.module == name {
                let v_node = if spec.trainable {
                    tape.param(spec.value.clone())
                } else {
                    tape.leaf(spec.value.clone())
                };
                self.substitute_node = Some(v_node);
                out = tape.substitute_row(out, spec.packed_row, v_node)?;
            }
        }

        if self.opts.capture_module == Some(name) {
            self.module_capture = Some((x, out));
        }
        Ok(out)
    }

    fn non_first_rows(&self, total: usize) -> Vec<bool> {
        let mut take = vec![true; total];
        for &(off, _) in self.spans {
            take[off] = false;
        }
        take
    }
}

pub(crate) fn build_graph(
    tape: &mut Tape,
    state: &ModelState,
    seqs: &[Vec<TokenId>],
    opts: &GraphOpts,
) -> Result<ModelGraph> {
    let cfg = state.config();
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArg("forward requires nonempty sequences".into()));
    }
    for s in seqs {
        if s.len() > cfg.context_len {
            return Err(Error::SequenceTooLong { len: s.len(), context_len: cfg.context_len });
        }
        if let Some(&bad) = s.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::InvalidArg(format!("token id {bad} out of vocab range")));
        }
    }
    if let Some(l) = opts.capture_layer {
        if l >= cfg.layers {
            return Err(Error::InvalidArg(format!("capture layer {l} out of range")));
        }
    }

    let mut spans = Vec::with_capacity(seqs.len());
    let mut packed: Vec<TokenId> = Vec::new();
    let mut positions: Vec<usize> = Vec::new();
    for s in seqs {
        spans.push((packed.len(), s.len()));
        packed.extend_from_slice(s);
        positions.extend(0..s.len());
    }

    // Named parameters enter the tape in name order.
    let mut params = BTreeMap::new();
    for (name, value) in state.params() {
        let id = if (opts.trainable)(name) {
            tape.param(value.clone())
        } else {
            tape.leaf(value.clone())
        };
        params.insert(name.clone(), id);
    }

    let mut ctx = LinearCtx {
        opts,
        spans: &spans,
        lora_nodes: BTreeMap::new(),
        replace_node: None,
        substitute_node: None,
        module_capture: None,
    };

    let emb = params["embedding"];
    let mut x = tape.gather_rows(emb, Arc::new(packed));
    let pos = tape.leaf(position_encoding(cfg.model_dim, &positions));
    x = tape.add(x, pos)?;

    let head_dim = cfg.head_dim();
    let attn_scale = 1.0 / (head_dim as f64).sqrt();
    let mut hidden_capture = None;

    for layer in 0..cfg.layers {
        // Attention sublayer.
        let normed = tape.rmsnorm(x);
        let proj = |tape: &mut Tape, ctx: &mut LinearCtx, which: &str| -> Result<NodeId> {
            let name = format!("layers.{layer}.attn.{which}");
            let w = params[&name];
            let w_value = state.param(&name)?.clone();
            ctx.apply(tape, &name, normed, w, &w_value)
        };
        let q = proj(tape, &mut ctx, "q")?;
        let k = proj(tape, &mut ctx, "k")?;
        let v = proj(tape, &mut ctx, "v")?;

        let mut seq_outputs = Vec::with_capacity(spans.len());
        for &(off, len) in &spans {
            let qs = tape.slice_rows(q, off, len);
            let ks = tape.slice_rows(k, off, len);
            let vs = tape.slice_rows(v, off, len);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(qs, h * head_dim, head_dim);
                let kh = tape.slice_cols(ks, h * head_dim, head_dim);
                let vh = tape.slice_cols(vs, h * head_dim, head_dim);
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, attn_scale);
                let probs = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            seq_outputs.push(tape.concat_cols(&heads)?);
        }
        let attn = tape.concat_rows(&seq_outputs)?;
        let o_name = format!("layers.{layer}.attn.o");
        let o_w = params[&o_name];
        let o_val = state.param(&o_name)?.clone();
        let attn_proj = ctx.apply(tape, &o_name, attn, o_w, &o_val)?;
        x = tape.add(x, attn_proj)?;

        // MLP sublayer.
        let normed = tape.rmsnorm(x);
        let up_name = format!("layers.{layer}.mlp.up");
        let up_w = params[&up_name];
        let up_val = state.param(&up_name)?.clone();
        let up = ctx.apply(tape, &up_name, normed, up_w, &up_val)?;
        let act = tape.gelu(up);
        let down_name = format!("layers.{layer}.mlp.down");
        let down_w = params[&down_name];
        let down_val = state.param(&down_name)?.clone();
        let down = ctx.apply(tape, &down_name, act, down_w, &down_val)?;
        x = tape.add(x, down)?;

        if opts.capture_layer == Some(layer) {
            hidden_capture = Some(x);
        }
    }

    let normed = tape.rmsnorm(x);
    let scaled = tape.mul_row_broadcast(normed, params["final_norm"])?;
    let logits = tape.matmul_nt(scaled, params["unembedding"])?;

    Ok(ModelGraph {
        params,
        lora_nodes: ctx.lora_nodes,
        replace_node: ctx.replace_node,
        substitute_node: ctx.substitute_node,
        logits,
        hidden_capture,
        module_capture: ctx.module_capture,
        spans,
    })
}

/// Packs per-sequence prediction targets and masks to match packed logit
/// rows; the final row of each sequence predicts nothing and is masked out.
pub(crate) fn pack_targets(
    seqs: &[Vec<TokenId>],
    masks: &[Vec<bool>],
) -> (Arc<Vec<u32>>, Arc<Vec<bool>>, usize) {
    let total: usize = seqs.iter().map(Vec::len).sum();
    let mut targets = vec![0u32; total];
    let mut mask = vec![false; total];
    let mut off = 0;
    let mut count = 0;
    for (s, m) in seqs.iter().zip(masks) {
        debug_assert_eq!(m.len(), s.len() - 1);
        for t in 0..s.len() - 1 {
            targets[off + t] = s[t + 1];
            mask[off + t] = m[t];
            count += usize::from(m[t]);
        }
        off += s.len();
    }
    (Arc::new(targets), Arc::new(mask), count)
}
