//! Cross-entropy training with Adam.
//!
//! `train` drives full-model or module-restricted optimization; the
//! lower-level pieces (Adam state, batch graph assembly) are shared with the
//! injectors and the downstream fine-tuning engine.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, NodeId, Rng, Tape};

use super::graph::{build_graph, pack_targets, GraphOpts, ModelGraph};
use super::state::ModelState;
use super::vocab::TokenId;
use super::{build_sequence, Pair};

pub(crate) const ADAM_BETA1: f64 = 0.9;
pub(crate) const ADAM_BETA2: f64 = 0.999;
pub(crate) const ADAM_EPS: f64 = 1e-8;

/// Which prediction positions contribute loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMask {
    All,
    TargetsOnly,
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss_mask: LossMask,
}

impl TrainOpts {
    pub fn new(steps: usize, lr: f64, batch: usize, seed: u64) -> Self {
        Self { steps, lr, batch, seed, loss_mask: LossMask::All }
    }
}

/// Adam with bias correction; moments are kept in f64 and updates applied
/// elementwise in f64, so steps are deterministic.
pub(crate) struct Adam {
    lr: f64,
    t: i32,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, t: 0, slots: BTreeMap::new() }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One parameter update; a missing gradient decays the moments as a zero
    /// gradient would.
    pub fn update(&mut self, key: &str, param: &Matrix, grad: Option<&[f64]>) -> Matrix {
        let n = param.numel();
        let (m, v) = self
            .slots
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let p = param.data()[i] as f64 - self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            out.push(p as f32);
        }
        Matrix::from_vec_unchecked(param.rows(), param.cols(), out)
    }
}

/// Builds the packed batch graph plus mean cross-entropy loss node.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    state: &ModelState,
    batch: &[(Vec<TokenId>, Vec<bool>)],
    opts: &GraphOpts,
) -> Result<(ModelGraph, NodeId, usize)> {
    let seqs: Vec<Vec<TokenId>> = batch.iter().map(|(s, _)| s.clone()).collect();
    let masks: Vec<Vec<bool>> = batch.iter().map(|(_, m)| m.clone()).collect();
    let graph = build_graph(tape, state, &seqs, opts)?;
    let (targets, mask, count) = pack_targets(&seqs, &masks);
    if count == 0 {
        return Err(Error::InvalidArg("batch has no loss positions".into()));
    }
    let ce = tape.cross_entropy_sum(graph.logits, targets, mask)?;
    let loss = tape.scale(ce, 1.0 / count as f64);
    Ok((graph, loss, count))
}

/// Parameters eligible for updates.
#[derive(Clone, Debug)]
pub(crate) enum TrainScope {
    Full,
    Modules(Vec<String>),
}

impl TrainScope {
    fn matches(&self, name: &str) -> bool {
        match self {
            TrainScope::Full => true,
            TrainScope::Modules(list) => list.iter().any(|m| m == name),
        }
    }
}

/// Adapter state plus optimizer for LoRA-style training: base weights stay
/// frozen, `B` starts at zero so the initial update is exactly zero, and the
/// merged form is `W + (alpha/rank) * B * A`.
pub(crate) struct LoraTrainer {
    pub adapters: BTreeMap<String, (Matrix, Matrix)>,
    pub rank: usize,
    pub alpha: f64,
    adam: Adam,
}

pub(crate) struct LoraStep {
    pub task_loss: f64,
    pub reg_value: f64,
}

/// Builds extra loss nodes from the adapter parameter nodes; returns the node
/// to add to the task loss and its current value.
pub(crate) type RegHook<'h> = &'h mut dyn FnMut(
    &mut Tape,
    &BTreeMap<String, (NodeId, NodeId)>,
    f64,
) -> crate::error::Result<Option<(NodeId, f64)>>;

impl LoraTrainer {
    pub fn new(
        state: &ModelState,
        targets: &[String],
        rank: usize,
        alpha: f64,
        lr: f64,
        rng: &mut Rng,
    ) -> crate::error::Result<Self> {
        let mut adapters = BTreeMap::new();
        for name in targets {
            let w = state.param(name)?;
            let (d_out, d_in) = w.shape();
            let a = Matrix::from_fn(rank, d_in, |_, _| (rng.normal_f32() as f64 * 0.02) as f32);
            let b = Matrix::zeros(d_out, rank);
            adapters.insert(name.clone(), (a, b));
        }
        Ok(Self { adapters, rank, alpha, adam: Adam::new(lr) })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// One optimizer step over the packed batch. `reg` may append a
    /// regularization node built from the adapter parameter nodes.
    pub fn step(
        &mut self,
        step_idx: usize,
        state: &ModelState,
        batch: &[(Vec<TokenId>, Vec<bool>)],
        mut reg: Option<RegHook>,
    ) -> crate::error::Result<LoraStep> {
        let mut tape = Tape::new();
        let spec = super::graph::LoraSpec {
            targets: self.adapters.clone(),
            scaling: self.scaling(),
            trainable: true,
        };
        let trainable = |_: &str| false;
        let opts = GraphOpts { trainable: &trainable, lora: Some(&spec), ..GraphOpts::inference() };
        let (graph, task_loss, _) = batch_loss(&mut tape, state, batch, &opts)?;
        let task_val = tape.value(task_loss).get(0, 0) as f64;

        let mut reg_value = 0.0;
        let mut total = task_loss;
        if let Some(hook) = reg.as_mut() {
            if let Some((reg_node, value)) =
                hook(&mut tape, &graph.lora_nodes, self.scaling())?
            {
                reg_value = value;
                total = tape.add(task_loss, reg_node)?;
            }
        }
        let total_val = tape.value(total).get(0, 0) as f64;
        if !total_val.is_finite() {
            return Err(Error::NanLoss { step: step_idx });
        }

        let grads = tape.backward(total)?;
        self.adam.begin_step();
        for (name, (a, b)) in self.adapters.iter_mut() {
            let (a_node, b_node) = graph.lora_nodes[name];
            let ga = grads.grad_f64(a_node)?;
            let gb = grads.grad_f64(b_node)?;
            *a = self.adam.update(&format!("lora.{name}.a"), a, ga.map(|v| v.as_slice()));
            *b = self.adam.update(&format!("lora.{name}.b"), b, gb.map(|v| v.as_slice()));
        }
        Ok(LoraStep { task_loss: task_val, reg_value })
    }

    /// Merges the adapters into a copy of the base state.
    pub fn merged(&self, base: &ModelState) -> crate::error::Result<ModelState> {
        merge_lora(base, &self.adapters, self.scaling())
    }
}

pub(crate) fn merge_lora(
    base: &ModelState,
    adapters: &BTreeMap<String, (Matrix, Matrix)>,
    scaling: f64,
) -> crate::error::Result<ModelState> {
    let mut out = base.clone();
    for (name, (a, b)) in adapters {
        let delta = crate::numeric::matmul(b, a)?.scale(scaling);
        let merged = base.param(name)?.add(&delta)?;
        out = out.with_param(name, merged)?;
    }
    Ok(out)
}

/// Trains a copy of the model on (prompt, target) pairs, returning the new
/// state and the per-step loss trace. The input model is untouched.
pub fn train(
    model: &ModelState,
    corpus: &[Pair],
    opts: &TrainOpts,
) -> Result<(ModelState, Vec<f64>)> {
    train_scoped(model, corpus, opts, &TrainScope::Full)
}

pub(crate) fn train_scoped(
    model: &ModelState,
    corpus: &[Pair],
    opts: &TrainOpts,
    scope: &TrainScope,
) -> Result<(ModelState, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArg("corpus is empty".into()));
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArg("steps must be >= 1".into()));
    }
    if opts.batch == 0 {
        return Err(Error::InvalidArg("batch must be >= 1".into()));
    }

    let mut rng = Rng::new(opts.seed);
    let mut state = model.clone();
    let mut adam = Adam::new(opts.lr);
    let mut trace = Vec::with_capacity(opts.steps);
    let built: Vec<(Vec<TokenId>, Vec<bool>)> =
        corpus.iter().map(|p| build_sequence(p, opts.loss_mask)).collect();

    for step in 0..opts.steps {
        let batch: Vec<(Vec<TokenId>, Vec<bool>)> =
            (0..opts.batch).map(|_| built[rng.below(built.len())].clone()).collect();

        let mut tape = Tape::new();
        let trainable = |name: &str| scope.matches(name);
        let graph_opts = GraphOpts { trainable: &trainable, ..GraphOpts::inference() };
        let (graph, loss, _) = batch_loss(&mut tape, &state, &batch, &graph_opts)?;
        let loss_val = tape.value(loss).get(0, 0) as f64;
        if !loss_val.is_finite() {
            return Err(Error::NanLoss { step });
        }
        trace.push(loss_val);

        let grads = tape.backward(loss)?;
        adam.begin_step();
        for (name, node) in &graph.params {
            if !scope.matches(name) {
                continue;
            }
            let g = grads.grad_f64(*node)?;
            let updated = adam.update(name, state.param(name)?, g.map(|v| v.as_slice()));
            state = state.with_param(name, updated)?;
        }
    }
    state.push_lineage("train", opts.seed);
    Ok((state, trace))
}
