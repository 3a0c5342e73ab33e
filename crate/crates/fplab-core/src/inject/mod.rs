//! Fingerprint injectors.
//!
//! Four mechanisms turn a base model into a fingerprinted one:
//! - [`inject_lora`]: adapter fine-tuning on attention Q/K of every layer
//! - [`inject_ftm`]: full-matrix fine-tuning of one late MLP down projection
//!   with the prompt masked out of the loss
//! - [`inject_closed_form`]: optimize target value vectors, then solve for a
//!   weight delta at one early-middle MLP down projection in closed form,
//!   optionally constrained away from regular-input activations
//! - [`inject_memory`]: train a shadow copy of the last MLP down projection
//!   and route between original and shadow by an activation statistic
//!
//! Every injector treats the input model as read-only and returns new state.

mod closed_form;
mod ftm;
mod lora;
mod memory;

pub use closed_form::{
    apply_closed_form_edit, capture_key_activations, capture_regular_activations,
    inject_closed_form, optimize_values, ClosedFormOptions, EditMode, EditRequest,
    ValueOptOptions,
};
pub use ftm::{inject_ftm, FtmOptions};
pub use lora::{inject_lora, ComposedLora, LoraAdapter, LoraOptions};
pub use memory::{inject_memory, MemoryAdapter, MemoryOptions, RoutedModel};

use std::collections::BTreeMap;

use crate::error::Result;
use crate::lm::LmConfig;
use crate::numeric::Matrix;

/// Per-module weight difference produced by a closed-form edit.
#[derive(Clone, Debug)]
pub struct EditDelta {
    pub module: String,
    pub delta: Matrix,
}

impl EditDelta {
    /// `V V^T / ||V||_F`, the cheap projector onto the edit's column space.
    pub fn fast_projector(&self) -> Result<Matrix> {
        let norm = crate::numeric::frobenius_norm(&self.delta);
        Ok(crate::numeric::matmul_nt(&self.delta, &self.delta)?.scale(1.0 / norm))
    }
}

/// Default edit site for closed-form edits: early-middle MLP down projection.
pub fn closed_form_site(config: &LmConfig) -> String {
    let idx = (config.layers as f64 / 3.0).ceil() as usize;
    format!("layers.{}.mlp.down", idx.min(config.layers - 1))
}

/// Default module for masked module fine-tuning: late MLP down projection.
pub fn ftm_site(config: &LmConfig) -> String {
    let idx = (0.75 * config.layers as f64).ceil() as usize;
    format!("layers.{}.mlp.down", idx.min(config.layers - 1))
}

/// Default module for the memory adapter: last-layer MLP down projection.
pub fn memory_site(config: &LmConfig) -> String {
    format!("layers.{}.mlp.down", config.layers - 1)
}

/// Writes auxiliary tensors (adapters, deltas) into the checkpoint container
/// format with kind "aux".
pub(crate) fn save_aux(
    path: &std::path::Path,
    tensors: &BTreeMap<String, Matrix>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    crate::lm::write_container(path, "aux", None, &[], extra, tensors)
}

pub(crate) fn load_aux(
    path: &std::path::Path,
) -> Result<(BTreeMap<String, Matrix>, BTreeMap<String, String>)> {
    let c = crate::lm::read_container(path)?;
    if c.header.kind != "aux" {
        return Err(crate::error::Error::CheckpointFormat(format!(
            "expected an aux container, found kind {:?}",
            c.header.kind
        )));
    }
    Ok((c.tensors, c.header.extra))
}
