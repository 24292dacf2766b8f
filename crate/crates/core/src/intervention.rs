// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream interventions, greedy generation and cross-entropy.
//!
//! Generation edits only the last position at each decoding step.
//! Cross-entropy evaluation edits every position.

use std::sync::{Arc, Mutex};

use crate::activations::{HookPositions, ModelBackend, ResidualHook};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::numerics::{axpy, dot, Matrix};
use crate::sae::SaeParams;
use crate::steering::{gated_gate, SteeringVector, VectorMode};
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionMode {
    None,
    Add,
    Replace,
    GatedAdd,
    Ablate,
}

impl InterventionMode {
    fn name(self) -> &'static str {
        match self {
            InterventionMode::None => "none",
            InterventionMode::Add => "add",
            InterventionMode::Replace => "replace",
            InterventionMode::GatedAdd => "gated_add",
            InterventionMode::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterventionSpec {
    pub mode: InterventionMode,
    pub layer: usize,
    pub alpha: f64,
    pub vector: Option<SteeringVector>,
    pub ablate_dirs: Vec<Vec<f64>>,
    pub gate_features: Option<(usize, usize)>,
    pub gate_sae: Option<Arc<SaeParams>>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self {
            mode: InterventionMode::None,
            layer: 0,
            alpha: 0.0,
            vector: None,
            ablate_dirs: Vec::new(),
            gate_features: None,
            gate_sae: None,
        }
    }

    /// Add or replace, following the vector's mode, at the vector's layer.
    pub fn steer(vector: SteeringVector, alpha: f64) -> Self {
        let mode = match vector.mode {
            VectorMode::Add => InterventionMode::Add,
            VectorMode::Replace => InterventionMode::Replace,
        };
        Self {
            mode,
            layer: vector.layer,
            alpha,
            vector: Some(vector),
            ..Self::none()
        }
    }

    pub fn gated_add(
        vector: SteeringVector,
        alpha: f64,
        gate_sae: Arc<SaeParams>,
        gate_features: (usize, usize),
    ) -> Self {
        Self {
            mode: InterventionMode::GatedAdd,
            layer: vector.layer,
            alpha,
            vector: Some(vector),
            gate_features: Some(gate_features),
            gate_sae: Some(gate_sae),
            ..Self::none()
        }
    }

    pub fn ablate(layer: usize, dirs: Vec<Vec<f64>>) -> Self {
        Self {
            mode: InterventionMode::Ablate,
            layer,
            ablate_dirs: dirs,
            ..Self::none()
        }
    }

    fn missing(&self, field: &'static str) -> Error {
        Error::MissingField {
            mode: self.mode.name(),
            field,
        }
    }

    pub fn validate(&self, d_res: usize) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::NonFinite("alpha"));
        }
        match self.mode {
            InterventionMode::None => {}
            InterventionMode::Add | InterventionMode::Replace | InterventionMode::GatedAdd => {
                let v = self.vector.as_ref().ok_or_else(|| self.missing("vector"))?;
                Error::check_dim(d_res, v.d_res())?;
                let want = if self.mode == InterventionMode::Replace {
                    VectorMode::Replace
                } else {
                    VectorMode::Add
                };
                if v.mode != want {
                    return Err(Error::invalid(format!(
                        "{} intervention needs a {}-mode vector",
                        self.mode.name(),
                        want.as_str()
                    )));
                }
                if self.mode == InterventionMode::GatedAdd {
                    let sae = self.gate_sae.as_ref().ok_or_else(|| self.missing("gate_sae"))?;
                    let (a, b) = self.gate_features.ok_or_else(|| self.missing("gate_features"))?;
                    Error::check_dim(d_res, sae.d_res())?;
                    for j in [a, b] {
                        if j >= sae.d_sae() {
                            return Err(Error::IndexOutOfRange {
                                index: j,
                                len: sae.d_sae(),
                            });
                        }
                    }
                }
            }
            InterventionMode::Ablate => {
                for d in &self.ablate_dirs {
                    Error::check_dim(d_res, d.len())?;
                    if dot(d, d) == 0.0 {
                        return Err(Error::ZeroDirection);
                    }
                }
            }
        }
        Ok(())
    }

    /// Edit `x` in place. Returns whether the gate fired for gated mode.
    pub fn apply_in_place(&self, x: &mut [f64]) -> Result<Option<bool>> {
        match self.mode {
            InterventionMode::None => Ok(None),
            InterventionMode::Add => {
                let v = self.vector.as_ref().ok_or_else(|| self.missing("vector"))?;
                Error::check_dim(x.len(), v.d_res())?;
                axpy(self.alpha, &v.values, x);
                Ok(None)
            }
            InterventionMode::Replace => {
                let v = self.vector.as_ref().ok_or_else(|| self.missing("vector"))?;
                Error::check_dim(x.len(), v.d_res())?;
                for (&d, &val) in v.dims.iter().zip(&v.replace_values) {
                    x[d] = self.alpha * val;
                }
                Ok(None)
            }
            InterventionMode::GatedAdd => {
                let v = self.vector.as_ref().ok_or_else(|| self.missing("vector"))?;
                let sae = self.gate_sae.as_ref().ok_or_else(|| self.missing("gate_sae"))?;
                let pair = self.gate_features.ok_or_else(|| self.missing("gate_features"))?;
                Error::check_dim(x.len(), v.d_res())?;
                let fired = gated_gate(&sae.encode(x)?, pair);
                if fired {
                    axpy(self.alpha, &v.values, x);
                }
                Ok(Some(fired))
            }
            InterventionMode::Ablate => {
                let out = sequential_ablation(x, &self.ablate_dirs)?;
                x.copy_from_slice(&out);
                Ok(None)
            }
        }
    }
}

/// `spec` applied to a copy of `x`.
pub fn apply(x: &[f64], spec: &InterventionSpec) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    spec.apply_in_place(&mut out)?;
    Ok(out)
}

/// Project out each direction in turn.
pub fn sequential_ablation(x: &[f64], dirs: &[Vec<f64>]) -> Result<Vec<f64>> {
    dirs.iter()
        .try_fold(x.to_vec(), |acc, d| crate::numerics::project_out(&acc, d))
}

/// Adapter running an [`InterventionSpec`] as a backend hook.
pub struct SpecHook<'a> {
    spec: &'a InterventionSpec,
    positions: HookPositions,
    gate_log: Mutex<Vec<bool>>,
}

impl<'a> SpecHook<'a> {
    pub fn new(spec: &'a InterventionSpec, positions: HookPositions) -> Self {
        Self {
            spec,
            positions,
            gate_log: Mutex::new(Vec::new()),
        }
    }

    pub fn take_gate_log(&self) -> Vec<bool> {
        std::mem::take(&mut *self.gate_log.lock().expect("gate log poisoned"))
    }
}

impl ResidualHook for SpecHook<'_> {
    fn layer(&self) -> usize {
        self.spec.layer
    }

    fn positions(&self) -> HookPositions {
        self.positions
    }

    fn apply(&self, _position: usize, x: &mut [f64]) -> Result<()> {
        if let Some(fired) = self.spec.apply_in_place(x)? {
            self.gate_log.lock().expect("gate log poisoned").push(fired);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: TokenSequence,
    pub per_step_gate_fired: Option<Vec<bool>>,
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn check_layer(backend: &dyn ModelBackend, spec: &InterventionSpec) -> Result<()> {
    spec.validate(backend.d_res())?;
    if spec.mode != InterventionMode::None && spec.layer >= backend.num_layers() {
        return Err(Error::IndexOutOfRange {
            index: spec.layer,
            len: backend.num_layers(),
        });
    }
    Ok(())
}

/// Greedy decoding of `steps` tokens, editing the last position each step.
pub fn generate(
    backend: &dyn ModelBackend,
    prompt: &TokenSequence,
    steps: usize,
    spec: &InterventionSpec,
) -> Result<GenerationResult> {
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if prompt.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_layer(backend, spec)?;
    let hook = SpecHook::new(spec, HookPositions::Last);
    let hook_ref: Option<&dyn ResidualHook> = match spec.mode {
        InterventionMode::None => None,
        _ => Some(&hook),
    };
    let mut ctx = prompt.ids.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = backend.next_token_logits(&ctx, hook_ref)?;
        let next = argmax(&logits);
        ctx.push(next);
        out.push(next);
    }
    let gates = (spec.mode == InterventionMode::GatedAdd).then(|| hook.take_gate_log());
    Ok(GenerationResult {
        tokens: TokenSequence::new(out),
        per_step_gate_fired: gates,
    })
}

/// Greedy generations for many prompts, each with its own step count.
pub fn generate_batch(
    backend: &dyn ModelBackend,
    prompts: &[TokenSequence],
    steps: &[usize],
    spec: &InterventionSpec,
    exec: Execution,
) -> Result<Vec<GenerationResult>> {
    Error::check_dim(prompts.len(), steps.len())?;
    exec::try_map_range(exec, prompts.len(), |i| {
        generate(backend, &prompts[i], steps[i], spec)
    })
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Summed next-token loss and the number of scored positions.
fn sequence_loss(logits: &Matrix, ids: &[usize]) -> (f64, usize) {
    let mut total = 0.0;
    for t in 0..ids.len() - 1 {
        total -= log_softmax_at(logits.row(t), ids[t + 1]);
    }
    (total, ids.len() - 1)
}

/// Mean next-token cross-entropy (nats/token) with `spec` applied at every position.
pub fn ce_loss(
    backend: &dyn ModelBackend,
    sequences: &[TokenSequence],
    spec: &InterventionSpec,
    exec: Execution,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_layer(backend, spec)?;
    let v = backend.vocab().size();
    if let Some(&bad) = sequences.iter().flat_map(|s| &s.ids).find(|&&t| t >= v) {
        return Err(Error::IndexOutOfRange { index: bad, len: v });
    }
    let short = sequences.iter().filter(|s| s.len() < 2).count();
    if short > 0 {
        log::warn!("skipping {short} sequence(s) shorter than two tokens");
    }
    let parts = exec::try_map_range(exec, sequences.len(), |i| -> Result<(f64, usize)> {
        let ids = &sequences[i].ids;
        if ids.len() < 2 {
            return Ok((0.0, 0));
        }
        let hook = SpecHook::new(spec, HookPositions::All);
        let hook_ref: Option<&dyn ResidualHook> = match spec.mode {
            InterventionMode::None => None,
            _ => Some(&hook),
        };
        let logits = backend.logits(ids, hook_ref)?;
        Ok(sequence_loss(&logits, ids))
    })?;
    let (sum, count) = parts
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (ps, pc)| (s + ps, c + pc));
    if count == 0 {
        return Err(Error::NothingToScore);
    }
    Ok(sum / count as f64)
}
