// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use langfir::activations::{HookPositions, ModelBackend, ResidualHook};
use langfir::analysis::ablation_ce;
use langfir::error::{Error, Result};
use langfir::exec::Execution;
use langfir::experiment::{Pipeline, TaskConfig};
use langfir::features::IdentificationConfig;
use langfir::intervention::{ce_loss, generate, sequential_ablation, InterventionSpec};
use langfir::numerics::{dot, Matrix};
use langfir::steering::SteeringVector;
use langfir::tokens::{TokenSequence, VocabSpec};
use langfir::world::{PlantedWorld, WorldConfig};
use proptest::prelude::*;

/// One-hot residuals of width `d`; logits are the residual padded to `V`.
struct Toy {
    vocab: VocabSpec,
    d: usize,
    uniform: bool,
    edited: AtomicUsize,
    seen: Mutex<Vec<HookPositions>>,
}

impl Toy {
    fn new(v: usize, d: usize, uniform: bool) -> Self {
        Self {
            vocab: VocabSpec::new(v, []).unwrap(),
            d,
            uniform,
            edited: AtomicUsize::new(0),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl ModelBackend for Toy {
    fn num_layers(&self) -> usize {
        2
    }

    fn d_res(&self) -> usize {
        self.d
    }

    fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    fn residual_at_layer(&self, tokens: &[usize], _layer: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(tokens.len(), self.d);
        for (t, &id) in tokens.iter().enumerate() {
            m.row_mut(t)[id % self.d] = 1.0;
        }
        Ok(m)
    }

    fn logits(&self, tokens: &[usize], hook: Option<&dyn ResidualHook>) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut x = self.residual_at_layer(tokens, 0)?;
        if let Some(h) = hook {
            self.seen.lock().unwrap().push(h.positions());
            let rows: Vec<usize> = match h.positions() {
                HookPositions::All => (0..tokens.len()).collect(),
                HookPositions::Last => vec![tokens.len() - 1],
            };
            for t in rows {
                h.apply(t, x.row_mut(t))?;
                self.edited.fetch_add(1, Ordering::Relaxed);
            }
        }
        let v = self.vocab.size();
        let mut out = Matrix::zeros(tokens.len(), v);
        if !self.uniform {
            for t in 0..tokens.len() {
                out.row_mut(t)[..self.d].copy_from_slice(x.row(t));
            }
        }
        Ok(out)
    }
}

fn seqs_in(v: usize, lens: &[usize]) -> Vec<TokenSequence> {
    lens.iter()
        .enumerate()
        .map(|(i, &n)| TokenSequence::new((0..n).map(|t| (i + 3 * t) % v).collect()))
        .collect()
}

fn seqs(lens: &[usize]) -> Vec<TokenSequence> {
    seqs_in(7, lens)
}

fn steer(d: usize, alpha: f64) -> InterventionSpec {
    let mut v = vec![0.0; d];
    v[1] = 1.0;
    InterventionSpec::steer(SteeringVector::add("t", v, 0).unwrap(), alpha)
}

#[test]
fn uniform_logits_give_log_vocab() {
    for v in [2, 7, 1024] {
        let toy = Toy::new(v, 2, true);
        let ce = ce_loss(&toy, &seqs_in(v, &[5, 3, 9]), &InterventionSpec::none(), Execution::Sequential).unwrap();
        assert!((ce - (v as f64).ln()).abs() < 1e-12, "{v}: {ce}");
    }
}

#[test]
fn hooks_edit_all_positions_for_loss_and_last_for_generation() {
    let toy = Toy::new(8, 4, false);
    let spec = steer(4, 1.0);
    ce_loss(&toy, &seqs(&[5, 3, 9]), &spec, Execution::Sequential).unwrap();
    assert_eq!(toy.edited.swap(0, Ordering::Relaxed), 17);
    assert!(toy.seen.lock().unwrap().drain(..).all(|p| p == HookPositions::All));

    generate(&toy, &TokenSequence::new(vec![0, 2, 3]), 6, &spec).unwrap();
    assert_eq!(toy.edited.load(Ordering::Relaxed), 6);
    assert!(toy.seen.lock().unwrap().iter().all(|&p| p == HookPositions::Last));

    // The unsteered path never builds a hook.
    toy.seen.lock().unwrap().clear();
    generate(&toy, &TokenSequence::new(vec![0]), 3, &InterventionSpec::none()).unwrap();
    assert!(toy.seen.lock().unwrap().is_empty());
}

#[test]
fn identity_interventions_leave_loss_unchanged() {
    let toy = Toy::new(8, 4, false);
    let s = seqs(&[6, 4, 7, 2]);
    let base = ce_loss(&toy, &s, &InterventionSpec::none(), Execution::Sequential).unwrap();
    assert_eq!(ce_loss(&toy, &s, &InterventionSpec::none(), Execution::Sequential).unwrap() - base, 0.0);
    assert_eq!(ce_loss(&toy, &s, &InterventionSpec::ablate(0, vec![]), Execution::Sequential).unwrap(), base);
    assert_eq!(ce_loss(&toy, &s, &steer(4, 0.0), Execution::Sequential).unwrap(), base);
    assert_ne!(ce_loss(&toy, &s, &steer(4, 3.0), Execution::Sequential).unwrap(), base);
}

#[test]
fn short_sequences_are_skipped() {
    let toy = Toy::new(8, 4, false);
    let none = InterventionSpec::none();
    let long = seqs(&[6, 4]);
    let mut mixed = long.clone();
    mixed.insert(1, TokenSequence::new(vec![3]));
    let a = ce_loss(&toy, &long, &none, Execution::Sequential).unwrap();
    let b = ce_loss(&toy, &mixed, &none, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    let short = vec![TokenSequence::new(vec![1]), TokenSequence::new(vec![2])];
    assert!(matches!(ce_loss(&toy, &short, &none, Execution::Sequential), Err(Error::NothingToScore)));
    assert!(matches!(ce_loss(&toy, &[], &none, Execution::Sequential), Err(Error::EmptyInput)));
}

#[test]
fn loss_is_identical_across_execution_modes() {
    let toy = Toy::new(8, 4, false);
    let s = seqs(&[6, 4, 7, 2, 9, 11, 3]);
    let spec = steer(4, 0.7);
    assert_eq!(
        ce_loss(&toy, &s, &spec, Execution::Sequential).unwrap().to_bits(),
        ce_loss(&toy, &s, &spec, Execution::Parallel).unwrap().to_bits()
    );
}

#[test]
fn bad_layer_is_rejected() {
    let toy = Toy::new(8, 4, false);
    let mut spec = steer(4, 1.0);
    spec.layer = 2;
    assert!(matches!(
        ce_loss(&toy, &seqs(&[4]), &spec, Execution::Sequential),
        Err(Error::IndexOutOfRange { index: 2, len: 2 })
    ));
    let outside = vec![TokenSequence::new(vec![1, 8])];
    assert!(matches!(
        ce_loss(&toy, &outside, &InterventionSpec::none(), Execution::Sequential),
        Err(Error::IndexOutOfRange { index: 8, len: 8 })
    ));
}

#[test]
fn ablation_is_language_selective() {
    let world = Arc::new(PlantedWorld::new(WorldConfig::default()).unwrap());
    let p = Pipeline::new(world, TaskConfig::default(), IdentificationConfig::default(), Execution::Parallel).unwrap();
    let rows = ablation_ce(&p, &[8], 1.0, 2).unwrap();
    assert_eq!(rows.len(), 25);
    for r in &rows {
        if r.ablated == r.evaluated {
            assert!(r.delta >= 0.1, "{r:?}");
        } else {
            assert!(r.delta.abs() <= 0.01 * r.ce_base, "{r:?}");
        }
    }
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| dot(v, v) > 1e-3)
}

proptest! {
    #[test]
    fn ablated_residual_is_orthogonal_and_idempotent(x in prop::collection::vec(-5.0f64..5.0, 6), d in unit_vec(6)) {
        let once = sequential_ablation(&x, std::slice::from_ref(&d)).unwrap();
        let twice = sequential_ablation(&once, std::slice::from_ref(&d)).unwrap();
        let n = dot(&d, &d).sqrt();
        prop_assert!(dot(&once, &d).abs() / n < 1e-9);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(dot(&once, &once) <= dot(&x, &x) + 1e-9);
    }
}
