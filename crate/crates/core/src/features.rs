// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-specific feature identification.
//!
//! A latent `j` is *language-consistent* when it fires (value > 0) on at
//! least a fraction `τ` of target-language samples, and *language-agnostic*
//! when it does so on random-token samples. The language-specific set is the
//! difference of the two:
//!
//! ```text
//! ρ_j      = |{i : F_ij > 0}| / N
//! S_lang   = {j : ρ_j^lang ≥ τ}
//! S_rand   = {j : ρ_j^rand ≥ τ}
//! S_spec   = S_lang \ S_rand
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, mean_rows, topk_indices};
use crate::sae::{LatentMatrix, SaeParams};
use crate::steering::SteeringVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentificationConfig {
    pub n_samples: usize,
    pub tau: f64,
    pub top_k: usize,
    pub length_ratio: f64,
    pub seed: u64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            tau: 1.0,
            top_k: 1,
            length_ratio: 1.0,
            seed: 0,
        }
    }
}

impl IdentificationConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(Error::ZeroK);
        }
        if !(self.length_ratio > 0.0 && self.length_ratio.is_finite()) {
            return Err(Error::invalid("length_ratio must be > 0"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")))
    }
}

/// Per-latent firing rates over `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    pub rho: Vec<f64>,
    pub n: usize,
}

pub fn activation_frequencies(latents: &LatentMatrix) -> Result<FrequencyVector> {
    let m = latents.matrix();
    if m.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut counts = vec![0usize; m.cols()];
    for row in m.iter_rows() {
        for (c, &v) in counts.iter_mut().zip(row) {
            if v > 0.0 {
                *c += 1;
            }
        }
    }
    let n = m.rows();
    Ok(FrequencyVector {
        rho: counts.into_iter().map(|c| c as f64 / n as f64).collect(),
        n,
    })
}

/// `{j : rho[j] ≥ tau}`.
pub fn threshold_set(rho: &FrequencyVector, tau: f64) -> Result<BTreeSet<usize>> {
    check_tau(tau)?;
    Ok(rho
        .rho
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= tau)
        .map(|(j, _)| j)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSets {
    s_lang: BTreeSet<usize>,
    s_rand: BTreeSet<usize>,
    s_spec: BTreeSet<usize>,
    d_sae: usize,
}

impl FeatureSets {
    /// Builds the sets; `s_spec` is always derived as `s_lang \ s_rand`.
    pub fn new(s_lang: BTreeSet<usize>, s_rand: BTreeSet<usize>, d_sae: usize) -> Result<Self> {
        for &j in s_lang.iter().chain(&s_rand) {
            if j >= d_sae {
                return Err(Error::IndexOutOfRange { index: j, len: d_sae });
            }
        }
        let s_spec = s_lang.difference(&s_rand).copied().collect();
        Ok(Self {
            s_lang,
            s_rand,
            s_spec,
            d_sae,
        })
    }

    pub fn s_lang(&self) -> &BTreeSet<usize> {
        &self.s_lang
    }

    pub fn s_rand(&self) -> &BTreeSet<usize> {
        &self.s_rand
    }

    pub fn s_spec(&self) -> &BTreeSet<usize> {
        &self.s_spec
    }

    pub fn d_sae(&self) -> usize {
        self.d_sae
    }

    /// `|S_lang ∩ S_rand| / |S_lang|`, or 0 when `S_lang` is empty.
    pub fn overlap(&self) -> f64 {
        if self.s_lang.is_empty() {
            return 0.0;
        }
        self.s_lang.intersection(&self.s_rand).count() as f64 / self.s_lang.len() as f64
    }

    /// The same sets with `S_rand` emptied, so `S_spec = S_lang`.
    pub fn without_removal(&self) -> Self {
        Self::new(self.s_lang.clone(), BTreeSet::new(), self.d_sae).expect("indices already checked")
    }
}

pub fn identify(lang: &LatentMatrix, rand: &LatentMatrix, tau: f64) -> Result<FeatureSets> {
    Error::check_dim(lang.d_sae(), rand.d_sae())?;
    let s_lang = threshold_set(&activation_frequencies(lang)?, tau)?;
    let s_rand = threshold_set(&activation_frequencies(rand)?, tau)?;
    FeatureSets::new(s_lang, s_rand, lang.d_sae())
}

pub fn mean_latent(lang: &LatentMatrix) -> Result<Vec<f64>> {
    mean_rows(lang.matrix())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatures {
    pub indices: Vec<usize>,
    pub mean_activations: Vec<f64>,
}

/// The `min(k, |S_spec|)` members of `S_spec` with the largest mean activation.
pub fn select_topk(mean: &[f64], sets: &FeatureSets, k: usize) -> Result<SelectedFeatures> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    Error::check_dim(sets.d_sae(), mean.len())?;
    if sets.s_spec.is_empty() {
        return Err(Error::NoSpecificFeatures);
    }
    let members: Vec<usize> = sets.s_spec.iter().copied().collect();
    let values: Vec<f64> = members.iter().map(|&j| mean[j]).collect();
    // members is ascending, so topk's index tie-break carries over.
    let order = topk_indices(&values, k)?;
    Ok(SelectedFeatures {
        indices: order.iter().map(|&i| members[i]).collect(),
        mean_activations: order.iter().map(|&i| values[i]).collect(),
    })
}

/// `normalize(Σ_{j ∈ selected} mean[j]·d_j)`.
pub fn build_vector(
    mean: &[f64],
    selected: &SelectedFeatures,
    p: &SaeParams,
    layer: usize,
) -> Result<SteeringVector> {
    if selected.indices.is_empty() {
        return Err(Error::NoSpecificFeatures);
    }
    Error::check_dim(p.d_sae(), mean.len())?;
    let mut masked = vec![0.0; p.d_sae()];
    for &j in &selected.indices {
        if j >= p.d_sae() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: p.d_sae(),
            });
        }
        masked[j] = mean[j];
    }
    let raw = p.decode_without_bias(&masked)?;
    let values = l2_normalize(&raw)?;
    let mut v = SteeringVector::add("langfir", values, layer)?;
    v.features = selected.indices.clone();
    Ok(v)
}

/// Per-language identification record written to JSON reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub language: String,
    pub layer: usize,
    pub tau: f64,
    pub n_samples: usize,
    pub s_lang: Vec<usize>,
    pub s_rand: Vec<usize>,
    pub s_spec: Vec<usize>,
    pub selected: Vec<usize>,
    pub mean_activation: Vec<f64>,
}

impl FeatureReport {
    pub fn new(
        language: &str,
        layer: usize,
        tau: f64,
        n_samples: usize,
        sets: &FeatureSets,
        selected: Option<&SelectedFeatures>,
    ) -> Self {
        Self {
            language: language.to_string(),
            layer,
            tau,
            n_samples,
            s_lang: sets.s_lang.iter().copied().collect(),
            s_rand: sets.s_rand.iter().copied().collect(),
            s_spec: sets.s_spec.iter().copied().collect(),
            selected: selected.map(|s| s.indices.clone()).unwrap_or_default(),
            mean_activation: selected.map(|s| s.mean_activations.clone()).unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm, Matrix};
    use proptest::prelude::*;

    fn latents(rows: &[Vec<f64>]) -> LatentMatrix {
        LatentMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn frequency_examples() {
        let l = latents(&[
            vec![1.0, 0.0],
            vec![0.5, 0.0],
            vec![0.0, 0.0],
            vec![2.0, 0.0],
        ]);
        let f = activation_frequencies(&l).unwrap();
        assert_eq!(f.rho, vec![0.75, 0.0]);
        assert!(activation_frequencies(&latents(&[])).is_err());
    }

    #[test]
    fn threshold_examples() {
        let rho = FrequencyVector {
            rho: vec![1.0, 0.79, 0.8],
            n: 100,
        };
        assert_eq!(threshold_set(&rho, 0.8).unwrap(), set(&[0, 2]));
        assert_eq!(threshold_set(&rho, 1.0).unwrap(), set(&[0]));
        assert!(threshold_set(&rho, 0.0).is_err());
        assert!(threshold_set(&rho, 1.5).is_err());
    }

    #[test]
    fn set_difference_examples() {
        let s = FeatureSets::new(set(&[1, 5, 9]), set(&[5]), 10).unwrap();
        assert_eq!(s.s_spec(), &set(&[1, 9]));
        let s = FeatureSets::new(set(&[1, 5]), set(&[0, 1, 5]), 10).unwrap();
        assert!(s.s_spec().is_empty());
        assert!(FeatureSets::new(set(&[10]), set(&[]), 10).is_err());
        let a = latents(&[vec![1.0, 0.0]]);
        let b = latents(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(identify(&a, &b, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn select_examples() {
        let sets = FeatureSets::new(set(&[2, 7]), set(&[]), 8).unwrap();
        let mut mean = vec![0.0; 8];
        mean[2] = 3.0;
        mean[7] = 0.5;
        let s = select_topk(&mean, &sets, 1).unwrap();
        assert_eq!(s.indices, vec![2]);
        assert_eq!(s.mean_activations, vec![3.0]);
        assert_eq!(select_topk(&mean, &sets, 100).unwrap().indices, vec![2, 7]);
        let empty = FeatureSets::new(set(&[2]), set(&[2]), 8).unwrap();
        assert!(matches!(
            select_topk(&mean, &empty, 1),
            Err(Error::NoSpecificFeatures)
        ));
        // Ties go to the smaller index.
        let tied = FeatureSets::new(set(&[1, 3, 6]), set(&[]), 8).unwrap();
        let m = vec![0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0];
        assert_eq!(select_topk(&m, &tied, 2).unwrap().indices, vec![3, 6]);
    }

    #[test]
    fn build_vector_examples() {
        let w = Matrix::from_rows(&[vec![3.0, 1.0], vec![4.0, 0.0]]).unwrap();
        let p = SaeParams::tied_relu(w).unwrap();
        let sel = SelectedFeatures {
            indices: vec![0],
            mean_activations: vec![2.0],
        };
        let v = build_vector(&[2.0, 0.0], &sel, &p, 3).unwrap();
        assert!((v.values[0] - 0.6).abs() < 1e-12 && (v.values[1] - 0.8).abs() < 1e-12);
        assert_eq!(v.method, "langfir");
        assert_eq!(v.layer, 3);

        let p = SaeParams::tied_relu(Matrix::identity(2)).unwrap();
        let sel = SelectedFeatures {
            indices: vec![0, 1],
            mean_activations: vec![1.5, 1.5],
        };
        let v = build_vector(&[1.5, 1.5], &sel, &p, 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v.values[0] - h).abs() < 1e-12 && (v.values[1] - h).abs() < 1e-12);
        let zero = build_vector(&[0.0, 0.0], &sel, &p, 0);
        assert!(matches!(zero, Err(Error::ZeroNorm)));
    }

    fn small_latents() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..12, 1usize..10).prop_flat_map(|(n, d)| {
            (
                Just(n),
                Just(d),
                prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], n * d),
            )
        })
    }

    proptest! {
        #[test]
        fn frequencies_match_counting((n, d, vals) in small_latents()) {
            let l = LatentMatrix::new(Matrix::new(n, d, vals.clone()).unwrap()).unwrap();
            let f = activation_frequencies(&l).unwrap();
            for j in 0..d {
                let mut c = 0;
                for i in 0..n {
                    if vals[i * d + j] > 0.0 { c += 1; }
                }
                prop_assert_eq!(f.rho[j], c as f64 / n as f64);
            }
        }

        #[test]
        fn raising_tau_never_grows(rho in prop::collection::vec(0.0f64..=1.0, 1..40), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = FrequencyVector { rho, n: 1 };
            let s_lo = threshold_set(&f, lo).unwrap();
            let s_hi = threshold_set(&f, hi).unwrap();
            prop_assert!(s_hi.is_subset(&s_lo));
        }

        #[test]
        fn spec_is_difference(lang in prop::collection::btree_set(0usize..30, 0..30), rand in prop::collection::btree_set(0usize..30, 0..30)) {
            let s = FeatureSets::new(lang.clone(), rand.clone(), 30).unwrap();
            let want: BTreeSet<usize> = lang.difference(&rand).copied().collect();
            prop_assert_eq!(s.s_spec(), &want);
        }

        #[test]
        fn single_feature_scale_invariant(scale in 0.01f64..100.0, j in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::new(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let p = SaeParams::tied_relu(w).unwrap();
            let mut mean = vec![0.0; 6];
            mean[j] = 1.0;
            let sel = SelectedFeatures { indices: vec![j], mean_activations: vec![1.0] };
            let a = build_vector(&mean, &sel, &p, 0).unwrap();
            mean[j] = scale;
            let b = build_vector(&mean, &sel, &p, 0).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((norm(&a.values) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn build_matches_masked_decode(seed in any::<u64>(), k in 1usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::new(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let b_dec: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = SaeParams::new(w.transpose(), vec![0.0; 8], w, b_dec.clone(), crate::sae::Nonlinearity::Relu).unwrap();
            let mean: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..2.0)).collect();
            let sets = FeatureSets::new((0..8).collect(), BTreeSet::new(), 8).unwrap();
            let sel = select_topk(&mean, &sets, k).unwrap();
            let v = build_vector(&mean, &sel, &p, 0).unwrap();
            let mut masked = vec![0.0; 8];
            for &j in &sel.indices { masked[j] = mean[j]; }
            let raw: Vec<f64> = p.decode(&masked).unwrap().iter().zip(&b_dec).map(|(a, b)| a - b).collect();
            let want = l2_normalize(&raw).unwrap();
            for (x, y) in v.values.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
