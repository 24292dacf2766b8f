// SPDX-License-Identifier: MIT OR Apache-2.0

//! Descriptive analyses of identified features.
//!
//! Latent-only analyses run on [`AnalysisInput`], which can come from the
//! planted pipeline or from ingested activation files. Layer sweeps and
//! ablation need a backend and take a [`Pipeline`].
//!
//! CSV schemas:
//!
//! | file | columns |
//! |---|---|
//! | `overlap_vs_n` | language, n, s_lang, s_rand, s_spec, overlap |
//! | `spec_count_vs_tau` | language, tau, s_lang, s_rand, s_spec |
//! | `top_feature_activations` | language, rank, feature, mean_activation |
//! | `selectivity` | feature_language, feature, evaluated_language, mean_activation |
//! | `layerwise` | language, layer, s_spec, mean_spec_activation |
//! | `ablation_ce` | ablated, evaluated, layer, ce_base, ce_ablated, delta_ce |

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::experiment::{Pipeline, SplitKind};
use crate::features::{identify, mean_latent, select_topk, FeatureReport};
use crate::intervention::{ce_loss, InterventionSpec};
use crate::metrics::recovery_metrics;
use crate::report::{fmt_sig, DeltaCe, Recovery, Table};
use crate::sae::LatentMatrix;

/// Language and random-token latents of one language at one layer.
#[derive(Debug, Clone)]
pub struct LanguageLatents {
    pub language: String,
    pub lang: Arc<LatentMatrix>,
    pub random: Arc<LatentMatrix>,
}

#[derive(Debug, Clone)]
pub struct AnalysisInput {
    pub layer: usize,
    pub languages: Vec<LanguageLatents>,
}

impl AnalysisInput {
    pub fn from_pipeline(p: &Pipeline, layer: usize) -> Result<Self> {
        let world = p.world();
        let languages = (0..world.num_languages())
            .map(|l| {
                Ok(LanguageLatents {
                    language: world.language_name(l).to_string(),
                    lang: p.language_latents(l, layer)?,
                    random: p.random_latents(l, layer)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layer, languages })
    }
}

pub fn overlap_vs_n(input: &AnalysisInput, tau: f64, ns: &[usize]) -> Result<Table> {
    let mut t = Table::new(&["language", "n", "s_lang", "s_rand", "s_spec", "overlap"]);
    for ll in &input.languages {
        for &n in ns {
            if n == 0 || n > ll.lang.n_samples() || n > ll.random.n_samples() {
                return Err(Error::invalid(format!(
                    "n = {n} outside 1..={} for {}",
                    ll.lang.n_samples().min(ll.random.n_samples()),
                    ll.language
                )));
            }
            let sets = identify(&ll.lang.head(n), &ll.random.head(n), tau)?;
            t.push(vec![
                ll.language.as_str().into(),
                n.into(),
                sets.s_lang().len().into(),
                sets.s_rand().len().into(),
                sets.s_spec().len().into(),
                sets.overlap().into(),
            ])?;
        }
    }
    Ok(t)
}

pub fn spec_count_vs_tau(input: &AnalysisInput, taus: &[f64]) -> Result<Table> {
    let mut t = Table::new(&["language", "tau", "s_lang", "s_rand", "s_spec"]);
    for ll in &input.languages {
        for &tau in taus {
            let sets = identify(&ll.lang, &ll.random, tau)?;
            t.push(vec![
                ll.language.as_str().into(),
                tau.into(),
                sets.s_lang().len().into(),
                sets.s_rand().len().into(),
                sets.s_spec().len().into(),
            ])?;
        }
    }
    Ok(t)
}

/// Specific features of each language ranked by mean activation.
pub fn top_feature_activations(input: &AnalysisInput, tau: f64, top: usize) -> Result<Table> {
    let mut t = Table::new(&["language", "rank", "feature", "mean_activation"]);
    for ll in &input.languages {
        let sets = identify(&ll.lang, &ll.random, tau)?;
        if sets.s_spec().is_empty() {
            continue;
        }
        let sel = select_topk(&mean_latent(&ll.lang)?, &sets, top)?;
        for (rank, (&j, &m)) in sel.indices.iter().zip(&sel.mean_activations).enumerate() {
            t.push(vec![ll.language.as_str().into(), (rank + 1).into(), j.into(), m.into()])?;
        }
    }
    Ok(t)
}

/// Mean activation of each language's top specific feature on every language.
pub fn selectivity(input: &AnalysisInput, tau: f64) -> Result<Table> {
    let means: Vec<Vec<f64>> = input
        .languages
        .iter()
        .map(|ll| mean_latent(&ll.lang))
        .collect::<Result<_>>()?;
    let mut t = Table::new(&["feature_language", "feature", "evaluated_language", "mean_activation"]);
    for (a, ll) in input.languages.iter().enumerate() {
        let sets = identify(&ll.lang, &ll.random, tau)?;
        if sets.s_spec().is_empty() {
            continue;
        }
        let j = select_topk(&means[a], &sets, 1)?.indices[0];
        for (b, other) in input.languages.iter().enumerate() {
            t.push(vec![
                ll.language.as_str().into(),
                j.into(),
                other.language.as_str().into(),
                means[b][j].into(),
            ])?;
        }
    }
    Ok(t)
}

/// Specific-feature counts and their mean activation at every layer.
pub fn layerwise(p: &Pipeline, tau: f64) -> Result<Table> {
    let mut t = Table::new(&["language", "layer", "s_spec", "mean_spec_activation"]);
    let world = p.world();
    for l in 0..world.num_languages() {
        for layer in 0..world.config().num_layers {
            let sets = p.feature_sets(l, layer, tau)?;
            let mean = mean_latent(&*p.language_latents(l, layer)?)?;
            let s = sets.s_spec();
            let avg = if s.is_empty() {
                0.0
            } else {
                s.iter().map(|&j| mean[j]).sum::<f64>() / s.len() as f64
            };
            t.push(vec![world.language_name(l).into(), layer.into(), s.len().into(), avg.into()])?;
        }
    }
    Ok(t)
}

/// ΔCE from ablating each language's top-`k` specific features at each
/// layer, measured on every language's test sentences.
pub fn ablation_ce(p: &Pipeline, layers: &[usize], tau: f64, k: usize) -> Result<Vec<DeltaCe>> {
    let world = p.world();
    let names: Vec<String> = world.config().languages.clone();
    let texts: BTreeMap<&str, _> = names
        .iter()
        .map(|n| Ok((n.as_str(), p.dataset().split(SplitKind::Test).sentences(n)?.to_vec())))
        .collect::<Result<_>>()?;
    let base: BTreeMap<&str, f64> = names
        .iter()
        .map(|n| Ok((n.as_str(), ce_loss(p.backend(), &texts[n.as_str()], &InterventionSpec::none(), p.exec())?)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &layer in layers {
        for (a, ablated) in names.iter().enumerate() {
            let (_, sel, _) = p.selected_features(a, layer, tau, k, true)?;
            let dirs = sel
                .indices
                .iter()
                .map(|&j| p.sae().feature_direction(j))
                .collect::<Result<Vec<_>>>()?;
            let spec = InterventionSpec::ablate(layer, dirs);
            for evaluated in &names {
                let ce = ce_loss(p.backend(), &texts[evaluated.as_str()], &spec, p.exec())?;
                let b = base[evaluated.as_str()];
                out.push(DeltaCe {
                    ablated: ablated.clone(),
                    evaluated: evaluated.clone(),
                    layer,
                    ce_base: b,
                    ce_ablated: ce,
                    delta: ce - b,
                });
            }
        }
    }
    Ok(out)
}

pub fn ablation_table(rows: &[DeltaCe]) -> Table {
    let mut t = Table::new(&["ablated", "evaluated", "layer", "ce_base", "ce_ablated", "delta_ce"]);
    for d in rows {
        t.rows.push(vec![
            d.ablated.as_str().into(),
            d.evaluated.as_str().into(),
            d.layer.into(),
            d.ce_base.into(),
            d.ce_ablated.into(),
            d.delta.into(),
        ]);
    }
    t
}

/// Every analysis at `layer`, keyed by CSV file stem.
pub fn analysis_suite(p: &Pipeline, layer: usize) -> Result<BTreeMap<&'static str, Table>> {
    let tau = p.ident().tau;
    let input = AnalysisInput::from_pipeline(p, layer)?;
    let n_max = p.ident().n_samples;
    let mut ns: Vec<usize> = [10, 25, 50, 100].into_iter().filter(|&n| n < n_max).collect();
    ns.push(n_max);
    let mut out = BTreeMap::new();
    out.insert("overlap_vs_n", overlap_vs_n(&input, tau, &ns)?);
    out.insert("spec_count_vs_tau", spec_count_vs_tau(&input, &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0])?);
    out.insert("top_feature_activations", top_feature_activations(&input, tau, 10)?);
    out.insert("selectivity", selectivity(&input, tau)?);
    out.insert("layerwise", layerwise(p, tau)?);
    out.insert("ablation_ce", ablation_table(&ablation_ce(p, &[layer], tau, 2)?));
    Ok(out)
}

/// Identification results for every language, with recovery against the
/// planted dictionary and flags for any precision or recall loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdentificationSummary {
    pub layer: usize,
    pub tau: f64,
    pub features: Vec<FeatureReport>,
    pub recovery: BTreeMap<String, Recovery>,
    pub flags: Vec<String>,
}

pub fn identification_summary(p: &Pipeline, layer: usize, tau: f64, k: usize) -> Result<IdentificationSummary> {
    let world = p.world();
    let mut features = Vec::new();
    let mut recovery = BTreeMap::new();
    let mut flags = Vec::new();
    for l in 0..world.num_languages() {
        let name = world.language_name(l);
        let sets = p.feature_sets(l, layer, tau)?;
        let sel = if sets.s_spec().is_empty() {
            flags.push(format!("{name}: no language-specific features found"));
            None
        } else {
            Some(p.selected_features(l, layer, tau, k, true)?.1)
        };
        let planted: BTreeSet<usize> = world.planted_specific(l).into_iter().collect();
        let (precision, recall) = recovery_metrics(sets.s_spec(), &planted);
        let leaked = sets.s_spec().difference(&planted).count();
        if leaked > 0 {
            flags.push(format!(
                "{name}: precision loss, {leaked} non-specific feature(s) in s_spec (precision {})",
                fmt_sig(precision)
            ));
        }
        if recall < 1.0 {
            flags.push(format!("{name}: recall loss (recall {})", fmt_sig(recall)));
        }
        recovery.insert(name.to_string(), Recovery { precision, recall });
        features.push(FeatureReport::new(name, layer, tau, p.ident().n_samples, &sets, sel.as_ref()));
    }
    Ok(IdentificationSummary {
        layer,
        tau,
        features,
        recovery,
        flags,
    })
}
