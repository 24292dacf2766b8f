// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiments on the planted world: parallel data splits,
//! identification, vector construction for every method, and scoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{collect_activations, layer_from_percentile, ActivationMatrix, ModelBackend};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::{identify, mean_latent, select_topk, build_vector, FeatureSets, IdentificationConfig, SelectedFeatures};
use crate::intervention::{generate_batch, InterventionMode, InterventionSpec};
use crate::metrics::{acc_x_bleu, bleu, successes};
use crate::sae::{LatentMatrix, SaeParams};
use crate::steering::{diffmean, lda_vector, pca_vector, sae_diffmean, zhong_mono, zhong_para, SteeringVector};
use crate::tokens::{random_corpus, TokenSequence};
use crate::world::{PlantedBackend, PlantedWorld};

/// Seed derived from a base seed and a list of tags.
pub fn derive_seed(parts: &[u64]) -> u64 {
    crate::world::mix(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub source: String,
    /// Languages to steer towards; every non-source language when empty.
    pub targets: Vec<String>,
    pub n_construct: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub confidence_threshold: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            source: "en".into(),
            targets: Vec::new(),
            n_construct: 100,
            n_validation: 20,
            n_test: 100,
            min_len: 10,
            max_len: 30,
            confidence_threshold: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_construct == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(Error::invalid("every split needs at least one sentence"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("sentence lengths need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("confidence_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitKind {
    Construction,
    Validation,
    Test,
}

/// Parallel sentences: `translations[lang][i]` renders source sentence `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub translations: BTreeMap<String, Vec<TokenSequence>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.translations.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentences(&self, lang: &str) -> Result<&[TokenSequence]> {
        self.translations
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub construction: Split,
    pub validation: Split,
    pub test: Split,
}

impl Dataset {
    /// Three disjoint splits of source sentences with all translations.
    pub fn build(world: &PlantedWorld, task: &TaskConfig, seed: u64) -> Result<Self> {
        task.validate()?;
        let src = world.language_index(&task.source)?;
        let total = task.n_construct + task.n_validation + task.n_test;
        let mut seen = HashSet::new();
        let mut sources = Vec::with_capacity(total);
        let mut attempt = 0u64;
        while sources.len() < total {
            let s = derive_seed(&[seed, 0x5E47, attempt]);
            attempt += 1;
            let len = ChaCha8Rng::seed_from_u64(s).random_range(task.min_len..=task.max_len);
            let sent = world.sample_sentence(src, len, s)?;
            if seen.insert(sent.ids.clone()) {
                sources.push(sent);
            }
            if attempt > 100 * total as u64 {
                return Err(Error::invalid("could not draw enough distinct sentences"));
            }
        }
        let split = |range: std::ops::Range<usize>| Split {
            translations: (0..world.num_languages())
                .map(|l| {
                    let v = sources[range.clone()].iter().map(|s| world.translate(s, l)).collect();
                    (world.language_name(l).to_string(), v)
                })
                .collect(),
        };
        let a = task.n_construct;
        let b = a + task.n_validation;
        Ok(Self {
            construction: split(0..a),
            validation: split(a..b),
            test: split(b..total),
        })
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Construction => &self.construction,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Langfir,
    /// LangFIR with `S_lang` in place of `S_spec` (no random-token removal).
    LangfirNoRemoval,
    Diffmean,
    GatedDiffmean,
    SaeDiffmean,
    Pca,
    Lda,
    ZhongMono,
    ZhongPara,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Langfir,
        Method::LangfirNoRemoval,
        Method::Diffmean,
        Method::GatedDiffmean,
        Method::SaeDiffmean,
        Method::Pca,
        Method::Lda,
        Method::ZhongMono,
        Method::ZhongPara,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Langfir => "langfir",
            Method::LangfirNoRemoval => "langfir-no-removal",
            Method::Diffmean => "diffmean",
            Method::GatedDiffmean => "gated-diffmean",
            Method::SaeDiffmean => "sae-diffmean",
            Method::Pca => "pca",
            Method::Lda => "lda",
            Method::ZhongMono => "zhong-mono",
            Method::ZhongPara => "zhong-para",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Method::Langfir | Method::LangfirNoRemoval)
    }

    pub fn is_zhong(self) -> bool {
        matches!(self, Method::ZhongMono | Method::ZhongPara)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// One point in hyperparameter space. Fields irrelevant to a method are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub layer_percentile: f64,
    pub alpha: f64,
    pub tau: f64,
    pub top_k: usize,
    pub pca_k: usize,
    pub zhong_k: usize,
    pub anchor_percentile: f64,
    pub lda_shrinkage: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            layer_percentile: 0.9,
            alpha: 1.0,
            tau: 1.0,
            top_k: 1,
            pca_k: 1,
            zhong_k: 8,
            anchor_percentile: 0.5,
            lda_shrinkage: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangScores {
    pub acc: f64,
    pub bleu: f64,
    pub acc_x_bleu: f64,
    pub n: usize,
}

/// Sample source for activation caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Corpus {
    Language,
    Random,
}

type ActKey = (usize, usize, Corpus);

/// Shared state for running many configurations over one world and dataset.
pub struct Pipeline {
    world: Arc<PlantedWorld>,
    backend: PlantedBackend,
    sae: Arc<SaeParams>,
    data: Dataset,
    task: TaskConfig,
    ident: IdentificationConfig,
    exec: Execution,
    acts: Mutex<HashMap<ActKey, Arc<ActivationMatrix>>>,
    latents: Mutex<HashMap<ActKey, Arc<LatentMatrix>>>,
    scores: Mutex<HashMap<(Vec<u64>, String, SplitKind), LangScores>>,
}

impl Pipeline {
    pub fn new(
        world: Arc<PlantedWorld>,
        task: TaskConfig,
        ident: IdentificationConfig,
        exec: Execution,
    ) -> Result<Self> {
        ident.validate()?;
        if ident.n_samples > task.n_construct {
            return Err(Error::invalid(format!(
                "n_samples = {} exceeds the construction split ({})",
                ident.n_samples, task.n_construct
            )));
        }
        let data = Dataset::build(&world, &task, ident.seed)?;
        for t in &task.targets {
            world.language_index(t)?;
        }
        let backend = PlantedBackend::new(world.clone());
        let sae = Arc::new(world.oracle_sae());
        Ok(Self {
            world,
            backend,
            sae,
            data,
            task,
            ident,
            exec,
            acts: Mutex::new(HashMap::new()),
            latents: Mutex::new(HashMap::new()),
            scores: Mutex::new(HashMap::new()),
        })
    }

    pub fn world(&self) -> &PlantedWorld {
        &self.world
    }

    pub fn backend(&self) -> &PlantedBackend {
        &self.backend
    }

    pub fn sae(&self) -> &Arc<SaeParams> {
        &self.sae
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    pub fn ident(&self) -> &IdentificationConfig {
        &self.ident
    }

    pub fn exec(&self) -> Execution {
        self.exec
    }

    /// Target languages, in configuration order.
    pub fn targets(&self) -> Vec<String> {
        if self.task.targets.is_empty() {
            self.world
                .config()
                .languages
                .iter()
                .filter(|l| **l != self.task.source)
                .cloned()
                .collect()
        } else {
            self.task.targets.clone()
        }
    }

    pub fn layer(&self, percentile: f64) -> Result<usize> {
        layer_from_percentile(percentile, self.backend.num_layers())
    }

    /// The first `n` construction sentences of `lang`.
    pub fn language_samples(&self, lang: usize, n: usize) -> Result<Vec<TokenSequence>> {
        let all = self.data.construction.sentences(self.world.language_name(lang))?;
        if n > all.len() {
            return Err(Error::invalid(format!("only {} construction sentences", all.len())));
        }
        Ok(all[..n].to_vec())
    }

    /// One random-token sequence per language sample, length-matched.
    pub fn random_samples(&self, lang: usize, n: usize) -> Result<Vec<TokenSequence>> {
        let targets = self.language_samples(lang, n)?;
        let seed = derive_seed(&[self.ident.seed, 0x7A4D, lang as u64]);
        random_corpus(&targets, self.backend.vocab(), self.ident.length_ratio, seed)
    }

    fn activations(&self, lang: usize, layer: usize, corpus: Corpus) -> Result<Arc<ActivationMatrix>> {
        let key = (lang, layer, corpus);
        if let Some(a) = self.acts.lock().expect("cache poisoned").get(&key) {
            return Ok(a.clone());
        }
        let n = self.ident.n_samples;
        let seqs = match corpus {
            Corpus::Language => self.language_samples(lang, n)?,
            Corpus::Random => self.random_samples(lang, n)?,
        };
        let mut m = collect_activations(&self.backend, &seqs, layer, self.exec)?;
        m.language = match corpus {
            Corpus::Language => self.world.language_name(lang).to_string(),
            Corpus::Random => "random".to_string(),
        };
        m.source = "planted".to_string();
        m.seed = Some(self.ident.seed);
        let m = Arc::new(m);
        self.acts.lock().expect("cache poisoned").insert(key, m.clone());
        Ok(m)
    }

    /// Mean-pooled activations of `lang`'s construction sentences at `layer`.
    pub fn language_activations(&self, lang: usize, layer: usize) -> Result<Arc<ActivationMatrix>> {
        self.activations(lang, layer, Corpus::Language)
    }

    pub fn random_activations(&self, lang: usize, layer: usize) -> Result<Arc<ActivationMatrix>> {
        self.activations(lang, layer, Corpus::Random)
    }

    fn latents(&self, lang: usize, layer: usize, corpus: Corpus) -> Result<Arc<LatentMatrix>> {
        let key = (lang, layer, corpus);
        if let Some(l) = self.latents.lock().expect("cache poisoned").get(&key) {
            return Ok(l.clone());
        }
        let acts = self.activations(lang, layer, corpus)?;
        let lat = Arc::new(self.sae.encode_rows(acts.data(), self.exec)?);
        self.latents.lock().expect("cache poisoned").insert(key, lat.clone());
        Ok(lat)
    }

    pub fn language_latents(&self, lang: usize, layer: usize) -> Result<Arc<LatentMatrix>> {
        self.latents(lang, layer, Corpus::Language)
    }

    pub fn random_latents(&self, lang: usize, layer: usize) -> Result<Arc<LatentMatrix>> {
        self.latents(lang, layer, Corpus::Random)
    }

    /// Feature sets of `lang` at `layer` from the first `n` samples.
    pub fn feature_sets_n(&self, lang: usize, layer: usize, tau: f64, n: usize) -> Result<FeatureSets> {
        let l = self.language_latents(lang, layer)?;
        let r = self.random_latents(lang, layer)?;
        identify(&l.head(n), &r.head(n), tau)
    }

    pub fn feature_sets(&self, lang: usize, layer: usize, tau: f64) -> Result<FeatureSets> {
        self.feature_sets_n(lang, layer, tau, self.ident.n_samples)
    }

    /// Top-`k` specific features of `lang` (or consistent ones, without removal).
    pub fn selected_features(
        &self,
        lang: usize,
        layer: usize,
        tau: f64,
        k: usize,
        removal: bool,
    ) -> Result<(FeatureSets, SelectedFeatures, Vec<f64>)> {
        let mut sets = self.feature_sets(lang, layer, tau)?;
        if !removal {
            sets = sets.without_removal();
        }
        let mean = mean_latent(&*self.language_latents(lang, layer)?)?;
        let sel = select_topk(&mean, &sets, k)?;
        Ok((sets, sel, mean))
    }

    /// Build the intervention for `method` steering towards `target`.
    pub fn build(&self, method: Method, p: &MethodParams, target: &str) -> Result<InterventionSpec> {
        let t = self.world.language_index(target)?;
        let s = self.world.language_index(&self.task.source)?;
        let layer = self.layer(p.layer_percentile)?;
        let vector = match method {
            Method::Langfir | Method::LangfirNoRemoval => {
                let removal = method == Method::Langfir;
                let (_, sel, mean) = self.selected_features(t, layer, p.tau, p.top_k, removal)?;
                build_vector(&mean, &sel, &self.sae, layer)?.with_method(method.as_str())
            }
            Method::Diffmean => diffmean(
                &*self.language_activations(t, layer)?,
                &*self.language_activations(s, layer)?,
            )?,
            Method::GatedDiffmean => {
                let v = diffmean(
                    &*self.language_activations(t, layer)?,
                    &*self.language_activations(s, layer)?,
                )?
                .with_method(method.as_str());
                let (_, gate, _) = self.selected_features(s, layer, p.tau, 2, true)?;
                let pair = match gate.indices.as_slice() {
                    [a, b, ..] => (*a, *b),
                    [a] => (*a, *a),
                    [] => return Err(Error::NoSpecificFeatures),
                };
                return Ok(InterventionSpec::gated_add(v, p.alpha, self.sae.clone(), pair));
            }
            Method::SaeDiffmean => sae_diffmean(
                &*self.language_latents(t, layer)?,
                &*self.language_latents(s, layer)?,
                &self.sae,
                layer,
            )?,
            Method::Pca => pca_vector(&*self.language_activations(t, layer)?, p.pca_k)?,
            Method::Lda => {
                let target_acts = self.language_activations(t, layer)?;
                let mut others: Option<ActivationMatrix> = None;
                for o in (0..self.world.num_languages()).filter(|&o| o != t) {
                    let a = self.language_activations(o, layer)?;
                    others = Some(match others {
                        None => (*a).clone(),
                        Some(acc) => acc.concat(&a)?,
                    });
                }
                let others = others.ok_or_else(|| Error::invalid("lda needs another language"))?;
                lda_vector(&target_acts, &others, p.lda_shrinkage)?
            }
            Method::ZhongMono => {
                let anchor = self.layer(p.anchor_percentile)?;
                zhong_mono(
                    &*self.language_activations(t, anchor)?,
                    &*self.language_activations(t, layer)?,
                    p.zhong_k,
                )?
            }
            Method::ZhongPara => zhong_para(
                &*self.language_activations(s, layer)?,
                &*self.language_activations(t, layer)?,
                p.zhong_k,
            )?,
        };
        Ok(InterventionSpec::steer(vector.with_layer(layer), p.alpha))
    }

    /// Translation prompts (source sentence, then SEP) with target references.
    pub fn prompts(&self, split: SplitKind, target: &str) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
        let sp = self.data.split(split);
        let sep = self.world.sep_token();
        let prompts = sp
            .sentences(&self.task.source)?
            .iter()
            .map(|s| {
                let mut ids = s.ids.clone();
                ids.push(sep);
                TokenSequence::tagged(ids, self.task.source.clone())
            })
            .collect();
        Ok((prompts, sp.sentences(target)?.to_vec()))
    }

    /// Greedy generations for every prompt of `split` under `spec`.
    pub fn generations(&self, spec: &InterventionSpec, split: SplitKind, target: &str) -> Result<Vec<TokenSequence>> {
        let (prompts, refs) = self.prompts(split, target)?;
        let steps: Vec<usize> = refs.iter().map(TokenSequence::len).collect();
        Ok(generate_batch(&self.backend, &prompts, &steps, spec, self.exec)?
            .into_iter()
            .map(|g| g.tokens)
            .collect())
    }

    /// ACC, BLEU on successes, and their product for `spec` on `split`.
    pub fn evaluate(&self, spec: &InterventionSpec, split: SplitKind, target: &str) -> Result<LangScores> {
        let key = (fingerprint(spec), target.to_string(), split);
        if let Some(s) = self.scores.lock().expect("cache poisoned").get(&key) {
            return Ok(*s);
        }
        let (_, refs) = self.prompts(split, target)?;
        let outs = self.generations(spec, split, target)?;
        let ok = successes(&outs, target, &self.world.classifier(), self.task.confidence_threshold)?;
        let n_ok = ok.iter().filter(|&&b| b).count();
        let acc = n_ok as f64 / ok.len() as f64;
        let b = if n_ok == 0 {
            0.0
        } else {
            let (h, r): (Vec<Vec<usize>>, Vec<Vec<usize>>) = outs
                .iter()
                .zip(&refs)
                .zip(&ok)
                .filter(|(_, &k)| k)
                .map(|((o, r), _)| (o.ids.clone(), r.ids.clone()))
                .unzip();
            bleu(&h, &r)?
        };
        let scores = LangScores {
            acc,
            bleu: b,
            acc_x_bleu: acc_x_bleu(acc, b),
            n: ok.len(),
        };
        self.scores.lock().expect("cache poisoned").insert(key, scores);
        Ok(scores)
    }

    /// Scores per target language for one method configuration.
    pub fn evaluate_method(
        &self,
        method: Method,
        p: &MethodParams,
        split: SplitKind,
    ) -> Result<BTreeMap<String, LangScores>> {
        self.targets()
            .iter()
            .map(|t| {
                let spec = self.build(method, p, t)?;
                Ok((t.clone(), self.evaluate(&spec, split, t)?))
            })
            .collect()
    }

    /// Scores with no intervention.
    pub fn evaluate_unsteered(&self, split: SplitKind) -> Result<BTreeMap<String, LangScores>> {
        let none = InterventionSpec::none();
        self.targets()
            .iter()
            .map(|t| Ok((t.clone(), self.evaluate(&none, split, t)?)))
            .collect()
    }
}

/// Mean ACC×BLEU over languages.
pub fn mean_acc_x_bleu(scores: &BTreeMap<String, LangScores>) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.values().map(|s| s.acc_x_bleu).sum::<f64>() / scores.len() as f64
}

/// A bitwise key identifying the effect of an intervention.
fn fingerprint(spec: &InterventionSpec) -> Vec<u64> {
    let mut k = vec![
        spec.mode as u64,
        spec.layer as u64,
        spec.alpha.to_bits(),
    ];
    if spec.mode == InterventionMode::None {
        return vec![0];
    }
    if let Some(v) = &spec.vector {
        k.extend(v.values.iter().map(|x| x.to_bits()));
        k.push(u64::MAX);
        k.extend(v.dims.iter().map(|&d| d as u64));
        k.extend(v.replace_values.iter().map(|x| x.to_bits()));
    }
    for d in &spec.ablate_dirs {
        k.push(u64::MAX - 1);
        k.extend(d.iter().map(|x| x.to_bits()));
    }
    if let Some((a, b)) = spec.gate_features {
        k.extend([u64::MAX - 2, a as u64, b as u64]);
    }
    k
}

/// Cosine of an add-mode vector with a reference direction.
pub fn vector_cosine(v: &SteeringVector, reference: &[f64]) -> f64 {
    crate::numerics::cosine(&v.values, reference)
}
