// SPDX-License-Identifier: MIT OR Apache-2.0

//! A synthetic multilingual world with a known feature dictionary.
//!
//! The residual stream at position `t` and layer `l` is
//!
//! ```text
//! x(t, l) = Σ_ℓ a_s·g(l)·c_ℓ(t)·U_ℓ         language signal
//!         + Σ_{k fired} a_g·A_k              agnostic features
//!         + κ·q(item(t))                     copied content (after SEP)
//!         + σ·ε(token_t, t)                  per-position noise
//!
//! U_ℓ    = Σ_r decay^r · D_{ℓ,r}
//! c_ℓ(t) = (1−ω)·1[token_t ∈ ℓ] + ω·(share of ℓ tokens in tokens[0..=t])
//! ```
//!
//! `D` and `A` are orthonormal dictionary columns, so the tied SAE built from
//! the dictionary recovers the planted coefficients when σ = 0 (up to
//! rounding, which its 1e-9 activation floor absorbs).
//! Agnostic feature `k` fires on a whole sequence when a hash of
//! `(seed, k, first token)` falls below `p_a`.
//!
//! The vocabulary has one block of `B` tokens per language followed by a
//! shared block; the first shared id is a separator (SEP) that never appears
//! in sampled text, and only the next `shared_text_tokens` ids occur in
//! sentences. The remaining shared ids are filler for random sequences. Token `c` of every language block expresses concept `c`,
//! so translation maps `(ℓ, c) → (ℓ', c)` and leaves shared tokens alone.
//! After a SEP at position `p`, position `p + j` carries the content of token
//! `j`, which makes greedy decoding copy the prompt: in its own language by
//! default, in another when steered.
//!
//! Logits are `E·x` with readout rows
//!
//! ```text
//! E[(ℓ, c)] = β·Û_ℓ + q_c      E[text shared s] = η·Â + q_s      E[SEP] = −η·Â
//! ```
//!
//! with zero rows for filler ids. `Â` is the normalised sum of agnostic
//! directions; the content embeddings `q` are orthogonal to every agnostic
//! direction and every `U_ℓ`, and orthonormal among themselves when the
//! remaining subspace is large enough. A hook edit at layer `l` reaches the readout unchanged.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::{HookPositions, ModelBackend, ResidualHook};
use crate::container::{read_container, write_container, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::metrics::{Classification, LanguageClassifier};
use crate::numerics::{axpy, dot, l2_normalize, orthonormalize_columns, Matrix};
use crate::sae::{Nonlinearity, SaeParams};
use crate::tokens::{TokenSequence, VocabSpec};

/// Activation floor of [`PlantedWorld::oracle_sae`].
pub const ORACLE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub languages: Vec<String>,
    pub d_res: usize,
    pub features_per_language: usize,
    pub num_agnostic: usize,
    pub vocab_block_size: usize,
    /// Includes the separator token.
    pub shared_vocab_size: usize,
    pub agnostic_fire_prob: f64,
    pub specific_magnitude: f64,
    pub agnostic_magnitude: f64,
    pub noise_sigma: f64,
    pub num_layers: usize,
    /// Per-layer gain on the language signal; `(l+1)/num_layers` when absent.
    pub layer_schedule: Option<Vec<f64>>,
    /// Rank-`r` language feature has magnitude `decay^r`.
    pub specific_decay: f64,
    /// Weight ω of the running language share in `c_ℓ(t)`.
    pub context_mix: f64,
    /// β: readout gain of the language direction.
    pub language_readout: f64,
    /// η: readout gain of the agnostic direction on shared tokens.
    pub shared_readout: f64,
    /// κ: strength of copied content after the separator.
    pub copy_strength: f64,
    /// Probability that a sampled sentence token comes from the shared block.
    pub shared_token_prob: f64,
    /// Shared ids that occur in sampled text; the rest of the shared block
    /// only shows up in random token sequences and has a zero readout.
    pub shared_text_tokens: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            languages: ["en", "zh", "es", "fr", "de"].map(String::from).to_vec(),
            d_res: 64,
            features_per_language: 2,
            num_agnostic: 40,
            vocab_block_size: 16,
            shared_vocab_size: 944,
            agnostic_fire_prob: 1.0,
            specific_magnitude: 1.0,
            agnostic_magnitude: 2.0,
            noise_sigma: 0.01,
            num_layers: 10,
            layer_schedule: None,
            specific_decay: 0.4,
            context_mix: 0.8,
            language_readout: 6.0,
            shared_readout: 0.28,
            copy_strength: 15.0,
            shared_token_prob: 0.1,
            shared_text_tokens: 3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn num_features(&self) -> usize {
        self.features_per_language * self.num_languages() + self.num_agnostic
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        for (i, l) in self.languages.iter().enumerate() {
            if l.is_empty() || l == "unknown" || self.languages[..i].contains(l) {
                return bad(format!("invalid or duplicate language name {l:?}"));
            }
        }
        if self.d_res == 0 || self.features_per_language == 0 {
            return bad("d_res and features_per_language must be >= 1".into());
        }
        if self.num_features() > self.d_res {
            return bad(format!(
                "features_per_language·L + num_agnostic = {} exceeds d_res = {}",
                self.num_features(),
                self.d_res
            ));
        }
        if self.vocab_block_size == 0 || self.shared_vocab_size < 2 {
            return bad("vocab_block_size must be >= 1 and shared_vocab_size >= 2".into());
        }
        if !(self.agnostic_fire_prob > 0.0 && self.agnostic_fire_prob <= 1.0) {
            return bad("agnostic_fire_prob must lie in (0, 1]".into());
        }
        if !(self.specific_magnitude > 0.0 && self.agnostic_magnitude > 0.0) {
            return bad("feature magnitudes must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if let Some(s) = &self.layer_schedule {
            if s.len() != self.num_layers || s.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return bad("layer_schedule needs num_layers finite entries >= 0".into());
            }
        }
        if !(self.specific_decay > 0.0 && self.specific_decay <= 1.0) {
            return bad("specific_decay must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.context_mix) {
            return bad("context_mix must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("language_readout", self.language_readout),
            ("shared_readout", self.shared_readout),
            ("copy_strength", self.copy_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.shared_token_prob) {
            return bad("shared_token_prob must lie in [0, 1)".into());
        }
        if self.shared_text_tokens == 0 || self.shared_text_tokens >= self.shared_vocab_size {
            return bad("shared_text_tokens must lie in [1, shared_vocab_size)".into());
        }
        Ok(())
    }

    pub fn layer_gain(&self, layer: usize) -> f64 {
        match &self.layer_schedule {
            Some(s) => s[layer],
            None => (layer + 1) as f64 / self.num_layers as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLabel {
    Specific { language: usize, rank: usize },
    Agnostic,
}

#[derive(Debug, Clone)]
pub struct PlantedWorld {
    config: WorldConfig,
    dictionary: Matrix,
    labels: Vec<FeatureLabel>,
    /// Directions spanning the rest of residual space.
    complement: Matrix,
    /// Readout rows, `V×d_res`.
    embeddings: Matrix,
    /// Content vector copied for each token id, `V×d_res`.
    content: Matrix,
    /// `U_ℓ` per language.
    language_dirs: Vec<Vec<f64>>,
    agnostic_dirs: Vec<Vec<f64>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |h, &p| splitmix(h ^ p))
}

fn unit_uniform(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl PlantedWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_res;
        let (l_count, m_s, m_a) = (
            config.num_languages(),
            config.features_per_language,
            config.num_agnostic,
        );
        let n_feat = config.num_features();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gauss: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut q = Matrix::new(d, d, gauss)?;
        orthonormalize_columns(&mut q)?;

        let cols: Vec<Vec<f64>> = (0..d).map(|j| q.column(j)).collect();
        let mut dictionary = Matrix::zeros(d, n_feat);
        for (j, c) in cols.iter().take(n_feat).enumerate() {
            for i in 0..d {
                dictionary.set(i, j, c[i]);
            }
        }
        let mut complement = Matrix::zeros(d, d - n_feat);
        for (j, c) in cols.iter().skip(n_feat).enumerate() {
            for i in 0..d {
                complement.set(i, j, c[i]);
            }
        }
        let mut labels = Vec::with_capacity(n_feat);
        for language in 0..l_count {
            for rank in 0..m_s {
                labels.push(FeatureLabel::Specific { language, rank });
            }
        }
        labels.extend(std::iter::repeat(FeatureLabel::Agnostic).take(m_a));

        let language_dirs: Vec<Vec<f64>> = (0..l_count)
            .map(|l| {
                let mut u = vec![0.0; d];
                for r in 0..m_s {
                    axpy(config.specific_decay.powi(r as i32), &cols[l * m_s + r], &mut u);
                }
                u
            })
            .collect();
        let agnostic_dirs: Vec<Vec<f64>> = cols[l_count * m_s..n_feat].to_vec();

        // Content vectors are orthogonal to every U_ℓ and to the agnostic
        // subspace: they live in the within-language residual directions and
        // the complement. Orthonormal when the span is large enough.
        let b = config.vocab_block_size;
        let vocab = l_count * b + config.shared_vocab_size;
        let sep = l_count * b;
        let n_text = config.shared_text_tokens;
        let mut span: Vec<Vec<f64>> = Vec::new();
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        for (l, u) in language_dirs.iter().enumerate() {
            let u_hat = l2_normalize(u)?;
            for r in 1..m_s {
                let mut c = cols[l * m_s + r].clone();
                axpy(-dot(&c, &u_hat), &u_hat, &mut c);
                candidates.push(c);
            }
        }
        candidates.extend(cols[n_feat..].iter().cloned());
        for mut c in candidates {
            for _ in 0..2 {
                for e in &span {
                    axpy(-dot(&c, e), e, &mut c);
                }
            }
            if let Ok(c) = l2_normalize(&c) {
                span.push(c);
            }
        }
        let n_items = b + n_text;
        let coords: Vec<Vec<f64>> = if !span.is_empty() && n_items <= span.len() {
            let g: Vec<f64> = (0..span.len() * n_items)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut m = Matrix::new(span.len(), n_items, g)?;
            orthonormalize_columns(&mut m)?;
            (0..n_items).map(|j| m.column(j)).collect()
        } else {
            (0..n_items)
                .map(|_| {
                    let z: Vec<f64> = (0..span.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    l2_normalize(&z).unwrap_or(z)
                })
                .collect()
        };
        let items: Vec<Vec<f64>> = coords
            .iter()
            .map(|z| {
                let mut v = vec![0.0; d];
                for (zi, e) in z.iter().zip(&span) {
                    axpy(*zi, e, &mut v);
                }
                v
            })
            .collect();
        let mut content = Matrix::zeros(vocab, d);
        for id in 0..vocab {
            let row = if id < sep {
                Some(&items[id % b])
            } else if id > sep && id <= sep + n_text {
                Some(&items[b + id - sep - 1])
            } else {
                None
            };
            if let Some(row) = row {
                content.row_mut(id).copy_from_slice(row);
            }
        }

        let mut a_hat = vec![0.0; d];
        for a in &agnostic_dirs {
            axpy(1.0, a, &mut a_hat);
        }
        let a_hat = l2_normalize(&a_hat).unwrap_or(a_hat);
        let mut embeddings = Matrix::zeros(vocab, d);
        for id in 0..vocab {
            let mut e = content.row(id).to_vec();
            if id < l_count * b {
                let u_hat = l2_normalize(&language_dirs[id / b])?;
                axpy(config.language_readout, &u_hat, &mut e);
            } else if id == sep {
                axpy(-config.shared_readout, &a_hat, &mut e);
            } else if id <= sep + n_text {
                axpy(config.shared_readout, &a_hat, &mut e);
            }
            embeddings.row_mut(id).copy_from_slice(&e);
        }

        Ok(Self {
            config,
            dictionary,
            labels,
            complement,
            embeddings,
            content,
            language_dirs,
            agnostic_dirs,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn num_languages(&self) -> usize {
        self.config.num_languages()
    }

    pub fn language_name(&self, l: usize) -> &str {
        &self.config.languages[l]
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        self.config
            .languages
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::UnknownLanguage(name.to_string()))
    }

    pub fn dictionary(&self) -> &Matrix {
        &self.dictionary
    }

    pub fn labels(&self) -> &[FeatureLabel] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn complement(&self) -> &Matrix {
        &self.complement
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn sep_token(&self) -> usize {
        self.num_languages() * self.config.vocab_block_size
    }

    pub fn language_block(&self, l: usize) -> Range<usize> {
        let b = self.config.vocab_block_size;
        l * b..(l + 1) * b
    }

    /// The shared block without the separator.
    pub fn shared_block(&self) -> Range<usize> {
        self.sep_token() + 1..self.vocab_size()
    }

    /// Shared ids that occur in sampled sentences.
    pub fn text_shared_block(&self) -> Range<usize> {
        let s = self.sep_token() + 1;
        s..s + self.config.shared_text_tokens
    }

    pub fn token_language(&self, id: usize) -> Option<usize> {
        (id < self.sep_token()).then(|| id / self.config.vocab_block_size)
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec::new(self.vocab_size(), [self.sep_token()]).expect("world vocab is valid")
    }

    /// Planted feature indices of language `l`, by rank.
    pub fn planted_specific(&self, l: usize) -> Vec<usize> {
        let m = self.config.features_per_language;
        (l * m..(l + 1) * m).collect()
    }

    pub fn planted_agnostic(&self) -> Vec<usize> {
        let start = self.num_languages() * self.config.features_per_language;
        (start..start + self.config.num_agnostic).collect()
    }

    /// `U_ℓ`, the unnormalised language signal direction.
    pub fn language_direction(&self, l: usize) -> &[f64] {
        &self.language_dirs[l]
    }

    /// Unit `U_ℓ`.
    pub fn target_direction(&self, l: usize) -> Vec<f64> {
        l2_normalize(&self.language_dirs[l]).expect("language directions are nonzero")
    }

    /// Unit `U_t − mean(U_o for o in others)`: the noise-free difference of
    /// class means when every language is equally frequent in its text.
    pub fn contrast_direction(&self, target: usize, others: &[usize]) -> Result<Vec<f64>> {
        let mut v = self.language_dirs[target].clone();
        if !others.is_empty() {
            let w = -1.0 / others.len() as f64;
            for &o in others {
                axpy(w, &self.language_dirs[o], &mut v);
            }
        }
        l2_normalize(&v)
    }

    pub fn layer_gain(&self, layer: usize) -> f64 {
        self.config.layer_gain(layer)
    }

    /// Map a sequence into language `to`, leaving shared tokens unchanged.
    pub fn translate(&self, seq: &TokenSequence, to: usize) -> TokenSequence {
        let b = self.config.vocab_block_size;
        let ids = seq
            .ids
            .iter()
            .map(|&id| match self.token_language(id) {
                Some(_) => to * b + id % b,
                None => id,
            })
            .collect();
        TokenSequence::tagged(ids, self.language_name(to))
    }

    /// Language-block tokens with probability `1 − shared_token_prob`,
    /// otherwise a shared token; all draws uniform within their block.
    pub fn sample_sentence(&self, lang: usize, len: usize, seed: u64) -> Result<TokenSequence> {
        if lang >= self.num_languages() {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        if len == 0 {
            return Err(Error::invalid("sentence length must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = self.language_block(lang);
        let shared = self.text_shared_block();
        let ids = (0..len)
            .map(|_| {
                if rng.random_bool(self.config.shared_token_prob) {
                    rng.random_range(shared.clone())
                } else {
                    rng.random_range(block.clone())
                }
            })
            .collect();
        Ok(TokenSequence::tagged(ids, self.language_name(lang)))
    }

    /// Tied SAE whose decoder is the planted dictionary. It is a ReLU SAE
    /// except that latents at or below [`ORACLE_THRESHOLD`] read as zero, so
    /// rounding residue on directions that did not fire is not counted as an
    /// activation.
    pub fn oracle_sae(&self) -> SaeParams {
        let w_dec = self.dictionary.clone();
        let n = w_dec.cols();
        SaeParams::new(
            w_dec.transpose(),
            vec![0.0; n],
            w_dec,
            vec![0.0; self.config.d_res],
            Nonlinearity::JumpRelu {
                theta: vec![ORACLE_THRESHOLD; n],
            },
        )
        .expect("dictionary is valid")
    }

    pub fn classifier(&self) -> OracleClassifier<'_> {
        OracleClassifier { world: self }
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let labels: Vec<f64> = self
            .labels
            .iter()
            .map(|l| match l {
                FeatureLabel::Specific { language, .. } => *language as f64,
                FeatureLabel::Agnostic => -1.0,
            })
            .collect();
        let mut c = TensorContainer::new()
            .with("dictionary", Tensor::from_matrix(&self.dictionary))?
            .with("labels", Tensor::from_vector(&labels))?
            .with("embeddings", Tensor::from_matrix(&self.embeddings))?;
        let value = serde_json::to_value(&self.config).map_err(|e| Error::Malformed(e.to_string()))?;
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                c.set_meta(k, v);
            }
        }
        Ok(c)
    }

    /// Rebuilds the world from its stored configuration and checks the
    /// stored tensors against the rebuild.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for (k, v) in c.metadata() {
            let parsed: serde_json::Value = serde_json::from_str(v)
                .map_err(|e| Error::Malformed(format!("world metadata {k}: {e}")))?;
            map.insert(k.to_string(), parsed);
        }
        let config: WorldConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Malformed(format!("world config: {e}")))?;
        let world = Self::new(config)?;
        let stored = world.to_container()?;
        for name in ["dictionary", "labels", "embeddings"] {
            let (a, b) = (c.require(name)?, stored.require(name)?);
            if a.dims != b.dims {
                return Err(Error::Malformed(format!("{name} dims do not match the configuration")));
            }
            let drift = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            if drift > 1e-5 {
                return Err(Error::Malformed(format!(
                    "{name} differs from the configuration by {drift}"
                )));
            }
        }
        Ok(world)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }

    fn fired_agnostic(&self, first_token: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.config.d_res];
        for (k, a) in self.agnostic_dirs.iter().enumerate() {
            if self.agnostic_fires(k, first_token) {
                axpy(self.config.agnostic_magnitude, a, &mut v);
            }
        }
        v
    }

    /// Whether agnostic feature `k` fires on sequences starting with `first_token`.
    pub fn agnostic_fires(&self, k: usize, first_token: usize) -> bool {
        let p = self.config.agnostic_fire_prob;
        p >= 1.0 || unit_uniform(mix(&[self.config.seed, k as u64, first_token as u64])) < p
    }

    fn noise(&self, token: usize, position: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
            self.config.seed,
            0x6E6F_6973_65,
            token as u64,
            position as u64,
        ]));
        (0..self.config.d_res)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.config.noise_sigma * z
            })
            .collect()
    }
}

/// Everything about one position that does not depend on the layer.
struct Position {
    coef: Vec<f64>,
    item: Option<usize>,
    base: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PlantedBackend {
    world: Arc<PlantedWorld>,
    vocab: VocabSpec,
}

impl PlantedBackend {
    pub fn new(world: Arc<PlantedWorld>) -> Self {
        let vocab = world.vocab();
        Self { world, vocab }
    }

    pub fn world(&self) -> &PlantedWorld {
        &self.world
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let v = self.world.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange { index: bad, len: v });
        }
        Ok(())
    }

    /// Positions `range` of `tokens`, built with one pass over the prefix.
    fn positions(&self, tokens: &[usize], range: Range<usize>) -> Vec<Position> {
        let w = &*self.world;
        let cfg = &w.config;
        let l_count = w.num_languages();
        let omega = cfg.context_mix;
        let sep = w.sep_token();
        let sep_at = tokens.iter().position(|&t| t == sep);
        let agnostic = w.fired_agnostic(tokens[0]);
        let mut counts = vec![0usize; l_count];
        let mut out = Vec::with_capacity(range.len());
        for (t, &tok) in tokens.iter().enumerate().take(range.end) {
            let lang = w.token_language(tok);
            if let Some(l) = lang {
                counts[l] += 1;
            }
            if t < range.start {
                continue;
            }
            let seen = (t + 1) as f64;
            let coef = (0..l_count)
                .map(|l| {
                    let own = if lang == Some(l) { 1.0 } else { 0.0 };
                    (1.0 - omega) * own + omega * counts[l] as f64 / seen
                })
                .collect();
            let item = sep_at.and_then(|p| {
                let j = t.checked_sub(p)?;
                (j < p).then(|| tokens[j])
            });
            let mut base = agnostic.clone();
            if let Some(it) = item {
                axpy(cfg.copy_strength, w.content.row(it), &mut base);
            }
            if cfg.noise_sigma > 0.0 {
                axpy(1.0, &w.noise(tok, t), &mut base);
            }
            out.push(Position { coef, item, base });
        }
        out
    }

    fn residual(&self, p: &Position, layer: usize) -> Vec<f64> {
        let w = &*self.world;
        let mut x = p.base.clone();
        let gain = w.config.specific_magnitude * w.layer_gain(layer);
        for (c, u) in p.coef.iter().zip(&w.language_dirs) {
            if *c != 0.0 {
                axpy(gain * c, u, &mut x);
            }
        }
        x
    }

    fn final_residual(
        &self,
        p: &Position,
        t: usize,
        last: usize,
        hook: Option<&dyn ResidualHook>,
    ) -> Result<Vec<f64>> {
        let top = self.world.config.num_layers - 1;
        let mut x = self.residual(p, top);
        if let Some(h) = hook {
            let applies = match h.positions() {
                HookPositions::All => true,
                HookPositions::Last => t == last,
            };
            if applies {
                if h.layer() > top {
                    return Err(Error::IndexOutOfRange {
                        index: h.layer(),
                        len: top + 1,
                    });
                }
                let before = self.residual(p, h.layer());
                let mut after = before.clone();
                h.apply(t, &mut after)?;
                for ((xi, a), b) in x.iter_mut().zip(&after).zip(&before) {
                    *xi += a - b;
                }
            }
        }
        Ok(x)
    }

    /// Content item copied at each position (for tests and diagnostics).
    pub fn copied_items(&self, tokens: &[usize]) -> Result<Vec<Option<usize>>> {
        self.check_tokens(tokens)?;
        Ok(self
            .positions(tokens, 0..tokens.len())
            .into_iter()
            .map(|p| p.item)
            .collect())
    }
}

impl ModelBackend for PlantedBackend {
    fn num_layers(&self) -> usize {
        self.world.config.num_layers
    }

    fn d_res(&self) -> usize {
        self.world.config.d_res
    }

    fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    fn residual_at_layer(&self, tokens: &[usize], layer: usize) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        if layer >= self.num_layers() {
            return Err(Error::IndexOutOfRange {
                index: layer,
                len: self.num_layers(),
            });
        }
        let d = self.d_res();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for p in self.positions(tokens, 0..tokens.len()) {
            data.extend(self.residual(&p, layer));
        }
        Matrix::new(tokens.len(), d, data)
    }

    fn logits(&self, tokens: &[usize], hook: Option<&dyn ResidualHook>) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let v = self.world.vocab_size();
        let last = tokens.len() - 1;
        let mut data = vec![0.0; tokens.len() * v];
        for (t, p) in self.positions(tokens, 0..tokens.len()).iter().enumerate() {
            let x = self.final_residual(p, t, last, hook)?;
            self.world.embeddings.matvec_into(&x, &mut data[t * v..(t + 1) * v]);
        }
        Matrix::new(tokens.len(), v, data)
    }

    fn next_token_logits(&self, tokens: &[usize], hook: Option<&dyn ResidualHook>) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let last = tokens.len() - 1;
        let p = self.positions(tokens, last..tokens.len());
        let x = self.final_residual(&p[0], last, last, hook)?;
        let mut out = vec![0.0; self.world.vocab_size()];
        self.world.embeddings.matvec_into(&x, &mut out);
        Ok(out)
    }
}

/// Majority-block language identification over the planted vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct OracleClassifier<'a> {
    world: &'a PlantedWorld,
}

impl LanguageClassifier for OracleClassifier<'_> {
    fn classify(&self, ids: &[usize]) -> Classification {
        if ids.is_empty() {
            return Classification::unknown();
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &id in ids {
            if let Some(l) = self.world.token_language(id) {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let winners: Vec<usize> = counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(&l, _)| l)
            .collect();
        if best == 0 || winners.len() != 1 {
            return Classification::unknown();
        }
        Classification {
            language: Some(self.world.language_name(winners[0]).to_string()),
            confidence: best as f64 / ids.len() as f64,
        }
    }
}
