// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors and the baseline builders compared against LangFIR.
//!
//! Add-mode vectors are unit-norm directions added as `x + α·v`.
//! Replace-mode vectors (the Zhong baselines) overwrite a set of residual
//! coordinates with `α·value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationMatrix;
use crate::container::{read_container, write_container, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::features::mean_latent;
use crate::numerics::{dot, l2_normalize, norm, symmetric_eigen, topk_indices, Matrix};
use crate::sae::{LatentMatrix, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorMode {
    Add,
    Replace,
}

impl VectorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorMode::Add => "add",
            VectorMode::Replace => "replace",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    /// Unit direction for add mode; replacement values scattered into a
    /// `d_res` vector for replace mode.
    pub values: Vec<f64>,
    pub method: String,
    pub layer: usize,
    pub mode: VectorMode,
    /// Replace mode: overwritten coordinates, unique and `< d_res`.
    pub dims: Vec<usize>,
    /// Replace mode: value per entry of `dims`.
    pub replace_values: Vec<f64>,
    /// SAE latents the vector was built from, when any.
    pub features: Vec<usize>,
}

impl SteeringVector {
    pub fn add(method: impl Into<String>, values: Vec<f64>, layer: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("steering vector"));
        }
        if (norm(&values) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("add-mode steering vector must have unit norm"));
        }
        Ok(Self {
            values,
            method: method.into(),
            layer,
            mode: VectorMode::Add,
            dims: Vec::new(),
            replace_values: Vec::new(),
            features: Vec::new(),
        })
    }

    pub fn replace(
        method: impl Into<String>,
        d_res: usize,
        dims: Vec<usize>,
        replace_values: Vec<f64>,
        layer: usize,
    ) -> Result<Self> {
        Error::check_dim(dims.len(), replace_values.len())?;
        let mut values = vec![0.0; d_res];
        let mut seen = vec![false; d_res];
        for (&d, &v) in dims.iter().zip(&replace_values) {
            if d >= d_res {
                return Err(Error::IndexOutOfRange { index: d, len: d_res });
            }
            if seen[d] {
                return Err(Error::invalid(format!("duplicate replace dimension {d}")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("replacement value"));
            }
            seen[d] = true;
            values[d] = v;
        }
        Ok(Self {
            values,
            method: method.into(),
            layer,
            mode: VectorMode::Replace,
            dims,
            replace_values,
            features: Vec::new(),
        })
    }

    pub fn d_res(&self) -> usize {
        self.values.len()
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new().with("vector", Tensor::from_vector(&self.values))?;
        if self.mode == VectorMode::Replace {
            c.push("dims", Tensor::from_indices(&self.dims))?;
            c.push("replace_values", Tensor::from_vector(&self.replace_values))?;
        }
        if !self.features.is_empty() {
            c.push("features", Tensor::from_indices(&self.features))?;
        }
        c.set_meta("method", &self.method);
        c.set_meta("layer", self.layer);
        c.set_meta("mode", self.mode.as_str());
        Ok(c)
    }

    /// Reads a vector back. Add-mode values are renormalised since the
    /// on-disk payload is single precision.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let values = c.require("vector")?.to_vector()?;
        let method = c.meta("method").unwrap_or("external").to_string();
        let layer = c.meta_parse("layer")?;
        let mut v = match c.meta("mode").unwrap_or("add") {
            "add" => Self::add(method, l2_normalize(&values)?, layer)?,
            "replace" => Self::replace(
                method,
                values.len(),
                c.require("dims")?.to_indices()?,
                c.require("replace_values")?.to_vector()?,
                layer,
            )?,
            other => return Err(Error::Malformed(format!("unknown vector mode {other:?}"))),
        };
        if let Some(t) = c.get("features") {
            v.features = t.to_indices()?;
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub pca_k: usize,
    pub zhong_k: usize,
    pub zhong_anchor_percentile: f64,
    pub lda_shrinkage: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            pca_k: 1,
            zhong_k: 8,
            zhong_anchor_percentile: 0.5,
            lda_shrinkage: 1e-3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pca_k == 0 || self.zhong_k == 0 {
            return Err(Error::ZeroK);
        }
        if !(self.zhong_anchor_percentile > 0.0 && self.zhong_anchor_percentile < 1.0) {
            return Err(Error::invalid("zhong anchor percentile must lie in (0, 1)"));
        }
        if !(self.lda_shrinkage >= 0.0 && self.lda_shrinkage.is_finite()) {
            return Err(Error::invalid("lda shrinkage must be >= 0"));
        }
        Ok(())
    }
}

/// `normalize(mean(target) − mean(source))`.
pub fn diffmean(target: &ActivationMatrix, source: &ActivationMatrix) -> Result<SteeringVector> {
    Error::check_dim(target.d_res(), source.d_res())?;
    let delta: Vec<f64> = target
        .mean()
        .iter()
        .zip(source.mean())
        .map(|(t, s)| t - s)
        .collect();
    SteeringVector::add("diffmean", l2_normalize(&delta)?, target.layer)
}

/// `normalize(W_dec·(mean_latent(target) − mean_latent(source)))`.
pub fn sae_diffmean(
    target: &LatentMatrix,
    source: &LatentMatrix,
    p: &SaeParams,
    layer: usize,
) -> Result<SteeringVector> {
    Error::check_dim(target.d_sae(), source.d_sae())?;
    Error::check_dim(p.d_sae(), target.d_sae())?;
    let delta: Vec<f64> = mean_latent(target)?
        .iter()
        .zip(mean_latent(source)?)
        .map(|(t, s)| t - s)
        .collect();
    let raw = p.decode_without_bias(&delta)?;
    SteeringVector::add("sae-diffmean", l2_normalize(&raw)?, layer)
}

fn scatter(m: &ActivationMatrix) -> (Vec<f64>, Matrix) {
    let mu = m.mean();
    let d = m.d_res();
    let mut s = Matrix::zeros(d, d);
    for row in m.data().iter_rows() {
        let c: Vec<f64> = row.iter().zip(&mu).map(|(x, u)| x - u).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            let out = s.row_mut(i);
            for j in 0..d {
                out[j] += c[i] * c[j];
            }
        }
    }
    (mu, s)
}

/// Relative eigenvalue floor below which a direction counts as absent.
const RANK_TOL: f64 = 1e-12;

/// Singular-value-weighted sum of the top-`k` principal directions, each
/// oriented to have nonnegative dot product with the uncentred mean.
pub fn pca_vector(target: &ActivationMatrix, k: usize) -> Result<SteeringVector> {
    if k == 0 {
        return Err(Error::ZeroK);
    }
    let (n, d) = (target.n_samples(), target.d_res());
    if n < 2 {
        return Err(Error::invalid("pca needs at least two samples"));
    }
    if k > (n - 1).min(d) {
        return Err(Error::RankDeficient {
            needed: k,
            found: (n - 1).min(d),
        });
    }
    let (mu, s) = scatter(target);
    let (evals, evecs) = symmetric_eigen(&s)?;
    let top = evals[0].max(0.0);
    let found = evals
        .iter()
        .take_while(|&&l| top > 0.0 && l > top * RANK_TOL)
        .count();
    if found < k {
        return Err(Error::RankDeficient { needed: k, found });
    }
    let mut v = vec![0.0; d];
    for (lambda, u) in evals.iter().zip(&evecs).take(k) {
        // Eigenvalues of the scatter matrix are squared singular values.
        let sigma = lambda.sqrt();
        let sign = if dot(u, &mu) < 0.0 { -1.0 } else { 1.0 };
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi += sign * sigma * ui;
        }
    }
    SteeringVector::add("pca", l2_normalize(&v)?, target.layer)
}

/// `normalize(S_w'⁻¹(μ_target − μ_others))` with
/// `S_w' = S_w + shrinkage·(tr(S_w)/d)·I`.
pub fn lda_vector(
    target: &ActivationMatrix,
    others: &ActivationMatrix,
    shrinkage: f64,
) -> Result<SteeringVector> {
    Error::check_dim(target.d_res(), others.d_res())?;
    if target.n_samples() < 2 || others.n_samples() < 2 {
        return Err(Error::invalid("lda needs at least two samples per class"));
    }
    if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
        return Err(Error::invalid("lda shrinkage must be >= 0"));
    }
    let d = target.d_res();
    let (mu_t, s_t) = scatter(target);
    let (mu_o, s_o) = scatter(others);
    let dof = (target.n_samples() + others.n_samples() - 2) as f64;
    let mut sw = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sw.set(i, j, (s_t.get(i, j) + s_o.get(i, j)) / dof);
        }
    }
    let trace: f64 = (0..d).map(|i| sw.get(i, i)).sum();
    let ridge = shrinkage * trace / d as f64;
    for i in 0..d {
        sw.set(i, i, sw.get(i, i) + ridge);
    }
    let delta: Vec<f64> = mu_t.iter().zip(&mu_o).map(|(a, b)| a - b).collect();
    let (evals, evecs) = symmetric_eigen(&sw)?;
    let top = evals[0];
    if !(top > 0.0) || evals[d - 1] <= top * RANK_TOL {
        return Err(Error::Singular);
    }
    let mut v = vec![0.0; d];
    for (lambda, u) in evals.iter().zip(&evecs) {
        let c = dot(u, &delta) / lambda;
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi += c * ui;
        }
    }
    SteeringVector::add("lda", l2_normalize(&v)?, target.layer)
}

fn zhong(
    method: &str,
    reference: &ActivationMatrix,
    target_final: &ActivationMatrix,
    k: usize,
) -> Result<SteeringVector> {
    Error::check_dim(reference.d_res(), target_final.d_res())?;
    let d = target_final.d_res();
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if k > d {
        return Err(Error::invalid(format!("zhong k={k} exceeds d_res={d}")));
    }
    let fin = target_final.mean();
    let delta: Vec<f64> = fin
        .iter()
        .zip(reference.mean())
        .map(|(f, r)| (f - r).abs())
        .collect();
    let dims = topk_indices(&delta, k)?;
    let values = dims.iter().map(|&i| fin[i]).collect();
    SteeringVector::replace(method, d, dims, values, target_final.layer)
}

/// Dimensions that change most between an anchor layer and the final layer
/// on target-language text; replacement values are the final-layer means.
pub fn zhong_mono(
    target_anchor: &ActivationMatrix,
    target_final: &ActivationMatrix,
    k: usize,
) -> Result<SteeringVector> {
    zhong("zhong-mono", target_anchor, target_final, k)
}

/// Dimensions that differ most between parallel English and target text at
/// the final layer; replacement values are the target means.
pub fn zhong_para(
    english_final: &ActivationMatrix,
    target_final: &ActivationMatrix,
    k: usize,
) -> Result<SteeringVector> {
    zhong("zhong-para", english_final, target_final, k)
}

/// True iff either gate feature is active.
pub fn gated_gate(latent: &[f64], source_top2: (usize, usize)) -> bool {
    latent[source_top2.0] > 0.0 || latent[source_top2.1] > 0.0
}
