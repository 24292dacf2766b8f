// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder parameters and the encode/decode maps.
//!
//! ```text
//! encode:  f(x) = σ(W_enc x + b_enc)      σ ∈ {ReLU, JumpReLU(θ), TopK(K)}
//! decode:  x̂(f) = W_dec f + b_dec
//! ```
//!
//! Column `j` of `W_dec` is the residual-space direction written by latent
//! `j` (its *feature direction*).
//!
//! TopK applies ReLU first and then keeps the `K` largest survivors (ties by
//! ascending index). Released TopK SAEs do not all agree on this order; when
//! ingesting one that selects before rectifying, results can differ on rows
//! with fewer than `K` positive pre-activations.

use std::fmt;

use crate::activations::ActivationMatrix;
use crate::container::{Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::numerics::{dot, topk_indices, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum Nonlinearity {
    Relu,
    /// Per-latent thresholds; output is `z·1[z > θ]`.
    JumpRelu { theta: Vec<f64> },
    TopK { k: usize },
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::Relu => write!(f, "relu"),
            Nonlinearity::JumpRelu { .. } => write!(f, "jumprelu"),
            Nonlinearity::TopK { .. } => write!(f, "topk"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    w_enc: Matrix,
    b_enc: Vec<f64>,
    w_dec: Matrix,
    b_dec: Vec<f64>,
    nonlinearity: Nonlinearity,
}

impl SaeParams {
    /// `w_enc` is `d_sae×d_res`, `w_dec` is `d_res×d_sae`.
    pub fn new(
        w_enc: Matrix,
        b_enc: Vec<f64>,
        w_dec: Matrix,
        b_dec: Vec<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let (d_sae, d_res) = (w_enc.rows(), w_enc.cols());
        if d_sae == 0 || d_res == 0 {
            return Err(Error::EmptyInput);
        }
        Error::check_dim(d_sae, b_enc.len())?;
        Error::check_dim(d_res, w_dec.rows())?;
        Error::check_dim(d_sae, w_dec.cols())?;
        Error::check_dim(d_res, b_dec.len())?;
        if b_enc.iter().chain(&b_dec).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sae bias"));
        }
        match &nonlinearity {
            Nonlinearity::Relu => {}
            Nonlinearity::JumpRelu { theta } => {
                Error::check_dim(d_sae, theta.len())?;
                if theta.iter().any(|t| !t.is_finite() || *t < 0.0) {
                    return Err(Error::invalid("jumprelu thresholds must be finite and >= 0"));
                }
            }
            Nonlinearity::TopK { k } => {
                if *k == 0 || *k > d_sae {
                    return Err(Error::invalid(format!(
                        "topk k_active must lie in [1, {d_sae}], got {k}"
                    )));
                }
            }
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            nonlinearity,
        })
    }

    /// Tied-weight ReLU SAE with zero biases and `w_enc = w_decᵀ`.
    pub fn tied_relu(w_dec: Matrix) -> Result<Self> {
        let w_enc = w_dec.transpose();
        let (d_sae, d_res) = (w_enc.rows(), w_enc.cols());
        Self::new(
            w_enc,
            vec![0.0; d_sae],
            w_dec,
            vec![0.0; d_res],
            Nonlinearity::Relu,
        )
    }

    pub fn d_res(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn w_dec(&self) -> &Matrix {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.d_res(), x.len())?;
        let mut z: Vec<f64> = self
            .w_enc
            .iter_rows()
            .zip(&self.b_enc)
            .map(|(w, b)| dot(w, x) + b)
            .collect();
        match &self.nonlinearity {
            Nonlinearity::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Nonlinearity::JumpRelu { theta } => {
                for (v, t) in z.iter_mut().zip(theta) {
                    if *v <= *t {
                        *v = 0.0;
                    }
                }
            }
            Nonlinearity::TopK { k } => {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                let keep = topk_indices(&z, *k)?;
                let mut out = vec![0.0; z.len()];
                for i in keep {
                    out[i] = z[i];
                }
                z = out;
            }
        }
        Ok(z)
    }

    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.decode_without_bias(f)?;
        for (xi, b) in x.iter_mut().zip(&self.b_dec) {
            *xi += b;
        }
        Ok(x)
    }

    /// `W_dec f`, skipping zero latents.
    pub fn decode_without_bias(&self, f: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.d_sae(), f.len())?;
        let mut x = vec![0.0; self.d_res()];
        for (i, xi) in x.iter_mut().enumerate() {
            let row = self.w_dec.row(i);
            *xi = f
                .iter()
                .zip(row)
                .filter(|(fj, _)| **fj != 0.0)
                .map(|(fj, w)| fj * w)
                .sum();
        }
        Ok(x)
    }

    /// Column `j` of `W_dec`.
    pub fn feature_direction(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.d_sae() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.d_sae(),
            });
        }
        Ok(self.w_dec.column(j))
    }

    pub fn encode_matrix(&self, m: &ActivationMatrix) -> Result<LatentMatrix> {
        self.encode_rows(m.data(), Execution::default())
    }

    /// Encode every row; row order is preserved under both execution modes.
    pub fn encode_rows(&self, m: &Matrix, exec: Execution) -> Result<LatentMatrix> {
        Error::check_dim(self.d_res(), m.cols())?;
        let rows = exec::try_map_range(exec, m.rows(), |i| self.encode(m.row(i)))?;
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(LatentMatrix(Matrix::new(m.rows(), self.d_sae(), data)?))
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new()
            .with("w_enc", Tensor::from_matrix(&self.w_enc))?
            .with("b_enc", Tensor::from_vector(&self.b_enc))?
            .with("w_dec", Tensor::from_matrix(&self.w_dec))?
            .with("b_dec", Tensor::from_vector(&self.b_dec))?;
        match &self.nonlinearity {
            Nonlinearity::Relu => {}
            Nonlinearity::JumpRelu { theta } => c.push("theta", Tensor::from_vector(theta))?,
            Nonlinearity::TopK { k } => c.set_meta("k_active", k),
        }
        c.set_meta("nonlinearity", &self.nonlinearity);
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let nonlinearity = match c.meta("nonlinearity").unwrap_or("relu") {
            "relu" => Nonlinearity::Relu,
            "jumprelu" => Nonlinearity::JumpRelu {
                theta: c.require("theta")?.to_vector()?,
            },
            "topk" => Nonlinearity::TopK {
                k: c.meta_parse("k_active")?,
            },
            other => {
                return Err(Error::Malformed(format!("unknown nonlinearity {other:?}")));
            }
        };
        Self::new(
            c.require("w_enc")?.to_matrix()?,
            c.require("b_enc")?.to_vector()?,
            c.require("w_dec")?.to_matrix()?,
            c.require("b_dec")?.to_vector()?,
            nonlinearity,
        )
    }
}

/// Stacked SAE latents, `N×d_sae`, all entries nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix(Matrix);

impl LatentMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("latent activations must be nonnegative"));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.0.cols()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> LatentMatrix {
        let idx: Vec<usize> = (0..n.min(self.0.rows())).collect();
        LatentMatrix(self.0.select_rows(&idx))
    }
}
