// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive hyperparameter search on the validation split.
//!
//! Grid points are enumerated in a fixed order (layer percentile, then α, then
//! the method's own knobs) and scored by mean ACC×BLEU over the target
//! languages. The first point with the highest score wins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::experiment::{mean_acc_x_bleu, LangScores, Method, MethodParams, Pipeline, SplitKind};
use crate::report::{Cell, Table};

/// Search axes. Only the axes a method uses are enumerated for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub layer_percentiles: Vec<f64>,
    pub alphas: Vec<f64>,
    /// α values for the replacement-based methods.
    pub zhong_alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub top_ks: Vec<usize>,
    pub pca_ks: Vec<usize>,
    pub zhong_ks: Vec<usize>,
    pub anchor_percentiles: Vec<f64>,
    pub lda_shrinkages: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            layer_percentiles: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            alphas: vec![0.1, 0.5, 1.0, 2.5, 5.0, 10.0],
            zhong_alphas: vec![0.2, 0.6, 1.0, 1.4, 1.8, 2.0],
            taus: vec![0.8, 0.9, 1.0],
            top_ks: vec![1, 2, 100],
            pca_ks: vec![1, 4, 8, 16, 32],
            zhong_ks: vec![4, 8, 16],
            anchor_percentiles: vec![0.375, 0.5, 0.625],
            lda_shrinkages: vec![1e-3],
        }
    }
}

impl SweepGrid {
    /// A grid holding exactly `p`.
    pub fn single(p: &MethodParams) -> Self {
        Self {
            layer_percentiles: vec![p.layer_percentile],
            alphas: vec![p.alpha],
            zhong_alphas: vec![p.alpha],
            taus: vec![p.tau],
            top_ks: vec![p.top_k],
            pca_ks: vec![p.pca_k],
            zhong_ks: vec![p.zhong_k],
            anchor_percentiles: vec![p.anchor_percentile],
            lda_shrinkages: vec![p.lda_shrinkage],
        }
    }

    fn alphas_for(&self, method: Method) -> &[f64] {
        if method.is_zhong() {
            &self.zhong_alphas
        } else {
            &self.alphas
        }
    }

    /// Grid points for `method`, in search order.
    pub fn points(&self, method: Method) -> Result<Vec<MethodParams>> {
        self.points_from(method, &MethodParams::default())
    }

    /// Grid points with the knobs `method` ignores taken from `base`.
    pub fn points_from(&self, method: Method, base: &MethodParams) -> Result<Vec<MethodParams>> {
        let mut pts: Vec<MethodParams> = Vec::new();
        let check = |name: &str, n: usize| {
            if n == 0 {
                Err(Error::invalid(format!("sweep axis {name} is empty")))
            } else {
                Ok(())
            }
        };
        check("layer_percentiles", self.layer_percentiles.len())?;
        check("alphas", self.alphas_for(method).len())?;
        for &layer_percentile in &self.layer_percentiles {
            for &alpha in self.alphas_for(method) {
                pts.push(MethodParams {
                    layer_percentile,
                    alpha,
                    ..base.clone()
                });
            }
        }
        let expand = |pts: Vec<MethodParams>, n: usize, set: &dyn Fn(&mut MethodParams, usize)| {
            pts.into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut q = p.clone();
                        set(&mut q, i);
                        q
                    })
                })
                .collect::<Vec<_>>()
        };
        match method {
            Method::Langfir | Method::LangfirNoRemoval => {
                check("taus", self.taus.len())?;
                check("top_ks", self.top_ks.len())?;
                pts = expand(pts, self.taus.len(), &|p, i| p.tau = self.taus[i]);
                pts = expand(pts, self.top_ks.len(), &|p, i| p.top_k = self.top_ks[i]);
            }
            Method::Pca => {
                check("pca_ks", self.pca_ks.len())?;
                pts = expand(pts, self.pca_ks.len(), &|p, i| p.pca_k = self.pca_ks[i]);
            }
            Method::Lda => {
                check("lda_shrinkages", self.lda_shrinkages.len())?;
                pts = expand(pts, self.lda_shrinkages.len(), &|p, i| {
                    p.lda_shrinkage = self.lda_shrinkages[i]
                });
            }
            Method::ZhongMono => {
                check("zhong_ks", self.zhong_ks.len())?;
                check("anchor_percentiles", self.anchor_percentiles.len())?;
                pts = expand(pts, self.zhong_ks.len(), &|p, i| p.zhong_k = self.zhong_ks[i]);
                pts = expand(pts, self.anchor_percentiles.len(), &|p, i| {
                    p.anchor_percentile = self.anchor_percentiles[i]
                });
            }
            Method::ZhongPara => {
                check("zhong_ks", self.zhong_ks.len())?;
                pts = expand(pts, self.zhong_ks.len(), &|p, i| p.zhong_k = self.zhong_ks[i]);
            }
            Method::Diffmean | Method::GatedDiffmean | Method::SaeDiffmean => {}
        }
        Ok(pts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: MethodParams,
    pub scores: BTreeMap<String, LangScores>,
    pub mean_acc_x_bleu: f64,
    /// Set when the point could not be evaluated.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: Method,
    pub best: MethodParams,
    pub best_score: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        self.rows
            .iter()
            .find(|r| r.error.is_none() && r.params == self.best)
            .expect("best point is in the table")
    }

    pub fn table(&self) -> Table {
        let langs: Vec<String> = self
            .rows
            .iter()
            .find(|r| r.error.is_none())
            .map(|r| r.scores.keys().cloned().collect())
            .unwrap_or_default();
        let mut cols: Vec<String> = [
            "method",
            "layer_percentile",
            "alpha",
            "tau",
            "top_k",
            "pca_k",
            "zhong_k",
            "anchor_percentile",
            "lda_shrinkage",
            "mean_acc_x_bleu",
        ]
        .map(String::from)
        .to_vec();
        for l in &langs {
            cols.push(format!("acc_{l}"));
            cols.push(format!("bleu_{l}"));
        }
        cols.push("error".into());
        let mut t = Table {
            columns: cols,
            rows: Vec::new(),
        };
        for r in &self.rows {
            let p = &r.params;
            let mut row: Vec<Cell> = vec![
                self.method.as_str().into(),
                p.layer_percentile.into(),
                p.alpha.into(),
                p.tau.into(),
                p.top_k.into(),
                p.pca_k.into(),
                p.zhong_k.into(),
                p.anchor_percentile.into(),
                p.lda_shrinkage.into(),
                r.mean_acc_x_bleu.into(),
            ];
            for l in &langs {
                match r.scores.get(l) {
                    Some(s) => {
                        row.push(s.acc.into());
                        row.push(s.bleu.into());
                    }
                    None => {
                        row.push("".into());
                        row.push("".into());
                    }
                }
            }
            row.push(r.error.clone().unwrap_or_default().into());
            t.rows.push(row);
        }
        t
    }
}

/// Evaluate every grid point of `method` on the validation split.
pub fn run_sweep(pipeline: &Pipeline, method: Method, grid: &SweepGrid) -> Result<SweepResult> {
    let points = grid.points(method)?;
    let rows = exec::map_range(pipeline.exec(), points.len(), |i| {
        let params = points[i].clone();
        match pipeline.evaluate_method(method, &params, SplitKind::Validation) {
            Ok(scores) => SweepRow {
                mean_acc_x_bleu: mean_acc_x_bleu(&scores),
                params,
                scores,
                error: None,
            },
            Err(e) => {
                log::debug!("{method} at {params:?}: {e}");
                SweepRow {
                    params,
                    scores: BTreeMap::new(),
                    mean_acc_x_bleu: 0.0,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.error.is_none()) {
        if best.is_none_or(|b| r.mean_acc_x_bleu > rows[b].mean_acc_x_bleu) {
            best = Some(i);
        }
    }
    let best = best.ok_or(Error::SweepFailed)?;
    Ok(SweepResult {
        method,
        best: rows[best].params.clone(),
        best_score: rows[best].mean_acc_x_bleu,
        rows,
    })
}
