// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run reports: tabular series written as CSV and one JSON document per run.
//!
//! Every real number is printed with 6 significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiment::{LangScores, MethodParams};
use crate::metrics::BLEU_VARIANT;

/// `x` with 6 significant digits, trailing zeros removed. Plain notation for
/// exponents in `[-5, 6)`, scientific otherwise.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `x` rounded to 6 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x.is_finite() {
        fmt_sig(x).parse().unwrap_or(x)
    } else {
        x
    }
}

/// Round every number in a JSON tree to 6 significant digits.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().and_then(|x| serde_json::Number::from_f64(round_sig(x))) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(m) => m.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with rounded numbers and a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Malformed(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_file(path, to_json_string(value)?.as_bytes())
}

fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Real(f64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => fmt_sig(*x),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        Error::check_dim(self.columns.len(), row.len())?;
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(std::io::Error::from)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(std::io::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, self.to_csv_string()?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCe {
    pub ablated: String,
    pub evaluated: String,
    pub layer: usize,
    pub ce_base: f64,
    pub ce_ablated: f64,
    pub delta: f64,
}

/// One run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub seed: u64,
    pub bleu_variant: String,
    pub ce_units: String,
    pub ablation_positions: String,
    pub steering_positions: String,
    /// Scores per method, then per target language.
    pub scores: BTreeMap<String, BTreeMap<String, LangScores>>,
    /// Configuration each method was scored at.
    pub best_params: BTreeMap<String, MethodParams>,
    /// Feature recovery per language against the planted truth.
    pub recovery: BTreeMap<String, Recovery>,
    pub delta_ce: Vec<DeltaCe>,
    pub flags: Vec<String>,
    pub config: Value,
}

impl EvalReport {
    pub fn new(run_id: impl Into<String>, seed: u64, config: Value) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            bleu_variant: BLEU_VARIANT.into(),
            ce_units: "nats/token".into(),
            ablation_positions: "all".into(),
            steering_positions: "last".into(),
            scores: BTreeMap::new(),
            best_params: BTreeMap::new(),
            recovery: BTreeMap::new(),
            delta_ce: Vec::new(),
            flags: Vec::new(),
            config,
        }
    }

    /// Check the product identity and metric ranges.
    pub fn validate(&self) -> Result<()> {
        for (m, per) in &self.scores {
            for (l, s) in per {
                if !(0.0..=1.0).contains(&s.acc) || !(0.0..=100.0).contains(&s.bleu) {
                    return Err(Error::invalid(format!("{m}/{l}: metric out of range")));
                }
                if (s.acc_x_bleu - s.acc * s.bleu).abs() > 1e-9 {
                    return Err(Error::invalid(format!("{m}/{l}: ACC×BLEU is not ACC·BLEU")));
                }
            }
        }
        for (l, r) in &self.recovery {
            if !(0.0..=1.0).contains(&r.precision) || !(0.0..=1.0).contains(&r.recall) {
                return Err(Error::invalid(format!("{l}: recovery out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_string(self)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_json(path, self)
    }
}
