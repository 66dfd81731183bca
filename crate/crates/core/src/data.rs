//! Observational and experimental samples, standardization, and the grouped
//! count representation used for training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Observational,
    Experimental,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Observational => "observational",
            Regime::Experimental => "experimental",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "observational" | "obs" => Some(Regime::Observational),
            "experimental" | "exp" => Some(Regime::Experimental),
            _ => None,
        }
    }
}

/// One emitted unit: observed covariates, treatment, outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeSample<'a> {
    pub z_obs: &'a [f64],
    pub x: u8,
    pub y: u8,
    pub regime: Regime,
}

/// Samples from a single regime, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub regime: Regime,
    pub dim: usize,
    /// Row-major `len × dim`.
    pub covariates: Vec<f64>,
    pub x: Vec<u8>,
    pub y: Vec<u8>,
}

impl Dataset {
    pub fn new(regime: Regime, dim: usize) -> Self {
        Self {
            regime,
            dim,
            covariates: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn with_capacity(regime: Regime, dim: usize, n: usize) -> Self {
        Self {
            regime,
            dim,
            covariates: Vec::with_capacity(n * dim),
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, z: &[f64], x: u8, y: u8) {
        debug_assert_eq!(z.len(), self.dim);
        self.covariates.extend_from_slice(z);
        self.x.push(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sample(&self, i: usize) -> RegimeSample<'_> {
        RegimeSample {
            z_obs: self.row(i),
            x: self.x[i],
            y: self.y[i],
            regime: self.regime,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = RegimeSample<'_>> {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::with_capacity(self.regime, self.dim, idx.len());
        for &i in idx {
            out.push(self.row(i), self.x[i], self.y[i]);
        }
        out
    }

    /// Seeded shuffle split into `(train, validation)`.
    pub fn split(&self, validation_fraction: f64, rng: &mut impl Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_val = ((self.len() as f64) * validation_fraction).floor() as usize;
        let n_val = n_val.min(self.len().saturating_sub(1));
        let (val, train) = idx.split_at(n_val);
        (self.select(train), self.select(val))
    }

    /// Writes `x,y,z0..z{d-1}` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((0..self.dim).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.dim + 2);
        for s in self.samples() {
            record.clear();
            record.push(s.x.to_string());
            record.push(s.y.to_string());
            record.extend(s.z_obs.iter().map(|v| format_float(*v)));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R, regime: Regime) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "x" || &header[1] != "y" {
            return Err(Error::InvalidInput(
                "dataset header must start with `x,y`".into(),
            ));
        }
        let dim = header.len() - 2;
        let mut out = Dataset::new(regime, dim);
        let mut z = vec![0.0; dim];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_bit = |s: &str| -> Result<u8> {
                match s.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::InvalidInput(format!(
                        "row {}: expected binary value, found `{other}`",
                        line + 1
                    ))),
                }
            };
            let x = parse_bit(&rec[0])?;
            let y = parse_bit(&rec[1])?;
            for (j, dst) in z.iter_mut().enumerate() {
                *dst = parse_float(&rec[j + 2], line + 1)?;
            }
            out.push(&z, x, y);
        }
        Ok(out)
    }
}

pub(crate) fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub(crate) fn parse_float(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("row {line}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("row {line}: non-finite value")));
    }
    Ok(v)
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over the rows of all `sets`.
    /// Constant columns get unit scale.
    pub fn fit(sets: &[&Dataset]) -> Result<Self> {
        let dim = sets.first().ok_or(Error::Empty("dataset list"))?.dim;
        let mut n = 0.0;
        let mut mean = vec![0.0; dim];
        for s in sets {
            ensure_dim("covariate columns", dim, s.dim)?;
            for i in 0..s.len() {
                for (m, v) in mean.iter_mut().zip(s.row(i)) {
                    *m += v;
                }
            }
            n += s.len() as f64;
        }
        if n == 0.0 {
            return Err(Error::Empty("training set"));
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in sets {
            for i in 0..s.len() {
                for ((acc, v), m) in var.iter_mut().zip(s.row(i)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(z).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) / s;
        }
    }

    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.apply(z, &mut out);
        out
    }

    /// Standardizes a row-major block.
    pub fn transform_rows(&self, rows: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; rows.len()];
        for (src, dst) in rows.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.apply(src, dst);
        }
        out
    }
}

/// Training data keyed by distinct covariate row.
///
/// Each group carries observational counts and experimental counts, both in
/// `2x + y` cell order. Loss terms over raw rows are sums over groups weighted
/// by these counts, so full-batch objectives are identical to the row form.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedData {
    pub dim: usize,
    /// Standardized covariates, row-major `groups × dim`.
    pub z: Vec<f64>,
    pub obs: Vec<[f64; 4]>,
    pub exp: Vec<[f64; 4]>,
}

impl GroupedData {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            z: Vec::new(),
            obs: Vec::new(),
            exp: Vec::new(),
        }
    }

    /// Groups rows of both regimes by exact covariate value, in order of
    /// first appearance (observational rows first).
    pub fn from_datasets(
        obs: &Dataset,
        exp: &Dataset,
        standardizer: &Standardizer,
    ) -> Result<Self> {
        ensure_dim("covariate columns", obs.dim, exp.dim)?;
        ensure_dim("standardizer", obs.dim, standardizer.dim())?;
        let dim = obs.dim;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut raw: Vec<f64> = Vec::new();
        let mut out = Self::empty(dim);
        for set in [obs, exp] {
            for s in set.samples() {
                let key: Vec<u64> = s.z_obs.iter().map(|v| v.to_bits()).collect();
                let g = *index.entry(key).or_insert_with(|| {
                    raw.extend_from_slice(s.z_obs);
                    out.obs.push([0.0; 4]);
                    out.exp.push([0.0; 4]);
                    out.obs.len() - 1
                });
                let cell = (2 * s.x + s.y) as usize;
                match set.regime {
                    Regime::Observational => out.obs[g][cell] += 1.0,
                    Regime::Experimental => out.exp[g][cell] += 1.0,
                }
            }
        }
        out.z = standardizer.transform_rows(&raw);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.z[g * self.dim..(g + 1) * self.dim]
    }

    pub fn n_obs(&self) -> f64 {
        self.obs.iter().flatten().sum()
    }

    pub fn n_exp(&self) -> f64 {
        self.exp.iter().flatten().sum()
    }

    pub fn gather(&self, idx: &[usize]) -> GroupedData {
        let mut out = GroupedData::empty(self.dim);
        out.z.reserve(idx.len() * self.dim);
        for &g in idx {
            out.z.extend_from_slice(self.row(g));
            out.obs.push(self.obs[g]);
            out.exp.push(self.exp[g]);
        }
        out
    }

    /// Shuffled mini-batches holding roughly `batch_rows` raw rows each.
    pub fn batches(&self, batch_rows: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let mut out = Vec::new();
        let mut current = Vec::new();
        let mut rows = 0.0;
        for g in idx {
            current.push(g);
            rows += self.obs[g].iter().sum::<f64>() + self.exp[g].iter().sum::<f64>();
            if rows >= batch_rows as f64 {
                out.push(std::mem::take(&mut current));
                rows = 0.0;
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Dataset, Dataset) {
        let mut obs = Dataset::new(Regime::Observational, 2);
        obs.push(&[0.0, 1.0], 1, 1);
        obs.push(&[0.0, 1.0], 0, 1);
        obs.push(&[1.0, 1.0], 1, 0);
        let mut exp = Dataset::new(Regime::Experimental, 2);
        exp.push(&[0.0, 1.0], 1, 0);
        exp.push(&[2.0, 0.0], 0, 0);
        (obs, exp)
    }

    #[test]
    fn grouping_counts() {
        let (obs, exp) = toy();
        let g = GroupedData::from_datasets(&obs, &exp, &Standardizer::identity(2)).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.obs[0], [0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.exp[0], [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.exp[2], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.n_obs(), 3.0);
        assert_eq!(g.n_exp(), 2.0);
    }

    #[test]
    fn standardizer_zero_mean_unit_scale() {
        let (obs, exp) = toy();
        let s = Standardizer::fit(&[&obs, &exp]).unwrap();
        let rows: Vec<f64> = obs.covariates.iter().chain(&exp.covariates).copied().collect();
        let t = s.transform_rows(&rows);
        for j in 0..2 {
            let col: Vec<f64> = t.chunks(2).map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / 5.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let (obs, _) = toy();
        let mut buf = Vec::new();
        obs.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&buf[..], Regime::Observational).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn batches_cover_every_group_once() {
        let (obs, exp) = toy();
        let g = GroupedData::from_datasets(&obs, &exp, &Standardizer::identity(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = g.batches(2, &mut rng);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }
}
