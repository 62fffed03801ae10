use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::VariableCatalog;
use crate::tensor::{Scalar, Tensor};

/// Per-channel mean and standard deviation, keyed by channel name.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Statistics of every channel of `ds` over all its frames and cells.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let c = ds.channels();
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for cell in ds.data().chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(cell) {
                *s += v as f64;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for cell in ds.data().chunks_exact(c) {
            for ((s, &v), m) in sq.iter_mut().zip(cell).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let names = ds.catalog.channel_names();
        for (n, s) in names.iter().zip(&std) {
            if !(*s > 0.0) {
                return Err(Error::Domain {
                    op: "normalization",
                    detail: format!("channel `{n}` has zero variance"),
                });
            }
        }
        Ok(NormalizationStats { names, mean, std })
    }

    /// Keep these statistics and append entries of `other` for channels not
    /// present yet.
    pub fn extended(&self, other: &NormalizationStats) -> Self {
        let mut out = self.clone();
        for (i, n) in other.names.iter().enumerate() {
            if !out.names.contains(n) {
                out.names.push(n.clone());
                out.mean.push(other.mean[i]);
                out.std.push(other.std[i]);
            }
        }
        out
    }

    /// Statistics reordered to `catalog`'s channels.
    pub fn for_catalog(&self, catalog: &VariableCatalog) -> Result<Self> {
        let mut out = NormalizationStats {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for n in catalog.channel_names() {
            let i = self
                .names
                .iter()
                .position(|m| *m == n)
                .ok_or_else(|| Error::UnknownChannel(n.clone()))?;
            out.names.push(n);
            out.mean.push(self.mean[i]);
            out.std.push(self.std[i]);
        }
        Ok(out)
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.names.len() {
            return Err(Error::CatalogMismatch {
                expected: self.names.len(),
                actual: channels,
            });
        }
        Ok(())
    }

    fn check_catalog(&self, catalog: &VariableCatalog) -> Result<()> {
        self.check(catalog.channels())?;
        if catalog.channel_names() != self.names {
            return Err(Error::Config(
                "normalization channels do not match the catalog".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, ds: &Dataset) -> Result<Dataset> {
        self.check_catalog(&ds.catalog)?;
        let mut out = ds.clone();
        let c = self.names.len();
        for cell in out.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in cell.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(out)
    }

    pub fn normalize_field<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply<T: Scalar>(&self, x: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<T>> {
        let c = x.last_dim();
        self.check(c)?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| T::of(f(v.f64(), self.mean[i % c], self.std[i % c])))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// One `name mean std` line per channel.
    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((n, m), s)| format!("{n} {m:e} {s:e}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = NormalizationStats {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Malformed(format!("stats line {}: `{line}`", ln + 1));
            let mut it = line.split_whitespace();
            let (Some(n), Some(m), Some(s), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            let m: f64 = m.parse().map_err(|_| bad())?;
            let s: f64 = s.parse().map_err(|_| bad())?;
            if !(s > 0.0) || !m.is_finite() {
                return Err(bad());
            }
            out.names.push(n.to_string());
            out.mean.push(m);
            out.std.push(s);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
