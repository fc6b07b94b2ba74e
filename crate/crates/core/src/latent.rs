//! Row-major tables of vectors with the record they came from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::domain::UnitId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMeta {
    pub unit: UnitId,
    pub time: i64,
    pub action: usize,
    /// Observed outcome; `NaN` for query rows whose outcome must not be read.
    pub outcome: f64,
}

/// Vectors (latent states or raw features) with one [`RowMeta`] per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    dim: usize,
    values: Vec<f64>,
    meta: Vec<RowMeta>,
}

impl LatentTable {
    pub fn new(dim: usize) -> Self {
        LatentTable { dim, values: Vec::new(), meta: Vec::new() }
    }

    pub fn from_rows(dim: usize, values: Vec<f64>, meta: Vec<RowMeta>) -> Result<Self> {
        if values.len() != dim * meta.len() {
            return Err(Error::Dimension { expected: dim * meta.len(), got: values.len() });
        }
        Ok(LatentTable { dim, values, meta })
    }

    pub fn push(&mut self, z: &[f64], meta: RowMeta) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: z.len() });
        }
        self.values.extend_from_slice(z);
        self.meta.push(meta);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> &RowMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &RowMeta)> + '_ {
        self.values.chunks_exact(self.dim.max(1)).zip(&self.meta)
    }

    /// Rows whose action equals `action`.
    pub fn stratum(&self, action: usize) -> impl Iterator<Item = usize> + '_ {
        self.meta.iter().enumerate().filter(move |(_, m)| m.action == action).map(|(i, _)| i)
    }

    pub fn subset(&self, rows: &[usize]) -> LatentTable {
        let mut out = LatentTable::new(self.dim);
        for &i in rows {
            out.values.extend_from_slice(self.row(i));
            out.meta.push(self.meta[i]);
        }
        out
    }

    /// CSV with columns `unit,time,action,outcome,z0..z{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "unit,time,action,outcome")?;
        for j in 0..self.dim {
            write!(w, ",z{j}")?;
        }
        writeln!(w)?;
        for (z, m) in self.iter() {
            write!(w, "{},{},{},{}", m.unit, m.time, m.action, m.outcome)?;
            for v in z {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

// Four running sums let the compiler keep independent lanes busy; the
// summation order is fixed, so results stay deterministic.
fn lanes(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let n = a.len().min(b.len());
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut s = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            s[l] += f(x[l], y[l]);
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| f(*x, *y)).sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| (x - y) * (x - y))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| x * y)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}
