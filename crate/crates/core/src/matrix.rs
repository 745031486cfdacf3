use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows differ in length".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} row {} column {}", i / self.cols.max(1), i % self.cols.max(1)))),
            None => Ok(()),
        }
    }

    /// Saves as a single tensor named `name` with `header` merged into the
    /// container header.
    pub fn save(&self, path: &Path, name: &str, mut header: Value) -> Result<()> {
        if let Value::Object(m) = &mut header {
            m.insert("tensor".into(), json!(name));
        }
        let mut f = TensorFile::new(header);
        f.push(Tensor::new(name, vec![self.rows, self.cols], self.data.clone())?);
        f.save(path)
    }

    /// Loads the matrix saved by [`Self::save`] with its header.
    pub fn load(path: &Path, name: &str) -> Result<(Self, Value)> {
        let mut f = TensorFile::load(path)?;
        let t = f.take(name)?;
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Corrupt(format!("`{name}` in {} is not a matrix", path.display())));
        };
        Ok((Self::new(rows, cols, t.data)?, f.header))
    }
}
