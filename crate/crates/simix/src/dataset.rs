use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SimixError};

/// An n x p predictor matrix paired with an n-vector response.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(SimixError::Shape(format!(
                "predictor rows ({}) != response length ({})",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(SimixError::EmptyData("dataset has no observations"));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Divide each predictor column by its sample standard deviation.
    /// Returns the scaled dataset together with the per-column SDs.
    pub fn standardized(&self) -> (Self, Vec<f64>) {
        let n = self.n();
        let mut x = self.x.clone();
        let mut sds = Vec::with_capacity(self.p());
        for c in 0..self.p() {
            let col = self.x.column(c);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let sd = var.sqrt();
            let scale = if sd > 0.0 { sd } else { 1.0 };
            for r in 0..n {
                x[(r, c)] /= scale;
            }
            sds.push(scale);
        }
        (
            Self {
                x,
                y: self.y.clone(),
            },
            sds,
        )
    }

    /// Subset the dataset by row indices.
    pub fn select(&self, rows: &[usize]) -> Self {
        let p = self.p();
        let mut x = DMatrix::zeros(rows.len(), p);
        let mut y = DVector::zeros(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..p {
                x[(i, c)] = self.x[(r, c)];
            }
            y[i] = self.y[r];
        }
        Self { x, y }
    }
}
