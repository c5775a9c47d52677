//! Labeled datasets and their CSV layout (feature columns, then the label).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} rows with {} labels", x.rows(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn one_hot(&self) -> Matrix {
        Matrix::one_hot(&self.labels, self.classes).expect("labels validated at construction")
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Splits off the first `n` rows.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(self.labels[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the CSV layout; `classes` comes from the sidecar metadata.
    pub fn read_csv<R: std::io::Read>(r: R, classes: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd
            .headers()?
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("dataset CSV has no columns"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::invalid(format!("dataset row has {} fields, expected {}", rec.len(), dim + 1)));
            }
            for f in rec.iter().take(dim) {
                data.push(f.parse::<f64>().map_err(|e| Error::invalid(format!("bad feature {f:?}: {e}")))?);
            }
            let l = &rec[dim];
            labels.push(l.parse::<usize>().map_err(|e| Error::invalid(format!("bad label {l:?}: {e}")))?);
        }
        let x = Matrix::new(labels.len(), dim, data)?;
        Dataset::new(x, labels, classes)
    }

    pub fn load_csv(path: &Path, classes: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, classes)
    }
}
