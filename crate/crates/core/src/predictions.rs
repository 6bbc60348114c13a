use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, Taxonomy};

/// Per-image scores in [0, 1], one column per output node in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    image_ids: Vec<String>,
    columns: Vec<NodeId>,
    values: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(image_ids: Vec<String>, columns: Vec<NodeId>, values: Vec<f64>) -> Result<Self> {
        if values.len() != image_ids.len() * columns.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} rows x {} columns",
                values.len(),
                image_ids.len(),
                columns.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "score {} at row {} is outside [0, 1]",
                values[bad],
                bad / columns.len().max(1)
            )));
        }
        Ok(PredictionMatrix {
            image_ids,
            columns,
            values,
        })
    }

    pub fn empty(columns: Vec<NodeId>) -> Self {
        PredictionMatrix {
            image_ids: Vec::new(),
            columns,
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn columns(&self) -> &[NodeId] {
        &self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.columns.len();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn column_of(&self, id: &NodeId) -> Option<usize> {
        self.columns.iter().position(|c| c == id)
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.image_ids.iter().position(|i| i == image_id)
    }

    /// Columns must be the taxonomy's output ids, with or without specials.
    pub fn check_alignment(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.columns == taxonomy.output_ids(true) || self.columns == taxonomy.output_ids(false)
        {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "prediction columns ({}) do not match the taxonomy's canonical node order ({} nodes)",
                self.columns.len(),
                taxonomy.len()
            )))
        }
    }

    /// CSV with header `image_id,<node ids...>`, six decimals per score.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["image_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.to_string()));
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = Vec::with_capacity(self.n_cols() + 1);
            rec.push(self.image_ids[r].clone());
            rec.extend(self.row(r).iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("image_id") {
            return Err(Error::invalid("prediction CSV must start with an `image_id` column"));
        }
        let columns = headers
            .iter()
            .skip(1)
            .map(NodeId::new)
            .collect::<Result<Vec<_>>>()?;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "prediction row {} has {} fields, expected {}",
                    i + 1,
                    rec.len(),
                    columns.len() + 1
                )));
            }
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("prediction row {}: `{field}` is not a number", i + 1))
                })?;
                values.push(v);
            }
        }
        PredictionMatrix::new(ids, columns, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
