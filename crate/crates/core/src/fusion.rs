//! Cascade feature-level fusion: raw fields, temporal features and spatial
//! prediction errors concatenated into one 21-column table.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::ingest::{CanFrame, Normalizer};
use crate::matrix::Matrix;
use crate::spatial::SpatialFeatures;
use crate::temporal::TemporalFeatures;

pub const N_FEATURES: usize = 21;
pub const N_RAW: usize = 11;

/// One canonical fused column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    Timestamp,
    CanId,
    Dlc,
    /// Payload byte, 0-based (`Data(0)` is "Data1").
    Data(u8),
    Se,
    Ratio,
    /// Prediction error of payload byte, 0-based (`Pe(0)` is "PE1").
    Pe(u8),
}

/// Canonical order: Timestamp, CAN ID, DLC, Data1..Data8, SE, RATIO, PE1..PE8.
pub const CANONICAL: [Column; N_FEATURES] = [
    Column::Timestamp,
    Column::CanId,
    Column::Dlc,
    Column::Data(0),
    Column::Data(1),
    Column::Data(2),
    Column::Data(3),
    Column::Data(4),
    Column::Data(5),
    Column::Data(6),
    Column::Data(7),
    Column::Se,
    Column::Ratio,
    Column::Pe(0),
    Column::Pe(1),
    Column::Pe(2),
    Column::Pe(3),
    Column::Pe(4),
    Column::Pe(5),
    Column::Pe(6),
    Column::Pe(7),
];

impl Column {
    pub fn index(self) -> usize {
        match self {
            Column::Timestamp => 0,
            Column::CanId => 1,
            Column::Dlc => 2,
            Column::Data(i) => 3 + i as usize,
            Column::Se => 11,
            Column::Ratio => 12,
            Column::Pe(i) => 13 + i as usize,
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Timestamp => f.write_str("Timestamp"),
            Column::CanId => f.write_str("CAN ID"),
            Column::Dlc => f.write_str("DLC"),
            Column::Data(i) => write!(f, "Data{}", i + 1),
            Column::Se => f.write_str("SE"),
            Column::Ratio => f.write_str("RATIO"),
            Column::Pe(i) => write!(f, "PE{}", i + 1),
        }
    }
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.trim().chars().filter(|c| !c.is_whitespace() && *c != '_').collect();
        let norm = norm.to_ascii_lowercase();
        CANONICAL
            .iter()
            .copied()
            .find(|c| c.to_string().replace(' ', "").to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::config(format!("unknown feature column {s:?}")))
    }
}

/// One bit per canonical column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(pub [bool; N_FEATURES]);

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask([true; N_FEATURES])
    }

    pub fn none() -> Self {
        FeatureMask([false; N_FEATURES])
    }

    pub fn from_columns(cols: &[Column]) -> Self {
        let mut bits = [false; N_FEATURES];
        for c in cols {
            bits[c.index()] = true;
        }
        FeatureMask(bits)
    }

    /// The eleven raw fields only.
    pub fn raw() -> Self {
        let mut bits = [false; N_FEATURES];
        bits[..N_RAW].fill(true);
        FeatureMask(bits)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, col: Column) -> bool {
        self.0[col.index()]
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..N_FEATURES).filter(|&i| self.0[i]).collect()
    }

    pub fn columns(&self) -> Vec<Column> {
        self.indices().into_iter().map(|i| CANONICAL[i]).collect()
    }

    pub fn bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Comma-separated column names in canonical order.
    pub fn names(&self) -> String {
        self.columns().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.bit_string())
    }
}

/// Accepts either a 21-character bit string or a comma-separated list of
/// column names (`all` and `raw` are shorthands).
impl FromStr for FeatureMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "all" => return Ok(FeatureMask::all()),
            "raw" => return Ok(FeatureMask::raw()),
            _ => {}
        }
        if s.len() == N_FEATURES && s.chars().all(|c| c == '0' || c == '1') {
            let mut bits = [false; N_FEATURES];
            for (b, c) in bits.iter_mut().zip(s.chars()) {
                *b = c == '1';
            }
            return Ok(FeatureMask(bits));
        }
        let cols = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Column::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMask::from_columns(&cols))
    }
}

/// Feature table with per-column provenance and one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub columns: Vec<Column>,
    pub labels: Vec<bool>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(idx),
            columns: self.columns.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Fits min-max scaling on `train_idx` rows and applies it to every row.
    pub fn normalized(&self, train_idx: &[usize]) -> Result<(FeatureMatrix, Normalizer)> {
        let norm = Normalizer::fit(&self.values, train_idx)?;
        let values = norm.apply(&self.values)?;
        Ok((
            FeatureMatrix {
                values,
                columns: self.columns.clone(),
                labels: self.labels.clone(),
            },
            norm,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.n_rows() * self.n_cols() * 12);
        let header: Vec<String> = self.columns.iter().map(|c| c.to_string()).collect();
        out.push_str(&header.join(","));
        out.push_str(",Label\n");
        for (row, &label) in self.values.rows().zip(&self.labels) {
            for v in row {
                out.push_str(&v.to_string());
                out.push(',');
            }
            out.push(if label { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new(MATRIX_MAGIC);
        enc.len(self.columns.len());
        for c in &self.columns {
            enc.u8(c.index() as u8);
        }
        enc.len(self.n_rows());
        enc.bytes(&self.labels.iter().map(|&l| l as u8).collect::<Vec<_>>());
        for &v in self.values.as_slice() {
            enc.f64(v);
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, MATRIX_MAGIC)?;
        let n_cols = dec.count()?;
        let columns = (0..n_cols)
            .map(|_| {
                let i = dec.u8()? as usize;
                CANONICAL
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("unknown column index {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_rows = dec.count()?;
        let labels = dec.bytes(n_rows)?.iter().map(|&b| b != 0).collect();
        let data = (0..n_rows * n_cols).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
        dec.finish()?;
        let values = if n_cols == 0 {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_vec(n_cols, data)?
        };
        Ok(FeatureMatrix {
            values,
            columns,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&codec::read_file(path)?)
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"CFFM";

/// Concatenates raw, temporal and spatial features row by row.
pub fn assemble(frames: &[CanFrame], spatial: &[SpatialFeatures], temporal: &[TemporalFeatures]) -> Result<FeatureMatrix> {
    if spatial.len() != frames.len() {
        return Err(Error::Alignment {
            what: "spatial features",
            expected: frames.len(),
            found: spatial.len(),
        });
    }
    if temporal.len() != frames.len() {
        return Err(Error::Alignment {
            what: "temporal features",
            expected: frames.len(),
            found: temporal.len(),
        });
    }
    let mut data = Vec::with_capacity(frames.len() * N_FEATURES);
    for ((frame, pe), tf) in frames.iter().zip(spatial).zip(temporal) {
        data.extend_from_slice(&frame.raw_fields());
        data.extend_from_slice(tf);
        data.extend_from_slice(pe);
    }
    Ok(FeatureMatrix {
        values: Matrix::from_vec(N_FEATURES, data).unwrap_or_else(|_| Matrix::zeros(0, N_FEATURES)),
        columns: CANONICAL.to_vec(),
        labels: frames.iter().map(|f| f.label.is_anomalous()).collect(),
    })
}

/// Keeps the columns whose mask bit is set, in canonical order.
pub fn apply_mask(matrix: &FeatureMatrix, mask: &FeatureMask) -> Result<FeatureMatrix> {
    if mask.is_empty() {
        return Err(Error::config("feature mask selects no columns"));
    }
    let keep: Vec<usize> = matrix
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| mask.contains(**c))
        .map(|(i, _)| i)
        .collect();
    if keep.len() != mask.count() {
        return Err(Error::Shape(format!(
            "mask selects {} columns, only {} present",
            mask.count(),
            keep.len()
        )));
    }
    Ok(FeatureMatrix {
        values: matrix.values.select_columns(&keep),
        columns: keep.iter().map(|&i| matrix.columns[i]).collect(),
        labels: matrix.labels.clone(),
    })
}
