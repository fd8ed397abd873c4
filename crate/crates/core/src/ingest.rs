//! CAN log ingestion: parsing HCRL-style CSV logs, frame tables, seeded
//! train/validation/test splits and min-max normalization.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest identifier representable in an extended (29-bit) frame.
pub const MAX_CAN_ID: u32 = 0x1FFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    /// HCRL flag character: `R` for regular traffic, `T` for injected.
    pub fn flag(self) -> char {
        match self {
            Label::Normal => 'R',
            Label::Anomalous => 'T',
        }
    }
}

/// One bus message. `data` always holds 8 bytes; bytes past `dlc` are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanFrame {
    pub timestamp: f64,
    pub can_id: u32,
    pub dlc: u8,
    pub data: [u8; 8],
    pub label: Label,
}

impl CanFrame {
    pub fn new(timestamp: f64, can_id: u32, data: &[u8], label: Label) -> Self {
        let dlc = data.len().min(8);
        let mut bytes = [0u8; 8];
        bytes[..dlc].copy_from_slice(&data[..dlc]);
        CanFrame {
            timestamp,
            can_id,
            dlc: dlc as u8,
            data: bytes,
            label,
        }
    }

    /// The eleven raw fields in canonical order: timestamp, id, dlc, data.
    pub fn raw_fields(&self) -> [f64; 11] {
        let mut out = [0.0; 11];
        out[0] = self.timestamp;
        out[1] = self.can_id as f64;
        out[2] = self.dlc as f64;
        for (o, &b) in out[3..].iter_mut().zip(self.data.iter()) {
            *o = b as f64;
        }
        out
    }
}

/// Supported on-disk log layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogFormat {
    /// `timestamp,hex_id,dlc,b0,..,b7[,R|T]`
    #[default]
    HcrlCsv,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Label applied to rows that carry no `R`/`T` flag.
    pub default_label: Label,
    /// Overrides every row's label, flagged or not.
    pub force_label: Option<Label>,
}

pub fn parse_log(path: &Path, format: LogFormat) -> Result<Vec<CanFrame>> {
    parse_log_with(path, format, ParseOptions::default())
}

pub fn parse_log_with(path: &Path, format: LogFormat, opts: ParseOptions) -> Result<Vec<CanFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_reader(BufReader::new(file), format, opts)
}

pub fn parse_str(text: &str, opts: ParseOptions) -> Result<Vec<CanFrame>> {
    parse_reader(text.as_bytes(), LogFormat::HcrlCsv, opts)
}

pub fn parse_reader<R: BufRead>(reader: R, format: LogFormat, opts: ParseOptions) -> Result<Vec<CanFrame>> {
    let LogFormat::HcrlCsv = format;
    let mut frames: Vec<CanFrame> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if frames.is_empty() && line.to_ascii_lowercase().starts_with("timestamp") {
            continue;
        }
        let mut frame = parse_row(line, line_no, opts.default_label)?;
        if let Some(label) = opts.force_label {
            frame.label = label;
        }
        if let Some(prev) = frames.last() {
            if frame.timestamp < prev.timestamp {
                return Err(Error::Ordering {
                    line: line_no,
                    previous: prev.timestamp,
                    found: frame.timestamp,
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

fn parse_row(line: &str, line_no: usize, default_label: Label) -> Result<CanFrame> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 3 {
        return Err(err(format!("expected at least 3 fields, found {}", fields.len())));
    }

    let label = match *fields.last().unwrap() {
        "R" | "r" => {
            fields.pop();
            Label::Normal
        }
        "T" | "t" => {
            fields.pop();
            Label::Anomalous
        }
        _ => default_label,
    };
    if fields.len() < 3 {
        return Err(err("missing DLC field".into()));
    }

    let timestamp: f64 = fields[0]
        .parse()
        .map_err(|_| err(format!("unparsable timestamp {:?}", fields[0])))?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(err(format!("timestamp {timestamp} is not a non-negative number")));
    }
    let can_id = u32::from_str_radix(fields[1], 16)
        .ok()
        .filter(|&id| id <= MAX_CAN_ID)
        .ok_or_else(|| err(format!("invalid hexadecimal CAN ID {:?}", fields[1])))?;
    let dlc: u8 = fields[2]
        .parse()
        .ok()
        .filter(|&d| d <= 8)
        .ok_or_else(|| err(format!("DLC {:?} outside 0-8", fields[2])))?;

    let payload = &fields[3..];
    if payload.len() > 8 {
        return Err(err(format!("{} data bytes, at most 8 allowed", payload.len())));
    }
    let mut data = [0u8; 8];
    for (i, field) in payload.iter().enumerate() {
        // Missing bytes (NaN in the source tables) become zero.
        if field.is_empty() || field.eq_ignore_ascii_case("nan") || i >= dlc as usize {
            continue;
        }
        data[i] = u8::from_str_radix(field, 16)
            .map_err(|_| err(format!("invalid data byte {field:?} at position {}", i + 1)))?;
    }

    Ok(CanFrame {
        timestamp,
        can_id,
        dlc,
        data,
        label,
    })
}

pub fn format_row(frame: &CanFrame, out: &mut String) {
    let _ = write!(out, "{},{:04x},{}", frame.timestamp, frame.can_id, frame.dlc);
    for b in &frame.data[..frame.dlc as usize] {
        let _ = write!(out, ",{b:02x}");
    }
    out.push(',');
    out.push(frame.label.flag());
    out.push('\n');
}

pub fn to_csv(frames: &[CanFrame]) -> String {
    let mut out = String::with_capacity(frames.len() * 48);
    for f in frames {
        format_row(f, &mut out);
    }
    out
}

pub fn write_csv(path: &Path, frames: &[CanFrame]) -> Result<()> {
    fs::write(path, to_csv(frames)).map_err(|e| Error::file(path, e))
}

const FRAME_MAGIC: &[u8; 4] = b"CFFT";

/// Columnar frame table in the binary container.
pub fn encode_frames(frames: &[CanFrame]) -> Vec<u8> {
    let mut enc = Encoder::new(FRAME_MAGIC);
    enc.len(frames.len());
    for f in frames {
        enc.f64(f.timestamp);
    }
    for f in frames {
        enc.u32(f.can_id);
    }
    for f in frames {
        enc.u8(f.dlc);
    }
    for f in frames {
        enc.bytes(&f.data);
    }
    for f in frames {
        enc.u8(f.label.is_anomalous() as u8);
    }
    enc.finish()
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<CanFrame>> {
    let mut dec = Decoder::new(bytes, FRAME_MAGIC)?;
    let n = dec.count()?;
    let timestamps = (0..n).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
    let ids = (0..n).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
    let dlcs = (0..n).map(|_| dec.u8()).collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let data: [u8; 8] = dec.bytes(8)?.try_into().unwrap();
        if dlcs[i] > 8 {
            return Err(Error::Format(format!("frame {i} has DLC {}", dlcs[i])));
        }
        frames.push(CanFrame {
            timestamp: timestamps[i],
            can_id: ids[i],
            dlc: dlcs[i],
            data,
            label: Label::Normal,
        });
    }
    for f in frames.iter_mut() {
        f.label = match dec.u8()? {
            0 => Label::Normal,
            1 => Label::Anomalous,
            other => return Err(Error::Format(format!("unknown label tag {other}"))),
        };
    }
    dec.finish()?;
    Ok(frames)
}

pub fn save_frames(path: &Path, frames: &[CanFrame]) -> Result<()> {
    fs::write(path, encode_frames(frames)).map_err(|e| Error::file(path, e))
}

pub fn load_frames(path: &Path) -> Result<Vec<CanFrame>> {
    decode_frames(&codec::read_file(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.70,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::config("split fractions must be positive"));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Disjoint row-index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_ROWS: usize = 10;

/// Seeded uniform shuffle of `0..n_rows`, cut at the requested fractions.
pub fn split(n_rows: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n_rows == 0 {
        return Err(Error::config("cannot split an empty dataset"));
    }
    if n_rows < MIN_SPLIT_ROWS {
        return Err(Error::config(format!(
            "need at least {MIN_SPLIT_ROWS} rows to split, got {n_rows}"
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_train = (n_rows as f64 * spec.train_fraction).round() as usize;
    let n_val = ((n_rows as f64 * spec.val_fraction).round() as usize).min(n_rows - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Per-column min-max scaling learned from training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &Matrix, train_idx: &[usize]) -> Result<Self> {
        if train_idx.is_empty() {
            return Err(Error::config("normalizer needs at least one training row"));
        }
        let d = rows.n_cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &i in train_idx {
            for (c, &v) in rows.row(i).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn n_cols(&self) -> usize {
        self.min.len()
    }

    /// Affine map `(x - min) / (max - min)`; not clamped, constant columns map to 0.
    #[inline]
    pub fn transform_value(&self, col: usize, v: f64) -> f64 {
        let span = self.max[col] - self.min[col];
        if span > 0.0 {
            (v - self.min[col]) / span
        } else {
            0.0
        }
    }

    pub fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.n_cols() != self.n_cols() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} columns, matrix has {}",
                self.n_cols(),
                rows.n_cols()
            )));
        }
        let mut out = rows.clone();
        for i in 0..out.n_rows() {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.transform_value(c, *v);
            }
        }
        Ok(out)
    }
}

pub fn fit_normalizer(rows: &Matrix, train_idx: &[usize]) -> Result<Normalizer> {
    Normalizer::fit(rows, train_idx)
}

pub fn apply_normalizer(normalizer: &Normalizer, rows: &Matrix) -> Result<Matrix> {
    normalizer.apply(rows)
}

/// Matrix of the eleven raw fields, one row per frame.
pub fn raw_matrix(frames: &[CanFrame]) -> Matrix {
    let mut data = Vec::with_capacity(frames.len() * 11);
    for f in frames {
        data.extend_from_slice(&f.raw_fields());
    }
    Matrix::from_vec(11, data).unwrap_or_else(|_| Matrix::zeros(0, 11))
}
