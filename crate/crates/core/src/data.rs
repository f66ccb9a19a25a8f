//! Datasets with missingness masks: ingestion, masking policies,
//! normalization and cross-validation splits.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::MissingPoint;
use crate::error::{Error, Result};

pub const DEFAULT_MISSING_TOKENS: [&str; 4] = ["?", "", "NA", "NaN"];

/// Per-column affine normalization `z = (x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub scheme: NormScheme,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    Minmax01,
    Zscore,
    /// A fixed affine map chosen at ingestion (e.g. 8-bit pixels divided by 255).
    Fixed,
}

/// An `N × D` data matrix with a missingness mask (`true` = missing).
///
/// Values under the mask are never read by any consumer. After
/// [`apply_mask`] they keep the original ground truth, which evaluation code
/// uses for inside-mask errors; loaders store `0.0` there.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "DatasetJson", into = "DatasetJson")]
pub struct DatasetWithMask {
    n: usize,
    d: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    labels: Option<Vec<usize>>,
    classes: Option<Vec<String>>,
    norm: Option<NormParams>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    values: Vec<Vec<Option<f64>>>,
    mask: Vec<Vec<bool>>,
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<String>>,
    norm: Option<NormParams>,
}

impl From<DatasetWithMask> for DatasetJson {
    fn from(ds: DatasetWithMask) -> Self {
        let d = ds.d.max(1);
        DatasetJson {
            values: ds
                .values
                .chunks(d)
                .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
                .collect(),
            mask: ds.mask.chunks(d).map(<[bool]>::to_vec).collect(),
            labels: ds.labels,
            classes: ds.classes,
            norm: ds.norm,
        }
    }
}

impl TryFrom<DatasetJson> for DatasetWithMask {
    type Error = Error;

    fn try_from(j: DatasetJson) -> Result<Self> {
        let rows: Vec<Vec<f64>> = j
            .values
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect();
        let mut ds = DatasetWithMask::new(rows, j.mask, j.labels)?;
        ds.classes = j.classes;
        ds.norm = j.norm;
        Ok(ds)
    }
}

impl DatasetWithMask {
    pub fn new(rows: Vec<Vec<f64>>, mask: Vec<Vec<bool>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if mask.len() != n {
            return Err(Error::invalid("mask row count differs from data row count"));
        }
        for (i, (r, m)) in rows.iter().zip(&mask).enumerate() {
            if r.len() != d || m.len() != d {
                return Err(Error::invalid(format!("row {i} has inconsistent width")));
            }
            if let Some(j) = (0..d).find(|&j| !m[j] && !r[j].is_finite()) {
                return Err(Error::invalid(format!("observed cell ({i}, {j}) is not finite")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::invalid("label count differs from row count"));
            }
        }
        Ok(DatasetWithMask {
            n,
            d,
            values: rows.concat(),
            mask: mask.concat(),
            labels,
            classes: None,
            norm: None,
        })
    }

    /// A fully observed dataset.
    pub fn complete(rows: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let mask = rows.iter().map(|r| vec![false; r.len()]).collect();
        Self::new(rows, mask, labels)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.d..(i + 1) * self.d]
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.d + j]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> Option<&[String]> {
        self.classes.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        match (&self.classes, &self.labels) {
            (Some(c), _) => c.len(),
            (None, Some(l)) => l.iter().max().map_or(0, |m| m + 1),
            _ => 0,
        }
    }

    pub fn norm(&self) -> Option<&NormParams> {
        self.norm.as_ref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<usize>>) -> Result<()> {
        if let Some(l) = &labels {
            if l.len() != self.n {
                return Err(Error::invalid("label count differs from row count"));
            }
        }
        self.labels = labels;
        Ok(())
    }

    pub fn set_norm(&mut self, norm: Option<NormParams>) {
        self.norm = norm;
    }

    /// The row as a [`MissingPoint`].
    pub fn point(&self, i: usize) -> MissingPoint {
        MissingPoint::new(self.row(i).to_vec(), self.row_mask(i).to_vec())
            .expect("dataset rows satisfy point invariants")
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Mean of the observed entries of each column; `None` for a column with
    /// no observed entry.
    pub fn observed_column_means(&self) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.d];
        let mut cnt = vec![0usize; self.d];
        for i in 0..self.n {
            for j in 0..self.d {
                if !self.is_missing(i, j) {
                    sum[j] += self.values[i * self.d + j];
                    cnt[j] += 1;
                }
            }
        }
        sum.iter()
            .zip(&cnt)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    /// Row-major copy with each missing cell replaced by its column's observed
    /// mean (0 when the column has no observed entry).
    pub fn mean_imputed(&self) -> Vec<f64> {
        let means = self.observed_column_means();
        let mut out = self.values.clone();
        for (idx, v) in out.iter_mut().enumerate() {
            if self.mask[idx] {
                *v = means[idx % self.d].unwrap_or(0.0);
            }
        }
        out
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.d);
        let mut mask = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
            mask.extend_from_slice(self.row_mask(i));
        }
        DatasetWithMask {
            n: idx.len(),
            d: self.d,
            values,
            mask,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes.clone(),
            norm: self.norm.clone(),
        }
    }

    /// Same rows with every cell observed (ground truth view).
    pub fn unmasked(&self) -> Self {
        DatasetWithMask {
            mask: vec![false; self.mask.len()],
            ..self.clone()
        }
    }

    /// Replaces the value matrix (same shape); used by imputers.
    pub fn with_values(&self, rows: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let mut out = DatasetWithMask::new(rows, mask, self.labels.clone())?;
        out.classes = self.classes.clone();
        out.norm = self.norm.clone();
        if out.n != self.n || out.d != self.d {
            return Err(Error::invalid("replacement matrix has a different shape"));
        }
        Ok(out)
    }

    /// Observed-cell equality of values plus equality of mask, labels and
    /// classes. Cells under the mask are ignored.
    pub fn same_observed_content(&self, other: &Self) -> bool {
        self.n == other.n
            && self.d == other.d
            && self.mask == other.mask
            && self.labels == other.labels
            && self.classes == other.classes
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &m)| m || a.to_bits() == b.to_bits())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes the dataset as CSV with missing cells as `?` and the label (if
    /// any) as the last column. Reading it back with [`load_csv`] and
    /// `label_column = Last` reproduces values, mask and labels.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        for i in 0..self.n {
            let mut rec: Vec<String> = (0..self.d)
                .map(|j| {
                    if self.is_missing(i, j) {
                        "?".to_string()
                    } else {
                        format!("{:?}", self.row(i)[j])
                    }
                })
                .collect();
            if let Some(l) = &self.labels {
                rec.push(match &self.classes {
                    Some(c) => c[l[i]].clone(),
                    None => l[i].to_string(),
                });
            }
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

/// Which column of a CSV file carries the class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    Index(usize),
    Last,
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
    #[serde(default)]
    pub label_column: Option<LabelColumn>,
    #[serde(default)]
    pub has_header: bool,
    /// Columns dropped before parsing (e.g. row identifiers).
    #[serde(default)]
    pub skip_columns: Vec<usize>,
}

fn default_delimiter() -> char {
    ','
}

fn default_missing_tokens() -> Vec<String> {
    DEFAULT_MISSING_TOKENS.iter().map(|s| s.to_string()).collect()
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: default_delimiter(),
            missing_tokens: default_missing_tokens(),
            label_column: None,
            has_header: false,
            skip_columns: Vec::new(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<DatasetWithMask> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, opts)
}

/// Parses delimited text. Cells equal (after trimming) to a missing token are
/// masked; the label column is integer-encoded by order of first appearance.
pub fn parse_csv(text: &str, opts: &CsvOptions) -> Result<DatasetWithMask> {
    if !opts.delimiter.is_ascii() {
        return Err(Error::invalid("delimiter must be an ASCII character"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let mut header: Option<Vec<String>> = None;
    if opts.has_header {
        match records.next() {
            Some(r) => {
                let r = r.map_err(|e| parse_err(1, 0, e.to_string()))?;
                header = Some(r.iter().map(str::to_string).collect());
            }
            None => return Err(Error::EmptyDataset),
        }
    }

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut label_idx: Option<usize> = None;
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    let mut labels = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let first_row = if opts.has_header { 2 } else { 1 };

    for (offset, rec) in records.enumerate() {
        let row_no = first_row + offset;
        let rec = rec.map_err(|e| parse_err(row_no, 0, e.to_string()))?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_err(
                row_no,
                rec.len().min(w) + 1,
                format!("expected {w} fields, found {}", rec.len()),
            ));
        }
        if label_idx.is_none() {
            label_idx = match &opts.label_column {
                None => None,
                Some(LabelColumn::Index(i)) if *i < w => Some(*i),
                Some(LabelColumn::Index(i)) => {
                    return Err(parse_err(row_no, i + 1, format!("label column {i} out of range")))
                }
                Some(LabelColumn::Last) => Some(w - 1),
                Some(LabelColumn::Name(name)) => {
                    let pos = header.as_ref().and_then(|h| h.iter().position(|c| c == name));
                    match pos {
                        Some(p) => Some(p),
                        None => {
                            return Err(parse_err(1, 0, format!("unknown label column {name:?}")))
                        }
                    }
                }
            };
        }
        let mut vals = Vec::with_capacity(w);
        let mut m = Vec::with_capacity(w);
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == label_idx {
                if opts.missing_tokens.iter().any(|t| t == cell) {
                    return Err(parse_err(row_no, c + 1, "missing class label".into()));
                }
                let next = classes.len();
                let id = *class_ids.entry(cell.to_string()).or_insert_with(|| {
                    classes.push(cell.to_string());
                    next
                });
                labels.push(id);
                continue;
            }
            if opts.skip_columns.contains(&c) {
                continue;
            }
            if opts.missing_tokens.iter().any(|t| t == cell) {
                vals.push(0.0);
                m.push(true);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        vals.push(v);
                        m.push(false);
                    }
                    _ => {
                        return Err(parse_err(row_no, c + 1, format!("non-numeric cell {cell:?}")))
                    }
                }
            }
        }
        rows.push(vals);
        mask.push(m);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let has_labels = label_idx.is_some();
    let mut ds = DatasetWithMask::new(rows, mask, has_labels.then_some(labels))?;
    if has_labels {
        ds.classes = Some(classes);
    }
    Ok(ds)
}

fn parse_err(row: usize, column: usize, message: String) -> Error {
    Error::Parse { row, column, message }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images from an IDX file (magic `0x00000803`, optionally gzip-compressed).
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let header = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::invalid("truncated IDX header"))
    };
    if header(0)? != 0x0000_0803 {
        return Err(Error::invalid(format!("bad IDX image magic {:#010x}", header(0)?)));
    }
    let (n, rows, cols) = (header(1)?, header(2)?, header(3)?);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::invalid(format!(
            "IDX image body has {} bytes, expected {}",
            body.len(),
            n * rows * cols
        )));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    parse_idx_labels(&bytes)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::invalid("truncated IDX header"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != 0x0000_0801 {
        return Err(Error::invalid(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() - 8 != n {
        return Err(Error::invalid("IDX label count does not match body"));
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [0x0803u32, images.count() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a complete dataset from 8-bit images scaled to `[0, 1]`.
pub fn images_to_dataset(images: &IdxImages, labels: Option<&[u8]>) -> Result<DatasetWithMask> {
    let d = images.rows * images.cols;
    let rows: Vec<Vec<f64>> = images
        .pixels
        .chunks(d)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels = labels.map(|l| l.iter().map(|&v| v as usize).collect());
    let mut ds = DatasetWithMask::complete(rows, labels)?;
    ds.norm = Some(NormParams {
        scheme: NormScheme::Fixed,
        shift: vec![0.0; d],
        scale: vec![255.0; d],
    });
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskKind {
    AsIs,
    Mcar {
        p: f64,
    },
    Patch {
        h: usize,
        w: usize,
        grid_h: usize,
        grid_w: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    #[serde(flatten)]
    pub kind: MaskKind,
    #[serde(default)]
    pub seed: u64,
}

impl MaskPolicy {
    pub fn as_is() -> Self {
        MaskPolicy {
            kind: MaskKind::AsIs,
            seed: 0,
        }
    }

    pub fn mcar(p: f64, seed: u64) -> Self {
        MaskPolicy {
            kind: MaskKind::Mcar { p },
            seed,
        }
    }

    pub fn patch(h: usize, w: usize, grid_h: usize, grid_w: usize, seed: u64) -> Self {
        MaskPolicy {
            kind: MaskKind::Patch { h, w, grid_h, grid_w },
            seed,
        }
    }
}

/// Adds missingness according to `policy`. Cells already missing stay missing
/// and every cell keeps its stored value.
pub fn apply_mask(data: &DatasetWithMask, policy: &MaskPolicy) -> Result<DatasetWithMask> {
    let mut out = data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    match policy.kind {
        MaskKind::AsIs => {}
        MaskKind::Mcar { p } => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("MCAR probability must be in [0, 1), got {p}")));
            }
            for m in out.mask.iter_mut() {
                // Draw for every cell so the pattern does not depend on the prior mask.
                let drop = rng.gen::<f64>() < p;
                if drop {
                    *m = true;
                }
            }
        }
        MaskKind::Patch { h, w, grid_h, grid_w } => {
            if grid_h * grid_w != data.d {
                return Err(Error::invalid(format!(
                    "patch masking needs {grid_h}x{grid_w} = {} columns, data has {}",
                    grid_h * grid_w,
                    data.d
                )));
            }
            if h == 0 || w == 0 || h > grid_h || w > grid_w {
                return Err(Error::invalid("patch must fit inside the grid"));
            }
            for i in 0..out.n {
                let top = rng.gen_range(0..=grid_h - h);
                let left = rng.gen_range(0..=grid_w - w);
                for r in top..top + h {
                    for c in left..left + w {
                        out.mask[i * out.d + r * grid_w + c] = true;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalizes every column using statistics of its observed entries only.
/// Constant (or unobserved) columns get scale 1.
pub fn normalize(data: &DatasetWithMask, scheme: NormScheme) -> DatasetWithMask {
    let (n, d) = (data.n, data.d);
    let mut shift = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let col: Vec<f64> = (0..n)
            .filter(|&i| !data.is_missing(i, j))
            .map(|i| data.values[i * d + j])
            .collect();
        if col.is_empty() {
            continue;
        }
        let (s, c) = match scheme {
            NormScheme::Minmax01 => {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
            NormScheme::Zscore => {
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
                (mean, var.sqrt())
            }
            NormScheme::Fixed => (0.0, 1.0),
        };
        shift[j] = s;
        scale[j] = if c > 0.0 && c.is_finite() { c } else { 1.0 };
    }
    let mut out = data.clone();
    for (idx, v) in out.values.iter_mut().enumerate() {
        let j = idx % d;
        *v = (*v - shift[j]) / scale[j];
    }
    out.norm = Some(NormParams { scheme, shift, scale });
    out
}

/// Inverts [`normalize`]; a dataset without normalization is returned as is.
pub fn denormalize(data: &DatasetWithMask) -> DatasetWithMask {
    let mut out = data.clone();
    if let Some(norm) = out.norm.take() {
        let d = out.d;
        for (idx, v) in out.values.iter_mut().enumerate() {
            let j = idx % d;
            *v = *v * norm.scale[j] + norm.shift[j];
        }
    }
    out
}

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits row indices `0..n` into `folds` test sets; each index is in exactly
/// one test set. Stratification deals each class round-robin across folds.
pub fn kfold_split(
    n: usize,
    labels: Option<&[usize]>,
    folds: usize,
    stratified: bool,
    seed: u64,
) -> Result<Vec<Fold>> {
    if folds < 2 || folds > n {
        return Err(Error::Split(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); folds];
    if stratified {
        let labels = labels.ok_or_else(|| Error::Split("stratified split needs labels".into()))?;
        if labels.len() != n {
            return Err(Error::Split("label count differs from row count".into()));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut next = 0usize;
        for (c, members) in by_class.iter_mut().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < folds {
                return Err(Error::Split(format!(
                    "class {c} has {} rows, fewer than {folds} folds",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            for &i in members.iter() {
                buckets[next % folds].push(i);
                next += 1;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            buckets[pos % folds].push(i);
        }
    }
    Ok((0..folds)
        .map(|f| {
            let mut test = buckets[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = buckets
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, b)| b.iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect())
}
