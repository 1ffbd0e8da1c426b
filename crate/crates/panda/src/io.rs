//! On-disk formats: feature files (`PNDF`), checkpoint files (`PNDC`),
//! checkpoint-bank directories and the CSV side formats.
//!
//! All binary integers and floats are little-endian.
//!
//! ```text
//! PNDF  0..4  magic "PNDF"        PNDC  0..4  magic "PNDC"
//!       4..8  version u32 = 1           4..8  version u32 = 1
//!       8..16 n u64                     8..16 n u64 = 1
//!      16..24 d u64                    16..24 d u64 = parameter count
//!      24     flags u8                 24     flags u8
//!             bit 0: labels                   bit 0: normalizer present
//!      n*d binary32, row-major                widths count u64, widths u64...
//!      [n i32 labels]                         minibatch index u64
//!                                             normalizer binary64
//!                                             d binary64 parameters
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use panda_core::adapter::Checkpoint;
use panda_core::trainer::TraceEntry;
use panda_core::{AdapterParams, CheckpointBank, ClassifierHead, FeatureMatrix, FisherDiagonal};

pub const FEATURE_MAGIC: &[u8; 4] = b"PNDF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNDC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 25;
const FLAG_LABELS: u8 = 1;
const FLAG_NORMALIZER: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    /// Not a file of the expected kind, or an unsupported version.
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    /// The header is fine but the body is truncated or inconsistent.
    #[error("{path}: corrupt file: {msg}")]
    Corruption { path: PathBuf, msg: String },

    /// Well-formed bytes describing invalid contents.
    #[error("{path}: validation error: {msg}")]
    Validation { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn validation(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Validation {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn corruption(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Corruption {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Bounds-checked little-endian reader over a byte buffer.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                corruption(
                    self.path,
                    format!("truncated {what}: need {len} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(corruption(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ))
        }
    }
}

/// Checks magic and version and returns `(n, d, flags)` with the cursor
/// positioned after the header.
fn read_header(c: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<(u64, u64, u8)> {
    let kind = String::from_utf8_lossy(magic).into_owned();
    if c.buf.len() < 4 || &c.buf[..4] != magic {
        return Err(format_err(c.path, format!("missing {kind} magic")));
    }
    if c.buf.len() < HEADER_LEN {
        return Err(corruption(c.path, "truncated header"));
    }
    c.pos = 4;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(c.path, format!("unsupported {kind} version {version}")));
    }
    let n = c.u64("row count")?;
    let d = c.u64("column count")?;
    let flags = c.u8("flags")?;
    Ok((n, d, flags))
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], n: u64, d: u64, flags: u8) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(flags);
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// PNDF

/// Decodes a feature file already in memory. `path` only labels errors.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        path,
    };
    let (n, d, flags) = read_header(&mut c, FEATURE_MAGIC)?;
    if flags & !FLAG_LABELS != 0 {
        return Err(format_err(path, format!("unknown flag bits {flags:#04x}")));
    }
    if n == 0 || d == 0 {
        return Err(validation(path, format!("empty matrix ({n} x {d})")));
    }
    let count = usize::try_from(n)
        .ok()
        .zip(usize::try_from(d).ok())
        .and_then(|(n, d)| n.checked_mul(d))
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| corruption(path, format!("implausible shape {n} x {d}")))?;
    let (n, d) = (n as usize, d as usize);
    let payload = c.take(count * 4, "payload")?;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(validation(
                path,
                format!("non-finite value at row {}, column {}", i / d, i % d),
            ));
        }
        data.push(f64::from(v));
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = c.take(n * 4, "label section")?;
        let mut labels = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let l = i32::from_le_bytes(chunk.try_into().unwrap());
            let l = u32::try_from(l).map_err(|_| validation(path, format!("negative label {l} at row {i}")))?;
            labels.push(l);
        }
        Some(labels)
    } else {
        None
    };
    c.finish()?;
    let m = FeatureMatrix::new(n, d, data).map_err(|e| validation(path, e.to_string()))?;
    match labels {
        Some(l) => m.with_labels(l).map_err(|e| validation(path, e.to_string())),
        None => Ok(m),
    }
}

/// Encodes a matrix; values are narrowed to binary32.
pub fn encode_features(m: &FeatureMatrix, path: &Path) -> Result<Vec<u8>> {
    let flags = if m.labels().is_some() { FLAG_LABELS } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.n() * (m.d() + 1));
    write_header(&mut out, FEATURE_MAGIC, m.n() as u64, m.d() as u64, flags);
    for (i, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(validation(
                path,
                format!(
                    "value {v} at row {}, column {} overflows binary32",
                    i / m.d(),
                    i % m.d()
                ),
            ));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    if let Some(labels) = m.labels() {
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| validation(path, format!("label {l} exceeds the i32 range")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    decode_features(&read_file(path)?, path)
}

pub fn save_feature_file(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &encode_features(m, path)?)
}

/// Reads either format, chosen by extension: `.csv` is parsed as CSV,
/// anything else as a feature file.
pub fn load_features_any(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_feature_csv(path)
    } else {
        load_feature_file(path)
    }
}

// ---------------------------------------------------------------------------
// Fisher diagonal, stored as a 1 x P feature file

pub fn save_fisher(f: &FisherDiagonal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let m = FeatureMatrix::new(1, f.len(), f.as_slice().to_vec()).map_err(|e| validation(path, e.to_string()))?;
    save_feature_file(&m, path)
}

pub fn load_fisher(path: impl AsRef<Path>) -> Result<FisherDiagonal> {
    let path = path.as_ref();
    let m = load_feature_file(path)?;
    if m.n() != 1 {
        return Err(validation(
            path,
            format!("Fisher file must hold one row, found {}", m.n()),
        ));
    }
    FisherDiagonal::new(m.into_data()).map_err(|e| validation(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// PNDC

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let flags = if ckpt.normalizer.is_some() { FLAG_NORMALIZER } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (p.widths().len() + p.param_count() + 3));
    write_header(&mut out, CHECKPOINT_MAGIC, 1, p.param_count() as u64, flags);
    out.extend_from_slice(&(p.widths().len() as u64).to_le_bytes());
    for &w in p.widths() {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    out.extend_from_slice(&ckpt.minibatch_index.to_le_bytes());
    out.extend_from_slice(&ckpt.normalizer.unwrap_or(0.0).to_le_bytes());
    for &v in p.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut c = Cursor {
        buf: bytes,
        pos: 0,
        path,
    };
    let (n, d, flags) = read_header(&mut c, CHECKPOINT_MAGIC)?;
    if flags & !FLAG_NORMALIZER != 0 {
        return Err(format_err(path, format!("unknown flag bits {flags:#04x}")));
    }
    if n != 1 {
        return Err(format_err(
            path,
            format!("checkpoint must hold one parameter row, found {n}"),
        ));
    }
    let layers = c.u64("width count")?;
    if layers < 2 || layers > (bytes.len() / 8) as u64 {
        return Err(corruption(path, format!("implausible width count {layers}")));
    }
    let widths = (0..layers)
        .map(|_| c.u64("layer width").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let minibatch_index = c.u64("minibatch index")?;
    let s = c.f64("normalizer")?;
    let count = usize::try_from(d)
        .ok()
        .filter(|d| d.checked_mul(8).is_some())
        .ok_or_else(|| corruption(path, format!("implausible parameter count {d}")))?;
    let raw = c.take(count * 8, "parameters")?;
    c.finish()?;
    let theta: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return Err(validation(path, format!("non-finite parameter at position {i}")));
    }
    let params = AdapterParams::from_flat(&widths, theta).map_err(|e| validation(path, e.to_string()))?;
    let normalizer = if flags & FLAG_NORMALIZER != 0 {
        if !(s.is_finite() && s > 0.0) {
            return Err(validation(path, format!("stored normalizer {s} is not positive")));
        }
        Some(s)
    } else {
        None
    };
    Ok(Checkpoint {
        params,
        minibatch_index,
        normalizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?, path)
}

/// Adapter parameters saved as a checkpoint with index 0.
pub fn save_adapter(p: &AdapterParams, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&panda_core::adapter::snapshot(p, 0), path)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterParams> {
    Ok(load_checkpoint(path)?.params)
}

/// A classifier head is a single linear layer `[d, C]`.
pub fn save_head(h: &ClassifierHead, path: impl AsRef<Path>) -> Result<()> {
    save_adapter(h.linear(), path)
}

pub fn load_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    let path = path.as_ref();
    ClassifierHead::from_linear(load_adapter(path)?).map_err(|e| validation(path, e.to_string()))
}

/// Outlier-exposure head: a `[d, 1]` linear layer. A file without a stored
/// bias flag is read with the bias enabled.
pub fn save_oe_head(h: &panda_core::OEHead, path: impl AsRef<Path>) -> Result<()> {
    let mut theta = h.w.clone();
    theta.push(h.b);
    let path = path.as_ref();
    let p = AdapterParams::from_flat(&[h.w.len(), 1], theta).map_err(|e| validation(path, e.to_string()))?;
    save_adapter(&p, path)
}

pub fn load_oe_head(path: impl AsRef<Path>) -> Result<panda_core::OEHead> {
    let path = path.as_ref();
    let p = load_adapter(path)?;
    if p.widths().len() != 2 || p.output_dim() != 1 {
        return Err(validation(
            path,
            format!("expected widths [d, 1], found {:?}", p.widths()),
        ));
    }
    let theta = p.params();
    let d = p.input_dim();
    Ok(panda_core::OEHead {
        w: theta[..d].to_vec(),
        b: theta[d],
        use_bias: true,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint banks

pub const FINAL_CHECKPOINT: &str = "final.pndc";

fn checkpoint_name(index: u64) -> String {
    format!("ckpt_{index:08}.pndc")
}

fn is_checkpoint_name(name: &str) -> bool {
    name.strip_prefix("ckpt_")
        .and_then(|s| s.strip_suffix(".pndc"))
        .is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
}

/// Writes every snapshot plus the final parameters into `dir`, replacing
/// snapshots left over from an earlier run.
pub fn save_bank(bank: &CheckpointBank, final_params: &AdapterParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_name().to_str().is_some_and(is_checkpoint_name) {
            let p = entry.path();
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    for ckpt in bank.checkpoints() {
        save_checkpoint(ckpt, dir.join(checkpoint_name(ckpt.minibatch_index)))?;
    }
    save_adapter(final_params, dir.join(FINAL_CHECKPOINT))
}

/// Snapshots of a bank directory in minibatch order. The interval is taken
/// from the first two snapshots.
pub fn load_bank(dir: impl AsRef<Path>) -> Result<CheckpointBank> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_str().is_some_and(is_checkpoint_name))
        .map(|e| e.path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(validation(dir, "no checkpoint files in bank directory"));
    }
    let ckpts = paths.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    let interval = match ckpts.as_slice() {
        [a, b, ..] => (b.minibatch_index - a.minibatch_index) as usize,
        _ => 1,
    };
    CheckpointBank::from_checkpoints(ckpts, interval.max(1)).map_err(|e| validation(dir, e.to_string()))
}

/// Final parameters of a bank directory.
pub fn load_bank_final(dir: impl AsRef<Path>) -> Result<AdapterParams> {
    load_adapter(dir.as_ref().join(FINAL_CHECKPOINT))
}

// ---------------------------------------------------------------------------
// CSV

/// Features as CSV: a header row, one column per feature, and an optional
/// trailing column named `label`.
pub fn load_feature_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let has_labels = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(has_labels);
    if d == 0 {
        return Err(validation(path, "no feature columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        for field in rec.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| validation(path, format!("line {line}: `{field}` is not a number")))?;
            data.push(v);
        }
        if has_labels {
            let field = &rec[d];
            let l: u32 = field
                .parse()
                .map_err(|_| validation(path, format!("line {line}: `{field}` is not a class label")))?;
            labels.push(l);
        }
    }
    let n = data.len() / d;
    let m = FeatureMatrix::new(n, d, data).map_err(|e| validation(path, e.to_string()))?;
    if has_labels {
        m.with_labels(labels).map_err(|e| validation(path, e.to_string()))
    } else {
        Ok(m)
    }
}

pub fn save_feature_csv(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = (0..m.d()).map(|j| format!("f{j}")).collect();
    if m.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, row) in m.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = m.labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `index,score`, scores in shortest round-trip form.
pub fn save_scores(scores: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["index", "score"],
        scores.iter().enumerate().map(|(i, s)| [i.to_string(), s.to_string()]),
    )
}

fn read_indexed<T, F>(path: &Path, column: &str, parse: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Option<T>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?;
    if header.len() != 2 || &header[0] != "index" || &header[1] != column {
        return Err(format_err(path, format!("expected header `index,{column}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        if rec[0].parse::<usize>().ok() != Some(i) {
            return Err(validation(path, format!("line {line}: expected index {i}")));
        }
        let v = parse(&rec[1]).ok_or_else(|| validation(path, format!("line {line}: bad {column} `{}`", &rec[1])))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(validation(path, "no rows"));
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_indexed(path.as_ref(), "score", |s| {
        s.parse::<f64>().ok().filter(|v| !v.is_nan())
    })
}

/// `index,label` with nonnegative integer labels.
pub fn save_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["index", "label"],
        labels.iter().enumerate().map(|(i, l)| [i.to_string(), l.to_string()]),
    )
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    read_indexed(path.as_ref(), "label", |s| s.parse().ok())
}

/// `minibatch,loss,penalty`.
pub fn save_trace(trace: &[TraceEntry], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        &["minibatch", "loss", "penalty"],
        trace
            .iter()
            .map(|t| [t.minibatch.to_string(), t.loss.to_string(), t.penalty.to_string()]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
            .unwrap()
            .with_labels(vec![0, 7])
            .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_features(&sample(), Path::new("x")).unwrap();
        assert_eq!(&bytes[..4], b"PNDF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes[24], 1);
        assert_eq!(bytes.len(), 25 + 6 * 4 + 2 * 4);
        assert_eq!(f32::from_le_bytes(bytes[25..29].try_into().unwrap()), 1.0);
        assert_eq!(i32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()), 7);
    }

    #[test]
    fn decode_errors_are_classified() {
        let p = Path::new("x");
        let good = encode_features(&sample(), p).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic, p), Err(IoError::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_features(&bad_version, p), Err(IoError::Format { .. })));

        for cut in [10, 30, good.len() - 1] {
            assert!(matches!(
                decode_features(&good[..cut], p),
                Err(IoError::Corruption { .. })
            ));
        }

        let mut nan = good.clone();
        nan[25..29].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan, p), Err(IoError::Validation { .. })));

        let mut neg = good.clone();
        let at = neg.len() - 4;
        neg[at..].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(matches!(decode_features(&neg, p), Err(IoError::Validation { .. })));

        let mut empty = Vec::new();
        write_header(&mut empty, FEATURE_MAGIC, 0, 3, 0);
        assert!(matches!(decode_features(&empty, p), Err(IoError::Validation { .. })));

        let mut huge = Vec::new();
        write_header(&mut huge, FEATURE_MAGIC, u64::MAX, u64::MAX, 0);
        assert!(matches!(decode_features(&huge, p), Err(IoError::Corruption { .. })));
    }

    #[test]
    fn narrowing_overflow_is_rejected() {
        let m = FeatureMatrix::from_rows(&[[1e300]]).unwrap();
        assert!(matches!(
            encode_features(&m, Path::new("x")),
            Err(IoError::Validation { .. })
        ));
    }

    #[test]
    fn checkpoint_bytes_round_trip_exactly() {
        let p = AdapterParams::glorot(&[3, 6, 2], 4).unwrap();
        let ckpt = Checkpoint {
            params: p,
            minibatch_index: 123,
            normalizer: Some(0.1 + 0.2),
        };
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(&bytes[..4], b"PNDC");
        assert_eq!(decode_checkpoint(&bytes, Path::new("c")).unwrap(), ckpt);

        let bare = Checkpoint {
            normalizer: None,
            ..ckpt
        };
        assert_eq!(
            decode_checkpoint(&encode_checkpoint(&bare), Path::new("c")).unwrap(),
            bare
        );
    }

    #[test]
    fn checkpoint_rejects_feature_magic() {
        let bytes = encode_features(&sample(), Path::new("x")).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("x")),
            Err(IoError::Format { .. })
        ));
    }

    #[test]
    fn checkpoint_names() {
        assert!(is_checkpoint_name(&checkpoint_name(50)));
        assert!(!is_checkpoint_name("ckpt_.pndc"));
        assert!(!is_checkpoint_name(FINAL_CHECKPOINT));
    }
}
