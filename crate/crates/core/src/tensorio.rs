//! Binary interchange format for per-layer hidden-state matrices.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "HSTN1\n"                     6-byte magic
//! u32                           header length in bytes
//! header                        UTF-8 `key=value` lines: n, d, layer, token_role, model_name, dtype
//! f32 × n·d                     row-major activations
//! n × { f64 value_log2 | NaN,   25-byte label records
//!       u8  gold | 255,
//!       f64 log_ratio | NaN,
//!       u64 problem_id }
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"HSTN1\n";
pub const LABEL_RECORD_BYTES: usize = 8 + 1 + 8 + 8;
const NO_GOLD: u8 = 255;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic bytes (not an HSTN1 file)")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes after the header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported dtype {0:?} (only f32 is supported)")]
    UnsupportedDtype(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("{0} trailing bytes after the label block")]
    TrailingBytes(usize),
    #[error("invalid matrix: {0}")]
    Invalid(String),
}

/// Which token position a row of activations was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    LastNumeralToken,
    LastPromptToken,
}

impl TokenRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenRole::LastNumeralToken => "last_numeral_token",
            TokenRole::LastPromptToken => "last_prompt_token",
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last_numeral_token" => Ok(TokenRole::LastNumeralToken),
            "last_prompt_token" => Ok(TokenRole::LastPromptToken),
            other => Err(format!("unknown token role {other:?}")),
        }
    }
}

/// Per-row targets. Absent values are NaN / `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowLabel {
    pub value_log2: Option<f64>,
    /// 1 iff the first operand is larger.
    pub gold: Option<u8>,
    pub log_ratio: Option<f64>,
    pub problem_id: u64,
}

impl RowLabel {
    pub fn new(problem_id: u64) -> Self {
        RowLabel {
            value_log2: None,
            gold: None,
            log_ratio: None,
            problem_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateMatrix {
    pub data: Vec<f32>,
    pub n: usize,
    pub d: usize,
    pub layer: i32,
    pub token_role: TokenRole,
    pub labels: Vec<RowLabel>,
    pub model_name: String,
}

impl HiddenStateMatrix {
    pub fn new(
        data: Vec<f32>,
        n: usize,
        d: usize,
        layer: i32,
        token_role: TokenRole,
        labels: Vec<RowLabel>,
        model_name: impl Into<String>,
    ) -> Result<Self, TensorIoError> {
        let m = HiddenStateMatrix {
            data,
            n,
            d,
            layer,
            token_role,
            labels,
            model_name: model_name.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TensorIoError> {
        if self.data.len() != self.n * self.d {
            return Err(TensorIoError::Invalid(format!(
                "data has {} values, expected n·d = {}",
                self.data.len(),
                self.n * self.d
            )));
        }
        if self.labels.len() != self.n {
            return Err(TensorIoError::Invalid(format!(
                "{} label records for {} rows",
                self.labels.len(),
                self.n
            )));
        }
        if self.model_name.contains('\n') {
            return Err(TensorIoError::Invalid("model_name contains a newline".into()));
        }
        if let Some(bad) = self.labels.iter().find_map(|l| l.gold.filter(|&g| g > 1)) {
            return Err(TensorIoError::Invalid(format!("gold label {bad} is not binary")));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Keeps only the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> HiddenStateMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        HiddenStateMatrix {
            data,
            n: indices.len(),
            d: self.d,
            layer: self.layer,
            token_role: self.token_role,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            model_name: self.model_name.clone(),
        }
    }

    fn header_text(&self) -> String {
        format!(
            "n={}\nd={}\nlayer={}\ntoken_role={}\nmodel_name={}\ndtype=f32\n",
            self.n, self.d, self.layer, self.token_role, self.model_name
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorIoError> {
        self.validate()?;
        let header = self.header_text();
        let mut out =
            Vec::with_capacity(MAGIC.len() + 4 + header.len() + self.data.len() * 4 + self.n * LABEL_RECORD_BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for label in &self.labels {
            out.extend_from_slice(&label.value_log2.unwrap_or(f64::NAN).to_le_bytes());
            out.push(label.gold.unwrap_or(NO_GOLD));
            out.extend_from_slice(&label.log_ratio.unwrap_or(f64::NAN).to_le_bytes());
            out.extend_from_slice(&label.problem_id.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let header = parse_header(bytes)?;
        let (n, d) = (header.n, header.d);
        let payload_len = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| TensorIoError::BadHeader("n·d overflows".into()))?;
        let labels_len = n * LABEL_RECORD_BYTES;
        let body = &bytes[header.body_offset..];
        if body.len() < payload_len + labels_len {
            return Err(TensorIoError::TruncatedPayload {
                expected: payload_len + labels_len,
                found: body.len(),
            });
        }
        if body.len() > payload_len + labels_len {
            return Err(TensorIoError::TrailingBytes(body.len() - payload_len - labels_len));
        }
        let data = body[..payload_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = body[payload_len..]
            .chunks_exact(LABEL_RECORD_BYTES)
            .map(|rec| {
                let f = |r: &[u8]| f64::from_le_bytes(r.try_into().unwrap());
                let value_log2 = f(&rec[0..8]);
                let gold = rec[8];
                let log_ratio = f(&rec[9..17]);
                RowLabel {
                    value_log2: (!value_log2.is_nan()).then_some(value_log2),
                    gold: (gold != NO_GOLD).then_some(gold),
                    log_ratio: (!log_ratio.is_nan()).then_some(log_ratio),
                    problem_id: u64::from_le_bytes(rec[17..25].try_into().unwrap()),
                }
            })
            .collect();
        let m = HiddenStateMatrix {
            data,
            n,
            d,
            layer: header.layer,
            token_role: header.token_role,
            labels,
            model_name: header.model_name,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Parsed file header, without the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixHeader {
    pub n: usize,
    pub d: usize,
    pub layer: i32,
    pub token_role: TokenRole,
    pub model_name: String,
    pub dtype: String,
    body_offset: usize,
}

impl fmt::Display for MatrixHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} d={} layer={} token_role={} model_name={} dtype={}",
            self.n, self.d, self.layer, self.token_role, self.model_name, self.dtype
        )
    }
}

fn parse_header(bytes: &[u8]) -> Result<MatrixHeader, TensorIoError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(TensorIoError::BadHeader("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let text = rest
        .get(4..4 + header_len)
        .ok_or_else(|| TensorIoError::BadHeader("header shorter than declared".into()))?;
    let text = std::str::from_utf8(text).map_err(|_| TensorIoError::BadHeader("header is not UTF-8".into()))?;

    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TensorIoError::BadHeader(format!("line {line:?} is not key=value")))?;
        fields.insert(key, value);
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| TensorIoError::BadHeader(format!("missing key {key:?}")))
    };
    let dtype = get("dtype")?;
    if dtype != "f32" {
        return Err(TensorIoError::UnsupportedDtype(dtype.to_string()));
    }
    let number = |key: &str| -> Result<i64, TensorIoError> {
        get(key)?
            .parse()
            .map_err(|_| TensorIoError::BadHeader(format!("{key} is not an integer")))
    };
    let n = number("n")?;
    let d = number("d")?;
    if n < 0 || d < 0 {
        return Err(TensorIoError::BadHeader("negative dimension".into()));
    }
    Ok(MatrixHeader {
        n: n as usize,
        d: d as usize,
        layer: i32::try_from(number("layer")?).map_err(|_| TensorIoError::BadHeader("layer out of range".into()))?,
        token_role: get("token_role")?.parse().map_err(TensorIoError::BadHeader)?,
        model_name: get("model_name")?.to_string(),
        dtype: dtype.to_string(),
        body_offset: MAGIC.len() + 4 + header_len,
    })
}

pub fn write_matrix(m: &HiddenStateMatrix, path: &Path) -> Result<(), TensorIoError> {
    let bytes = m.to_bytes()?;
    let io = |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&bytes).map_err(io)?;
    file.sync_all().map_err(io)
}

pub fn read_matrix(path: &Path) -> Result<HiddenStateMatrix, TensorIoError> {
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    HiddenStateMatrix::from_bytes(&bytes)
}

/// Validates a file fully and returns its header.
pub fn validate_file(path: &Path) -> Result<MatrixHeader, TensorIoError> {
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = parse_header(&bytes)?;
    HiddenStateMatrix::from_bytes(&bytes)?;
    Ok(header)
}
