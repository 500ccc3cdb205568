//! Exact positive decimal numerals in plain and scientific notation.
//!
//! A [`Numeral`] keeps its value as a canonical `(digits, exponent)` pair with
//! `value = digits × 10^exponent`, where `digits` carries neither leading nor
//! trailing zeros. Comparisons never go through binary floating point.

use std::cmp::Ordering;
use std::fmt;
use std::sync::OnceLock;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// log2(10) to double precision.
pub const LOG2_10: f64 = std::f64::consts::LOG2_10;

/// Plain-decimal rendering accepts at most this many fractional digits.
pub const MAX_DECIMAL_DIGITS: u8 = 4;

/// Decimal numerals, excluding those embedded in dotted version strings.
pub const DECIMAL_PATTERN: &str = r"(?<!\d\.)\d+\.\d+(?!\.\d)";
/// Flattened scientific literals (`3.2 × 10 -4`) as found in extracted PDF text.
pub const SCIENTIFIC_PATTERN: &str = r"(?:\d+(?:\.\d+)?)\s*×\s*10\s+[-+]?\d+";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumeralError {
    #[error("malformed numeral {0:?}")]
    Malformed(String),
    #[error("numeral {0:?} is not positive")]
    NonPositive(String),
    #[error("scientific rendering needs a value >= 1 (got {0})")]
    UnsupportedExponent(String),
    #[error("{0} has a fractional part and cannot be rendered as a plain integer")]
    NotAnInteger(String),
    #[error("{value} needs {needed} decimal digits but {requested} were requested")]
    PrecisionLoss {
        value: String,
        needed: usize,
        requested: u8,
    },
    #[error("decimal digit count {0} outside [0, 4]")]
    InvalidDecimalDigits(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Notation {
    PlainInt,
    PlainDec,
    Scientific,
}

impl Notation {
    pub fn as_str(self) -> &'static str {
        match self {
            Notation::PlainInt => "plain_int",
            Notation::PlainDec => "plain_dec",
            Notation::Scientific => "scientific",
        }
    }
}

impl fmt::Display for Notation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A positive numeral with an exact decimal value and the text it came from.
///
/// Equality and ordering compare values only, so `570` equals `5.7 × 10^2`.
#[derive(Debug, Clone)]
pub struct Numeral {
    digits: String,
    exponent: i64,
    notation: Notation,
    surface: String,
}

impl Numeral {
    /// Canonical significand digits (no leading or trailing zeros).
    pub fn digits(&self) -> &str {
        &self.digits
    }

    /// Decimal exponent applied to [`Numeral::digits`].
    pub fn exponent(&self) -> i64 {
        self.exponent
    }

    pub fn notation(&self) -> Notation {
        self.notation
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    /// Exponent of the leading digit, i.e. `floor(log10(value))`.
    pub fn order_of_magnitude(&self) -> i64 {
        self.exponent + self.digits.len() as i64 - 1
    }

    /// Number of digits before the decimal point (`1` for values below one).
    pub fn integer_digit_count(&self) -> usize {
        let order = self.order_of_magnitude();
        if order < 0 {
            1
        } else {
            order as usize + 1
        }
    }

    /// Number of fractional digits needed to write the value exactly.
    pub fn fractional_digit_count(&self) -> usize {
        if self.exponent < 0 {
            (-self.exponent) as usize
        } else {
            0
        }
    }

    pub fn log2_magnitude(&self) -> f64 {
        log2_magnitude(self)
    }

    /// Nearest double to the exact value.
    pub fn to_f64(&self) -> f64 {
        format!("{}e{}", self.digits, self.exponent)
            .parse()
            .expect("canonical digits always parse")
    }

    /// Re-renders the value in another notation and returns the resulting numeral.
    pub fn with_notation(&self, target: Notation, decimal_digits: Option<u8>) -> Result<Numeral, NumeralError> {
        let text = render_numeral(self, target, decimal_digits)?;
        Ok(Numeral {
            digits: self.digits.clone(),
            exponent: self.exponent,
            notation: target,
            surface: text,
        })
    }

    /// Builds a numeral from a canonical or non-canonical digit string.
    fn from_parts(
        all_digits: &str,
        exponent: i64,
        notation: Notation,
        surface: String,
    ) -> Result<Numeral, NumeralError> {
        let trimmed = all_digits.trim_start_matches('0');
        if trimmed.is_empty() {
            return Err(NumeralError::NonPositive(surface));
        }
        let significant = trimmed.trim_end_matches('0');
        let stripped = (trimmed.len() - significant.len()) as i64;
        Ok(Numeral {
            digits: significant.to_string(),
            exponent: exponent + stripped,
            notation,
            surface,
        })
    }

    fn value_string(&self) -> String {
        if self.exponent == 0 {
            self.digits.clone()
        } else {
            format!("{}e{}", self.digits, self.exponent)
        }
    }
}

impl PartialEq for Numeral {
    fn eq(&self, other: &Self) -> bool {
        self.digits == other.digits && self.exponent == other.exponent
    }
}

impl Eq for Numeral {}

impl PartialOrd for Numeral {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Numeral {
    fn cmp(&self, other: &Self) -> Ordering {
        // Canonical digits start with a nonzero digit, so equal orders of
        // magnitude reduce to a lexicographic digit comparison.
        self.order_of_magnitude()
            .cmp(&other.order_of_magnitude())
            .then_with(|| self.digits.as_bytes().cmp(other.digits.as_bytes()))
    }
}

impl fmt::Display for Numeral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

impl std::str::FromStr for Numeral {
    type Err = NumeralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_numeral(s)
    }
}

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn digits(&mut self) -> &'a str {
        let start = self.pos;
        let len = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        self.pos += len;
        &self.text[start..self.pos]
    }

    fn whitespace(&mut self) -> usize {
        let rest = self.rest();
        let trimmed = rest.trim_start();
        let skipped = rest.len() - trimmed.len();
        self.pos += skipped;
        skipped
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn signed_integer(&mut self) -> Option<i64> {
        let start = self.pos;
        if !self.eat("-") {
            self.eat("+");
        }
        if self.digits().is_empty() {
            self.pos = start;
            return None;
        }
        self.text[start..self.pos].parse().ok()
    }

    fn done(&self) -> bool {
        self.pos == self.text.len()
    }
}

/// Parses a single numeral: `342`, `342.0`, `5.7 × 10^2`, or the flattened `3.2 × 10 -4`.
pub fn parse_numeral(text: &str) -> Result<Numeral, NumeralError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(NumeralError::Malformed(text.to_string()));
    }
    if let Some(unsigned) = trimmed.strip_prefix('-') {
        return match parse_unsigned(unsigned) {
            Ok(_) | Err(NumeralError::NonPositive(_)) => Err(NumeralError::NonPositive(trimmed.to_string())),
            Err(_) => Err(NumeralError::Malformed(trimmed.to_string())),
        };
    }
    parse_unsigned(trimmed).map_err(|err| match err {
        NumeralError::Malformed(_) => NumeralError::Malformed(trimmed.to_string()),
        other => other,
    })
}

fn parse_unsigned(text: &str) -> Result<Numeral, NumeralError> {
    let malformed = || NumeralError::Malformed(text.to_string());
    let mut scan = Scanner { text, pos: 0 };
    let int_part = scan.digits();
    if int_part.is_empty() {
        return Err(malformed());
    }
    let mut frac_part = "";
    let mut notation = Notation::PlainInt;
    if scan.eat(".") {
        frac_part = scan.digits();
        if frac_part.is_empty() {
            return Err(malformed());
        }
        notation = Notation::PlainDec;
    }
    let mut exponent = 0i64;
    let after_mantissa = scan.pos;
    scan.whitespace();
    if scan.done() {
        if after_mantissa != text.len() {
            return Err(malformed());
        }
    } else {
        if !scan.eat("×") {
            return Err(malformed());
        }
        scan.whitespace();
        if !scan.eat("10") {
            return Err(malformed());
        }
        exponent = if scan.eat("^") {
            scan.signed_integer().ok_or_else(malformed)?
        } else {
            if scan.whitespace() == 0 {
                return Err(malformed());
            }
            scan.signed_integer().ok_or_else(malformed)?
        };
        if !scan.done() {
            return Err(malformed());
        }
        notation = Notation::Scientific;
    }
    let all_digits = format!("{int_part}{frac_part}");
    let exponent = exponent.checked_sub(frac_part.len() as i64).ok_or_else(malformed)?;
    Numeral::from_parts(&all_digits, exponent, notation, text.to_string())
}

/// Renders `n` in the target notation.
///
/// `decimal_digits` only applies to [`Notation::PlainDec`]; `None` uses as many
/// digits as the value needs, and zero digits render as a trailing `.0`.
pub fn render_numeral(n: &Numeral, target: Notation, decimal_digits: Option<u8>) -> Result<String, NumeralError> {
    match target {
        Notation::Scientific => {
            let order = n.order_of_magnitude();
            if order < 0 {
                return Err(NumeralError::UnsupportedExponent(n.value_string()));
            }
            let (lead, tail) = n.digits.split_at(1);
            if tail.is_empty() {
                Ok(format!("{lead} × 10^{order}"))
            } else {
                Ok(format!("{lead}.{tail} × 10^{order}"))
            }
        }
        Notation::PlainInt => {
            if n.exponent < 0 {
                return Err(NumeralError::NotAnInteger(n.value_string()));
            }
            Ok(format!("{}{}", n.digits, "0".repeat(n.exponent as usize)))
        }
        Notation::PlainDec => {
            let needed = n.fractional_digit_count();
            let places = match decimal_digits {
                Some(k) if k > MAX_DECIMAL_DIGITS => return Err(NumeralError::InvalidDecimalDigits(k)),
                Some(k) if (k as usize) < needed => {
                    return Err(NumeralError::PrecisionLoss {
                        value: n.value_string(),
                        needed,
                        requested: k,
                    })
                }
                Some(k) => k as usize,
                None => needed,
            };
            // value × 10^places as an integer digit string
            let shift = (n.exponent + places as i64) as usize;
            let scaled = format!("{}{}", n.digits, "0".repeat(shift));
            let scaled = if scaled.len() <= places {
                format!("{}{}", "0".repeat(places + 1 - scaled.len()), scaled)
            } else {
                scaled
            };
            let (int_part, frac_part) = scaled.split_at(scaled.len() - places);
            if places == 0 {
                Ok(format!("{int_part}.0"))
            } else {
                Ok(format!("{int_part}.{frac_part}"))
            }
        }
    }
}

/// log2 of the exact value, as `log2(significand) + exponent · log2(10)`.
pub fn log2_magnitude(n: &Numeral) -> f64 {
    // f64 holds 17 significant digits; the rest only shifts the exponent.
    let kept = n.digits.len().min(17);
    let significand: f64 = n.digits[..kept].parse().expect("ascii digits");
    let exponent = n.exponent + (n.digits.len() - kept) as i64;
    significand.log2() + exponent as f64 * LOG2_10
}

/// log2(a / b) from the significands' ratio, avoiding cancellation of two large logs.
pub fn log2_ratio(a: &Numeral, b: &Numeral) -> f64 {
    let (sig_a, exp_a) = leading_significand(a);
    let (sig_b, exp_b) = leading_significand(b);
    (sig_a / sig_b).log2() + (exp_a - exp_b) as f64 * LOG2_10
}

// Significand scaled into [1, 10) plus matching exponent.
fn leading_significand(n: &Numeral) -> (f64, i64) {
    let kept = n.digits.len().min(17);
    let text = format!("{}.{}", &n.digits[..1], &n.digits[1..kept]);
    let text = text.trim_end_matches('.');
    (text.parse().expect("ascii digits"), n.order_of_magnitude())
}

/// A numeral located inside a source document.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedNumeral {
    pub numeral: Numeral,
    /// Byte offsets `[start, end)` into the document.
    pub byte_span: (usize, usize),
    pub doc_id: String,
}

/// Line-delimited record written by the `extract` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub value_log2: f64,
    pub notation: Notation,
}

impl ExtractedNumeral {
    pub fn to_record(&self) -> ExtractionRecord {
        ExtractionRecord {
            doc_id: self.doc_id.clone(),
            start: self.byte_span.0,
            end: self.byte_span.1,
            surface: self.numeral.surface().to_string(),
            value_log2: self.numeral.log2_magnitude(),
            notation: self.numeral.notation(),
        }
    }
}

fn decimal_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(DECIMAL_PATTERN).expect("valid pattern"))
}

fn scientific_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(SCIENTIFIC_PATTERN).expect("valid pattern"))
}

fn find_spans(re: &Regex, document: &str) -> Vec<(usize, usize)> {
    // Backtracking limits only trip on pathological inputs; such matches are dropped.
    re.find_iter(document)
        .filter_map(Result::ok)
        .map(|m| (m.start(), m.end()))
        .collect()
}

/// Extracts decimal and flattened-scientific numerals from a document.
///
/// Scientific matches win over any decimal match they overlap. Matches whose
/// value is zero are skipped. Results are ordered by span start.
pub fn extract_numerals(document: &str, doc_id: &str) -> Vec<ExtractedNumeral> {
    let scientific = find_spans(scientific_regex(), document);
    let decimal = find_spans(decimal_regex(), document)
        .into_iter()
        .filter(|&(s, e)| scientific.iter().all(|&(ss, se)| e <= ss || s >= se));

    let mut spans: Vec<(usize, usize)> = scientific.iter().copied().chain(decimal).collect();
    spans.sort_unstable();
    spans
        .into_iter()
        .filter_map(|(start, end)| {
            parse_numeral(&document[start..end])
                .ok()
                .map(|numeral| ExtractedNumeral {
                    numeral,
                    byte_span: (start, end),
                    doc_id: doc_id.to_string(),
                })
        })
        .collect()
}
