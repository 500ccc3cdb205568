//! Cross-notation comparison data: generation, prompts, serialization, and
//! plain-text corpus ingestion.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerals::{self, extract_numerals, parse_numeral, ExtractedNumeral, Notation, Numeral, NumeralError};

pub const MIN_DIGITS: u32 = 2;
pub const MAX_DIGITS: u32 = 9;
pub const PAIRS_PER_LENGTH: usize = 1_400;
pub const TRAIN_SIZE: usize = 8_000;
pub const VALIDATION_SIZE: usize = 1_600;
pub const TEST_SIZE: usize = 1_600;
/// Character proxy for a 30,000-token document limit.
pub const DEFAULT_MAX_CHARS: usize = 120_000;

pub const SPLIT_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.jsonl"),
    (Split::Validation, "validation.jsonl"),
    (Split::Test, "test.jsonl"),
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("operands are equal ({0})")]
    EqualOperands(String),
    #[error("k-shot prompts take k in [1, 5], got {0}")]
    InvalidK(u8),
    #[error("no input files given")]
    EmptyCorpus,
    #[error(transparent)]
    Numeral(#[from] NumeralError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "int-sci")]
    IntSci,
    #[serde(rename = "dec-sci")]
    DecSci,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::IntSci => "int-sci",
            Variant::DecSci => "dec-sci",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "int-sci" => Ok(Variant::IntSci),
            "dec-sci" => Ok(Variant::DecSci),
            other => Err(format!("unknown variant {other:?} (expected int-sci or dec-sci)")),
        }
    }
}

/// Which operand of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::First => "first",
            Side::Second => "second",
        }
    }

    /// Binary label used by the classifier probe: 1 iff the first operand is larger.
    pub fn label(self) -> u8 {
        match self {
            Side::First => 1,
            Side::Second => 0,
        }
    }

    pub fn from_label(label: u8) -> Side {
        if label == 1 {
            Side::First
        } else {
            Side::Second
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// An ordered numeral pair with its gold answer and derived statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonProblem {
    pub id: u64,
    pub a: Numeral,
    pub b: Numeral,
    pub gold: Side,
    /// log2(a / b)
    pub log_ratio: f64,
    /// Integer-part digit count of `a`.
    pub digit_len: u32,
    /// log2(a + b)
    pub log_sum: f64,
    pub variant: Variant,
}

impl ComparisonProblem {
    pub fn operand(&self, side: Side) -> &Numeral {
        match side {
            Side::First => &self.a,
            Side::Second => &self.b,
        }
    }

    /// Answer text the model is trained to produce (the larger operand's surface).
    pub fn answer_surface(&self) -> &str {
        self.operand(self.gold).surface()
    }
}

/// Computes gold label and statistics for an operand pair.
///
/// Generated data always has exactly one scientific operand; this function
/// accepts any pair so it also serves same-notation corpora.
pub fn annotate_problem(a: Numeral, b: Numeral) -> Result<ComparisonProblem, DatasetError> {
    if a == b {
        return Err(DatasetError::EqualOperands(format!("{a} vs {b}")));
    }
    let gold = if a > b { Side::First } else { Side::Second };
    let log_ratio = numerals::log2_ratio(&a, &b);
    let log_sum = (a.to_f64() + b.to_f64()).log2();
    let plain_is_decimal = [&a, &b].iter().any(|n| n.notation() == Notation::PlainDec);
    Ok(ComparisonProblem {
        id: 0,
        digit_len: a.integer_digit_count() as u32,
        gold,
        log_ratio,
        log_sum,
        variant: if plain_is_decimal {
            Variant::DecSci
        } else {
            Variant::IntSci
        },
        a,
        b,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ComparisonProblem>,
    pub validation: Vec<ComparisonProblem>,
    pub test: Vec<ComparisonProblem>,
    pub seed: u64,
    pub variant: Variant,
}

impl DatasetSplit {
    pub fn split(&self, split: Split) -> &[ComparisonProblem] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (Split, &ComparisonProblem)> {
        self.train
            .iter()
            .map(|p| (Split::Train, p))
            .chain(self.validation.iter().map(|p| (Split::Validation, p)))
            .chain(self.test.iter().map(|p| (Split::Test, p)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// problem_id → split lookup.
    pub fn split_index(&self) -> SplitIndex {
        SplitIndex(self.iter_all().map(|(s, p)| (p.id, s)).collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitIndex(HashMap<u64, Split>);

impl SplitIndex {
    pub fn get(&self, problem_id: u64) -> Option<Split> {
        self.0.get(&problem_id).copied()
    }
}

fn random_integer(rng: &mut ChaCha8Rng, digits: u32) -> u64 {
    let low = 10u64.pow(digits - 1);
    rng.gen_range(low..low * 10)
}

fn random_plain(rng: &mut ChaCha8Rng, digits: u32, variant: Variant) -> Numeral {
    let int_part = random_integer(rng, digits);
    let text = match variant {
        Variant::IntSci => int_part.to_string(),
        Variant::DecSci => {
            let places = rng.gen_range(0..=numerals::MAX_DECIMAL_DIGITS);
            if places == 0 {
                format!("{int_part}.0")
            } else {
                let frac: String = (0..places).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect();
                format!("{int_part}.{frac}")
            }
        }
    };
    parse_numeral(&text).expect("generated numerals are well formed")
}

fn distinct_pair(rng: &mut ChaCha8Rng, digits: u32, variant: Variant) -> (Numeral, Numeral) {
    loop {
        let a = random_plain(rng, digits, variant);
        let b = random_plain(rng, digits, variant);
        if a != b {
            return (a, b);
        }
    }
}

fn to_scientific(n: &Numeral) -> Numeral {
    n.with_notation(Notation::Scientific, None)
        .expect("generated values are >= 10")
}

/// Generates the 11,200-problem cross-notation dataset for one variant.
///
/// For every digit length in 2..=9, 1,400 pairs of distinct uniform integers
/// of that length are drawn (dec-sci appends 0-4 random decimals to each side
/// independently); a fair coin picks which side is rewritten in scientific
/// notation. The union is shuffled and split 8,000 / 1,600 / 1,600.
pub fn generate_cross_notation(seed: u64, variant: Variant) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::with_capacity(PAIRS_PER_LENGTH * 8);
    for digits in MIN_DIGITS..=MAX_DIGITS {
        for _ in 0..PAIRS_PER_LENGTH {
            let (a, b) = distinct_pair(&mut rng, digits, variant);
            let (a, b) = if rng.gen_bool(0.5) {
                (to_scientific(&a), b)
            } else {
                (a, to_scientific(&b))
            };
            let mut problem = annotate_problem(a, b).expect("pair is distinct");
            problem.digit_len = digits;
            problem.variant = variant;
            problems.push(problem);
        }
    }
    problems.shuffle(&mut rng);
    for (id, problem) in problems.iter_mut().enumerate() {
        problem.id = id as u64;
    }
    let test = problems.split_off(TRAIN_SIZE + VALIDATION_SIZE);
    let validation = problems.split_off(TRAIN_SIZE);
    DatasetSplit {
        train: problems,
        validation,
        test,
        seed,
        variant,
    }
}

/// Same-notation comparisons (plain vs plain, scientific vs scientific) used
/// as a held-apart pretraining corpus for the toy model.
pub fn generate_same_notation(seed: u64, variant: Variant, count: usize) -> Vec<ComparisonProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let digits = rng.gen_range(MIN_DIGITS..=MAX_DIGITS);
            let (a, b) = distinct_pair(&mut rng, digits, variant);
            let (a, b) = if rng.gen_bool(0.5) {
                (to_scientific(&a), to_scientific(&b))
            } else {
                (a, b)
            };
            let mut problem = annotate_problem(a, b).expect("pair is distinct");
            problem.id = i as u64;
            problem.digit_len = digits;
            problem.variant = variant;
            problem
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prompts

pub const QUESTION_PREFIX: &str = "Q: Which is larger, ";

/// (first operand, second operand, answer) of the published demonstrations.
pub const INT_SCI_DEMOS: [(&str, &str, &str); 5] = [
    ("9.9 × 10^2", "100", "9.9 × 10^2"),
    ("161230", "7.182 × 10^5", "7.182 × 10^5"),
    ("713", "4.78 × 10^2", "713"),
    ("1.354 × 10^6", "4906723", "4906723"),
    ("20834", "6.5 × 10^3", "20834"),
];
pub const DEC_SCI_DEMO: (&str, &str, &str) = ("9.9 × 10^2", "899.9", "9.9 × 10^2");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    ZeroShot,
    KShot(u8),
}

/// Operand order of the first demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemoOrder {
    /// Demonstration exactly as published.
    #[default]
    AsPublished,
    /// Operands of the first demonstration exchanged (position-bias probe).
    SwappedFirstDemo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub demo_order: DemoOrder,
    pub variant: Variant,
}

impl PromptSpec {
    pub fn zero_shot(variant: Variant) -> Self {
        PromptSpec {
            mode: PromptMode::ZeroShot,
            demo_order: DemoOrder::AsPublished,
            variant,
        }
    }

    pub fn k_shot(variant: Variant, k: u8) -> Self {
        PromptSpec {
            mode: PromptMode::KShot(k),
            demo_order: DemoOrder::AsPublished,
            variant,
        }
    }
}

pub fn question(a: &str, b: &str) -> String {
    format!("{QUESTION_PREFIX}{a} or {b}? A:")
}

/// Renders a prompt from operand surfaces.
pub fn make_prompt_from_surfaces(a: &str, b: &str, spec: &PromptSpec) -> Result<String, DatasetError> {
    let k = match spec.mode {
        PromptMode::ZeroShot => return Ok(question(a, b)),
        PromptMode::KShot(k) if (1..=5).contains(&k) => k as usize,
        PromptMode::KShot(k) => return Err(DatasetError::InvalidK(k)),
    };
    let mut demos: Vec<(&str, &str, &str)> = INT_SCI_DEMOS[..k].to_vec();
    if spec.variant == Variant::DecSci {
        demos[0] = DEC_SCI_DEMO;
    }
    if spec.demo_order == DemoOrder::SwappedFirstDemo {
        let (x, y, ans) = demos[0];
        demos[0] = (y, x, ans);
    }
    let mut out = String::new();
    for (x, y, ans) in demos {
        out.push_str(&question(x, y));
        out.push(' ');
        out.push_str(ans);
        out.push('\n');
    }
    out.push_str(&question(a, b));
    Ok(out)
}

pub fn make_prompt(p: &ComparisonProblem, spec: &PromptSpec) -> Result<String, DatasetError> {
    make_prompt_from_surfaces(p.a.surface(), p.b.surface(), spec)
}

// ---------------------------------------------------------------------------
// Serialization

/// One line of `train.jsonl` / `validation.jsonl` / `test.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: u64,
    pub a_surface: String,
    pub b_surface: String,
    pub gold: Side,
    pub log_ratio: f64,
    pub digit_len: u32,
    pub log_sum: f64,
    pub variant: Variant,
    pub split: Split,
}

impl ProblemRecord {
    pub fn new(p: &ComparisonProblem, split: Split) -> Self {
        ProblemRecord {
            id: p.id,
            a_surface: p.a.surface().to_string(),
            b_surface: p.b.surface().to_string(),
            gold: p.gold,
            log_ratio: p.log_ratio,
            digit_len: p.digit_len,
            log_sum: p.log_sum,
            variant: p.variant,
            split,
        }
    }

    pub fn to_problem(&self) -> Result<ComparisonProblem, String> {
        let a = parse_numeral(&self.a_surface).map_err(|e| e.to_string())?;
        let b = parse_numeral(&self.b_surface).map_err(|e| e.to_string())?;
        let mut p = annotate_problem(a, b).map_err(|e| e.to_string())?;
        if p.gold != self.gold {
            return Err(format!("gold label {} contradicts operand values", self.gold.as_str()));
        }
        p.id = self.id;
        p.digit_len = self.digit_len;
        p.variant = self.variant;
        p.log_ratio = self.log_ratio;
        p.log_sum = self.log_sum;
        Ok(p)
    }
}

pub fn write_problems(path: &Path, problems: &[ComparisonProblem], split: Split) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for p in problems {
        let line = serde_json::to_string(&ProblemRecord::new(p, split)).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_problems(path: &Path) -> Result<Vec<ComparisonProblem>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut problems = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::BadRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: ProblemRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        problems.push(record.to_problem().map_err(bad)?);
    }
    Ok(problems)
}

/// Writes the three split files into `dir` and returns their paths.
pub fn write_dataset(dir: &Path, data: &DatasetSplit) -> Result<Vec<PathBuf>, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    SPLIT_FILES
        .iter()
        .map(|&(split, name)| {
            let path = dir.join(name);
            write_problems(&path, data.split(split), split)?;
            Ok(path)
        })
        .collect()
}

/// Reads a directory written by [`write_dataset`]. `seed` is not stored in
/// the records and is reported as 0.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit, DatasetError> {
    let train = read_problems(&dir.join("train.jsonl"))?;
    let validation = read_problems(&dir.join("validation.jsonl"))?;
    let test = read_problems(&dir.join("test.jsonl"))?;
    let variant = train
        .first()
        .or(validation.first())
        .or(test.first())
        .map(|p| p.variant)
        .unwrap_or(Variant::IntSci);
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed: 0,
        variant,
    })
}

// ---------------------------------------------------------------------------
// Corpus ingestion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocumentMode {
    #[default]
    PerFile,
    PerLine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentExtraction {
    pub doc_id: String,
    pub numerals: Vec<ExtractedNumeral>,
}

#[derive(Debug, Default)]
pub struct CorpusExtraction {
    pub documents: Vec<DocumentExtraction>,
    pub kept: usize,
    pub skipped: usize,
    /// Unreadable inputs; these do not abort ingestion.
    pub errors: Vec<(PathBuf, String)>,
}

impl CorpusExtraction {
    pub fn numeral_count(&self) -> usize {
        self.documents.iter().map(|d| d.numerals.len()).sum()
    }

    fn add_document(&mut self, doc_id: String, text: &str, max_chars: usize) {
        if text.chars().count() > max_chars {
            self.skipped += 1;
            return;
        }
        self.kept += 1;
        let numerals = extract_numerals(text, &doc_id);
        self.documents.push(DocumentExtraction { doc_id, numerals });
    }
}

/// Extracts numerals from plain-text files, in path order.
pub fn ingest_corpus(
    paths: &[PathBuf],
    max_chars: usize,
    mode: DocumentMode,
) -> Result<CorpusExtraction, DatasetError> {
    if paths.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut result = CorpusExtraction::default();
    for path in paths {
        let text = match fs::read_to_string(path) {
            Ok(text) => text,
            Err(err) => {
                result.errors.push((path.clone(), err.to_string()));
                continue;
            }
        };
        let name = path.display().to_string();
        match mode {
            DocumentMode::PerFile => result.add_document(name, &text, max_chars),
            DocumentMode::PerLine => {
                for (i, line) in text.lines().enumerate() {
                    if !line.trim().is_empty() {
                        result.add_document(format!("{name}:{}", i + 1), line, max_chars);
                    }
                }
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(s: &str) -> Numeral {
        parse_numeral(s).unwrap()
    }

    #[test]
    fn annotate_examples() {
        let p = annotate_problem(num("1024"), num("512")).unwrap();
        assert_eq!(p.gold, Side::First);
        assert_eq!(p.log_ratio, 1.0);

        let p = annotate_problem(num("570"), num("580")).unwrap();
        assert_eq!(p.gold, Side::Second);
        // mpmath: -0.0250909809628304454725149577733, 10.1674181458317375680347871031
        assert!((p.log_ratio + 0.025090980962830446).abs() < 1e-15);
        assert!((p.log_sum - 10.167418145831737).abs() < 1e-14);
        assert_eq!(p.digit_len, 3);

        assert!(matches!(
            annotate_problem(num("570"), num("5.7 × 10^2")),
            Err(DatasetError::EqualOperands(_))
        ));
    }

    #[test]
    fn prompt_templates() {
        let p = annotate_problem(num("570"), num("5.8 × 10^2")).unwrap();
        assert_eq!(
            make_prompt(&p, &PromptSpec::zero_shot(Variant::IntSci)).unwrap(),
            "Q: Which is larger, 570 or 5.8 × 10^2? A:"
        );
        let one = make_prompt(&p, &PromptSpec::k_shot(Variant::IntSci, 1)).unwrap();
        assert!(one.starts_with("Q: Which is larger, 9.9 × 10^2 or 100? A: 9.9 × 10^2\n"));
        let five = make_prompt(&p, &PromptSpec::k_shot(Variant::IntSci, 5)).unwrap();
        assert_eq!(
            five.lines().nth(4).unwrap(),
            "Q: Which is larger, 20834 or 6.5 × 10^3? A: 20834"
        );
        let dec = make_prompt(&p, &PromptSpec::k_shot(Variant::DecSci, 1)).unwrap();
        assert!(dec.starts_with("Q: Which is larger, 9.9 × 10^2 or 899.9? A: 9.9 × 10^2\n"));
        let swapped = PromptSpec {
            demo_order: DemoOrder::SwappedFirstDemo,
            ..PromptSpec::k_shot(Variant::IntSci, 1)
        };
        assert!(make_prompt(&p, &swapped)
            .unwrap()
            .starts_with("Q: Which is larger, 100 or 9.9 × 10^2? A: 9.9 × 10^2\n"));
        for k in [0, 6] {
            assert!(matches!(
                make_prompt(&p, &PromptSpec::k_shot(Variant::IntSci, k)),
                Err(DatasetError::InvalidK(_))
            ));
        }
    }

    #[test]
    fn same_notation_corpus_has_matching_notations() {
        let corpus = generate_same_notation(3, Variant::IntSci, 200);
        assert_eq!(corpus.len(), 200);
        assert!(corpus.iter().all(|p| p.a.notation() == p.b.notation()));
        assert!(corpus.iter().any(|p| p.a.notation() == Notation::Scientific));
        assert!(corpus.iter().any(|p| p.a.notation() == Notation::PlainInt));
    }

    #[test]
    fn ingest_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (name, text) in [
            ("a.txt", "mass 9.1 × 10 -31 kg"),
            ("b.txt", "pi is 3.14"),
            ("c.txt", &"x".repeat(50)),
        ] {
            let path = dir.path().join(name);
            fs::write(&path, text).unwrap();
            paths.push(path);
        }
        paths.push(dir.path().join("missing.txt"));
        let out = ingest_corpus(&paths, 40, DocumentMode::PerFile).unwrap();
        assert_eq!((out.kept, out.skipped), (2, 1));
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.documents[0].numerals.len(), 1);
        assert_eq!(out.documents[0].numerals[0].numeral.notation(), Notation::Scientific);
        assert!(matches!(
            ingest_corpus(&[], 10, DocumentMode::PerFile),
            Err(DatasetError::EmptyCorpus)
        ));
    }

    #[test]
    fn ingest_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lines.txt");
        fs::write(&path, "first 1.5\n\nsecond 2.5 and 3.5\n").unwrap();
        let out = ingest_corpus(&[path], 100, DocumentMode::PerLine).unwrap();
        assert_eq!(out.kept, 2);
        assert!(out.documents[1].doc_id.ends_with(":3"));
        assert_eq!(out.numeral_count(), 3);
    }
}
