//! Greedy generation, answer parsing, verbalization accuracy, and hidden-state export.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::model::{self, Decoder};
use super::train::states_at;
use super::{ToyError, ToyModel};
use crate::dataset::{self, ComparisonProblem, PromptSpec, Side};
use crate::numerals::{parse_numeral, Numeral};
use crate::tensorio::{HiddenStateMatrix, RowLabel, TokenRole};

/// Upper bound on generated tokens per answer.
pub const MAX_ANSWER_TOKENS: usize = 24;

/// Anything that answers a prompt with text.
pub trait Generator {
    fn generate(&self, prompt: &str) -> Result<String, ToyError>;
}

impl Generator for ToyModel {
    /// Greedy decoding until a newline, the token cap, or the context limit.
    /// The newline is not included.
    fn generate(&self, prompt: &str) -> Result<String, ToyError> {
        let tokens = self.encode_fitting(prompt)?;
        let layout = self.layout();
        let mut dec = Decoder::new(&layout, &self.params);
        let mut logits = Vec::new();
        for &t in &tokens {
            logits = dec.step(t)?;
        }
        let mut out = Vec::new();
        while out.len() < MAX_ANSWER_TOKENS {
            let next = model::argmax(&logits);
            if next == self.tokenizer.newline() {
                break;
            }
            out.push(next);
            if dec.len() >= self.config.context_len {
                break;
            }
            logits = dec.step(next)?;
        }
        Ok(self.tokenizer.decode(&out))
    }
}

fn last_question(prompt: &str) -> Option<(&str, &str)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Which is larger, (.+) or (.+)\? A:$").expect("valid pattern"));
    let caps = re.captures(prompt)?;
    Some((caps.get(1)?.as_str(), caps.get(2)?.as_str()))
}

/// Always answers with the second operand of the final question.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoModel;

impl Generator for EchoModel {
    fn generate(&self, prompt: &str) -> Result<String, ToyError> {
        Ok(last_question(prompt).map(|(_, b)| format!(" {b}")).unwrap_or_default())
    }
}

/// Always answers with the larger operand of the final question.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldOracle;

impl Generator for GoldOracle {
    fn generate(&self, prompt: &str) -> Result<String, ToyError> {
        let Some((a, b)) = last_question(prompt) else {
            return Ok(String::new());
        };
        match (parse_numeral(a), parse_numeral(b)) {
            (Ok(x), Ok(y)) => Ok(format!(" {}", if x > y { a } else { b })),
            _ => Ok(String::new()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    First,
    Second,
    Unparsed,
}

impl ParsedAnswer {
    pub fn side(self) -> Option<Side> {
        match self {
            ParsedAnswer::First => Some(Side::First),
            ParsedAnswer::Second => Some(Side::Second),
            ParsedAnswer::Unparsed => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParsedAnswer::First => "first",
            ParsedAnswer::Second => "second",
            ParsedAnswer::Unparsed => "unparsed",
        }
    }
}

/// Plain integers, decimals, and scientific notation with or without `^`.
fn numeral_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?(?:\s*×\s*10\s*\^?\s*[-+]?\d+)?").expect("valid pattern"))
}

/// Matches the first numeral of a response against the two operands by value.
///
/// Either notation is accepted (`5.7 × 10^2` and `570` both match 570). A
/// response without a numeral, or whose first numeral is neither operand, is
/// `Unparsed`.
pub fn parse_response(text: &str, p: &ComparisonProblem) -> ParsedAnswer {
    let Some(m) = numeral_regex().find(text) else {
        return ParsedAnswer::Unparsed;
    };
    let Ok(value) = parse_numeral(m.as_str()) else {
        return ParsedAnswer::Unparsed;
    };
    if value == p.a {
        ParsedAnswer::First
    } else if value == p.b {
        ParsedAnswer::Second
    } else {
        ParsedAnswer::Unparsed
    }
}

/// A model's raw answer to one problem, as exchanged between components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub problem_id: u64,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse {
    pub problem_id: u64,
    pub response: String,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbalEval {
    pub accuracy: f64,
    pub unparsed: usize,
    pub records: Vec<ScoredResponse>,
}

impl VerbalEval {
    pub fn predictions(&self) -> Vec<Option<Side>> {
        self.records.iter().map(|r| r.parsed.side()).collect()
    }

    pub fn to_records(&self) -> Vec<ResponseRecord> {
        self.records
            .iter()
            .map(|r| ResponseRecord {
                problem_id: r.problem_id,
                response: r.response.clone(),
                parsed: Some(r.parsed),
                correct: Some(r.correct),
            })
            .collect()
    }
}

/// Scores `(problem, response)` pairs; unparseable answers count as wrong.
pub fn score_responses<'a>(pairs: impl IntoIterator<Item = (&'a ComparisonProblem, String)>) -> VerbalEval {
    let mut records = Vec::new();
    let mut correct = 0;
    let mut unparsed = 0;
    for (p, response) in pairs {
        let parsed = parse_response(&response, p);
        let ok = parsed.side() == Some(p.gold);
        correct += usize::from(ok);
        unparsed += usize::from(parsed == ParsedAnswer::Unparsed);
        records.push(ScoredResponse {
            problem_id: p.id,
            response,
            parsed,
            correct: ok,
            log_ratio: p.log_ratio,
        });
    }
    let accuracy = if records.is_empty() {
        f64::NAN
    } else {
        correct as f64 / records.len() as f64
    };
    VerbalEval {
        accuracy,
        unparsed,
        records,
    }
}

/// Generates an answer for every problem and scores it.
pub fn verbal_eval<G: Generator + ?Sized>(
    g: &G,
    problems: &[ComparisonProblem],
    spec: &PromptSpec,
) -> Result<VerbalEval, ToyError> {
    let mut pairs = Vec::with_capacity(problems.len());
    for p in problems {
        let prompt = dataset::make_prompt(p, spec)?;
        pairs.push((p, g.generate(&prompt)?));
    }
    Ok(score_responses(pairs))
}

pub fn write_responses(path: &Path, records: &[ResponseRecord]) -> Result<(), ToyError> {
    let io = |source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>, ToyError> {
    let text = fs::read_to_string(path).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ToyError::InvalidConfig(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn check_layer(model: &ToyModel, layer: usize) -> Result<(), ToyError> {
    let n_layers = model.config.n_layers;
    if !(1..=n_layers).contains(&layer) {
        return Err(ToyError::LayerOutOfRange { layer, n_layers });
    }
    Ok(())
}

/// Output of block `layer` at token `position`.
pub fn hidden_state_at(model: &ToyModel, prompt: &str, layer: usize, position: usize) -> Result<Vec<f32>, ToyError> {
    check_layer(model, layer)?;
    let tokens = model.encode_fitting(prompt)?;
    if position >= tokens.len() {
        return Err(ToyError::InvalidConfig(format!(
            "position {position} beyond a {}-token prompt",
            tokens.len()
        )));
    }
    Ok(states_at(&model.layout(), &model.params, &[tokens], &[vec![position]], &[layer])?.remove(0))
}

/// Output of block `layer` at the last prompt token, or at the last character
/// of the prompt's final numeral.
pub fn hidden_states(model: &ToyModel, prompt: &str, layer: usize, role: TokenRole) -> Result<Vec<f32>, ToyError> {
    let position = match role {
        TokenRole::LastPromptToken => prompt.chars().count().checked_sub(1),
        TokenRole::LastNumeralToken => numeral_regex()
            .find_iter(prompt)
            .last()
            .map(|m| prompt[..m.end()].chars().count() - 1),
    }
    .ok_or_else(|| ToyError::InvalidConfig("prompt has no position for the requested token role".into()))?;
    hidden_state_at(model, prompt, layer, position)
}

/// Token positions of the last characters of both operands in a prompt that
/// ends with the comparison question.
fn operand_ends(prompt: &str, p: &ComparisonProblem) -> (usize, usize) {
    let total = prompt.chars().count();
    let b_end = total - "? A:".len() - 1;
    let a_end = b_end - p.b.surface().chars().count() - " or ".len();
    (a_end, b_end)
}

fn operand(n: &Numeral) -> f64 {
    n.log2_magnitude()
}

/// One matrix per layer for `problems`.
///
/// `LastPromptToken` gives one row per problem labelled with gold side and
/// log-ratio; `LastNumeralToken` gives two rows per problem (first operand,
/// then second) labelled with each operand's log2 magnitude.
pub fn export_hidden_states(
    model: &ToyModel,
    problems: &[ComparisonProblem],
    spec: &PromptSpec,
    layers: &[usize],
    role: TokenRole,
) -> Result<Vec<HiddenStateMatrix>, ToyError> {
    for &l in layers {
        check_layer(model, l)?;
    }
    let mut tokens = Vec::with_capacity(problems.len());
    let mut positions = Vec::with_capacity(problems.len());
    let mut labels = Vec::new();
    for p in problems {
        let prompt = dataset::make_prompt(p, spec)?;
        let t = model.encode_fitting(&prompt)?;
        match role {
            TokenRole::LastPromptToken => {
                positions.push(vec![t.len() - 1]);
                labels.push(RowLabel {
                    gold: Some(p.gold.label()),
                    log_ratio: Some(p.log_ratio),
                    ..RowLabel::new(p.id)
                });
            }
            TokenRole::LastNumeralToken => {
                let (a_end, b_end) = operand_ends(&prompt, p);
                positions.push(vec![a_end, b_end]);
                for n in [&p.a, &p.b] {
                    labels.push(RowLabel {
                        value_log2: Some(operand(n)),
                        ..RowLabel::new(p.id)
                    });
                }
            }
        }
        tokens.push(t);
    }
    let layout = model.layout();
    let data = states_at(&layout, &model.params, &tokens, &positions, layers)?;
    data.into_iter()
        .zip(layers)
        .map(|(rows, &layer)| {
            HiddenStateMatrix::new(
                rows,
                labels.len(),
                layout.d,
                layer as i32,
                role,
                labels.clone(),
                "toylm",
            )
            .map_err(|e| ToyError::InvalidConfig(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{annotate_problem, Variant};
    use crate::numerals::parse_numeral;

    fn problem(a: &str, b: &str) -> ComparisonProblem {
        annotate_problem(parse_numeral(a).unwrap(), parse_numeral(b).unwrap()).unwrap()
    }

    #[test]
    fn parses_answers() {
        let p = problem("570", "580");
        let q = problem("5.7 × 10^2", "580");
        assert_eq!(parse_response("5.7 × 10^2", &p), ParsedAnswer::First);
        assert_eq!(parse_response(" 580 is larger.", &p), ParsedAnswer::Second);
        assert_eq!(parse_response("42", &p), ParsedAnswer::Unparsed);
        assert_eq!(parse_response("I don't know", &p), ParsedAnswer::Unparsed);
        assert_eq!(parse_response("", &p), ParsedAnswer::Unparsed);
        assert_eq!(parse_response(" 570", &q), ParsedAnswer::First);
        assert_eq!(parse_response("5.8 × 10^2", &q), ParsedAnswer::Second);
    }

    #[test]
    fn demo_answer_parses_first() {
        let p = problem("9.9 × 10^2", "100");
        assert_eq!(parse_response("9.9 × 10^2", &p), ParsedAnswer::First);
    }

    #[test]
    fn mock_generators() {
        let problems = vec![
            problem("5.7 × 10^2", "580"),
            problem("713", "4.78 × 10^2"),
            problem("1.2 × 10^3", "1100"),
        ];
        let spec = PromptSpec::zero_shot(Variant::IntSci);
        let echo = verbal_eval(&EchoModel, &problems, &spec).unwrap();
        assert!((echo.accuracy - 1.0 / 3.0).abs() < 1e-12);
        let oracle = verbal_eval(&GoldOracle, &problems, &spec).unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let one_shot = verbal_eval(&GoldOracle, &problems, &PromptSpec::k_shot(Variant::IntSci, 3)).unwrap();
        assert_eq!(one_shot.accuracy, 1.0);
    }

    #[test]
    fn operand_positions() {
        let p = problem("5.7 × 10^2", "580");
        let prompt = dataset::make_prompt(&p, &PromptSpec::zero_shot(Variant::IntSci)).unwrap();
        let chars: Vec<char> = prompt.chars().collect();
        let (a, b) = operand_ends(&prompt, &p);
        assert_eq!((chars[a], chars[b]), ('2', '0'));
        assert_eq!(chars[b - 3], ' ');
    }
}
