use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairKind {
    None,
    FenceStripped,
    TrailingProseStripped,
    ReAsk,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseError {
    #[error("no parseable json object in output")]
    UnparseableOutput,
    #[error("output does not match the expected schema: {0}")]
    SchemaMismatch(String),
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome<T> {
    pub value: Option<T>,
    pub repair_applied: RepairKind,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ParseError>,
}

/// A payload that can be read out of a JSON object.
pub trait Schema: Sized {
    fn from_value(v: &Value, notes: &mut Vec<String>) -> Result<Self, ParseError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedJudgment {
    pub agent_name: String,
    pub step_number: usize,
    pub mistake_reason: String,
    pub first_mistake: String,
    pub mistake_not_corrected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEvaluation {
    pub reason: String,
    pub confidence: u8,
}

/// Final answer of the single-shot and tool-calling baselines. A negative
/// step means "no mistake found".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub agent_name: String,
    pub step_number: i64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Judgement {
    Yes,
    No,
    UpperHalf,
    LowerHalf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub judgement: Judgement,
    pub reason: String,
}

fn object<'a>(v: &'a Value) -> Result<&'a serde_json::Map<String, Value>, ParseError> {
    v.as_object()
        .ok_or_else(|| ParseError::SchemaMismatch("expected a json object".into()))
}

fn text_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    notes: &mut Vec<String>,
) -> String {
    match obj.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => {
            notes.push(format!("missing {key}"));
            String::new()
        }
        Some(other) => other.to_string(),
    }
}

fn agent_field(obj: &serde_json::Map<String, Value>) -> Result<String, ParseError> {
    let name = match obj.get("agent_name") {
        Some(Value::String(s)) => s.trim(),
        _ => "",
    };
    if name.is_empty() || ["null", "none"].contains(&name.to_ascii_lowercase().as_str()) {
        return Err(ParseError::SchemaMismatch("agent_name is missing or empty".into()));
    }
    Ok(name.to_string())
}

/// Integers, integral floats, and integers written as text (optionally
/// prefixed with "step").
fn integer_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    notes: &mut Vec<String>,
) -> Result<i64, ParseError> {
    let bad = || ParseError::SchemaMismatch(format!("{key} is not an integer"));
    match obj.get(key) {
        Some(Value::Number(n)) => {
            if let Some(i) = n.as_i64() {
                Ok(i)
            } else {
                let f = n.as_f64().ok_or_else(bad)?;
                if f.fract() == 0.0 && f.abs() < 1e15 {
                    notes.push(format!("{key} given as float {f}"));
                    Ok(f as i64)
                } else {
                    Err(bad())
                }
            }
        }
        Some(Value::String(s)) => {
            let t = s.trim();
            let t = if t.len() > 4 && t[..4].eq_ignore_ascii_case("step") {
                t[4..].trim_start()
            } else {
                t
            };
            let i = t.parse::<i64>().map_err(|_| bad())?;
            notes.push(format!("{key} coerced from text {s:?}"));
            Ok(i)
        }
        None | Some(Value::Null) => Err(ParseError::SchemaMismatch(format!("{key} is missing"))),
        Some(_) => Err(bad()),
    }
}

impl Schema for ParsedJudgment {
    fn from_value(v: &Value, notes: &mut Vec<String>) -> Result<Self, ParseError> {
        let obj = object(v)?;
        let agent_name = agent_field(obj)?;
        let step = integer_field(obj, "step_number", notes)?;
        let step_number = usize::try_from(step)
            .map_err(|_| ParseError::SchemaMismatch(format!("step_number {step} is negative")))?;
        Ok(ParsedJudgment {
            agent_name,
            step_number,
            mistake_reason: text_field(obj, "mistake_reason", notes),
            first_mistake: text_field(obj, "first_mistake", notes),
            mistake_not_corrected: text_field(obj, "mistake_not_corrected", notes),
        })
    }
}

impl Schema for ParsedEvaluation {
    fn from_value(v: &Value, notes: &mut Vec<String>) -> Result<Self, ParseError> {
        let obj = object(v)?;
        let bad = || ParseError::SchemaMismatch("confidence is not a number".into());
        let raw = match obj.get("confidence") {
            Some(Value::Number(n)) => n.as_f64().ok_or_else(bad)?,
            Some(Value::String(s)) => {
                let t = s.trim().trim_end_matches('%').trim();
                let f = t.parse::<f64>().map_err(|_| bad())?;
                notes.push(format!("confidence coerced from text {s:?}"));
                f
            }
            _ => return Err(bad()),
        };
        if !raw.is_finite() {
            return Err(bad());
        }
        let rounded = raw.round();
        if rounded != raw {
            notes.push(format!("confidence {raw} rounded"));
        }
        let clamped = rounded.clamp(0.0, 100.0);
        if clamped != rounded {
            notes.push(format!("confidence {raw} clamped to {clamped}"));
        }
        Ok(ParsedEvaluation {
            reason: text_field(obj, "reason", notes),
            confidence: clamped as u8,
        })
    }
}

impl Schema for ParsedAnswer {
    fn from_value(v: &Value, notes: &mut Vec<String>) -> Result<Self, ParseError> {
        let obj = object(v)?;
        Ok(ParsedAnswer {
            agent_name: agent_field(obj)?,
            step_number: integer_field(obj, "step_number", notes)?,
            reason: text_field(obj, "reason_for_mistake", notes),
        })
    }
}

impl Schema for ParsedVerdict {
    fn from_value(v: &Value, notes: &mut Vec<String>) -> Result<Self, ParseError> {
        let obj = object(v)?;
        let judgement = match obj.get("judgement").or_else(|| obj.get("judgment")) {
            Some(Value::Bool(b)) => {
                notes.push("judgement given as a boolean".into());
                if *b {
                    Judgement::Yes
                } else {
                    Judgement::No
                }
            }
            Some(Value::String(s)) => {
                let norm = s
                    .trim()
                    .trim_matches(|c: char| c.is_ascii_punctuation() || c == '’')
                    .to_ascii_lowercase()
                    .replace(['_', '-'], " ");
                match norm.as_str() {
                    "yes" => Judgement::Yes,
                    "no" => Judgement::No,
                    "upper half" | "upper" => Judgement::UpperHalf,
                    "lower half" | "lower" => Judgement::LowerHalf,
                    _ => {
                        return Err(ParseError::SchemaMismatch(format!(
                            "unknown judgement {s:?}"
                        )))
                    }
                }
            }
            _ => return Err(ParseError::SchemaMismatch("judgement is missing".into())),
        };
        Ok(ParsedVerdict {
            judgement,
            reason: text_field(obj, "reason", notes),
        })
    }
}

/// Index one past the `}` closing the object that opens at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas that directly precede `}` or `]` outside strings.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
        } else if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_object(text: &str, notes: &mut Vec<String>) -> Option<Value> {
    let t = text.trim();
    if !t.starts_with('{') {
        return None;
    }
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        return Some(v);
    }
    let fixed = strip_trailing_commas(t);
    if fixed != t {
        if let Ok(v) = serde_json::from_str::<Value>(&fixed) {
            notes.push("trailing commas removed".into());
            return Some(v);
        }
    }
    None
}

/// Body of the first ``` fence and whether anything but whitespace
/// surrounds it. An unclosed fence runs to the end of the text.
fn first_fence(text: &str) -> Option<(&str, bool)> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let tag = after[..body_start].trim();
    if !tag.is_empty() && !tag.chars().all(|c| c.is_ascii_alphanumeric()) {
        // something like ```{"a":1}``` on one line
        let close = after.find("```").unwrap_or(after.len());
        let alone = text[..open].trim().is_empty() && after[(close + 3).min(after.len())..].trim().is_empty();
        return Some((&after[..close], alone));
    }
    let body = &after[body_start..];
    let (inner, rest) = match body.find("```") {
        Some(close) => (&body[..close], &body[close + 3..]),
        None => (body, ""),
    };
    let alone = text[..open].trim().is_empty() && rest.trim().is_empty();
    Some((inner, alone))
}

fn extract(text: &str, notes: &mut Vec<String>) -> Option<(Value, RepairKind)> {
    if let Some(v) = parse_object(text, notes) {
        return Some((v, RepairKind::None));
    }
    if let Some((inner, alone)) = first_fence(text) {
        let inner = inner.trim();
        let found = parse_object(inner, notes).or_else(|| {
            let start = inner.find('{')?;
            let end = balanced_end(inner, start)?;
            parse_object(&inner[start..end], notes)
        });
        if let Some(v) = found {
            let kind = if alone {
                RepairKind::FenceStripped
            } else {
                RepairKind::TrailingProseStripped
            };
            return Some((v, kind));
        }
    }
    for (start, _) in text.match_indices('{') {
        if let Some(end) = balanced_end(text, start) {
            if let Some(v) = parse_object(&text[start..end], notes) {
                if v.is_object() {
                    return Some((v, RepairKind::TrailingProseStripped));
                }
            }
        }
    }
    None
}

/// Pulls a JSON payload out of a model reply and reads it as `T`.
///
/// A bare object needs no repair; a reply that is only a fenced block is
/// `fence-stripped`; anything with surrounding prose is
/// `trailing-prose-stripped`.
pub fn parse_structured<T: Schema>(text: &str) -> ParseOutcome<T> {
    let mut notes = Vec::new();
    let Some((value, kind)) = extract(text, &mut notes) else {
        return ParseOutcome {
            value: None,
            repair_applied: RepairKind::None,
            raw: text.to_string(),
            notes,
            error: Some(ParseError::UnparseableOutput),
        };
    };
    let (value, error) = match T::from_value(&value, &mut notes) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e)),
    };
    ParseOutcome {
        value,
        repair_applied: kind,
        raw: text.to_string(),
        notes,
        error,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub positional: Vec<String>,
}

impl ToolCall {
    /// The `id` keyword argument, else the first positional argument.
    pub fn id(&self) -> Option<i64> {
        self.args
            .get("id")
            .or_else(|| self.positional.first())
            .and_then(|v| v.parse().ok())
    }

    pub fn display(&self) -> String {
        let mut parts: Vec<String> = self.positional.clone();
        parts.extend(self.args.iter().map(|(k, v)| format!("{k}={v}")));
        format!("{}({})", self.name, parts.join(", "))
    }
}

/// Recognizes `<agent>name(args)</agent>` (or `<tool>…</tool>`). `Ok(None)`
/// means the reply carries no call.
pub fn parse_tool_call(text: &str) -> Result<Option<ToolCall>, ParseError> {
    let found = ["agent", "tool"]
        .iter()
        .filter_map(|tag| text.find(&format!("<{tag}>")).map(|i| (i, *tag)))
        .min();
    let Some((open, tag)) = found else {
        return Ok(None);
    };
    let malformed = |m: &str| ParseError::MalformedToolCall(m.to_string());
    let start = open + tag.len() + 2;
    let close = text[start..]
        .find(&format!("</{tag}>"))
        .ok_or_else(|| malformed("missing closing tag"))?;
    let inner = text[start..start + close].trim();
    let paren = inner.find('(').ok_or_else(|| malformed("missing '('"))?;
    let name = inner[..paren].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(malformed("bad agent name"));
    }
    let args_text = inner[paren + 1..]
        .strip_suffix(')')
        .ok_or_else(|| malformed("missing ')'"))?;
    let unquote = |s: &str| s.trim().trim_matches(|c| c == '"' || c == '\'').to_string();
    let mut call = ToolCall {
        name: name.to_string(),
        args: BTreeMap::new(),
        positional: Vec::new(),
    };
    for part in args_text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('=') {
            Some((k, v)) => {
                call.args.insert(k.trim().to_string(), unquote(v));
            }
            None => call.positional.push(unquote(part)),
        }
    }
    Ok(Some(call))
}
