//! A small tokenizer for TSDB query expressions.
//!
//! It does not evaluate anything. It finds every vector selector in a query
//! (`name`, `name{...}` or `{...}`) and splits the matchers, which is enough
//! for ownership checks in the gate and for matcher filtering in the mock
//! store.

use std::fmt;

use regex::Regex;
use thiserror::Error;

use crate::exposition::LabelSet;

/// Label holding the metric name when a series is stored as a label set.
pub const METRIC_NAME_LABEL: &str = "__name__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectorError {
    #[error("unterminated string starting at byte {0}")]
    UnterminatedString(usize),
    #[error("unbalanced `{delim}` at byte {pos}")]
    Unbalanced { delim: char, pos: usize },
    #[error("unexpected character `{ch}` at byte {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("malformed matcher at byte {0}")]
    MalformedMatcher(usize),
    #[error("invalid regex `{pattern}`: {message}")]
    BadRegex { pattern: String, message: String },
    #[error("unsupported expression: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchOp {
    Equal,
    NotEqual,
    RegexMatch,
    RegexNoMatch,
}

impl MatchOp {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchOp::Equal => "=",
            MatchOp::NotEqual => "!=",
            MatchOp::RegexMatch => "=~",
            MatchOp::RegexNoMatch => "!~",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Matcher {
    pub name: String,
    pub op: MatchOp,
    pub value: String,
    regex: Option<Regex>,
}

impl PartialEq for Matcher {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.op == other.op && self.value == other.value
    }
}

impl Eq for Matcher {}

impl Matcher {
    pub fn new(name: &str, op: MatchOp, value: &str) -> Result<Self, SelectorError> {
        let regex = match op {
            MatchOp::RegexMatch | MatchOp::RegexNoMatch => Some(Regex::new(&format!("^(?:{value})$")).map_err(
                |e| SelectorError::BadRegex {
                    pattern: value.to_string(),
                    message: e.to_string(),
                },
            )?),
            _ => None,
        };
        Ok(Self {
            name: name.to_string(),
            op,
            value: value.to_string(),
            regex,
        })
    }

    pub fn equal(name: &str, value: &str) -> Self {
        Self {
            name: name.to_string(),
            op: MatchOp::Equal,
            value: value.to_string(),
            regex: None,
        }
    }

    /// Absent labels match as the empty string.
    pub fn matches(&self, value: Option<&str>) -> bool {
        let v = value.unwrap_or("");
        match self.op {
            MatchOp::Equal => v == self.value,
            MatchOp::NotEqual => v != self.value,
            MatchOp::RegexMatch => self.regex.as_ref().is_some_and(|r| r.is_match(v)),
            MatchOp::RegexNoMatch => !self.regex.as_ref().is_some_and(|r| r.is_match(v)),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}\"", self.name, self.op.as_str())?;
        for c in self.value.chars() {
            match c {
                '\\' => f.write_str("\\\\")?,
                '"' => f.write_str("\\\"")?,
                '\n' => f.write_str("\\n")?,
                c => write!(f, "{c}")?,
            }
        }
        f.write_str("\"")
    }
}

/// A vector selector. `metric` is the bare name before the braces, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selector {
    pub metric: Option<String>,
    pub matchers: Vec<Matcher>,
}

impl Selector {
    /// All matchers on `label`, including the metric name for `__name__`.
    pub fn matchers_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Matcher> + 'a {
        self.matchers.iter().filter(move |m| m.name == label)
    }

    /// True if a series with this metric name and labels is selected.
    pub fn matches(&self, metric_name: &str, labels: &LabelSet) -> bool {
        if let Some(m) = &self.metric {
            if m != metric_name {
                return false;
            }
        }
        self.matchers.iter().all(|m| {
            if m.name == METRIC_NAME_LABEL {
                m.matches(Some(metric_name))
            } else {
                m.matches(labels.get(&m.name))
            }
        })
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(m) = &self.metric {
            f.write_str(m)?;
        }
        if !self.matchers.is_empty() || self.metric.is_none() {
            f.write_str("{")?;
            for (i, m) in self.matchers.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{m}")?;
            }
            f.write_str("}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Number,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Range,
    Comma,
    Match(MatchOp),
    Op,
}

struct Spanned {
    tok: Tok,
    pos: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == ':'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == ':'
}

fn lex(input: &str) -> Result<Vec<Spanned>, SelectorError> {
    let chars: Vec<(usize, char)> = input.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < chars.len() && chars[i].1 != '\n' {
                    i += 1;
                }
            }
            '"' | '\'' | '`' => {
                let quote = c;
                let mut value = String::new();
                i += 1;
                let mut closed = false;
                while i < chars.len() {
                    let ch = chars[i].1;
                    if ch == quote {
                        closed = true;
                        i += 1;
                        break;
                    }
                    if ch == '\\' && quote != '`' {
                        let Some(&(_, next)) = chars.get(i + 1) else {
                            break;
                        };
                        value.push(match next {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => other,
                        });
                        i += 2;
                        continue;
                    }
                    value.push(ch);
                    i += 1;
                }
                if !closed {
                    return Err(SelectorError::UnterminatedString(pos));
                }
                out.push(Spanned {
                    tok: Tok::Str(value),
                    pos,
                });
            }
            '{' => {
                out.push(Spanned { tok: Tok::LBrace, pos });
                i += 1;
            }
            '}' => {
                out.push(Spanned { tok: Tok::RBrace, pos });
                i += 1;
            }
            '(' => {
                out.push(Spanned { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                out.push(Spanned { tok: Tok::RParen, pos });
                i += 1;
            }
            '[' => {
                // Range and subquery brackets only hold durations.
                let start = pos;
                while i < chars.len() && chars[i].1 != ']' {
                    if chars[i].1 == '[' && i > 0 && chars[i].0 != start {
                        return Err(SelectorError::Unbalanced { delim: '[', pos: start });
                    }
                    i += 1;
                }
                if i == chars.len() {
                    return Err(SelectorError::Unbalanced { delim: '[', pos: start });
                }
                i += 1;
                out.push(Spanned { tok: Tok::Range, pos });
            }
            ']' => return Err(SelectorError::Unbalanced { delim: ']', pos }),
            ',' => {
                out.push(Spanned { tok: Tok::Comma, pos });
                i += 1;
            }
            '=' | '!' => {
                let next = chars.get(i + 1).map(|p| p.1);
                let (tok, width) = match (c, next) {
                    ('=', Some('~')) => (Tok::Match(MatchOp::RegexMatch), 2),
                    ('=', Some('=')) => (Tok::Op, 2),
                    ('=', _) => (Tok::Match(MatchOp::Equal), 1),
                    ('!', Some('=')) => (Tok::Match(MatchOp::NotEqual), 2),
                    ('!', Some('~')) => (Tok::Match(MatchOp::RegexNoMatch), 2),
                    _ => return Err(SelectorError::UnexpectedChar { ch: c, pos }),
                };
                out.push(Spanned { tok, pos });
                i += width;
            }
            '+' | '-' | '*' | '/' | '%' | '^' | '<' | '>' | '@' => {
                out.push(Spanned { tok: Tok::Op, pos });
                i += 1;
                if matches!(chars.get(i).map(|p| p.1), Some('=')) {
                    i += 1;
                }
            }
            c if c.is_ascii_digit() || c == '.' => {
                while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '.') {
                    i += 1;
                }
                out.push(Spanned { tok: Tok::Number, pos });
            }
            c if is_ident_start(c) => {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i].1) {
                    i += 1;
                }
                let end = chars.get(i).map_or(input.len(), |p| p.0);
                let word = &input[chars[start].0..end];
                let tok = match word.to_ascii_lowercase().as_str() {
                    "inf" | "nan" => Tok::Number,
                    _ => Tok::Ident(word.to_string()),
                };
                out.push(Spanned { tok, pos });
            }
            other => return Err(SelectorError::UnexpectedChar { ch: other, pos }),
        }
    }
    Ok(out)
}

const GROUPING_KEYWORDS: &[&str] = &["by", "without", "on", "ignoring", "group_left", "group_right"];
const OPERATOR_KEYWORDS: &[&str] = &["and", "or", "unless", "bool", "atan2"];
const AGGREGATIONS: &[&str] = &[
    "sum",
    "min",
    "max",
    "avg",
    "group",
    "stddev",
    "stdvar",
    "count",
    "count_values",
    "bottomk",
    "topk",
    "quantile",
    "limitk",
    "limit_ratio",
];

/// Parses the matcher list after an opening brace at `toks[start]`.
/// Returns the matchers and the index after the closing brace.
fn parse_matchers(toks: &[Spanned], start: usize) -> Result<(Vec<Matcher>, usize), SelectorError> {
    let open = toks[start].pos;
    let mut i = start + 1;
    let mut matchers = Vec::new();
    loop {
        match toks.get(i).map(|t| &t.tok) {
            None => return Err(SelectorError::Unbalanced { delim: '{', pos: open }),
            Some(Tok::RBrace) => return Ok((matchers, i + 1)),
            Some(Tok::Ident(name)) => {
                let pos = toks[i].pos;
                let op = match toks.get(i + 1).map(|t| &t.tok) {
                    Some(Tok::Match(op)) => *op,
                    None => return Err(SelectorError::Unbalanced { delim: '{', pos: open }),
                    _ => return Err(SelectorError::MalformedMatcher(pos)),
                };
                let value = match toks.get(i + 2).map(|t| &t.tok) {
                    Some(Tok::Str(v)) => v,
                    None => return Err(SelectorError::Unbalanced { delim: '{', pos: open }),
                    _ => return Err(SelectorError::MalformedMatcher(pos)),
                };
                matchers.push(Matcher::new(name, op, value)?);
                i += 3;
                match toks.get(i).map(|t| &t.tok) {
                    Some(Tok::Comma) => i += 1,
                    Some(Tok::RBrace) => {}
                    None => return Err(SelectorError::Unbalanced { delim: '{', pos: open }),
                    _ => return Err(SelectorError::MalformedMatcher(toks[i].pos)),
                }
            }
            Some(Tok::Str(_)) | Some(_) => return Err(SelectorError::MalformedMatcher(toks[i].pos)),
        }
    }
}

/// Skips a parenthesised label list such as `by (a, b)`.
fn skip_label_list(toks: &[Spanned], start: usize) -> Result<usize, SelectorError> {
    let mut i = start + 1;
    loop {
        match toks.get(i).map(|t| &t.tok) {
            None => {
                return Err(SelectorError::Unbalanced {
                    delim: '(',
                    pos: toks[start].pos,
                })
            }
            Some(Tok::RParen) => return Ok(i + 1),
            Some(Tok::Ident(_)) | Some(Tok::Comma) => i += 1,
            Some(_) => return Err(SelectorError::MalformedMatcher(toks[i].pos)),
        }
    }
}

/// Every vector selector in `query`, in order of appearance.
pub fn find_selectors(query: &str) -> Result<Vec<Selector>, SelectorError> {
    let toks = lex(query)?;
    let mut selectors = Vec::new();
    let mut depth: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        match &toks[i].tok {
            Tok::Ident(word) => {
                let lower = word.to_ascii_lowercase();
                let next = toks.get(i + 1).map(|t| &t.tok);
                if GROUPING_KEYWORDS.contains(&lower.as_str()) {
                    i = if matches!(next, Some(Tok::LParen)) {
                        skip_label_list(&toks, i + 1)?
                    } else {
                        i + 1
                    };
                } else if (OPERATOR_KEYWORDS.contains(&lower.as_str()) && !matches!(next, Some(Tok::LBrace)))
                    || (lower == "offset" && matches!(next, Some(Tok::Number) | Some(Tok::Op)))
                    || (AGGREGATIONS.contains(&lower.as_str())
                        && matches!(next, Some(Tok::Ident(k)) if matches!(k.to_ascii_lowercase().as_str(), "by" | "without")))
                    // Function or aggregation call.
                    || matches!(next, Some(Tok::LParen))
                {
                    i += 1;
                } else if matches!(next, Some(Tok::LBrace)) {
                    let (matchers, end) = parse_matchers(&toks, i + 1)?;
                    selectors.push(Selector {
                        metric: Some(word.clone()),
                        matchers,
                    });
                    i = end;
                } else {
                    selectors.push(Selector {
                        metric: Some(word.clone()),
                        matchers: Vec::new(),
                    });
                    i += 1;
                }
            }
            Tok::LBrace => {
                let (matchers, end) = parse_matchers(&toks, i)?;
                selectors.push(Selector { metric: None, matchers });
                i = end;
            }
            Tok::RBrace => {
                return Err(SelectorError::Unbalanced {
                    delim: '}',
                    pos: toks[i].pos,
                })
            }
            Tok::LParen => {
                depth.push(toks[i].pos);
                i += 1;
            }
            Tok::RParen => {
                if depth.pop().is_none() {
                    return Err(SelectorError::Unbalanced {
                        delim: ')',
                        pos: toks[i].pos,
                    });
                }
                i += 1;
            }
            Tok::Match(_) => return Err(SelectorError::MalformedMatcher(toks[i].pos)),
            _ => i += 1,
        }
    }
    if let Some(pos) = depth.pop() {
        return Err(SelectorError::Unbalanced { delim: '(', pos });
    }
    Ok(selectors)
}

/// Parses a query that must be exactly one vector selector.
pub fn parse_selector(query: &str) -> Result<Selector, SelectorError> {
    let toks = lex(query)?;
    let (metric, brace) = match toks.first().map(|t| &t.tok) {
        Some(Tok::Ident(name)) => (Some(name.clone()), 1),
        Some(Tok::LBrace) => (None, 0),
        _ => return Err(SelectorError::Unsupported(format!("`{query}` is not a selector"))),
    };
    let (matchers, end) = match toks.get(brace).map(|t| &t.tok) {
        Some(Tok::LBrace) => parse_matchers(&toks, brace)?,
        None if metric.is_some() => (Vec::new(), 1),
        _ => return Err(SelectorError::Unsupported(format!("`{query}` is not a selector"))),
    };
    if end != toks.len() {
        return Err(SelectorError::Unsupported(format!(
            "only plain label-matcher selectors are supported, got `{query}`"
        )));
    }
    Ok(Selector { metric, matchers })
}
