//! Metric model and the line-oriented text exposition format (version 0.0.4).
//!
//! Only counters and gauges are modelled. Rendering is canonical: families
//! are ordered by name, samples by metric name then label set, and label
//! sets are always sorted by label name. `NaN` values are allowed in memory
//! but never written to the wire.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Content type for the rendered text.
pub const CONTENT_TYPE: &str = "text/plain; version=0.0.4";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid metric name `{0}`")]
    InvalidMetricName(String),
    #[error("invalid label name `{0}`")]
    InvalidLabelName(String),
    #[error("duplicate label name `{0}`")]
    DuplicateLabel(String),
    #[error("counter `{name}` has negative value {value}")]
    NegativeCounter { name: String, value: f64 },
    #[error("sample `{0}` has an infinite value")]
    InfiniteValue(String),
    #[error("sample `{sample}` does not belong to family `{family}`")]
    ForeignSample { family: String, sample: String },
    #[error("family `{0}` appears more than once")]
    DuplicateFamily(String),
    #[error("time series timestamps not strictly increasing at {0}")]
    UnorderedPoints(i64),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn parse_err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

pub fn is_valid_metric_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == ':' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

pub fn is_valid_label_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Label pairs kept sorted by name with unique names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct LabelSet {
    pairs: Vec<(String, String)>,
}

impl LabelSet {
    pub fn new<I, K, V>(pairs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut pairs: Vec<(String, String)> = pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        for (name, _) in &pairs {
            if !is_valid_label_name(name) {
                return Err(ModelError::InvalidLabelName(name.clone()));
            }
        }
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(ModelError::DuplicateLabel(w[0].0.clone()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.pairs
            .binary_search_by(|(k, _)| k.as_str().cmp(name))
            .ok()
            .map(|i| self.pairs[i].1.as_str())
    }

    /// Returns a copy with `name` set to `value`, replacing any previous value.
    pub fn with(&self, name: &str, value: &str) -> Result<Self, ModelError> {
        if !is_valid_label_name(name) {
            return Err(ModelError::InvalidLabelName(name.to_string()));
        }
        let mut pairs = self.pairs.clone();
        match pairs.binary_search_by(|(k, _)| k.as_str().cmp(name)) {
            Ok(i) => pairs[i].1 = value.to_string(),
            Err(i) => pairs.insert(i, (name.to_string(), value.to_string())),
        }
        Ok(Self { pairs })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl TryFrom<Vec<(String, String)>> for LabelSet {
    type Error = ModelError;

    fn try_from(pairs: Vec<(String, String)>) -> Result<Self, Self::Error> {
        LabelSet::new(pairs)
    }
}

impl From<LabelSet> for Vec<(String, String)> {
    fn from(set: LabelSet) -> Self {
        set.pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub metric_name: String,
    pub labels: LabelSet,
    pub value: f64,
    pub timestamp_ms: Option<i64>,
}

impl Sample {
    pub fn new(metric_name: impl Into<String>, labels: LabelSet, value: f64) -> Self {
        Self {
            metric_name: metric_name.into(),
            labels,
            value,
            timestamp_ms: None,
        }
    }

    pub fn at(mut self, timestamp_ms: i64) -> Self {
        self.timestamp_ms = Some(timestamp_ms);
        self
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.metric_name
            .cmp(&other.metric_name)
            .then_with(|| self.labels.cmp(&other.labels))
            .then_with(|| self.timestamp_ms.cmp(&other.timestamp_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Counter,
    Gauge,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Counter => "counter",
            MetricKind::Gauge => "gauge",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFamily {
    pub name: String,
    pub kind: MetricKind,
    pub help: String,
    pub samples: Vec<Sample>,
}

impl MetricFamily {
    /// Builds a family and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        kind: MetricKind,
        help: impl Into<String>,
        samples: Vec<Sample>,
    ) -> Result<Self, ModelError> {
        let family = Self {
            name: name.into(),
            kind,
            help: help.into(),
            samples,
        };
        family.validate()?;
        Ok(family)
    }

    pub fn gauge(name: &str, help: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: MetricKind::Gauge,
            help: help.to_string(),
            samples: Vec::new(),
        }
    }

    pub fn counter(name: &str, help: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: MetricKind::Counter,
            help: help.to_string(),
            samples: Vec::new(),
        }
    }

    /// Appends a sample named after the family.
    pub fn push(&mut self, labels: LabelSet, value: f64) -> &mut Self {
        self.samples.push(Sample::new(self.name.clone(), labels, value));
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_valid_metric_name(&self.name) {
            return Err(ModelError::InvalidMetricName(self.name.clone()));
        }
        for sample in &self.samples {
            if !is_valid_metric_name(&sample.metric_name) {
                return Err(ModelError::InvalidMetricName(sample.metric_name.clone()));
            }
            if !belongs_to(&self.name, &sample.metric_name) {
                return Err(ModelError::ForeignSample {
                    family: self.name.clone(),
                    sample: sample.metric_name.clone(),
                });
            }
            for (label, _) in sample.labels.iter() {
                if !is_valid_label_name(label) {
                    return Err(ModelError::InvalidLabelName(label.to_string()));
                }
            }
            if sample.value.is_infinite() {
                return Err(ModelError::InfiniteValue(sample.metric_name.clone()));
            }
            if self.kind == MetricKind::Counter && sample.value < 0.0 {
                return Err(ModelError::NegativeCounter {
                    name: sample.metric_name.clone(),
                    value: sample.value,
                });
            }
        }
        Ok(())
    }
}

fn belongs_to(family: &str, sample: &str) -> bool {
    sample == family
        || (sample.len() > family.len() && sample.starts_with(family) && sample.as_bytes()[family.len()] == b'_')
}

/// Sorts families and samples into canonical order and drops `NaN` samples,
/// which is exactly what survives a render/parse round trip.
pub fn canonicalize(families: &[MetricFamily]) -> Vec<MetricFamily> {
    let mut out: Vec<MetricFamily> = families
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.samples.retain(|s| !s.value.is_nan());
            f.samples.sort_by(Sample::canonical_cmp);
            f
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// A labelled sequence of `(timestamp ms, value)` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub labels: LabelSet,
    points: Vec<(i64, f64)>,
}

impl TimeSeries {
    pub fn new(labels: LabelSet, points: Vec<(i64, f64)>) -> Result<Self, ModelError> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ModelError::UnorderedPoints(w[1].0));
            }
        }
        Ok(Self { labels, points })
    }

    pub fn points(&self) -> &[(i64, f64)] {
        &self.points
    }

    /// Appends a point; it must be later than the last one.
    pub fn push(&mut self, timestamp_ms: i64, value: f64) -> Result<(), ModelError> {
        if let Some(&(last, _)) = self.points.last() {
            if timestamp_ms <= last {
                return Err(ModelError::UnorderedPoints(timestamp_ms));
            }
        }
        self.points.push((timestamp_ms, value));
        Ok(())
    }
}

fn escape_label_value(out: &mut String, value: &str) {
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

fn escape_help(out: &mut String, help: &str) {
    for c in help.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

/// Renders families as exposition text.
pub fn render_exposition(families: &[MetricFamily]) -> Result<String, ModelError> {
    for family in families {
        family.validate()?;
    }
    let families = canonicalize(families);
    for w in families.windows(2) {
        if w[0].name == w[1].name {
            return Err(ModelError::DuplicateFamily(w[0].name.clone()));
        }
    }
    let mut out = String::new();
    for family in &families {
        out.push_str("# HELP ");
        out.push_str(&family.name);
        if !family.help.is_empty() {
            out.push(' ');
            escape_help(&mut out, &family.help);
        }
        out.push('\n');
        let _ = writeln!(out, "# TYPE {} {}", family.name, family.kind);
        for sample in &family.samples {
            out.push_str(&sample.metric_name);
            if !sample.labels.is_empty() {
                out.push('{');
                for (i, (name, value)) in sample.labels.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(name);
                    out.push_str("=\"");
                    escape_label_value(&mut out, value);
                    out.push('"');
                }
                out.push('}');
            }
            let _ = write!(out, " {}", sample.value);
            if let Some(ts) = sample.timestamp_ms {
                let _ = write!(out, " {ts}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses exposition text back into families.
///
/// `# HELP` and `# TYPE` lines open families; any other comment is ignored.
/// A sample line without a preceding `# TYPE` opens an implicit gauge.
pub fn parse_exposition(text: &str) -> Result<Vec<MetricFamily>, ParseError> {
    let mut families: Vec<MetricFamily> = Vec::new();
    let mut current: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_start();
        if line.trim_end().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim_start();
            if let Some(rest) = comment.strip_prefix("HELP") {
                if !rest.is_empty() && !rest.starts_with([' ', '\t']) {
                    continue;
                }
                let rest = rest.trim_start();
                let (name, help) = match rest.split_once([' ', '\t']) {
                    Some((n, h)) => (n, h),
                    None => (rest, ""),
                };
                if !is_valid_metric_name(name) {
                    return Err(parse_err(line_no, format!("invalid metric name `{name}`")));
                }
                let help = unescape_help(help).map_err(|m| parse_err(line_no, m))?;
                let i = family_slot(&mut families, name);
                families[i].help = help;
                current = Some(i);
            } else if let Some(rest) = comment.strip_prefix("TYPE") {
                if !rest.is_empty() && !rest.starts_with([' ', '\t']) {
                    continue;
                }
                let mut parts = rest.split_whitespace();
                let (Some(name), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(parse_err(line_no, "malformed TYPE line"));
                };
                if !is_valid_metric_name(name) {
                    return Err(parse_err(line_no, format!("invalid metric name `{name}`")));
                }
                let kind = match kind {
                    "counter" => MetricKind::Counter,
                    "gauge" => MetricKind::Gauge,
                    other => return Err(parse_err(line_no, format!("unsupported metric type `{other}`"))),
                };
                let i = family_slot(&mut families, name);
                if !families[i].samples.is_empty() {
                    return Err(parse_err(line_no, format!("TYPE for `{name}` after its samples")));
                }
                families[i].kind = kind;
                current = Some(i);
            }
            continue;
        }

        let sample = parse_sample_line(line.trim_end()).map_err(|m| parse_err(line_no, m))?;
        let slot = match current {
            Some(i) if belongs_to(&families[i].name, &sample.metric_name) => i,
            _ => {
                let i = family_slot(&mut families, &sample.metric_name);
                current = Some(i);
                i
            }
        };
        let family = &mut families[slot];
        if family.kind == MetricKind::Counter && sample.value < 0.0 {
            return Err(parse_err(line_no, "negative counter value"));
        }
        family.samples.push(sample);
    }
    Ok(families)
}

fn family_slot(families: &mut Vec<MetricFamily>, name: &str) -> usize {
    match families.iter().position(|f| f.name == name) {
        Some(i) => i,
        None => {
            families.push(MetricFamily::gauge(name, ""));
            families.len() - 1
        }
    }
}

fn unescape_help(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => return Err("dangling escape in HELP".into()),
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

fn parse_sample_line(line: &str) -> Result<Sample, String> {
    let bytes = line.as_bytes();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos];
        if c.is_ascii_alphanumeric() || c == b'_' || c == b':' {
            pos += 1;
        } else {
            break;
        }
    }
    let name = &line[..pos];
    if !is_valid_metric_name(name) {
        return Err(format!("invalid metric name `{name}`"));
    }

    let mut pairs: Vec<(String, String)> = Vec::new();
    if bytes.get(pos) == Some(&b'{') {
        pos += 1;
        loop {
            while pos < bytes.len() && bytes[pos] == b' ' {
                pos += 1;
            }
            match bytes.get(pos) {
                Some(b'}') => {
                    pos += 1;
                    break;
                }
                None => return Err("unterminated label set".into()),
                _ => {}
            }
            let start = pos;
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            let label = &line[start..pos];
            if !is_valid_label_name(label) {
                return Err(format!("invalid label name `{label}`"));
            }
            if bytes.get(pos) != Some(&b'=') {
                return Err(format!("expected `=` after label `{label}`"));
            }
            pos += 1;
            if bytes.get(pos) != Some(&b'"') {
                return Err(format!("expected quoted value for label `{label}`"));
            }
            pos += 1;
            let mut value = String::new();
            let mut closed = false;
            let mut chars = line[pos..].char_indices();
            while let Some((off, c)) = chars.next() {
                match c {
                    '"' => {
                        pos += off + 1;
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, '\\')) => value.push('\\'),
                        Some((_, '"')) => value.push('"'),
                        Some((_, 'n')) => value.push('\n'),
                        Some((_, other)) => return Err(format!("invalid escape `\\{other}`")),
                        None => return Err("dangling escape".into()),
                    },
                    c => value.push(c),
                }
            }
            if !closed {
                return Err(format!("unterminated value for label `{label}`"));
            }
            pairs.push((label.to_string(), value));
            match bytes.get(pos) {
                Some(b',') => pos += 1,
                Some(b'}') => {}
                _ => return Err("expected `,` or `}` in label set".into()),
            }
        }
    }

    let rest = &line[pos..];
    if !rest.starts_with([' ', '\t']) {
        return Err("expected whitespace before value".into());
    }
    let mut fields = rest.split_whitespace();
    let value_str = fields.next().ok_or("missing value")?;
    let value = parse_value(value_str)?;
    let timestamp_ms = match fields.next() {
        Some(ts) => Some(ts.parse::<i64>().map_err(|_| format!("invalid timestamp `{ts}`"))?),
        None => None,
    };
    if fields.next().is_some() {
        return Err("trailing data after timestamp".into());
    }
    let labels = LabelSet::new(pairs).map_err(|e| e.to_string())?;
    Ok(Sample {
        metric_name: name.to_string(),
        labels,
        value,
        timestamp_ms,
    })
}

fn parse_value(s: &str) -> Result<f64, String> {
    let value = match s {
        "NaN" => f64::NAN,
        "+Inf" | "-Inf" | "Inf" => return Err(format!("infinite value `{s}` not accepted")),
        _ => s.parse::<f64>().map_err(|_| format!("invalid value `{s}`"))?,
    };
    if value.is_infinite() {
        return Err(format!("infinite value `{s}` not accepted"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pairs: &[(&str, &str)]) -> LabelSet {
        LabelSet::new(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn renders_plain_gauge() {
        let mut f = MetricFamily::gauge("node_power_watts", "Node power");
        f.push(LabelSet::empty(), 250.0);
        let text = render_exposition(&[f]).unwrap();
        assert_eq!(
            text,
            "# HELP node_power_watts Node power\n# TYPE node_power_watts gauge\nnode_power_watts 250\n"
        );
    }

    #[test]
    fn empty_family_list_renders_empty() {
        assert_eq!(render_exposition(&[]).unwrap(), "");
    }

    #[test]
    fn escapes_label_values() {
        let mut f = MetricFamily::gauge("m", "");
        f.push(labels(&[("l", "a\"b")]), 1.0);
        f.push(labels(&[("l", "c\\d\ne")]), 2.0);
        let text = render_exposition(&[f]).unwrap();
        assert!(text.contains(r#"m{l="a\"b"} 1"#));
        assert!(text.contains(r#"m{l="c\\d\ne"} 2"#));
    }

    #[test]
    fn orders_families_and_samples() {
        let mut b = MetricFamily::gauge("b", "");
        b.push(labels(&[("x", "2")]), 1.0);
        b.push(labels(&[("x", "1")]), 1.0);
        let a = MetricFamily::counter("a", "");
        let text = render_exposition(&[b, a]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# HELP a");
        assert_eq!(lines[4], r#"b{x="1"} 1"#);
        assert_eq!(lines[5], r#"b{x="2"} 1"#);
    }

    #[test]
    fn nan_skipped_on_render() {
        let mut f = MetricFamily::gauge("m", "");
        f.push(LabelSet::empty(), f64::NAN);
        assert_eq!(render_exposition(&[f]).unwrap(), "# HELP m\n# TYPE m gauge\n");
    }

    #[test]
    fn render_rejects_bad_names() {
        let mut f = MetricFamily::gauge("9bad", "");
        f.push(LabelSet::empty(), 1.0);
        assert_eq!(
            render_exposition(&[f]).unwrap_err(),
            ModelError::InvalidMetricName("9bad".into())
        );
        assert!(LabelSet::new([("bad-label", "x")]).is_err());
    }

    #[test]
    fn counter_rejects_negative() {
        let err = MetricFamily::new(
            "c_total",
            MetricKind::Counter,
            "",
            vec![Sample::new("c_total", LabelSet::empty(), -1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NegativeCounter { .. }));
    }

    #[test]
    fn infinite_rejected() {
        let err = MetricFamily::new(
            "g",
            MetricKind::Gauge,
            "",
            vec![Sample::new("g", LabelSet::empty(), f64::INFINITY)],
        )
        .unwrap_err();
        assert_eq!(err, ModelError::InfiniteValue("g".into()));
    }

    #[test]
    fn parse_reports_line_of_grammar_violation() {
        let err = parse_exposition("x{y=}").unwrap_err();
        assert_eq!(err.line, 1);
        let err = parse_exposition("# HELP a\na 1\na{b=\"c\" 2\n").unwrap_err();
        assert_eq!(err.line, 3);
    }

    #[test]
    fn parse_ignores_plain_comments() {
        assert!(parse_exposition("# comment\n").unwrap().is_empty());
    }

    #[test]
    fn parse_rejects_unknown_type() {
        let err = parse_exposition("# TYPE h histogram\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("histogram"));
    }

    #[test]
    fn parse_reads_timestamps_and_escapes() {
        let fams = parse_exposition("# TYPE m gauge\nm{a=\"x\\\"y\",b=\"z\"} 1.5 1700000000000\n").unwrap();
        assert_eq!(fams.len(), 1);
        let s = &fams[0].samples[0];
        assert_eq!(s.labels.get("a"), Some("x\"y"));
        assert_eq!(s.value, 1.5);
        assert_eq!(s.timestamp_ms, Some(1_700_000_000_000));
    }

    #[test]
    fn time_series_requires_increasing_timestamps() {
        assert!(TimeSeries::new(LabelSet::empty(), vec![(1, 0.0), (1, 1.0)]).is_err());
        let mut ts = TimeSeries::new(LabelSet::empty(), vec![(1, 0.0)]).unwrap();
        assert!(ts.push(0, 1.0).is_err());
        ts.push(2, 1.0).unwrap();
        assert_eq!(ts.points().len(), 2);
    }

    fn arb_label_value() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zA-Z0-9 _\"\\\\\n{},=-]{0,8}").unwrap()
    }

    fn arb_family() -> impl Strategy<Value = MetricFamily> {
        (
            "[a-z_][a-z0-9_]{0,6}",
            any::<bool>(),
            "[ -~]{0,12}",
            proptest::collection::vec(
                (
                    proptest::collection::btree_map("[a-z_][a-z0-9_]{0,4}", arb_label_value(), 0..4),
                    prop_oneof![
                        (0.0f64..1e12),
                        Just(0.0),
                        Just(f64::NAN),
                        (0u32..1000).prop_map(|v| v as f64)
                    ],
                    proptest::option::of(0i64..2_000_000_000_000),
                ),
                0..6,
            ),
        )
            .prop_map(|(name, counter, help, samples)| {
                let kind = if counter {
                    MetricKind::Counter
                } else {
                    MetricKind::Gauge
                };
                let mut seen = std::collections::BTreeSet::new();
                let samples = samples
                    .into_iter()
                    .map(|(labels, value, ts)| Sample {
                        metric_name: name.clone(),
                        labels: LabelSet::new(labels).unwrap(),
                        value,
                        timestamp_ms: ts,
                    })
                    .filter(|s| seen.insert((s.labels.clone(), s.timestamp_ms)))
                    .collect();
                MetricFamily {
                    name,
                    kind,
                    help,
                    samples,
                }
            })
    }

    fn arb_families() -> impl Strategy<Value = Vec<MetricFamily>> {
        proptest::collection::vec(arb_family(), 0..5).prop_map(|fams| {
            let mut seen = std::collections::BTreeSet::new();
            fams.into_iter().filter(|f| seen.insert(f.name.clone())).collect()
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_render(fams in arb_families()) {
            let text = render_exposition(&fams).unwrap();
            let parsed = parse_exposition(&text).unwrap();
            prop_assert_eq!(parsed, canonicalize(&fams));
        }

        #[test]
        fn rendering_is_byte_stable(fams in arb_families()) {
            let text = render_exposition(&fams).unwrap();
            let again = render_exposition(&parse_exposition(&text).unwrap()).unwrap();
            prop_assert_eq!(text, again);
        }
    }
}
