//! Flat `key=value` configuration text: one pair per line, `#` starts a
//! comment, no nesting.

use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Splits `key=value`, trimming both sides.
pub fn parse_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k.to_string(), v.trim().to_string()))
}

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?);
    }
    Ok(out)
}

pub fn render(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn bad(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        msg: msg.into(),
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

/// A float, also accepting `a/b` fractions.
pub fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = parse_value(key, a.trim())?;
            let b: f64 = parse_value(key, b.trim())?;
            if b == 0.0 {
                return Err(bad(key, value, "zero denominator"));
            }
            Ok(a / b)
        }
        None => parse_value(key, value),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A flat configuration struct addressable by key.
pub trait KeyValue: Default + Sized {
    /// Every key with a one-line description, in serialization order.
    fn key_docs() -> &'static [(&'static str, &'static str)];
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn pairs(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<()>;

    fn has_key(key: &str) -> bool {
        Self::key_docs().iter().any(|(k, _)| *k == key)
    }

    fn unknown(key: &str) -> ConfigError {
        ConfigError::UnknownKey {
            key: key.to_string(),
            valid: Self::key_docs().iter().map(|(k, _)| k.to_string()).collect(),
        }
    }

    fn to_text(&self) -> String {
        render(&self.pairs())
    }

    /// Defaults overridden by `text`; unknown keys are errors.
    fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_lines(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}
