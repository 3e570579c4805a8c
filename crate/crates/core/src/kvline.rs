//! Tab-separated `key=value` lines shared by the manifest and the review
//! queue files.
//!
//! Values are escaped so that a record always occupies exactly one line:
//! backslash, TAB, CR and LF are written as `\\`, `\t`, `\r` and `\n`.
//! Keys are plain identifiers and never escaped.

use std::fmt::Write as _;

pub fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for ch in value.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(value: &str) -> Result<String, String> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape sequence \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Builds one line in key order. Absent values are skipped entirely.
#[derive(Default)]
pub struct LineWriter {
    buf: String,
}

impl LineWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, key: &str, value: impl AsRef<str>) -> &mut Self {
        if !self.buf.is_empty() {
            self.buf.push('\t');
        }
        let _ = write!(self.buf, "{key}={}", escape(value.as_ref()));
        self
    }

    pub fn opt_field<V: AsRef<str>>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.field(key, v);
        }
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.buf)
    }
}

/// Parsed fields of one line, in file order.
#[derive(Debug)]
pub struct Fields {
    pairs: Vec<(String, String)>,
}

impl Fields {
    /// Splits a line and checks that keys appear in `order` (a subsequence,
    /// no repeats, no unknown keys).
    pub fn parse(line: &str, order: &[&str]) -> Result<Fields, String> {
        let mut pairs = Vec::new();
        let mut next_allowed = 0usize;
        for chunk in line.split('\t') {
            let (key, raw) = chunk
                .split_once('=')
                .ok_or_else(|| format!("field {chunk:?} is not key=value"))?;
            let pos = order
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| format!("unknown key {key:?}"))?;
            if pos < next_allowed {
                return Err(format!("key {key:?} out of order or repeated"));
            }
            next_allowed = pos + 1;
            pairs.push((key.to_string(), unescape(raw)?));
        }
        Ok(Fields { pairs })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing required key {key:?}"))
    }
}
