//! Indentation-nested `key=value` documents.
//!
//! This is the layout used by the architecture and training listings:
//!
//! ```text
//! config:
//!     resolutions=[16,8]
//!     schedule='cosine-shift2'
//!     inner_config:
//!         resolutions=[8,4]
//! ```
//!
//! A line ending in `:` opens a block holding every following line that is
//! indented deeper. Trailing commas and stray closing braces are tolerated,
//! `#` starts a comment, and integers may contain `_` separators.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Block(Doc),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Doc {
    pub entries: Vec<(String, Value)>,
}

struct Line<'a> {
    no: usize,
    indent: usize,
    text: &'a str,
}

impl Doc {
    pub fn parse(text: &str) -> Result<Doc> {
        let lines: Vec<Line> = text
            .lines()
            .enumerate()
            .filter_map(|(i, raw)| {
                let body = raw.split('#').next().unwrap_or("");
                let trimmed = body.trim();
                if trimmed.is_empty() {
                    return None;
                }
                let indent = body.len() - body.trim_start().len();
                Some(Line {
                    no: i + 1,
                    indent,
                    text: trimmed,
                })
            })
            .collect();
        if lines.is_empty() {
            return Err(Error::parse("<document>", "empty document"));
        }
        let mut pos = 0;
        let doc = parse_block(&lines, &mut pos, None)?;
        Ok(doc)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn push(&mut self, key: &str, value: Value) {
        self.entries.push((key.to_string(), value));
    }

    /// If the document is a single header block (`config:`), its body.
    pub fn unwrap_header(&self) -> &Doc {
        match self.entries.as_slice() {
            [(_, Value::Block(inner))] => inner,
            _ => self,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_doc(self, 0, &mut out);
        out
    }

    pub fn int(&self, key: &str) -> Result<Option<i64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(v)) => Ok(Some(*v)),
            Some(_) => Err(Error::parse(key, "expected an integer")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.int(key)? {
            None => Ok(None),
            Some(v) if v >= 0 => Ok(Some(v as usize)),
            Some(_) => Err(Error::parse(key, "expected a nonnegative integer")),
        }
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(v)) => Ok(Some(*v as f64)),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(_) => Err(Error::parse(key, "expected a number")),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Error::parse(key, "expected a string")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) if s == "True" || s == "true" => Ok(Some(true)),
            Some(Value::Str(s)) if s == "False" || s == "false" => Ok(Some(false)),
            Some(_) => Err(Error::parse(key, "expected True or False")),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::List(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Int(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(Error::parse(key, "expected a list of nonnegative integers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::parse(key, "expected a list")),
        }
    }

    pub fn block(&self, key: &str) -> Result<Option<&Doc>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Block(d)) => Ok(Some(d)),
            Some(_) => Err(Error::parse(key, "expected a nested block")),
        }
    }
}

fn parse_block(lines: &[Line], pos: &mut usize, parent_indent: Option<usize>) -> Result<Doc> {
    let mut doc = Doc::default();
    let mut block_indent: Option<usize> = None;
    while *pos < lines.len() {
        let line = &lines[*pos];
        if let Some(p) = parent_indent {
            if line.indent <= p {
                break;
            }
        }
        match block_indent {
            None => block_indent = Some(line.indent),
            Some(bi) if line.indent != bi => {
                return Err(Error::parse(
                    format!("line {}", line.no),
                    "inconsistent indentation",
                ));
            }
            _ => {}
        }
        *pos += 1;
        let text = line.text.trim_end_matches(['}', ',']).trim();
        if let Some(head) = text.strip_suffix(':') {
            let name = head.trim();
            if name.is_empty() || name.contains('=') {
                return Err(Error::parse(format!("line {}", line.no), "bad block header"));
            }
            let inner = parse_block(lines, pos, Some(line.indent))?;
            if doc.get(name).is_some() {
                return Err(Error::parse(name, "duplicate key"));
            }
            doc.push(name, Value::Block(inner));
            continue;
        }
        let Some((k, v)) = text.split_once('=') else {
            return Err(Error::parse(
                format!("line {}", line.no),
                format!("expected key=value, got `{}`", line.text),
            ));
        };
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::parse(format!("line {}", line.no), "bad key"));
        }
        if doc.get(key).is_some() {
            return Err(Error::parse(key, "duplicate key"));
        }
        let value = parse_value(v.trim()).map_err(|m| Error::parse(key, m))?;
        doc.push(key, value);
    }
    Ok(doc)
}

fn parse_value(s: &str) -> std::result::Result<Value, String> {
    let s = s.trim().trim_end_matches(',').trim();
    if s.is_empty() {
        return Err("missing value".into());
    }
    if let Some(body) = s.strip_prefix('[') {
        let body = body
            .strip_suffix(']')
            .ok_or_else(|| "unterminated list".to_string())?;
        if body.trim().is_empty() {
            return Ok(Value::List(Vec::new()));
        }
        return body
            .split(',')
            .map(|item| parse_scalar(item.trim()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Value::List);
    }
    parse_scalar(s)
}

fn parse_scalar(s: &str) -> std::result::Result<Value, String> {
    if s.is_empty() {
        return Err("empty list item".into());
    }
    for q in ['\'', '"'] {
        if let Some(body) = s.strip_prefix(q) {
            return body
                .strip_suffix(q)
                .map(|b| Value::Str(b.to_string()))
                .ok_or_else(|| "unterminated string".to_string());
        }
    }
    let plain = s.replace('_', "");
    if let Ok(i) = plain.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    // Step counts written as 300K.
    if let Some(n) = plain.strip_suffix(['K', 'k']) {
        if let Ok(i) = n.parse::<i64>() {
            return Ok(Value::Int(i * 1000));
        }
    }
    if let Ok(f) = plain.parse::<f64>() {
        return Ok(Value::Float(f));
    }
    if s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Ok(Value::Str(s.to_string()));
    }
    Err(format!("cannot parse value `{s}`"))
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Float(f) => {
            let _ = write!(out, "{f:?}");
        }
        Value::Str(s) => {
            let _ = write!(out, "'{s}'");
        }
        Value::List(items) => {
            out.push('[');
            for (i, it) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(it, out);
            }
            out.push(']');
        }
        Value::Block(_) => unreachable!("blocks are written by write_doc"),
    }
}

fn write_doc(doc: &Doc, depth: usize, out: &mut String) {
    let pad = "    ".repeat(depth);
    for (k, v) in &doc.entries {
        match v {
            Value::Block(inner) => {
                let _ = writeln!(out, "{pad}{k}:");
                write_doc(inner, depth + 1, out);
            }
            other => {
                out.push_str(&pad);
                out.push_str(k);
                out.push('=');
                write_value(other, out);
                out.push('\n');
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_listing() {
        let text = "Architecture config (X):\n    resolutions=[256,128]\n    inner_config:\n        resolutions=[128,64]\n        num_heads=8,\n        schedule='cosine'}\n    emb_channels=1_024\n";
        let doc = Doc::parse(text).unwrap();
        let body = doc.unwrap_header();
        assert_eq!(body.usize_list("resolutions").unwrap(), Some(vec![256, 128]));
        assert_eq!(body.usize("emb_channels").unwrap(), Some(1024));
        let inner = body.block("inner_config").unwrap().unwrap();
        assert_eq!(inner.usize("num_heads").unwrap(), Some(8));
        assert_eq!(inner.string("schedule").unwrap().as_deref(), Some("cosine"));
    }

    #[test]
    fn scalars() {
        assert_eq!(parse_value("1.e-8").unwrap(), Value::Float(1e-8));
        assert_eq!(parse_value("300K").unwrap(), Value::Int(300_000));
        assert_eq!(parse_value("'adam'").unwrap(), Value::Str("adam".into()));
        assert_eq!(parse_value("bp16").unwrap(), Value::Str("bp16".into()));
        assert_eq!(parse_value("[]").unwrap(), Value::List(vec![]));
        assert!(parse_value("[1,2").is_err());
        assert!(parse_value("'x").is_err());
    }

    #[test]
    fn errors() {
        assert!(Doc::parse("").is_err());
        assert!(Doc::parse("   \n# only a comment\n").is_err());
        assert!(Doc::parse("a=1\na=2\n").is_err());
        assert!(Doc::parse("a=1\n  b=2\n").is_err());
        assert!(Doc::parse("just words\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "config:\n    a=[1,2]\n    inner_config:\n        b='x'\n    c=0.5\n";
        let doc = Doc::parse(text).unwrap();
        assert_eq!(doc.to_text(), text);
        assert_eq!(Doc::parse(&doc.to_text()).unwrap(), doc);
    }
}
