//! Append-only run trace with a canonical JSON Lines form.
//!
//! Canonical form: one record per line, fixed key order
//! `at, kind, subject, attrs`, attrs in insertion order. The trace hash is
//! the SHA-256 of the concatenated canonical lines, which is what the
//! determinism checks compare.

use std::fmt::Write as _;
use std::io;

use sha2::{Digest, Sha256};

use crate::time::SimTime;

/// A single attribute value; numbers keep their type so the canonical
/// encoding is stable.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    U64(u64),
    F64(f64),
    Str(String),
}

impl From<u64> for AttrValue {
    fn from(v: u64) -> Self {
        AttrValue::U64(v)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::F64(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_string())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub at: SimTime,
    pub kind: String,
    pub subject: String,
    pub attrs: Vec<(String, AttrValue)>,
}

impl TraceRecord {
    pub fn new(at: SimTime, kind: &str, subject: &str) -> Self {
        TraceRecord {
            at,
            kind: kind.to_string(),
            subject: subject.to_string(),
            attrs: Vec::new(),
        }
    }

    pub fn attr(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.push((key.to_string(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&AttrValue> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        match self.get(key)? {
            AttrValue::U64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            AttrValue::F64(v) => Some(*v),
            AttrValue::U64(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        match self.get(key)? {
            AttrValue::Str(v) => Some(v),
            _ => None,
        }
    }

    /// Canonical single-line JSON encoding.
    pub fn canonical_line(&self) -> String {
        let mut s = String::with_capacity(96);
        write!(
            s,
            "{{\"at\":{},\"kind\":{},\"subject\":{},\"attrs\":{{",
            self.at.as_nanos(),
            json_str(&self.kind),
            json_str(&self.subject),
        )
        .unwrap();
        for (i, (k, v)) in self.attrs.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&json_str(k));
            s.push(':');
            match v {
                AttrValue::U64(n) => {
                    write!(s, "{n}").unwrap();
                }
                AttrValue::F64(x) => {
                    // serde_json's float formatting (ryu) is deterministic
                    s.push_str(&serde_json::to_string(x).unwrap());
                }
                AttrValue::Str(t) => s.push_str(&json_str(t)),
            }
        }
        s.push_str("}}");
        s
    }

    /// Parses one canonical trace line back into a record. Accepts any JSON
    /// object with the expected keys, not only byte-canonical output.
    pub fn parse_line(line: &str) -> Result<TraceRecord, String> {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| format!("invalid trace line: {e}"))?;
        let obj = value.as_object().ok_or("trace line is not an object")?;
        let at = obj
            .get("at")
            .and_then(|v| v.as_u64())
            .ok_or("missing or invalid 'at'")?;
        let kind = obj
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or("missing or invalid 'kind'")?;
        let subject = obj
            .get("subject")
            .and_then(|v| v.as_str())
            .ok_or("missing or invalid 'subject'")?;
        let mut rec = TraceRecord::new(SimTime(at), kind, subject);
        if let Some(attrs) = obj.get("attrs") {
            let attrs = attrs.as_object().ok_or("'attrs' is not an object")?;
            for (k, v) in attrs {
                let av = match v {
                    serde_json::Value::Number(n) => {
                        if let Some(u) = n.as_u64() {
                            AttrValue::U64(u)
                        } else if let Some(f) = n.as_f64() {
                            AttrValue::F64(f)
                        } else {
                            return Err(format!("unrepresentable number in attr '{k}'"));
                        }
                    }
                    serde_json::Value::String(s) => AttrValue::Str(s.clone()),
                    other => return Err(format!("unsupported attr value for '{k}': {other}")),
                };
                rec.attrs.push((k.clone(), av));
            }
        }
        Ok(rec)
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

/// The append-only trace of one run.
#[derive(Debug, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// SHA-256 over the concatenated canonical lines (each including its
    /// trailing newline).
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for rec in &self.records {
            hasher.update(rec.canonical_line().as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }

    pub fn write_jsonl<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        for rec in &self.records {
            w.write_all(rec.canonical_line().as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a JSONL trace file back into records.
pub fn read_jsonl(text: &str) -> Result<Vec<TraceRecord>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TraceRecord::parse_line)
        .collect()
}
