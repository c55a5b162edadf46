//! Line-oriented trace records: `t=<ns>\tnode=<id|->\tev=<type>` followed by
//! event-specific `key=value` fields, tab separated.

use std::fmt::{self, Display, Write as _};

use thiserror::Error;

use crate::ids::{NodeId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: SimTime,
    /// `None` for the coordinator and client-side events.
    pub node: Option<NodeId>,
    pub ev: String,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed trace at line {line}: {msg}")]
pub struct MalformedTrace {
    pub line: usize,
    pub msg: String,
}

impl TraceRecord {
    pub fn new(t: SimTime, node: Option<NodeId>, ev: &str) -> Self {
        TraceRecord { t, node, ev: ev.to_owned(), fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.fields.push((key.to_owned(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }

    pub fn bytes(&self, key: &str) -> Option<Vec<u8>> {
        unhex(self.get(key)?)
    }

    pub fn parse(line_no: usize, line: &str) -> Result<TraceRecord, MalformedTrace> {
        let bad = |msg: &str| MalformedTrace { line: line_no, msg: msg.to_owned() };
        let mut parts = line.split('\t');
        let t = parts
            .next()
            .and_then(|p| p.strip_prefix("t="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("expected t=<ns>"))?;
        let node = match parts.next().and_then(|p| p.strip_prefix("node=")) {
            Some("-") => None,
            Some(v) => Some(NodeId(v.parse().map_err(|_| bad("bad node id"))?)),
            None => return Err(bad("expected node=")),
        };
        let ev = parts.next().and_then(|p| p.strip_prefix("ev=")).ok_or_else(|| bad("expected ev="))?;
        if ev.is_empty() {
            return Err(bad("empty event type"));
        }
        let mut rec = TraceRecord::new(t, node, ev);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("field without `=`"))?;
            rec.fields.push((k.to_owned(), v.to_owned()));
        }
        Ok(rec)
    }
}

impl Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}\tnode=", self.t)?;
        match self.node {
            Some(n) => write!(f, "{n}")?,
            None => f.write_str("-")?,
        }
        write!(f, "\tev={}", self.ev)?;
        for (k, v) in &self.fields {
            write!(f, "\t{k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, MalformedTrace> {
    text.lines().enumerate().filter(|(_, l)| !l.is_empty()).map(|(i, l)| TraceRecord::parse(i + 1, l)).collect()
}

pub fn render_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{r}").expect("writing to a String");
    }
    out
}

/// `0x`-prefixed lowercase hex.
pub fn hex(bytes: &[u8]) -> String {
    format!("0x{}", hex::encode(bytes))
}

pub fn unhex(s: &str) -> Option<Vec<u8>> {
    hex::decode(s.strip_prefix("0x")?).ok()
}
