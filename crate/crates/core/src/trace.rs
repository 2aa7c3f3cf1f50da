//! Trace events and the ordered-subsequence expectation matcher.
//!
//! One event renders as one line:
//!
//! ```text
//! <time_ms> <node> <KIND> <proto> <src>:<id> > <dst>:<id> ttl=<n> [iface=<name>] [chain=<table>/<CHAIN> verdict=<V>] [reason=<text>]
//! ```
//!
//! EMIT events are attributed to the link the packet is placed on, so their
//! `<node>` field is a link name and `iface` names the sending interface.

use std::fmt;

use crate::conntrack::VirtualTime;
use crate::packet::{FiveTuple, Packet};
use crate::rule::{ChainId, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Emit,
    Recv,
    Verdict,
    Translate,
    Drop,
    Deliver,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Emit => "EMIT",
            EventKind::Recv => "RECV",
            EventKind::Verdict => "VERDICT",
            EventKind::Translate => "XLATE",
            EventKind::Drop => "DROP",
            EventKind::Deliver => "DELIVER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: VirtualTime,
    pub node: String,
    pub kind: EventKind,
    pub tuple: FiveTuple,
    pub ttl: u8,
    pub iface: Option<String>,
    pub chain: Option<(Table, ChainId)>,
    pub verdict: Option<String>,
    pub reason: Option<String>,
}

impl TraceEvent {
    pub fn new(time: VirtualTime, node: &str, kind: EventKind, packet: &Packet) -> Self {
        TraceEvent {
            time,
            node: node.to_string(),
            kind,
            tuple: packet.tuple(),
            ttl: packet.ip.ttl,
            iface: None,
            chain: None,
            verdict: None,
            reason: None,
        }
    }

    pub fn iface(mut self, iface: &str) -> Self {
        self.iface = Some(iface.to_string());
        self
    }

    pub fn chain(mut self, table: Table, chain: ChainId, verdict: impl fmt::Display) -> Self {
        self.chain = Some((table, chain));
        self.verdict = Some(verdict.to_string());
        self
    }

    pub fn reason(mut self, reason: &str) -> Self {
        self.reason = Some(reason.to_string());
        self
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} ttl={}",
            self.time,
            self.node,
            self.kind.name(),
            self.tuple,
            self.ttl
        )?;
        if let Some(i) = &self.iface {
            write!(f, " iface={i}")?;
        }
        if let Some((table, chain)) = &self.chain {
            write!(f, " chain={table}/{chain}")?;
            if let Some(v) = &self.verdict {
                write!(f, " verdict={v}")?;
            }
        }
        if let Some(r) = &self.reason {
            write!(f, " reason={r}")?;
        }
        Ok(())
    }
}

/// Append-only event log, ordered by (time, sequence).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        self.events.iter().map(ToString::to_string).collect()
    }

    /// Full text, one line per event, newline terminated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

/// A trace-line template. A token that is exactly `*` matches any run of
/// whole tokens (including none); a `*` inside a token matches any substring
/// of one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectPattern {
    pub text: String,
    tokens: Vec<String>,
}

impl ExpectPattern {
    pub fn new(text: &str) -> Self {
        ExpectPattern {
            text: text.split_whitespace().collect::<Vec<_>>().join(" "),
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn matches(&self, line: &str) -> bool {
        let words: Vec<&str> = line.split_whitespace().collect();
        match_tokens(&self.tokens, &words)
    }

    /// Node and kind fields (positions 1 and 2) when they are literal.
    fn anchor(&self) -> Option<(&str, &str)> {
        match self.tokens.as_slice() {
            [_, node, kind, ..] if !node.contains('*') && !kind.contains('*') => Some((node, kind)),
            _ => None,
        }
    }
}

fn match_tokens(pattern: &[String], words: &[&str]) -> bool {
    match pattern.split_first() {
        None => words.is_empty(),
        Some((p, rest)) if p == "*" => (0..=words.len()).any(|skip| match_tokens(rest, &words[skip..])),
        Some((p, rest)) => match words.split_first() {
            Some((w, more)) => glob(p.as_bytes(), w.as_bytes()) && match_tokens(rest, more),
            None => false,
        },
    }
}

fn glob(pattern: &[u8], text: &[u8]) -> bool {
    match pattern.split_first() {
        None => text.is_empty(),
        Some((b'*', rest)) => (0..=text.len()).any(|skip| glob(rest, &text[skip..])),
        Some((c, rest)) => text.first() == Some(c) && glob(rest, &text[1..]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectResult {
    pub pattern: String,
    /// 0-based trace line that satisfied the pattern.
    pub matched_line: Option<usize>,
    /// For a failed pattern: the first later line with the same node and kind
    /// (or simply the next line), i.e. where the trace diverged.
    pub divergent: Option<String>,
}

impl ExpectResult {
    pub fn matched(&self) -> bool {
        self.matched_line.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExpectReport {
    pub results: Vec<ExpectResult>,
}

impl ExpectReport {
    pub fn all_matched(&self) -> bool {
        self.results.iter().all(ExpectResult::matched)
    }

    pub fn first_failure(&self) -> Option<&ExpectResult> {
        self.results.iter().find(|r| !r.matched())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            match (r.matched_line, &r.divergent) {
                (Some(line), _) => out.push_str(&format!("PASS {} (line {})\n", r.pattern, line + 1)),
                (None, Some(d)) => out.push_str(&format!("FAIL {} (diverged at: {})\n", r.pattern, d)),
                (None, None) => out.push_str(&format!("FAIL {} (end of trace)\n", r.pattern)),
            }
        }
        out
    }
}

/// Greedy ordered-subsequence match of `patterns` against `lines`. A failed
/// pattern does not advance the cursor.
pub fn check_expectations(patterns: &[ExpectPattern], lines: &[String]) -> ExpectReport {
    let mut cursor = 0;
    let mut results = Vec::with_capacity(patterns.len());
    for pat in patterns {
        let hit = (cursor..lines.len()).find(|&i| pat.matches(&lines[i]));
        let divergent = match hit {
            Some(_) => None,
            None => {
                let same_anchor = pat.anchor().and_then(|(node, kind)| {
                    lines[cursor..].iter().find(|l| {
                        let mut w = l.split_whitespace().skip(1);
                        w.next() == Some(node) && w.next() == Some(kind)
                    })
                });
                same_anchor.or_else(|| lines.get(cursor)).cloned()
            }
        };
        if let Some(i) = hit {
            cursor = i + 1;
        }
        results.push(ExpectResult {
            pattern: pat.text.clone(),
            matched_line: hit,
            divergent,
        });
    }
    ExpectReport { results }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcards() {
        let line = "1 internet EMIT icmp 202.16.58.1:1 > 202.16.58.2:1 ttl=63 iface=wan0";
        assert!(ExpectPattern::new("* internet EMIT icmp 202.16.58.1:* > 202.16.58.2:* ttl=63 *").matches(line));
        assert!(!ExpectPattern::new("* internet EMIT icmp 202.16.58.1:* > 202.16.58.2:* ttl=62 *").matches(line));
        assert!(ExpectPattern::new("* internet EMIT * iface=wan0").matches(line));
        assert!(ExpectPattern::new("*").matches(line));
        assert!(!ExpectPattern::new("* RA EMIT *").matches(line));
        let drop = "5 RA DROP udp 9.9.9.9:1 > 202.16.58.1:7 ttl=64 iface=wan0 reason=no-conntrack-entry";
        assert!(ExpectPattern::new("* RA DROP * reason=no-conntrack-entry").matches(drop));
    }

    #[test]
    fn ordered_subsequence() {
        let lines: Vec<String> = ["0 a RECV x", "1 b RECV y", "2 a DELIVER z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pats = [ExpectPattern::new("* a RECV *"), ExpectPattern::new("* a DELIVER *")];
        assert!(check_expectations(&pats, &lines).all_matched());

        let backwards = [ExpectPattern::new("* b RECV *"), ExpectPattern::new("* a RECV *")];
        let r = check_expectations(&backwards, &lines);
        assert!(r.results[0].matched());
        assert!(!r.results[1].matched());
        assert_eq!(r.results[1].divergent.as_deref(), Some("2 a DELIVER z"));

        let missing = [ExpectPattern::new("* a RECV q"), ExpectPattern::new("* b RECV *")];
        let r = check_expectations(&missing, &lines);
        assert_eq!(r.first_failure().unwrap().divergent.as_deref(), Some("0 a RECV x"));
        assert!(r.results[1].matched());
    }
}
