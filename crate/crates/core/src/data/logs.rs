//! Drain-style log template mining and conversion of log lines to
//! structured objects.
//!
//! Lines are split into a header (date, time, pid, level, component) and a
//! free-text content. Content tokens are grouped in a fixed-depth prefix tree
//! keyed by token count and then by the leading tokens; inside a leaf the
//! most similar template absorbs the line when similarity reaches the
//! threshold, turning disagreeing positions into wildcards.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use md5::{Digest, Md5};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::object::StructuredObject;
use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";
/// Template id of lines no mined template matches.
pub const CATCH_ALL: &str = "catch-all";

/// A mined template: literal tokens and `<*>` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub id: String,
    pub tokens: Vec<String>,
    /// Number of lines absorbed while mining.
    pub size: usize,
}

impl LogTemplate {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut t = LogTemplate {
            id: String::new(),
            tokens,
            size: 1,
        };
        t.refresh_id();
        t
    }

    fn refresh_id(&mut self) {
        self.id = template_id(&self.text());
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn slot_count(&self) -> usize {
        self.tokens.iter().filter(|t| *t == WILDCARD).count()
    }

    /// Slot values when `content` fits this template exactly.
    pub fn extract(&self, content: &[&str]) -> Option<Vec<String>> {
        if content.len() != self.tokens.len() {
            return None;
        }
        let mut slots = Vec::new();
        for (t, c) in self.tokens.iter().zip(content) {
            if t == WILDCARD {
                slots.push((*c).to_string());
            } else if t != c {
                return None;
            }
        }
        Some(slots)
    }
}

/// First 8 hex digits of the MD5 of the template text.
pub fn template_id(text: &str) -> String {
    hex::encode(Md5::digest(text.as_bytes()))[..8].to_string()
}

/// Regex masks applied per token before clustering; a token fully matched by
/// any mask is treated as a variable.
#[derive(Clone, Debug)]
pub struct Masks(Vec<Regex>);

impl Default for Masks {
    fn default() -> Self {
        Masks::new(&[
            r"^blk_-?\d+$",
            r"^(/)?\d{1,3}(\.\d{1,3}){3}(:\d+)?$",
            r"^[-+]?\d+(\.\d+)?$",
        ])
        .expect("built-in masks compile")
    }
}

impl Masks {
    pub fn new(patterns: &[&str]) -> Result<Self> {
        patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("bad mask `{p}`: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Masks)
    }

    pub fn is_variable(&self, token: &str) -> bool {
        self.0.iter().any(|r| r.is_match(token))
    }

    fn apply<'a>(&self, tokens: &[&'a str]) -> Vec<&'a str> {
        tokens
            .iter()
            .map(|t| if self.is_variable(t) { WILDCARD } else { t })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DrainConfig {
    /// Tree depth counting the length layer and the leaf layer.
    pub depth: usize,
    pub sim_threshold: f64,
    pub max_children: usize,
    pub masks: Masks,
}

impl Default for DrainConfig {
    fn default() -> Self {
        DrainConfig {
            depth: 4,
            sim_threshold: 0.5,
            max_children: 100,
            masks: Masks::default(),
        }
    }
}

#[derive(Default)]
struct Node {
    children: BTreeMap<String, Node>,
    clusters: Vec<usize>,
}

/// Incremental miner; feed lines in order, then read the templates.
pub struct Drain {
    cfg: DrainConfig,
    root: BTreeMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

fn has_digit(s: &str) -> bool {
    s.chars().any(|c| c.is_ascii_digit())
}

/// Share of positions where the template literal equals the token; wildcard
/// positions do not count towards similarity.
fn similarity(template: &[String], tokens: &[&str]) -> (f64, usize) {
    let mut same = 0;
    let mut params = 0;
    for (t, c) in template.iter().zip(tokens) {
        if t == WILDCARD {
            params += 1;
        } else if t == c {
            same += 1;
        }
    }
    (same as f64 / template.len().max(1) as f64, params)
}

impl Drain {
    pub fn new(cfg: DrainConfig) -> Result<Self> {
        if cfg.depth < 3 {
            return Err(Error::Config(format!("drain depth must be >= 3, got {}", cfg.depth)));
        }
        if !(0.0..=1.0).contains(&cfg.sim_threshold) {
            return Err(Error::Config(format!(
                "similarity threshold must be in [0,1], got {}",
                cfg.sim_threshold
            )));
        }
        Ok(Drain {
            cfg,
            root: BTreeMap::new(),
            templates: Vec::new(),
        })
    }

    fn leaf(&mut self, tokens: &[&str]) -> &mut Node {
        let prefix_depth = self.cfg.depth - 2;
        let max_children = self.cfg.max_children;
        let mut node = self.root.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(prefix_depth) {
            let key = if has_digit(tok) || *tok == WILDCARD {
                WILDCARD.to_string()
            } else if node.children.contains_key(*tok)
                || node.children.len() + 1 < max_children
            {
                (*tok).to_string()
            } else {
                WILDCARD.to_string()
            };
            node = node.children.entry(key).or_default();
        }
        node
    }

    /// Adds one content line; returns the index of the template it joined.
    pub fn add(&mut self, content: &str) -> usize {
        let raw: Vec<&str> = content.split_whitespace().collect();
        let tokens = self.cfg.masks.apply(&raw);
        let threshold = self.cfg.sim_threshold;
        let candidates = self.leaf(&tokens).clusters.clone();
        let mut best: Option<(usize, f64, usize)> = None;
        for c in candidates {
            let (sim, params) = similarity(&self.templates[c].tokens, &tokens);
            let better = match best {
                None => true,
                Some((_, s, p)) => sim > s || (sim == s && params > p),
            };
            if better {
                best = Some((c, sim, params));
            }
        }
        match best {
            Some((c, sim, _)) if sim >= threshold => {
                let t = &mut self.templates[c];
                let mut changed = false;
                for (slot, tok) in t.tokens.iter_mut().zip(&tokens) {
                    if slot != tok && slot != WILDCARD {
                        *slot = WILDCARD.to_string();
                        changed = true;
                    }
                }
                t.size += 1;
                if changed {
                    t.refresh_id();
                }
                c
            }
            _ => {
                let id = self.templates.len();
                self.templates
                    .push(LogTemplate::from_tokens(tokens.iter().map(|s| s.to_string()).collect()));
                self.leaf(&tokens).clusters.push(id);
                id
            }
        }
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn into_templates(self) -> Vec<LogTemplate> {
        self.templates
    }
}

/// Mines templates from content strings in the given order.
pub fn mine_log_templates<'a, I>(lines: I, depth: usize, sim_threshold: f64) -> Result<Vec<LogTemplate>>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut drain = Drain::new(DrainConfig {
        depth,
        sim_threshold,
        ..DrainConfig::default()
    })?;
    for l in lines {
        drain.add(l);
    }
    Ok(drain.into_templates())
}

/// Header layout `<Date> <Time> <Pid> <Level> <Component>: <Content>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFormat {
    pub fields: Vec<String>,
    /// Header fields whose all-digit values lose leading zeros, as a
    /// spreadsheet-style integer column would show them.
    #[serde(default)]
    pub integer_fields: Vec<String>,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat::hdfs()
    }
}

/// Header fields and message body of one line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedLine {
    pub header: IndexMap<String, String>,
    pub content: String,
}

impl LogFormat {
    pub fn hdfs() -> Self {
        LogFormat {
            fields: ["Date", "Time", "Pid", "Level", "Component"]
                .map(String::from)
                .to_vec(),
            integer_fields: vec!["Date".into()],
        }
    }

    /// The last field is terminated by `:`; the rest are whitespace separated.
    pub fn parse(&self, line: &str, line_no: Option<usize>) -> Result<ParsedLine> {
        let mut rest = line.trim_start();
        let mut header = IndexMap::new();
        for (i, f) in self.fields.iter().enumerate() {
            let last = i + 1 == self.fields.len();
            let end = if last {
                rest.find(": ").or_else(|| rest.strip_suffix(':').map(|r| r.len()))
            } else {
                rest.find(char::is_whitespace)
            };
            let end = end.ok_or_else(|| {
                Error::format(line_no, format!("log line is missing header field `{f}`"))
            })?;
            let mut value = rest[..end].trim().to_string();
            if self.integer_fields.contains(f) && value.chars().all(|c| c.is_ascii_digit()) {
                let trimmed = value.trim_start_matches('0');
                value = if trimmed.is_empty() { "0".into() } else { trimmed.into() };
            }
            header.insert(f.clone(), value);
            rest = rest[end..].trim_start();
            if last {
                rest = rest.strip_prefix(':').unwrap_or(rest).trim_start();
            }
        }
        Ok(ParsedLine {
            header,
            content: rest.to_string(),
        })
    }
}

/// Key names for a template: either just the ordered slot names, or slot
/// names plus constant fields emitted ahead of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateKeys {
    Slots(Vec<String>),
    Full {
        #[serde(default)]
        constants: IndexMap<String, String>,
        slots: Vec<String>,
    },
}

impl TemplateKeys {
    fn parts(&self) -> (Option<&IndexMap<String, String>>, &[String]) {
        match self {
            TemplateKeys::Slots(s) => (None, s),
            TemplateKeys::Full { constants, slots } => (Some(constants), slots),
        }
    }
}

/// Template id to key names, as read from a JSON mapping file.
pub type KeyNameMap = HashMap<String, TemplateKeys>;

pub fn load_key_names(path: impl AsRef<Path>) -> Result<KeyNameMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Converts one log line into an object: mapped constants, slot values,
/// `LineId`, the header fields and `EventId`. Slots without a mapped name are
/// called `param{i}`; lines no template fits keep their text under
/// `raw_message` with `EventId` set to [`CATCH_ALL`].
pub fn structure_log_line(
    line: &str,
    line_id: usize,
    format: &LogFormat,
    templates: &[LogTemplate],
    key_names: &KeyNameMap,
) -> Result<StructuredObject> {
    let parsed = format.parse(line, Some(line_id))?;
    let content: Vec<&str> = parsed.content.split_whitespace().collect();
    let mut obj = StructuredObject::new();
    let matched = templates
        .iter()
        .filter_map(|t| t.extract(&content).map(|s| (t, s)))
        .max_by_key(|(t, _)| t.tokens.len() - t.slot_count());
    let event_id = match matched {
        Some((t, slots)) => {
            let (constants, names) = key_names
                .get(&t.id)
                .map(TemplateKeys::parts)
                .unwrap_or((None, &[]));
            if let Some(c) = constants {
                for (k, v) in c {
                    obj.insert(k.clone(), v.clone());
                }
            }
            for (i, v) in slots.into_iter().enumerate() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
                obj.insert(name, v);
            }
            t.id.clone()
        }
        None => {
            obj.insert("raw_message", parsed.content.clone());
            CATCH_ALL.to_string()
        }
    };
    obj.insert("LineId", line_id.to_string());
    for (k, v) in parsed.header {
        obj.insert(k, v);
    }
    obj.insert("EventId", event_id);
    Ok(obj)
}

/// Mines templates over a whole log file and structures every line.
/// `LineId` is the 1-based line number.
pub fn structure_log_file(
    path: impl AsRef<Path>,
    format: &LogFormat,
    cfg: DrainConfig,
    key_names: &KeyNameMap,
) -> Result<(Vec<LogTemplate>, Vec<StructuredObject>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut drain = Drain::new(cfg)?;
    let mut parsed = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let p = format.parse(l, Some(i + 1))?;
        drain.add(&p.content);
        parsed.push((i + 1, l));
    }
    let templates = drain.into_templates();
    let objects = parsed
        .into_iter()
        .map(|(n, l)| structure_log_line(l, n, format, &templates, key_names))
        .collect::<Result<Vec<_>>>()?;
    Ok((templates, objects))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerals_become_slots() {
        let t = mine_log_templates(
            ["Receiving block 12 from node 3", "Receiving block 99 from node 7"],
            4,
            0.5,
        )
        .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].text(), "Receiving block <*> from node <*>");
        assert_eq!(t[0].size, 2);
    }

    #[test]
    fn different_lengths_never_merge() {
        let t = mine_log_templates(["a b c", "a b c d"], 4, 0.0).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn header_parsing() {
        let p = LogFormat::hdfs()
            .parse("081109 203519 29 INFO dfs.FSNamesystem: BLOCK* x: y", None)
            .unwrap();
        assert_eq!(p.header["Date"], "81109");
        assert_eq!(p.header["Component"], "dfs.FSNamesystem");
        assert_eq!(p.content, "BLOCK* x: y");
        assert!(LogFormat::hdfs().parse("081109 203519", Some(3)).is_err());
    }

    #[test]
    fn unmatched_line_goes_to_catch_all() {
        let obj = structure_log_line(
            "081109 203519 29 INFO a.B: hello world",
            1,
            &LogFormat::hdfs(),
            &[],
            &KeyNameMap::new(),
        )
        .unwrap();
        assert_eq!(obj.get("raw_message"), Some("hello world"));
        assert_eq!(obj.get("EventId"), Some(CATCH_ALL));
    }

    #[test]
    fn invalid_parameters() {
        assert!(mine_log_templates(["a"], 2, 0.5).is_err());
        assert!(mine_log_templates(["a"], 4, 1.5).is_err());
    }
}
