//! Structured objects, object sequences and the JSON-lines corpus format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One time step: keys in input order, values as strings.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructuredObject {
    pub pairs: IndexMap<String, String>,
}

impl StructuredObject {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.pairs.insert(key.into(), value.into());
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.pairs.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for StructuredObject {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        StructuredObject {
            pairs: iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

/// A time-ordered list of objects with an optional task label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSequence {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub objects: Vec<StructuredObject>,
}

impl ObjectSequence {
    pub fn new(id: impl Into<String>, objects: Vec<StructuredObject>) -> Self {
        ObjectSequence {
            id: id.into(),
            label: None,
            objects,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Union of keys over all steps, in first-seen order.
    pub fn key_universe(&self) -> IndexSet<String> {
        let mut keys = IndexSet::new();
        for o in &self.objects {
            for k in o.pairs.keys() {
                if !keys.contains(k) {
                    keys.insert(k.clone());
                }
            }
        }
        keys
    }

    /// Value of `key` at step `t`, `None` when the key is absent there.
    pub fn value(&self, t: usize, key: &str) -> Option<&str> {
        self.objects[t].get(key)
    }
}

fn coerce(v: &Value, line: usize, key: &str) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(Error::format(
            Some(line),
            format!("value of key `{key}` must be a string, number or boolean, got {other}"),
        )),
    }
}

/// Parses one JSON-lines record. `line` is 1-based and only used in errors.
pub fn parse_sequence(text: &str, line: usize) -> Result<ObjectSequence> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| Error::format(Some(line), e.to_string()))?;
    let map = doc
        .as_object()
        .ok_or_else(|| Error::format(Some(line), "record must be a JSON object"))?;
    let id = match map.get("id") {
        Some(v) => coerce(v, line, "id")?,
        None => return Err(Error::format(Some(line), "missing `id`")),
    };
    let label = match map.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(coerce(v, line, "label")?),
    };
    let objects = map
        .get("objects")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(Some(line), "missing `objects` array"))?;
    if objects.is_empty() {
        return Err(Error::format(Some(line), "`objects` must not be empty"));
    }
    let mut out = Vec::with_capacity(objects.len());
    for o in objects {
        let o = o
            .as_object()
            .ok_or_else(|| Error::format(Some(line), "each object must be a JSON object"))?;
        let mut obj = StructuredObject::new();
        for (k, v) in o {
            obj.insert(k.clone(), coerce(v, line, k)?);
        }
        out.push(obj);
    }
    Ok(ObjectSequence {
        id,
        label,
        objects: out,
    })
}

/// Reads a JSON-lines corpus. Blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ObjectSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sequence(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, seqs: &[ObjectSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keys over a whole corpus, in first-seen order.
pub fn corpus_keys(seqs: &[ObjectSequence]) -> IndexSet<String> {
    let mut keys = IndexSet::new();
    for s in seqs {
        for k in s.key_universe() {
            keys.insert(k);
        }
    }
    keys
}

/// Distinct labels sorted numerically when every label parses as an integer,
/// lexicographically otherwise. The position in the list is the class index.
pub fn label_set(seqs: &[ObjectSequence]) -> Vec<String> {
    let mut labels: Vec<String> = seqs
        .iter()
        .filter_map(|s| s.label.clone())
        .collect::<IndexSet<_>>()
        .into_iter()
        .collect();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
    } else {
        labels.sort();
    }
    labels
}
