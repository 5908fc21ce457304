//! FewRel-format JSON: an object keyed by relation id, each value a list of
//! records `{tokens: [..], h: [name, kb_id, [[positions..]..]], t: [..]}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use super::{Dataset, Instance, Span};
use crate::error::{Error, Result};

pub fn load_fewrel(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("invalid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse(path, "top level must be an object keyed by relation id"))?;

    let mut dataset = Dataset::new();
    for (relation, records) in obj {
        let records = records.as_array().ok_or_else(|| {
            Error::parse(path, format!("relation {relation:?}: value must be an array"))
        })?;
        for (i, record) in records.iter().enumerate() {
            let ctx = format!("relation {relation:?} record {i}");
            let instance = parse_record(record, relation, &ctx)
                .map_err(|detail| Error::parse(path, format!("{ctx}: {detail}")))?;
            instance.validate(&ctx)?;
            dataset.insert(relation.clone(), instance);
        }
    }
    Ok(dataset)
}

fn parse_record(record: &Value, relation: &str, ctx: &str) -> std::result::Result<Instance, String> {
    let obj = record.as_object().ok_or("record must be an object")?;
    let tokens: Vec<String> = obj
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or("missing tokens array")?
        .iter()
        .map(|t| t.as_str().map(str::to_owned).ok_or("non-string token"))
        .collect::<std::result::Result<_, _>>()?;

    let (head_name, head_span) = parse_entity(obj.get("h").ok_or("missing h")?, "h")?;
    let (tail_name, tail_span) = parse_entity(obj.get("t").ok_or("missing t")?, "t")?;
    let _ = ctx;
    Ok(Instance {
        tokens,
        head_span,
        tail_span,
        head_name,
        tail_name,
        relation: relation.to_owned(),
    })
}

/// Entity descriptor `[name, kb_id, [[pos..], ..]]`. The span is the first
/// position list that is a non-empty consecutive ascending run; remaining
/// lists are ignored.
fn parse_entity(value: &Value, field: &str) -> std::result::Result<(String, Span), String> {
    let arr = value
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| format!("{field} must be [name, id, positions]"))?;
    let name = arr[0]
        .as_str()
        .ok_or_else(|| format!("{field} name must be a string"))?
        .to_owned();
    let lists = arr[2]
        .as_array()
        .ok_or_else(|| format!("{field} positions must be a list of lists"))?;
    for list in lists {
        let Some(list) = list.as_array() else {
            return Err(format!("{field} position entry must be a list"));
        };
        let mut indices = Vec::with_capacity(list.len());
        for v in list {
            let idx = v
                .as_u64()
                .ok_or_else(|| format!("{field} position must be a non-negative integer"))?;
            indices.push(idx as usize);
        }
        if indices.is_empty() {
            continue;
        }
        let consecutive = indices.windows(2).all(|w| w[1] == w[0] + 1);
        if consecutive {
            return Ok((name, Span::new(indices[0], indices[indices.len() - 1] + 1)));
        }
    }
    Err(format!("{field} has no contiguous position list"))
}

/// Serialize a dataset back into the FewRel JSON layout.
pub fn write_fewrel<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let mut root = serde_json::Map::new();
    for (relation, instances) in dataset.iter() {
        let records: Vec<Value> = instances
            .iter()
            .map(|inst| {
                json!({
                    "tokens": inst.tokens,
                    "h": [inst.head_name, "", [span_positions(inst.head_span)]],
                    "t": [inst.tail_name, "", [span_positions(inst.tail_span)]],
                })
            })
            .collect();
        root.insert(relation.to_owned(), Value::Array(records));
    }
    let text = serde_json::to_string_pretty(&Value::Object(root))
        .expect("dataset serialization cannot fail");
    out.write_all(text.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<writer>", e))
}

pub fn save_fewrel(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_fewrel(dataset, std::io::BufWriter::new(file))
}

fn span_positions(span: Span) -> Vec<usize> {
    (span.start..span.end).collect()
}
