//! (Entity, IsA, Concept) triples and pre-trained concept embeddings.
//!
//! Entities are matched by surface mention: lowercased, with internal
//! whitespace collapsed. Per entity the index keeps at most `max_concepts`
//! concepts ordered by descending confidence, then lexicographically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTriple {
    pub entity: String,
    pub concept: String,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept: String,
    pub confidence: Option<f64>,
}

/// Normalized entity → ordered concept candidates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptIndex {
    entries: BTreeMap<String, Vec<ConceptEntry>>,
    max_concepts: usize,
}

/// Concept string → d_c vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vectors: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

pub fn normalize_entity(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl ConceptIndex {
    pub fn new(max_concepts: usize) -> Self {
        ConceptIndex {
            entries: BTreeMap::new(),
            max_concepts,
        }
    }

    pub fn max_concepts(&self) -> usize {
        self.max_concepts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn concepts(&self, normalized_entity: &str) -> &[ConceptEntry] {
        self.entries
            .get(normalized_entity)
            .map_or(&[], |v| v.as_slice())
    }

    /// Every distinct concept string in the index, sorted.
    pub fn all_concepts(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .entries
            .values()
            .flatten()
            .map(|e| e.concept.clone())
            .collect();
        set.sort();
        set.dedup();
        set
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Build from raw triples: normalize, deduplicate per (entity, concept)
    /// keeping the highest confidence, order, and cap at `max_concepts`.
    pub fn from_triples(triples: Vec<ConceptTriple>, max_concepts: usize) -> Result<Self> {
        let mut grouped: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
        for t in triples {
            let entity = normalize_entity(&t.entity);
            let concept = normalize_entity(&t.concept);
            if entity.is_empty() || concept.is_empty() {
                return Err(Error::validation(
                    "concept triple",
                    format!("empty entity or concept after normalization: {t:?}"),
                ));
            }
            if let Some(c) = t.confidence {
                if !(c >= 0.0) {
                    return Err(Error::validation(
                        "concept triple",
                        format!("negative confidence {c} for ({entity}, {concept})"),
                    ));
                }
            }
            let slot = grouped.entry(entity).or_default().entry(concept).or_insert(None);
            *slot = match (*slot, t.confidence) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
        }
        let mut entries = BTreeMap::new();
        for (entity, concepts) in grouped {
            let mut list: Vec<ConceptEntry> = concepts
                .into_iter()
                .map(|(concept, confidence)| ConceptEntry { concept, confidence })
                .collect();
            list.sort_by(|a, b| {
                let ca = a.confidence.unwrap_or(0.0);
                let cb = b.confidence.unwrap_or(0.0);
                cb.partial_cmp(&ca)
                    .unwrap()
                    .then_with(|| a.concept.cmp(&b.concept))
            });
            list.truncate(max_concepts);
            entries.insert(entity, list);
        }
        Ok(ConceptIndex {
            entries,
            max_concepts,
        })
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            vectors: BTreeMap::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding dim mismatch");
        self.vectors.insert(token.into(), vector);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// TSV lines `entity<TAB>concept[<TAB>confidence]`. Blank lines are skipped;
/// an empty file yields an empty index.
pub fn load_triples(path: impl AsRef<Path>, max_concepts: usize) -> Result<ConceptIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::format(
                path,
                lineno,
                format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let confidence = match fields.get(2) {
            Some(raw) => Some(raw.trim().parse::<f64>().map_err(|_| {
                Error::format(path, lineno, format!("non-numeric confidence {raw:?}"))
            })?),
            None => None,
        };
        if let Some(c) = confidence {
            if c < 0.0 {
                return Err(Error::format(path, lineno, format!("negative confidence {c}")));
            }
        }
        triples.push(ConceptTriple {
            entity: fields[0].to_owned(),
            concept: fields[1].to_owned(),
            confidence,
        });
    }
    ConceptIndex::from_triples(triples, max_concepts)
}

pub fn save_triples(index: &ConceptIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for entity in index.entities() {
        for entry in index.concepts(entity) {
            match entry.confidence {
                Some(c) => out.push_str(&format!("{entity}\t{}\t{c}\n", entry.concept)),
                None => out.push_str(&format!("{entity}\t{}\n", entry.concept)),
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// word2vec text format: header `vocab_size dim`, then `token v1 .. v_dim`
/// per line. Multiword concepts use underscores in the token field.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "missing header line"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::format(path, 1, "header must be `vocab_size dim`"));
    }
    let vocab_size: usize = parts[0]
        .parse()
        .map_err(|_| Error::format(path, 1, "non-numeric vocab size"))?;
    let dim: usize = parts[1]
        .parse()
        .map_err(|_| Error::format(path, 1, "non-numeric dim"))?;
    if dim == 0 {
        return Err(Error::format(path, 1, "dim must be positive"));
    }

    let mut table = EmbeddingTable::new(dim);
    let mut rows = 0usize;
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let values: Vec<f64> = fields
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, lineno, format!("non-numeric value {v:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::format(
                path,
                lineno,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        rows += 1;
        if table.get(token).is_none() {
            table.insert(token.to_owned(), values);
        }
    }
    if rows != vocab_size {
        return Err(Error::format(
            path,
            1,
            format!("header declares {vocab_size} rows but file has {rows}"),
        ));
    }
    Ok(table)
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{} {}", table.len(), table.dim())?;
        for (token, vector) in table.iter() {
            write!(w, "{token}")?;
            for v in vector {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Concept candidates with vectors for an entity mention. Concepts without a
/// direct embedding fall back to the elementwise mean of their
/// underscore-split words when every word is present, and are dropped
/// otherwise. Missing entities yield an empty list.
pub fn lookup_concepts(
    index: &ConceptIndex,
    table: &EmbeddingTable,
    entity_mention: &str,
) -> Vec<(String, Vec<f64>)> {
    let normalized = normalize_entity(entity_mention);
    let mut out = Vec::new();
    for entry in index.concepts(&normalized) {
        let key = entry.concept.replace(' ', "_");
        if let Some(v) = table.get(&key) {
            out.push((entry.concept.clone(), v.to_vec()));
            continue;
        }
        let words: Vec<&str> = key.split('_').filter(|w| !w.is_empty()).collect();
        if words.len() > 1 && words.iter().all(|w| table.get(w).is_some()) {
            let mut mean = vec![0.0; table.dim()];
            for w in &words {
                for (m, x) in mean.iter_mut().zip(table.get(w).unwrap()) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= words.len() as f64;
            }
            out.push((entry.concept.clone(), mean));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn triples_ordered_by_confidence() {
        let f = write_tmp("Microsoft\tcompany\t0.9\nMicrosoft\tvendor\t0.5\n");
        let index = load_triples(f.path(), 8).unwrap();
        let concepts: Vec<&str> = index
            .concepts("microsoft")
            .iter()
            .map(|e| e.concept.as_str())
            .collect();
        assert_eq!(concepts, vec!["company", "vendor"]);
    }

    #[test]
    fn duplicate_lines_are_merged() {
        let f = write_tmp("A\tthing\t0.5\nA\tthing\t0.5\n");
        let index = load_triples(f.path(), 8).unwrap();
        assert_eq!(index.concepts("a").len(), 1);
    }

    #[test]
    fn cap_keeps_highest_confidence() {
        let f = write_tmp("E\tlow\t0.1\nE\thigh\t0.9\nE\tmid\t0.5\n");
        let index = load_triples(f.path(), 1).unwrap();
        let concepts = index.concepts("e");
        assert_eq!(concepts.len(), 1);
        assert_eq!(concepts[0].concept, "high");
    }

    #[test]
    fn empty_file_is_an_empty_index() {
        let f = write_tmp("");
        let index = load_triples(f.path(), 8).unwrap();
        assert!(index.is_empty());
    }

    #[test]
    fn bad_confidence_names_the_line() {
        let f = write_tmp("A\tthing\t0.5\nB\tthing\tnotanumber\n");
        let err = load_triples(f.path(), 8).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn embeddings_load_and_match_rows() {
        let f = write_tmp("3 4\nperson 1.0 2.5 -0.125 0.0\nchief 1 0 0 0\nexecutive 0 1 0 0\n");
        let table = load_embeddings(f.path()).unwrap();
        assert_eq!(table.dim(), 4);
        assert_eq!(table.get("person").unwrap(), &[1.0, 2.5, -0.125, 0.0]);
    }

    #[test]
    fn wrong_arity_names_the_line() {
        let f = write_tmp("2 4\nok 1 2 3 4\nshort 1 2 3\n");
        let err = load_embeddings(f.path()).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn lookup_returns_candidates_in_index_order() {
        let triples = write_tmp("Microsoft\tcompany\t0.9\nMicrosoft\tvendor\t0.5\n");
        let emb = write_tmp("2 2\ncompany 1 0\nvendor 0 1\n");
        let index = load_triples(triples.path(), 8).unwrap();
        let table = load_embeddings(emb.path()).unwrap();
        let got = lookup_concepts(&index, &table, "Microsoft");
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, "company");
        assert_eq!(got[0].1, vec![1.0, 0.0]);
        assert_eq!(got[1].0, "vendor");
    }

    #[test]
    fn unknown_entity_is_empty() {
        let index = ConceptIndex::new(8);
        let table = EmbeddingTable::new(2);
        assert!(lookup_concepts(&index, &table, "zzz").is_empty());
    }

    #[test]
    fn multiword_concept_falls_back_to_word_average() {
        let triples = write_tmp("Satya\tchief_executive\t0.9\nSatya\tmars rover\t0.8\n");
        let emb = write_tmp("2 2\nchief 1.0 3.0\nexecutive 3.0 5.0\n");
        let index = load_triples(triples.path(), 8).unwrap();
        let table = load_embeddings(emb.path()).unwrap();
        let got = lookup_concepts(&index, &table, "Satya");
        // mars rover has no embedding at all and is dropped.
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, "chief_executive");
        // Oracle: elementwise mean of the two file rows.
        assert_eq!(got[0].1, vec![(1.0 + 3.0) / 2.0, (3.0 + 5.0) / 2.0]);
    }

    #[test]
    fn lookup_is_stable_across_calls() {
        let triples = write_tmp("X\ta\t0.5\nX\tb\t0.5\nX\tc\t0.5\n");
        let emb = write_tmp("3 2\na 1 0\nb 0 1\nc 1 1\n");
        let index = load_triples(triples.path(), 8).unwrap();
        let table = load_embeddings(emb.path()).unwrap();
        let first = lookup_concepts(&index, &table, "X");
        for _ in 0..5 {
            assert_eq!(lookup_concepts(&index, &table, "X"), first);
        }
    }
}
