use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Entity, EntityId, EntityKind, KnowledgeGraph, RelationId, Triple};
use crate::error::{Error, Result};

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";

const ENTITIES_HEADER: &str = "#entities v1";
const TRIPLES_HEADER: &str = "#triples v1";

/// Loads `entities.tsv` and `triples.tsv` from a directory.
pub fn load_graph_dir(dir: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    load_graph(dir.join(ENTITIES_FILE), dir.join(TRIPLES_FILE))
}

pub fn load_graph(
    entities_path: impl AsRef<Path>,
    triples_path: impl AsRef<Path>,
) -> Result<KnowledgeGraph> {
    let (ep, tp) = (entities_path.as_ref(), triples_path.as_ref());
    let etext = fs::read_to_string(ep).map_err(|e| Error::io(ep, e))?;
    let ttext = fs::read_to_string(tp).map_err(|e| Error::io(tp, e))?;
    let entities = parse_entities(&etext, &ep.display().to_string())?;
    let (relations, triples) = parse_triples(&ttext, &tp.display().to_string(), &entities)?;
    KnowledgeGraph::new(entities, relations, triples)
}

/// Writes the canonical serialization of `graph` into `dir`.
pub fn save_graph(graph: &KnowledgeGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ep = dir.join(ENTITIES_FILE);
    fs::write(&ep, render_entities(graph)).map_err(|e| Error::io(&ep, e))?;
    let tp = dir.join(TRIPLES_FILE);
    fs::write(&tp, render_triples(graph)).map_err(|e| Error::io(&tp, e))?;
    Ok(())
}

pub(super) fn render_entities(graph: &KnowledgeGraph) -> String {
    let mut s = String::with_capacity(graph.n_entities() * 24);
    s.push_str(ENTITIES_HEADER);
    s.push('\n');
    for e in graph.entities() {
        let _ = writeln!(s, "{}\t{}\t{}", e.id, e.name, e.kind.as_str());
    }
    s
}

pub(super) fn render_triples(graph: &KnowledgeGraph) -> String {
    let mut s = String::with_capacity(graph.triples().len() * 16);
    s.push_str(TRIPLES_HEADER);
    s.push('\n');
    for t in graph.triples() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            t.head,
            graph.relations()[t.relation.index()],
            t.tail
        );
    }
    s
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn check_header(text: &str, header: &str, file: &str) -> Result<()> {
    match text.lines().next() {
        Some(first) if first.trim_end_matches('\r') == header => Ok(()),
        _ => Err(malformed(file, 1, format!("expected header `{header}`"))),
    }
}

fn parse_entities(text: &str, file: &str) -> Result<Vec<Entity>> {
    check_header(text, ENTITIES_HEADER, file)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(malformed(
                file,
                line,
                format!("expected 3 columns, found {}", cols.len()),
            ));
        }
        let id: u32 = cols[0]
            .parse()
            .map_err(|_| malformed(file, line, format!("bad id `{}`", cols[0])))?;
        if id as usize != out.len() {
            return Err(malformed(
                file,
                line,
                format!(
                    "ids must be dense and in file order: expected {}, found {id}",
                    out.len()
                ),
            ));
        }
        if cols[1].is_empty() {
            return Err(malformed(file, line, "empty name"));
        }
        let kind = match cols[2] {
            "disease" => EntityKind::Disease,
            "symptom" => EntityKind::Symptom,
            other => return Err(malformed(file, line, format!("unknown kind `{other}`"))),
        };
        out.push(Entity {
            id: EntityId(id),
            name: cols[1].to_string(),
            kind,
        });
    }
    Ok(out)
}

fn parse_triples(
    text: &str,
    file: &str,
    entities: &[Entity],
) -> Result<(Vec<String>, Vec<Triple>)> {
    check_header(text, TRIPLES_HEADER, file)?;
    let mut relations: Vec<String> = Vec::new();
    let mut rel_ids: HashMap<String, RelationId> = HashMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut triples = Vec::new();
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(malformed(
                file,
                line,
                format!("expected 3 columns, found {}", cols.len()),
            ));
        }
        let parse_id = |s: &str| -> Result<EntityId> {
            let id: u64 = s
                .parse()
                .map_err(|_| malformed(file, line, format!("bad entity id `{s}`")))?;
            if id as usize >= entities.len() {
                return Err(Error::DanglingEntity {
                    file: file.to_string(),
                    line,
                    id,
                });
            }
            Ok(EntityId(id as u32))
        };
        let head = parse_id(cols[0])?;
        let tail = parse_id(cols[2])?;
        let label = cols[1];
        if label.is_empty() {
            return Err(malformed(file, line, "empty relation label"));
        }
        let (hk, tk) = (entities[head.index()].kind, entities[tail.index()].kind);
        if hk != EntityKind::Symptom || tk != EntityKind::Disease {
            return Err(Error::EdgeDirection {
                file: file.to_string(),
                line,
                head_kind: hk,
                tail_kind: tk,
            });
        }
        let relation = *rel_ids.entry(label.to_string()).or_insert_with(|| {
            relations.push(label.to_string());
            RelationId(relations.len() as u32 - 1)
        });
        let t = Triple {
            head,
            relation,
            tail,
        };
        if !seen.insert(t) {
            return Err(Error::DuplicateTriple {
                file: file.to_string(),
                line,
                head: head.0 as u64,
                relation: label.to_string(),
                tail: tail.0 as u64,
            });
        }
        triples.push(t);
    }
    Ok((relations, triples))
}
