//! Knowledge base storage and candidate/aspect extraction.
//!
//! Entities and relations are re-indexed in ascending order of their string
//! ids, so index order and id order coincide.

mod candidates;
mod context;
mod paths;

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::text::tokenize;

pub use candidates::{build_candidates, CandidateAnswer};
pub use context::{extract_context, lcs_alignment, lcs_len, ContextQuery};
pub use paths::{extract_answer_path, khop_candidates, AnswerPath};

pub type EntityIx = usize;
pub type RelationIx = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub neighbor: EntityIx,
    pub relation: RelationIx,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    pub name: String,
    pub name_tokens: Vec<String>,
    pub type_label: String,
    pub type_tokens: Vec<String>,
    pub is_literal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationRecord {
    pub id: String,
    pub full_name: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    entities: Vec<EntityRecord>,
    relations: Vec<RelationRecord>,
    entity_index: HashMap<String, EntityIx>,
    relation_index: HashMap<String, RelationIx>,
    adjacency: Vec<Vec<Edge>>,
    triple_count: usize,
}

/// Final dot-segment of a hierarchical relation name, split into words.
pub fn lowest_level_words(full_name: &str) -> Result<Vec<String>> {
    let last = full_name.rsplit('.').next().unwrap_or("");
    let words: Vec<String> = last
        .split('_')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    if words.is_empty() {
        return Err(Error::Kb(format!(
            "relation name {full_name:?} has no words"
        )));
    }
    Ok(words)
}

/// Type token used when a topic mention is delexicalized: the final
/// dot-segment of the entity's type label.
pub fn type_placeholder(type_label: &str) -> String {
    type_label
        .rsplit('.')
        .next()
        .unwrap_or(type_label)
        .to_lowercase()
}

/// Programmatic construction with the same validation as file loading.
#[derive(Clone, Debug, Default)]
pub struct KbBuilder {
    entities: BTreeMap<String, (String, String, bool)>,
    relations: BTreeMap<String, String>,
    triples: Vec<(String, String, String)>,
    declare_relations: bool,
}

impl KbBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(
        &mut self,
        id: &str,
        name: &str,
        type_label: &str,
        literal: bool,
    ) -> Result<&mut Self> {
        if self.entities.contains_key(id) {
            return Err(Error::Kb(format!("duplicate entity id `{id}`")));
        }
        self.entities.insert(
            id.to_string(),
            (name.to_string(), type_label.to_string(), literal),
        );
        Ok(self)
    }

    /// Declare a relation. Once any relation is declared, triples may only
    /// use declared relations; otherwise relations are implied by triples
    /// and their id doubles as full name.
    pub fn relation(&mut self, id: &str, full_name: &str) -> Result<&mut Self> {
        if self.relations.contains_key(id) {
            return Err(Error::Kb(format!("duplicate relation id `{id}`")));
        }
        self.declare_relations = true;
        self.relations.insert(id.to_string(), full_name.to_string());
        Ok(self)
    }

    pub fn triple(&mut self, s: &str, r: &str, o: &str) -> &mut Self {
        self.triples
            .push((s.to_string(), r.to_string(), o.to_string()));
        self
    }

    fn check_triple(&self, s: &str, r: &str, o: &str) -> std::result::Result<(), String> {
        for e in [s, o] {
            if !self.entities.contains_key(e) {
                return Err(format!("unknown entity `{e}`"));
            }
        }
        if self.declare_relations && !self.relations.contains_key(r) {
            return Err(format!("unknown relation `{r}`"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<KnowledgeBase> {
        let mut relations = self.relations.clone();
        for (i, (s, r, o)) in self.triples.iter().enumerate() {
            self.check_triple(s, r, o)
                .map_err(|m| Error::Kb(format!("triple {}: {m}", i + 1)))?;
            if !self.declare_relations {
                relations.entry(r.clone()).or_insert_with(|| r.clone());
            }
        }
        let mut entities = Vec::with_capacity(self.entities.len());
        for (id, (name, type_label, literal)) in &self.entities {
            let type_label = if *literal {
                let n = name.trim().to_lowercase();
                if n == "true" || n == "false" {
                    "bool"
                } else {
                    "num"
                }
                .to_string()
            } else {
                type_label.clone()
            };
            entities.push(EntityRecord {
                id: id.clone(),
                name: name.clone(),
                name_tokens: tokenize(name),
                type_tokens: tokenize(&type_label),
                type_label,
                is_literal: *literal,
            });
        }
        let relations: Vec<RelationRecord> = relations
            .into_iter()
            .map(|(id, full_name)| {
                Ok(RelationRecord {
                    words: lowest_level_words(&full_name)?,
                    id,
                    full_name,
                })
            })
            .collect::<Result<_>>()?;
        let entity_index: HashMap<String, EntityIx> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let relation_index: HashMap<String, RelationIx> = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let mut adjacency = vec![Vec::new(); entities.len()];
        for (s, r, o) in &self.triples {
            let (s, r, o) = (entity_index[s], relation_index[r], entity_index[o]);
            adjacency[s].push(Edge {
                neighbor: o,
                relation: r,
                direction: Direction::Out,
            });
            adjacency[o].push(Edge {
                neighbor: s,
                relation: r,
                direction: Direction::In,
            });
        }
        for adj in &mut adjacency {
            adj.sort();
            adj.dedup();
        }
        Ok(KnowledgeBase {
            entities,
            relations,
            entity_index,
            relation_index,
            adjacency,
            triple_count: self.triples.len(),
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TypeField {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
struct EntityLine {
    id: String,
    name: String,
    #[serde(rename = "type", default)]
    type_field: Option<TypeField>,
    #[serde(default)]
    literal: bool,
}

#[derive(Deserialize)]
struct RelationLine {
    id: String,
    full_name: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Kb(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Load from JSON-lines entities, optional JSON-lines relation metadata,
/// and tab-separated triples.
pub fn load_kb(entities: &Path, relations: Option<&Path>, triples: &Path) -> Result<KnowledgeBase> {
    let mut b = KbBuilder::new();
    for (line, text) in read_lines(entities)? {
        let e: EntityLine = serde_json::from_str(&text)
            .map_err(|err| parse_err(entities, line, err.to_string()))?;
        let type_label = match e.type_field {
            Some(TypeField::One(t)) => t,
            Some(TypeField::Many(ts)) => ts.into_iter().next().unwrap_or_default(),
            None => String::new(),
        };
        if type_label.is_empty() && !e.literal {
            return Err(parse_err(
                entities,
                line,
                format!("entity `{}` has no type", e.id),
            ));
        }
        b.entity(&e.id, &e.name, &type_label, e.literal)
            .map_err(|err| parse_err(entities, line, err.to_string()))?;
    }
    if let Some(rel_path) = relations {
        for (line, text) in read_lines(rel_path)? {
            let r: RelationLine = serde_json::from_str(&text)
                .map_err(|err| parse_err(rel_path, line, err.to_string()))?;
            lowest_level_words(&r.full_name)
                .map_err(|err| parse_err(rel_path, line, err.to_string()))?;
            b.relation(&r.id, &r.full_name)
                .map_err(|err| parse_err(rel_path, line, err.to_string()))?;
        }
    }
    for (line, text) in read_lines(triples)? {
        let parts: Vec<&str> = text.split('\t').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(parse_err(
                triples,
                line,
                "expected subject<TAB>relation<TAB>object",
            ));
        }
        b.check_triple(parts[0], parts[1], parts[2])
            .map_err(|m| parse_err(triples, line, m))?;
        if relations.is_none() {
            lowest_level_words(parts[1])
                .map_err(|err| parse_err(triples, line, err.to_string()))?;
        }
        b.triple(parts[0], parts[1], parts[2]);
    }
    let kb = b.build()?;
    log::info!(
        "loaded {} entities, {} relations, {} triples",
        kb.num_entities(),
        kb.num_relations(),
        kb.num_triples()
    );
    Ok(kb)
}

/// Load `entities.jsonl`, `relations.jsonl` (when present) and
/// `triples.tsv` from one directory.
pub fn load_kb_dir(dir: &Path) -> Result<KnowledgeBase> {
    let rel = dir.join("relations.jsonl");
    load_kb(
        &dir.join("entities.jsonl"),
        rel.exists().then_some(rel.as_path()),
        &dir.join("triples.tsv"),
    )
}

impl KnowledgeBase {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triple_count
    }

    pub fn entity(&self, e: EntityIx) -> &EntityRecord {
        &self.entities[e]
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn relation(&self, r: RelationIx) -> &RelationRecord {
        &self.relations[r]
    }

    pub fn relations(&self) -> &[RelationRecord] {
        &self.relations
    }

    pub fn entity_ix(&self, id: &str) -> Option<EntityIx> {
        self.entity_index.get(id).copied()
    }

    pub fn relation_ix(&self, id: &str) -> Option<RelationIx> {
        self.relation_index.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<EntityIx> {
        self.entity_ix(id)
            .ok_or_else(|| Error::Kb(format!("unknown entity `{id}`")))
    }

    /// Edges sorted by (neighbor, relation, direction).
    pub fn edges(&self, e: EntityIx) -> &[Edge] {
        &self.adjacency[e]
    }

    pub fn out_degree(&self, e: EntityIx) -> usize {
        self.adjacency[e]
            .iter()
            .filter(|x| x.direction == Direction::Out)
            .count()
    }

    pub fn in_degree(&self, e: EntityIx) -> usize {
        self.adjacency[e]
            .iter()
            .filter(|x| x.direction == Direction::In)
            .count()
    }

    /// Distinct undirected neighbors in index order.
    pub fn neighbors(&self, e: EntityIx) -> Vec<EntityIx> {
        let mut n: Vec<EntityIx> = self.adjacency[e].iter().map(|x| x.neighbor).collect();
        n.dedup();
        n
    }

    /// Whether `a` and `b` are joined by relation `r` in either direction.
    pub fn connected_by(&self, a: EntityIx, r: RelationIx, b: EntityIx) -> bool {
        self.adjacency[a]
            .iter()
            .any(|x| x.neighbor == b && x.relation == r)
    }

    /// Distinct type labels, sorted.
    pub fn type_labels(&self) -> Vec<String> {
        let mut t: Vec<String> = self.entities.iter().map(|e| e.type_label.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Write `entities.jsonl`, `relations.jsonl` and `triples.tsv` in the
    /// layout read by [`load_kb_dir`].
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut ents = String::new();
        for e in &self.entities {
            let line = if e.is_literal {
                serde_json::json!({ "id": e.id, "name": e.name, "literal": true })
            } else {
                serde_json::json!({ "id": e.id, "name": e.name, "type": e.type_label })
            };
            ents.push_str(&format!("{line}\n"));
        }
        let mut rels = String::new();
        for r in &self.relations {
            rels.push_str(&format!(
                "{}\n",
                serde_json::json!({ "id": r.id, "full_name": r.full_name })
            ));
        }
        let mut triples = String::new();
        for (s, edges) in self.adjacency.iter().enumerate() {
            for x in edges.iter().filter(|x| x.direction == Direction::Out) {
                let (e, r, o) = (
                    &self.entities[s].id,
                    &self.relations[x.relation].id,
                    &self.entities[x.neighbor].id,
                );
                triples.push_str(&format!("{e}\t{r}\t{o}\n"));
            }
        }
        std::fs::write(dir.join("entities.jsonl"), ents)?;
        std::fs::write(dir.join("relations.jsonl"), rels)?;
        std::fs::write(dir.join("triples.tsv"), triples)?;
        Ok(())
    }
}

/// The government-office example: Ohio reaches Jon A. Husted through an
/// office-term node carrying a title and a start date.
pub fn ohio_example() -> KnowledgeBase {
    let mut b = KbBuilder::new();
    let ents = [
        ("m.ohio", "Ohio", "location.us_state", false),
        ("m.husted", "Jon A. Husted", "people.person", false),
        (
            "m.term1",
            "government position held",
            "government.government_position_held",
            false,
        ),
        (
            "m.sos",
            "secretary of state",
            "government.government_office_or_title",
            false,
        ),
        ("m.date1", "2011-01-09", "", true),
        ("m.columbus", "Columbus", "location.citytown", false),
        ("m.kasich", "John Kasich", "people.person", false),
        (
            "m.term2",
            "government position held",
            "government.government_position_held",
            false,
        ),
        (
            "m.gov",
            "governor",
            "government.government_office_or_title",
            false,
        ),
        ("m.date2", "2011-01-10", "", true),
    ];
    for (id, name, ty, lit) in ents {
        b.entity(id, name, ty, lit).expect("unique ids");
    }
    for (id, full) in [
        (
            "governing_officials",
            "government.governmental_jurisdiction.governing_officials",
        ),
        (
            "office_holder",
            "government.government_position_held.office_holder",
        ),
        (
            "basic_title",
            "government.government_position_held.basic_title",
        ),
        ("from", "government.government_position_held.from"),
        ("capital", "location.us_state.capital"),
    ] {
        b.relation(id, full).expect("unique ids");
    }
    b.triple("m.ohio", "governing_officials", "m.term1")
        .triple("m.term1", "office_holder", "m.husted")
        .triple("m.term1", "basic_title", "m.sos")
        .triple("m.term1", "from", "m.date1")
        .triple("m.ohio", "governing_officials", "m.term2")
        .triple("m.term2", "office_holder", "m.kasich")
        .triple("m.term2", "basic_title", "m.gov")
        .triple("m.term2", "from", "m.date2")
        .triple("m.ohio", "capital", "m.columbus");
    b.build().expect("consistent example")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn lowest_level_relation_words() {
        assert_eq!(
            lowest_level_words("government.governing_officials").unwrap(),
            ["governing", "officials"]
        );
        assert_eq!(lowest_level_words("a.b.c").unwrap(), ["c"]);
        assert_eq!(
            lowest_level_words("office_holder").unwrap(),
            ["office", "holder"]
        );
        assert!(lowest_level_words("").is_err());
    }

    #[test]
    fn two_entities_one_triple() {
        let mut b = KbBuilder::new();
        b.entity("s", "S", "t", false).unwrap();
        b.entity("o", "O", "t", false).unwrap();
        b.triple("s", "a.r", "o");
        let kb = b.build().unwrap();
        let (s, o) = (kb.resolve("s").unwrap(), kb.resolve("o").unwrap());
        assert_eq!((kb.out_degree(s), kb.in_degree(s)), (1, 0));
        assert_eq!((kb.out_degree(o), kb.in_degree(o)), (0, 1));
    }

    #[test]
    fn literal_types() {
        let mut b = KbBuilder::new();
        b.entity("x", "True", "ignored", true).unwrap();
        b.entity("y", "1984", "", true).unwrap();
        let kb = b.build().unwrap();
        assert_eq!(kb.entity(0).type_label, "bool");
        assert_eq!(kb.entity(1).type_label, "num");
    }

    #[test]
    fn loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let ents = dir.path().join("entities.jsonl");
        let trip = dir.path().join("triples.tsv");
        let mut f = std::fs::File::create(&ents).unwrap();
        writeln!(f, r#"{{"id":"a","name":"A","type":["x.t","y.u"]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","name":"B","type":"x.t"}}"#).unwrap();
        std::fs::write(&trip, "a\tr.s\tb\n\nb\tr.s\tzz\n").unwrap();
        match load_kb(&ents, None, &trip) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("zz"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&trip, "").unwrap();
        let kb = load_kb(&ents, None, &trip).unwrap();
        assert_eq!(kb.entity(0).type_label, "x.t");
        assert!(khop_candidates(&kb, 0, 2).unwrap().is_empty());

        writeln!(f, r#"{{"id":"a","name":"A2","type":"x.t"}}"#).unwrap();
        assert!(matches!(
            load_kb(&ents, None, &trip),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn save_dir_round_trip() {
        let kb = ohio_example();
        let dir = tempfile::tempdir().unwrap();
        kb.save_dir(dir.path()).unwrap();
        let back = load_kb_dir(dir.path()).unwrap();
        assert_eq!(back.entities(), kb.entities());
        assert_eq!(back.relations(), kb.relations());
        for e in 0..kb.num_entities() {
            assert_eq!(back.edges(e), kb.edges(e));
        }
    }

    #[test]
    fn ohio_example_reaches_husted() {
        let kb = ohio_example();
        let ohio = kb.resolve("m.ohio").unwrap();
        let husted = kb.resolve("m.husted").unwrap();
        let cands = khop_candidates(&kb, ohio, 2).unwrap();
        assert!(cands.contains(&husted));
        assert!(!khop_candidates(&kb, ohio, 1).unwrap().contains(&husted));
    }
}
