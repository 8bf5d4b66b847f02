//! Knowledge graphs with attached entity and relation text.
//!
//! A [`KnowledgeGraph`] owns the entity and relation registries, the three
//! evaluation splits, a [`TextCatalog`] and the filtered-truth index used by
//! link-prediction evaluation. It is immutable once built.

mod probe;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use probe::{build_probe, ProbeKind, ProbeOutcome, ProbeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }

    /// The entity left in place when `direction`'s slot is predicted.
    pub fn fixed(&self, direction: Direction) -> EntityId {
        match direction {
            Direction::PredictHead => self.tail,
            Direction::PredictTail => self.head,
        }
    }

    /// The entity occupying the predicted slot.
    pub fn target(&self, direction: Direction) -> EntityId {
        match direction {
            Direction::PredictHead => self.head,
            Direction::PredictTail => self.tail,
        }
    }

    /// Copy of this triple with the predicted slot replaced by `entity`.
    pub fn with_target(&self, direction: Direction, entity: EntityId) -> Triple {
        match direction {
            Direction::PredictHead => Triple::new(entity, self.rel, self.tail),
            Direction::PredictTail => Triple::new(self.head, self.rel, entity),
        }
    }
}

/// Which slot of a triple a link-prediction query asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PredictHead,
    PredictTail,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::PredictHead, Direction::PredictTail];

    pub fn code(self) -> u8 {
        match self {
            Direction::PredictHead => 0,
            Direction::PredictTail => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Direction> {
        match code {
            0 => Some(Direction::PredictHead),
            1 => Some(Direction::PredictTail),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Surface keys of one id space; ids are dense and contiguous from 0.
#[derive(Clone, Debug, Default)]
struct Interner {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    fn get(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    fn len(&self) -> usize {
        self.keys.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextCatalog {
    entity_text: Vec<String>,
    relation_text: Vec<String>,
}

impl TextCatalog {
    pub fn entity(&self, id: EntityId) -> &str {
        &self.entity_text[id.index()]
    }

    pub fn relation(&self, id: RelationId) -> &str {
        &self.relation_text[id.index()]
    }

    pub fn entities(&self) -> &[String] {
        &self.entity_text
    }

    pub fn relations(&self) -> &[String] {
        &self.relation_text
    }
}

/// Key of the filtered-truth index: the entity kept fixed, the relation and
/// the slot being predicted.
pub type TruthKey = (EntityId, RelationId, Direction);

/// Per-slot flags telling whether an element never occurs in training triples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnseenFlags {
    pub head: bool,
    pub relation: bool,
    pub tail: bool,
}

impl UnseenFlags {
    pub fn any(&self) -> bool {
        self.head || self.relation || self.tail
    }
}

/// Summary counts emitted as JSON by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub unseen_entities: usize,
    pub unseen_relations: usize,
    pub test_triples_with_unseen: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    train: Vec<Triple>,
    dev: Vec<Triple>,
    test: Vec<Triple>,
    texts: TextCatalog,
    truth: HashMap<TruthKey, BTreeSet<EntityId>>,
    train_set: HashSet<Triple>,
    seen_entities: Vec<bool>,
    seen_relations: Vec<bool>,
}

/// Paths of the five dataset files. Text files are optional; ids without a
/// text entry fall back to their surface key.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub entity_text: Option<PathBuf>,
    pub relation_text: Option<PathBuf>,
}

impl DatasetPaths {
    /// Resolves the usual benchmark layout inside `dir`: `train`, `dev` (or
    /// `valid`) and `test` with a `.tsv` or `.txt` extension, plus optional
    /// `entity2text` / `relation2text` files.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let find = |stems: &[&str]| -> Option<PathBuf> {
            for stem in stems {
                for ext in ["tsv", "txt"] {
                    let p = dir.join(format!("{stem}.{ext}"));
                    if p.is_file() {
                        return Some(p);
                    }
                }
            }
            None
        };
        let missing = |what: &str| {
            Error::io(
                dir.join(what),
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            )
        };
        Ok(DatasetPaths {
            train: find(&["train"]).ok_or_else(|| missing("train.tsv"))?,
            dev: find(&["dev", "valid"]).ok_or_else(|| missing("dev.tsv"))?,
            test: find(&["test"]).ok_or_else(|| missing("test.tsv"))?,
            entity_text: find(&["entity2text"]),
            relation_text: find(&["relation2text"]),
        })
    }
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_triples(path: &Path) -> Result<Vec<(String, String, String)>> {
    let content = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `head<TAB>relation<TAB>tail`, got {line:?}"),
            });
        }
        out.push((
            parts[0].trim().to_string(),
            parts[1].trim().to_string(),
            parts[2].trim().to_string(),
        ));
    }
    Ok(out)
}

fn parse_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let content = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let key = parts.next().unwrap_or("").trim();
        let fields: Vec<&str> = parts.map(str::trim).filter(|s| !s.is_empty()).collect();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `id<TAB>text`".into(),
            });
        }
        // `id<TAB>name<TAB>description` joins name and description with one space.
        out.push((key.to_string(), fields.join(" ")));
    }
    Ok(out)
}

/// Loads a graph from tab-separated triple files and optional text files.
///
/// Entities and relations that only occur in dev/test are registered and
/// reported by [`KnowledgeGraph::unseen_in_train`].
pub fn load_graph(paths: &DatasetPaths) -> Result<KnowledgeGraph> {
    let train = parse_triples(&paths.train)?;
    let dev = parse_triples(&paths.dev)?;
    let test = parse_triples(&paths.test)?;
    let entity_text = match &paths.entity_text {
        Some(p) => parse_texts(p)?,
        None => Vec::new(),
    };
    let relation_text = match &paths.relation_text {
        Some(p) => parse_texts(p)?,
        None => Vec::new(),
    };
    let kg = GraphBuilder::new()
        .split_owned(Split::Train, train)
        .split_owned(Split::Dev, dev)
        .split_owned(Split::Test, test)
        .entity_texts(entity_text)
        .relation_texts(relation_text)
        .build();
    log::info!(
        "loaded graph: {} entities, {} relations, {}/{}/{} triples",
        kg.num_entities(),
        kg.num_relations(),
        kg.train().len(),
        kg.dev().len(),
        kg.test().len()
    );
    Ok(kg)
}

/// Assembles a [`KnowledgeGraph`] from labelled triples.
#[derive(Default)]
pub struct GraphBuilder {
    splits: [Vec<(String, String, String)>; 3],
    entity_text: Vec<(String, String)>,
    relation_text: Vec<(String, String)>,
    extra_entities: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn split(mut self, split: Split, triples: &[(&str, &str, &str)]) -> Self {
        let owned = triples
            .iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect();
        self.splits[split_slot(split)] = owned;
        self
    }

    pub fn split_owned(mut self, split: Split, triples: Vec<(String, String, String)>) -> Self {
        self.splits[split_slot(split)] = triples;
        self
    }

    pub fn entity_texts(mut self, texts: Vec<(String, String)>) -> Self {
        self.entity_text = texts;
        self
    }

    pub fn relation_texts(mut self, texts: Vec<(String, String)>) -> Self {
        self.relation_text = texts;
        self
    }

    /// Registers entities that appear in no triple (they still act as candidates).
    pub fn entities<I: IntoIterator<Item = String>>(mut self, keys: I) -> Self {
        self.extra_entities.extend(keys);
        self
    }

    pub fn build(self) -> KnowledgeGraph {
        let mut entities = Interner::default();
        let mut relations = Interner::default();
        let mut split_triples: [Vec<Triple>; 3] = Default::default();
        let mut all: HashSet<Triple> = HashSet::new();
        let names = ["train", "dev", "test"];
        for (slot, raw) in self.splits.iter().enumerate() {
            let mut dups = 0usize;
            let mut overlap = 0usize;
            let mut local = HashSet::new();
            for (h, r, t) in raw {
                let tr = Triple::new(
                    EntityId(entities.intern(h)),
                    RelationId(relations.intern(r)),
                    EntityId(entities.intern(t)),
                );
                if !local.insert(tr) {
                    dups += 1;
                    continue;
                }
                if all.contains(&tr) {
                    overlap += 1;
                    continue;
                }
                all.insert(tr);
                split_triples[slot].push(tr);
            }
            if dups > 0 {
                log::warn!("{}: dropped {dups} duplicated triples", names[slot]);
            }
            if overlap > 0 {
                log::warn!(
                    "{}: dropped {overlap} triples already present in an earlier split",
                    names[slot]
                );
            }
        }
        for key in &self.extra_entities {
            entities.intern(key);
        }
        for (key, _) in &self.entity_text {
            entities.intern(key);
        }
        for (key, _) in &self.relation_text {
            relations.intern(key);
        }

        let texts = TextCatalog {
            entity_text: resolve_texts(&entities, &self.entity_text, "entity"),
            relation_text: resolve_texts(&relations, &self.relation_text, "relation"),
        };
        let [train, dev, test] = split_triples;
        KnowledgeGraph::assemble(entities, relations, train, dev, test, texts)
    }
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Dev => 1,
        Split::Test => 2,
    }
}

fn resolve_texts(registry: &Interner, given: &[(String, String)], kind: &str) -> Vec<String> {
    let mut out: Vec<Option<String>> = vec![None; registry.len()];
    for (key, text) in given {
        if let Some(id) = registry.get(key) {
            if !text.trim().is_empty() {
                out[id as usize] = Some(text.clone());
            }
        }
    }
    let mut missing = 0usize;
    let resolved = out
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.unwrap_or_else(|| {
                missing += 1;
                registry.keys[i].clone()
            })
        })
        .collect();
    if missing > 0 && !given.is_empty() {
        log::warn!("{missing} {kind} ids have no text entry; using their surface keys");
    }
    resolved
}

impl KnowledgeGraph {
    fn assemble(
        entities: Interner,
        relations: Interner,
        train: Vec<Triple>,
        dev: Vec<Triple>,
        test: Vec<Triple>,
        texts: TextCatalog,
    ) -> Self {
        let mut truth: HashMap<TruthKey, BTreeSet<EntityId>> = HashMap::new();
        for tr in train.iter().chain(&dev).chain(&test) {
            for dir in Direction::BOTH {
                truth
                    .entry((tr.fixed(dir), tr.rel, dir))
                    .or_default()
                    .insert(tr.target(dir));
            }
        }
        let mut seen_entities = vec![false; entities.len()];
        let mut seen_relations = vec![false; relations.len()];
        for tr in &train {
            seen_entities[tr.head.index()] = true;
            seen_entities[tr.tail.index()] = true;
            seen_relations[tr.rel.index()] = true;
        }
        let train_set = train.iter().copied().collect();
        KnowledgeGraph {
            entities,
            relations,
            train,
            dev,
            test,
            texts,
            truth,
            train_set,
            seen_entities,
            seen_relations,
        }
    }

    /// Same registries and texts with new splits; the truth index is rebuilt
    /// from the new splits plus `extra_known` triples.
    pub(crate) fn with_splits(
        &self,
        train: Vec<Triple>,
        dev: Vec<Triple>,
        test: Vec<Triple>,
        extra_known: &[Triple],
    ) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::assemble(
            self.entities.clone(),
            self.relations.clone(),
            train,
            dev,
            test,
            self.texts.clone(),
        );
        for tr in extra_known {
            for dir in Direction::BOTH {
                kg.truth
                    .entry((tr.fixed(dir), tr.rel, dir))
                    .or_default()
                    .insert(tr.target(dir));
            }
        }
        kg
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    pub fn entity_key(&self, id: EntityId) -> &str {
        &self.entities.keys[id.index()]
    }

    pub fn relation_key(&self, id: RelationId) -> &str {
        &self.relations.keys[id.index()]
    }

    pub fn entity_id(&self, key: &str) -> Option<EntityId> {
        self.entities.get(key).map(EntityId)
    }

    pub fn relation_id(&self, key: &str) -> Option<RelationId> {
        self.relations.get(key).map(RelationId)
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn dev(&self) -> &[Triple] {
        &self.dev
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn texts(&self) -> &TextCatalog {
        &self.texts
    }

    pub fn is_train_triple(&self, triple: &Triple) -> bool {
        self.train_set.contains(triple)
    }

    /// All known completions of `(fixed, rel, direction)` across the three splits.
    pub fn true_targets(
        &self,
        fixed: EntityId,
        rel: RelationId,
        direction: Direction,
    ) -> Option<&BTreeSet<EntityId>> {
        self.truth.get(&(fixed, rel, direction))
    }

    pub fn truth_index(&self) -> &HashMap<TruthKey, BTreeSet<EntityId>> {
        &self.truth
    }

    pub fn entity_seen_in_train(&self, id: EntityId) -> bool {
        self.seen_entities[id.index()]
    }

    pub fn relation_seen_in_train(&self, id: RelationId) -> bool {
        self.seen_relations[id.index()]
    }

    /// Flags every slot of `triple` whose element never occurs in train.
    pub fn unseen_in_train(&self, triple: &Triple) -> UnseenFlags {
        UnseenFlags {
            head: !self.entity_seen_in_train(triple.head),
            relation: !self.relation_seen_in_train(triple.rel),
            tail: !self.entity_seen_in_train(triple.tail),
        }
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.num_entities(),
            relations: self.num_relations(),
            train: self.train.len(),
            dev: self.dev.len(),
            test: self.test.len(),
            unseen_entities: self.seen_entities.iter().filter(|s| !**s).count(),
            unseen_relations: self.seen_relations.iter().filter(|s| !**s).count(),
            test_triples_with_unseen: self
                .test
                .iter()
                .filter(|t| self.unseen_in_train(t).any())
                .count(),
        }
    }

    /// Writes the splits and text catalog in the loader's tab-separated layout.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("train.tsv", self.format_triples(&self.train))?;
        write("dev.tsv", self.format_triples(&self.dev))?;
        write("test.tsv", self.format_triples(&self.test))?;
        write(
            "entity2text.tsv",
            self.entity_ids()
                .map(|e| format!("{}\t{}\n", self.entity_key(e), self.texts.entity(e)))
                .collect(),
        )?;
        write(
            "relation2text.tsv",
            self.relation_ids()
                .map(|r| format!("{}\t{}\n", self.relation_key(r), self.texts.relation(r)))
                .collect(),
        )?;
        Ok(())
    }

    pub(crate) fn format_triples(&self, ts: &[Triple]) -> String {
        ts.iter()
            .map(|t| {
                format!(
                    "{}\t{}\t{}\n",
                    self.entity_key(t.head),
                    self.relation_key(t.rel),
                    self.entity_key(t.tail)
                )
            })
            .collect()
    }
}
