//! Generalization probes derived from an existing graph.
//!
//! * `probe1` keeps train and restricts test to triples with an entity never
//!   seen in training.
//! * `probe2` removes a sample of test entities from training; training
//!   triples touching exactly one removed entity form a support set for
//!   inductive completion of graph embeddings.
//! * `probe3` restricts test to triples whose head, relation and tail all
//!   occur in training.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityId, KnowledgeGraph, Triple};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Probe1,
    Probe2,
    Probe3,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe1" | "1" => Ok(ProbeKind::Probe1),
            "probe2" | "2" => Ok(ProbeKind::Probe2),
            "probe3" | "3" => Ok(ProbeKind::Probe3),
            other => Err(Error::Config(format!("unknown probe kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub seed: u64,
    /// Number of test entities removed from training (probe2 only).
    pub n_removed: usize,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub graph: KnowledgeGraph,
    /// Training triples with exactly one removed entity (probe2 only).
    pub support: Vec<Triple>,
    /// Training triples whose both entity slots hold removed entities.
    pub discarded: Vec<Triple>,
    pub removed: Vec<EntityId>,
}

pub fn build_probe(kg: &KnowledgeGraph, spec: &ProbeSpec) -> Result<ProbeOutcome> {
    let outcome = match spec.kind {
        ProbeKind::Probe1 => {
            let test: Vec<Triple> = kg
                .test()
                .iter()
                .filter(|t| !kg.entity_seen_in_train(t.head) || !kg.entity_seen_in_train(t.tail))
                .copied()
                .collect();
            ProbeOutcome {
                graph: kg.with_splits(kg.train().to_vec(), kg.dev().to_vec(), test, &[]),
                support: Vec::new(),
                discarded: Vec::new(),
                removed: Vec::new(),
            }
        }
        ProbeKind::Probe3 => {
            let test: Vec<Triple> = kg
                .test()
                .iter()
                .filter(|t| !kg.unseen_in_train(t).any())
                .copied()
                .collect();
            ProbeOutcome {
                graph: kg.with_splits(kg.train().to_vec(), kg.dev().to_vec(), test, &[]),
                support: Vec::new(),
                discarded: Vec::new(),
                removed: Vec::new(),
            }
        }
        ProbeKind::Probe2 => probe2(kg, spec)?,
    };
    if outcome.graph.test().is_empty() {
        return Err(Error::EmptyProbe(format!("{:?}", spec.kind).to_lowercase()));
    }
    Ok(outcome)
}

fn probe2(kg: &KnowledgeGraph, spec: &ProbeSpec) -> Result<ProbeOutcome> {
    if spec.n_removed >= kg.num_entities() {
        return Err(Error::Config(format!(
            "probe2 needs n_removed < |E| ({} >= {})",
            spec.n_removed,
            kg.num_entities()
        )));
    }
    let mut pool: Vec<EntityId> = kg
        .test()
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    pool.sort();
    if spec.n_removed > pool.len() {
        return Err(Error::Config(format!(
            "probe2 asks for {} entities but test mentions only {}",
            spec.n_removed,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut removed: Vec<EntityId> = pool
        .choose_multiple(&mut rng, spec.n_removed)
        .copied()
        .collect();
    removed.sort();
    let removed_set: HashSet<EntityId> = removed.iter().copied().collect();
    let hits = |t: &Triple| {
        usize::from(removed_set.contains(&t.head)) + usize::from(removed_set.contains(&t.tail))
    };

    let mut train = Vec::new();
    let mut support = Vec::new();
    let mut discarded = Vec::new();
    for t in kg.train() {
        match hits(t) {
            0 => train.push(*t),
            1 => support.push(*t),
            _ => discarded.push(*t),
        }
    }
    let test: Vec<Triple> = kg.test().iter().filter(|t| hits(t) > 0).copied().collect();
    let dev: Vec<Triple> = kg.dev().iter().filter(|t| hits(t) == 0).copied().collect();
    let mut known = support.clone();
    known.extend_from_slice(&discarded);
    Ok(ProbeOutcome {
        graph: kg.with_splits(train, dev, test, &known),
        support,
        discarded,
        removed,
    })
}
