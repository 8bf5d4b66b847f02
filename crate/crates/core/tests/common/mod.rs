//! Graph builders and small models shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use star_kgc::encoder::{EncoderConfig, StarConfig, StarModel};
use star_kgc::kg::{load_graph, DatasetPaths, GraphBuilder, KnowledgeGraph, Split};
use star_kgc::tensor::Real;
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};

pub fn umls_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls")
}

pub fn umls() -> KnowledgeGraph {
    load_graph(&DatasetPaths::from_dir(&umls_dir()).expect("umls paths")).expect("umls loads")
}

/// Entities fall into `groups` equal groups; relation `j` links every entity
/// of group `g` to `fanout` random members of group `g + j + 1`. Triples are
/// shuffled and split 80/10/10.
pub fn grouped_graph(
    entities: usize,
    groups: usize,
    relations: usize,
    fanout: usize,
    seed: u64,
) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = entities / groups;
    let mut triples = Vec::new();
    for e in 0..entities {
        let g = e % groups;
        for j in 0..relations {
            let target = (g + j + 1) % groups;
            for _ in 0..fanout {
                let t = target + groups * rng.gen_range(0..size);
                triples.push((format!("e{e}"), format!("r{j}"), format!("e{t}")));
            }
        }
    }
    triples.sort();
    triples.dedup();
    triples.shuffle(&mut rng);
    let n = triples.len();
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    let texts = (0..entities)
        .map(|e| (format!("e{e}"), format!("item {e} group {}", e % groups)))
        .collect();
    GraphBuilder::new()
        .split_owned(Split::Train, triples[..a].to_vec())
        .split_owned(Split::Dev, triples[a..b].to_vec())
        .split_owned(Split::Test, triples[b..].to_vec())
        .entity_texts(texts)
        .build()
}

/// Random graph with at most `max_entities` entities and 1-3 relations.
pub fn random_graph<R: Rng>(rng: &mut R, max_entities: usize) -> KnowledgeGraph {
    let n = rng.gen_range(2..=max_entities);
    let n_rel = rng.gen_range(1..=3);
    let n_triples = rng.gen_range(1..=3 * n);
    let draw = |rng: &mut R| {
        (0..rng.gen_range(1..=n_triples))
            .map(|_| {
                (
                    format!("e{}", rng.gen_range(0..n)),
                    format!("r{}", rng.gen_range(0..n_rel)),
                    format!("e{}", rng.gen_range(0..n)),
                )
            })
            .collect::<Vec<_>>()
    };
    let train = draw(rng);
    let test = draw(rng);
    GraphBuilder::new()
        .split_owned(Split::Train, train)
        .split_owned(Split::Test, test)
        .entities((0..n).map(|i| format!("e{i}")))
        .build()
}

/// A few medical facts, enough for smoke tests of the text models.
pub fn toy_graph() -> KnowledgeGraph {
    GraphBuilder::new()
        .split(
            Split::Train,
            &[
                ("aspirin", "treats", "headache"),
                ("ibuprofen", "treats", "fever"),
                ("aspirin", "is a", "drug"),
                ("ibuprofen", "is a", "drug"),
                ("headache", "is a", "symptom"),
                ("fever", "is a", "symptom"),
                ("paracetamol", "is a", "drug"),
            ],
        )
        .split(Split::Dev, &[("paracetamol", "treats", "headache")])
        .split(
            Split::Test,
            &[
                ("paracetamol", "treats", "fever"),
                ("aspirin", "treats", "fever"),
            ],
        )
        .build()
}

pub fn small_config(d_h: usize, layers: usize, seed: u64) -> StarConfig {
    StarConfig {
        encoder: EncoderConfig {
            d_h,
            n_layers: layers,
            n_heads: 2,
            d_ff: 2 * d_h,
            max_len_hr: 16,
            max_len_t: 16,
            seed,
            ..EncoderConfig::default()
        },
        ..StarConfig::default()
    }
}

pub fn small_model<T: Real>(
    kg: &KnowledgeGraph,
    d_h: usize,
    layers: usize,
    seed: u64,
) -> (StarModel<T>, TokenizedTexts) {
    let vocab = Vocabulary::from_train(kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let model = StarModel::new(small_config(d_h, layers, seed), vocab).expect("valid config");
    (model, texts)
}
