//! Train a tiny model on a handful of facts, rank the tails of one query and
//! reload the model from a checkpoint.
//!
//! cargo run --release --example quickstart

use star_kgc::encoder::{EncoderConfig, StarConfig, StarModel};
use star_kgc::eval::{CostCounter, EvalOptions, LinkScorer, RankingQuery, StarScorer};
use star_kgc::io::{load_star, save_star};
use star_kgc::kg::{Direction, GraphBuilder, Split, Triple};
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{train_star, TrainConfig};

fn main() -> star_kgc::Result<()> {
    let kg = GraphBuilder::new()
        .split(
            Split::Train,
            &[
                ("aspirin", "treats", "headache"),
                ("ibuprofen", "treats", "fever"),
                ("ibuprofen", "treats", "headache"),
                ("aspirin", "is a", "drug"),
                ("ibuprofen", "is a", "drug"),
                ("paracetamol", "is a", "drug"),
                ("headache", "is a", "symptom"),
                ("fever", "is a", "symptom"),
            ],
        )
        .split(Split::Test, &[("paracetamol", "treats", "fever")])
        .build();

    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let config = StarConfig {
        encoder: EncoderConfig {
            d_h: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..EncoderConfig::default()
        },
        ..StarConfig::default()
    };
    let mut model: StarModel<f32> = StarModel::new(config, vocab)?;
    let train = TrainConfig {
        epochs: 60,
        batch_size: 4,
        n_negatives: 3,
        learning_rate: 5e-3,
        dropout: 0.0,
        dev_eval: false,
        ..TrainConfig::default()
    };
    train_star(&mut model, &kg, &texts, &train, &mut |log, _| {
        if log.epoch % 20 == 0 {
            println!("epoch {:>2}: loss {:.4}", log.epoch, log.loss);
        }
        Ok(())
    })?;

    let id = |k: &str| kg.entity_id(k).expect("known entity");
    let query = RankingQuery {
        index: 0,
        triple: Triple::new(
            id("paracetamol"),
            kg.relation_id("treats").expect("known relation"),
            id("fever"),
        ),
        direction: Direction::PredictTail,
    };
    let mut scorer = StarScorer::new(&model, &texts);
    let cost = CostCounter::new();
    scorer.prepare(&[query], &EvalOptions::default(), &cost)?;
    let all: Vec<_> = kg.entity_ids().collect();
    let scores = scorer.score_all(&query, &all, &cost)?;
    let mut ranked: Vec<_> = all
        .iter()
        .map(|&e| (kg.entity_key(e), scores[e.index()]))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("(paracetamol, treats, ?):");
    for (name, s) in ranked {
        println!("  {s:.3}  {name}");
    }
    println!("encoder calls: {}", cost.encoder_calls());

    let path = std::env::temp_dir().join("star_kgc_quickstart.ckpt");
    save_star(&model, &path)?;
    let back: StarModel<f32> = load_star(&path)?;
    assert_eq!(back.store().checksum(), model.store().checksum());
    println!(
        "checkpoint {} reloads with checksum {}",
        path.display(),
        back.store().checksum()
    );
    Ok(())
}
