//! Predicted attention cost of ranking with a cross-encoder versus the
//! Siamese model, and the encoder calls both actually make on UMLS.
//!
//! cargo run --release --example cost_report -- [test-triples]

use std::path::PathBuf;

use star_kgc::encoder::{EncoderConfig, StarConfig, StarModel};
use star_kgc::eval::{
    build_queries, evaluate_queries, one_triple_ratio, predicted_cost, whole_graph_ratio,
    CrossScorer, EvalOptions, StarScorer, Strategy,
};
use star_kgc::kg::{load_graph, DatasetPaths, Direction};
use star_kgc::scoring::CrossEncoder;
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};

fn main() -> star_kgc::Result<()> {
    let n = std::env::args()
        .nth(1)
        .map_or(20, |a| a.parse().expect("test-triples must be a number"));
    let l = 64.0;
    for (name, entities, relations) in [
        ("UMLS", 135.0, 46.0),
        ("WN18RR", 40_943.0, 11.0),
        ("FB15k-237", 14_541.0, 237.0),
    ] {
        let q = entities * relations;
        println!(
            "{name:<10} whole graph: cross {:.3e} vs siamese {:.3e} (ratio {:.1}); one triple ratio {:.3}",
            predicted_cost(Strategy::Cross, l, entities, q),
            predicted_cost(Strategy::Siamese, l, entities, q),
            whole_graph_ratio(l, entities, relations),
            one_triple_ratio(l, entities)
        );
    }

    // untrained small models: the call counts do not depend on the weights
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;
    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let encoder = EncoderConfig {
        d_h: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..EncoderConfig::default()
    };
    let star: StarModel<f32> = StarModel::new(
        StarConfig {
            encoder: encoder.clone(),
            ..StarConfig::default()
        },
        vocab.clone(),
    )?;
    let cross: CrossEncoder<f32> = CrossEncoder::new(encoder, vocab)?;
    let queries = build_queries(
        &kg.test()[..n.min(kg.test().len())],
        &[Direction::PredictTail],
    );
    let options = EvalOptions {
        directions: vec![Direction::PredictTail],
        ..EvalOptions::default()
    };
    let s = evaluate_queries(&mut StarScorer::new(&star, &texts), &kg, &queries, &options)?
        .report
        .cost;
    let c = evaluate_queries(
        &mut CrossScorer::new(&cross, &texts),
        &kg,
        &queries,
        &options,
    )?
    .report
    .cost;
    println!("{} tail queries on UMLS:", queries.len());
    println!(
        "  siamese: {:>7} encoder calls, sum of squared lengths {}",
        s.encoder_calls, s.siamese_sq_len
    );
    println!(
        "  cross:   {:>7} encoder calls, sum of squared lengths {}",
        c.encoder_calls, c.cross_sq_len
    );
    println!(
        "  measured ratio {:.1}",
        c.cross_sq_len as f64 / s.siamese_sq_len as f64
    );
    Ok(())
}
