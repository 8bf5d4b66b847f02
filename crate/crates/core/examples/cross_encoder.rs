//! Train the cross-encoder baseline and the Siamese model for the same number
//! of epochs on UMLS and rank a slice of test tails with both.
//!
//! cargo run --release --example cross_encoder -- [epochs] [test-triples]

use std::path::PathBuf;
use std::time::Instant;

use star_kgc::encoder::{StarConfig, StarModel};
use star_kgc::eval::{
    build_queries, evaluate_queries, CrossScorer, EvalOptions, EvalOutput, StarScorer,
};
use star_kgc::kg::{load_graph, DatasetPaths, Direction};
use star_kgc::scoring::CrossEncoder;
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{train_cross_encoder, train_star, TrainConfig};

fn show(name: &str, out: &EvalOutput, secs: f64) {
    let m = &out.report.overall;
    println!(
        "{name:<8} MRR {:.3}  Hits@10 {:.3}  encoder calls {:>6}  ranking time {secs:.1} s",
        m.mrr, m.hits_at_10, out.report.cost.encoder_calls
    );
}

fn main() -> star_kgc::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(2, |a| a.parse().expect("epochs must be a number"));
    let n = args
        .next()
        .map_or(50, |a| a.parse().expect("test-triples must be a number"));
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;
    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let train = TrainConfig {
        epochs,
        dev_eval: false,
        ..TrainConfig::default()
    };

    let star_config = StarConfig::default();
    let mut cross: CrossEncoder<f32> =
        CrossEncoder::new(star_config.encoder.clone(), vocab.clone())?;
    train_cross_encoder(&mut cross, &kg, &texts, &train)?;
    let mut star: StarModel<f32> = StarModel::new(star_config, vocab)?;
    train_star(&mut star, &kg, &texts, &train, &mut |_, _| Ok(()))?;

    let queries = build_queries(
        &kg.test()[..n.min(kg.test().len())],
        &[Direction::PredictTail],
    );
    let options = EvalOptions {
        directions: vec![Direction::PredictTail],
        ..EvalOptions::default()
    };
    let start = Instant::now();
    let out = evaluate_queries(
        &mut CrossScorer::new(&cross, &texts),
        &kg,
        &queries,
        &options,
    )?;
    show("cross", &out, start.elapsed().as_secs_f64());
    let start = Instant::now();
    let out = evaluate_queries(&mut StarScorer::new(&star, &texts), &kg, &queries, &options)?;
    show("siamese", &out, start.elapsed().as_secs_f64());
    Ok(())
}
