//! Rank UMLS test triples under every ranking basis, with and without the
//! self-loop filter, from one briefly trained model.
//!
//! cargo run --release --example ranking_bases -- [epochs] [negl2|bilinear|cosine]

use std::path::PathBuf;

use star_kgc::encoder::{StarConfig, StarModel};
use star_kgc::eval::{evaluate, EvalOptions, StarScorer};
use star_kgc::kg::{load_graph, DatasetPaths, Split};
use star_kgc::scoring::{DistanceMetric, RankingBasis};
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{train_star, TrainConfig};

fn main() -> star_kgc::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(3, |a| a.parse().expect("epochs must be a number"));
    let distance: DistanceMetric = args
        .next()
        .map_or(Ok(DistanceMetric::NegL2), |a| a.parse())?;
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;

    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let mut model: StarModel<f32> = StarModel::new(
        StarConfig {
            distance,
            ..StarConfig::default()
        },
        vocab,
    )?;
    let config = TrainConfig {
        epochs,
        dev_eval: false,
        ..TrainConfig::default()
    };
    train_star(&mut model, &kg, &texts, &config, &mut |_, _| Ok(()))?;

    // one scorer keeps its entity and query encodings across runs
    let mut scorer = StarScorer::new(&model, &texts);
    println!(
        "{:<6} {:<10} {:>7} {:>7} {:>8}",
        "basis", "self-loop", "MR", "MRR", "Hits@10"
    );
    for basis in [
        RankingBasis::Sc,
        RankingBasis::Sd,
        RankingBasis::Sum,
        RankingBasis::Prod,
    ] {
        for self_loop_filter in [false, true] {
            let options = EvalOptions {
                basis,
                self_loop_filter,
                ..EvalOptions::default()
            };
            let m = evaluate(&mut scorer, &kg, Split::Test, &options)?
                .report
                .overall;
            println!(
                "{:<6} {:<10} {:>7.2} {:>7.3} {:>8.3}",
                format!("{basis:?}"),
                self_loop_filter,
                m.mr,
                m.mrr,
                m.hits_at_10
            );
        }
    }
    Ok(())
}
