//! Train the Siamese model on UMLS, report filtered test metrics and save a
//! checkpoint with its entity cache.
//!
//! cargo run --release --example train_umls -- [epochs] [out-dir]

use std::path::PathBuf;

use star_kgc::encoder::{precompute_entity_reps, StarConfig, StarModel};
use star_kgc::eval::{evaluate, EvalOptions, StarScorer};
use star_kgc::io::{save_entity_cache, save_star};
use star_kgc::kg::{load_graph, DatasetPaths, Split};
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{train_star, TrainConfig};

fn main() -> star_kgc::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(20, |a| a.parse().expect("epochs must be a number"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/umls".into()));
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;
    println!("{:?}", kg.stats());

    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let mut model: StarModel<f32> = StarModel::new(StarConfig::default(), vocab)?;
    let config = TrainConfig {
        epochs,
        dev_limit: Some(200),
        ..TrainConfig::default()
    };
    train_star(&mut model, &kg, &texts, &config, &mut |log, _| {
        println!(
            "epoch {:>2}: L_c {:.4}  L_d {:.4}  dev Hits@10 {}",
            log.epoch,
            log.loss_c,
            log.loss_d,
            log.dev_hits_at_10.map_or("-".into(), |h| format!("{h:.3}"))
        );
        Ok(())
    })?;

    let cache = precompute_entity_reps(&model, &texts, None);
    let mut scorer = StarScorer::new(&model, &texts).with_entity_cache(cache.clone());
    let report = evaluate(&mut scorer, &kg, Split::Test, &EvalOptions::default())?.report;
    let m = report.overall;
    println!(
        "test: MR {:.2}  MRR {:.3}  Hits@1 {:.3}  Hits@3 {:.3}  Hits@10 {:.3}",
        m.mr, m.mrr, m.hits_at_1, m.hits_at_3, m.hits_at_10
    );
    println!("encoder calls: {}", report.cost.encoder_calls);

    save_star(&model, &out.join("model.ckpt"))?;
    save_entity_cache(&cache, &model, &out.join("entity_cache.bin"))?;
    println!("saved to {}", out.display());
    Ok(())
}
