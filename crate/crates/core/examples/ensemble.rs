//! Blend a text model with TransE on UMLS: score averaging, a fixed α, and a
//! per-query α learned on the dev split.
//!
//! cargo run --release --example ensemble -- [star-epochs]

use std::path::PathBuf;

use star_kgc::encoder::{precompute_entity_reps, StarConfig, StarModel};
use star_kgc::ensemble::{
    evaluate_ensemble, fixed_alpha_set, prepare_queries, train_ensemble, EnsembleConfig,
    EnsembleMode, FeatureSet, PreparedQuery,
};
use star_kgc::eval::{evaluate, EvalOptions, RankStats, StarScorer};
use star_kgc::geo::{train_geo, GeoConfig, GeoScorer};
use star_kgc::kg::{load_graph, DatasetPaths, Split};
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{train_star, TrainConfig};
use star_kgc::Error;

fn show(name: &str, m: &RankStats) {
    println!(
        "{name:<28} MR {:>6.2}  MRR {:.3}  Hits@1 {:.3}  Hits@10 {:.3}",
        m.mr, m.mrr, m.hits_at_1, m.hits_at_10
    );
}

fn main() -> star_kgc::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(5, |a| a.parse().expect("epochs must be a number"));
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;

    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let mut star: StarModel<f32> = StarModel::new(StarConfig::default(), vocab)?;
    train_star(
        &mut star,
        &kg,
        &texts,
        &TrainConfig {
            epochs,
            dev_eval: false,
            ..TrainConfig::default()
        },
        &mut |_, _| Ok(()),
    )?;
    let transe = train_geo(&kg, &GeoConfig::default())?.embeddings;

    // frozen score matrices for both splits; non-candidates are -inf
    let keep = EvalOptions {
        keep_scores: true,
        ..EvalOptions::default()
    };
    let mut star_scorer = StarScorer::new(&star, &texts);
    let mut geo_scorer = GeoScorer::new(&transe);
    let mut run = |split| -> star_kgc::Result<Vec<PreparedQuery>> {
        let s = evaluate(&mut star_scorer, &kg, split, &keep)?;
        let g = evaluate(&mut geo_scorer, &kg, split, &keep)?;
        if split == Split::Test {
            show("text model", &s.report.overall);
            show("TransE", &g.report.overall);
        }
        let missing = || Error::Config("score matrix not kept".into());
        prepare_queries(
            &kg,
            s.scores.as_ref().ok_or_else(missing)?,
            g.scores.as_ref().ok_or_else(missing)?,
            false,
        )
    };
    let dev = run(Split::Dev)?;
    let test = run(Split::Test)?;

    for (name, alpha, k) in [
        ("score averaging", 0.5, None),
        ("alpha 0.8 over top 10", 0.8, Some(10)),
    ] {
        let config = EnsembleConfig {
            k,
            mode: EnsembleMode::FixedAlpha(alpha),
            ..EnsembleConfig::default()
        };
        show(
            name,
            &evaluate_ensemble(&kg, &fixed_alpha_set(test.clone()), None, &config, 0)?
                .report
                .overall,
        );
    }

    let config = EnsembleConfig::default();
    let k = config.k.expect("default k is finite");
    let reps = precompute_entity_reps(&star, &texts, None)
        .reps()
        .cast::<f64>();
    let (alpha, report) = train_ensemble(
        &FeatureSet::new(dev, &reps, k, config.m_sim),
        star.d_h(),
        &config,
    )?;
    println!(
        "alpha-MLP trained, final loss {:.4}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    let out = evaluate_ensemble(
        &kg,
        &FeatureSet::new(test, &reps, k, config.m_sim),
        Some(&alpha),
        &config,
        0,
    )?;
    show("self-adaptive", &out.report.overall);
    println!(
        "mean alpha {:.3}",
        out.alphas.iter().sum::<f64>() / out.alphas.len() as f64
    );
    Ok(())
}
