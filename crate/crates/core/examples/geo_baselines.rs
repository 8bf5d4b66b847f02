//! Train TransE and RotatE on UMLS and compare their filtered test metrics.
//!
//! cargo run --release --example geo_baselines -- [epochs]

use std::path::PathBuf;
use std::time::Instant;

use star_kgc::eval::{evaluate, EvalOptions};
use star_kgc::geo::{train_geo, GeoConfig, GeoKind, GeoScorer};
use star_kgc::kg::{load_graph, DatasetPaths, Split};

fn main() -> star_kgc::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(300, |a| a.parse().expect("epochs must be a number"));
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;
    for kind in [GeoKind::TransE, GeoKind::RotatE] {
        let config = GeoConfig {
            kind,
            epochs,
            ..GeoConfig::default()
        };
        let start = Instant::now();
        let run = train_geo(&kg, &config)?;
        let m = evaluate(
            &mut GeoScorer::new(&run.embeddings),
            &kg,
            Split::Test,
            &EvalOptions::default(),
        )?
        .report
        .overall;
        println!(
            "{kind:?} (dim {}, margin {}): final loss {:.4}, MR {:.2}, MRR {:.3}, Hits@10 {:.3} [{:.1} s]",
            config.dim(),
            config.margin(),
            run.epoch_losses.last().copied().unwrap_or(f64::NAN),
            m.mr,
            m.mrr,
            m.hits_at_10,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
