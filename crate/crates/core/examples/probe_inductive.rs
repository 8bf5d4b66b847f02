//! Remove entities from training (an inductive probe), train TransE on what is
//! left and place the removed entities from their support triples alone.
//!
//! cargo run --release --example probe_inductive -- [n-removed]

use std::path::PathBuf;

use star_kgc::eval::{evaluate, EvalOptions};
use star_kgc::geo::{inductive_complete, train_geo, GeoConfig, GeoEmbeddings, GeoScorer};
use star_kgc::kg::{
    build_probe, load_graph, DatasetPaths, KnowledgeGraph, ProbeKind, ProbeSpec, Split,
};
use star_kgc::Error;

fn mrr(emb: &GeoEmbeddings, kg: &KnowledgeGraph) -> star_kgc::Result<f64> {
    Ok(evaluate(
        &mut GeoScorer::new(emb),
        kg,
        Split::Test,
        &EvalOptions::default(),
    )?
    .report
    .overall
    .mrr)
}

fn main() -> star_kgc::Result<()> {
    let n_removed = std::env::args()
        .nth(1)
        .map_or(10, |a| a.parse().expect("n-removed must be a number"));
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/umls");
    let kg = load_graph(&DatasetPaths::from_dir(&data)?)?;

    // test triples touching an entity never seen in training
    match build_probe(
        &kg,
        &ProbeSpec {
            kind: ProbeKind::Probe1,
            seed: 0,
            n_removed: 0,
        },
    ) {
        Ok(p) => println!(
            "probe1: {} test triples with an unseen entity",
            p.graph.test().len()
        ),
        Err(Error::EmptyProbe(_)) => println!("probe1: every test entity appears in training"),
        Err(e) => return Err(e),
    }

    let probe = build_probe(
        &kg,
        &ProbeSpec {
            kind: ProbeKind::Probe2,
            seed: 0,
            n_removed,
        },
    )?;
    let graph = &probe.graph;
    println!(
        "probe2: removed {} entities, {} support and {} discarded triples, {} test triples",
        probe.removed.len(),
        probe.support.len(),
        probe.discarded.len(),
        graph.test().len()
    );
    let emb = train_geo(graph, &GeoConfig::default())?.embeddings;
    let mut inductive = emb.clone();
    let report = inductive_complete(&mut inductive, &probe.support, &probe.removed);
    println!(
        "completed {} entities ({} without support)",
        report.completed.len(),
        report.unsupported.len()
    );
    println!(
        "test MRR with random vectors for removed entities: {:.3}",
        mrr(&emb, graph)?
    );
    println!(
        "test MRR after inductive completion:               {:.3}",
        mrr(&inductive, graph)?
    );
    Ok(())
}
