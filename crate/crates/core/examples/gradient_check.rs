//! Compare analytic gradients of the three training objectives with central
//! finite differences in f64.
//!
//! cargo run --release --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use star_kgc::encoder::{EncoderConfig, StarConfig, StarModel};
use star_kgc::kg::{GraphBuilder, Split};
use star_kgc::scoring::DistanceMetric;
use star_kgc::tokenizer::{TokenizedTexts, Vocabulary};
use star_kgc::training::{gradient_check, sample_batch, LossKind, TrainConfig};

fn main() -> star_kgc::Result<()> {
    let kg = GraphBuilder::new()
        .split(
            Split::Train,
            &[
                ("aspirin", "treats", "headache"),
                ("ibuprofen", "treats", "fever"),
                ("aspirin", "is a", "drug"),
                ("ibuprofen", "is a", "drug"),
                ("headache", "is a", "symptom"),
            ],
        )
        .build();
    let vocab = Vocabulary::from_train(&kg);
    let texts = TokenizedTexts::new(kg.texts(), &vocab);
    let train = TrainConfig::default();
    for distance in [
        DistanceMetric::NegL2,
        DistanceMetric::Bilinear,
        DistanceMetric::Cosine,
    ] {
        let config = StarConfig {
            encoder: EncoderConfig {
                d_h: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len_hr: 16,
                max_len_t: 16,
                ..EncoderConfig::default()
            },
            distance,
            ..StarConfig::default()
        };
        let model: StarModel<f64> = StarModel::new(config, vocab.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&kg, &kg.train()[..2], 3, &mut rng)?;
        for kind in [
            LossKind::Classification,
            LossKind::Contrastive,
            LossKind::Total,
        ] {
            let r = gradient_check(
                &model,
                &texts,
                &batch,
                train.margin,
                train.gamma,
                kind,
                100,
                1e-5,
                &mut rng,
            );
            println!(
                "{distance:?} {kind:?}: max relative error {:.2e}, max absolute error {:.2e} over {} coordinates",
                r.max_rel_error, r.max_abs_error, r.coordinates
            );
        }
    }
    Ok(())
}
