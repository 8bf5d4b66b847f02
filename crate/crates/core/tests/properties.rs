mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use star_kgc::ensemble::{blend, ensemble_rerank, ensemble_scores, rescale_scores, PreparedQuery};
use star_kgc::eval::{
    build_queries, filtered_candidates, metrics_from_ranks, rank_gold, rank_of, RankingQuery,
};
use star_kgc::geo::{rotate_score, transe_score};
use star_kgc::io::{ScoreBlock, ScoreMatrix};
use star_kgc::kg::{Direction, EntityId, RelationId, Triple};
use star_kgc::training::{classification_loss, contrastive_loss, total_loss};

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

fn loss_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(b, m)| (probs(b), prop::collection::vec(probs(m), b)))
}

/// Distinct scores: a random permutation of 0..n.
fn permuted_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

proptest! {
    #[test]
    fn losses_are_nonnegative((pos, negs) in loss_inputs(), margin in 0.0..3.0f64, gamma in 0.0..2.0f64) {
        let lc = classification_loss(&pos, &negs);
        let ld = contrastive_loss(&pos, &negs, margin);
        prop_assert!(lc >= 0.0 && lc.is_finite());
        prop_assert!(ld >= 0.0);
        prop_assert!(total_loss(lc, ld, gamma) >= lc);
    }

    #[test]
    fn contrastive_loss_vanishes_past_the_margin(pos in probs(4), margin in 0.0..1.0f64) {
        let negs: Vec<Vec<f64>> = pos.iter().map(|p| vec![p - margin - 0.01; 3]).collect();
        prop_assert_eq!(contrastive_loss(&pos, &negs, margin), 0.0);
    }

    #[test]
    fn distinct_ranks_match_sorting(n in 1usize..40, seed in any::<u64>(), gold in any::<prop::sample::Index>()) {
        let scores = permuted_scores(n, seed);
        let g = gold.index(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let expected = order.iter().position(|&i| i == g).unwrap() + 1;
        prop_assert_eq!(rank_of(&scores, g, &mut ChaCha8Rng::seed_from_u64(seed)), expected);
    }

    #[test]
    fn tied_ranks_stay_inside_the_tie_block(scores in prop::collection::vec(0u8..4, 1..30), seed in any::<u64>()) {
        let g = 0;
        let greater = scores.iter().filter(|&&s| s > scores[g]).count();
        let ties = scores.iter().filter(|&&s| s == scores[g]).count();
        let r = rank_of(&scores, g, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(r > greater && r <= greater + ties);
    }

    #[test]
    fn filtering_never_worsens_a_rank(graph_seed in any::<u64>(), score_seed in any::<u64>()) {
        let kg = common::random_graph(&mut ChaCha8Rng::seed_from_u64(graph_seed), 20);
        let scores = permuted_scores(kg.num_entities(), score_seed);
        let all: Vec<EntityId> = kg.entity_ids().collect();
        let rank = |cands: &[EntityId], q: &RankingQuery| {
            let s: Vec<f64> = cands.iter().map(|e| scores[e.index()]).collect();
            rank_gold(cands, &s, q.gold(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };
        for q in build_queries(kg.test(), &Direction::BOTH) {
            let raw = rank(&all, &q);
            let filtered = rank(&filtered_candidates(&kg, &q, false), &q);
            let no_loops = rank(&filtered_candidates(&kg, &q, true), &q);
            prop_assert!(filtered <= raw);
            prop_assert!(no_loops <= filtered);
        }
    }

    #[test]
    fn metrics_are_bounded(ranks in prop::collection::vec(1usize..200, 1..50)) {
        let m = metrics_from_ranks(&ranks);
        prop_assert!(m.mr >= 1.0);
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!(m.hits_at_1 <= m.hits_at_3 && m.hits_at_3 <= m.hits_at_10 && m.hits_at_10 <= 1.0);
        prop_assert!(1.0 / m.mr <= m.mrr + 1e-12);
    }

    #[test]
    fn rescale_preserves_order(xs in prop::collection::vec(-1e3..1e3f64, 1..30)) {
        let ys = rescale_scores(&xs);
        for (i, j) in (0..xs.len()).flat_map(|i| (0..xs.len()).map(move |j| (i, j))) {
            prop_assert!(ys[i] >= 0.0 && ys[i] <= 1.0);
            if xs[i] < xs[j] {
                prop_assert!(ys[i] <= ys[j]);
            }
        }
    }

    #[test]
    fn blend_is_monotone(alpha in 0.0..=1.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64, d in 0.0..1.0f64) {
        prop_assert!(blend(alpha, a + d, b) >= blend(alpha, a, b));
        prop_assert!(blend(alpha, a, b + d) >= blend(alpha, a, b));
        prop_assert!((blend(1.0, a, b) - a).abs() < 1e-15);
        prop_assert!((blend(0.0, a, b) - b).abs() < 1e-15);
    }

    #[test]
    fn transe_is_translation_invariant(
        v in prop::collection::vec(-1.0..1.0f64, 24),
        shift in prop::collection::vec(-5.0..5.0f64, 8),
        p in 1u8..=2,
    ) {
        let (h, rest) = v.split_at(8);
        let (r, t) = rest.split_at(8);
        let add = |x: &[f64]| x.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>();
        let moved = transe_score(&add(h), r, &add(t), p);
        prop_assert!((moved - transe_score(h, r, t, p)).abs() < 1e-6);
    }

    #[test]
    fn rotate_is_phase_invariant(
        v in prop::collection::vec(-1.0..1.0f64, 16),
        phases in prop::collection::vec(-3.2..3.2f64, 4),
        common in prop::collection::vec(-3.2..3.2f64, 4),
    ) {
        let (h, t) = v.split_at(8);
        let spin = |x: &[f64]| star_kgc::geo::rotate(x, &common);
        let moved = rotate_score(&spin(h), &phases, &spin(t));
        prop_assert!((moved - rotate_score(h, &phases, t)).abs() < 1e-6);
    }

    #[test]
    fn alpha_one_keeps_the_textual_order(
        s_tc in prop::collection::vec(0.0..=1.0f64, 1..40),
        geo_seed in any::<u64>(),
        k in prop::option::of(1usize..50),
    ) {
        let n = s_tc.len();
        let s_ge = rescale_scores(&permuted_scores(n, geo_seed));
        let mut text_order: Vec<usize> = (0..n).collect();
        text_order.sort_by(|&a, &b| s_tc[b].total_cmp(&s_tc[a]).then(a.cmp(&b)));
        let q = PreparedQuery {
            query: RankingQuery { index: 0, triple: Triple::new(EntityId(0), RelationId(0), EntityId(0)), direction: Direction::PredictTail },
            candidates: (0..n as u32).map(EntityId).collect(),
            s_tc: s_tc.clone(),
            s_ge,
            text_order: text_order.clone(),
            unseen: false,
        };
        let expected: Vec<EntityId> = text_order.iter().map(|&p| EntityId(p as u32)).collect();
        prop_assert_eq!(ensemble_rerank(&q, 1.0, k), expected);
        // the re-ranked block outranks the rest
        let keys = ensemble_scores(&q, 0.5, k);
        let top = q.top(k);
        for p in &text_order[top.len()..] {
            prop_assert!(top.iter().all(|&t| keys[t] > keys[*p]));
        }
    }

    #[test]
    fn score_matrix_round_trips(
        n in 1usize..20,
        blocks in prop::collection::vec((any::<u32>(), any::<bool>(), prop::collection::vec(-1e3..1e3f32, 20)), 0..5),
    ) {
        let m = ScoreMatrix {
            label: "test".into(),
            num_entities: n,
            blocks: blocks
                .into_iter()
                .map(|(i, head, s)| ScoreBlock {
                    query_index: i,
                    direction: if head { Direction::PredictHead } else { Direction::PredictTail },
                    triple: Triple::new(EntityId(i % n as u32), RelationId(1), EntityId(0)),
                    scores: s[..n].to_vec(),
                })
                .collect(),
        };
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = ScoreMatrix::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, m);
    }
}
