use cmm_core::retrieval::{
    retrieve, select_contrastive, select_greedy, select_mmr, InvertedIndex, ScoredCandidate, SelectionParams, Strategy as Selector,
};
use cmm_core::textcore::{ParallelPair, TokenSeq};
use proptest::prelude::*;

/// Levenshtein over token ids by the full dynamic-programming table.
fn lev(a: &[u32], b: &[u32]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn sim(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        1.0
    } else {
        1.0 - lev(a, b) as f64 / n as f64
    }
}

/// Exhaustive per-step argmax with the redundancy term recomputed from
/// scratch. `mean` selects the averaged penalty, otherwise the max.
fn oracle(pool: &[ScoredCandidate], m: usize, alpha: f64, mean: bool) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(pool.len()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, c) in pool.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let score = if chosen.is_empty() {
                c.sim_to_query
            } else if mean {
                let total: f64 = chosen.iter().map(|&j| sim(c.src.ids(), pool[j].src.ids())).sum();
                c.sim_to_query - alpha / chosen.len() as f64 * total
            } else {
                let worst = chosen
                    .iter()
                    .map(|&j| sim(c.src.ids(), pool[j].src.ids()))
                    .fold(f64::NEG_INFINITY, f64::max);
                (1.0 - alpha) * c.sim_to_query - alpha * worst
            };
            let wins = match best {
                None => true,
                Some((s, id, _)) => score > s || (score == s && c.pair_id < id),
            };
            if wins {
                best = Some((score, c.pair_id, i));
            }
        }
        chosen.push(best.unwrap().2);
    }
    chosen.iter().map(|&i| pool[i].pair_id).collect()
}

fn pool_strategy() -> impl Strategy<Value = (Vec<u32>, Vec<Vec<u32>>)> {
    let seq = || prop::collection::vec(5u32..9, 1..6);
    (seq(), prop::collection::vec(seq(), 1..9))
}

fn make_pool(query: &[u32], docs: &[Vec<u32>]) -> Vec<ScoredCandidate> {
    let q = TokenSeq::new(query.to_vec());
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            ScoredCandidate::new(
                &q,
                &ParallelPair {
                    id: i * 7 % 11,
                    src: TokenSeq::new(d.clone()),
                    tgt: TokenSeq::new(vec![9]),
                },
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn selectors_match_exhaustive_oracles(
        (query, docs) in pool_strategy(),
        m in 0usize..5,
        alpha in prop::sample::select(vec![0.0, 0.5, 0.7, 1.0]),
    ) {
        let pool = make_pool(&query, &docs);
        prop_assert_eq!(select_contrastive(&pool, m, alpha).pair_ids(), oracle(&pool, m, alpha, true));
        prop_assert_eq!(select_mmr(&pool, m, alpha).pair_ids(), oracle(&pool, m, alpha, false));
        prop_assert_eq!(select_contrastive(&pool, m, 0.0).pair_ids(), select_greedy(&pool, m).pair_ids());
    }
}

#[test]
fn pruned_near_duplicates_make_room_for_complements() {
    // query a b c d; two near copies covering "a b c" and one covering "c d"
    let query = [5, 6, 7, 8];
    let docs = vec![vec![5, 6, 7, 9], vec![5, 6, 7, 10], vec![11, 12, 7, 8]];
    let pool = make_pool(&query, &docs);
    let ids = |v: &[usize]| v.iter().map(|&i| pool[i].pair_id).collect::<Vec<_>>();
    assert_eq!(select_greedy(&pool, 2).pair_ids(), ids(&[0, 1]));
    assert_eq!(select_contrastive(&pool, 2, 0.7).pair_ids(), ids(&[0, 2]));
}

#[test]
fn retrieval_over_an_index_never_returns_the_query() {
    let corpus: Vec<ParallelPair> = (0..30)
        .map(|i| ParallelPair {
            id: i,
            src: TokenSeq::new(vec![5 + (i % 3) as u32, 9 + (i % 5) as u32, 20 + (i % 7) as u32]),
            tgt: TokenSeq::new(vec![40 + i as u32]),
        })
        .collect();
    let index = InvertedIndex::build(&corpus).unwrap();
    for strategy in Selector::ALL {
        let p = SelectionParams {
            strategy,
            alpha: 0.7,
            m: 4,
            k: 10,
            adaptive_cap: 8,
            seed: 3,
        };
        for q in &corpus {
            let set = retrieve(&index, &corpus, &q.src, q.id, Some(q.id), &p);
            assert!(!set.pair_ids().contains(&q.id), "{strategy}");
            assert!(set.len() <= 8);
            let again = retrieve(&index, &corpus, &q.src, q.id, Some(q.id), &p);
            assert_eq!(set, again);
        }
    }
}
