mod common;

use common::*;
use cona::numerics::Matrix;
use cona::retrieval::{build_index, recall_at_k, topk};
use cona::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("g{i:05}")).collect()
}

/// Unit rows drawn from a small set of directions so exact score ties occur.
fn tied_rows(n: usize, d: usize, distinct: usize, rng: &mut ChaCha8Rng) -> Rows {
    let pool = unit_rows(distinct, d, rng);
    (0..n).map(|_| pool[rng.random_range(0..distinct)].clone()).collect()
}

#[test]
fn topk_matches_full_sort_on_galleries_up_to_1024() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for &n in &[1usize, 2, 17, 128, 1024] {
        let d = 8;
        let gallery = unit_rows(n, d, &mut rng);
        let index = build_index(ids(n), matrix_of(&gallery)).unwrap();
        for _ in 0..10 {
            let q = &unit_rows(1, d, &mut rng)[0];
            for k in [1, 5, 10, n, n + 3] {
                let got: Vec<(String, f64)> = topk(&index, q, k).unwrap().into_iter().map(|h| (h.id, h.score)).collect();
                let want = brute_topk(&ids(n), &gallery, q, k);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.0, w.0);
                    assert!((g.1 - w.1).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn topk_breaks_exact_ties_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let gallery = tied_rows(300, 4, 5, &mut rng);
    let index = build_index(ids(300), matrix_of(&gallery)).unwrap();
    for q in gallery.iter().take(5) {
        let got: Vec<String> = topk(&index, q, 40).unwrap().into_iter().map(|h| h.id).collect();
        let want: Vec<String> = brute_topk(&ids(300), &gallery, q, 40).into_iter().map(|h| h.0).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn recall_matches_brute_force_in_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    for &n in &[3usize, 64, 1024] {
        let d = 6;
        let text = unit_rows(n, d, &mut rng);
        // Images are noisy copies of the texts so recall is neither 0 nor 1.
        let image: Rows = {
            let noise = unit_rows(n, d, &mut rng);
            let mixed: Rows = text
                .iter()
                .zip(&noise)
                .map(|(t, e)| t.iter().zip(e).map(|(a, b)| a + 0.8 * b).collect())
                .collect();
            rows_of(&cona::numerics::l2_normalize_rows(&matrix_of(&mixed)).unwrap())
        };
        let id = ids(n);
        let ks = [1, 5, 10];
        let t2i = recall_at_k(&build_index(id.clone(), matrix_of(&image)).unwrap(), &batch(&text), &id, &ks).unwrap();
        let i2t = recall_at_k(&build_index(id.clone(), matrix_of(&text)).unwrap(), &batch(&image), &id, &ks).unwrap();
        for k in ks {
            assert_eq!(t2i.at(k).unwrap(), brute_recall(&id, &image, &text, &id, k), "t2i n={n} k={k}");
            assert_eq!(i2t.at(k).unwrap(), brute_recall(&id, &text, &image, &id, k), "i2t n={n} k={k}");
        }
        assert!(t2i.at(1) <= t2i.at(5) && t2i.at(5) <= t2i.at(10));
        assert!(i2t.at(1) <= i2t.at(5) && i2t.at(5) <= i2t.at(10));
    }
}

#[test]
fn recall_with_ties_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let gallery = tied_rows(200, 3, 7, &mut rng);
    let queries = tied_rows(50, 3, 7, &mut rng);
    let id = ids(200);
    let truth: Vec<String> = (0..50).map(|i| id[(i * 7) % 200].clone()).collect();
    let index = build_index(id.clone(), matrix_of(&gallery)).unwrap();
    let rep = recall_at_k(&index, &batch(&queries), &truth, &[1, 2, 30, 200]).unwrap();
    for k in [1, 2, 30, 200] {
        assert_eq!(rep.at(k).unwrap(), brute_recall(&id, &gallery, &queries, &truth, k));
    }
    assert_eq!(rep.at(200), Some(1.0));
}

#[test]
fn single_item_index_returns_it() {
    let index = build_index(vec!["only".into()], Matrix::<f64>::from_f64_rows(&[&[0.6, 0.8]])).unwrap();
    let hits = topk(&index, &[1.0, 0.0], 1).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].id, "only");
    assert!((hits[0].score - 0.6).abs() < 1e-15);
}

#[test]
fn query_errors() {
    let index = build_index(ids(2), Matrix::<f64>::identity(2)).unwrap();
    assert!(matches!(topk(&index, &[1.0, 0.0, 0.0], 1), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(topk(&index, &[2.0, 0.0], 1), Err(Error::NotNormalized { .. })));
    assert!(topk(&index, &[1.0, 0.0], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..80, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = unit_rows(n, d, &mut rng);
        let q = unit_rows(n, d, &mut rng);
        let id = ids(n);
        let ks: Vec<usize> = (1..=n + 1).collect();
        let rep = recall_at_k(&build_index(id.clone(), matrix_of(&g)).unwrap(), &batch(&q), &id, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(rep.at(w[0]).unwrap() <= rep.at(w[1]).unwrap());
        }
        prop_assert_eq!(rep.at(n).unwrap(), 1.0);
    }

    #[test]
    fn topk_is_prefix_of_larger_topk(seed in any::<u64>(), n in 1usize..60, k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = unit_rows(n, 4, &mut rng);
        let index = build_index(ids(n), matrix_of(&g)).unwrap();
        let q = &unit_rows(1, 4, &mut rng)[0];
        let small = topk(&index, q, k).unwrap();
        let big = topk(&index, q, k + 5).unwrap();
        prop_assert_eq!(&big[..small.len()], &small[..]);
    }
}
