use film::matcher::{pairwise_knn_decide, Rule};
use film::stiefel::{cayley_update, cayley_update_direct, cayley_update_smw};
use film::triplets::{ConstraintMatrix, Triplet};
use film::vectorizer::{tokenize, VectorizerConfig};
use film::{EmbeddedSet, StiefelPoint, TripletSet, Vocabulary};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point_and_grad(r: usize, d: usize, seed: u64, scale: f64) -> (StiefelPoint<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = StiefelPoint::random(r, d, &mut rng).unwrap();
    let g = DMatrix::from_fn(r, d, |i, j| scale * (((i * 31 + j * 17) as f64 + seed as f64).sin()));
    (p, g)
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..16).prop_flat_map(|r| (Just(r), 1..=r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cayley_stays_on_manifold((r, d) in shape(), seed in any::<u64>(), tau in 0.0f64..1e6, scale in 1e-3f64..1e3) {
        let (p, g) = point_and_grad(r, d, seed, scale);
        let q = cayley_update(&p, &g, tau).unwrap();
        prop_assert!(q.feasibility_error() <= 1e-8, "error {}", q.feasibility_error());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn smw_matches_direct_solve(d in 1usize..5, extra in 0usize..10, seed in any::<u64>(), tau in 1e-4f64..50.0) {
        let r = 2 * d + extra;
        let (p, g) = point_and_grad(r, d, seed, 1.0);
        let a = cayley_update_direct(&p, &g, tau).unwrap();
        let b = cayley_update_smw(&p, &g, tau).unwrap();
        prop_assert!((a.matrix() - b.matrix()).amax() <= 1e-10);
        let c = cayley_update(&p, &g, tau).unwrap();
        prop_assert!((a.matrix() - c.matrix()).amax() <= 1e-10);
    }

    #[test]
    fn constraint_columns_sum_to_zero(raw in prop::collection::vec((0usize..12, 0usize..12, 0usize..12), 0..40)) {
        let ts = TripletSet::new(
            raw.into_iter().filter_map(|(i, j, k)| Triplet::new(i, j, k).ok()).collect(),
        );
        let c = ConstraintMatrix::<f64>::build(&ts, 12).unwrap();
        for col in 0..12 {
            let sum: f64 = (0..12).map(|row| c.get(row, col)).sum();
            prop_assert_eq!(sum, 0.0);
        }
    }

    #[test]
    fn knn_scale_invariance_and_symmetry(
        data in prop::collection::vec(-1.0f64..1.0, 3 * 12),
        c in 1e-3f64..1e3,
        k in 1usize..11,
    ) {
        let y = DMatrix::from_vec(3, 12, data);
        let pairs: Vec<(usize, usize)> = (0..12).flat_map(|a| (a + 1..12).map(move |b| (a, b))).collect();
        let flipped: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let base = EmbeddedSet::anonymous(y.clone()).unwrap();
        let scaled = EmbeddedSet::anonymous(y * c).unwrap();
        for rule in [Rule::Either, Rule::Both] {
            let want = pairwise_knn_decide(&base, &pairs, k, rule).unwrap();
            prop_assert_eq!(&pairwise_knn_decide(&scaled, &pairs, k, rule).unwrap(), &want);
            prop_assert_eq!(&pairwise_knn_decide(&base, &flipped, k, rule).unwrap(), &want);
        }
    }

    #[test]
    fn either_rule_is_monotone_in_k(data in prop::collection::vec(-1.0f64..1.0, 2 * 10)) {
        let y = EmbeddedSet::anonymous(DMatrix::from_vec(2, 10, data)).unwrap();
        let pairs: Vec<(usize, usize)> = (0..10).flat_map(|a| (a + 1..10).map(move |b| (a, b))).collect();
        let mut previous = vec![0u8; pairs.len()];
        for k in 1..10 {
            let labels = pairwise_knn_decide(&y, &pairs, k, Rule::Either).unwrap();
            prop_assert!(labels.iter().zip(&previous).all(|(now, before)| now >= before));
            previous = labels;
        }
    }

    #[test]
    fn vectorizer_ignores_corpus_order(
        docs in prop::collection::vec("[a-d]{1,2}( [a-d]{1,2}){0,4}", 1..12),
        rotate in 0usize..12,
    ) {
        let corpus: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
        let mut shuffled = corpus.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rotate % len);
        let a = Vocabulary::fit(&corpus, VectorizerConfig::default()).unwrap();
        let b = Vocabulary::fit(&shuffled, VectorizerConfig::default()).unwrap();
        prop_assert_eq!(&a, &b);
        let xa = a.transform::<f64, _>(&corpus);
        prop_assert_eq!(&xa, &a.transform::<f64, _>(&corpus));
        for col in 0..xa.ncols() {
            let norm = xa.column_norm(col);
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }
}
