use masktx::config::SimilarityMode;
use masktx::matching::{combine, dice, hungarian_match, mask_similarity};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best total over all injections, and the lexicographically smallest
/// column sequence attaining it, by enumeration in lexicographic order.
fn exhaustive(sim: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn rec(sim: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cols: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == sim.len() {
            if acc > best.0 {
                *best = (acc, cols.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cols.push(j);
                rec(sim, row + 1, used, cols, acc + sim[row][j], best);
                cols.pop();
                used[j] = false;
            }
        }
    }
    let n = sim[0].len();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(sim, 0, &mut vec![false; n], &mut Vec::new(), 0.0, &mut best);
    best
}

fn random_matrix(rng: &mut ChaCha8Rng, dyadic: bool) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=n);
    (0..k)
        .map(|_| {
            (0..n)
                .map(|_| if dyadic { rng.random_range(0..=4) as f64 / 4.0 } else { rng.random::<f64>() })
                .collect()
        })
        .collect()
}

#[test]
fn hungarian_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for i in 0..3000 {
        let sim = random_matrix(&mut rng, i % 2 == 1);
        let (best, cols) = exhaustive(&sim);
        let a = hungarian_match(&sim).unwrap();
        assert_eq!(a.total(), best, "total for {sim:?}");
        let got: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        assert_eq!(got, cols, "tie-break for {sim:?}");
        assert_eq!(a.pairs.iter().map(|p| p.0).collect::<Vec<_>>(), (0..sim.len()).collect::<Vec<_>>());
        let n = sim[0].len();
        let mut all: Vec<usize> = got.iter().chain(&a.negatives).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        cases += 1;
    }
    assert!(cases >= 1000);
}

#[test]
fn two_by_two_examples() {
    let a = hungarian_match(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    assert!((a.total() - 1.7).abs() < 1e-12);
    let b = hungarian_match(&[vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap();
    assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
    assert!((b.total() - 1.65).abs() < 1e-12);
    assert!(b.negatives.is_empty());
}

#[test]
fn single_row_takes_first_argmax() {
    let a = hungarian_match(&[vec![0.2, 0.7, 0.7, 0.1]]).unwrap();
    assert_eq!(a.pairs, vec![(0, 1)]);
    assert_eq!(a.negatives, vec![0, 2, 3]);
}

#[test]
fn more_rows_than_columns_is_an_error() {
    assert!(hungarian_match(&[vec![0.1], vec![0.2]]).is_err());
    assert!(hungarian_match(&[vec![0.1, f64::NAN]]).is_err());
}

#[test]
fn dice_examples() {
    assert!((dice(&[1.0, 1.0, 0.0, 0.0], &[0.5; 4]).unwrap() - 0.5).abs() < 1e-6);
    assert!((dice(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(dice(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn similarity_examples() {
    // dice([1,1,0,0], [.5,.5,.5,.5]) = 0.5, so p = 0.8 gives 0.4.
    let s = mask_similarity(&[1.0, 1.0, 0.0, 0.0], 1, &[0.5; 4], &[0.1, 0.8, 0.1]).unwrap();
    assert!((s - 0.4).abs() < 1e-6);
    assert_eq!(mask_similarity(&[1.0, 1.0], 0, &[1.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    let perfect = mask_similarity(&[1.0, 0.0], 0, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
    assert!((perfect - 1.0).abs() < 1e-6);
    assert_eq!(combine(0.8, 0.5, SimilarityMode::Product), 0.4);
    assert_eq!(combine(0.8, 0.5, SimilarityMode::Sum), 0.65);
}

proptest! {
    #[test]
    fn scaling_keeps_pairs(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_matrix(&mut rng, false);
        let scaled: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert_eq!(hungarian_match(&sim).unwrap().pairs, hungarian_match(&scaled).unwrap().pairs);
    }

    #[test]
    fn similarity_is_bounded(
        m in proptest::collection::vec(0u8..2, 1..12),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = m.into_iter().map(f64::from).collect();
        let mh: Vec<f64> = m.iter().map(|_| rng.random()).collect();
        let p: Vec<f64> = vec![rng.random(), rng.random()];
        let s = mask_similarity(&m, 0, &mh, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
