use masktx::config::SceneConfig;
use masktx::dataset::Dataset;
use masktx::inference::{panoptic_inference, slot_classes, Thresholds};
use masktx::panoptic::{Panoptic, Segment, Vocabulary, VOID};
use masktx::pq::{compute_pq, PqAccumulator};
use masktx_tensor::Tensor;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn vocab() -> Vocabulary {
    SceneConfig::default().vocabulary()
}

/// One-hot outputs reproducing `map`: one slot per segment plus `extra`
/// no-object slots; void pixels get a uniform mask.
fn one_hot_outputs(map: &Panoptic, vocab: &Vocabulary, extra: usize) -> (Tensor, Tensor) {
    let n = map.segments.len() + extra;
    let p = map.ids.len();
    let slot_of: BTreeMap<u32, usize> = map.segments.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut masks = Tensor::full(&[n, p], 0.0);
    for (px, &id) in map.ids.iter().enumerate() {
        match slot_of.get(&id) {
            Some(&s) => masks.set(&[s, px], 1.0),
            None => (0..n).for_each(|s| masks.set(&[s, px], 1.0 / n as f64)),
        }
    }
    let mut probs = Tensor::zeros(&[n, vocab.len() + 1]);
    for s in 0..n {
        let class = map.segments.get(s).map_or(vocab.no_object(), |seg| seg.class);
        probs.set(&[s, class], 1.0);
    }
    (masks, probs)
}

/// True when the maps agree up to a renaming of segment ids.
fn same_up_to_ids(a: &Panoptic, b: &Panoptic) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    for (&x, &y) in a.ids.iter().zip(&b.ids) {
        if (x == VOID) != (y == VOID) || a.class_of(x) != b.class_of(y) {
            return false;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    a.segments.len() == b.segments.len()
}

fn scenes(count: u64) -> Dataset {
    Dataset::generate(&SceneConfig::default(), 500, count)
}

#[test]
fn area_limits_at_64_by_64() {
    assert_eq!(Thresholds::default().area_limits(64 * 64), (40, 2));
}

#[test]
fn two_slot_example_with_a_weak_pixel() {
    let v = vocab();
    let masks = Tensor::new(vec![2, 4], vec![0.9, 0.2, 0.3, 0.35, 0.1, 0.8, 0.7, 0.3]).unwrap();
    let mut probs = Tensor::zeros(&[2, v.len() + 1]);
    probs.set(&[0, 0], 0.9);
    probs.set(&[0, 5], 0.1);
    probs.set(&[1, 3], 0.8);
    probs.set(&[1, 1], 0.2);
    let t = Thresholds::default();
    let map = panoptic_inference(&masks, &probs, 2, 2, &v, &t).unwrap();

    // Scalar evaluation of the per-pixel rule.
    let mut expected = Vec::new();
    for px in 0..4 {
        let (a, b) = (masks.get(&[0, px]), masks.get(&[1, px]));
        let (slot, best) = if b > a { (1, b) } else { (0, a) };
        expected.push(if best >= 0.4 { slot + 1 } else { 0 });
    }
    assert_eq!(expected, vec![1, 2, 2, 0]);
    assert_eq!(map.ids, expected);
    assert_eq!(map.segments, vec![Segment { id: 1, class: 0 }, Segment { id: 2, class: 3 }]);
}

#[test]
fn uniform_class_distributions_give_a_void_map() {
    let v = vocab();
    let masks = Tensor::full(&[4, 16], 1.0);
    let probs = Tensor::full(&[4, v.len() + 1], 1.0 / (v.len() + 1) as f64);
    let map = panoptic_inference(&masks, &probs, 4, 4, &v, &Thresholds::default()).unwrap();
    assert!(map.ids.iter().all(|&id| id == VOID));
    assert!(map.segments.is_empty());
}

#[test]
fn one_hot_outputs_reproduce_ground_truth() {
    let data = scenes(30);
    for ex in &data.examples {
        let (m, p) = one_hot_outputs(&ex.gt, &data.vocab, 3);
        let map = panoptic_inference(&m, &p, ex.gt.height, ex.gt.width, &data.vocab, &Thresholds::default()).unwrap();
        assert!(same_up_to_ids(&map, &ex.gt), "{}", ex.stem);
        map.validate(data.vocab.len()).unwrap();
    }
}

#[test]
fn segments_below_area_limits_are_void() {
    let v = vocab();
    let (h, w) = (64, 64);
    let mut gt = Panoptic::void(h, w);
    // thing of area 1, thing of area 2, stuff of 39, stuff of 40.
    let spans = [(1, 0, 1), (2, 1, 2), (3, 3, 39), (4, 42, 40)];
    let classes = [0, 1, 3, 4];
    for (&(id, start, len), &class) in spans.iter().zip(&classes) {
        gt.ids[start..start + len].fill(id);
        gt.segments.push(Segment { id, class });
    }
    let (m, p) = one_hot_outputs(&gt, &v, 3);
    let map = panoptic_inference(&m, &p, h, w, &v, &Thresholds::default()).unwrap();
    let kept: Vec<usize> = map.segments.iter().map(|s| s.class).collect();
    assert_eq!(kept, vec![1, 4]);
    assert_eq!(map.ids[0], VOID);
    assert!(map.ids[3..42].iter().all(|&id| id == VOID));
    assert!(map.ids[42..82].iter().all(|&id| id != VOID));
}

#[test]
fn size_mismatch_is_an_error() {
    let v = vocab();
    let probs = Tensor::zeros(&[2, v.len() + 1]);
    assert!(panoptic_inference(&Tensor::zeros(&[2, 5]), &probs, 2, 2, &v, &Thresholds::default()).is_err());
    assert!(compute_pq(&Panoptic::void(2, 2), &Panoptic::void(2, 3), &v).is_err());
}

#[test]
fn identical_maps_score_one() {
    let data = scenes(100);
    let mut acc = PqAccumulator::new(data.vocab.clone());
    for ex in &data.examples {
        let r = compute_pq(&ex.gt, &ex.gt, &data.vocab).unwrap();
        for c in r.classes.iter().filter(|c| c.tally.present()) {
            assert_eq!(c.tally.pq(), 1.0);
            assert_eq!((c.tally.fp, c.tally.fn_), (0, 0));
        }
        assert_eq!(r.all.pq, 1.0);
        acc.add(&ex.gt, &ex.gt).unwrap();
    }
    let r = acc.report();
    assert_eq!((r.all.pq, r.things.pq, r.stuff.pq), (1.0, 1.0, 1.0));
    assert_eq!(r.all.classes, data.vocab.len());
}

fn single_class_map(len: usize, segments: &[(u32, std::ops::Range<usize>)]) -> Panoptic {
    let mut map = Panoptic::void(1, len);
    for (id, range) in segments {
        map.ids[range.clone()].fill(*id);
        map.segments.push(Segment { id: *id, class: 0 });
    }
    map
}

#[test]
fn iou_of_point_four_is_unmatched() {
    let gt = single_class_map(20, &[(1, 0..10)]);
    let pred = single_class_map(20, &[(7, 0..4)]);
    let r = compute_pq(&pred, &gt, &vocab()).unwrap();
    let t = r.classes[0].tally;
    assert_eq!((t.tp, t.fp, t.fn_), (0, 1, 1));
    assert_eq!(t.pq(), 0.0);
}

#[test]
fn one_match_plus_one_false_positive() {
    let gt = single_class_map(20, &[(1, 0..10)]);
    let pred = single_class_map(20, &[(3, 0..6), (4, 6..10)]);
    let r = compute_pq(&pred, &gt, &vocab()).unwrap();
    let t = r.classes[0].tally;
    assert_eq!((t.tp, t.fp, t.fn_), (1, 1, 0));
    assert!((t.sq() - 0.6).abs() < 1e-12);
    assert!((t.rq() - 1.0 / 1.5).abs() < 1e-12);
    assert!((t.pq() - 0.4).abs() < 1e-12);
    assert!((t.pq() - t.sq() * t.rq()).abs() < 1e-15);
    assert_eq!(r.all.classes, 1);
}

#[test]
fn void_ground_truth_is_left_out_of_the_union() {
    // 6 of 10 predicted pixels lie on the segment, 4 on void: IoU 6/6.
    let gt = single_class_map(20, &[(1, 0..6)]);
    let pred = single_class_map(20, &[(2, 0..10)]);
    let r = compute_pq(&pred, &gt, &vocab()).unwrap();
    assert_eq!(r.classes[0].tally.tp, 1);
    assert_eq!(r.classes[0].tally.pq(), 1.0);
    // A prediction mostly on void is not a false positive.
    let pred = single_class_map(20, &[(2, 8..20)]);
    let t = compute_pq(&pred, &gt, &vocab()).unwrap().classes[0].tally;
    assert_eq!((t.tp, t.fp, t.fn_), (0, 0, 1));
}

#[test]
fn csv_lists_classes_and_aggregates() {
    let data = scenes(3);
    let ex = &data.examples[0];
    let csv = compute_pq(&ex.gt, &ex.gt, &data.vocab).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,PQ,SQ,RQ,TP,FP,FN");
    assert_eq!(lines.len(), 1 + data.vocab.len() + 3);
    assert!(lines[1].starts_with("circle,"));
    assert!(lines[data.vocab.len() + 1].starts_with("ALL,1.000000,1.000000,1.000000,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 7));
}

fn random_outputs(n: usize, p: usize, classes: usize, seed: u64) -> (Tensor, Tensor) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let masks = Tensor::from_fn(&[n, p], |_| rng.random::<f64>());
    let mut probs = Tensor::from_fn(&[n, classes + 1], |_| rng.random::<f64>().powi(4));
    for row in probs.data_mut().chunks_mut(classes + 1) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    (masks, probs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inference_is_idempotent(seed in any::<u64>(), n in 2usize..8) {
        let v = vocab();
        let t = Thresholds { stuff_area: 0.0, thing_area: 0.0, class_confidence: 0.5, ..Thresholds::default() };
        let (m, p) = random_outputs(n, 36, v.len(), seed);
        let first = panoptic_inference(&m, &p, 6, 6, &v, &t).unwrap();
        let (m2, p2) = one_hot_outputs(&first, &v, 3);
        let second = panoptic_inference(&m2, &p2, 6, 6, &v, &t).unwrap();
        prop_assert!(same_up_to_ids(&first, &second));
    }

    #[test]
    fn lower_class_threshold_keeps_at_least_as_many_slots(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let v = vocab();
        let (_, p) = random_outputs(8, 4, v.len(), seed);
        let (lo, hi) = (a.min(b), a.max(b));
        let count = |c: f64| {
            let t = Thresholds { class_confidence: c, ..Thresholds::default() };
            slot_classes(&p, &v, &t).iter().filter(|s| s.is_some()).count()
        };
        prop_assert!(count(lo) >= count(hi));
    }

    #[test]
    fn pq_is_sq_times_rq(seed in any::<u64>(), n in 2usize..10) {
        let data = scenes(1);
        let gt = &data.examples[0].gt;
        let t = Thresholds { stuff_area: 0.0, thing_area: 0.0, class_confidence: 0.3, mask_confidence: 0.0 };
        let (m, p) = random_outputs(n, gt.ids.len(), data.vocab.len(), seed);
        let pred = panoptic_inference(&m, &p, gt.height, gt.width, &data.vocab, &t).unwrap();
        let r = compute_pq(&pred, gt, &data.vocab).unwrap();
        for c in &r.classes {
            prop_assert!((c.tally.pq() - c.tally.sq() * c.tally.rq()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&c.tally.pq()));
        }
    }
}
