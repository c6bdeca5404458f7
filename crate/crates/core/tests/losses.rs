use masktx::config::{LossConfig, SimilarityMode};
use masktx::losses::{
    instance_discrimination_loss, mask_id_cross_entropy, match_predictions, pq_loss, pq_loss_neg, pq_loss_pos, pq_pos_terms,
    semantic_loss, total_loss, LossInputs, Target,
};
use masktx::matching::{hungarian_match, MatchAssignment};
use masktx_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn value(g: &Graph, v: masktx_tensor::Var) -> f64 {
    g.value(v).item().unwrap()
}

/// One 4-pixel mask `[1,1,0,0]` of class 0.
fn one_mask_target() -> Target {
    Target {
        classes: vec![0],
        masks: vec![vec![1.0, 1.0, 0.0, 0.0]],
        areas: vec![2.0],
        owner: vec![Some(0), Some(0), None, None],
        owner_low: vec![Some(0)],
        semantic_low: vec![Some(0)],
    }
}

fn single_pair() -> MatchAssignment {
    MatchAssignment { pairs: vec![(0, 0)], similarities: vec![0.25], negatives: vec![] }
}

#[test]
fn positive_term_with_half_probability_and_half_dice() {
    let mut g = Graph::new();
    let masks = g.constant(Tensor::full(&[1, 4], 0.5));
    let probs = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let l = pq_loss_pos(&mut g, masks, probs, &one_mask_target(), &single_pair(), SimilarityMode::Product, None).unwrap();
    let expected = 0.5 * -0.5 + 0.5 * -(0.5f64.ln());
    assert!((value(&g, l) - expected).abs() < 1e-6);
    assert!((value(&g, l) - 0.0966).abs() < 1e-4);
}

#[test]
fn positive_term_saturates_at_minus_one() {
    let mut g = Graph::new();
    let masks = g.constant(Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let probs = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let l = pq_loss_pos(&mut g, masks, probs, &one_mask_target(), &single_pair(), SimilarityMode::Product, None).unwrap();
    assert!((value(&g, l) + 1.0).abs() < 1e-6);
}

#[test]
fn positive_term_needs_a_pair() {
    let mut g = Graph::new();
    let masks = g.constant(Tensor::full(&[1, 4], 1.0));
    let probs = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let empty = MatchAssignment { pairs: vec![], similarities: vec![], negatives: vec![0] };
    assert!(pq_loss_pos(&mut g, masks, probs, &one_mask_target(), &empty, SimilarityMode::Product, None).is_err());
}

#[test]
fn negative_term_examples() {
    let mut g = Graph::new();
    let probs = g.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.0, 1.0]).unwrap());
    let one = pq_loss_neg(&mut g, probs, &[0]).unwrap();
    assert!((value(&g, one) - std::f64::consts::LN_2).abs() < 1e-12);
    let sure = pq_loss_neg(&mut g, probs, &[1]).unwrap();
    assert_eq!(value(&g, sure), 0.0);
    let none = pq_loss_neg(&mut g, probs, &[]).unwrap();
    assert_eq!(value(&g, none), 0.0);
}

fn two_slot_case(g: &mut Graph) -> (masktx_tensor::Var, masktx_tensor::Var, MatchAssignment) {
    let masks = g.constant(Tensor::full(&[2, 4], 0.5));
    let probs = g.constant(Tensor::full(&[2, 2], 0.5));
    let assign = match_predictions(&one_mask_target(), g.value(masks), g.value(probs), SimilarityMode::Product).unwrap();
    (masks, probs, assign)
}

#[test]
fn pq_loss_is_the_normalized_alpha_combination() {
    let pos = 0.5 * -0.5 + 0.5 * -(0.5f64.ln());
    let neg = std::f64::consts::LN_2;
    for alpha in [0.0, 0.75, 1.0] {
        let mut g = Graph::new();
        let (masks, probs, assign) = two_slot_case(&mut g);
        assert_eq!(assign.pairs, vec![(0, 0)]);
        assert_eq!(assign.negatives, vec![1]);
        let cfg = LossConfig { alpha, ..LossConfig::default() };
        let l = pq_loss(&mut g, masks, probs, &one_mask_target(), &assign, &cfg).unwrap();
        let expected = cfg.pq_weight * (alpha * pos + (1.0 - alpha) * neg) / 2.0;
        assert!((value(&g, l.total) - expected).abs() < 1e-6, "alpha {alpha}");
    }
}

#[test]
fn instance_discrimination_examples() {
    // Pixels equal to their own mask embedding, orthogonal across masks.
    let embed = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    let owner = [Some(0), Some(0), Some(1), Some(1)];
    let mut g = Graph::new();
    let e = g.constant(embed);
    let l = instance_discrimination_loss(&mut g, e, &owner, 0.3).unwrap();
    let tau: f64 = 0.3;
    let expected = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0)).ln();
    assert!((value(&g, l) - expected).abs() < 1e-12);
    assert!((value(&g, l) - 0.0351).abs() < 1e-4);

    let single = [Some(0), Some(0), None, Some(0)];
    let l = instance_discrimination_loss(&mut g, e, &single, 0.3).unwrap();
    assert!(value(&g, l).abs() < 1e-12);

    let nobody = [None; 4];
    let l = instance_discrimination_loss(&mut g, e, &nobody, 0.3).unwrap();
    assert_eq!(value(&g, l), 0.0);
}

#[test]
fn mask_id_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::full(&[4, 3], 0.25));
    let owner = [Some(0), None, Some(1)];
    let assign = MatchAssignment { pairs: vec![(0, 2), (1, 0)], similarities: vec![0.0; 2], negatives: vec![1, 3] };
    let l = mask_id_cross_entropy(&mut g, uniform, &owner, &assign).unwrap();
    assert!((value(&g, l) - 4f64.ln()).abs() < 1e-12);

    let mut onehot = vec![0.0; 12];
    onehot[2 * 3] = 1.0;
    onehot[2] = 1.0;
    onehot[3 + 1] = 1.0;
    let m = g.constant(Tensor::new(vec![4, 3], onehot).unwrap());
    let l = mask_id_cross_entropy(&mut g, m, &owner, &assign).unwrap();
    assert!(value(&g, l).abs() < 1e-12);

    let l = mask_id_cross_entropy(&mut g, uniform, &[None; 3], &assign).unwrap();
    assert_eq!(value(&g, l), 0.0);
}

#[test]
fn semantic_examples() {
    let mut g = Graph::new();
    let labels = [Some(0), Some(2), None, Some(1)];
    let flat = g.constant(Tensor::zeros(&[3, 4]));
    let l = semantic_loss(&mut g, flat, &labels).unwrap();
    assert!((value(&g, l) - 3f64.ln()).abs() < 1e-12);

    let mut sharp = vec![-20.0; 12];
    for (px, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            sharp[c * 4 + px] = 20.0;
        }
    }
    let s = g.constant(Tensor::new(vec![3, 4], sharp).unwrap());
    let l = semantic_loss(&mut g, s, &labels).unwrap();
    assert!(value(&g, l) < 1e-15);

    // Relabeling classes and channels consistently.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0));
    let perm = [2, 0, 1];
    let permuted = Tensor::from_fn(&[3, 4], |i| logits.data()[perm[i / 4] * 4 + i % 4]);
    let inverse = |c: usize| perm.iter().position(|&p| p == c).unwrap();
    let relabeled: Vec<Option<usize>> = labels.iter().map(|l| l.map(inverse)).collect();
    let a = g.constant(logits);
    let b = g.constant(permuted);
    let la = semantic_loss(&mut g, a, &labels).unwrap();
    let lb = semantic_loss(&mut g, b, &relabeled).unwrap();
    assert!((value(&g, la) - value(&g, lb)).abs() < 1e-12);
}

/// A random instance: `k` ground-truth masks on a 4x4 grid (stride-4 grid
/// is 1x1) and `n` slots.
struct Instance {
    target: Target,
    masks: Tensor,
    probs: Tensor,
    embed: Tensor,
    semantic: Tensor,
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Instance {
    let p = 16;
    let k = rng.random_range(1..=n.min(3));
    let owner: Vec<Option<usize>> =
        (0..p).map(|i| if i < k { Some(i) } else if rng.random_bool(0.8) { Some(rng.random_range(0..k)) } else { None }).collect();
    let mut masks = vec![vec![0.0; p]; k];
    for (i, o) in owner.iter().enumerate() {
        if let Some(o) = o {
            masks[*o][i] = 1.0;
        }
    }
    let target = Target {
        classes: (0..k).map(|_| rng.random_range(0..classes)).collect(),
        areas: masks.iter().map(|m| m.iter().sum()).collect(),
        masks,
        owner_low: vec![owner[0]],
        semantic_low: vec![Some(0)],
        owner,
    };
    let softmax_rows = |t: Tensor, axis: usize| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let s = g.softmax(v, axis).unwrap();
        g.value(s).clone()
    };
    Instance {
        masks: softmax_rows(Tensor::from_fn(&[n, p], |_| rng.random_range(-3.0..3.0)), 0),
        probs: softmax_rows(Tensor::from_fn(&[n, classes + 1], |_| rng.random_range(-3.0..3.0)), 1),
        embed: {
            let raw = Tensor::from_fn(&[3, 1], |_| rng.random_range(-1.0..1.0));
            let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.map(|v| v / norm)
        },
        semantic: Tensor::from_fn(&[classes, 1], |_| rng.random_range(-1.0..1.0)),
        target,
    }
}

fn total_of(inst: &Instance, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let out = LossInputs {
        masks: g.constant(inst.masks.clone()),
        probs: g.constant(inst.probs.clone()),
        embed: g.constant(inst.embed.clone()),
        semantic: g.constant(inst.semantic.clone()),
    };
    let t = total_loss(&mut g, out, &inst.target, cfg).unwrap();
    value(&g, t.total)
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 5, 3);
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let masks = g.constant(inst.masks.clone());
        let probs = g.constant(inst.probs.clone());
        let embed = g.constant(inst.embed.clone());
        let sem = g.constant(inst.semantic.clone());
        let assign = match_predictions(&inst.target, &inst.masks, &inst.probs, cfg.similarity).unwrap();
        let pq = pq_loss(&mut g, masks, probs, &inst.target, &assign, &cfg).unwrap();
        let id = instance_discrimination_loss(&mut g, embed, &inst.target.owner_low, cfg.tau).unwrap();
        let mi = mask_id_cross_entropy(&mut g, masks, &inst.target.owner, &assign).unwrap();
        let se = semantic_loss(&mut g, sem, &inst.target.semantic_low).unwrap();
        let expected = value(&g, pq.total)
            + cfg.instdis_weight * value(&g, id)
            + cfg.maskid_weight * value(&g, mi)
            + cfg.semantic_weight * value(&g, se);
        assert!((total_of(&inst, &cfg) - expected).abs() < 1e-12);

        let pq_only = LossConfig { instdis_weight: 0.0, maskid_weight: 0.0, semantic_weight: 0.0, ..cfg.clone() };
        assert!((total_of(&inst, &pq_only) - value(&g, pq.total)).abs() < 1e-12);

        let doubled = LossConfig {
            pq_weight: 2.0 * cfg.pq_weight,
            instdis_weight: 2.0 * cfg.instdis_weight,
            maskid_weight: 2.0 * cfg.maskid_weight,
            semantic_weight: 2.0 * cfg.semantic_weight,
            ..cfg.clone()
        };
        assert!((total_of(&inst, &doubled) - 2.0 * total_of(&inst, &cfg)).abs() < 1e-12);
    }
}

#[test]
fn losses_are_invariant_to_slot_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [SimilarityMode::Product, SimilarityMode::Sum] {
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 6, 3);
            let n = 6;
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permute = |t: &Tensor| {
                let cols = t.shape()[1];
                Tensor::from_fn(t.shape(), |i| t.data()[perm[i / cols] * cols + i % cols])
            };
            let shuffled = Instance {
                masks: permute(&inst.masks),
                probs: permute(&inst.probs),
                embed: inst.embed.clone(),
                semantic: inst.semantic.clone(),
                target: inst.target.clone(),
            };
            let cfg = LossConfig { similarity: mode, ..LossConfig::default() };
            assert!((total_of(&inst, &cfg) - total_of(&shuffled, &cfg)).abs() < 1e-9);
        }
    }
}

#[test]
fn dice_weight_passes_no_gradient_to_the_class_head() {
    let target = one_mask_target();
    let assign = single_pair();
    let dice_term_at = |logits: &Tensor| {
        let mut g = Graph::new();
        let masks = g.constant(Tensor::new(vec![1, 4], vec![0.7, 0.4, 0.2, 0.1]).unwrap());
        let l = g.leaf(logits.clone());
        let probs = g.softmax(l, 1).unwrap();
        let t = pq_pos_terms(&mut g, masks, probs, &target, &assign, SimilarityMode::Product, None).unwrap();
        let grads = g.backward(t.dice_term).unwrap();
        (value(&g, t.dice_term), grads.get(l).unwrap().clone())
    };
    let a = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![1.3, -0.2]).unwrap();
    let (va, ga) = dice_term_at(&a);
    let (vb, _) = dice_term_at(&b);
    assert!((va - vb).abs() > 1e-3, "the weight must follow the class probability");
    assert!(ga.data().iter().all(|&v| v == 0.0), "gradient through the weight: {ga:?}");
}

#[test]
fn losses_stay_finite_on_saturated_inputs() {
    let mut g = Graph::new();
    let target = one_mask_target();
    let masks = g.constant(Tensor::new(vec![2, 4], vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
    let probs = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let assign = hungarian_match(&[vec![0.0, 0.0]]).unwrap();
    let cfg = LossConfig::default();
    let pq = pq_loss(&mut g, masks, probs, &target, &assign, &cfg).unwrap();
    let mi = mask_id_cross_entropy(&mut g, masks, &target.owner, &assign).unwrap();
    assert!(value(&g, pq.total).is_finite());
    assert!(value(&g, mi).is_finite());
}
