//! Every differentiable operation against central differences, 100 random
//! instances each.

use masktx_tensor::gradcheck::{check_gradients, weighted_probe, DEFAULT_STEP, DEFAULT_TOLERANCE};
use masktx_tensor::{Graph, NormStats, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// Checks `op` over random inputs drawn by `gen`; the output is probed with
/// random weights.
fn check_op<G, F>(name: &str, mut gen: G, op: F)
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs = gen(&mut rng);
        let shape = {
            let mut g = Graph::new();
            let leaves: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
            let y = op(&mut g, &leaves).unwrap();
            g.shape(y).to_vec()
        };
        let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let report = check_gradients(&inputs, DEFAULT_STEP, |g, xs| {
            let y = op(g, xs)?;
            weighted_probe(g, y, &w)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(report.passes(DEFAULT_TOLERANCE), "{name} seed {seed}: {report:?}");
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

fn two_broadcastable(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<Tensor> {
    let a = rand_shape(rng, 3, 3);
    let b: Vec<usize> = a.iter().map(|&d| if rng.random_bool(0.3) { 1 } else { d }).collect();
    let b = if rng.random_bool(0.3) { b[1..].to_vec() } else { b };
    vec![rand_tensor(rng, &a, lo, hi), rand_tensor(rng, &b, lo, hi)]
}

#[test]
fn elementwise_binary() {
    check_op("add", |r| two_broadcastable(r, -2.0, 2.0), |g, x| g.add(x[0], x[1]));
    check_op("sub", |r| two_broadcastable(r, -2.0, 2.0), |g, x| g.sub(x[0], x[1]));
    check_op("mul", |r| two_broadcastable(r, -2.0, 2.0), |g, x| g.mul(x[0], x[1]));
    check_op("div", |r| two_broadcastable(r, 0.5, 2.0), |g, x| g.div(x[0], x[1]));
}

#[test]
fn elementwise_unary() {
    let gen = |r: &mut ChaCha8Rng| {
        let s = rand_shape(r, 2, 4);
        vec![rand_tensor(r, &s, -2.0, 2.0)]
    };
    let pos = |r: &mut ChaCha8Rng| {
        let s = rand_shape(r, 2, 4);
        vec![rand_tensor(r, &s, 0.2, 3.0)]
    };
    check_op("exp", gen, |g, x| Ok(g.exp(x[0])));
    check_op("log", pos, |g, x| Ok(g.log(x[0])));
    check_op("sqrt", pos, |g, x| Ok(g.sqrt(x[0])));
    check_op("silu", gen, |g, x| Ok(g.silu(x[0])));
    check_op("scale", gen, |g, x| Ok(g.scale(x[0], -1.7)));
    check_op("add_scalar", gen, |g, x| Ok(g.add_scalar(x[0], 0.3)));
}

#[test]
fn reductions_and_layout() {
    let gen = |r: &mut ChaCha8Rng| {
        let s = rand_shape(r, 3, 3);
        vec![rand_tensor(r, &s, -2.0, 2.0)]
    };
    for axis in 0..3 {
        check_op("sum_axis", gen, move |g, x| g.sum_axis(x[0], axis));
        check_op("mean_axis", gen, move |g, x| g.mean_axis(x[0], axis));
        check_op("softmax", gen, move |g, x| g.softmax(x[0], axis));
        check_op("log_softmax", gen, move |g, x| g.log_softmax(x[0], axis));
    }
    check_op("sum_all", gen, |g, x| Ok(g.sum_all(x[0])));
    check_op("mean_all", gen, |g, x| Ok(g.mean_all(x[0])));
    check_op("permute", gen, |g, x| g.permute(x[0], &[2, 0, 1]));
    check_op("reshape", gen, |g, x| {
        let n = g.value(x[0]).numel();
        g.reshape(x[0], &[n])
    });
    check_op(
        "concat",
        |r| {
            let a = rand_shape(r, 3, 3);
            let mut b = a.clone();
            b[1] = r.random_range(1..=3);
            vec![rand_tensor(r, &a, -1.0, 1.0), rand_tensor(r, &b, -1.0, 1.0)]
        },
        |g, x| g.concat(&[x[0], x[1], x[0]], 1),
    );
    check_op("index_select", gen, |g, x| {
        let n = g.shape(x[0])[0];
        g.index_select(x[0], &[n - 1, 0, n - 1])
    });
    check_op("take", gen, |g, x| {
        let n = g.value(x[0]).numel();
        g.take(x[0], &[0, n - 1, n / 2, 0])
    });
}

#[test]
fn products() {
    check_op(
        "matmul",
        |r| {
            let (m, k, p) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            vec![rand_tensor(r, &[m, k], -1.0, 1.0), rand_tensor(r, &[k, p], -1.0, 1.0)]
        },
        |g, x| g.matmul(x[0], x[1]),
    );
    check_op(
        "batch_matmul",
        |r| {
            let (b, m, k, p) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            vec![rand_tensor(r, &[b, m, k], -1.0, 1.0), rand_tensor(r, &[b, k, p], -1.0, 1.0)]
        },
        |g, x| g.batch_matmul(x[0], x[1]),
    );
}

#[test]
fn spatial() {
    for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
        check_op(
            "conv2d",
            |r| {
                let (c, h, w, o) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..6), r.random_range(1..3));
                vec![rand_tensor(r, &[c, h, w], -1.0, 1.0), rand_tensor(r, &[o, c, k, k], -1.0, 1.0)]
            },
            move |g, x| g.conv2d(x[0], x[1], stride),
        );
    }
    check_op(
        "bilinear_resize",
        |r| {
            let s = [r.random_range(1..3), r.random_range(1..5), r.random_range(1..5)];
            vec![rand_tensor(r, &s, -1.0, 1.0)]
        },
        |g, x| {
            let s = g.shape(x[0]).to_vec();
            g.bilinear_resize(x[0], s[1] * 2 + 1, (s[2] + 1) / 2)
        },
    );
}

#[test]
fn batch_norm_both_modes() {
    for axis in 0..2 {
        let gen = move |r: &mut ChaCha8Rng| {
            let mut s = vec![r.random_range(2..5), r.random_range(2..5)];
            s.push(r.random_range(1..3));
            let c = s[axis];
            vec![
                rand_tensor(r, &s, -2.0, 2.0),
                rand_tensor(r, &[c], 0.5, 1.5),
                rand_tensor(r, &[c], -0.5, 0.5),
            ]
        };
        check_op("batch_norm(batch)", gen, move |g, x| {
            Ok(g.batch_norm(x[0], x[1], x[2], axis, NormStats::Batch, 1e-5)?.0)
        });
        check_op("batch_norm(running)", gen, move |g, x| {
            let c = g.shape(x[0])[axis];
            let mean = vec![0.1; c];
            let var = vec![0.7; c];
            Ok(g
                .batch_norm(x[0], x[1], x[2], axis, NormStats::Running { mean: &mean, var: &var }, 1e-5)?
                .0)
        });
    }
}

#[test]
fn composed_expression() {
    check_op(
        "composed",
        |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
        |g, x| {
            let y = g.matmul(x[0], x[1])?;
            let s = g.silu(y);
            let p = g.softmax(s, 0)?;
            let t = g.transpose(p)?;
            let l = g.log(t);
            g.mul(l, t)
        },
    );
}
