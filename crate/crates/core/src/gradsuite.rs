//! Finite-difference gradient checks over random toy instances, grouped by
//! module. Large parameter sets are checked on a random subset of
//! coordinates per instance.

use std::fmt;

use masktx_tensor::gradcheck::{check_gradients, relative_error, weighted_probe, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use masktx_tensor::{Graph, NormStats, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, P2pMode, SimilarityMode};
use crate::error::{Error, Result};
use crate::losses::{
    frozen_pos_weights, instance_discrimination_loss, mask_id_cross_entropy, match_predictions, pq_loss_neg, pq_loss_pos,
    pq_pos_terms, semantic_loss, Target,
};
use crate::model::{l2_normalize_columns, Model};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::panoptic::{Panoptic, Segment};
use crate::transformer::{
    axial_attention, dense_self_attention, m2p_m2m_attention, multi_head, p2m_attention, Attention, AttentionConfig, Axis,
    BlockConfig, DualPathBlock, Ffn, JointAttention,
};

pub const DEFAULT_INSTANCES: usize = 100;
/// Coordinates checked per instance when a check has more than this many.
pub const COORDINATES_PER_INSTANCE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Transformer,
    Losses,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Tensor, Suite::Transformer, Suite::Losses, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Transformer => "transformer",
            Suite::Losses => "losses",
            Suite::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Outcome of one named check over all its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.max_rel_error < DEFAULT_TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: {} instances, {} coordinates, max rel error {:.3e} (analytic {:.6e}, numeric {:.6e})",
            if self.passes() { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.instances,
            self.coordinates,
            self.max_rel_error,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

struct Tally {
    result: CheckResult,
}

impl Tally {
    fn new(suite: Suite, name: &str) -> Self {
        Tally {
            result: CheckResult {
                suite,
                name: name.to_string(),
                instances: 0,
                coordinates: 0,
                max_rel_error: 0.0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
            },
        }
    }

    fn add(&mut self, r: &GradCheckReport) {
        let t = &mut self.result;
        t.instances += 1;
        t.coordinates += r.checked;
        if !(r.max_rel_error <= t.max_rel_error) {
            t.max_rel_error = r.max_rel_error;
            t.worst_analytic = r.analytic;
            t.worst_numeric = r.numeric;
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs `make` for `instances` seeds and aggregates the reports.
fn repeat(
    suite: Suite,
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>,
) -> Result<CheckResult> {
    let mut tally = Tally::new(suite, name);
    for _ in 0..instances {
        let r = make(rng)?;
        tally.add(&r);
    }
    Ok(tally.result)
}

/// Pure-graph check with a random probe on the output.
fn check_op(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let y = f(&mut g, &leaves)?;
    let probe = uniform(rng, g.shape(y), -1.0, 1.0);
    Ok(check_gradients(&inputs, DEFAULT_STEP, |g, xs| {
        let y = f(g, xs).map_err(|e| masktx_tensor::TensorError::Contract(e.to_string()))?;
        weighted_probe(g, y, &probe)
    })?)
}

enum Coord {
    Param(usize, usize),
    Input(usize, usize),
}

/// Checks gradients with respect to both the parameters in `store` and the
/// explicit `inputs`. `f` must return a scalar. At most `limit` coordinates
/// are sampled.
fn check_with_params(
    rng: &mut ChaCha8Rng,
    store: &ParamStore,
    inputs: &[Tensor],
    limit: usize,
    f: impl Fn(&mut Ctx, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let train = true;
    let eval = |s: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut ctx = Ctx::new(s, train);
        let leaves: Vec<Var> = xs.iter().map(|x| ctx.g.leaf(x.clone())).collect();
        let out = f(&mut ctx, &leaves)?;
        Ok(ctx.g.value(out).item().unwrap_or(f64::NAN))
    };
    let mut ctx = Ctx::new(store, train);
    let leaves: Vec<Var> = inputs.iter().map(|x| ctx.g.leaf(x.clone())).collect();
    let out = f(&mut ctx, &leaves)?;
    let grads = ctx.g.backward(out)?;
    let param_grads = ctx.param_grads(&grads);
    let input_grads: Vec<Tensor> =
        leaves.iter().map(|&l| grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(ctx.g.shape(l)))).collect();

    let mut coords = Vec::new();
    for (k, t) in param_grads.iter().enumerate() {
        coords.extend((0..t.numel()).map(|i| Coord::Param(k, i)));
    }
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.numel()).map(|i| Coord::Input(k, i)));
    }
    let chosen: Vec<usize> =
        if coords.len() <= limit { (0..coords.len()).collect() } else { sample(rng, coords.len(), limit).into_vec() };

    let mut s = store.clone();
    let mut xs = inputs.to_vec();
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let h = DEFAULT_STEP;
    for c in chosen {
        let (analytic, numeric, key) = match coords[c] {
            Coord::Param(k, i) => {
                let orig = s.get(ids[k]).data()[i];
                s.get_mut(ids[k]).data_mut()[i] = orig + h;
                let plus = eval(&s, &xs)?;
                s.get_mut(ids[k]).data_mut()[i] = orig - h;
                let minus = eval(&s, &xs)?;
                s.get_mut(ids[k]).data_mut()[i] = orig;
                (param_grads[k].data()[i], (plus - minus) / (2.0 * h), (k, i))
            }
            Coord::Input(k, i) => {
                let orig = xs[k].data()[i];
                xs[k].data_mut()[i] = orig + h;
                let plus = eval(&s, &xs)?;
                xs[k].data_mut()[i] = orig - h;
                let minus = eval(&s, &xs)?;
                xs[k].data_mut()[i] = orig;
                (input_grads[k].data()[i], (plus - minus) / (2.0 * h), (ids.len() + k, i))
            }
        };
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = key;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Sum of random-weighted outputs, with the weights fixed per instance.
struct Probes(Vec<Tensor>);

impl Probes {
    fn new(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Self {
        Probes(shapes.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect())
    }

    fn apply(&self, g: &mut Graph, ys: &[Var]) -> Result<Var> {
        let mut total = None;
        for (y, w) in ys.iter().zip(&self.0) {
            let p = weighted_probe(g, *y, w)?;
            total = Some(match total {
                None => p,
                Some(t) => g.add(t, p)?,
            });
        }
        total.ok_or_else(|| Error::Contract("no outputs to probe".into()))
    }
}

/// Builds the parameters, records output shapes with one forward pass, and
/// checks a random probe of the outputs.
fn check_module<M>(
    rng: &mut ChaCha8Rng,
    limit: usize,
    build: impl FnOnce(&mut Builder) -> M,
    inputs: Vec<Tensor>,
    forward: impl Fn(&M, &mut Ctx, &[Var]) -> Result<Vec<Var>>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::default();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let module = build(&mut Builder::new(&mut store, &mut init));
    // Move biases and norm affine terms off their constant initial values.
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let shapes = {
        let mut ctx = Ctx::new(&store, true);
        let leaves: Vec<Var> = inputs.iter().map(|x| ctx.g.leaf(x.clone())).collect();
        let ys = forward(&module, &mut ctx, &leaves)?;
        ys.iter().map(|&y| ctx.g.shape(y).to_vec()).collect::<Vec<_>>()
    };
    let probes = Probes::new(rng, &shapes);
    check_with_params(rng, &store, &inputs, limit, |ctx, xs| {
        let ys = forward(&module, ctx, xs)?;
        probes.apply(&mut ctx.g, &ys)
    })
}

pub fn run_suite(suite: Suite, instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite as u64);
    match suite {
        Suite::Tensor => tensor_suite(&mut rng, instances),
        Suite::Transformer => transformer_suite(&mut rng, instances),
        Suite::Losses => losses_suite(&mut rng, instances),
        Suite::Model => model_suite(&mut rng, instances),
    }
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, instances, seed)?);
    }
    Ok(out)
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Result<GradCheckReport>);

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// Randomly drops some dimensions of `shape` to 1 (for broadcasting).
fn broadcastable(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().map(|&d| if rng.random_bool(0.4) { 1 } else { d }).collect();
    if rng.random_bool(0.3) && !s.is_empty() {
        s.remove(0);
    }
    s
}

fn binary(rng: &mut ChaCha8Rng, positive_rhs: bool) -> Vec<Tensor> {
    let rank = rng.random_range(1..=3);
    let a = dims(rng, rank, 4);
    let b = broadcastable(rng, &a);
    let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    let lhs = uniform(rng, &a, -1.5, 1.5);
    let rhs = if positive_rhs { uniform(rng, &b, 0.5, 2.0) } else { uniform(rng, &b, -1.5, 1.5) };
    vec![lhs, rhs]
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let rank = rng.random_range(0..=3);
    let s = dims(rng, rank, 4);
    uniform(rng, &s, lo, hi)
}

fn tensor_cases() -> Vec<OpCase> {
    vec![
        ("add", |r| {
            let x = binary(r, false);
            check_op(r, x, |g, v| Ok(g.add(v[0], v[1])?))
        }),
        ("sub", |r| {
            let x = binary(r, false);
            check_op(r, x, |g, v| Ok(g.sub(v[0], v[1])?))
        }),
        ("mul", |r| {
            let x = binary(r, false);
            check_op(r, x, |g, v| Ok(g.mul(v[0], v[1])?))
        }),
        ("div", |r| {
            let x = binary(r, true);
            check_op(r, x, |g, v| Ok(g.div(v[0], v[1])?))
        }),
        ("scale", |r| {
            let x = unary(r, -2.0, 2.0);
            let c = r.random_range(-3.0..3.0);
            check_op(r, vec![x], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("neg", |r| {
            let x = unary(r, -2.0, 2.0);
            check_op(r, vec![x], |g, v| Ok(g.neg(v[0])))
        }),
        ("add_scalar", |r| {
            let x = unary(r, -2.0, 2.0);
            check_op(r, vec![x], |g, v| Ok(g.add_scalar(v[0], 0.7)))
        }),
        ("exp", |r| {
            let x = unary(r, -2.0, 2.0);
            check_op(r, vec![x], |g, v| Ok(g.exp(v[0])))
        }),
        ("log", |r| {
            let x = unary(r, 0.2, 3.0);
            check_op(r, vec![x], |g, v| Ok(g.log(v[0])))
        }),
        ("sqrt", |r| {
            let x = unary(r, 0.2, 3.0);
            check_op(r, vec![x], |g, v| Ok(g.sqrt(v[0])))
        }),
        ("silu", |r| {
            let x = unary(r, -3.0, 3.0);
            check_op(r, vec![x], |g, v| Ok(g.silu(v[0])))
        }),
        ("sum_axis", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let x = uniform(r, &s, -1.0, 1.0);
            check_op(r, vec![x], move |g, v| Ok(g.sum_axis(v[0], axis)?))
        }),
        ("mean_axis", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let x = uniform(r, &s, -1.0, 1.0);
            check_op(r, vec![x], move |g, v| Ok(g.mean_axis(v[0], axis)?))
        }),
        ("sum_all", |r| {
            let x = unary(r, -1.0, 1.0);
            check_op(r, vec![x], |g, v| Ok(g.sum_all(v[0])))
        }),
        ("mean_all", |r| {
            let x = unary(r, -1.0, 1.0);
            check_op(r, vec![x], |g, v| Ok(g.mean_all(v[0])))
        }),
        ("concat", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 3);
            let axis = r.random_range(0..rank);
            let mut s2 = s.clone();
            s2[axis] = r.random_range(1..=3);
            let a = uniform(r, &s, -1.0, 1.0);
            let b = uniform(r, &s2, -1.0, 1.0);
            check_op(r, vec![a, b], move |g, v| Ok(g.concat(&[v[0], v[1], v[0]], axis)?))
        }),
        ("reshape", |r| {
            let s = dims(r, 3, 3);
            let x = uniform(r, &s, -1.0, 1.0);
            let target = vec![s[0] * s[1], s[2]];
            check_op(r, vec![x], move |g, v| Ok(g.reshape(v[0], &target)?))
        }),
        ("permute", |r| {
            let s = dims(r, 3, 4);
            let x = uniform(r, &s, -1.0, 1.0);
            let perms = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]];
            let p = perms[r.random_range(0..perms.len())];
            check_op(r, vec![x], move |g, v| Ok(g.permute(v[0], &p)?))
        }),
        ("transpose", |r| {
            let s = dims(r, 2, 5);
            let x = uniform(r, &s, -1.0, 1.0);
            check_op(r, vec![x], |g, v| Ok(g.transpose(v[0])?))
        }),
        ("matmul", |r| {
            let (m, k, p) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, p], -1.0, 1.0);
            check_op(r, vec![a, b], |g, v| Ok(g.matmul(v[0], v[1])?))
        }),
        ("batch_matmul", |r| {
            let (bt, m, k, p) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            let a = uniform(r, &[bt, m, k], -1.0, 1.0);
            let b = uniform(r, &[bt, k, p], -1.0, 1.0);
            check_op(r, vec![a, b], |g, v| Ok(g.batch_matmul(v[0], v[1])?))
        }),
        ("softmax", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let x = uniform(r, &s, -3.0, 3.0);
            check_op(r, vec![x], move |g, v| Ok(g.softmax(v[0], axis)?))
        }),
        ("log_softmax", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let x = uniform(r, &s, -3.0, 3.0);
            check_op(r, vec![x], move |g, v| Ok(g.log_softmax(v[0], axis)?))
        }),
        ("batch_norm_batch_stats", |r| {
            let rank = r.random_range(2..=3);
            let mut s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let c = s[axis];
            if s.iter().product::<usize>() / c < 2 {
                s[(axis + 1) % rank] = 3;
            }
            let x = uniform(r, &s, -2.0, 2.0);
            let gamma = uniform(r, &[c], 0.5, 1.5);
            let beta = uniform(r, &[c], -0.5, 0.5);
            check_op(r, vec![x, gamma, beta], move |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], axis, NormStats::Batch, 1e-5)?.0)
            })
        }),
        ("batch_norm_running_stats", |r| {
            let rank = r.random_range(1..=3);
            let s = dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let c = s[axis];
            let x = uniform(r, &s, -2.0, 2.0);
            let gamma = uniform(r, &[c], 0.5, 1.5);
            let beta = uniform(r, &[c], -0.5, 0.5);
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            check_op(r, vec![x, gamma, beta], move |g, v| {
                let stats = NormStats::Running { mean: &mean, var: &var };
                Ok(g.batch_norm(v[0], v[1], v[2], axis, stats, 1e-5)?.0)
            })
        }),
        ("conv2d", |r| {
            let c_in = r.random_range(1..=3);
            let c_out = r.random_range(1..=3);
            let k = [1, 3, 5][r.random_range(0..3)];
            let stride = r.random_range(1..=2);
            let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
            let x = uniform(r, &[c_in, h, w], -1.0, 1.0);
            let wt = uniform(r, &[c_out, c_in, k, k], -1.0, 1.0);
            check_op(r, vec![x, wt], move |g, v| Ok(g.conv2d(v[0], v[1], stride)?))
        }),
        ("bilinear_resize", |r| {
            let c = r.random_range(1..=2);
            let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
            let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
            let x = uniform(r, &[c, h, w], -1.0, 1.0);
            check_op(r, vec![x], move |g, v| Ok(g.bilinear_resize(v[0], oh, ow)?))
        }),
        ("index_select", |r| {
            let s = dims(r, 2, 4);
            let x = uniform(r, &s, -1.0, 1.0);
            let n = r.random_range(1..=5);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..s[0])).collect();
            check_op(r, vec![x], move |g, v| Ok(g.index_select(v[0], &idx)?))
        }),
        ("take", |r| {
            let x = unary(r, -1.0, 1.0);
            let n = r.random_range(1..=6);
            let len = x.numel();
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..len)).collect();
            check_op(r, vec![x], move |g, v| Ok(g.take(v[0], &idx)?))
        }),
        ("composed", |r| {
            let (m, k) = (r.random_range(1..4), r.random_range(2..5));
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, k], -1.0, 1.0);
            check_op(r, vec![a, b], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let s = g.softmax(y, 1)?;
                let l = g.log(s);
                let e = g.silu(y);
                let p = g.mul(l, e)?;
                let q = g.sqrt(s);
                Ok(g.sub(p, q)?)
            })
        }),
    ]
}

fn tensor_suite(rng: &mut ChaCha8Rng, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, case) in tensor_cases() {
        out.push(repeat(Suite::Tensor, name, instances, rng, case)?);
    }
    out.push(stop_gradient_check(rng, instances)?);
    Ok(out)
}

/// Gradients through a stop-gradient must be exactly zero; the reported
/// error is the largest gradient magnitude seen.
fn stop_gradient_check(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let mut tally = Tally::new(Suite::Tensor, "stop_gradient");
    for _ in 0..instances {
        let x = unary(rng, -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let s = g.stop_gradient(v);
        let e = g.exp(s);
        let l = g.sum_all(e);
        let grads = g.backward(l)?;
        let worst = grads.get(v).map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0);
        tally.add(&GradCheckReport { max_rel_error: worst, worst: (0, 0), analytic: worst, numeric: 0.0, checked: x.numel() });
    }
    Ok(tally.result)
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    uniform(rng, &[n, c], -1.0, 1.0)
}

fn transformer_suite(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<CheckResult>> {
    let s = Suite::Transformer;
    let mut out = Vec::new();
    out.push(repeat(s, "multi_head", n, rng, |r| {
        let heads = r.random_range(1..=3);
        let (t, sk) = (r.random_range(1..5), r.random_range(1..5));
        let (dq, dv) = (r.random_range(1..4), r.random_range(1..4));
        let q = tokens(r, t, heads * dq);
        let k = tokens(r, sk, heads * dq);
        let v = tokens(r, sk, heads * dv);
        let bias: Option<Vec<f64>> = r.random_bool(0.5).then(|| (0..sk).map(|_| r.random_range(-1.0..1.0)).collect());
        check_op(r, vec![q, k, v], move |g, x| Ok(multi_head(g, x[0], x[1], x[2], heads, bias.as_deref())?.0))
    })?);
    out.push(repeat(s, "p2m_attention", n, rng, |r| {
        let heads = r.random_range(1..=2);
        let (cp, cm) = (heads * r.random_range(1..=3), heads * r.random_range(1..=3));
        let (p, m) = (r.random_range(1..6), r.random_range(1..4));
        let inputs = vec![tokens(r, p, cp), tokens(r, m, cm)];
        check_module(
            r,
            COORDINATES_PER_INSTANCE,
            |b| Attention::build(b, "p2m", AttentionConfig::even(heads, cp, cm, cp)),
            inputs,
            |a, ctx, x| {
                let (o, w) = p2m_attention(ctx, a, x[0], x[1])?;
                Ok(vec![o, w])
            },
        )
    })?);
    out.push(repeat(s, "m2p_m2m_attention", n, rng, |r| {
        let heads = r.random_range(1..=2);
        let (cp, cm) = (heads * r.random_range(1..=3), heads * r.random_range(1..=3));
        let (p, m) = (r.random_range(1..6), r.random_range(1..4));
        let include = r.random_bool(0.5);
        let inputs = vec![tokens(r, p, cp), tokens(r, m, cm)];
        check_module(
            r,
            COORDINATES_PER_INSTANCE,
            |b| JointAttention::build(b, "m2pm", AttentionConfig::even(heads, cm, cp, cm)),
            inputs,
            move |a, ctx, x| {
                let (o, w) = m2p_m2m_attention(ctx, a, x[0], x[1], None, include)?;
                Ok(vec![o, w])
            },
        )
    })?);
    out.push(repeat(s, "axial_attention", n, rng, |r| {
        let heads = r.random_range(1..=2);
        let c = heads * r.random_range(1..=2);
        let (h, w) = (r.random_range(1..4), r.random_range(1..4));
        let axis = if r.random_bool(0.5) { Axis::Height } else { Axis::Width };
        let inputs = vec![tokens(r, h * w, c)];
        check_module(
            r,
            COORDINATES_PER_INSTANCE,
            |b| Attention::build(b, "axial", AttentionConfig::even(heads, c, c, c)),
            inputs,
            move |a, ctx, x| {
                let (o, wts) = axial_attention(ctx, a, x[0], h, w, axis)?;
                Ok(vec![o, wts])
            },
        )
    })?);
    out.push(repeat(s, "dense_self_attention", n, rng, |r| {
        let heads = r.random_range(1..=2);
        let c = heads * r.random_range(1..=2);
        let t = r.random_range(1..6);
        let inputs = vec![tokens(r, t, c)];
        check_module(
            r,
            COORDINATES_PER_INSTANCE,
            |b| Attention::build(b, "dense", AttentionConfig::even(heads, c, c, c)),
            inputs,
            |a, ctx, x| Ok(vec![dense_self_attention(ctx, a, x[0])?.0]),
        )
    })?);
    out.push(repeat(s, "ffn", n, rng, |r| {
        let c = r.random_range(1..5);
        let t = r.random_range(1..5);
        let inputs = vec![tokens(r, t, c)];
        check_module(r, COORDINATES_PER_INSTANCE, |b| Ffn::build(b, "ffn", c), inputs, |f, ctx, x| Ok(vec![f.apply(ctx, x[0])?]))
    })?);
    out.push(repeat(s, "dual_path_block", n, rng, |r| {
        let heads = r.random_range(1..=2);
        let cfg = BlockConfig {
            pixel_dim: heads * r.random_range(1..=2),
            memory_dim: heads * r.random_range(1..=2),
            heads,
            p2p: if r.random_bool(0.5) { P2pMode::Axial } else { P2pMode::Conv },
            p2m: r.random_bool(0.7),
            m2m: r.random_bool(0.7),
        };
        let (h, w) = (r.random_range(2..4), r.random_range(2..4));
        let m = r.random_range(2..4);
        let inputs = vec![tokens(r, h * w, cfg.pixel_dim), tokens(r, m, cfg.memory_dim)];
        check_module(
            r,
            COORDINATES_PER_INSTANCE,
            |b| DualPathBlock::build(b, "block", cfg),
            inputs,
            move |blk, ctx, x| {
                let (p, m) = blk.forward(ctx, x[0], x[1], h, w)?;
                Ok(vec![p, m])
            },
        )
    })?);
    Ok(out)
}

/// A random ground truth on an `h x w` grid (multiples of 4) with up to
/// `max_segments` segments over `classes` classes and some void.
fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, max_segments: usize) -> Target {
    loop {
        let k = rng.random_range(1..=max_segments);
        let segments: Vec<Segment> =
            (0..k).map(|i| Segment { id: i as u32 + 1, class: rng.random_range(0..classes) }).collect();
        let ids: Vec<u32> =
            (0..h * w).map(|_| if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=k as u32) }).collect();
        let mut map = Panoptic { height: h, width: w, ids, segments };
        let areas = map.areas();
        map.segments.retain(|s| areas.contains_key(&s.id));
        if map.segments.len() == k {
            return Target::new(&map);
        }
    }
}

struct LossCase {
    target: Target,
    n: usize,
    classes: usize,
    mask_logits: Tensor,
    class_logits: Tensor,
}

fn loss_case(rng: &mut ChaCha8Rng) -> LossCase {
    let classes = rng.random_range(2..=4);
    let target = random_target(rng, 8, 8, classes, 4);
    let n = rng.random_range(target.len()..=target.len() + 3);
    LossCase {
        mask_logits: uniform(rng, &[n, 64], -2.0, 2.0),
        class_logits: uniform(rng, &[n, classes + 1], -2.0, 2.0),
        target,
        n,
        classes,
    }
}

fn losses_suite(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<CheckResult>> {
    let s = Suite::Losses;
    let mut out = Vec::new();
    for (name, mode) in [("pq_loss_pos_product", SimilarityMode::Product), ("pq_loss_pos_sum", SimilarityMode::Sum)] {
        out.push(repeat(s, name, n, rng, |r| {
            let c = loss_case(r);
            let masks = softmax_value(&c.mask_logits, 0)?;
            let probs = softmax_value(&c.class_logits, 1)?;
            let assign = match_predictions(&c.target, &masks, &probs, mode)?;
            let weights = {
                let mut g = Graph::new();
                let m = g.constant(masks);
                let p = g.constant(probs);
                let terms = pq_pos_terms(&mut g, m, p, &c.target, &assign, mode, None)?;
                frozen_pos_weights(&g, &terms)
            };
            let weights = (mode == SimilarityMode::Product).then_some(weights);
            check_op(r, vec![c.mask_logits, c.class_logits], |g, v| {
                let m = g.softmax(v[0], 0)?;
                let p = g.softmax(v[1], 1)?;
                let l = pq_loss_pos(g, m, p, &c.target, &assign, mode, weights.as_ref())?;
                Ok(g.reshape(l, &[1])?)
            })
        })?);
    }
    out.push(repeat(s, "pq_loss_neg", n, rng, |r| {
        let c = loss_case(r);
        let negatives: Vec<usize> = (0..c.n).filter(|_| r.random_bool(0.6)).collect();
        let negatives = if negatives.is_empty() { vec![0] } else { negatives };
        check_op(r, vec![c.class_logits], move |g, v| {
            let p = g.softmax(v[0], 1)?;
            let l = pq_loss_neg(g, p, &negatives)?;
            Ok(g.reshape(l, &[1])?)
        })
    })?);
    out.push(repeat(s, "instance_discrimination", n, rng, |r| {
        let c = loss_case(r);
        let d = r.random_range(2..5);
        let raw = uniform(r, &[d, 4], -1.0, 1.0);
        let tau = r.random_range(0.2..1.0);
        let owner = c.target.owner_low.clone();
        check_op(r, vec![raw], move |g, v| {
            let e = l2_normalize_columns(g, v[0])?;
            let l = instance_discrimination_loss(g, e, &owner, tau)?;
            Ok(g.reshape(l, &[1])?)
        })
    })?);
    out.push(repeat(s, "mask_id_cross_entropy", n, rng, |r| {
        let c = loss_case(r);
        let masks = softmax_value(&c.mask_logits, 0)?;
        let probs = softmax_value(&c.class_logits, 1)?;
        let assign = match_predictions(&c.target, &masks, &probs, SimilarityMode::Product)?;
        let owner = c.target.owner.clone();
        check_op(r, vec![c.mask_logits], move |g, v| {
            let m = g.softmax(v[0], 0)?;
            let l = mask_id_cross_entropy(g, m, &owner, &assign)?;
            Ok(g.reshape(l, &[1])?)
        })
    })?);
    out.push(repeat(s, "semantic", n, rng, |r| {
        let c = loss_case(r);
        let logits = uniform(r, &[c.classes, 4], -2.0, 2.0);
        let labels = c.target.semantic_low.clone();
        check_op(r, vec![logits], move |g, v| {
            let l = semantic_loss(g, v[0], &labels)?;
            Ok(g.reshape(l, &[1])?)
        })
    })?);
    Ok(out)
}

fn softmax_value(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax(v, axis)?;
    Ok(g.value(s).clone())
}

/// A tiny model configuration for gradient checks; `variant` cycles through
/// pixel mixers, decoder depths and optional blocks.
pub fn tiny_model_config(variant: usize) -> ModelConfig {
    ModelConfig {
        height: if variant % 4 == 1 { 16 } else { 32 },
        width: if variant % 4 == 1 { 16 } else { 32 },
        num_classes: 3,
        slots: 4,
        mask_dim: 4,
        decoder_stacks: variant % 2,
        p2p: if variant % 4 < 2 { P2pMode::Conv } else { P2pMode::Axial },
        stem_channels: [4, 4],
        stage8_channels: 4,
        stage16_channels: 4,
        memory_dim: 4,
        decoder_channels: [4, 4],
        heads: 2,
        transformer_blocks: 1,
        stride8_transformer: variant % 3 == 0,
        p2m: variant % 5 != 4,
        m2m: true,
    }
}

fn model_suite(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<CheckResult>> {
    let mut variant = 0;
    let result = repeat(Suite::Model, "model_forward", n, rng, |r| {
        let cfg = tiny_model_config(variant);
        variant += 1;
        check_model(r, &cfg, COORDINATES_PER_INSTANCE)
    })?;
    Ok(vec![result])
}

/// Random probe of masks, class probabilities, semantic logits and
/// embeddings of a randomly initialized (and perturbed) model.
fn check_model(rng: &mut ChaCha8Rng, cfg: &ModelConfig, limit: usize) -> Result<GradCheckReport> {
    let mut model = Model::new(cfg.clone(), rng.random())?;
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let image = uniform(rng, &[3, cfg.height, cfg.width], -1.0, 1.0);
    let shapes = {
        let mut ctx = Ctx::new(&model.params, true);
        let o = model.forward(&mut ctx, &image)?;
        [o.masks, o.probs, o.semantic, o.embed].iter().map(|&v| ctx.g.shape(v).to_vec()).collect::<Vec<_>>()
    };
    let probes = Probes::new(rng, &shapes);
    check_with_params(rng, &model.params, &[], limit, |ctx, _| {
        let o = model.forward(ctx, &image)?;
        probes.apply(&mut ctx.g, &[o.masks, o.probs, o.semantic, o.embed])
    })
}

/// Checks every parameter coordinate of a model against finite differences.
pub fn check_model_all_parameters(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    check_model(&mut ChaCha8Rng::seed_from_u64(seed), cfg, usize::MAX)
}

/// Checks every parameter and input coordinate of one dual-path block on an
/// `h x w` pixel grid with `slots` memory entries.
pub fn check_block_all_parameters(cfg: BlockConfig, h: usize, w: usize, slots: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![tokens(&mut rng, h * w, cfg.pixel_dim), tokens(&mut rng, slots, cfg.memory_dim)];
    check_module(
        &mut rng,
        usize::MAX,
        |b| DualPathBlock::build(b, "block", cfg),
        inputs,
        move |blk, ctx, x| {
            let (p, m) = blk.forward(ctx, x[0], x[1], h, w)?;
            Ok(vec![p, m])
        },
    )
}
