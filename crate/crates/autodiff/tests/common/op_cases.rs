//! Finite-difference cases covering every differentiable graph op. Shared
//! by the autodiff gradient tests and the workspace acceptance gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usad_autodiff::gradcheck::check_inputs;
use usad_autodiff::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

type CaseFn = Box<dyn for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Draw inputs from (0.2, 2) instead of (-1.5, 1.5).
    pub positive: bool,
    pub f: CaseFn,
}

fn case<F>(name: &'static str, shapes: &[&[usize]], positive: bool, f: F) -> OpCase
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var> + 'static,
{
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), positive, f: Box::new(f) }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let range = if positive { 0.2..2.0 } else { -1.5..1.5 };
    Tensor::new(shape, (0..n).map(|_| rng.random_range(range.clone())).collect()).unwrap()
}

/// Contracts an arbitrary output with fixed pseudo-random weights so every
/// output element influences the scalar loss.
pub fn contract<'g>(g: &mut Graph<'g>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) as f64 * 0.61).sin()).collect())?;
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Worst relative error of `c` over seeds `0..seeds`.
pub fn worst_error(c: &OpCase, seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = c.shapes.iter().map(|s| rand_tensor(&mut rng, s, c.positive)).collect();
        let report = check_inputs(&inputs, STEP, &c.f).unwrap();
        assert!(report.checked > 0, "{}: nothing checked", c.name);
        worst = worst.max(report.max_rel_err);
    }
    worst
}

pub fn elementwise() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], false, |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        case("sub", &[&[5], &[5]], false, |g, v| {
            let y = g.sub(v[0], v[1])?;
            contract(g, y)
        }),
        case("mul", &[&[2, 3], &[2, 3]], false, |g, v| {
            let y = g.mul(v[0], v[1])?;
            contract(g, y)
        }),
        case("neg/square", &[&[5]], false, |g, v| {
            let y = g.neg(v[0])?;
            let y = g.square(y)?;
            contract(g, y)
        }),
        case("scale", &[&[6]], false, |g, v| {
            let y = g.scale(v[0], -2.5)?;
            let y = g.add_scalar(y, 0.3)?;
            contract(g, y)
        }),
        case("add_all", &[&[4], &[4], &[4]], false, |g, v| {
            let y = g.add_all(v)?;
            let y = g.tanh(y)?;
            contract(g, y)
        }),
        case("exp", &[&[6]], false, |g, v| {
            let y = g.exp(v[0])?;
            contract(g, y)
        }),
        case("ln", &[&[6]], true, |g, v| {
            let y = g.ln(v[0])?;
            contract(g, y)
        }),
        case("powf", &[&[6]], true, |g, v| {
            let y = g.powf(v[0], 2.0)?;
            let z = g.powf(v[0], 0.7)?;
            let y = g.add(y, z)?;
            contract(g, y)
        }),
    ]
}

pub fn activations() -> Vec<OpCase> {
    vec![
        case("gelu", &[&[4, 5]], false, |g, v| {
            let y = g.gelu(v[0])?;
            contract(g, y)
        }),
        case("sigmoid", &[&[7]], false, |g, v| {
            let y = g.sigmoid(v[0])?;
            contract(g, y)
        }),
        case("tanh", &[&[7]], false, |g, v| {
            let y = g.tanh(v[0])?;
            contract(g, y)
        }),
        // positive inputs keep every coordinate away from the kink
        case("relu", &[&[7]], true, |g, v| {
            let y = g.relu(v[0])?;
            contract(g, y)
        }),
        case("softmax axis 0", &[&[3, 4]], false, |g, v| {
            let y = g.softmax(v[0], 0)?;
            contract(g, y)
        }),
        case("softmax axis 1", &[&[3, 4]], false, |g, v| {
            let y = g.softmax(v[0], 1)?;
            contract(g, y)
        }),
        case("log_softmax", &[&[5]], false, |g, v| {
            let y = g.log_softmax(v[0], 0)?;
            contract(g, y)
        }),
    ]
}

pub fn reductions_and_shape_ops() -> Vec<OpCase> {
    vec![
        case("mean", &[&[4, 3]], false, |g, v| {
            let m = g.mean(v[0])?;
            g.square(m)
        }),
        case("select", &[&[5]], false, |g, v| {
            let s = g.select(v[0], 3)?;
            let e = g.exp(s)?;
            let t = g.sum(v[0])?;
            g.mul(e, t)
        }),
        case("concat/narrow/reshape", &[&[2, 3], &[1, 3]], false, |g, v| {
            let c = g.concat(&[v[0], v[1], v[0]])?;
            let n = g.narrow(c, 1, 3)?;
            let r = g.reshape(n, &[9])?;
            let r = g.sigmoid(r)?;
            contract(g, r)
        }),
    ]
}

pub fn conv_dense_pooling() -> Vec<OpCase> {
    vec![
        case("conv1d", &[&[3, 9], &[4, 3, 3], &[4]], false, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            contract(g, y)
        }),
        case("conv1d strided", &[&[5, 12], &[6, 5, 5], &[6]], false, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 2, 2, 1)?;
            contract(g, y)
        }),
        case("conv1d grouped", &[&[4, 8], &[6, 2, 3]], false, |g, v| {
            let y = g.conv1d(v[0], v[1], None, 1, 1, 2)?;
            contract(g, y)
        }),
        case("dense", &[&[4], &[3, 4], &[3]], false, |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            contract(g, y)
        }),
        case("global pooling", &[&[3, 6]], false, |g, v| {
            let a = g.global_avg(v[0])?;
            let m = g.global_max(v[0])?;
            let y = g.mul(a, m)?;
            contract(g, y)
        }),
        case("channel pooling", &[&[4, 5]], false, |g, v| {
            let a = g.channel_avg(v[0])?;
            let m = g.channel_max(v[0])?;
            let y = g.concat(&[a, m])?;
            let y = g.gelu(y)?;
            contract(g, y)
        }),
    ]
}

pub fn normalisation_and_broadcasts() -> Vec<OpCase> {
    vec![
        case("group_norm", &[&[4, 6]], false, |g, v| {
            let y = g.group_norm(v[0], 2, 1e-5)?;
            contract(g, y)
        }),
        case("scale/shift channels", &[&[3, 5], &[3], &[3]], false, |g, v| {
            let y = g.scale_channels(v[0], v[1])?;
            let y = g.shift_channels(y, v[2])?;
            let y = g.tanh(y)?;
            contract(g, y)
        }),
        case("scale positions", &[&[3, 5], &[1, 5]], false, |g, v| {
            let y = g.scale_positions(v[0], v[1])?;
            contract(g, y)
        }),
        case("mask", &[&[6]], false, |g, v| {
            let y = g.mul_mask(v[0], vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0])?;
            contract(g, y)
        }),
    ]
}

pub fn all() -> Vec<OpCase> {
    let mut v = elementwise();
    v.extend(activations());
    v.extend(reductions_and_shape_ops());
    v.extend(conv_dense_pooling());
    v.extend(normalisation_and_broadcasts());
    v
}
