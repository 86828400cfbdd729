#![allow(dead_code)]

use ctpseg::autograd::gradcheck::check_tensor;
use ctpseg::autograd::{Graph, ParamId, Tensor, Var, VarStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn rand_unit(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.05..0.95)).collect())
}

/// Maximum relative error over the input and every parameter, checking up
/// to `coords` random coordinates per tensor with central step `h`.
pub fn grad_check<B>(
    vs: &VarStore<f64>,
    input: &Tensor<f64>,
    build: B,
    h: f64,
    coords: usize,
    seed: u64,
) -> f64
where
    B: Fn(&mut Graph<f64>, &VarStore<f64>, Var) -> Var,
{
    let mut g = Graph::new(true);
    let x = g.input(input.clone());
    let out = build(&mut g, vs, x);
    let grads = g.backward(out);
    let mut r = rng(seed);
    let mut worst = 0.0f64;

    let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut f_in = |t: &Tensor<f64>| {
        let mut g = Graph::new(true);
        let x = g.input(t.clone());
        let o = build(&mut g, vs, x);
        g.value(o).item()
    };
    let rep = check_tensor(input, &gx, &mut f_in, h, coords, &mut r);
    worst = worst.max(rep.max_rel_err);

    let pg: Vec<(ParamId, Tensor<f64>)> = g.param_grads(&grads);
    for (id, ga) in pg {
        let mut f_p = |t: &Tensor<f64>| {
            let mut v2 = vs.clone();
            v2.set(id, t.clone());
            let mut g = Graph::new(true);
            let x = g.input(input.clone());
            let o = build(&mut g, &v2, x);
            g.value(o).item()
        };
        let rep = check_tensor(vs.get(id), &ga, &mut f_p, h, coords, &mut r);
        if rep.max_rel_err > 1e-3 {
            eprintln!("{}: {:?}", vs.name(id), rep);
        }
        worst = worst.max(rep.max_rel_err);
    }
    worst
}

/// Scalar `Σ out·R` with a fixed random projection `R`.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let r = randn(&shape, &mut rng(seed));
    let rv = g.constant(r);
    let p = g.mul(out, rv);
    g.sum_all(p)
}

/// Sets biases and shifts to small positive values so no pre-activation
/// sits exactly on a ReLU kink and no output channel is dead for every
/// input (gradient checks need a differentiable point).
pub fn jitter_offsets(vs: &mut VarStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for id in vs.ids().collect::<Vec<_>>() {
        let name = vs.name(id);
        if name.ends_with(".b") || name.ends_with(".beta") {
            let shape = vs.get(id).shape().to_vec();
            let t = randn(&shape, &mut r).map(|v| 0.05 + 0.2 * v.abs());
            vs.set(id, t);
        }
    }
}
