//! Finite-difference oracle shared by the gradient tests and the acceptance
//! suite. It only ever evaluates forward values.
#![allow(dead_code)]

use cxrcast::autodiff::Tensor;

pub mod ops;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Central differences of `f` with respect to the listed flat indices of
/// input `which`.
pub fn central_differences(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    indices: &[usize],
) -> Vec<f64> {
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[which].data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[which].data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`. The floor
/// keeps entries whose true gradient is ~0 from dividing by rounding noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_rel_err_floor(analytic, numeric, 1e-6)
}

/// As `max_rel_err` with an explicit floor. Central differences of a loss of
/// size `L` carry absolute noise near `L * 1e-11`, so large losses need a
/// proportionally larger floor.
pub fn max_rel_err_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

use cxrcast::autodiff::{Graph, Var};

pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> cxrcast::Result<Var> + 'a;

/// Worst relative error between backprop and central differences of
/// `sum(build(inputs) * weights)` over inputs `wrt`. `weights` turns a
/// tensor output into a scalar without symmetric cancellation.
pub fn op_gradient_error(build: &Builder<'_>, inputs: &[Tensor<f64>], wrt: &[usize], weights_seed: u64) -> f64 {
    let scalarize = |g: &mut Graph<f64>, out: Var| -> Var {
        let shape = g.shape(out).to_vec();
        if shape.iter().product::<usize>() == 1 {
            return out;
        }
        let mut s = weights_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let w = Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2001) as f64 / 1000.0 - 1.0
        });
        let w = g.constant(w);
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(t.clone(), wrt.contains(&i)))
        .collect();
    let out = build(&mut g, &vars).expect("forward");
    let loss = scalarize(&mut g, out);
    g.backward(loss).expect("backward");

    let f = |probe: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        let loss = scalarize(&mut g, out);
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    for &i in wrt {
        let analytic = g.grad(vars[i]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let idx: Vec<usize> = (0..inputs[i].len()).collect();
        let numeric = central_differences(&f, inputs, i, &idx);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}
