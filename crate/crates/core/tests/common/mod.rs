#![allow(dead_code)]

use eegfmri::{Result, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub type Graph<'a> = dyn Fn(&mut Tape64, &[Var]) -> Result<Var> + Sync + 'a;

fn eval(inputs: &[Tensor64], f: &Graph<'_>) -> f64 {
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Worst relative error between tape gradients and central differences over
/// every element of every input.
pub fn grad_check(inputs: &[Tensor64], f: &Graph<'_>) -> f64 {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_at(inputs, f, &coords)
}

/// As [`grad_check`], but only `per_input` random entries of each input.
pub fn grad_check_sampled(inputs: &[Tensor64], f: &Graph<'_>, per_input: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            if n <= per_input {
                (0..n).map(|j| (i, j)).collect::<Vec<_>>()
            } else {
                rand::seq::index::sample(&mut r, n, per_input).into_iter().map(|j| (i, j)).collect()
            }
        })
        .collect();
    grad_check_at(inputs, f, &coords)
}

pub fn grad_check_at(inputs: &[Tensor64], f: &Graph<'_>, coords: &[(usize, usize)]) -> f64 {
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    coords
        .par_iter()
        .map(|&(i, j)| {
            let bump = |delta: f64| {
                let mut ins = inputs.to_vec();
                let mut data = ins[i].to_vec();
                data[j] += delta;
                ins[i] = Tensor64::new(ins[i].shape(), data).unwrap();
                eval(&ins, f)
            };
            let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            rel_err(analytic[i][j], numeric)
        })
        .reduce(|| 0.0, f64::max)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
    }
}

pub type ModelGraph<'a> = dyn Fn(&mut Tape64, &eegfmri::params::Bound) -> Result<Var> + Sync + 'a;

/// Finite-difference check over the parameters in `store`: every entry when
/// `per_tensor` is `None`, otherwise that many random entries of each tensor.
pub fn grad_check_store(
    store: &eegfmri::params::ParamStore<f64>,
    f: &ModelGraph<'_>,
    per_tensor: Option<usize>,
    seed: u64,
) -> f64 {
    let names: Vec<String> = store.names().to_vec();
    let graph = |tape: &mut Tape64, vars: &[Var]| {
        let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        f(tape, &bound)
    };
    match per_tensor {
        None => grad_check(store.values(), &graph),
        Some(k) => grad_check_sampled(store.values(), &graph, k, seed),
    }
}

/// Entries sampled per parameter tensor on seeds after the first, which
/// checks every entry.
pub const SAMPLED_ENTRIES: usize = 6;

pub fn coverage(seed: u64) -> Option<usize> {
    (seed > 0).then_some(SAMPLED_ENTRIES)
}

/// Fixed random weights so a vector output reduces to a generic scalar.
pub fn weighted_sum(tape: &mut Tape64, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}
