//! Central finite-difference gradient oracle.
//!
//! Builds `loss = Σ out ∘ R` for a fixed random `R`, then compares the tape's
//! gradient of every input against `(L(x+h) − L(x−h)) / 2h`.

#![allow(dead_code)]

use dflmoe::tensor::{Graph, Tensor, Var};
use dflmoe::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-3)`: relative, with an absolute floor for
/// gradients that are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random values bounded away from zero by `margin`.
pub fn random_nonzero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_loss<F>(
    inputs: &[Tensor],
    weights: &Option<Tensor>,
    build: &F,
    track: bool,
) -> (Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(track)))
        .collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let w = weights.clone().unwrap_or_else(|| Tensor::ones(&shape));
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, vars, loss)
}

/// Maximum relative error over every element of every input.
pub fn max_grad_error<F>(inputs: &[Tensor], build: F, rng: &mut Rng) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    // Probe once for the output shape, then fix random upstream weights.
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let weights = Some(random_tensor(&out_shape, rng));

    let (g, vars, loss) = weighted_loss(inputs, &weights, &build, true);
    let grads = g.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let (g, _, loss) = weighted_loss(perturbed, &weights, &build, false);
        g.value(loss).data()[0]
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = input.data().to_vec();
            d[j] += STEP;
            plus[i] = Tensor::new(input.shape().to_vec(), d.clone()).unwrap();
            d[j] -= 2.0 * STEP;
            minus[i] = Tensor::new(input.shape().to_vec(), d).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}
