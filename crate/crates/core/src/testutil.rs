//! Finite-difference oracle and small fixtures shared by unit tests.

use rand::Rng;

use crate::error::Result;
use crate::rng::{stream, Purpose};
use crate::tensor::{Graph, Tensor, Var};

/// Relative error with a small absolute floor so that gradients which are
/// exactly zero analytically do not blow up on finite-difference noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backward gradients and central finite
/// differences of the scalar produced by `build`, over every element of
/// every input.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).item().expect("scalar")
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).expect("leaf grad").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
    }
    worst
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Purpose::Init, 9_999);
    Tensor::from_fn(shape.to_vec(), |_| {
        // Box-Muller; quality is irrelevant here, only determinism.
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
