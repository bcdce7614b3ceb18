#![allow(dead_code)]

use rand::Rng as _;
use wmvax::rng::seeded;
use wmvax::tensor::Shape;
use wmvax::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
/// Step for checks through whole networks: probes of 1e-3 cross ReLU kinks
/// in hidden layers, which the central difference then smears.
pub const NETWORK_FD_STEP: f64 = 1e-5;

pub fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[lo, hi]` but at least `gap` away from zero.
pub fn away_from_zero(shape: Shape, hi: f64, gap: f64, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Analytic gradient of a scalar tape expression in f32 against central
/// finite differences of the same expression evaluated in f64. Returns the
/// max relative error. `$build` is `|tape, x| -> Result<Var>`.
#[macro_export]
macro_rules! grad_error {
    ($x:expr, |$tape:ident, $v:ident| $body:expr) => {{
        use wmvax::autodiff::{finite_diff_grad, max_relative_error, Tape};
        let x: &wmvax::Tensor<f64> = $x;
        let analytic = {
            let mut $tape = Tape::<f32>::new();
            let $v = $tape.leaf(x.cast());
            let loss = $body.unwrap();
            let g = $tape.backward(loss).unwrap();
            g.wrt($v).unwrap().cast::<f64>()
        };
        let numeric = finite_diff_grad(
            |t| {
                let mut $tape = Tape::<f64>::new();
                let $v = $tape.leaf(t.clone());
                let loss = $body.unwrap();
                $tape.scalar(loss)
            },
            x,
            common::FD_STEP,
        )
        .unwrap();
        max_relative_error(&analytic, &numeric)
    }};
}
