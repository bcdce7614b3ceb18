//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape; nodes only ever reference
//! earlier nodes, so the tape order is a topological order and the backward
//! pass is a single reverse sweep. A tape is built fresh for every forward
//! pass and consumed by [`Tape::backward`].

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Activation};
use crate::real::Real;
use crate::tensor::{mse_f64, Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize },
    Activation { input: Var, kind: Activation },
    Upsample { input: Var },
    Blend { mask: Var, fg: Var, bg: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Mse { a: Var, b: Var },
    MeanSquare { input: Var },
    BceLogits { z: Var, t: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf whose gradient will be reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node as f64.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().to_f64()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(input), kind);
        let rg = self.needs(input);
        self.push(out, Op::Activation { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Var {
        let out = ops::upsample_nearest2x(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Upsample { input }, rg)
    }

    /// `mask·fg + (1 - mask)·bg`; `mask` has one channel.
    pub fn blend(&mut self, mask: Var, fg: Var, bg: Var) -> Result<Var> {
        let out = ops::blend(self.value(mask), self.value(fg), self.value(bg))?;
        let rg = self.needs(mask) || self.needs(fg) || self.needs(bg);
        Ok(self.push(out, Op::Blend { mask, fg, bg }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(T::from_f64(factor));
        let rg = self.needs(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Mean of `(a - b)^2` over all entries, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = mse_f64(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), Op::Mse { a, b }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against targets `t`, taken on
    /// the logits so the gradient `sigmoid(z) - t` survives saturation.
    pub fn bce_logits(&mut self, z: Var, t: Var) -> Result<Var> {
        let (vz, vt) = (self.value(z), self.value(t));
        vz.expect_shape("bce_logits", vt.shape())?;
        let loss = vz
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.to_f64(), t.to_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / vz.len() as f64;
        let rg = self.needs(z);
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), Op::BceLogits { z, t }, rg))
    }

    /// Mean of `x^2`, i.e. the mean-square distance to an all-zero tensor.
    pub fn mean_square(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let loss = x.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / x.len() as f64;
        let rg = self.needs(input);
        self.push(Tensor::scalar(T::from_f64(loss)), Op::MeanSquare { input }, rg)
    }

    /// Mean of several scalar nodes.
    pub fn mean(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(self.scale(acc, 1.0 / terms.len() as f64))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(loss.0));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d { input, weight, bias, stride } => {
                    let need = [self.needs(input), self.needs(weight), self.needs(bias)];
                    let cg = ops::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        self.value(bias),
                        stride,
                        &g,
                        need,
                    )?;
                    accumulate(&mut grads, input, cg.input)?;
                    accumulate(&mut grads, weight, cg.weight)?;
                    accumulate(&mut grads, bias, cg.bias)?;
                }
                Op::Activation { input, kind } => {
                    let dx = ops::activation_backward(kind, self.value(input), &node.value, &g)?;
                    accumulate(&mut grads, input, Some(dx))?;
                }
                Op::Upsample { input } => {
                    let dx = ops::upsample_nearest2x_backward(&g)?;
                    accumulate(&mut grads, input, Some(dx))?;
                }
                Op::Blend { mask, fg, bg } => {
                    let bgr = ops::blend_backward(self.value(mask), self.value(fg), self.value(bg), &g)?;
                    for (v, d) in [(mask, bgr.mask), (fg, bgr.fg), (bg, bgr.bg)] {
                        if self.needs(v) {
                            accumulate(&mut grads, v, Some(d))?;
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, Some(g.clone()))?;
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, Some(g))?;
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, Some(g.map(|v| -v)))?;
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, Some(g))?;
                    }
                }
                Op::Scale { input, factor } => {
                    let dx = g.scale(T::from_f64(factor));
                    accumulate(&mut grads, input, Some(dx))?;
                }
                Op::Mse { a, b } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let k = T::from_f64(2.0 * g.item().to_f64() / va.len() as f64);
                    let da = va.zip_map(vb, |x, y| k * (x - y))?;
                    if self.needs(b) {
                        accumulate(&mut grads, b, Some(da.map(|v| -v)))?;
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, Some(da))?;
                    }
                }
                Op::BceLogits { z, t } => {
                    let (vz, vt) = (self.value(z), self.value(t));
                    let k = T::from_f64(g.item().to_f64() / vz.len() as f64);
                    let dz = vz.zip_map(vt, |z, t| k * (ops::sigmoid(z) - t))?;
                    accumulate(&mut grads, z, Some(dz))?;
                }
                Op::MeanSquare { input } => {
                    let x = self.value(input);
                    let k = T::from_f64(2.0 * g.item().to_f64() / x.len() as f64);
                    accumulate(&mut grads, input, Some(x.scale(k)))?;
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(id, n)| (id, n.value.shape()))
            .collect();
        // Release saved activations; the tape cannot be replayed.
        self.nodes.iter_mut().for_each(|n| n.value = Tensor::zeros([0, 0, 0, 0]));
        Ok(Gradients { grads, leaves })
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    target: Var,
    incoming: Option<Tensor<T>>,
) -> Result<()> {
    let Some(incoming) = incoming else { return Ok(()) };
    match &mut grads[target.0] {
        slot @ None => *slot = Some(incoming),
        Some(existing) => {
            if existing.shape() != incoming.shape() {
                return Err(shape_err(
                    "backward",
                    format!("gradient {:?} vs {:?}", existing.shape(), incoming.shape()),
                ));
            }
            for (e, i) in existing.data_mut().iter_mut().zip(incoming.data()) {
                *e += *i;
            }
        }
    }
    Ok(())
}

/// Gradients of a loss with respect to the tape's leaves.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    leaves: Vec<(usize, Shape)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `leaf`; a leaf the loss does not depend on gets zeros.
    pub fn wrt(&self, leaf: Var) -> Option<Tensor<T>> {
        let &(_, shape) = self.leaves.iter().find(|(id, _)| *id == leaf.0)?;
        Some(
            self.grads[leaf.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    /// Moves the gradient for `leaf` out of the map.
    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        let &(_, shape) = self.leaves.iter().find(|(id, _)| *id == leaf.0)?;
        Some(self.grads[leaf.0].take().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}

/// Central finite differences of `f` at `x`, one entry at a time.
///
/// The denominator is the difference of the actually-representable perturbed
/// values, so rounding of `x ± h` does not bias the estimate.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_grad_at(&mut f, x, h, &all)
}

/// Like [`finite_diff_grad`] but only at the listed flat indices; other
/// entries of the result are zero.
pub fn finite_diff_grad_at<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
    indices: &[usize],
) -> Result<Tensor<T>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for &i in indices {
        let orig = x.data()[i];
        let plus = T::from_f64(orig.to_f64() + h);
        let minus = T::from_f64(orig.to_f64() - h);
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        let step = plus.to_f64() - minus.to_f64();
        out.data_mut()[i] = T::from_f64((fp - fm) / step);
    }
    Ok(out)
}

/// Largest entrywise gap between two gradients, relative to the larger of
/// their L∞ norms.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let scale = analytic
        .max_abs()
        .to_f64()
        .max(numeric.max_abs().to_f64())
        .max(f64::MIN_POSITIVE);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a.to_f64() - n.to_f64()).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_logits_matches_probability_form_and_keeps_gradient() {
        let z = [-2.0f64, -0.5, 0.0, 1.5];
        let t = [0.0f64, 1.0, 1.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(Tensor::new([1, 1, 2, 2], z.to_vec()).unwrap());
        let tv = tape.constant(Tensor::new([1, 1, 2, 2], t.to_vec()).unwrap());
        let loss = tape.bce_logits(zv, tv).unwrap();
        let expect = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);

        // A positive pixel whose logit is deep in saturation still pulls upward.
        let mut tape = Tape::<f32>::new();
        let zv = tape.leaf(Tensor::scalar(-60.0));
        let tv = tape.constant(Tensor::scalar(1.0));
        let loss = tape.bce_logits(zv, tv).unwrap();
        assert!((tape.scalar(loss) - 60.0).abs() < 1e-4);
        let g = tape.backward(loss).unwrap();
        assert!((g.wrt(zv).unwrap().item() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.mean_square(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mse_against_constant_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let z = tape.constant(Tensor::scalar(0.0));
        let loss = tape.mse(x, z).unwrap();
        assert_eq!(tape.scalar(loss), 9.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
        assert!(g.wrt(z).is_none());
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let loss = tape.mean_square(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 2.0));
        let unused = tape.leaf(Tensor::full([1, 2, 3, 3], 5.0));
        let loss = tape.mean_square(x);
        let g = tape.backward(loss).unwrap();
        let gu = g.wrt(unused).unwrap();
        assert_eq!(gu.shape(), [1, 2, 3, 3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = mean((x + x)^2) = 4 x^2 for a scalar; d/dx = 8x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let s = tape.add(x, x).unwrap();
        let loss = tape.mean_square(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 12.0);
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y + x) as f64 * 0.1);
        let g = finite_diff_grad(|t| t.sum_f64(), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_of_mean_square() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 3], |_, _, y, x| (y * 3 + x) as f64 - 2.0);
        let n = x.len() as f64;
        let g = finite_diff_grad(
            |t| t.data().iter().map(|v| v * v).sum::<f64>() / n,
            &x,
            1e-3,
        )
        .unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv / n).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(finite_diff_grad(|t| t.sum_f64(), &x, 0.0).is_err());
    }
}
