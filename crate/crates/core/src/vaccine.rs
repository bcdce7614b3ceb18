//! Watermark vaccines: L∞-bounded perturbations of a host image, found by
//! projected signed-gradient iteration against one or more removal networks.
//!
//! A disrupting vaccine (DWV) ascends the distance between the remover's
//! output and the host so the "restored" image is ruined. An inerasable
//! vaccine (IWV) descends a loss that keeps the output close to its input and
//! the predicted mask near zero, so the watermark is neither detected nor
//! erased. Only the host enters the optimization; no watermark is needed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::{FlushSubnormals, Real};
use crate::removal::RemovalModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VaccineKind {
    Dwv,
    Iwv,
}

impl fmt::Display for VaccineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VaccineKind::Dwv => "dwv",
            VaccineKind::Iwv => "iwv",
        })
    }
}

impl FromStr for VaccineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dwv" => Ok(VaccineKind::Dwv),
            "iwv" => Ok(VaccineKind::Iwv),
            other => Err(Error::InvalidArgument(format!("unknown vaccine kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaccineConfig {
    pub kind: VaccineKind,
    /// L∞ budget.
    pub epsilon: f32,
    /// Signed-gradient step size.
    pub step: f32,
    pub iterations: usize,
    /// Weight of the image term in the IWV loss.
    pub beta: f64,
}

impl VaccineConfig {
    pub fn new(kind: VaccineKind) -> Self {
        Self {
            kind,
            epsilon: 8.0 / 255.0,
            step: 2.0 / 255.0,
            iterations: 50,
            beta: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.epsilon.is_finite()
            && self.step > 0.0
            && self.step.is_finite()
            && self.iterations >= 1
            && self.beta > 0.0
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid vaccine config {self:?}")))
        }
    }
}

/// A generated perturbation together with how it was produced.
#[derive(Clone, Debug)]
pub struct Vaccine {
    pub delta: Tensor,
    pub config: VaccineConfig,
    /// Loss at δ⁰, δ¹, …, δᵀ.
    pub trace: Vec<f64>,
}

impl Vaccine {
    /// `host + delta`, the image the owner publishes.
    pub fn apply(&self, host: &Tensor) -> Result<Tensor> {
        host.add(&self.delta)
    }
}

/// Records the loss for `kind` on `tape`, with `input` fed to the model and
/// `host` as the reference. Returns the scalar loss node.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &RemovalModel,
    input: Var,
    host: Var,
    kind: VaccineKind,
    beta: f64,
) -> Result<Var> {
    let params = model.register_params(tape, false);
    let out = model.forward_on_tape(tape, input, &params)?;
    let image_term = tape.mse(out.restored, host)?;
    Ok(match kind {
        VaccineKind::Dwv => image_term,
        VaccineKind::Iwv => {
            let mask_term = tape.mean_square(out.mask);
            let weighted = tape.scale(image_term, beta);
            let sum = tape.add(weighted, mask_term)?;
            tape.scale(sum, 0.5)
        }
    })
}

fn loss_value<T: Real>(
    models: &[&RemovalModel],
    host: &Tensor<T>,
    delta: &Tensor<T>,
    kind: VaccineKind,
    beta: f64,
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let h = tape.constant(host.clone());
    let input = tape.constant(host.add(delta)?);
    let terms = models
        .iter()
        .map(|m| loss_on_tape(&mut tape, m, input, h, kind, beta))
        .collect::<Result<Vec<_>>>()?;
    let loss = tape.mean(&terms)?;
    Ok(tape.scalar(loss))
}

/// Mean-square distance between the remover's output on `host + delta` and
/// `host`.
pub fn loss_dwv<T: Real>(model: &RemovalModel, host: &Tensor<T>, delta: &Tensor<T>) -> Result<f64> {
    loss_value(&[model], host, delta, VaccineKind::Dwv, 1.0)
}

/// `½(β·mse(restored, host) + mean(mask²))` on `host + delta`.
pub fn loss_iwv<T: Real>(model: &RemovalModel, host: &Tensor<T>, delta: &Tensor<T>, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    loss_value(&[model], host, delta, VaccineKind::Iwv, beta)
}

/// Loss averaged over `models` and its gradient with respect to `delta`.
pub fn loss_and_grad<T: Real>(
    models: &[&RemovalModel],
    host: &Tensor<T>,
    delta: &Tensor<T>,
    kind: VaccineKind,
    beta: f64,
) -> Result<(f64, Tensor<T>)> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("vaccine needs at least one model".into()));
    }
    let mut tape = Tape::<T>::new();
    let h = tape.constant(host.clone());
    let d = tape.leaf(delta.clone());
    let input = tape.add(h, d)?;
    let terms = models
        .iter()
        .map(|m| loss_on_tape(&mut tape, m, input, h, kind, beta))
        .collect::<Result<Vec<_>>>()?;
    let loss = tape.mean(&terms)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let grad = grads.take(d).expect("delta is a leaf");
    Ok((value, grad))
}

/// Clips `delta` to `[-epsilon, epsilon]` and `host + delta` to `[0, 1]`,
/// exactly as evaluated in f32.
pub fn project(host: &Tensor, delta: &mut Tensor, epsilon: f32) -> Result<()> {
    host.expect_shape("project", delta.shape())?;
    for (d, &h) in delta.data_mut().iter_mut().zip(host.data()) {
        let mut v = d.clamp(-epsilon, epsilon);
        let x = h + v;
        if x > 1.0 {
            v = 1.0 - h;
        } else if x < 0.0 {
            v = -h;
        }
        // Rounding in the subtraction can leave h + v one ulp outside the
        // box; walk toward zero until both bounds hold.
        while v.abs() > epsilon || !(0.0..=1.0).contains(&(h + v)) {
            v = if v > 0.0 { v.next_down() } else { v.next_up() };
        }
        *d = v;
    }
    Ok(())
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the projected signed-gradient iteration from δ⁰ = 0. Batched hosts
/// are independent: the loss is a batch mean, which only rescales each
/// image's gradient.
pub fn generate_vaccine(host: &Tensor, models: &[&RemovalModel], config: &VaccineConfig) -> Result<Vaccine> {
    generate_vaccine_observed(host, models, config, |_, _, _| {})
}

/// As [`generate_vaccine`], calling `observe(t, delta, loss)` after the
/// projection of every iteration `t = 1..=T`, where `loss` is the loss at
/// the previous iterate.
pub fn generate_vaccine_observed(
    host: &Tensor,
    models: &[&RemovalModel],
    config: &VaccineConfig,
    mut observe: impl FnMut(usize, &Tensor, f64),
) -> Result<Vaccine> {
    config.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("vaccine needs at least one model".into()));
    }
    if host.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("host pixels must lie in [0, 1]".into()));
    }
    let direction = match config.kind {
        VaccineKind::Dwv => 1.0,
        VaccineKind::Iwv => -1.0,
    };
    let _flush = FlushSubnormals::new();
    let mut delta = Tensor::zeros(host.shape());
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let check = |loss: f64, trace: &[f64]| {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                value: loss,
                context: format!("{} vaccine iteration {}, trace {trace:?}", config.kind, trace.len()),
            })
        }
    };
    for t in 1..=config.iterations {
        let (loss, grad) = loss_and_grad(models, host, &delta, config.kind, config.beta)?;
        check(loss, &trace)?;
        trace.push(loss);
        let step = direction * config.step;
        for (d, g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d += step * sign(*g);
        }
        project(host, &mut delta, config.epsilon)?;
        observe(t, &delta, loss);
    }
    let last = loss_value(models, host, &delta, config.kind, config.beta)?;
    check(last, &trace)?;
    trace.push(last);
    Ok(Vaccine {
        delta,
        config: *config,
        trace,
    })
}

/// A vaccine against several models at once: the same iteration applied to
/// the mean of their losses.
pub fn stack(models: &[&RemovalModel], host: &Tensor, config: &VaccineConfig) -> Result<Vaccine> {
    generate_vaccine(host, models, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::synth_host;
    use crate::removal::Variant;
    use crate::rng::seeded;

    fn host() -> Tensor {
        synth_host(&mut seeded(11), 16, 16)
    }

    fn quick(kind: VaccineKind, iterations: usize) -> VaccineConfig {
        VaccineConfig {
            iterations,
            ..VaccineConfig::new(kind)
        }
    }

    #[test]
    fn config_validation() {
        assert!(VaccineConfig::new(VaccineKind::Dwv).validate().is_ok());
        for bad in [
            VaccineConfig { epsilon: 0.0, ..VaccineConfig::new(VaccineKind::Dwv) },
            VaccineConfig { step: -1.0, ..VaccineConfig::new(VaccineKind::Dwv) },
            VaccineConfig { iterations: 0, ..VaccineConfig::new(VaccineKind::Dwv) },
            VaccineConfig { beta: 0.0, ..VaccineConfig::new(VaccineKind::Iwv) },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert_eq!("IWV".parse::<VaccineKind>().unwrap(), VaccineKind::Iwv);
        assert!("x".parse::<VaccineKind>().is_err());
    }

    #[test]
    fn empty_model_list_is_rejected() {
        let h = host();
        assert!(generate_vaccine(&h, &[], &quick(VaccineKind::Dwv, 1)).is_err());
    }

    /// All weights zero and a saturated mask bias: the output is
    /// `m·0.5 + (1-m)·(host+δ)` with `m` just below one, so on a dark host the
    /// gradient of either loss is positive at every pixel.
    fn saturated_mask_model() -> RemovalModel {
        let base = RemovalModel::build(Variant::A, 0);
        let n = base.params().len();
        let params = base
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| if i == n - 1 { Tensor::full(p.shape(), 8.0) } else { Tensor::zeros(p.shape()) })
            .collect();
        RemovalModel::from_params(Variant::A, params).unwrap()
    }

    #[test]
    fn single_step_follows_gradient_sign() {
        let m = saturated_mask_model();
        let h = Tensor::full([1, 3, 8, 8], 0.2f32);
        let (_, g) = loss_and_grad(&[&m], &h, &Tensor::zeros(h.shape()), VaccineKind::Dwv, 2.0).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0));
        let step = 2.0f32 / 255.0;
        let dwv = generate_vaccine(&h, &[&m], &quick(VaccineKind::Dwv, 1)).unwrap();
        assert!(dwv.delta.data().iter().all(|&v| v == step));
        let iwv = generate_vaccine(&h, &[&m], &quick(VaccineKind::Iwv, 1)).unwrap();
        assert!(iwv.delta.data().iter().all(|&v| v == -step));
    }

    #[test]
    fn zero_gradient_means_no_step() {
        // All weights zero: restored = 0.25 + 0.5·input, which equals a
        // mid-grey host exactly, so every gradient entry is exactly zero.
        let base = RemovalModel::build(Variant::A, 0);
        let params = base.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let m = RemovalModel::from_params(Variant::A, params).unwrap();
        let h = Tensor::full([1, 3, 8, 8], 0.5f32);
        let (loss, g) = loss_and_grad(&[&m], &h, &Tensor::zeros(h.shape()), VaccineKind::Dwv, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let v = generate_vaccine(&h, &[&m], &quick(VaccineKind::Dwv, 3)).unwrap();
        assert!(v.delta.data().iter().all(|&d| d == 0.0));
        assert_eq!(sign(-0.0), 0.0);
    }

    #[test]
    fn projection_is_exact() {
        let h = Tensor::new([1, 1, 1, 6], vec![0.0f32, 1.0, 0.3, 0.7, 0.999, 0.01]).unwrap();
        let mut d = Tensor::new([1, 1, 1, 6], vec![-0.5f32, 0.5, 0.9, -0.9, 0.02, -0.02]).unwrap();
        let eps = 8.0f32 / 255.0;
        project(&h, &mut d, eps).unwrap();
        for (&dv, &hv) in d.data().iter().zip(h.data()) {
            assert!(dv.abs() <= eps);
            assert!((0.0..=1.0).contains(&(hv + dv)));
        }
        assert_eq!(d.data()[0], 0.0);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn iwv_loss_decomposes() {
        let m = RemovalModel::build(Variant::A, 3);
        let h = host();
        let delta = Tensor::full(h.shape(), 0.01f32);
        let image = loss_dwv(&m, &h, &delta).unwrap();
        let out = m.forward(&h.add(&delta).unwrap()).unwrap();
        let mask_term = out.mask.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / out.mask.len() as f64;
        let iwv = loss_iwv(&m, &h, &delta, 2.0).unwrap();
        assert!((iwv - 0.5 * (2.0 * image + mask_term)).abs() < 1e-7);
        assert!(loss_iwv(&m, &h, &delta, 0.0).is_err());
    }

    #[test]
    fn invariants_hold_every_iteration_and_run_is_deterministic() {
        let m = RemovalModel::build(Variant::A, 3);
        let h = host();
        for kind in [VaccineKind::Dwv, VaccineKind::Iwv] {
            let cfg = quick(kind, 6);
            let mut seen = 0;
            let v = generate_vaccine_observed(&h, &[&m], &cfg, |_, d, _| {
                seen += 1;
                for (&dv, &hv) in d.data().iter().zip(h.data()) {
                    assert!(dv.abs() <= cfg.epsilon);
                    assert!((0.0..=1.0).contains(&(hv + dv)));
                }
            })
            .unwrap();
            assert_eq!(seen, 6);
            assert_eq!(v.trace.len(), 7);
            let again = generate_vaccine(&h, &[&m], &cfg).unwrap();
            assert_eq!(again.delta, v.delta);
            assert_eq!(stack(&[&m], &h, &cfg).unwrap().delta, v.delta);
        }
    }

    #[test]
    fn trace_moves_in_the_attack_direction() {
        let h = host();
        for seed in 0..3 {
            let m = RemovalModel::build(Variant::C, seed);
            let dwv = generate_vaccine(&h, &[&m], &quick(VaccineKind::Dwv, 8)).unwrap();
            assert!(dwv.trace.last() >= dwv.trace.first(), "{:?}", dwv.trace);
            let iwv = generate_vaccine(&h, &[&m], &quick(VaccineKind::Iwv, 8)).unwrap();
            assert!(iwv.trace.last() <= iwv.trace.first(), "{:?}", iwv.trace);
        }
    }
}
