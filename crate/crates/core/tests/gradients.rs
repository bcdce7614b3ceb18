mod common;

use common::{away_from_zero, uniform, GRAD_TOL};
use wmvax::autodiff::{finite_diff_grad, max_relative_error, Tape};
use wmvax::ops::sigmoid;
use wmvax::removal::{RemovalModel, Variant};
use wmvax::vaccine::{loss_and_grad, loss_dwv, loss_iwv, VaccineKind};

fn assert_close(name: &str, err: f64) {
    assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn conv2d_stride_1_and_2_wrt_input() {
    let x = uniform([1, 2, 8, 8], -1.0, 1.0, 1);
    let w = uniform([3, 2, 3, 3], -0.5, 0.5, 2);
    let b = uniform([1, 3, 1, 1], -0.1, 0.1, 3);
    for stride in [1, 2] {
        let r = uniform([1, 3, 8 / stride, 8 / stride], 0.0, 1.0, 4);
        let err = grad_error!(&x, |tape, v| {
            let (wv, bv, rv) = (tape.constant(w.cast()), tape.constant(b.cast()), tape.constant(r.cast()));
            tape.conv2d(v, wv, bv, stride).and_then(|y| tape.mse(y, rv))
        });
        assert_close(&format!("conv2d stride {stride} input"), err);
    }
}

#[test]
fn conv2d_wrt_weight_and_bias() {
    let x = uniform([2, 2, 8, 8], -1.0, 1.0, 5);
    let w = uniform([3, 2, 3, 3], -0.5, 0.5, 6);
    let b = uniform([1, 3, 1, 1], -0.1, 0.1, 7);
    for stride in [1, 2] {
        let r = uniform([2, 3, 8 / stride, 8 / stride], 0.0, 1.0, 8);
        let err = grad_error!(&w, |tape, v| {
            let (xv, bv, rv) = (tape.constant(x.cast()), tape.constant(b.cast()), tape.constant(r.cast()));
            tape.conv2d(xv, v, bv, stride).and_then(|y| tape.mse(y, rv))
        });
        assert_close(&format!("conv2d stride {stride} weight"), err);
        let err = grad_error!(&b, |tape, v| {
            let (xv, wv, rv) = (tape.constant(x.cast()), tape.constant(w.cast()), tape.constant(r.cast()));
            tape.conv2d(xv, wv, v, stride).and_then(|y| tape.mse(y, rv))
        });
        assert_close(&format!("conv2d stride {stride} bias"), err);
    }
}

#[test]
fn activations() {
    let x = away_from_zero([1, 3, 5, 5], 2.0, 0.01, 9);
    let r = uniform([1, 3, 5, 5], 0.0, 1.0, 10);
    let err = grad_error!(&x, |tape, v| {
        let y = tape.relu(v);
        let rv = tape.constant(r.cast());
        tape.mse(y, rv)
    });
    assert_close("relu", err);
    let x = uniform([1, 3, 5, 5], -4.0, 4.0, 11);
    let err = grad_error!(&x, |tape, v| {
        let y = tape.sigmoid(v);
        let rv = tape.constant(r.cast());
        tape.mse(y, rv)
    });
    assert_close("sigmoid", err);
}

#[test]
fn sigmoid_slope_at_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(wmvax::Tensor::scalar(1.0));
    let y = tape.sigmoid(x);
    let loss = tape.mean(&[y]).unwrap();
    let g = tape.backward(loss).unwrap().wrt(x).unwrap().item();
    let s = sigmoid(1.0f64);
    assert!((g - s * (1.0 - s)).abs() < 1e-12);
    assert!((g - 0.19661193).abs() < 1e-7);
}

#[test]
fn upsample_and_arithmetic() {
    let x = uniform([1, 2, 4, 4], -1.0, 1.0, 12);
    let r = uniform([1, 2, 8, 8], 0.0, 1.0, 13);
    let err = grad_error!(&x, |tape, v| {
        let y = tape.upsample_nearest2x(v);
        let rv = tape.constant(r.cast());
        tape.mse(y, rv)
    });
    assert_close("upsample", err);

    let c = uniform([1, 2, 4, 4], -1.0, 1.0, 14);
    let err = grad_error!(&x, |tape, v| {
        let cv = tape.constant(c.cast());
        let s = tape.add(v, cv).unwrap();
        let d = tape.sub(s, v).unwrap();
        let d = tape.sub(v, d).unwrap();
        let k = tape.scale(d, -1.7);
        let m = tape.mean_square(k);
        let m2 = tape.mean_square(v);
        tape.mean(&[m, m2])
    });
    assert_close("add/sub/scale/mean_square/mean", err);
}

#[test]
fn blend_all_inputs() {
    let m = uniform([2, 1, 4, 4], 0.0, 1.0, 15);
    let f = uniform([2, 3, 4, 4], 0.0, 1.0, 16);
    let b = uniform([2, 3, 4, 4], 0.0, 1.0, 17);
    let r = uniform([2, 3, 4, 4], 0.0, 1.0, 18);
    let err = grad_error!(&m, |tape, v| {
        let (fv, bv, rv) = (tape.constant(f.cast()), tape.constant(b.cast()), tape.constant(r.cast()));
        tape.blend(v, fv, bv).and_then(|y| tape.mse(y, rv))
    });
    assert_close("blend mask", err);
    let err = grad_error!(&f, |tape, v| {
        let (mv, bv, rv) = (tape.constant(m.cast()), tape.constant(b.cast()), tape.constant(r.cast()));
        tape.blend(mv, v, bv).and_then(|y| tape.mse(y, rv))
    });
    assert_close("blend fg", err);
    let err = grad_error!(&b, |tape, v| {
        let (mv, fv, rv) = (tape.constant(m.cast()), tape.constant(f.cast()), tape.constant(r.cast()));
        tape.blend(mv, fv, v).and_then(|y| tape.mse(y, rv))
    });
    assert_close("blend bg", err);
}

#[test]
fn losses() {
    let z = uniform([1, 1, 6, 6], -4.0, 4.0, 19);
    let t = uniform([1, 1, 6, 6], 0.0, 1.0, 20).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let err = grad_error!(&z, |tape, v| {
        let tv = tape.constant(t.cast());
        tape.bce_logits(v, tv)
    });
    assert_close("bce_logits", err);
    let p = uniform([1, 1, 6, 6], 0.05, 0.95, 21);
    let err = grad_error!(&p, |tape, v| {
        let tv = tape.constant(t.cast());
        tape.mse(tv, v)
    });
    assert_close("mse (second argument)", err);
}

#[test]
fn vaccine_losses_through_fresh_models() {
    let host = uniform([1, 3, 16, 16], 0.05, 0.95, 21);
    let delta = uniform([1, 3, 16, 16], -0.03, 0.03, 22);
    for variant in Variant::ALL {
        let model = RemovalModel::build(variant, 23);
        for kind in [VaccineKind::Dwv, VaccineKind::Iwv] {
            let (_, analytic) = loss_and_grad::<f32>(&[&model], &host.cast(), &delta.cast(), kind, 2.0).unwrap();
            let numeric = finite_diff_grad(
                |d| match kind {
                    VaccineKind::Dwv => loss_dwv(&model, &host, d).unwrap(),
                    VaccineKind::Iwv => loss_iwv(&model, &host, d, 2.0).unwrap(),
                },
                &delta,
                common::NETWORK_FD_STEP,
            )
            .unwrap();
            assert_close(&format!("{kind} through {variant}"), max_relative_error(&analytic.cast(), &numeric));
        }
    }
}
