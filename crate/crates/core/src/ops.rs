//! Forward and backward kernels for the differentiable operations.
//!
//! Convolutions are fixed at 3×3 with padding 1 and run as im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const PAD: usize = 1;

/// Output spatial size of a 3×3, padding-1 convolution.
pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    (dim + 2 * PAD - KERNEL) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Self> {
        let [batch, c_in, h, w] = x.shape();
        let [c_out, w_in, kh, kw] = weight.shape();
        if stride != 1 && stride != 2 {
            return Err(shape_err("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if kh != KERNEL || kw != KERNEL {
            return Err(shape_err("conv2d", format!("kernel must be 3x3, got {kh}x{kw}")));
        }
        if w_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels but weights expect {w_in}"),
            ));
        }
        if h == 0 || w == 0 || batch == 0 {
            return Err(shape_err("conv2d", format!("empty input {:?}", x.shape())));
        }
        if bias.shape() != [1, c_out, 1, 1] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            stride,
            ho: conv_out_dim(h, stride),
            wo: conv_out_dim(w, stride),
        })
    }

    fn rows(&self) -> usize {
        self.c_in * KERNEL * KERNEL
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `lo..hi` whose horizontal tap `kx` lands inside the row.
fn valid_span(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = if kx >= PAD { 0 } else { (PAD - kx).div_ceil(g.stride) };
    let hi = (g.w + PAD - kx).div_ceil(g.stride).min(g.wo);
    (lo.min(hi), hi)
}

/// Unfolds one image (C×H×W) into a (C·9)×(Ho·Wo) patch matrix.
fn im2col<T: Real>(x: &[T], g: &Geometry, out: &mut [T]) {
    let n_cols = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut out[row * n_cols..(row + 1) * n_cols];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - PAD as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    let first = lo * g.stride + kx - PAD;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let n_cols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                let (lo, hi) = valid_span(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - PAD;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &s) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `src` (rows×cols) into row-major `dst` (cols×rows).
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: slice lengths match the stated dimensions and `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3×3 convolution with padding 1 and stride 1 or 2.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::check(x, weight, bias, stride)?;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.cols();
    let mut cols = vec![T::ZERO; g.rows() * g.cols()];
    let mut out = vec![T::ZERO; g.batch * out_len];
    let b = bias.data();
    for n in 0..g.batch {
        im2col(&x.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (o, chunk) in dst.chunks_mut(g.cols()).enumerate() {
            chunk.fill(b[o]);
        }
        matmul(g.c_out, g.rows(), g.cols(), weight.data(), false, &cols, false, dst, true);
    }
    Tensor::new([g.batch, g.c_out, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`]; each part is computed only when requested.
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = Geometry::check(x, weight, bias, stride)?;
    grad_out.expect_shape("conv2d_backward", [g.batch, g.c_out, g.ho, g.wo])?;
    let [need_input, need_weight, need_bias] = need;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.cols();

    let mut dx = need_input.then(|| vec![T::ZERO; g.batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::ZERO; weight.len()]);
    let mut cols = vec![T::ZERO; g.rows() * g.cols()];
    let mut cols_t = vec![T::ZERO; if need_weight { cols.len() } else { 0 }];
    for n in 0..g.batch {
        let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[n * in_len..(n + 1) * in_len], &g, &mut cols);
            // matrixmultiply packs a strided B slowly, so transpose up front.
            transpose(&cols, g.rows(), g.cols(), &mut cols_t);
            // dW (c_out×rows) += dY · colsᵀ.
            matmul(g.c_out, g.cols(), g.rows(), dy, false, &cols_t, false, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(g.rows(), g.c_out, g.cols(), weight.data(), true, dy, false, &mut cols, false);
            col2im(&cols, &g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    let db = need_bias.then(|| {
        let mut db = vec![T::ZERO; g.c_out];
        for n in 0..g.batch {
            let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
            for (o, chunk) in dy.chunks(g.cols()).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.to_f64()).sum();
                db[o] += T::from_f64(s);
            }
        }
        db
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(bias.shape(), d)).transpose()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    // Branch keeps exp() from overflowing for large |v|.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::ZERO { v } else { T::ZERO }),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Backward of an activation given its input `x` and output `y`.
pub fn activation_backward<T: Real>(
    kind: Activation,
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => x.zip_map(grad_out, |v, g| if v > T::ZERO { g } else { T::ZERO }),
        Activation::Sigmoid => y.zip_map(grad_out, |s, g| g * s * (T::ONE - s)),
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    for plane in x.data().chunks(h * w) {
        for y in 0..h2 {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..w2 {
                out.push(row[x / 2]);
            }
        }
    }
    Tensor::new([n, c, h2, w2], out).expect("upsample shape")
}

/// Sums each 2×2 output block back onto its source pixel.
pub fn upsample_nearest2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h2, w2] = grad_out.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(shape_err("upsample_backward", format!("odd gradient dims {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::ZERO; n * c * h * w];
    for (plane, dst) in grad_out.data().chunks(h2 * w2).zip(out.chunks_mut(h * w)) {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += plane[y * w2 + x];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

fn check_blend<T: Real>(mask: &Tensor<T>, fg: &Tensor<T>, bg: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = fg.shape();
    if bg.shape() != fg.shape() || mask.shape() != [n, 1, h, w] {
        return Err(shape_err(
            "blend",
            format!("mask {:?}, fg {:?}, bg {:?}", mask.shape(), fg.shape(), bg.shape()),
        ));
    }
    Ok(())
}

/// `mask·fg + (1 - mask)·bg` with a single-channel mask broadcast over channels.
pub fn blend<T: Real>(mask: &Tensor<T>, fg: &Tensor<T>, bg: &Tensor<T>) -> Result<Tensor<T>> {
    check_blend(mask, fg, bg)?;
    let [_, c, h, w] = fg.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(fg.len());
    for (i, (f, b)) in fg.data().chunks(plane).zip(bg.data().chunks(plane)).enumerate() {
        let m = &mask.data()[(i / c) * plane..(i / c + 1) * plane];
        out.extend(m.iter().zip(f.iter().zip(b)).map(|(&m, (&f, &b))| m * f + (T::ONE - m) * b));
    }
    Tensor::new(fg.shape(), out)
}

pub struct BlendGrads<T: Real> {
    pub mask: Tensor<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
}

pub fn blend_backward<T: Real>(
    mask: &Tensor<T>,
    fg: &Tensor<T>,
    bg: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BlendGrads<T>> {
    check_blend(mask, fg, bg)?;
    grad_out.expect_shape("blend_backward", fg.shape())?;
    let [_, c, h, w] = fg.shape();
    let plane = h * w;
    let mut dm = vec![T::ZERO; mask.len()];
    let mut dfg = Vec::with_capacity(fg.len());
    let mut dbg = Vec::with_capacity(fg.len());
    for (i, ((f, b), g)) in fg
        .data()
        .chunks(plane)
        .zip(bg.data().chunks(plane))
        .zip(grad_out.data().chunks(plane))
        .enumerate()
    {
        let range = (i / c) * plane..(i / c + 1) * plane;
        let m = &mask.data()[range.clone()];
        for (j, ((&m, (&f, &b)), &g)) in m.iter().zip(f.iter().zip(b)).zip(g).enumerate() {
            dfg.push(m * g);
            dbg.push((T::ONE - m) * g);
            dm[range.start + j] += (f - b) * g;
        }
    }
    Ok(BlendGrads {
        mask: Tensor::new(mask.shape(), dm)?,
        fg: Tensor::new(fg.shape(), dfg)?,
        bg: Tensor::new(bg.shape(), dbg)?,
    })
}
