//! Dense NCHW tensors and the two affine primitives every layer is built on:
//! multi-channel 2D convolution and the fully connected matrix product.
//!
//! Convolution uses the cross-correlation orientation (kernels are not
//! flipped) and is always dense across channels. Kernels run single-threaded
//! over an im2col buffer and a packed GEMM; results are identical between
//! calls with identical inputs.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{invalid, Result};

/// Scalar types the kernels are instantiated for.
///
/// `f32` is the storage type used everywhere in training. `f64` exists so
/// gradient checks can run the same code paths with 64-bit accumulation.
pub trait Element: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = a * b + beta * c` on raw strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must be in
    /// bounds of the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n) + beta·c`, all buffers row-major.
///
/// With `a_t` set, `a` is stored as k×m; with `b_t` set, `b` is stored as n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths were checked against the logical dims above and
    // the strides describe exactly those row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid!("tensor shape {shape:?} must be non-empty with positive dims"));
        }
        if data.len() != expected {
            return Err(invalid!(
                "tensor shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(invalid!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Shape as `[n, c, h, w]`, failing for any other rank.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(invalid!("expected an NCHW tensor, got shape {:?}", self.shape)),
        }
    }

    /// Shape as `[rows, cols]`, failing for any other rank.
    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(invalid!("expected a 2-D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Sum accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(invalid!("add: shapes {:?} and {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid!("add: shapes {:?} and {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Batch item `i` of an N-leading tensor, keeping a batch dim of 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let n = self.shape[0];
        if i >= n {
            return Err(invalid!("batch index {i} out of range for {:?}", self.shape));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Concatenate equal-shaped items along a new leading batch dimension.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| invalid!("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(invalid!("stack: shape {:?} differs from {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

/// Kernel size, stride and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }

    /// `floor((in + 2·pad − kernel)/stride) + 1`, or an error if that is < 1.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(invalid!("degenerate convolution geometry {self:?}"));
        }
        let ph = in_h + 2 * self.pad;
        let pw = in_w + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(invalid!(
                "kernel {}x{} does not fit padded input {ph}x{pw}",
                self.kernel_h,
                self.kernel_w
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch_len(&self, g: &ConvGeometry) -> usize {
        self.c * g.kernel_h * g.kernel_w
    }
}

fn conv_dims<T: Element>(input_shape: &[usize], kernels: &Tensor<T>, geom: &ConvGeometry) -> Result<ConvDims> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(invalid!("conv2d input must be NCHW, got {input_shape:?}")),
    };
    let [o, kc, kh, kw] = kernels
        .dims4()
        .map_err(|_| invalid!("conv2d kernels must be OCKK, got {:?}", kernels.shape()))?;
    if kc != c || kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(invalid!(
            "conv2d kernel shape {:?} incompatible with input {input_shape:?} and geometry {geom:?}",
            kernels.shape()
        ));
    }
    let (oh, ow) = geom.output_size(h, w)?;
    Ok(ConvDims { n, c, h, w, o, oh, ow })
}

/// Unfold one `[C,H,W]` image into a `[C·kh·kw, oh·ow]` patch matrix.
fn im2col<T: Element>(img: &[T], d: &ConvDims, g: &ConvGeometry, cols: &mut [T]) {
    let p = d.oh * d.ow;
    let pad = g.pad as isize;
    for c in 0..d.c {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch matrix back into an image, summing overlapping contributions.
fn col2im<T: Element>(cols: &[T], d: &ConvDims, g: &ConvGeometry, img: &mut [T]) {
    let p = d.oh * d.ow;
    let pad = g.pad as isize;
    for c in 0..d.c {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Multi-channel 2D convolution (cross-correlation): `input` is NCHW,
/// `kernels` is `[O, C, kh, kw]`, `bias` has `O` entries.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), kernels, geom)?;
    if bias.len() != d.o {
        return Err(invalid!(
            "conv2d bias has {} entries, kernels {:?} need {}",
            bias.len(),
            kernels.shape(),
            d.o
        ));
    }
    let k = d.patch_len(geom);
    let p = d.oh * d.ow;
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); d.n * d.o * p];
    let in_stride = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &d, geom, &mut cols);
        let out_n = &mut out[n * d.o * p..(n + 1) * d.o * p];
        for (o, row) in out_n.chunks_mut(p).enumerate() {
            row.fill(bias.data()[o]);
        }
        gemm(d.o, k, p, kernels.data(), false, &cols, false, T::one(), out_n);
    }
    Tensor::new(&[d.n, d.o, d.oh, d.ow], out)
}

/// Gradients of [`conv2d`]: `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_grad<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input.shape(), kernels, geom)?;
    check_grad_out(&d, grad_out)?;
    let k = d.patch_len(geom);
    let p = d.oh * d.ow;
    let in_stride = d.c * d.h * d.w;
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_k = vec![T::zero(); kernels.len()];
    let mut grad_b = vec![T::zero(); d.o];
    for n in 0..d.n {
        let g = &grad_out.data()[n * d.o * p..(n + 1) * d.o * p];
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &d, geom, &mut cols);
        // dW += G · colsᵀ
        gemm(d.o, p, k, g, false, &cols, true, T::one(), &mut grad_k);
        for (o, row) in g.chunks(p).enumerate() {
            grad_b[o] = grad_b[o] + row.iter().copied().sum::<T>();
        }
        // dcols = Wᵀ · G
        gemm(k, d.o, p, kernels.data(), true, g, false, T::zero(), &mut dcols);
        col2im(&dcols, &d, geom, &mut grad_in[n * in_stride..(n + 1) * in_stride]);
    }
    Ok((
        Tensor::new(input.shape(), grad_in)?,
        Tensor::new(kernels.shape(), grad_k)?,
        Tensor::new(&[d.o], grad_b)?,
    ))
}

/// Transposed convolution with the forward kernels: maps an output-space
/// signal back to an input of spatial size `input_hw`. This is the input
/// half of [`conv2d_grad`] and the projection step of deconv visualization.
pub fn conv2d_transpose<T: Element>(
    signal: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: &ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, _, _, _] = signal.dims4()?;
    let c = kernels.shape().get(1).copied().unwrap_or(0);
    let input_shape = [n, c, input_hw.0, input_hw.1];
    let d = conv_dims(&input_shape, kernels, geom)?;
    check_grad_out(&d, signal)?;
    let k = d.patch_len(geom);
    let p = d.oh * d.ow;
    let in_stride = d.c * d.h * d.w;
    let mut dcols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); n * in_stride];
    for i in 0..n {
        let g = &signal.data()[i * d.o * p..(i + 1) * d.o * p];
        gemm(k, d.o, p, kernels.data(), true, g, false, T::zero(), &mut dcols);
        col2im(&dcols, &d, geom, &mut out[i * in_stride..(i + 1) * in_stride]);
    }
    Tensor::new(&input_shape, out)
}

fn check_grad_out<T: Element>(d: &ConvDims, grad_out: &Tensor<T>) -> Result<()> {
    let expected = [d.n, d.o, d.oh, d.ow];
    if grad_out.shape() != expected {
        return Err(invalid!(
            "gradient shape {:?} does not match conv output shape {expected:?}",
            grad_out.shape()
        ));
    }
    Ok(())
}

/// Fully connected layer: `out[n,u] = Σ_f weight[u,f]·input[n,f] + bias[u]`.
pub fn matmul_affine<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, f] = input.dims2()?;
    let [u, wf] = weight.dims2()?;
    if wf != f || bias.len() != u {
        return Err(invalid!(
            "matmul shapes incompatible: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * u);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, f, u, input.data(), false, weight.data(), true, T::one(), &mut out);
    Tensor::new(&[n, u], out)
}

/// Gradients of [`matmul_affine`]: `(grad_input, grad_weight, grad_bias)`.
pub fn matmul_affine_grad<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, f] = input.dims2()?;
    let [u, wf] = weight.dims2()?;
    if wf != f || grad_out.shape() != [n, u] {
        return Err(invalid!(
            "matmul gradient shapes incompatible: input {:?}, weight {:?}, grad {:?}",
            input.shape(),
            weight.shape(),
            grad_out.shape()
        ));
    }
    let mut grad_in = vec![T::zero(); n * f];
    gemm(
        n,
        u,
        f,
        grad_out.data(),
        false,
        weight.data(),
        false,
        T::zero(),
        &mut grad_in,
    );
    let mut grad_w = vec![T::zero(); u * f];
    gemm(
        u,
        n,
        f,
        grad_out.data(),
        true,
        input.data(),
        false,
        T::zero(),
        &mut grad_w,
    );
    let mut grad_b = vec![T::zero(); u];
    for row in grad_out.data().chunks(u) {
        for (b, &g) in grad_b.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok((
        Tensor::new(&[n, f], grad_in)?,
        Tensor::new(&[u, f], grad_w)?,
        Tensor::new(&[u], grad_b)?,
    ))
}
