//! Dense `(batch, channel, height, width)` tensors and the primitive kernels
//! the aligner is built from.
//!
//! Layout is row-major with width fastest. Matrices are carried as tensors of
//! shape `(stack, 1, rows, cols)`, so a stack of per-block matrices is a
//! single tensor.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Result, XabaError};
use crate::scalar::{lane_dot, lit, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one `(height, width)` plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.batch == other.batch && self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(XabaError::config(format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A single `(rows, cols)` matrix, stored as shape `(1, 1, rows, cols)`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(1, 1, rows, cols), data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(Shape::new(1, 1, n, n), |_, _, i, j| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(XabaError::config(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// One batch item as a standalone `(1, c, h, w)` tensor.
    pub fn item(&self, n: usize) -> Self {
        let len = self.shape.item();
        Tensor {
            shape: Shape {
                batch: 1,
                ..self.shape
            },
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch dimension.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| XabaError::config("stack of zero tensors"))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.channels != base.channels
                || t.shape.height != base.height
                || t.shape.width != base.width
            {
                return Err(XabaError::config(format!(
                    "cannot stack {} with {}",
                    t.shape, base
                )));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { batch, ..base },
            data,
        })
    }
}

/// Convolution parameters: weights `(out, in, kh, kw)` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.height.is_multiple_of(2) || s.width.is_multiple_of(2) {
            return Err(XabaError::config(format!(
                "kernel must have odd size, got {}x{}",
                s.height, s.width
            )));
        }
        if bias.len() != s.batch {
            return Err(XabaError::config(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                s.batch
            )));
        }
        Ok(ConvKernel { weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        ConvKernel {
            weight: Tensor::zeros(Shape::new(out_channels, in_channels, size, size)),
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Centre-tap delta: output channel `o` copies input channel `o`.
    pub fn identity(channels: usize, size: usize) -> Self {
        let mut k = Self::zeros(channels, channels, size);
        for c in 0..channels {
            let off = k.weight.offset(c, c, size / 2, size / 2);
            k.weight.data_mut()[off] = T::one();
        }
        k
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.weight.shape().height, self.weight.shape().width)
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            weight: self.weight.cast(),
            bias: self
                .bias
                .iter()
                .map(|&b| U::from_f64_lossy(b.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s.channels * s.height * s.width
    }
}

/// Mirror index without edge repetition: `-1 → 1`, `n → n-2`. Folds repeatedly
/// for offsets larger than the extent.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Unfolds output rows `rows` of one batch item into a `(c·kh·kw, rows.len()·w)`
/// patch matrix with reflect padding.
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    (kh, kw): (usize, usize),
    rows: std::ops::Range<usize>,
    cols: &mut [T],
) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let span = rows.len() * w;
    let xmap: Vec<Vec<usize>> = (0..kw)
        .map(|kx| {
            (0..w)
                .map(|x| reflect_index(x as isize + kx as isize - pw, w))
                .collect()
        })
        .collect();
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..kh {
            for (kx, xm) in xmap.iter().enumerate() {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * span..(row + 1) * span];
                for (i, y) in rows.clone().enumerate() {
                    let sy = reflect_index(y as isize + ky as isize - ph, h);
                    let srow = &plane[sy * w..(sy + 1) * w];
                    for (d, &sx) in dst[i * w..(i + 1) * w].iter_mut().zip(xm) {
                        *d = srow[sx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the source plane.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dst: &mut [T],
) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let xmap: Vec<Vec<usize>> = (0..kw)
        .map(|kx| {
            (0..w)
                .map(|x| reflect_index(x as isize + kx as isize - pw, w))
                .collect()
        })
        .collect();
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..kh {
            for (kx, xm) in xmap.iter().enumerate() {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = reflect_index(y as isize + ky as isize - ph, h);
                    for (&g, &sx) in src[y * w..(y + 1) * w].iter().zip(xm) {
                        plane[sy * w + sx] += g;
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<()> {
    if input.shape().channels != kernel.in_channels() {
        return Err(XabaError::config(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.shape().channels,
            kernel.in_channels()
        )));
    }
    Ok(())
}

/// Output pixels per im2col band in [`conv2d`].
const CONV_TILE: usize = 2048;

/// Same-size cross-correlation with reflect padding, plus bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    check_conv(input, kernel)?;
    let s = input.shape();
    let (kh, kw) = kernel.size();
    let (cin, cout, hw) = (s.channels, kernel.out_channels(), s.plane());
    let patch = cin * kh * kw;
    let wmat = MatRef::row_major(kernel.weight.data(), cout, patch);
    let mut out = Tensor::zeros(s.with_channels(cout));
    if hw == 0 || cout == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(cout * hw)
        .zip(input.data.par_chunks(cin * hw))
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |(cols, tile), (dst, src)| {
                if kh == 1 && kw == 1 {
                    T::gemm(wmat, MatRef::row_major(src, cin, hw), dst, false);
                } else {
                    // Row bands keep the patch matrix small enough to stay in cache.
                    let band = (CONV_TILE / s.width.max(1)).max(1);
                    for y0 in (0..s.height).step_by(band) {
                        let y1 = (y0 + band).min(s.height);
                        let span = (y1 - y0) * s.width;
                        cols.resize(patch * span, T::zero());
                        tile.resize(cout * span, T::zero());
                        im2col(
                            src,
                            cin,
                            s.height,
                            s.width,
                            (kh, kw),
                            y0..y1,
                            &mut cols[..patch * span],
                        );
                        T::gemm(
                            wmat,
                            MatRef::row_major(&cols[..patch * span], patch, span),
                            &mut tile[..cout * span],
                            false,
                        );
                        let at = y0 * s.width;
                        for (o, t) in tile[..cout * span].chunks_exact(span).enumerate() {
                            dst[o * hw + at..o * hw + at + span].copy_from_slice(t);
                        }
                    }
                }
                for (o, &b) in kernel.bias.iter().enumerate() {
                    dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += b);
                }
            },
        );
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    check_conv(input, kernel)?;
    let s = input.shape();
    let (kh, kw) = kernel.size();
    let (cin, cout, hw) = (s.channels, kernel.out_channels(), s.plane());
    let patch = cin * kh * kw;
    let wmat = MatRef::row_major(kernel.weight.data(), cout, patch);

    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..s.batch)
        .into_par_iter()
        .map(|n| {
            let src = &input.data[n * cin * hw..(n + 1) * cin * hw];
            let g = &grad_out.data[n * cout * hw..(n + 1) * cout * hw];
            let gmat = MatRef::row_major(g, cout, hw);
            let one_by_one = kh == 1 && kw == 1;
            let cols_buf;
            let cols = if one_by_one {
                src
            } else {
                let mut buf = vec![T::zero(); patch * hw];
                im2col(src, cin, s.height, s.width, (kh, kw), 0..s.height, &mut buf);
                cols_buf = buf;
                &cols_buf[..]
            };
            let mut dw = vec![T::zero(); cout * patch];
            T::gemm(gmat, MatRef::row_major(cols, patch, hw).t(), &mut dw, false);
            let mut dcols = vec![T::zero(); patch * hw];
            T::gemm(wmat.t(), gmat, &mut dcols, false);
            let dx = if one_by_one {
                dcols
            } else {
                let mut dx = vec![T::zero(); cin * hw];
                col2im(&dcols, cin, s.height, s.width, kh, kw, &mut dx);
                dx
            };
            let db = (0..cout)
                .map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum())
                .collect();
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(s.numel());
    let mut dw = vec![T::zero(); cout * patch];
    let mut db = vec![T::zero(); cout];
    for (dxi, dwi, dbi) in per_item {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&dbi).for_each(|(a, &b)| *a += b);
    }
    Ok((
        Tensor::new(s, dx)?,
        Tensor::new(kernel.weight.shape(), dw)?,
        db,
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn check_matrix_stack<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape().channels != 1 {
        return Err(XabaError::config(format!(
            "{what}: expected a matrix stack (n, 1, rows, cols), got {}",
            t.shape()
        )));
    }
    Ok(())
}

/// Right-hand widths up to this use row dot products instead of packed GEMM,
/// which handles very narrow outputs poorly.
const NARROW: usize = 4;

/// Batched matrix product: `(n, 1, m, k) × (n, 1, k, p) → (n, 1, m, p)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix_stack(a, "matmul lhs")?;
    check_matrix_stack(b, "matmul rhs")?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.width != sb.height {
        return Err(XabaError::config(format!(
            "matmul: cannot multiply {sa} by {sb}"
        )));
    }
    let (m, k, p) = (sa.height, sa.width, sb.width);
    let mut out = Tensor::zeros(Shape::new(sa.batch, 1, m, p));
    if m * p == 0 {
        return Ok(out);
    }
    if p <= NARROW {
        out.data
            .par_chunks_mut(m * p)
            .enumerate()
            .for_each_init(Vec::new, |bt, (i, dst)| {
                let lhs = &a.data[i * m * k..(i + 1) * m * k];
                let rhs = &b.data[i * k * p..(i + 1) * k * p];
                bt.clear();
                bt.extend((0..p).flat_map(|c| rhs.iter().skip(c).step_by(p).copied()));
                for (row, out_row) in lhs.chunks_exact(k).zip(dst.chunks_exact_mut(p)) {
                    for (c, o) in out_row.iter_mut().enumerate() {
                        *o = lane_dot(row, &bt[c * k..(c + 1) * k]);
                    }
                }
            });
        return Ok(out);
    }
    out.data
        .par_chunks_mut(m * p)
        .enumerate()
        .for_each(|(i, dst)| {
            let lhs = MatRef::row_major(&a.data[i * m * k..(i + 1) * m * k], m, k);
            let rhs = MatRef::row_major(&b.data[i * k * p..(i + 1) * k * p], k, p);
            T::gemm(lhs, rhs, dst, false);
        });
    Ok(out)
}

/// Batched `aᵀ·b` or `a·bᵀ` used by the backward passes.
pub(crate) fn matmul_transposed<T: Scalar>(
    a: &Tensor<T>,
    transpose_a: bool,
    b: &Tensor<T>,
    transpose_b: bool,
) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = if transpose_a {
        (sa.width, sa.height)
    } else {
        (sa.height, sa.width)
    };
    let p = if transpose_b { sb.height } else { sb.width };
    let mut out = Tensor::zeros(Shape::new(sa.batch, 1, m, p));
    if m * p == 0 {
        return out;
    }
    let (la, lb) = (sa.plane(), sb.plane());
    out.data
        .par_chunks_mut(m * p)
        .enumerate()
        .for_each(|(i, dst)| {
            let lhs = MatRef::row_major(&a.data[i * la..(i + 1) * la], sa.height, sa.width);
            let rhs = MatRef::row_major(&b.data[i * lb..(i + 1) * lb], sb.height, sb.width);
            let lhs = if transpose_a { lhs.t() } else { lhs };
            let rhs = if transpose_b { rhs.t() } else { rhs };
            debug_assert_eq!(lhs.cols, k);
            T::gemm(lhs, rhs, dst, false);
        });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Integer-factor resampling. `Down` is a non-overlapping box average, `Up`
/// is bilinear with corner-aligned endpoints.
pub fn resize<T: Scalar>(x: &Tensor<T>, factor: usize, direction: Direction) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(XabaError::precondition("resize factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    match direction {
        Direction::Down => downsample(x, factor),
        Direction::Up => Ok(upsample(x, factor)),
    }
}

fn downsample<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.height.is_multiple_of(f) || !s.width.is_multiple_of(f) {
        return Err(XabaError::precondition(format!(
            "cannot downsample {}x{} by {f}: dimensions not divisible",
            s.height, s.width
        )));
    }
    let (oh, ow) = (s.height / f, s.width / f);
    let inv = T::one() / lit::<T>((f * f) as f64);
    let mut out = Tensor::zeros(Shape {
        height: oh,
        width: ow,
        ..s
    });
    for plane in 0..s.batch * s.channels {
        let src = &x.data[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                // Accumulating deviations from the first sample keeps constant
                // windows exactly constant.
                let anchor = src[oy * f * s.width + ox * f];
                let mut acc = T::zero();
                for dy in 0..f {
                    let row = &src[(oy * f + dy) * s.width + ox * f..][..f];
                    for &v in row {
                        acc += v - anchor;
                    }
                }
                dst[oy * ow + ox] = anchor + acc * inv;
            }
        }
    }
    Ok(out)
}

/// Source coordinate of output index `i` for a corner-aligned upsample from `n_in` to `n_out`.
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

fn upsample<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.height * f, s.width * f);
    let ys: Vec<_> = (0..oh).map(|i| corner_aligned(i, s.height, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|i| corner_aligned(i, s.width, ow)).collect();
    let mut out = Tensor::zeros(Shape {
        height: oh,
        width: ow,
        ..s
    });
    for plane in 0..s.batch * s.channels {
        let src = &x.data[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let ty = lit::<T>(ty);
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let tx = lit::<T>(tx);
                let (a, b) = (src[y0 * s.width + x0], src[y0 * s.width + x1]);
                let (c, d) = (src[y1 * s.width + x0], src[y1 * s.width + x1]);
                // lerp as `a + t·(b − a)` so equal corners reproduce exactly.
                let top = a + tx * (b - a);
                let bottom = c + tx * (d - c);
                dst[oy * ow + ox] = top + ty * (bottom - top);
            }
        }
    }
    out
}

/// Adjoint of [`resize`] for the given source shape.
pub(crate) fn resize_backward<T: Scalar>(
    grad: &Tensor<T>,
    source: Shape,
    factor: usize,
    direction: Direction,
) -> Tensor<T> {
    if factor == 1 {
        return grad.clone();
    }
    let gs = grad.shape();
    let mut dx = Tensor::zeros(source);
    match direction {
        Direction::Down => {
            let inv = T::one() / lit::<T>((factor * factor) as f64);
            for plane in 0..gs.batch * gs.channels {
                let g = &grad.data[plane * gs.plane()..(plane + 1) * gs.plane()];
                let d = &mut dx.data[plane * source.plane()..(plane + 1) * source.plane()];
                for y in 0..source.height {
                    for x in 0..source.width {
                        d[y * source.width + x] = g[(y / factor) * gs.width + x / factor] * inv;
                    }
                }
            }
        }
        Direction::Up => {
            let ys: Vec<_> = (0..gs.height)
                .map(|i| corner_aligned(i, source.height, gs.height))
                .collect();
            let xs: Vec<_> = (0..gs.width)
                .map(|i| corner_aligned(i, source.width, gs.width))
                .collect();
            for plane in 0..gs.batch * gs.channels {
                let g = &grad.data[plane * gs.plane()..(plane + 1) * gs.plane()];
                let d = &mut dx.data[plane * source.plane()..(plane + 1) * source.plane()];
                for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                    let ty = lit::<T>(ty);
                    for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                        let tx = lit::<T>(tx);
                        let v = g[oy * gs.width + ox];
                        let (top, bottom) = (v * (T::one() - ty), v * ty);
                        d[y0 * source.width + x0] += top * (T::one() - tx);
                        d[y0 * source.width + x1] += top * tx;
                        d[y1 * source.width + x0] += bottom * (T::one() - tx);
                        d[y1 * source.width + x1] += bottom * tx;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel dimension, preserving input order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| XabaError::config("concat of zero tensors"))?
        .shape();
    for t in xs {
        if !t.shape().same_spatial(&first) {
            return Err(XabaError::config(format!(
                "concat: {} does not match {}",
                t.shape(),
                first
            )));
        }
    }
    let channels = xs.iter().map(|t| t.shape().channels).sum();
    let shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.batch {
        for t in xs {
            let len = t.shape().item();
            data.extend_from_slice(&t.data[n * len..(n + 1) * len]);
        }
    }
    Tensor::new(shape, data)
}

/// Inverse of [`concat_channels`] given the per-part channel counts.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, parts: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if parts.iter().sum::<usize>() != s.channels {
        return Err(XabaError::config(format!(
            "split: parts {parts:?} do not cover {} channels",
            s.channels
        )));
    }
    let mut out: Vec<Vec<T>> = parts
        .iter()
        .map(|&c| Vec::with_capacity(s.batch * c * s.plane()))
        .collect();
    for n in 0..s.batch {
        let mut off = n * s.item();
        for (dst, &c) in out.iter_mut().zip(parts) {
            dst.extend_from_slice(&x.data[off..off + c * s.plane()]);
            off += c * s.plane();
        }
    }
    out.into_iter()
        .zip(parts)
        .map(|(d, &c)| Tensor::new(s.with_channels(c), d))
        .collect()
}

/// Original spatial extent of a padded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Reflect-pads the bottom and right edges up to the next multiple of `multiple`.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, CropRecord)> {
    if multiple == 0 {
        return Err(XabaError::precondition(
            "padding multiple must be at least 1",
        ));
    }
    let s = x.shape();
    let record = CropRecord {
        height: s.height,
        width: s.width,
    };
    let (h, w) = (
        s.height.div_ceil(multiple) * multiple,
        s.width.div_ceil(multiple) * multiple,
    );
    if (h, w) == (s.height, s.width) {
        return Ok((x.clone(), record));
    }
    let out = Tensor::from_fn(
        Shape {
            height: h,
            width: w,
            ..s
        },
        |n, c, y, xx| {
            x.at(
                n,
                c,
                reflect_index(y as isize, s.height),
                reflect_index(xx as isize, s.width),
            )
        },
    );
    Ok((out, record))
}

/// Keeps the top-left `record` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, record: &CropRecord) -> Result<Tensor<T>> {
    let s = x.shape();
    if record.height > s.height || record.width > s.width {
        return Err(XabaError::config(format!(
            "cannot crop {}x{} out of {}x{}",
            record.height, record.width, s.height, s.width
        )));
    }
    Ok(Tensor::from_fn(
        Shape {
            height: record.height,
            width: record.width,
            ..s
        },
        |n, c, y, xx| x.at(n, c, y, xx),
    ))
}
