//! CPU kernels registered as candle custom ops.
//!
//! Convolution is lowered to im2col + GEMM in all three directions (forward,
//! input gradient, weight gradient). A transposed convolution is the input
//! gradient of the matching forward convolution, so one op type covers both
//! layer kinds and their backward passes.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed convolution with the given output padding.
    pub fn transposed_output_size(&self, input: usize, output_padding: usize) -> usize {
        (input - 1) * self.stride + self.kernel + output_padding - 2 * self.padding
    }
}

#[derive(Clone, Copy, Debug)]
enum Direction {
    /// `(x [n,c,h,w], w [co,c,k,k]) -> y [n,co,ho,wo]`
    Forward,
    /// `(dy [n,co,ho,wo], w [co,c,k,k]) -> dx [n,c,h,w]`
    InputGrad { height: usize, width: usize },
    /// `(x [n,c,h,w], dy [n,co,ho,wo]) -> dw [co,c,k,k]`
    WeightGrad,
}

struct GemmConv {
    geom: ConvGeometry,
    direction: Direction,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

// cols[(ci*k + ky)*k + kx][(b*ho + oy)*wo + ox]
fn im2col<T: WithDType>(x: &[T], d: &Dims, g: ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols_w = d.n * d.ho * d.wo;
    let mut cols = vec![T::zero(); d.c * k * k * cols_w];
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..d.n {
                    let plane = &x[(b * d.c + ci) * d.h * d.w..(b * d.c + ci + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let out = &mut dst[(b * d.ho + oy) * d.wo..(b * d.ho + oy + 1) * d.wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < d.w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: WithDType>(cols: &[T], d: &Dims, g: ConvGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols_w = d.n * d.ho * d.wo;
    let mut x = vec![T::zero(); d.n * d.c * d.h * d.w];
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..d.n {
                    let plane = &mut x[(b * d.c + ci) * d.h * d.w..(b * d.c + ci + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &src_row[(b * d.ho + oy) * d.wo..(b * d.ho + oy + 1) * d.wo];
                        let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < d.w {
                                dst[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `dst[m,n] = a[m,k] · b[k,n]` where `a` and `b` are addressed through
/// (row stride, column stride) pairs, so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType + 'static>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    dst: &mut [T],
) {
    debug_assert_eq!(dst.len(), m * n);
    // SAFETY: every index reachable through the given strides lies inside the
    // slices: callers pass either contiguous row-major (k, 1)/(n, 1) strides or
    // their transposes for buffers of exactly m*k / k*n / m*n elements.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            a_strides.1,
            a_strides.0,
            b.as_ptr(),
            b_strides.1,
            b_strides.0,
            T::zero(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

// [n, c, hw] <-> [c, n*hw]
fn batch_to_channel_major<T: WithDType>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(ci * n + b) * hw..(ci * n + b + 1) * hw].copy_from_slice(&x[(b * c + ci) * hw..(b * c + ci + 1) * hw]);
        }
    }
    out
}

fn channel_major_to_batch<T: WithDType>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(b * c + ci) * hw..(b * c + ci + 1) * hw].copy_from_slice(&x[(ci * n + b) * hw..(ci * n + b + 1) * hw]);
        }
    }
    out
}

impl GemmConv {
    fn run<T: WithDType + 'static>(&self, a: &[T], la: &Layout, b: &[T], lb: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let a = &a[la.start_offset()..la.start_offset() + la.shape().elem_count()];
        let b = &b[lb.start_offset()..lb.start_offset() + lb.shape().elem_count()];
        let g = self.geom;
        let k = g.kernel;
        match self.direction {
            Direction::Forward => {
                let (n, c, h, w) = la.shape().dims4()?;
                let (co, wc, _, _) = lb.shape().dims4()?;
                if wc != c {
                    bail!("conv: input has {c} channels, weight expects {wc}")
                }
                let d = Dims { n, c, h, w, ho: g.output_size(h), wo: g.output_size(w) };
                let cols = im2col(a, &d, g);
                let (kk, nn) = (c * k * k, n * d.ho * d.wo);
                let mut y = vec![T::zero(); co * nn];
                matmul(co, nn, kk, b, (kk as isize, 1), &cols, (nn as isize, 1), &mut y);
                Ok((channel_major_to_batch(&y, n, co, d.ho * d.wo), Shape::from((n, co, d.ho, d.wo))))
            }
            Direction::InputGrad { height, width } => {
                let (n, co, ho, wo) = la.shape().dims4()?;
                let (wco, c, _, _) = lb.shape().dims4()?;
                if wco != co {
                    bail!("conv input-grad: gradient has {co} channels, weight expects {wco}")
                }
                let d = Dims { n, c, h: height, w: width, ho, wo };
                let (kk, nn) = (c * k * k, n * ho * wo);
                let dy = batch_to_channel_major(a, n, co, ho * wo);
                let mut cols = vec![T::zero(); kk * nn];
                matmul(kk, nn, co, b, (1, kk as isize), &dy, (nn as isize, 1), &mut cols);
                Ok((col2im(&cols, &d, g), Shape::from((n, c, height, width))))
            }
            Direction::WeightGrad => {
                let (n, c, h, w) = la.shape().dims4()?;
                let (_, co, ho, wo) = lb.shape().dims4()?;
                let d = Dims { n, c, h, w, ho, wo };
                let cols = im2col(a, &d, g);
                let (kk, nn) = (c * k * k, n * ho * wo);
                let dy = batch_to_channel_major(b, n, co, ho * wo);
                let mut dw = vec![T::zero(); co * kk];
                matmul(co, kk, nn, &dy, (nn as isize, 1), &cols, (1, nn as isize), &mut dw);
                Ok((dw, Shape::from((co, c, k, k))))
            }
        }
    }
}

impl CustomOp2 for GemmConv {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if !l1.is_contiguous() || !l2.is_contiguous() {
            bail!("gemm-conv2d expects contiguous operands")
        }
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (v, s) = self.run(a, l1, b, l2)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (v, s) = self.run(a, l1, b, l2)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => bail!("gemm-conv2d supports matching f32 or f64 operands"),
        }
    }

    fn bwd(&self, a: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let op = |direction| GemmConv { geom: self.geom, direction };
        match self.direction {
            Direction::Forward => {
                let (_, _, height, width) = a.dims4()?;
                // raw inputs need no gradient
                let dx = if a.track_op() { Some(grad.apply_op2(b, op(Direction::InputGrad { height, width }))?) } else { None };
                let dw = a.apply_op2(&grad, op(Direction::WeightGrad))?;
                Ok((dx, Some(dw)))
            }
            Direction::InputGrad { .. } => {
                let da = grad.apply_op2(b, op(Direction::Forward))?;
                let dw = grad.apply_op2(a, op(Direction::WeightGrad))?;
                Ok((Some(da), Some(dw)))
            }
            Direction::WeightGrad => bail!("gemm-conv2d weight gradient is not differentiable"),
        }
    }
}

/// 2-d convolution, `x [n,c,h,w]`, `weight [co,c,k,k]`, square kernel.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeometry) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, GemmConv { geom, direction: Direction::Forward })
}

/// Transposed 2-d convolution, `x [n,ci,h,w]`, `weight [ci,co,k,k]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, geom: ConvGeometry, output_padding: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let direction = Direction::InputGrad {
        height: geom.transposed_output_size(h, output_padding),
        width: geom.transposed_output_size(w, output_padding),
    };
    x.contiguous()?.apply_op2(&weight.contiguous()?, GemmConv { geom, direction })
}

struct RowNorm;

impl RowNorm {
    fn run<T: WithDType>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
        (0..rows)
            .map(|r| {
                let s: f64 = x[r * cols..(r + 1) * cols].iter().map(|v| v.to_f64() * v.to_f64()).sum();
                T::from_f64(s.sqrt())
            })
            .collect()
    }
}

impl CustomOp1 for RowNorm {
    fn name(&self) -> &'static str {
        "row-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, cols) = l.shape().dims2()?;
        let Some((start, end)) = l.contiguous_offsets() else { bail!("row-norm expects a contiguous operand") };
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(Self::run(&v[start..end], rows, cols)),
            CpuStorage::F64(v) => CpuStorage::F64(Self::run(&v[start..end], rows, cols)),
            _ => bail!("row-norm supports f32 and f64"),
        };
        Ok((out, Shape::from(rows)))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d‖x‖/dx = x/‖x‖; a zero row has x = 0, so clamping the divisor
        // yields the zero subgradient there.
        let scale = (grad / res.maximum(1e-30)?)?;
        Ok(Some(arg.broadcast_mul(&scale.unsqueeze(1)?)?))
    }
}

/// Euclidean norm of each row of a `[rows, cols]` tensor; the gradient at a
/// zero row is zero rather than NaN.
pub fn row_norm(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(RowNorm)
}

/// `(n, c, s)` view of a contiguous `[n, c, ...]` layout.
fn channel_dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let d = l.shape().dims();
    if d.len() < 2 {
        bail!("per-channel op expects rank >= 2, got {:?}", d)
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("per-channel op expects contiguous operands"),
    }
}

macro_rules! dispatch_float {
    ($name:literal, $s:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32($v) => CpuStorage::F32($body),
            CpuStorage::F64($v) => CpuStorage::F64($body),
            _ => bail!(concat!($name, " supports f32 and f64")),
        }
    };
}

/// Per-channel batch mean and biased variance, accumulated in f64.
fn channel_moments<T: WithDType>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (ci, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let mut sum = 0.0;
        for b in 0..n {
            sum += x[(b * c + ci) * s..(b * c + ci + 1) * s].iter().map(|t| t.to_f64()).sum::<f64>();
        }
        *m = sum / count;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ci) * s..(b * c + ci + 1) * s].iter().map(|t| (t.to_f64() - *m).powi(2)).sum::<f64>();
        }
        *v = sq / count;
    }
    (mean, var)
}

/// Sum of `[n, c, ...]` over every axis except the channel axis.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, st: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, s) = channel_dims(l)?;
        fn run<T: WithDType>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
            (0..c)
                .map(|ci| T::from_f64((0..n).map(|b| x[(b * c + ci) * s..(b * c + ci + 1) * s].iter().map(|t| t.to_f64()).sum::<f64>()).sum()))
                .collect()
        }
        let out = dispatch_float!("channel-sum", st, |v| run(contiguous_slice(v, l)?, n, c, s));
        Ok((out, Shape::from(c)))
    }
}

/// Sums `x [n, c, ...]` to a `[c]` tensor.
pub fn channel_sum(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ChannelSum)
}

/// `x [n, c, ...] + bias [c]` broadcast over the channel axis.
struct ChannelBias;

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, s) = channel_dims(l1)?;
        fn run<T: WithDType>(x: &[T], b: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for bi in 0..n {
                for (ci, &bias) in b.iter().enumerate().take(c) {
                    out[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter_mut().for_each(|v| *v += bias);
                }
            }
            out
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(run(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?, n, c, s)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(run(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?, n, c, s)),
            _ => bail!("channel-bias supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(channel_sum(grad)?)))
    }
}

/// Adds a per-channel bias to `x [n, c, ...]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)
}

/// Training-mode batch normalization with affine transform,
/// `(x [n, c, ...], gamma [c], beta [c]) -> y`, using batch statistics.
struct BatchNormTrain {
    eps: f64,
}

impl BatchNormTrain {
    fn run<T: WithDType>(&self, x: &[T], g: &[T], b: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
        let (mean, var) = channel_moments(x, n, c, s);
        let mut out = vec![T::zero(); x.len()];
        for ci in 0..c {
            let scale = g[ci].to_f64() / (var[ci] + self.eps).sqrt();
            let shift = b[ci].to_f64() - mean[ci] * scale;
            for bi in 0..n {
                let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = T::from_f64(v.to_f64() * scale + shift);
                }
            }
        }
        out
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, s) = channel_dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.run(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                n,
                c,
                s,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.run(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                n,
                c,
                s,
            )),
            _ => bail!("batch-norm-train supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = if x.track_op() { Some(x.apply_op3(&grad, gamma, BatchNormGrad { eps: self.eps, wrt_input: true })?) } else { None };
        let dgamma = x.apply_op3(&grad, gamma, BatchNormGrad { eps: self.eps, wrt_input: false })?;
        Ok((dx, Some(dgamma), Some(channel_sum(&grad)?)))
    }
}

/// `(x, dy, gamma)` to the input gradient of [`BatchNormTrain`], or to the
/// per-channel `Σ dy · x̂` gamma gradient.
struct BatchNormGrad {
    eps: f64,
    wrt_input: bool,
}

impl BatchNormGrad {
    fn run<T: WithDType>(&self, x: &[T], dy: &[T], g: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
        let (mean, var) = channel_moments(x, n, c, s);
        let m = (n * s) as f64;
        let mut dx = if self.wrt_input { vec![T::zero(); x.len()] } else { Vec::new() };
        let mut dgamma = Vec::with_capacity(c);
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + self.eps).sqrt();
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for bi in 0..n {
                let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                for (v, d) in x[r.clone()].iter().zip(&dy[r]) {
                    let d = d.to_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * (v.to_f64() - mean[ci]) * inv;
                }
            }
            dgamma.push(T::from_f64(sum_dy_xhat));
            if self.wrt_input {
                let k = g[ci].to_f64() * inv;
                for bi in 0..n {
                    let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                    for ((o, v), d) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r]) {
                        let xhat = (v.to_f64() - mean[ci]) * inv;
                        *o = T::from_f64(k * (d.to_f64() - sum_dy / m - xhat * sum_dy_xhat / m));
                    }
                }
            }
        }
        if self.wrt_input {
            dx
        } else {
            dgamma
        }
    }
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, s) = channel_dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(d), CpuStorage::F32(g)) => CpuStorage::F32(self.run(
                contiguous_slice(x, l1)?,
                contiguous_slice(d, l2)?,
                contiguous_slice(g, l3)?,
                n,
                c,
                s,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(d), CpuStorage::F64(g)) => CpuStorage::F64(self.run(
                contiguous_slice(x, l1)?,
                contiguous_slice(d, l2)?,
                contiguous_slice(g, l3)?,
                n,
                c,
                s,
            )),
            _ => bail!("batch-norm-grad supports matching f32 or f64 operands"),
        };
        let shape = if self.wrt_input { l1.shape().clone() } else { Shape::from(c) };
        Ok((out, shape))
    }
}

/// Batch-statistics normalization of `x [n, c, ...]` followed by the
/// per-channel affine map.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

/// Per-channel batch mean and biased variance of `x [n, c, ...]`.
pub fn batch_moments(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let x = x.contiguous()?.to_dtype(candle_core::DType::F64)?;
    let d = x.dims();
    if d.len() < 2 {
        bail!("batch moments expect rank >= 2, got {:?}", d)
    }
    let (n, c, s) = (d[0], d[1], d[2..].iter().product());
    let v = x.flatten_all()?.to_vec1::<f64>()?;
    Ok(channel_moments(&v, n, c, s))
}
