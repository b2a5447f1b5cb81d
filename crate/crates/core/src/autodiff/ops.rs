//! Differentiable tensor operations.
//!
//! Every backward rule is written in terms of these same operations, so a
//! gradient computed with `build_graph` set is itself differentiable.

use super::kernels::{self, ConvGeometry};
use super::tensor::{Backward, Tensor};
use crate::error::{CastError, Result};

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CastError::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(CastError::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn when(need: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn map(a: &Tensor, f: impl Fn(f32) -> f32) -> Vec<f32> {
    a.data().iter().map(|&x| f(x)).collect()
}

/// Constant 0/1 tensor, used by piecewise-linear backward rules.
fn indicator(a: &Tensor, pred: impl Fn(f32) -> bool) -> Tensor {
    let data = a.data().iter().map(|&x| if pred(x) { 1.0 } else { 0.0 }).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || Ok(g.clone()))?, when(needs[1], || Ok(g.clone()))?])
    }
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || Ok(g.clone()))?, when(needs[1], || Ok(g.neg()))?])
    }
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.mul(&x[1]))?, when(needs[1], || g.mul(&x[0]))?])
    }
}

struct DivOp;
impl Backward for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&x[0], &x[1]);
        Ok(vec![
            when(needs[0], || g.div(b))?,
            when(needs[1], || Ok(g.mul(a)?.div(&b.mul(b)?)?.neg()))?,
        ])
    }
}

struct ScaleOp(f32);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || Ok(g.scale(self.0)))?])
    }
}

struct AddScalarOp;
impl Backward for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || Ok(g.clone()))?])
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.mul(&x[0].exp()))?])
    }
}

struct LnOp;
impl Backward for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.div(&x[0]))?])
    }
}

struct SqrtOp;
impl Backward for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.div(&x[0].sqrt().scale(2.0)))?])
    }
}

struct ReluOp;
impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        // subgradient 0 at exactly 0
        Ok(vec![when(needs[0], || g.mul(&indicator(&x[0], |v| v > 0.0)))?])
    }
}

struct ClampMinOp(f32);
impl Backward for ClampMinOp {
    fn name(&self) -> &'static str {
        "clamp_min"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let floor = self.0;
        Ok(vec![when(needs[0], || g.mul(&indicator(&x[0], |v| v > floor)))?])
    }
}

struct SumOp;
impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.expand(x[0].shape()))?])
    }
}

struct ExpandOp;
impl Backward for ExpandOp {
    fn name(&self) -> &'static str {
        "expand"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.sum().reshape(x[0].shape()))?])
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.reshape(x[0].shape()))?])
    }
}

struct TransposeOp;
impl Backward for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.t())?])
    }
}

struct MatmulOp;
impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&x[0], &x[1]);
        Ok(vec![
            when(needs[0], || g.matmul(&b.t()?))?,
            when(needs[1], || a.t()?.matmul(g))?,
        ])
    }
}

struct Conv2dOp {
    stride: usize,
    padding: usize,
}
impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (input, weight) = (&x[0], &x[1]);
        Ok(vec![
            when(needs[0], || {
                conv2d_input_grad(g, weight, self.stride, self.padding, input.shape())
            })?,
            when(needs[1], || {
                conv2d_weight_grad(input, g, self.stride, self.padding, weight.shape())
            })?,
        ])
    }
}

struct Conv2dInputGradOp {
    stride: usize,
    padding: usize,
}
impl Backward for Conv2dInputGradOp {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    // y = T(gy, w) with <u, T(gy, w)> = <conv(u, w), gy>
    fn backward(&self, x: &[Tensor], u: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (gy, weight) = (&x[0], &x[1]);
        Ok(vec![
            when(needs[0], || conv2d(u, weight, self.stride, self.padding))?,
            when(needs[1], || {
                conv2d_weight_grad(u, gy, self.stride, self.padding, weight.shape())
            })?,
        ])
    }
}

struct Conv2dWeightGradOp {
    stride: usize,
    padding: usize,
}
impl Backward for Conv2dWeightGradOp {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    // y = Wg(x, gy) with <u, Wg(x, gy)> = <conv(x, u), gy>
    fn backward(&self, x: &[Tensor], u: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (input, gy) = (&x[0], &x[1]);
        Ok(vec![
            when(needs[0], || {
                conv2d_input_grad(gy, u, self.stride, self.padding, input.shape())
            })?,
            when(needs[1], || conv2d(input, u, self.stride, self.padding))?,
        ])
    }
}

struct SpatialSumOp;
impl Backward for SpatialSumOp {
    fn name(&self) -> &'static str {
        "spatial_sum"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = x[0].shape();
        Ok(vec![when(needs[0], || g.spatial_broadcast(s[2], s[3]))?])
    }
}

struct SpatialBroadcastOp;
impl Backward for SpatialBroadcastOp {
    fn name(&self) -> &'static str {
        "spatial_broadcast"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.spatial_sum())?])
    }
}

struct ChannelSumOp;
impl Backward for ChannelSumOp {
    fn name(&self) -> &'static str {
        "channel_sum"
    }
    fn backward(&self, x: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = x[0].shape();
        Ok(vec![when(needs[0], || g.channel_broadcast(s[0], s[2], s[3]))?])
    }
}

struct ChannelBroadcastOp;
impl Backward for ChannelBroadcastOp {
    fn name(&self) -> &'static str {
        "channel_broadcast"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.channel_sum())?])
    }
}

struct WindowSumOp(usize);
impl Backward for WindowSumOp {
    fn name(&self) -> &'static str {
        "window_sum"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.upsample_repeat(self.0))?])
    }
}

struct UpsampleRepeatOp(usize);
impl Backward for UpsampleRepeatOp {
    fn name(&self) -> &'static str {
        "upsample_repeat"
    }
    fn backward(&self, _: &[Tensor], g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![when(needs[0], || g.window_sum(self.0))?])
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = zip_map(self, other, |a, b| a + b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], AddOp))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = zip_map(self, other, |a, b| a - b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], SubOp))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = zip_map(self, other, |a, b| a * b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], MulOp))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("div", self, other)?;
        let data = zip_map(self, other, |a, b| a / b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], DivOp))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, |v| v * c), vec![self.clone()], ScaleOp(c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, |v| v + c), vec![self.clone()], AddScalarOp)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f32::exp), vec![self.clone()], ExpOp)
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f32::ln), vec![self.clone()], LnOp)
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, f32::sqrt), vec![self.clone()], SqrtOp)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), map(self, |v| v.max(0.0)), vec![self.clone()], ReluOp)
    }

    /// Elementwise `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f32) -> Tensor {
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |v| v.max(floor)),
            vec![self.clone()],
            ClampMinOp(floor),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        // f64 accumulator, fixed order
        let total = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        Tensor::from_op(Vec::new(), vec![total], vec![self.clone()], SumOp)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(CastError::shape(
                "expand",
                format!("only single-element tensors broadcast, got {:?}", self.shape()),
            ));
        }
        let n = shape.iter().product();
        Ok(Tensor::from_op(shape.to_vec(), vec![self.data()[0]; n], vec![self.clone()], ExpandOp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(CastError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], ReshapeOp))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        check_rank("transpose", self, 2)?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(vec![c, r], out, vec![self.clone()], TransposeOp))
    }

    /// Matrix product `[m,k] · [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_rank("matmul", self, 2)?;
        check_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(CastError::shape(
                "matmul",
                format!("inner extents differ: {:?} · {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, self.data(), k, 1, other.data(), n, 1, 0.0, &mut out);
        Ok(Tensor::from_op(vec![m, n], out, vec![self.clone(), other.clone()], MatmulOp))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.numel() != other.numel() {
            return Err(CastError::shape(
                "dot",
                format!("length mismatch: {} vs {}", self.numel(), other.numel()),
            ));
        }
        let b = if other.shape() == self.shape() {
            other.clone()
        } else {
            other.reshape(self.shape())?
        };
        Ok(self.mul(&b)?.sum())
    }

    /// `x / max(‖x‖₂, eps)`.
    pub fn l2_normalize(&self, eps: f32) -> Result<Tensor> {
        let sq = self.mul(self)?.sum();
        let norm = sq.clamp_min(eps * eps).sqrt();
        self.div(&norm.expand(self.shape())?)
    }

    /// `[N,C,H,W] → [N,C]` by summing each spatial plane.
    pub fn spatial_sum(&self) -> Result<Tensor> {
        check_rank("spatial_sum", self, 4)?;
        let s = self.shape();
        let (nc, plane) = (s[0] * s[1], s[2] * s[3]);
        let data = self
            .data()
            .chunks_exact(plane.max(1))
            .take(nc)
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Ok(Tensor::from_op(vec![s[0], s[1]], data, vec![self.clone()], SpatialSumOp))
    }

    /// `[N,C] → [N,C,H,W]` by repeating each value over the plane.
    pub fn spatial_broadcast(&self, h: usize, w: usize) -> Result<Tensor> {
        check_rank("spatial_broadcast", self, 2)?;
        let mut data = Vec::with_capacity(self.numel() * h * w);
        for &v in self.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let shape = vec![self.shape()[0], self.shape()[1], h, w];
        Ok(Tensor::from_op(shape, data, vec![self.clone()], SpatialBroadcastOp))
    }

    /// `[N,C,H,W] → [C]` by summing over batch and space.
    pub fn channel_sum(&self) -> Result<Tensor> {
        check_rank("channel_sum", self, 4)?;
        let s = self.shape();
        let plane = s[2] * s[3];
        let mut acc = vec![0.0f64; s[1]];
        for n in 0..s[0] {
            for (c, slot) in acc.iter_mut().enumerate() {
                let start = (n * s[1] + c) * plane;
                *slot += self.data()[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Ok(Tensor::from_op(vec![s[1]], data, vec![self.clone()], ChannelSumOp))
    }

    /// `[C] → [N,C,H,W]`, the per-channel bias broadcast.
    pub fn channel_broadcast(&self, n: usize, h: usize, w: usize) -> Result<Tensor> {
        check_rank("channel_broadcast", self, 1)?;
        let c = self.shape()[0];
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &v in self.data() {
                data.extend(std::iter::repeat_n(v, h * w));
            }
        }
        Ok(Tensor::from_op(vec![n, c, h, w], data, vec![self.clone()], ChannelBroadcastOp))
    }

    /// Sum over non-overlapping `k×k` windows.
    pub fn window_sum(&self, k: usize) -> Result<Tensor> {
        check_rank("window_sum", self, 4)?;
        let s = self.shape();
        if k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(CastError::shape(
                "window_sum",
                format!("window {k} does not divide spatial extents of {:?}", s),
            ));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let mut out = vec![0.0f32; s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            let src = &self.data()[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * s[3] + ox * k + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(Tensor::from_op(vec![s[0], s[1], oh, ow], out, vec![self.clone()], WindowSumOp(k)))
    }

    /// Nearest-neighbour upsampling by an integer factor (adjoint of [`Tensor::window_sum`]).
    pub fn upsample_repeat(&self, k: usize) -> Result<Tensor> {
        check_rank("upsample_repeat", self, 4)?;
        let s = self.shape();
        let (oh, ow) = (s[2] * k, s[3] * k);
        let mut out = vec![0.0f32; s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = self.data()[(p * s[2] + y / k) * s[3] + x / k];
                }
            }
        }
        Ok(Tensor::from_op(vec![s[0], s[1], oh, ow], out, vec![self.clone()], UpsampleRepeatOp(k)))
    }

    /// Mean over each spatial plane: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(CastError::shape("global_avg_pool", format!("bad input {:?}", s)));
        }
        Ok(self.spatial_sum()?.scale(1.0 / (s[2] * s[3]) as f32))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        Ok(self.window_sum(k)?.scale(1.0 / (k * k) as f32))
    }
}

fn conv_geometry(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(CastError::shape(
            "conv2d",
            format!("expected [N,C,H,W] and [F,C,kh,kw], got {:?} and {:?}", input, weight),
        ));
    }
    if input[1] != weight[1] {
        return Err(CastError::shape(
            "conv2d",
            format!("input has {} channels but weight expects {}", input[1], weight[1]),
        ));
    }
    if stride == 0 {
        return Err(CastError::shape("conv2d", "stride must be positive"));
    }
    if weight[2] > input[2] + 2 * padding || weight[3] > input[3] + 2 * padding {
        return Err(CastError::shape(
            "conv2d",
            format!(
                "kernel {}x{} exceeds padded input {}x{}",
                weight[2],
                weight[3],
                input[2] + 2 * padding,
                input[3] + 2 * padding
            ),
        ));
    }
    Ok(ConvGeometry {
        batch: input[0],
        in_channels: input[1],
        in_h: input[2],
        in_w: input[3],
        out_channels: weight[0],
        kh: weight[2],
        kw: weight[3],
        stride,
        padding,
    })
}

/// 2-D cross-correlation `[N,C,H,W] ⋆ [F,C,kh,kw] → [N,F,H',W']`.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), weight.shape(), stride, padding)?;
    let out = kernels::conv2d_forward(&g, input.data(), weight.data());
    Ok(Tensor::from_op(
        vec![g.batch, g.out_channels, g.out_h(), g.out_w()],
        out,
        vec![input.clone(), weight.clone()],
        Conv2dOp { stride, padding },
    ))
}

/// Gradient of a convolution w.r.t. its input, as a differentiable operation.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = conv_geometry(input_shape, weight.shape(), stride, padding)?;
    let expected = [g.batch, g.out_channels, g.out_h(), g.out_w()];
    if grad_out.shape() != expected {
        return Err(CastError::shape(
            "conv2d_input_grad",
            format!("upstream gradient {:?} does not match output {:?}", grad_out.shape(), expected),
        ));
    }
    let out = kernels::conv2d_input_grad(&g, grad_out.data(), weight.data());
    Ok(Tensor::from_op(
        input_shape.to_vec(),
        out,
        vec![grad_out.clone(), weight.clone()],
        Conv2dInputGradOp { stride, padding },
    ))
}

/// Gradient of a convolution w.r.t. its weight, as a differentiable operation.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    weight_shape: &[usize],
) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), weight_shape, stride, padding)?;
    let expected = [g.batch, g.out_channels, g.out_h(), g.out_w()];
    if grad_out.shape() != expected {
        return Err(CastError::shape(
            "conv2d_weight_grad",
            format!("upstream gradient {:?} does not match output {:?}", grad_out.shape(), expected),
        ));
    }
    let out = kernels::conv2d_weight_grad(&g, input.data(), grad_out.data());
    Ok(Tensor::from_op(
        weight_shape.to_vec(),
        out,
        vec![input.clone(), grad_out.clone()],
        Conv2dWeightGradOp { stride, padding },
    ))
}
