//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value. Operations append nodes in
//! evaluation order, so parents always precede children and a single reverse
//! sweep visits each node once. Nodes whose inputs do not require gradients
//! are stored as plain values without an adjoint record.

use rand::Rng;

use super::conv::{self, ConvGeom};
use super::sample;
use super::ssim::{self, SsimGeom};
use super::tensor::Tensor;
use super::window::{self, WindowGeom};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    SoftmaxRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    ChannelScale(Var, Var),
    MulConst(Var, Vec<f32>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    WeightedL1(Var, Var, Vec<f32>),
    Ssim { x: Var, y: Var, geom: SsimGeom },
    GridSample(Var, Var),
    ConcreteGate { x: Var, logit: Var, noise: Vec<f32>, temperature: f32 },
    WindowLogits { tgt: Var, src: Var, geom: WindowGeom, scale: f64 },
    WindowWarp { weights: Var, source: Var, geom: WindowGeom },
    AvgPool2 { x: Var, dims: [usize; 4] },
    Upsample2 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ")
}

fn concrete_keep(logit: f64, u: f64, t: f64) -> (f64, f64) {
    let z = sigmoid((logit + u.ln() - (1.0 - u).ln()) / t);
    (z, 1.0 - z)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, shape_str(&[self.shape(a), self.shape(b)])));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, out, op, &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", shape_str(&[&sa, &sb]))),
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// 2D convolution of `[Cin, H, W]` with `[Cout, Cin, KH, KW]` (odd kernels,
    /// stride 1, zero padding preserving spatial size).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        match (si.as_slice(), sw.as_slice()) {
            ([cin, h, w], [cout, cin2, kh, kw]) if cin == cin2 && kh % 2 == 1 && kw % 2 == 1 => {
                let geom = ConvGeom { cin: *cin, cout: *cout, d: 1, h: *h, w: *w, kd: 1, kh: *kh, kw: *kw };
                self.conv(input, weight, bias, geom, vec![*cout, *h, *w])
            }
            _ => Err(Error::shape("conv2d", shape_str(&[&si, &sw]))),
        }
    }

    /// 3D convolution of `[Cin, D, H, W]` with `[Cout, Cin, KD, KH, KW]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        match (si.as_slice(), sw.as_slice()) {
            ([cin, d, h, w], [cout, cin2, kd, kh, kw]) if cin == cin2 && kd % 2 == 1 && kh % 2 == 1 && kw % 2 == 1 => {
                let geom = ConvGeom { cin: *cin, cout: *cout, d: *d, h: *h, w: *w, kd: *kd, kh: *kh, kw: *kw };
                self.conv(input, weight, bias, geom, vec![*cout, *d, *h, *w])
            }
            _ => Err(Error::shape("conv3d", shape_str(&[&si, &sw]))),
        }
    }

    fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv", format!("bias {:?} for {} output channels", self.shape(b), geom.cout)));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push("conv", Tensor::new(out_shape, out)?, Op::Conv { input, weight, bias, geom }, &parents)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), |v| sigmoid(v as f64) as f32)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map("ln", x, Op::Ln(x), f32::ln)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| Error::shape("softmax_rows", "scalar input"))?;
        let mut out = vec![0f32; t.len()];
        for (row, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (dst, e) in o.iter_mut().zip(exps) {
                *dst = (e / total) as f32;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// Multiplies channel `c` of a `[C, ...]` tensor by `factors[c]`.
    pub fn channel_scale(&mut self, x: Var, factors: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(factors).to_vec());
        if sx.is_empty() || sf != [sx[0]] {
            return Err(Error::shape("channel_scale", shape_str(&[&sx, &sf])));
        }
        let per = self.value(x).len() / sx[0];
        let f = self.value(factors).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * f[i / per]).collect();
        self.push("channel_scale", Tensor::new(sx, data)?, Op::ChannelScale(x, factors), &[x, factors])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::shape("mul_const", shape_str(&[self.shape(x), mask.shape()])));
        }
        let data = self.value(x).data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(x, mask.data().to_vec()), &[x])
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are divided by `1 - rate`.
    pub fn dropout(&mut self, x: Var, rate: f32, stream: &mut Stream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(self.shape(x).to_vec(), |_| if stream.random::<f32>() < rate { 0.0 } else { keep });
        self.mul_const(x, &mask)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len().max(1) as f64;
        self.push("mean", Tensor::scalar(s as f32), Op::Mean(x), &[x])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let out = Tensor::scalar((s / ta.len().max(1) as f64) as f32);
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    /// `mean(weight * |x - y|)` with a constant weight map.
    pub fn weighted_l1(&mut self, x: Var, y: Var, weight: &Tensor) -> Result<Var> {
        self.same_shape("weighted_l1", x, y)?;
        if weight.shape() != self.shape(x) {
            return Err(Error::shape("weighted_l1", shape_str(&[self.shape(x), weight.shape()])));
        }
        let (tx, ty) = (self.value(x), self.value(y));
        let s: f64 = tx
            .data()
            .iter()
            .zip(ty.data())
            .zip(weight.data())
            .map(|((&a, &b), &w)| w as f64 * (a as f64 - b as f64).abs())
            .sum();
        let out = Tensor::scalar((s / tx.len().max(1) as f64) as f32);
        self.push("weighted_l1", out, Op::WeightedL1(x, y, weight.data().to_vec()), &[x, y])
    }

    /// Mean SSIM of two `[H, W]` maps over all valid `window x window` boxes.
    pub fn ssim(&mut self, x: Var, y: Var, window: usize, c1: f32, c2: f32) -> Result<Var> {
        self.same_shape("ssim", x, y)?;
        let (h, w) = match *self.shape(x) {
            [h, w] => (h, w),
            _ => return Err(Error::shape("ssim", format!("{:?} is not 2D", self.shape(x)))),
        };
        if window % 2 == 0 || window == 0 || window > h.min(w) {
            return Err(Error::InvalidArgument(format!("ssim window {window} must be odd and fit in {h}x{w}")));
        }
        let geom = SsimGeom { h, w, win: window, c1: c1 as f64, c2: c2 as f64 };
        let v = ssim::forward(self.value(x).data(), self.value(y).data(), &geom);
        self.push("ssim", Tensor::scalar(v as f32), Op::Ssim { x, y, geom }, &[x, y])
    }

    /// Bilinear sample of `image [H, W]` at `p + field(p)` where `field` is
    /// `[2, H, W]` (x displacement, then y), clamping to the border.
    pub fn grid_sample_2d(&mut self, image: Var, field: Var) -> Result<Var> {
        let (si, sf) = (self.shape(image).to_vec(), self.shape(field).to_vec());
        let (h, w) = match (si.as_slice(), sf.as_slice()) {
            ([h, w], [2, h2, w2]) if h == h2 && w == w2 && *h > 0 && *w > 0 => (*h, *w),
            _ => return Err(Error::shape("grid_sample_2d", shape_str(&[&si, &sf]))),
        };
        let out = sample::forward(self.value(image).data(), self.value(field).data(), h, w);
        self.push("grid_sample_2d", Tensor::new(vec![h, w], out)?, Op::GridSample(image, field), &[image, field])
    }

    /// Spatial concrete dropout gate on a `[C, ...]` tensor: one relaxed
    /// Bernoulli keep-gate per channel, rescaled by `1 / (1 - p)` with
    /// `p = sigmoid(logit)`.
    pub fn concrete_gate(&mut self, x: Var, logit: Var, temperature: f32, stream: &mut Stream) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(1);
        let noise: Vec<f32> = (0..c).map(|_| stream.open01() as f32).collect();
        self.concrete_gate_with_noise(x, logit, &noise, temperature)
    }

    /// [`Tape::concrete_gate`] with explicit uniform noise `u` per channel.
    pub fn concrete_gate_with_noise(&mut self, x: Var, logit: Var, noise: &[f32], temperature: f32) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || !self.value(logit).is_scalar() || noise.len() != sx[0] {
            return Err(Error::shape("concrete_gate", shape_str(&[&sx, self.shape(logit), &[noise.len()]])));
        }
        if temperature <= 0.0 || noise.iter().any(|&u| u <= 0.0 || u >= 1.0) {
            return Err(Error::InvalidArgument("concrete gate needs temperature > 0 and noise in (0, 1)".into()));
        }
        let l = self.value(logit).item() as f64;
        let p = sigmoid(l);
        let per = self.value(x).len() / sx[0];
        let gates: Vec<f64> =
            noise.iter().map(|&u| concrete_keep(l, u as f64, temperature as f64).1 / (1.0 - p)).collect();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| (v as f64 * gates[i / per]) as f32).collect();
        let op = Op::ConcreteGate { x, logit, noise: noise.to_vec(), temperature };
        self.push("concrete_gate", Tensor::new(sx, data)?, op, &[x, logit])
    }

    /// Similarity logits between each target pixel and its `(2R+1)^2` source
    /// window: `scale * <tgt(p), src(q)>`, shape `[H*W, (2R+1)^2]`. Window
    /// positions outside the image carry [`window::MASKED_LOGIT`].
    pub fn window_logits(&mut self, tgt: Var, src: Var, radius: usize, scale: f32) -> Result<Var> {
        self.same_shape("window_logits", tgt, src)?;
        let (c, h, w) = match *self.shape(tgt) {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("window_logits", format!("{:?} is not [C, H, W]", self.shape(tgt)))),
        };
        let geom = WindowGeom { c, h, w, radius };
        let out = window::logits_forward(self.value(tgt).data(), self.value(src).data(), &geom, scale as f64);
        let out = Tensor::new(vec![h * w, geom.k()], out)?;
        self.push("window_logits", out, Op::WindowLogits { tgt, src, geom, scale: scale as f64 }, &[tgt, src])
    }

    /// Gathers `source [H, W]` through per-pixel window weights `[H*W, (2R+1)^2]`.
    pub fn window_warp(&mut self, weights: Var, source: Var, radius: usize) -> Result<Var> {
        let (sw, ss) = (self.shape(weights).to_vec(), self.shape(source).to_vec());
        let (h, w) = match ss.as_slice() {
            [h, w] => (*h, *w),
            _ => return Err(Error::shape("window_warp", shape_str(&[&sw, &ss]))),
        };
        let geom = WindowGeom { c: 1, h, w, radius };
        if sw != [h * w, geom.k()] {
            return Err(Error::shape("window_warp", shape_str(&[&sw, &ss])));
        }
        let out = window::warp_forward(self.value(weights).data(), self.value(source).data(), &geom);
        self.push("window_warp", Tensor::new(vec![h, w], out)?, Op::WindowWarp { weights, source, geom }, &[weights, source])
    }

    /// 2x average pooling of `[C, D, H, W]`; odd sizes keep a partial block.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, d, h, w) = match *self.shape(x) {
            [c, d, h, w] => (c, d, h, w),
            _ => return Err(Error::shape("avg_pool2", format!("{:?} is not [C, D, H, W]", self.shape(x)))),
        };
        let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut acc = vec![0f64; c * od * oh * ow];
        let mut cnt = vec![0u32; od * oh * ow];
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((z / 2) * oh + y / 2) * ow + xx / 2;
                        acc[ch * od * oh * ow + o] += src[((ch * d + z) * h + y) * w + xx] as f64;
                        if ch == 0 {
                            cnt[o] += 1;
                        }
                    }
                }
            }
        }
        let n = od * oh * ow;
        let data = acc.iter().enumerate().map(|(i, &v)| (v / cnt[i % n] as f64) as f32).collect();
        self.push("avg_pool2", Tensor::new(vec![c, od, oh, ow], data)?, Op::AvgPool2 { x, dims: [c, d, h, w] }, &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[C, d, h, w]` to `[C, D, H, W]`
    /// where `d = ceil(D / 2)` and so on.
    pub fn upsample2(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let [d, h, w] = target;
        let (c, sd, sh, sw) = match *self.shape(x) {
            [c, sd, sh, sw] if sd == d.div_ceil(2) && sh == h.div_ceil(2) && sw == w.div_ceil(2) => (c, sd, sh, sw),
            _ => return Err(Error::shape("upsample2", format!("{:?} -> {target:?}", self.shape(x)))),
        };
        let src = self.value(x).data();
        let mut data = vec![0f32; c * d * h * w];
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let srow = ((ch * sd + z / 2) * sh + y / 2) * sw;
                    let orow = ((ch * d + z) * h + y) * w;
                    for xx in 0..w {
                        data[orow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
        self.push("upsample2", Tensor::new(vec![c, d, h, w], data)?, Op::Upsample2 { x, dims: [c, d, h, w] }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Contiguous run of `product(shape)` elements starting at flat offset
    /// `start`, reshaped to `shape`.
    pub fn narrow(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(x);
        if start + len > src.len() {
            return Err(Error::shape("narrow", format!("{start}+{len} of {:?}", src.shape())));
        }
        let out = Tensor::new(shape.to_vec(), src.data()[start..start + len].to_vec())?;
        self.push("narrow", out, Op::Narrow { x, start }, &[x])
    }

    /// Flat concatenation of `parts`, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let contributions = self.adjoint(id, &g);
            self.grads[id] = Some(g);
            for (parent, delta) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::new(self.nodes[parent.0].value.shape().to_vec(), delta)?);
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn val(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Contributions of node `id`'s upstream gradient `g` to its parents.
    fn adjoint(&self, id: usize, g: &Tensor) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut res = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![0f32; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let s: f64 = (0..n).map(|j| gd[i * n + j] as f64 * bv[kk * n + j] as f64).sum();
                            ga[i * k + kk] = s as f32;
                        }
                    }
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0f64; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk] as f64;
                            for j in 0..n {
                                gb[kk * n + j] += aik * gd[i * n + j] as f64;
                            }
                        }
                    }
                    res.push((*b, gb.iter().map(|&v| v as f32).collect()));
                }
                res
            }
            Op::Conv { input, weight, bias, geom } => {
                let (gi, gw, gb) =
                    conv::backward(geom, self.val(*input), self.val(*weight), gd, self.rg(*input), self.rg(*weight));
                let mut res = vec![];
                if self.rg(*input) {
                    res.push((*input, gi));
                }
                if self.rg(*weight) {
                    res.push((*weight, gw));
                }
                if let Some(b) = bias {
                    res.push((*b, gb));
                }
                res
            }
            Op::Relu(x) => vec![(*x, gd.iter().zip(out).map(|(&g, &o)| if o > 0.0 { g } else { 0.0 }).collect())],
            Op::Sigmoid(x) => vec![(*x, gd.iter().zip(out).map(|(&g, &s)| g * s * (1.0 - s)).collect())],
            Op::Ln(x) => vec![(*x, gd.iter().zip(self.val(*x)).map(|(&g, &v)| g / v).collect())],
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().unwrap();
                let mut gx = vec![0f32; out.len()];
                for ((s, gr), dst) in out.chunks(cols).zip(gd.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = s.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &sv), &gv) in dst.iter_mut().zip(s).zip(gr) {
                        *d = (sv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, gd.iter().zip(self.val(*b)).map(|(g, v)| g * v).collect()),
                (*b, gd.iter().zip(self.val(*a)).map(|(g, v)| g * v).collect()),
            ],
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, gd.iter().zip(bv).map(|(g, v)| g / v).collect()),
                    (*b, gd.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| -g * x / (y * y)).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, gd.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, gd.to_vec())],
            Op::ChannelScale(x, f) => {
                let fv = self.val(*f);
                let per = gd.len() / fv.len();
                let xv = self.val(*x);
                let gx = gd.iter().enumerate().map(|(i, g)| g * fv[i / per]).collect();
                let gf = (0..fv.len())
                    .map(|c| {
                        let r = c * per..(c + 1) * per;
                        gd[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32
                    })
                    .collect();
                vec![(*x, gx), (*f, gf)]
            }
            Op::MulConst(x, mask) => vec![(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::Sum(x) => vec![(*x, vec![gd[0]; self.val(*x).len()])],
            Op::Mean(x) => {
                let n = self.val(*x).len();
                vec![(*x, vec![gd[0] / n as f32; n])]
            }
            Op::Mse(a, b) => {
                let n = self.val(*a).len() as f64;
                let c = 2.0 * gd[0] as f64 / n;
                let ga: Vec<f32> =
                    self.val(*a).iter().zip(self.val(*b)).map(|(&x, &y)| (c * (x as f64 - y as f64)) as f32).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::WeightedL1(x, y, w) => {
                let n = w.len() as f64;
                let c = gd[0] as f64 / n;
                let gx: Vec<f32> = self
                    .val(*x)
                    .iter()
                    .zip(self.val(*y))
                    .zip(w)
                    .map(|((&a, &b), &wv)| {
                        let s = if a > b { 1.0 } else if a < b { -1.0 } else { 0.0 };
                        (c * wv as f64 * s) as f32
                    })
                    .collect();
                let gy = gx.iter().map(|v| -v).collect();
                vec![(*x, gx), (*y, gy)]
            }
            Op::Ssim { x, y, geom } => {
                let (gx, gy) = ssim::backward(self.val(*x), self.val(*y), geom, gd[0] as f64);
                vec![(*x, gx), (*y, gy)]
            }
            Op::GridSample(img, field) => {
                let (h, w) = (self.shape(*img)[0], self.shape(*img)[1]);
                let (gi, gf) = sample::backward(self.val(*img), self.val(*field), h, w, gd);
                vec![(*img, gi), (*field, gf)]
            }
            Op::ConcreteGate { x, logit, noise, temperature } => {
                let l = self.value(*logit).item() as f64;
                let t = *temperature as f64;
                let p = sigmoid(l);
                let xv = self.val(*x);
                let per = xv.len() / noise.len();
                let mut gx = vec![0f32; xv.len()];
                let mut gl = 0f64;
                for (c, &u) in noise.iter().enumerate() {
                    let (z, keep) = concrete_keep(l, u as f64, t);
                    let gate = keep / (1.0 - p);
                    // d/dl of (1 - z) / (1 - p)
                    let dgate = (-z * (1.0 - z) / t + keep * p) / (1.0 - p);
                    for i in c * per..(c + 1) * per {
                        gx[i] = (gd[i] as f64 * gate) as f32;
                        gl += gd[i] as f64 * xv[i] as f64 * dgate;
                    }
                }
                vec![(*x, gx), (*logit, vec![gl as f32])]
            }
            Op::WindowLogits { tgt, src, geom, scale } => {
                let (gt, gs) = window::logits_backward(self.val(*tgt), self.val(*src), geom, *scale, gd);
                vec![(*tgt, gt), (*src, gs)]
            }
            Op::WindowWarp { weights, source, geom } => {
                let (gw, gs) = window::warp_backward(self.val(*weights), self.val(*source), geom, gd);
                vec![(*weights, gw), (*source, gs)]
            }
            Op::AvgPool2 { x, dims: [c, d, h, w] } => {
                let (c, d, h, w) = (*c, *d, *h, *w);
                let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
                let count = |o: usize, n: usize| if 2 * o + 1 < n { 2 } else { 1 };
                let mut gx = vec![0f32; c * d * h * w];
                for ch in 0..c {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let (a, b, e) = (z / 2, y / 2, xx / 2);
                                let n = count(a, d) * count(b, h) * count(e, w);
                                gx[((ch * d + z) * h + y) * w + xx] = gd[((ch * od + a) * oh + b) * ow + e] / n as f32;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Upsample2 { x, dims: [c, d, h, w] } => {
                let (c, d, h, w) = (*c, *d, *h, *w);
                let (sd, sh, sw) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
                let mut gx = vec![0f64; c * sd * sh * sw];
                for ch in 0..c {
                    for z in 0..d {
                        for y in 0..h {
                            let srow = ((ch * sd + z / 2) * sh + y / 2) * sw;
                            let orow = ((ch * d + z) * h + y) * w;
                            for xx in 0..w {
                                gx[srow + xx / 2] += gd[orow + xx] as f64;
                            }
                        }
                    }
                }
                vec![(*x, gx.iter().map(|&v| v as f32).collect())]
            }
            Op::Reshape(x) => vec![(*x, gd.to_vec())],
            Op::Narrow { x, start } => {
                let mut gx = vec![0f32; self.val(*x).len()];
                gx[*start..*start + gd.len()].copy_from_slice(gd);
                vec![(*x, gx)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.val(*p).len();
                        let slice = gd[off..off + n].to_vec();
                        off += n;
                        (*p, slice)
                    })
                    .collect()
            }
        }
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    let mut row = vec![0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for kk in 0..k {
            let aik = a[i * k + kk] as f64;
            for (r, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *r += aik * bv as f64;
            }
        }
        for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(&row) {
            *o = *r as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 5], 3.25));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 3], |i| i as f32 + 1.0));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_has_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[3.0, 4.0]));
        let zero = tape.scale(b, 0.0).unwrap();
        let s = tape.add(a, zero).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0]);
        // A parameter that never reaches the loss gets no gradient buffer at all.
        let mut tape = Tape::new();
        let a = tape.param(t(&[1], &[1.0]));
        let c = tape.param(t(&[1], &[5.0]));
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).map_or(true, |g| g.data() == [0.0]));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[1.0]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
        tape.zero_grad();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let z = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let b = tape.relu(a).unwrap();
        assert!(!tape.requires_grad(b));
        let p = tape.param(t(&[1], &[1.0]));
        let c = tape.add(b, p).unwrap();
        assert!(tape.requires_grad(c));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::new();
        let mut s = Stream::new(1, "t");
        let a = tape.constant(Tensor::from_fn(vec![10], |i| i as f32));
        let b = tape.dropout(a, 0.0, &mut s).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn dropout_is_inverted() {
        let mut tape = Tape::new();
        let mut s = Stream::new(1, "t");
        let a = tape.constant(Tensor::full(vec![20000], 1.0));
        let b = tape.dropout(a, 0.2, &mut s).unwrap();
        let v = tape.value(b).data();
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.25).abs() < 1e-6));
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }
}
