use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::scalar::Scalar;

/// A trainable array together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Vec<S>,
    pub grad: Vec<S>,
    /// Matrix-shaped params (rank >= 2) receive weight decay; vectors do not.
    pub rank: usize,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Vec<S>, rank: usize) -> Self {
        let grad = vec![S::zero(); value.len()];
        Self { value, grad, rank }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// How a forward pass treats normalization statistics and caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Normalize with batch statistics (and update running estimates).
    pub batch_stats: bool,
    /// Keep activations so that `backward` can run afterwards.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass { batch_stats: true, record: true };
    /// Eval-mode statistics, still differentiable (frozen decoders).
    pub const FROZEN: Pass = Pass { batch_stats: false, record: true };
    pub const INFER: Pass = Pass { batch_stats: false, record: false };
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning parameters and (optionally) non-trainable buffers.
pub trait Module<S: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &[S])) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Vec<S>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

impl<S: Scalar, M: Module<S>> Module<S> for Option<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        if let Some(m) = self {
            m.visit_params(prefix, f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        if let Some(m) = self {
            m.visit_params_mut(prefix, f);
        }
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[S])) {
        if let Some(m) = self {
            m.visit_buffers(prefix, f);
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<S>)) {
        if let Some(m) = self {
            m.visit_buffers_mut(prefix, f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields under
/// their own names.
macro_rules! composite_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<S: $crate::Scalar> $crate::nn::Module<S> for $ty<S> {
            fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::nn::Param<S>)) {
                $( self.$field.visit_params(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::nn::Param<S>)) {
                $( self.$field.visit_params_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[S])) {
                $( self.$field.visit_buffers(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<S>)) {
                $( self.$field.visit_buffers_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use composite_module;

#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout, cin * k * k]`
    pub weight: Param<S>,
    pub bias: Param<S>,
    cache: Option<ConvCache<S>>,
}

#[derive(Clone, Debug)]
struct ConvCache<S> {
    cols: Vec<S>,
    n: usize,
    h: usize,
    w: usize,
}

impl<S: Scalar> Conv2d<S> {
    /// He-uniform initialization, zero bias.
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (cin * k * k).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..cout * cin * k * k).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
        Self {
            cin,
            cout,
            k,
            weight: Param::new(weight, 2),
            bias: Param::new(vec![S::zero(); cout], 1),
            cache: None,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = S::zero());
        self
    }

    pub fn forward(&mut self, x: &Tensor<S>, pass: Pass) -> Tensor<S> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let p = x.plane();
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 1 { x.data.clone() } else { im2col3(x) };
        let mut out = Tensor::zeros(self.cout, x.n, x.h, x.w);
        gemm(false, false, self.cout, p, kk, S::one(), &self.weight.value, &cols, S::zero(), &mut out.data);
        for (o, &b) in self.bias.value.iter().enumerate() {
            out.data[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
        }
        self.cache = pass.record.then_some(ConvCache { cols, n: x.n, h: x.h, w: x.w });
        out
    }

    pub fn backward(&mut self, grad: &Tensor<S>, accumulate: bool) -> Tensor<S> {
        let cache = self.cache.as_ref().expect("conv backward without recorded forward");
        let (n, h, w) = (cache.n, cache.h, cache.w);
        assert_eq!(grad.shape(), [self.cout, n, h, w], "conv grad shape");
        let p = n * h * w;
        let kk = self.cin * self.k * self.k;
        if accumulate {
            gemm(false, true, self.cout, kk, p, S::one(), &grad.data, &cache.cols, S::one(), &mut self.weight.grad);
            for o in 0..self.cout {
                let s: S = grad.data[o * p..(o + 1) * p].iter().copied().sum();
                self.bias.grad[o] += s;
            }
        }
        let mut dcols = vec![S::zero(); kk * p];
        gemm(true, false, kk, p, self.cout, S::one(), &self.weight.value, &grad.data, S::zero(), &mut dcols);
        if self.k == 1 {
            Tensor::from_vec(self.cin, n, h, w, dcols)
        } else {
            col2im3(&dcols, self.cin, n, h, w)
        }
    }
}

/// Zero-padded 3x3 patch matrix `[cin * 9, n * h * w]`.
fn im2col3<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let (c, n, h, w) = (x.c, x.n, x.h, x.w);
    let p = n * h * w;
    let mut cols = vec![S::zero(); c * 9 * p];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for s in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &x.data[((ci * n + s) * h + sy as usize) * w..][..w];
                        let dst = &mut row[(s * h + y) * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<S: Scalar>(cols: &[S], c: usize, n: usize, h: usize, w: usize) -> Tensor<S> {
    let p = n * h * w;
    let mut out = Tensor::zeros(c, n, h, w);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for s in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut out.data[((ci * n + s) * h + sy as usize) * w..][..w];
                        let src = &row[(s * h + y) * w..][..w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, v)| *d += *v),
                            1 => dst.iter_mut().zip(src).for_each(|(d, v)| *d += *v),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, v)| *d += *v),
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel batch normalization over `n * h * w`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    momentum: S,
    eps: S,
    cache: Option<BnCache<S>>,
}

#[derive(Clone, Debug)]
struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![S::one(); c], 1),
            beta: Param::new(vec![S::zero(); c], 1),
            running_mean: vec![S::zero(); c],
            running_var: vec![S::one(); c],
            momentum: S::of(0.1),
            eps: S::of(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, pass: Pass) -> Tensor<S> {
        let p = x.plane();
        let mut xhat = Tensor::zeros_like(x);
        let mut inv_std = vec![S::zero(); x.c];
        let np = S::of(p as f64);
        for c in 0..x.c {
            let src = x.channel(c);
            let (mean, var) = if pass.batch_stats && p > 0 {
                let mean = src.iter().copied().sum::<S>() / np;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / np;
                let unbiased = if p > 1 { var * np / S::of((p - 1) as f64) } else { var };
                let m = self.momentum;
                self.running_mean[c] = (S::one() - m) * self.running_mean[c] + m * mean;
                self.running_var[c] = (S::one() - m) * self.running_var[c] + m * unbiased;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let is = S::one() / (var + self.eps).sqrt();
            inv_std[c] = is;
            for (d, &v) in xhat.channel_mut(c).iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for c in 0..x.c {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            out.channel_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.cache = pass.record.then_some(BnCache { xhat, inv_std, batch_stats: pass.batch_stats });
        out
    }

    pub fn backward(&mut self, grad: &Tensor<S>, accumulate: bool) -> Tensor<S> {
        let cache = self.cache.as_ref().expect("batchnorm backward without recorded forward");
        let p = grad.plane();
        let np = S::of(p as f64);
        let mut dx = Tensor::zeros_like(grad);
        for c in 0..grad.c {
            let dy = grad.channel(c);
            let xh = cache.xhat.channel(c);
            let sum_dy: S = dy.iter().copied().sum();
            let sum_dy_xh: S = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            if accumulate {
                self.gamma.grad[c] += sum_dy_xh;
                self.beta.grad[c] += sum_dy;
            }
            let g = self.gamma.value[c];
            let is = cache.inv_std[c];
            let out = dx.channel_mut(c);
            if cache.batch_stats {
                for i in 0..p {
                    out[i] = g * is / np * (np * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            } else {
                for i in 0..p {
                    out[i] = g * is * dy[i];
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub enum Layer<S> {
    Conv(Conv2d<S>),
    Norm(BatchNorm2d<S>),
    Relu { mask: Option<Vec<bool>> },
}

impl<S: Scalar> Layer<S> {
    pub fn relu() -> Self {
        Layer::Relu { mask: None }
    }

    fn forward(&mut self, x: &Tensor<S>, pass: Pass) -> Tensor<S> {
        match self {
            Layer::Conv(c) => c.forward(x, pass),
            Layer::Norm(b) => b.forward(x, pass),
            Layer::Relu { mask } => {
                let out = x.map(|v| v.max(S::zero()));
                *mask = pass.record.then(|| x.data.iter().map(|&v| v > S::zero()).collect());
                out
            }
        }
    }

    fn backward(&mut self, grad: &Tensor<S>, accumulate: bool) -> Tensor<S> {
        match self {
            Layer::Conv(c) => c.backward(grad, accumulate),
            Layer::Norm(b) => b.backward(grad, accumulate),
            Layer::Relu { mask } => {
                let mask = mask.as_ref().expect("relu backward without recorded forward");
                let mut out = grad.clone();
                for (g, &m) in out.data.iter_mut().zip(mask) {
                    if !m {
                        *g = S::zero();
                    }
                }
                out
            }
        }
    }
}

/// A straight chain of layers.
#[derive(Clone, Debug, Default)]
pub struct Seq<S> {
    pub layers: Vec<Layer<S>>,
    /// Frozen chains still propagate input gradients but never touch
    /// their own parameter gradients.
    pub frozen: bool,
}

impl<S: Scalar> Seq<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Self {
        Self { layers, frozen: false }
    }

    /// `conv3x3 -> [bn] -> relu` repeated; the last block optionally ends
    /// without activation.
    pub fn conv_stack(
        channels: &[usize],
        norm: bool,
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        for (i, win) in channels.windows(2).enumerate() {
            let last = i + 2 == channels.len();
            layers.push(Layer::Conv(Conv2d::new(win[0], win[1], 3, rng)));
            if !last || final_relu {
                if norm {
                    layers.push(Layer::Norm(BatchNorm2d::new(win[1])));
                }
                layers.push(Layer::relu());
            }
        }
        Self::new(layers)
    }

    pub fn forward(&mut self, x: &Tensor<S>, pass: Pass) -> Tensor<S> {
        let mut cur = None::<Tensor<S>>;
        for layer in &mut self.layers {
            let next = layer.forward(cur.as_ref().unwrap_or(x), pass);
            cur = Some(next);
        }
        cur.unwrap_or_else(|| x.clone())
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Tensor<S> {
        let accumulate = !self.frozen;
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, accumulate);
        }
        cur
    }

    pub fn last_conv_mut(&mut self) -> Option<&mut Conv2d<S>> {
        self.layers.iter_mut().rev().find_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }
}

impl<S: Scalar> Module<S> for Seq<S> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    f(join(prefix, &format!("{i}.weight")), &c.weight);
                    f(join(prefix, &format!("{i}.bias")), &c.bias);
                }
                Layer::Norm(b) => {
                    f(join(prefix, &format!("{i}.gamma")), &b.gamma);
                    f(join(prefix, &format!("{i}.beta")), &b.beta);
                }
                Layer::Relu { .. } => {}
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    f(join(prefix, &format!("{i}.weight")), &mut c.weight);
                    f(join(prefix, &format!("{i}.bias")), &mut c.bias);
                }
                Layer::Norm(b) => {
                    f(join(prefix, &format!("{i}.gamma")), &mut b.gamma);
                    f(join(prefix, &format!("{i}.beta")), &mut b.beta);
                }
                Layer::Relu { .. } => {}
            }
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[S])) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Norm(b) = layer {
                f(join(prefix, &format!("{i}.running_mean")), &b.running_mean);
                f(join(prefix, &format!("{i}.running_var")), &b.running_var);
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<S>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Norm(b) = layer {
                f(join(prefix, &format!("{i}.running_mean")), &mut b.running_mean);
                f(join(prefix, &format!("{i}.running_var")), &mut b.running_var);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv3(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(conv.cout, x.n, x.h, x.w);
        for o in 0..conv.cout {
            for s in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..conv.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[o * conv.cin * 9 + ci * 9 + ky * 3 + kx];
                                    acc += wv * x.at(ci, s, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.set(o, s, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(c, n, h, w, (0..c * n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_tensor(3, 2, 5, 4, &mut rng);
        let got = conv.forward(&x, Pass::INFER);
        let want = naive_conv3(&x, &conv);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central differences through conv -> bn -> relu -> conv for both the
    /// input and a handful of parameters.
    #[test]
    fn seq_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seq = Seq::<f64>::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, &mut rng)),
            Layer::Norm(BatchNorm2d::new(3)),
            Layer::relu(),
            Layer::Conv(Conv2d::new(3, 2, 1, &mut rng)),
        ]);
        let x = random_tensor(2, 2, 4, 3, &mut rng);
        let probe = random_tensor(2, 2, 4, 3, &mut rng);
        let loss = |seq: &mut Seq<f64>, x: &Tensor<f64>| -> f64 {
            let y = seq.forward(x, Pass::TRAIN);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        loss(&mut seq, &x);
        seq.zero_grad();
        let dx = seq.backward(&probe);
        let eps = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&mut seq, &xp) - loss(&mut seq, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "input {i}: fd {fd} vs {}", dx.data[i]);
        }
        let mut grads = Vec::new();
        seq.visit_params("", &mut |_, p| grads.push(p.grad.clone()));
        for (pi, ei) in [(0usize, 4usize), (1, 1), (2, 2), (3, 0), (4, 5)] {
            let analytic = grads[pi][ei];
            let bump = |seq: &mut Seq<f64>, d: f64| {
                let mut k = 0;
                seq.visit_params_mut("", &mut |_, p| {
                    if k == pi {
                        p.value[ei] += d;
                    }
                    k += 1;
                });
            };
            bump(&mut seq, eps);
            let lp = loss(&mut seq, &x);
            bump(&mut seq, -2.0 * eps);
            let lm = loss(&mut seq, &x);
            bump(&mut seq, eps);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-6, "param {pi}[{ei}]: fd {fd} vs {analytic}");
        }
    }

    #[test]
    fn frozen_chain_leaves_param_grads_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = Seq::<f64>::conv_stack(&[2, 3, 2], false, false, &mut rng);
        seq.frozen = true;
        let x = random_tensor(2, 1, 3, 3, &mut rng);
        let y = seq.forward(&x, Pass::FROZEN);
        let dx = seq.backward(&y);
        assert!(dx.max_abs() > 0.0);
        seq.visit_params("", &mut |_, p| assert!(p.grad.iter().all(|&g| g == 0.0)));
    }
}
