//! Layer catalog and the sequential container.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, BatchNormCache, BN_MOMENTUM};
use crate::nn::{Parameter, Scalar, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
    },
    /// conv-bn-relu-conv-bn plus a skip path, then relu. A strided or
    /// channel-changing block uses a 1x1 convolution on the skip path.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Spec(format!("{what} in {self:?}")));
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, .. } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("zero channels");
                }
                if kernel == 0 {
                    return bad("zero kernel");
                }
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad("zero features");
                }
            }
            LayerSpec::AvgPool { kernel } if kernel == 0 => return bad("zero pool window"),
            LayerSpec::BatchNorm { channels } if channels == 0 => return bad("zero channels"),
            LayerSpec::ResidualBlock { in_channels, out_channels, stride } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("zero channels");
                }
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |op: &'static str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::dim(op, "rank", 3, input.len())),
            }
        };
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding, .. } => {
                let (c, h, w) = spatial("conv2d")?;
                if c != in_channels {
                    return Err(Error::dim("conv2d", "in_channels", in_channels, c));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(Error::dim("conv2d", "height", format!(">= kernel {kernel}"), h + 2 * padding));
                }
                Ok(vec![
                    out_channels,
                    ops::conv_out_extent(h, kernel, stride, padding),
                    ops::conv_out_extent(w, kernel, stride, padding),
                ])
            }
            LayerSpec::Linear { in_features, out_features } => match *input {
                [d] if d == in_features => Ok(vec![out_features]),
                [d] => Err(Error::dim("linear", "inner", in_features, d)),
                _ => Err(Error::dim("linear", "rank", 1, input.len())),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool { kernel } => {
                let (c, h, w) = spatial("avg_pool")?;
                if kernel > h || kernel > w {
                    return Err(Error::dim("avg_pool", "height", format!(">= window {kernel}"), h.min(w)));
                }
                Ok(vec![c, h / kernel, w / kernel])
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = spatial("global_avg_pool")?;
                Ok(vec![c])
            }
            LayerSpec::BatchNorm { channels } => {
                let (c, _, _) = spatial("batch_norm")?;
                if c != channels {
                    return Err(Error::dim("batch_norm", "channels", channels, c));
                }
                Ok(input.to_vec())
            }
            LayerSpec::ResidualBlock { in_channels, out_channels, stride } => {
                let (c, h, w) = spatial("residual_block")?;
                if c != in_channels {
                    return Err(Error::dim("residual_block", "in_channels", in_channels, c));
                }
                Ok(vec![
                    out_channels,
                    ops::conv_out_extent(h, 3, stride, 1),
                    ops::conv_out_extent(w, 3, stride, 1),
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn build<T: Scalar>(&self, name: &str, rng: &mut Rng) -> Result<Layer<T>> {
        self.validate()?;
        Ok(match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding, bias } => {
                Layer::Conv(Conv2d::new(name, in_channels, out_channels, kernel, stride, padding, bias, rng))
            }
            LayerSpec::Linear { in_features, out_features } => {
                Layer::Linear(Linear::new(name, in_features, out_features, rng))
            }
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::AvgPool { kernel } => Layer::AvgPool(AvgPool { kernel, input_shape: None }),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(name, channels)),
            LayerSpec::ResidualBlock { in_channels, out_channels, stride } => {
                Layer::Residual(Box::new(ResidualBlock::new(name, in_channels, out_channels, stride, rng)))
            }
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
        })
    }
}

/// Forward/backward contract shared by every layer.
///
/// `forward` caches what `backward` needs; `infer` is the read-only
/// evaluation-mode pass and can run concurrently on a shared network.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;
    /// Non-trainable state (batch-norm running statistics).
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.params_mut().into_iter().for_each(f);
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a preceding forward"))
}

fn uniform<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), uniform(vec![cout, cin, k, k], bound, rng)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![cout]))),
            stride,
            padding,
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.stride, self.padding)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let (dx, dw, db) = ops::conv2d_backward(x, &self.weight.value, grad_out, self.stride, self.padding, true)?;
        self.weight.accumulate_grad(&dw);
        if let Some(b) = self.bias.as_mut() {
            b.accumulate_grad(&db);
        }
        dx.ok_or_else(|| missing_cache("conv2d"))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.as_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, d: usize, k: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Linear {
            weight: Parameter::new(format!("{name}.weight"), uniform(vec![d, k], bound, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![k])),
            input: None,
        }
    }

    pub fn zeros(name: &str, d: usize, k: usize) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(vec![d, k])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![k])),
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight.value, Some(&self.bias.value))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let (dx, dw, db) = ops::linear_backward(x, &self.weight.value, grad_out)?;
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T> Default for Relu<T> {
    fn default() -> Self {
        Relu { input: None }
    }
}

impl<T: Scalar> Module<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        Ok(ops::relu(x))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("relu"))?;
        ops::relu_backward(x, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
pub struct AvgPool {
    pub kernel: usize,
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for AvgPool {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::avg_pool(x, self.kernel)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::avg_pool(x, self.kernel)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_cache("avg_pool"))?;
        ops::avg_pool_backward(shape, self.kernel, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = ops::global_avg_pool(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_cache("global_avg_pool"))?;
        ops::global_avg_pool_backward(shape, grad_out)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Module<T> for Flatten {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        x.clone().reshape(vec![n, x.numel() / n])
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.clone().ok_or_else(|| missing_cache("flatten"))?;
        grad_out.clone().reshape(shape)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
enum BnCache<T> {
    Train(Vec<usize>, BatchNormCache<T>),
    Eval(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    names: [String; 2],
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(vec![channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], T::one()),
            names: [format!("{name}.running_mean"), format!("{name}.running_var")],
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                let y = self.infer(x)?;
                self.cache = Some(BnCache::Eval(x.clone()));
                Ok(y)
            }
            Mode::Train => {
                let (y, cache) = ops::batch_norm_train(x, &self.gamma.value, &self.beta.value)?;
                let (n, _, h, w) = x.dims4("batch_norm")?;
                let count = (n * h * w) as f64;
                let m = T::of(BN_MOMENTUM);
                let unbias = T::of(count / (count - 1.0));
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
                self.cache = Some(BnCache::Train(x.shape().to_vec(), cache));
                Ok(y)
            }
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_eval(
            x,
            &self.gamma.value,
            &self.beta.value,
            self.running_mean.data(),
            self.running_var.data(),
        )
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cache.as_ref().ok_or_else(|| missing_cache("batch_norm"))? {
            BnCache::Train(shape, cache) => {
                let (dx, dg, db) = ops::batch_norm_backward(shape, cache, &self.gamma.value, grad_out)?;
                self.gamma.accumulate_grad(&dg);
                self.beta.accumulate_grad(&db);
                Ok(dx)
            }
            BnCache::Eval(x) => {
                let (n, c, h, w) = x.dims4("batch_norm_backward")?;
                let plane = h * w;
                let eps = T::of(ops::BN_EPS);
                let mut dx = grad_out.data().to_vec();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let inv = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                        let mean = self.running_mean.data()[ch];
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            db[ch] += dx[i];
                            dg[ch] += dx[i] * (x.data()[i] - mean) * inv;
                            dx[i] *= self.gamma.value.data()[ch] * inv;
                        }
                    }
                }
                self.gamma.accumulate_grad(&dg);
                self.beta.accumulate_grad(&db);
                Tensor::new(x.shape().to_vec(), dx)
            }
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&self.names[0], &self.running_mean);
        f(&self.names[1], &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&self.names[0], &mut self.running_mean);
        f(&self.names[1], &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    shortcut: Option<Conv2d<T>>,
    /// Pre-activation sum of the main and skip paths.
    sum: Option<Tensor<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), cout),
            shortcut: (stride != 1 || cin != cout)
                .then(|| Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, stride, 0, false, rng)),
            sum: None,
        }
    }

    /// Smallest |input| to either internal ReLU for a training-mode pass.
    pub(crate) fn relu_margin(&mut self, x: &Tensor<T>) -> Result<f64> {
        let min_abs = |t: &Tensor<T>| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs().to_f64().unwrap_or(0.0)));
        self.forward(x, Mode::Train)?;
        let inner = self.bn1.forward(&self.conv1.forward(x, Mode::Train)?, Mode::Train)?;
        let sum = self.sum.as_ref().expect("set by forward");
        Ok(min_abs(&inner).min(min_abs(sum)))
    }

    fn add_skip(main: Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        if main.shape() != skip.shape() {
            return Err(Error::dim("residual_block", "skip", format!("{:?}", main.shape()), format!("{:?}", skip.shape())));
        }
        let mut out = main;
        out.data_mut().iter_mut().zip(skip.data()).for_each(|(a, b)| *a += *b);
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        let skip = match self.shortcut.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        let sum = Self::add_skip(h, &skip)?;
        let out = ops::relu(&sum);
        self.sum = Some(sum);
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.infer(x)?;
        let h = self.bn1.infer(&h)?;
        let h = self.relu1.infer(&h)?;
        let h = self.conv2.infer(&h)?;
        let h = self.bn2.infer(&h)?;
        let skip = match self.shortcut.as_ref() {
            Some(s) => s.infer(x)?,
            None => x.clone(),
        };
        Ok(ops::relu(&Self::add_skip(h, &skip)?))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let sum = self.sum.as_ref().ok_or_else(|| missing_cache("residual_block"))?;
        let g = ops::relu_backward(sum, grad_out)?;
        let gm = self.bn2.backward(&g)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = self.relu1.backward(&gm)?;
        let gm = self.bn1.backward(&gm)?;
        let gm = self.conv1.backward(&gm)?;
        let gs = match self.shortcut.as_mut() {
            Some(s) => s.backward(&g)?,
            None => g,
        };
        Self::add_skip(gm, &gs)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(s) = &self.shortcut {
            s.visit_params(f);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.conv1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        if let Some(s) = &mut self.shortcut {
            out.extend(s.params_mut());
        }
        out
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu(Relu<T>),
    AvgPool(AvgPool),
    GlobalAvgPool(GlobalAvgPool),
    BatchNorm(BatchNorm<T>),
    Residual(Box<ResidualBlock<T>>),
    Flatten(Flatten),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv($l) => $body,
            Layer::Linear($l) => $body,
            Layer::Relu($l) => $body,
            Layer::AvgPool($l) => $body,
            Layer::GlobalAvgPool($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::Residual($l) => $body,
            Layer::Flatten($l) => $body,
        }
    };
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        dispatch!(self, l => l.forward(x, mode))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.infer(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(grad_out))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        dispatch!(self, l => l.visit_params(f))
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        dispatch!(self, l => l.params_mut())
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        dispatch!(self, l => l.visit_buffers(f))
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        dispatch!(self, l => l.visit_buffers_mut(f))
    }
}

/// Layers applied in order.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Builds layers named `{prefix}.{i}`.
    pub fn build(specs: &[LayerSpec], prefix: &str, rng: &mut Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(&format!("{prefix}.{i}"), rng))
            .collect::<Result<_>>()?;
        Ok(Sequential { layers })
    }
}

/// Traces a per-sample shape through a list of specs.
pub fn trace_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    specs
        .iter()
        .try_fold(input.to_vec(), |shape, s| s.output_shape(&shape))
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.layers.iter().for_each(|l| l.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_buffers_mut(f));
    }
}
