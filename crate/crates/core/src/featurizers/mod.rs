//! The two featurizer families, their tap points, and the classifier head.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layers::{trace_shape, Linear};
use crate::nn::{LayerSpec, Mode, Module, Parameter, Sequential, Tensor};
use crate::rng::{rng_from, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MiniCnn,
    MiniResnet,
}

/// Architecture description. For `MiniCnn`, `channels` lists the four conv
/// widths; for `MiniResnet` it lists the stem width followed by one width per
/// block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub family: Family,
    pub input_shape: [usize; 3],
    pub channels: Vec<usize>,
    #[serde(default)]
    pub blocks: usize,
    pub feature_dim: usize,
}

const CNN_STRIDES: [usize; 4] = [2, 1, 1, 1];

impl FeaturizerSpec {
    /// Canonical 4-layer CNN: 64, 128, 128, 128 channels, D = 128.
    pub fn mini_cnn(input_shape: [usize; 3]) -> Self {
        Self::mini_cnn_with(input_shape, [64, 128, 128, 128])
    }

    pub fn mini_cnn_with(input_shape: [usize; 3], channels: [usize; 4]) -> Self {
        FeaturizerSpec {
            family: Family::MiniCnn,
            input_shape,
            channels: channels.to_vec(),
            blocks: 0,
            feature_dim: channels[3],
        }
    }

    /// Stem plus four residual blocks, D = 128.
    pub fn mini_resnet(input_shape: [usize; 3]) -> Self {
        Self::mini_resnet_with(input_shape, vec![32, 32, 64, 64, 128])
    }

    pub fn mini_resnet_with(input_shape: [usize; 3], channels: Vec<usize>) -> Self {
        let blocks = channels.len().saturating_sub(1);
        let feature_dim = channels.last().copied().unwrap_or(0);
        FeaturizerSpec {
            family: Family::MiniResnet,
            input_shape,
            channels,
            blocks,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.channels.contains(&0) {
            return bad(format!("channel plan {:?} has a zero width", self.channels));
        }
        if self.feature_dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        match self.family {
            Family::MiniCnn if self.channels.len() != 4 => {
                return bad(format!("mini_cnn needs 4 conv widths, got {}", self.channels.len()))
            }
            Family::MiniResnet if self.blocks == 0 || self.channels.len() != self.blocks + 1 => {
                return bad(format!(
                    "mini_resnet with {} blocks needs {} widths, got {}",
                    self.blocks,
                    self.blocks + 1,
                    self.channels.len()
                ))
            }
            _ => {}
        }
        if self.channels.last() != Some(&self.feature_dim) {
            return bad(format!(
                "feature dim {} must equal the last width {:?}",
                self.feature_dim,
                self.channels.last()
            ));
        }
        Ok(())
    }

    /// Layer specs grouped so that each group ends at a tap point.
    pub fn stages(&self) -> Result<Vec<Vec<LayerSpec>>> {
        self.validate()?;
        let mut stages = Vec::new();
        let mut cin = self.input_shape[0];
        match self.family {
            Family::MiniCnn => {
                for (&cout, &stride) in self.channels.iter().zip(&CNN_STRIDES) {
                    stages.push(vec![
                        LayerSpec::Conv { in_channels: cin, out_channels: cout, kernel: 3, stride, padding: 1, bias: true },
                        LayerSpec::Relu,
                    ]);
                    cin = cout;
                }
            }
            Family::MiniResnet => {
                let stem = self.channels[0];
                stages.push(vec![
                    LayerSpec::Conv { in_channels: cin, out_channels: stem, kernel: 3, stride: 2, padding: 1, bias: false },
                    LayerSpec::BatchNorm { channels: stem },
                    LayerSpec::Relu,
                ]);
                cin = stem;
                for (b, &cout) in self.channels[1..].iter().enumerate() {
                    // blocks are 1-based in the naming; even blocks downsample
                    let stride = if (b + 1) % 2 == 0 { 2 } else { 1 };
                    stages.push(vec![LayerSpec::ResidualBlock { in_channels: cin, out_channels: cout, stride }]);
                    cin = cout;
                }
            }
        }
        stages.push(vec![LayerSpec::GlobalAvgPool]);
        Ok(stages)
    }

    pub fn tap_points(&self) -> Result<Vec<TapPoint>> {
        let stages = self.stages()?;
        let mut shape = self.input_shape.to_vec();
        let last = stages.len() - 1;
        stages
            .iter()
            .enumerate()
            .map(|(i, specs)| {
                shape = trace_shape(specs, &shape)?;
                let stage = match (i == last, self.family) {
                    (true, _) => "features".to_string(),
                    (false, Family::MiniCnn) => format!("conv{}", i + 1),
                    (false, Family::MiniResnet) if i == 0 => "stem".to_string(),
                    (false, Family::MiniResnet) => format!("block{i}"),
                };
                Ok(TapPoint { index: i, stage, shape: shape.clone() })
            })
            .collect()
    }
}

/// A probe attachment point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub index: usize,
    pub stage: String,
    /// Per-sample shape: `[C, H, W]` or `[D]`.
    pub shape: Vec<usize>,
}

impl TapPoint {
    /// Width after flattening.
    pub fn width(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_spatial(&self) -> bool {
        self.shape.len() == 3
    }
}

/// Flattens `N x C x H x W` to `N x (C*H*W)` in channel-major order; `N x D`
/// passes through.
pub fn flatten_tap<T: crate::nn::Scalar>(rep: &Tensor<T>) -> Result<Tensor<T>> {
    match *rep.shape() {
        [_, _] => Ok(rep.clone()),
        [n, c, h, w] => rep.clone().reshape(vec![n, c * h * w]),
        _ => Err(Error::dim("flatten_tap", "rank", "2 or 4", rep.rank())),
    }
}

/// Featurizer stages plus the linear classifier over the final tap.
#[derive(Clone, Debug)]
pub struct Network {
    spec: FeaturizerSpec,
    taps: Vec<TapPoint>,
    stages: Vec<Sequential<f32>>,
    pub classifier: Linear<f32>,
    num_classes: usize,
}

impl Network {
    pub fn build(spec: &FeaturizerSpec, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Spec("classifier needs at least one class".into()));
        }
        let taps = spec.tap_points()?;
        let mut rng = rng_from(seed, &[tag("network")]);
        let stages = spec
            .stages()?
            .iter()
            .enumerate()
            .map(|(i, s)| Sequential::build(s, &format!("featurizer.{i}"), &mut rng))
            .collect::<Result<_>>()?;
        let classifier = Linear::new("classifier", spec.feature_dim, num_classes, &mut rng);
        Ok(Network { spec: spec.clone(), taps, stages, classifier, num_classes })
    }

    pub fn spec(&self) -> &FeaturizerSpec {
        &self.spec
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = x.dims4("network")?;
        for (axis, want, got) in [("C", self.spec.input_shape[0], c), ("H", self.spec.input_shape[1], h), ("W", self.spec.input_shape[2], w)] {
            if want != got {
                return Err(Error::dim("network", axis, want, got));
            }
        }
        Ok(())
    }

    /// Eval-mode logits and every tap, ordered by tap index.
    pub fn forward_with_taps(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        self.check_input(x)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for s in &self.stages {
            h = s.infer(&h)?;
            taps.push(h.clone());
        }
        let logits = self.classifier.infer(&h)?;
        Ok((logits, taps))
    }

    /// Eval-mode activation at one tap, skipping later stages.
    pub fn forward_to_tap(&self, x: &Tensor<f32>, tap: usize) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        if tap >= self.stages.len() {
            return Err(Error::InvalidArgument(format!("tap {tap} out of range 0..{}", self.stages.len())));
        }
        let mut h = x.clone();
        for s in &self.stages[..=tap] {
            h = s.infer(&h)?;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let features = self.forward_to_tap(x, self.stages.len() - 1)?;
        self.classifier.infer(&features)
    }

    /// Caching forward pass; returns `(logits, features)`.
    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.forward(&h, mode)?;
        }
        let logits = self.classifier.forward(&h, mode)?;
        Ok((logits, h))
    }

    /// Accumulates parameter gradients from a logits gradient and an optional
    /// extra gradient on the features (feature-matching penalties).
    pub fn backward(&mut self, dlogits: &Tensor<f32>, dfeatures: Option<&Tensor<f32>>) -> Result<()> {
        let mut g = self.classifier.backward(dlogits)?;
        if let Some(extra) = dfeatures {
            if extra.shape() != g.shape() {
                return Err(Error::dim("network_backward", "features", format!("{:?}", g.shape()), format!("{:?}", extra.shape())));
            }
            g.data_mut().iter_mut().zip(extra.data()).for_each(|(a, b)| *a += *b);
        }
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn visit_featurizer_params(&self, f: &mut dyn FnMut(&Parameter<f32>)) {
        self.stages.iter().for_each(|s| s.visit_params(f));
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter<f32>)) {
        self.visit_featurizer_params(f);
        self.classifier.visit_params(f);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.stages.iter().for_each(|s| s.visit_buffers(f));
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.stages.iter_mut().for_each(|s| s.visit_buffers_mut(f));
    }

    /// Every trainable parameter, featurizer first, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        let mut out: Vec<_> = self.stages.iter_mut().flat_map(|s| s.params_mut()).collect();
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.value.all_finite());
        ok
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    /// SHA-256 over featurizer parameter and buffer names and bytes.
    pub fn featurizer_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |name: &str, t: &Tensor<f32>| {
            h.update(name.as_bytes());
            t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        };
        self.visit_featurizer_params(&mut |p| feed(p.name(), &p.value));
        self.visit_buffers(&mut |n, t| feed(n, t));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
