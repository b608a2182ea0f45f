//! The three networks: extreme-point heatmap FCN, segmentation FCN and the
//! patch discriminator.
//!
//! Both FCNs share a decoder-free progressive holistic design: a VGG-like
//! backbone of pooled stages, each with a 1×1×1 side output that is linearly
//! upsampled to the input grid and added to the running sum of the previous
//! stages. Every partial sum is a full-resolution prediction, which is what
//! deep supervision attaches to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, upsample_linear, upsample_linear_backward,
};
use crate::nn::{Conv3d, Grads, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhnnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub deep_supervision: bool,
}

impl PhnnConfig {
    /// Image in, six extreme-point heatmaps out.
    pub fn heatmap() -> Self {
        Self {
            in_channels: 1,
            out_channels: 6,
            stage_channels: vec![8, 16, 24, 32],
            convs_per_stage: 2,
            deep_supervision: true,
        }
    }

    /// Image plus summed heatmap in, one mask channel out.
    pub fn segmentation() -> Self {
        Self {
            in_channels: 2,
            ..Self::heatmap()
        }
        .with_out(1)
    }

    fn with_out(mut self, out: usize) -> Self {
        self.out_channels = out;
        self
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride_product(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::invalid("a progressive network needs at least two stages"));
        }
        if self.convs_per_stage == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel and conv counts must be positive"));
        }
        Ok(())
    }
}

struct Stage {
    convs: Vec<Conv3d>,
    side: Conv3d,
}

/// Progressive holistically-nested FCN producing raw (pre-activation) maps.
pub struct Phnn {
    pub config: PhnnConfig,
    pub params: ParamSet,
    stages: Vec<Stage>,
}

struct StageCache {
    pool: Option<([usize; 5], Vec<u32>)>,
    conv_inputs: Vec<Tensor>,
    relu_outputs: Vec<Tensor>,
    side_shape: [usize; 5],
}

/// Forward results: one full-resolution progressive sum per stage, the last
/// being the network's prediction.
pub struct PhnnForward {
    pub outputs: Vec<Tensor>,
    caches: Vec<StageCache>,
    input_shape: [usize; 5],
}

impl PhnnForward {
    pub fn last(&self) -> &Tensor {
        self.outputs.last().expect("at least two stages")
    }
}

impl Phnn {
    pub fn new(config: PhnnConfig, name: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (s, &width) in config.stage_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for c in 0..config.convs_per_stage {
                convs.push(Conv3d::new(&mut params, &format!("{name}.s{s}.conv{c}"), cin, width, 3, 1, 1, rng));
                cin = width;
            }
            let side = Conv3d::new(&mut params, &format!("{name}.s{s}.side"), width, config.out_channels, 1, 1, 1, rng);
            stages.push(Stage { convs, side });
        }
        Ok(Self { config, params, stages })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.stride_product();
        if x.channels() != self.config.in_channels || x.spatial().iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::invalid(format!(
                "input {:?} incompatible with {} channels and stride product {m}",
                x.shape(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<PhnnForward> {
        self.check_input(x)?;
        let full = x.spatial();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut feat = x.clone();
        for (s, stage) in self.stages.iter().enumerate() {
            let pool = if s > 0 {
                let shape = feat.shape();
                let (pooled, arg) = max_pool2(&feat);
                feat = pooled;
                Some((shape, arg))
            } else {
                None
            };
            let mut conv_inputs = Vec::with_capacity(stage.convs.len());
            let mut relu_outputs = Vec::with_capacity(stage.convs.len());
            for conv in &stage.convs {
                let a = conv.forward(&self.params, &feat)?;
                conv_inputs.push(std::mem::replace(&mut feat, relu(&a)));
                relu_outputs.push(feat.clone());
            }
            let side = stage.side.forward(&self.params, &feat)?;
            let side_shape = side.shape();
            let mut sum = upsample_linear(&side, full);
            if let Some(prev) = outputs.last() {
                sum.add_assign(prev);
            }
            outputs.push(sum);
            caches.push(StageCache {
                pool,
                conv_inputs,
                relu_outputs,
                side_shape,
            });
        }
        Ok(PhnnForward {
            outputs,
            caches,
            input_shape: x.shape(),
        })
    }

    /// `d_outputs[s]` is the gradient with respect to the s-th progressive
    /// sum (None for stages without a loss attached).
    pub fn backward(
        &self,
        fwd: &PhnnForward,
        d_outputs: &[Option<Tensor>],
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let n = self.stages.len();
        let mut running: Option<Tensor> = None;
        let mut carry: Option<Tensor> = None;
        for s in (0..n).rev() {
            if let Some(Some(d)) = d_outputs.get(s) {
                match running.as_mut() {
                    Some(r) => r.add_assign(d),
                    None => running = Some(d.clone()),
                }
            }
            let stage = &self.stages[s];
            let cache = &fwd.caches[s];
            let feat = cache.relu_outputs.last().expect("stage has convs");
            let mut d_feat = match running.as_ref() {
                Some(r) => {
                    let d_side = upsample_linear_backward(cache.side_shape, r);
                    stage
                        .side
                        .backward(&self.params, feat, &d_side, grads.as_deref_mut(), true)
                        .expect("dx requested")
                }
                None => feat.zeros_like(),
            };
            if let Some(c) = carry.take() {
                d_feat.add_assign(&c);
            }
            for (c, conv) in stage.convs.iter().enumerate().rev() {
                let da = relu_backward(&cache.relu_outputs[c], &d_feat);
                let first_layer = s == 0 && c == 0;
                let want_dx = !first_layer || need_dx;
                match conv.backward(&self.params, &cache.conv_inputs[c], &da, grads.as_deref_mut(), want_dx) {
                    Some(dx) => d_feat = dx,
                    None => return None,
                }
            }
            carry = Some(match &cache.pool {
                Some((shape, arg)) => max_pool2_backward(*shape, arg, &d_feat),
                None => d_feat,
            });
        }
        debug_assert!(carry.as_ref().is_none_or(|c| c.shape() == fwd.input_shape));
        carry
    }
}

/// Extreme-point network: image → six heatmap channels (regression, no activation).
pub struct HeatmapNet {
    pub net: Phnn,
}

impl HeatmapNet {
    pub fn new(config: PhnnConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.in_channels != 1 || config.out_channels != 6 {
            return Err(Error::invalid("heatmap network maps 1 channel to 6"));
        }
        Ok(Self {
            net: Phnn::new(config, "heatmap", rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<PhnnForward> {
        self.net.forward(x)
    }
}

/// Segmentation output: per-stage probabilities plus the underlying forward.
pub struct SegForward {
    pub probs: Vec<Tensor>,
    pub inner: PhnnForward,
}

impl SegForward {
    pub fn last(&self) -> &Tensor {
        self.probs.last().expect("at least two stages")
    }
}

/// Segmentation network: (image, summed heatmap) → foreground probability.
pub struct SegNet {
    pub net: Phnn,
}

impl SegNet {
    pub fn new(config: PhnnConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.out_channels != 1 || !(1..=2).contains(&config.in_channels) {
            return Err(Error::invalid("segmentation network maps 1 or 2 channels to 1"));
        }
        Ok(Self {
            net: Phnn::new(config, "seg", rng)?,
        })
    }

    /// Whether the heatmap channel is part of the input.
    pub fn uses_heatmap(&self) -> bool {
        self.net.config.in_channels == 2
    }

    pub fn forward(&self, image: &Tensor, heatmap: Option<&Tensor>) -> Result<SegForward> {
        let input = match (self.uses_heatmap(), heatmap) {
            (true, Some(h)) => {
                if h.spatial() != image.spatial() || h.batch() != image.batch() || h.channels() != 1 {
                    return Err(Error::ShapeMismatch {
                        expected: image.shape().to_vec(),
                        actual: h.shape().to_vec(),
                    });
                }
                Tensor::concat_channels(&[image, h])?
            }
            (false, _) => image.clone(),
            (true, None) => return Err(Error::invalid("segmentation network expects a heatmap channel")),
        };
        let inner = self.net.forward(&input)?;
        let probs = inner.outputs.iter().map(sigmoid).collect();
        Ok(SegForward { probs, inner })
    }

    /// Backpropagate probability gradients; returns the gradient with respect
    /// to the heatmap channel when requested.
    pub fn backward(
        &self,
        fwd: &SegForward,
        d_probs: &[Option<Tensor>],
        grads: Option<&mut Grads>,
        need_heatmap_grad: bool,
    ) -> Option<Tensor> {
        let d_logits: Vec<Option<Tensor>> = d_probs
            .iter()
            .zip(&fwd.probs)
            .map(|(d, p)| d.as_ref().map(|d| sigmoid_backward(p, d)))
            .collect();
        let need = need_heatmap_grad && self.uses_heatmap();
        let dx = self.net.backward(&fwd.inner, &d_logits, grads, need)?;
        Some(dx.split_channels(&[1, 1]).pop().expect("two channels"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// Dilation of each conv after the strided entry conv.
    pub dilations: Vec<usize>,
    pub downsample: usize,
}

impl DiscriminatorConfig {
    pub fn joint() -> Self {
        Self {
            in_channels: 2,
            channels: vec![8, 16, 16],
            dilations: vec![2, 4],
            downsample: 2,
        }
    }

    pub fn mask_only() -> Self {
        Self {
            in_channels: 1,
            ..Self::joint()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.dilations.len() + 1 {
            return Err(Error::invalid("discriminator needs one dilation per conv after the first"));
        }
        if self.downsample == 0 || self.in_channels == 0 {
            return Err(Error::invalid("downsample and input channels must be positive"));
        }
        Ok(())
    }
}

/// Atrous patch discriminator producing a logit map.
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    convs: Vec<Conv3d>,
    head: Conv3d,
}

pub struct DiscForward {
    pub logits: Tensor,
    inputs: Vec<Tensor>,
    acts: Vec<Tensor>,
    head_input: Tensor,
    input_shape: [usize; 5],
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut convs = Vec::new();
        let mut cin = config.in_channels;
        for (i, &width) in config.channels.iter().enumerate() {
            let (stride, dilation) = if i == 0 {
                (config.downsample, 1)
            } else {
                (1, config.dilations[i - 1])
            };
            convs.push(Conv3d::new(&mut params, &format!("disc.conv{i}"), cin, width, 3, stride, dilation, rng));
            cin = width;
        }
        let head = Conv3d::new(&mut params, "disc.head", cin, 1, 1, 1, 1, rng);
        Ok(Self {
            config,
            params,
            convs,
            head,
        })
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let mut s = input;
        for c in &self.convs {
            s = c.out_spatial(s);
        }
        s
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscForward> {
        if x.channels() != self.config.in_channels {
            return Err(Error::invalid(format!(
                "discriminator expects {} channels, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        let mut feat = x.clone();
        let mut inputs = Vec::new();
        let mut acts = Vec::new();
        for conv in &self.convs {
            let a = conv.forward(&self.params, &feat)?;
            inputs.push(std::mem::replace(&mut feat, leaky_relu(&a)));
            acts.push(feat.clone());
        }
        let logits = self.head.forward(&self.params, &feat)?;
        Ok(DiscForward {
            logits,
            inputs,
            acts,
            head_input: feat,
            input_shape: x.shape(),
        })
    }

    /// Pass `grads = None` to keep the discriminator frozen while still
    /// propagating to its input.
    pub fn backward(
        &self,
        fwd: &DiscForward,
        d_logits: &Tensor,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let mut d = self
            .head
            .backward(&self.params, &fwd.head_input, d_logits, grads.as_deref_mut(), true)
            .expect("dx requested");
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let da = leaky_relu_backward(&fwd.acts[i], &d);
            match conv.backward(&self.params, &fwd.inputs[i], &da, grads.as_deref_mut(), i > 0 || need_dx) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        debug_assert_eq!(d.shape(), fwd.input_shape);
        Some(d)
    }
}

/// Pair the mask probability with the summed heatmap for the joint discriminator.
pub fn discriminator_input(mask_prob: &Tensor, heatmap_sum: Option<&Tensor>) -> Result<Tensor> {
    match heatmap_sum {
        Some(h) => {
            if h.shape() != mask_prob.shape() {
                return Err(Error::ShapeMismatch {
                    expected: mask_prob.shape().to_vec(),
                    actual: h.shape().to_vec(),
                });
            }
            Tensor::concat_channels(&[mask_prob, h])
        }
        None => Ok(mask_prob.clone()),
    }
}
