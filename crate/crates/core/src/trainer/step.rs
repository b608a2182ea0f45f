//! One discriminator update and one main update, with every gradient path
//! spelled out.
//!
//! Gradient routing for a batch `[source items; target items]`:
//!
//! * `L_sup`: segmentation loss into `s` and, through the summed heatmap
//!   input, into `h`; heatmap loss straight into `h`.
//! * `L_adv`: into the discriminator's input with its parameters frozen,
//!   then into `s` via the mask channel. The heatmap channel and the heatmap
//!   input of `s` pass gradient to `h` only for items without points; for
//!   point-labelled items the heatmap prediction is treated as a constant.
//! * `L_disc`: computed on copies of the predictions, so only the
//!   discriminator receives gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{loss_adv, loss_disc, loss_sup, total_loss, BatchRole, SupItem};
use crate::networks::{discriminator_input, Discriminator, HeatmapNet, PhnnForward, SegForward, SegNet};
use crate::nn::{Adam, Grads, Tensor};

use super::config::{DiscSourceInput, TrainConfig};
use super::data::Sample;

/// The networks a variant trains.
pub struct Models {
    pub h: Option<HeatmapNet>,
    pub s: SegNet,
    pub d: Option<Discriminator>,
}

impl Models {
    pub fn new(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = if config.variant.has_heatmap_net() {
            Some(HeatmapNet::new(config.heatmap_net.clone(), rng)?)
        } else {
            None
        };
        let s = SegNet::new(config.seg_net.clone(), rng)?;
        let d = if config.variant.adapts() {
            Some(new_discriminator(config)?)
        } else {
            None
        };
        Ok(Self { h, s, d })
    }

    pub fn fingerprint_main(&self) -> u64 {
        let h = self.h.as_ref().map_or(0, |h| h.net.params.fingerprint());
        h.rotate_left(1) ^ self.s.net.params.fingerprint()
    }

    pub fn fingerprint_disc(&self) -> u64 {
        self.d.as_ref().map_or(0, |d| d.params.fingerprint())
    }
}

const DISC_SEED_SALT: u64 = 0xd15c_0000_0000_0001;

/// Discriminator initialised from its own stream, so the main networks'
/// initialisation does not depend on whether a variant adapts.
pub fn new_discriminator(config: &TrainConfig) -> Result<Discriminator> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DISC_SEED_SALT);
    Discriminator::new(config.discriminator.clone(), &mut rng)
}

/// Optimiser state for each network.
pub struct Optimizers {
    pub h: Option<Adam>,
    pub s: Adam,
    pub d: Option<Adam>,
}

impl Optimizers {
    pub fn new(models: &Models, config: &TrainConfig) -> Self {
        Self {
            h: models.h.as_ref().map(|h| Adam::new(&h.net.params, config.lr_main)),
            s: Adam::new(&models.s.net.params, config.lr_main),
            d: models.d.as_ref().map(|d| Adam::new(&d.params, config.lr_disc)),
        }
    }
}

/// A mini-batch: items in order, their stacked images and their roles.
pub struct Batch<'a> {
    pub items: Vec<&'a Sample>,
    pub image: Tensor,
}

impl<'a> Batch<'a> {
    pub fn new(items: Vec<&'a Sample>) -> Result<Self> {
        let imgs: Vec<&Tensor> = items.iter().map(|s| &s.image).collect();
        let image = Tensor::stack(&imgs)?;
        Ok(Self { items, image })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn roles(&self) -> Vec<BatchRole> {
        self.items.iter().map(|s| s.role).collect()
    }

    /// Summed true heatmaps, required for every item.
    pub fn true_heat_sum(&self) -> Result<Tensor> {
        let sums: Vec<Tensor> = self
            .items
            .iter()
            .map(|s| {
                s.heat
                    .as_ref()
                    .map(Tensor::sum_channels_clamped)
                    .ok_or_else(|| Error::invalid(format!("study {} has no extreme points", s.study_id)))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&sums.iter().collect::<Vec<_>>())
    }
}

/// Forward pass of the heatmap and segmentation networks.
pub struct DualForward {
    pub h: Option<PhnnForward>,
    /// Summed, clamped heatmap channel fed to `s`.
    pub heat_sum: Tensor,
    pub seg: SegForward,
}

impl DualForward {
    pub fn prob(&self) -> &Tensor {
        self.seg.last()
    }
}

pub fn forward_dual(models: &Models, image: &Tensor, given_heat_sum: Option<&Tensor>) -> Result<DualForward> {
    let (h, heat_sum) = match (&models.h, given_heat_sum) {
        (_, Some(g)) => (None, g.clone()),
        (Some(net), None) => {
            let f = net.forward(image)?;
            let sum = f.last().sum_channels_clamped();
            (Some(f), sum)
        }
        (None, None) => return Err(Error::invalid("no heatmap network and no heatmap supplied")),
    };
    let seg = models.s.forward(image, Some(&heat_sum))?;
    Ok(DualForward { h, heat_sum, seg })
}

/// Forward the batch the way the variant trains: conditioned on true
/// heatmaps for the point-conditioned model, on predicted ones otherwise.
pub fn forward_batch(models: &Models, batch: &Batch, config: &TrainConfig) -> Result<DualForward> {
    if config.variant.has_heatmap_net() {
        forward_dual(models, &batch.image, None)
    } else {
        let sum = batch.true_heat_sum()?;
        forward_dual(models, &batch.image, Some(&sum))
    }
}

/// Loss values of one step, in the training-log layout.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_ext: f64,
    pub l_seg: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Parameter gradients produced by one step, one buffer per network.
pub struct StepGrads {
    pub h: Option<Grads>,
    pub s: Grads,
    pub d: Option<Grads>,
}

impl StepGrads {
    fn zeros(models: &Models) -> Self {
        Self {
            h: models.h.as_ref().map(|h| h.net.params.zero_grads()),
            s: models.s.net.params.zero_grads(),
            d: models.d.as_ref().map(|d| d.params.zero_grads()),
        }
    }
}

/// Which terms of the main objective to backpropagate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub sup: bool,
    pub adv: bool,
}

impl Terms {
    pub const SUP: Terms = Terms { sup: true, adv: false };
    pub const ALL: Terms = Terms { sup: true, adv: true };
    pub const ADV: Terms = Terms { sup: false, adv: true };
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn stage_indices(n: usize, deep: bool) -> Vec<usize> {
    if deep {
        (0..n).collect()
    } else {
        vec![n - 1]
    }
}

/// Stage-wise per-item gradient buffers for a network output.
fn empty_stage_grads(outputs: &[Tensor]) -> Vec<Option<Tensor>> {
    outputs.iter().map(|_| None).collect()
}

fn add_item(dst: &mut Option<Tensor>, like: &Tensor, item: usize, g: &[f64]) {
    let t = dst.get_or_insert_with(|| like.zeros_like());
    for (a, b) in t.item_mut(item).iter_mut().zip(g) {
        *a += *b as f32;
    }
}

/// Discriminator input for the given items (rows of the batch).
fn disc_input_for(fwd: &DualForward, rows: &[usize], joint: bool) -> Result<Tensor> {
    let prob = fwd.prob().select(rows);
    let heat = joint.then(|| fwd.heat_sum.select(rows));
    discriminator_input(&prob, heat.as_ref())
}

fn ground_truth_disc_input(batch: &Batch, rows: &[usize], joint: bool) -> Result<Tensor> {
    let masks: Vec<&Tensor> = rows
        .iter()
        .map(|&r| {
            batch.items[r]
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid("ground-truth discriminator input needs masks"))
        })
        .collect::<Result<_>>()?;
    let mask = Tensor::stack(&masks)?;
    if !joint {
        return Ok(mask);
    }
    let sums: Vec<Tensor> = rows
        .iter()
        .map(|&r| {
            batch.items[r]
                .heat
                .as_ref()
                .map(Tensor::sum_channels_clamped)
                .ok_or_else(|| Error::invalid("ground-truth discriminator input needs heatmaps"))
        })
        .collect::<Result<_>>()?;
    discriminator_input(&mask, Some(&Tensor::stack(&sums.iter().collect::<Vec<_>>())?))
}

fn rows_where(batch: &Batch, pred: impl Fn(&BatchRole) -> bool) -> Vec<usize> {
    (0..batch.len()).filter(|&i| pred(&batch.items[i].role)).collect()
}

/// Discriminator loss and its parameter gradient. The predictions are
/// copied into fresh tensors, so nothing reaches `h` or `s`.
pub fn disc_gradients(models: &Models, batch: &Batch, fwd: &DualForward, config: &TrainConfig) -> Result<(f64, StepGrads)> {
    let d = models
        .d
        .as_ref()
        .ok_or_else(|| Error::invalid("variant has no discriminator"))?;
    let joint = config.variant.joint_discriminator();
    let src = rows_where(batch, BatchRole::is_source);
    let tgt = rows_where(batch, BatchRole::is_target);
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::invalid("discriminator step needs source and target items"));
    }
    let src_in = match config.disc_source_input {
        DiscSourceInput::Pred => disc_input_for(fwd, &src, joint)?,
        DiscSourceInput::Gt => ground_truth_disc_input(batch, &src, joint)?,
    };
    let tgt_in = disc_input_for(fwd, &tgt, joint)?;
    let input = Tensor::stack(&[&src_in, &tgt_in])?;
    let out = d.forward(&input)?;
    let per_item = out.logits.voxels() * out.logits.channels();
    let split = src.len() * per_item;
    let logits = to_f64(out.logits.data());
    let (l_d, g_src, g_tgt) = loss_disc(&logits[..split], &logits[split..])?;
    let d_logits = Tensor::from_vec(
        out.logits.shape(),
        g_src.iter().chain(&g_tgt).map(|&g| g as f32).collect(),
    )?;
    let mut grads = StepGrads::zeros(models);
    d.backward(&out, &d_logits, grads.d.as_mut(), false);
    Ok((l_d, grads))
}

/// Gradients of the main objective `L_sup + λ·L_adv` for `h` and `s`.
/// The discriminator buffer is returned untouched.
pub fn main_gradients(
    models: &Models,
    batch: &Batch,
    fwd: &DualForward,
    config: &TrainConfig,
    terms: Terms,
) -> Result<(StepLosses, StepGrads)> {
    let deep = config.seg_net.deep_supervision;
    let seg_stages = stage_indices(fwd.seg.probs.len(), deep);
    let mut grads = StepGrads::zeros(models);
    let mut losses = StepLosses::default();
    let b = batch.len();

    let mut d_probs = empty_stage_grads(&fwd.seg.probs);
    let mut d_heat_out: Vec<Option<Tensor>> = fwd.h.as_ref().map_or(Vec::new(), |h| empty_stage_grads(&h.outputs));
    // gradient arriving at the summed heatmap channel
    let mut d_heat_sum = fwd.heat_sum.zeros_like();

    // supervised part
    let mut items = Vec::with_capacity(b);
    for (i, s) in batch.items.iter().enumerate() {
        let seg = seg_stages.iter().map(|&st| to_f64(fwd.seg.probs[st].item(i))).collect();
        let (heat_stages, heat_target) = match (&fwd.h, &s.heat) {
            (Some(h), Some(t)) if s.role.has_ps => {
                let hs = stage_indices(h.outputs.len(), config.heatmap_net.deep_supervision);
                (hs.iter().map(|&st| to_f64(h.outputs[st].item(i))).collect(), Some(to_f64(t.data())))
            }
            _ => (Vec::new(), None),
        };
        items.push(SupItem {
            role: Some(s.role),
            seg_stages: seg,
            mask: s.mask.as_ref().filter(|_| s.role.has_mask).map(|m| to_f64(m.data())),
            heat_stages,
            heat_target,
        });
    }
    let sup = loss_sup(&items, &config.losses)?;
    losses.l_seg = sup.l_seg;
    losses.l_ext = sup.l_ext;
    if terms.sup {
        for i in 0..b {
            for (k, g) in sup.d_seg[i].iter().enumerate() {
                let st = seg_stages[k];
                add_item(&mut d_probs[st], &fwd.seg.probs[st], i, g);
            }
            if let Some(h) = &fwd.h {
                let hs = stage_indices(h.outputs.len(), config.heatmap_net.deep_supervision);
                for (k, g) in sup.d_heat[i].iter().enumerate() {
                    let st = hs[k];
                    add_item(&mut d_heat_out[st], &h.outputs[st], i, g);
                }
            }
        }
    }

    // adversarial part
    let tgt = rows_where(batch, BatchRole::is_target);
    let anchored: Vec<bool> = batch.items.iter().map(|s| s.role.is_target() && s.role.has_ps).collect();
    if config.variant.adapts() && !tgt.is_empty() {
        let d = models.d.as_ref().ok_or_else(|| Error::invalid("variant has no discriminator"))?;
        let joint = config.variant.joint_discriminator();
        let input = disc_input_for(fwd, &tgt, joint)?;
        let out = d.forward(&input)?;
        let roles: Vec<BatchRole> = tgt.iter().map(|&r| batch.items[r].role).collect();
        let adv = loss_adv(&to_f64(out.logits.data()), &roles)?;
        losses.l_adv = adv.value;
        if terms.adv {
            let lambda = config.losses.lambda_adv;
            let d_logits = Tensor::from_vec(out.logits.shape(), adv.grad.iter().map(|&g| (lambda * g) as f32).collect())?;
            // discriminator frozen: no parameter gradient buffer
            let d_in = d.backward(&out, &d_logits, None, true).expect("input gradient requested");
            let widths: &[usize] = if joint { &[1, 1] } else { &[1] };
            let parts = d_in.split_channels(widths);
            let last = fwd.seg.probs.len() - 1;
            for (row_in, &row) in tgt.iter().enumerate() {
                let g = to_f64(parts[0].item(row_in));
                add_item(&mut d_probs[last], &fwd.seg.probs[last], row, &g);
                if joint && !anchored[row] {
                    for (a, v) in d_heat_sum.item_mut(row).iter_mut().zip(parts[1].item(row_in)) {
                        *a += v;
                    }
                }
            }
        }
    }
    losses.total = total_loss(losses.l_seg + losses.l_ext, losses.l_adv, config.losses.lambda_adv);

    // segmentation network
    let want_heat_grad = fwd.h.is_some();
    let d_heat_from_s = if d_probs.iter().any(Option::is_some) {
        models.s.backward(&fwd.seg, &d_probs, Some(&mut grads.s), want_heat_grad)
    } else {
        None
    };
    if let Some(g) = d_heat_from_s {
        for row in 0..b {
            // anchor rule: the heatmap input of a point-labelled target item is a constant
            if !anchored[row] {
                for (a, v) in d_heat_sum.item_mut(row).iter_mut().zip(g.item(row)) {
                    *a += v;
                }
            }
        }
    }

    // heatmap network
    if let (Some(h), Some(hf), Some(hg)) = (&models.h, &fwd.h, grads.h.as_mut()) {
        let raw = hf.last();
        let through_sum = raw.sum_channels_clamped_backward(&d_heat_sum);
        let last = hf.outputs.len() - 1;
        match d_heat_out[last].as_mut() {
            Some(t) => t.add_assign(&through_sum),
            None => d_heat_out[last] = Some(through_sum),
        }
        h.net.backward(hf, &d_heat_out, Some(hg), false);
    }
    Ok((losses, grads))
}

/// Apply main-network gradients at the given learning rate.
pub fn apply_main(models: &mut Models, opt: &mut Optimizers, grads: &StepGrads, lr: f64) {
    if let (Some(h), Some(o), Some(g)) = (models.h.as_mut(), opt.h.as_mut(), grads.h.as_ref()) {
        o.lr = lr;
        o.update(&mut h.net.params, g);
    }
    opt.s.lr = lr;
    opt.s.update(&mut models.s.net.params, &grads.s);
}

pub fn apply_disc(models: &mut Models, opt: &mut Optimizers, grads: &StepGrads, lr: f64) {
    if let (Some(d), Some(o), Some(g)) = (models.d.as_mut(), opt.d.as_mut(), grads.d.as_ref()) {
        o.lr = lr;
        o.update(&mut d.params, g);
    }
}
