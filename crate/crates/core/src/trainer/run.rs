use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::extreme::{ExtremePointSet, PointSource};
use crate::nn::{ParamSet, Tensor};
use crate::volume::{
    binarize, dice_score, resample_probability, Interpolation, ProbabilityMap, SegmentationMask, Volume,
};

use super::audit::{AccessContext, AccessLog, DataAccess};
use super::config::{TrainConfig, Variant};
use super::data::{epoch_rng, heat_tensor, image_tensor, shuffled, stratified_order, Sample, TrainingData};
use super::step::{
    apply_disc, apply_main, disc_gradients, new_discriminator, forward_batch, forward_dual, main_gradients, Batch, Models,
    Optimizers, StepLosses, Terms,
};
use crate::metrics::{evaluate_manifest, RunReport};
use crate::nifti_io::write_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }
}

/// Position of the two samplers. Visiting order within an epoch is a pure
/// function of `(seed, stream, epoch)`, so this is the whole sampling state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub source_epoch: u64,
    pub source_cursor: usize,
    pub target_epoch: u64,
    pub target_cursor: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMeans {
    pub count: u64,
    pub l_ext: f64,
    pub l_seg: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub total: f64,
}

impl RunningMeans {
    pub fn push(&mut self, l: &StepLosses) {
        self.count += 1;
        let n = self.count as f64;
        let upd = |m: &mut f64, x: f64| *m += (x - *m) / n;
        upd(&mut self.l_ext, l.l_ext);
        upd(&mut self.l_seg, l.l_seg);
        upd(&mut self.l_adv, l.l_adv);
        upd(&mut self.l_d, l.l_d);
        upd(&mut self.total, l.total);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs in the current phase.
    pub epoch: u32,
    pub global_step: u64,
    pub main_steps: u64,
    pub disc_steps: u64,
    pub schedule: super::schedule::LrSchedule,
    pub best_val_dsc: Option<f64>,
    pub epochs_since_best: u32,
    pub sampler: SamplerState,
    /// Means over the current epoch.
    pub running: RunningMeans,
    pub history: Vec<EpochSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: Phase,
    pub epoch: u32,
    pub mean_total: f64,
    pub mean_sup: f64,
    pub val_dsc: f64,
    pub lr_main: f64,
}

impl TrainState {
    fn new(config: &TrainConfig) -> Self {
        Self {
            phase: Phase::Pretrain,
            epoch: 0,
            global_step: 0,
            main_steps: 0,
            disc_steps: 0,
            schedule: super::schedule::LrSchedule::new(
                config.lr_main,
                config.lr_disc,
                config.plateau_factor,
                config.plateau_patience,
            ),
            best_val_dsc: None,
            epochs_since_best: 0,
            sampler: SamplerState::default(),
            running: RunningMeans::default(),
            history: Vec::new(),
        }
    }
}

/// Copy of the main networks' weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub h: Option<ParamSet>,
    pub s: ParamSet,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub phase: Phase,
    #[serde(rename = "L_ext")]
    pub l_ext: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    pub total: f64,
}

/// Per-step loss log, kept in memory and optionally streamed to CSV.
#[derive(Default)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
    writer: Option<csv::Writer<fs::File>>,
}

impl LossLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            rows: Vec::new(),
            writer: Some(csv::Writer::from_writer(f)),
        })
    }

    pub fn record(&mut self, step: u64, phase: Phase, l: &StepLosses) -> Result<()> {
        let row = LossRow {
            step,
            phase,
            l_ext: l.l_ext,
            l_seg: l.l_seg,
            l_adv: l.l_adv,
            l_d: l.l_d,
            total: l.total,
        };
        if let Some(w) = self.writer.as_mut() {
            w.serialize(&row)?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }
}

/// Full training state: networks, optimisers, schedule and sampler position.
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub opt: Optimizers,
    pub state: TrainState,
    /// Best weights seen during source pretraining.
    pub best: Option<Snapshot>,
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = Models::new(&config, &mut rng)?;
        let opt = Optimizers::new(&models, &config);
        let state = TrainState::new(&config);
        Ok(Self {
            config,
            models,
            opt,
            state,
            best: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        super::checkpoint::load(path)
    }

    /// Load a checkpoint whose networks must match `config`'s.
    pub fn load_for(path: &Path, config: &TrainConfig) -> Result<Self> {
        let t = Self::load(path)?;
        t.check_compatible(config)?;
        Ok(t)
    }

    fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let c = &self.config;
        if c.heatmap_net != config.heatmap_net || c.seg_net != config.seg_net || c.model_shape != config.model_shape {
            return Err(Error::Checkpoint {
                found: super::checkpoint::FORMAT_VERSION,
                supported: super::checkpoint::FORMAT_VERSION,
                reason: format!(
                    "checkpoint networks ({:?}, {:?}, grid {:?}) differ from the requested configuration",
                    c.heatmap_net.stage_channels, c.seg_net.stage_channels, c.model_shape
                ),
            });
        }
        if c.variant.has_heatmap_net() != config.variant.has_heatmap_net() {
            return Err(Error::invalid(format!(
                "a {} checkpoint cannot serve as {}",
                c.variant, config.variant
            )));
        }
        Ok(())
    }

    /// Continue from these weights under another configuration (same
    /// networks). Starts a fresh adaptation phase with new optimisers and a
    /// fresh discriminator when the new variant needs one.
    pub fn into_adaptation(self, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !config.variant.adapts() {
            return Err(Error::invalid(format!("{} has no adaptation phase", config.variant)));
        }
        self.check_compatible(&config)?;
        let mut models = self.models;
        let needs_new_d = models
            .d
            .as_ref()
            .is_none_or(|d| d.config != config.discriminator);
        if needs_new_d {
            models.d = Some(new_discriminator(&config)?);
        }
        let opt = Optimizers::new(&models, &config);
        let mut state = TrainState::new(&config);
        state.phase = Phase::Adapt;
        state.global_step = self.state.global_step;
        state.history = self.state.history;
        Ok(Self {
            config,
            models,
            opt,
            state,
            best: None,
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            h: self.models.h.as_ref().map(|h| h.net.params.clone()),
            s: self.models.s.net.params.clone(),
        }
    }

    fn restore(&mut self, snap: &Snapshot) {
        if let (Some(h), Some(p)) = (self.models.h.as_mut(), snap.h.as_ref()) {
            h.net.params = p.clone();
        }
        self.models.s.net.params = snap.s.clone();
    }

    fn next_indices(&mut self, n: usize, batch: usize, target: bool, pool: &[Sample]) -> (Vec<usize>, bool) {
        let seed = self.config.seed;
        let sp = &mut self.state.sampler;
        let (epoch, cursor) = if target {
            (&mut sp.target_epoch, &mut sp.target_cursor)
        } else {
            (&mut sp.source_epoch, &mut sp.source_cursor)
        };
        let mut rng = epoch_rng(seed, if target { TARGET_STREAM } else { SOURCE_STREAM }, *epoch);
        let order = if target {
            stratified_order(pool, &mut rng)
        } else {
            shuffled(n, &mut rng)
        };
        let end = (*cursor + batch).min(n);
        let idx = order[*cursor..end].to_vec();
        let wrapped = end == n;
        if wrapped {
            *epoch += 1;
            *cursor = 0;
        } else {
            *cursor = end;
        }
        (idx, wrapped)
    }

    /// One supervised step on the next source batch. Returns the losses and
    /// whether the step finished a pass over the source set.
    pub fn pretrain_step(&mut self, data: &TrainingData, log: &mut LossLog) -> Result<(StepLosses, bool)> {
        let n = data.source_train.len();
        if n == 0 {
            return Err(Error::invalid("no source training studies"));
        }
        let (idx, wrapped) = self.next_indices(n, self.config.batch_source, false, &data.source_train);
        let batch = Batch::new(idx.iter().map(|&i| &data.source_train[i]).collect())?;
        let fwd = forward_batch(&self.models, &batch, &self.config)?;
        let (losses, grads) = main_gradients(&self.models, &batch, &fwd, &self.config, Terms::SUP)?;
        apply_main(&mut self.models, &mut self.opt, &grads, self.state.schedule.lr_main);
        self.state.main_steps += 1;
        self.state.global_step += 1;
        self.state.running.push(&losses);
        log.record(self.state.global_step, Phase::Pretrain, &losses)?;
        Ok((losses, wrapped))
    }

    /// Number of adaptation iterations in one pass over the target set.
    pub fn adapt_iterations_per_epoch(&self, data: &TrainingData) -> usize {
        data.target.len().div_ceil(self.config.batch_target)
    }

    /// One discriminator step followed by one main step.
    pub fn adapt_step(&mut self, data: &TrainingData, log: &mut LossLog) -> Result<StepLosses> {
        if !self.config.variant.adapts() {
            return Err(Error::invalid(format!("{} has no adaptation phase", self.config.variant)));
        }
        if data.target.is_empty() || data.source_train.is_empty() {
            return Err(Error::invalid("adaptation needs source and target studies"));
        }
        self.state.phase = Phase::Adapt;
        let (src, _) = self.next_indices(data.source_train.len(), self.config.batch_source, false, &data.source_train);
        let (tgt, _) = self.next_indices(data.target.len(), self.config.batch_target, true, &data.target);
        let items: Vec<&Sample> = src
            .iter()
            .map(|&i| &data.source_train[i])
            .chain(tgt.iter().map(|&i| &data.target[i]))
            .collect();
        let batch = Batch::new(items)?;
        // h and s are unchanged by the discriminator step, so one forward serves both
        let fwd = forward_batch(&self.models, &batch, &self.config)?;
        let (l_d, d_grads) = disc_gradients(&self.models, &batch, &fwd, &self.config)?;
        apply_disc(&mut self.models, &mut self.opt, &d_grads, self.state.schedule.lr_disc);
        self.state.disc_steps += 1;
        let (mut losses, grads) = main_gradients(&self.models, &batch, &fwd, &self.config, Terms::ALL)?;
        apply_main(&mut self.models, &mut self.opt, &grads, self.state.schedule.lr_main);
        self.state.main_steps += 1;
        self.state.global_step += 1;
        losses.l_d = l_d;
        self.state.running.push(&losses);
        log.record(self.state.global_step, Phase::Adapt, &losses)?;
        Ok(losses)
    }

    /// Probability map (model grid) for a prepared image; `heat_sum`
    /// replaces the predicted heatmap when given.
    pub fn predict(&self, image: &Tensor, heat_sum: Option<&Tensor>) -> Result<Tensor> {
        if self.models.h.is_none() && heat_sum.is_none() {
            return Err(Error::invalid(format!(
                "{} inference needs extreme points",
                self.config.variant
            )));
        }
        let fwd = forward_dual(&self.models, image, heat_sum)?;
        Ok(fwd.prob().clone())
    }

    /// Mean DSC on the model grid over labelled samples.
    pub fn validation_dsc(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("empty validation set"));
        }
        let mut total = 0.0;
        for s in samples {
            let heat = if self.models.h.is_none() {
                s.heat.as_ref().map(Tensor::sum_channels_clamped)
            } else {
                None
            };
            let prob = self.predict(&s.image, heat.as_ref())?;
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("validation study {} has no mask", s.study_id)))?;
            total += tensor_dice(&prob, mask, self.config.threshold);
        }
        Ok(total / samples.len() as f64)
    }

    fn end_epoch(&mut self, data: &TrainingData) -> Result<f64> {
        let val = self.validation_dsc(&data.source_val)?;
        let r = std::mem::take(&mut self.state.running);
        self.state.history.push(EpochSummary {
            phase: self.state.phase,
            epoch: self.state.epoch,
            mean_total: r.total,
            mean_sup: r.l_seg + r.l_ext,
            val_dsc: val,
            lr_main: self.state.schedule.lr_main,
        });
        self.state.schedule.plateau_step(val);
        self.state.epoch += 1;
        Ok(val)
    }

    /// Run phase 1 to convergence: stop after `2 × patience` epochs without
    /// a validation improvement or at the epoch cap; keep the best weights.
    pub fn pretrain(&mut self, data: &TrainingData, log: &mut LossLog) -> Result<()> {
        self.state.phase = Phase::Pretrain;
        while self.state.epoch < self.config.pretrain_max_epochs {
            loop {
                let (_, wrapped) = self.pretrain_step(data, log)?;
                if wrapped {
                    break;
                }
            }
            let val = self.end_epoch(data)?;
            if self.state.best_val_dsc.is_none_or(|b| val > b) {
                self.state.best_val_dsc = Some(val);
                self.state.epochs_since_best = 0;
                self.best = Some(self.snapshot());
            } else {
                self.state.epochs_since_best += 1;
            }
            log::info!(
                "pretrain epoch {} val DSC {val:.4} lr {:.2e}",
                self.state.epoch,
                self.state.schedule.lr_main
            );
            if self.state.epochs_since_best >= 2 * self.config.plateau_patience {
                break;
            }
        }
        if let Some(best) = self.best.clone() {
            self.restore(&best);
        }
        log.flush()
    }

    /// Phase 2 for `adapt_epochs` passes over the target set; the final
    /// weights are kept.
    pub fn adapt(&mut self, data: &TrainingData, log: &mut LossLog) -> Result<()> {
        self.state.phase = Phase::Adapt;
        let iters = self.adapt_iterations_per_epoch(data);
        while self.state.epoch < self.config.adapt_epochs {
            for _ in 0..iters {
                self.adapt_step(data, log)?;
            }
            let val = self.end_epoch(data)?;
            log::info!(
                "adapt epoch {} val DSC {val:.4} lr {:.2e}",
                self.state.epoch,
                self.state.schedule.lr_main
            );
        }
        log.flush()
    }
}

fn tensor_dice(prob: &Tensor, mask: &Tensor, threshold: f32) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &m) in prob.data().iter().zip(mask.data()) {
        let x = p >= threshold;
        let y = m >= 0.5;
        inter += (x && y) as usize;
        a += x as usize;
        b += y as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Supervised phase on the source domain.
pub fn pretrain_source(data: &TrainingData, config: &TrainConfig, log: &mut LossLog) -> Result<Trainer> {
    if data.source_train.is_empty() {
        return Err(Error::invalid("empty source set"));
    }
    let mut t = Trainer::new(config.clone())?;
    t.pretrain(data, log)?;
    Ok(t)
}

/// Adversarial phase starting from a pretrained trainer.
pub fn adapt_target(pretrained: Trainer, data: &TrainingData, config: &TrainConfig, log: &mut LossLog) -> Result<Trainer> {
    if !config.variant.adapts() {
        return Err(Error::invalid(format!("{} has no adaptation phase", config.variant)));
    }
    let mut t = pretrained.into_adaptation(config.clone())?;
    t.adapt(data, log)?;
    Ok(t)
}

/// Result of running the networks on one native-resolution volume.
pub struct Inference {
    /// Foreground probability on the model grid.
    pub prob_model: ProbabilityMap,
    /// Where the heatmap channel came from.
    pub heat_source: PointSource,
}

/// Run the networks on a native volume, conditioning on `points` when given.
pub fn infer(trainer: &Trainer, vol: &Volume, points: Option<&ExtremePointSet>) -> Result<Inference> {
    let cfg = &trainer.config;
    let image = image_tensor(vol, cfg.model_shape, cfg.window_hu)?;
    let heat = points
        .map(|p| heat_tensor(p, vol.shape(), cfg.model_shape, cfg.sigma_vox).map(|h| h.sum_channels_clamped()))
        .transpose()?;
    let prob = trainer.predict(&image, heat.as_ref())?;
    let m = cfg.model_shape;
    let grid = Array3::from_shape_vec(m, prob.into_vec()).map_err(|e| Error::invalid(e.to_string()))?;
    let spacing = [0, 1, 2].map(|a| vol.spacing_mm[a] * vol.shape()[a] as f64 / m[a] as f64);
    Ok(Inference {
        prob_model: ProbabilityMap::new(grid, spacing)?,
        heat_source: points.map_or(PointSource::Predicted, |p| p.source),
    })
}

/// Native-resolution mask: the model-grid probability is resampled linearly
/// to the volume's grid and then thresholded.
pub fn predict_mask(trainer: &Trainer, vol: &Volume, points: Option<&ExtremePointSet>) -> Result<SegmentationMask> {
    let inf = infer(trainer, vol, points)?;
    let native = resample_probability(&inf.prob_model, vol.shape(), Interpolation::Linear)?;
    let mut m = binarize(&native, trainer.config.threshold)?;
    m.spacing_mm = vol.spacing_mm;
    m.study_id = vol.study_id.clone();
    Ok(m)
}

/// Evaluation-set predictions written as `<dir>/<study_id>.nii`.
pub fn predict_evaluation_set(
    trainer: &Trainer,
    manifest: &CorpusManifest,
    dir: &Path,
    access: &DataAccess,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for s in &manifest.evaluation_studies {
        let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
        let points = if trainer.config.variant == Variant::Dextr {
            Some(access.points(&manifest.resolve(&s.ps))?)
        } else {
            None
        };
        let mask = predict_mask(trainer, &vol, points.as_ref())?;
        let path = dir.join(format!("{}.nii", s.study_id));
        write_mask(&path, &mask)?;
        out.push(path);
    }
    Ok(out)
}

/// Mean DSC of native-resolution predictions on labelled source studies.
pub fn source_dsc(trainer: &Trainer, manifest: &CorpusManifest, indices: &[usize], access: &DataAccess) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let s = &manifest.source_studies[i];
            let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
            let gt = access.mask(&manifest.resolve(&s.mask), &s.study_id)?;
            let points = if trainer.models.h.is_none() {
                Some(crate::extreme::extract_extreme_points(&gt)?)
            } else {
                None
            };
            let pred = predict_mask(trainer, &vol, points.as_ref())?;
            dice_score(&pred, &gt)
        })
        .collect()
}

/// What a training run was asked to do, stored next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub manifest: PathBuf,
    pub config: TrainConfig,
}

pub const RUN_SPEC_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const PRETRAIN_CHECKPOINT_FILE: &str = "pretrain.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

/// Evaluate a trained model on the evaluation studies and write the report
/// files into `out_dir`.
pub fn evaluate_trained(
    trainer: &Trainer,
    manifest: &CorpusManifest,
    out_dir: &Path,
    log: &AccessLog,
) -> Result<RunReport> {
    let infer_access = DataAccess::new(AccessContext::Inference, log.clone());
    let pred_dir = out_dir.join("pred");
    predict_evaluation_set(trainer, manifest, &pred_dir, &infer_access)?;
    let eval_access = DataAccess::new(AccessContext::Evaluation, log.clone());
    let mut report = evaluate_manifest(manifest, &pred_dir, &eval_access)?;
    report.variant = trainer.config.variant;
    report.ps_fraction = trainer.config.ps_fraction;
    report.seed = trainer.config.seed;
    report.save(out_dir)?;
    Ok(report)
}

/// Train a variant end to end and evaluate it. Writes the checkpoint, the
/// loss log, the evaluation predictions and the report into `out_dir`.
pub fn run_variant(manifest: &CorpusManifest, manifest_path: &Path, config: &TrainConfig, out_dir: &Path, log: &AccessLog) -> Result<RunReport> {
    config.validate()?;
    if manifest.evaluation_studies.is_empty() {
        return Err(Error::invalid("manifest has no evaluation studies"));
    }
    if let Some(s) = manifest
        .evaluation_studies
        .iter()
        .find(|s| !manifest.resolve(&s.hidden_mask).is_file())
    {
        return Err(Error::invalid(format!("hidden mask of {} is missing", s.study_id)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spec = RunSpec {
        manifest: fs::canonicalize(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf()),
        config: config.clone(),
    };
    let spec_path = out_dir.join(RUN_SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(&spec)?).map_err(|e| Error::io(&spec_path, e))?;

    let train_access = DataAccess::new(AccessContext::Training, log.clone());
    let data = TrainingData::load(manifest, config, &train_access)?;
    let mut loss_log = LossLog::to_file(&out_dir.join(LOSS_LOG_FILE))?;
    let mut trainer = pretrain_source(&data, config, &mut loss_log)?;
    trainer.save(&out_dir.join(PRETRAIN_CHECKPOINT_FILE))?;
    if config.variant.adapts() {
        trainer = adapt_target(trainer, &data, config, &mut loss_log)?;
    }
    trainer.save(&out_dir.join(CHECKPOINT_FILE))?;
    evaluate_trained(&trainer, manifest, out_dir, log)
}

