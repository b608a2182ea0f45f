//! Phantom benchmark: generate a corpus and compare the training variants
//! over several seeds.
//!
//! Per seed, source pretraining runs once and is shared by every variant
//! that starts from it (supervised dual network, both adaptive variants and
//! every point-set fraction); DEXTR pretrains separately because it has no
//! heatmap network.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus, CorpusConfig, CorpusManifest};
use crate::error::{Error, Result};
use crate::metrics::RunReport;
use crate::trainer::data::TrainingData;
use crate::trainer::{
    adapt_target, evaluate_trained, pretrain_source, AccessContext, AccessLog, DataAccess, LossLog, TrainConfig,
    Trainer, Variant,
};

/// One trained configuration: a variant at a point-set fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub variant: Variant,
    pub ps_fraction: f64,
}

impl Arm {
    pub fn new(variant: Variant, ps_fraction: f64) -> Self {
        Self { variant, ps_fraction }
    }

    pub fn label(&self) -> String {
        format!("{}_{:.0}", self.variant, self.ps_fraction * 100.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub corpus: CorpusConfig,
    /// Shared training settings; variant, fraction and seed are set per arm.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.sigma_vox = BENCH_SIGMA_VOX;
        train.losses.lambda_adv = BENCH_LAMBDA_ADV;
        train.pretrain_max_epochs = 200;
        train.adapt_epochs = 10;
        Self {
            corpus: CorpusConfig::default(),
            train,
            seeds: vec![0, 1, 2],
            arms: vec![
                Arm::new(Variant::SupervisedDual, 1.0),
                Arm::new(Variant::Dextr, 1.0),
                Arm::new(Variant::AdaMaskWithPs, 1.0),
                Arm::new(Variant::Ugda, 1.0),
                Arm::new(Variant::Ugda, 0.25),
            ],
        }
    }
}

/// Heatmap width on the benchmark's 32×32×16 model grid.
pub const BENCH_SIGMA_VOX: f64 = 2.0;
/// Adversarial weight used on the benchmark.
pub const BENCH_LAMBDA_ADV: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub report: RunReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResults {
    pub results: Vec<ArmResult>,
}

impl BenchmarkResults {
    pub fn get(&self, seed: u64, arm: Arm) -> Option<&RunReport> {
        self.results
            .iter()
            .find(|r| r.seed == seed && r.arm == arm)
            .map(|r| &r.report)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

fn arm_config(base: &TrainConfig, arm: Arm, seed: u64) -> TrainConfig {
    let mut c = base.clone().with_variant(arm.variant);
    c.ps_fraction = arm.ps_fraction;
    c.seed = seed;
    c
}

/// Corpus under `dir/corpus`, built unless a manifest is already there.
pub fn ensure_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusManifest> {
    let root = dir.join("corpus");
    let manifest = root.join("manifest.json");
    if manifest.exists() {
        return CorpusManifest::load(&manifest);
    }
    let cfg = CorpusConfig {
        out_dir: root,
        ..cfg.clone()
    };
    build_corpus(&cfg)
}

/// Run every arm for every seed under `dir`. Arms whose report already
/// exists are loaded instead of retrained.
pub fn run_benchmark(dir: &Path, cfg: &BenchmarkConfig, log: &AccessLog) -> Result<BenchmarkResults> {
    if cfg.arms.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::invalid("benchmark needs at least one arm and one seed"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ensure_corpus(dir, &cfg.corpus)?;
    let train_access = DataAccess::new(AccessContext::Training, log.clone());
    let mut out = BenchmarkResults::default();
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        let pre_path = seed_dir.join("pretrain.ckpt");
        let mut pre_seconds = 0.0;
        for &arm in &cfg.arms {
            let run_dir = seed_dir.join(arm.label());
            let report_path = run_dir.join(crate::metrics::REPORT_FILE);
            if report_path.exists() {
                let report = RunReport::load(&report_path)?;
                out.results.push(ArmResult {
                    arm,
                    seed,
                    report,
                    seconds: 0.0,
                });
                continue;
            }
            let config = arm_config(&cfg.train, arm, seed);
            let t = Instant::now();
            let mut loss_log = LossLog::to_file(&seed_dir.join(format!("{}_loss.csv", arm.label())))?;
            let trainer = match arm.variant {
                Variant::Dextr => {
                    let data = TrainingData::load(&manifest, &config, &train_access)?;
                    pretrain_source(&data, &config, &mut loss_log)?
                }
                v => {
                    if !pre_path.exists() {
                        let pre_cfg = arm_config(&cfg.train, Arm::new(Variant::SupervisedDual, 1.0), seed);
                        let data = TrainingData::load(&manifest, &pre_cfg, &train_access)?;
                        let tp = Instant::now();
                        let mut pre_log = LossLog::to_file(&seed_dir.join("pretrain_loss.csv"))?;
                        pretrain_source(&data, &pre_cfg, &mut pre_log)?.save(&pre_path)?;
                        pre_seconds = tp.elapsed().as_secs_f64();
                    }
                    let pre = Trainer::load(&pre_path)?;
                    if v.adapts() {
                        let data = TrainingData::load(&manifest, &config, &train_access)?;
                        adapt_target(pre, &data, &config, &mut loss_log)?
                    } else {
                        pre
                    }
                }
            };
            fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            trainer.save(&run_dir.join(crate::trainer::CHECKPOINT_FILE))?;
            let report = evaluate_trained(&trainer, &manifest, &run_dir, log)?;
            let mut seconds = t.elapsed().as_secs_f64();
            if arm.variant == Variant::SupervisedDual {
                seconds += pre_seconds;
            }
            log::info!(
                "seed {seed} {}: DSC {:.4} MXA {:.2} mm ({seconds:.0} s)",
                arm.label(),
                report.aggregates.map_or(f64::NAN, |a| a.dsc_mean),
                report.aggregates.map_or(f64::NAN, |a| a.mxa_mean)
            );
            out.results.push(ArmResult {
                arm,
                seed,
                report,
                seconds,
            });
        }
    }
    let summary = dir.join("results.json");
    fs::write(&summary, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&summary, e))?;
    Ok(out)
}

/// The ordering checks of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedChecks {
    pub seed: u64,
    /// DSC(ugda) > DSC(ada_mask_with_ps) > DSC(supervised_dual).
    pub dsc_ordering: bool,
    /// MXA(ugda) < MXA(dextr).
    pub mxa_vs_dextr: bool,
    /// Worst-case DSC(ugda) >= worst-case DSC(supervised_dual).
    pub worst_case: bool,
    /// DSC(ugda at the lowest fraction) >= DSC(ugda at 100%) - 0.02.
    pub fraction_robust: Option<bool>,
}

impl SeedChecks {
    pub fn ordering_holds(&self) -> bool {
        self.dsc_ordering && self.mxa_vs_dextr && self.worst_case
    }
}

/// Evaluate the comparisons for every seed that has all needed arms.
pub fn seed_checks(r: &BenchmarkResults) -> Vec<SeedChecks> {
    let agg = |seed, arm| r.get(seed, arm).and_then(|rep| rep.aggregates);
    let full = |v| Arm::new(v, 1.0);
    let low = r
        .results
        .iter()
        .filter(|a| a.arm.variant == Variant::Ugda && a.arm.ps_fraction < 1.0)
        .map(|a| a.arm)
        .min_by(|a, b| a.ps_fraction.total_cmp(&b.ps_fraction));
    r.seeds()
        .into_iter()
        .filter_map(|seed| {
            let ugda = agg(seed, full(Variant::Ugda))?;
            let ada = agg(seed, full(Variant::AdaMaskWithPs))?;
            let sup = agg(seed, full(Variant::SupervisedDual))?;
            let dextr = agg(seed, full(Variant::Dextr))?;
            Some(SeedChecks {
                seed,
                dsc_ordering: ugda.dsc_mean > ada.dsc_mean && ada.dsc_mean > sup.dsc_mean,
                mxa_vs_dextr: ugda.mxa_mean < dextr.mxa_mean,
                worst_case: ugda.dsc_min >= sup.dsc_min,
                fraction_robust: low
                    .and_then(|arm| agg(seed, arm))
                    .map(|l| l.dsc_mean >= ugda.dsc_mean - 0.02),
            })
        })
        .collect()
}

/// Where [`run_benchmark`] keeps a seed's arm outputs.
pub fn arm_dir(dir: &Path, seed: u64, arm: Arm) -> PathBuf {
    dir.join(format!("seed{seed}")).join(arm.label())
}
