//! Acceptance criteria 1 to 10, one line of output each.
//!
//! Select a subset with `UGDA_ACCEPTANCE=1,2,7`. The phantom benchmark
//! (criteria 5 and 6) caches its runs under the cargo target directory keyed
//! by configuration; set `UGDA_BENCH_FRESH=1` to retrain from scratch.

mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use common::*;
use ugda::benchmark::{run_benchmark, seed_checks, BenchmarkConfig, BenchmarkResults};
use ugda::extreme::{extract_extreme_points, mxa, ExtremePointSet, PointSource};
use ugda::heatmap::{render_heatmaps, DEFAULT_SIGMA_VOX};
use ugda::losses::{
    loss_adv, loss_disc, loss_ext, loss_seg, loss_sup, total_loss, BatchRole, LossWeights, SupItem,
    DEFAULT_LAMBDA_ADV,
};
use ugda::metrics::{RunReport, VolumeScore};
use ugda::nifti_io::{read_mask, read_volume, write_mask, write_volume};
use ugda::phantom::simulate_ps;
use ugda::trainer::data::TrainingData;
use ugda::trainer::step::{disc_gradients, forward_batch, main_gradients, Batch, Models, Terms};
use ugda::trainer::{
    adapt_target, evaluate_trained, pretrain_source, run_variant, AccessContext, AccessLog, DataAccess, FileKind,
    LossLog, LrSchedule, TrainConfig, Trainer, Variant,
};
use ugda::volume::{binarize, dice_score, Volume};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

// 1
fn metric_oracles() -> Check {
    let mut r = rng(2024);
    let mut nonempty = 0;
    for case in 0..200 {
        let a = random_mask(&mut r, 32);
        let mut b = a.clone();
        let flip = r.gen_range(0.0..0.2);
        b.voxels.mapv_inplace(|x| if r.gen_bool(flip) { 1 - x } else { x });

        let d = dice_score(&a, &b).map_err(e)?;
        ensure((d - brute_dice(&a, &b)).abs() <= 1e-12, format!("case {case}: dice {d}"))?;

        let p = random_probability(&mut r, a.shape());
        let thr: f32 = r.gen_range(0.05..0.95);
        let m = binarize(&p, thr).map_err(e)?;
        let brute = p.voxels.mapv(|v| u8::from(v >= thr));
        ensure(m.voxels == brute, format!("case {case}: binarize voxels differ"))?;
        ensure(
            m.count() == brute.iter().filter(|&&v| v == 1).count(),
            format!("case {case}: binarize count"),
        )?;

        let oracle = brute_extreme_points(&a);
        match (extract_extreme_points(&a), oracle) {
            (Ok(set), Some(pts)) => {
                ensure(*set.points() == pts, format!("case {case}: extreme points {:?} vs {pts:?}", set.points()))?
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("case {case}: extraction {:?} vs oracle {want:?}", got.is_ok())),
        }

        if let (Some(gt), false) = (oracle, b.is_empty()) {
            nonempty += 1;
            let set = ExtremePointSet::new("g", a.spacing_mm, PointSource::DerivedFromMask, gt).map_err(e)?;
            let got = mxa(&b, &set).map_err(e)?;
            let want = brute_mxa(&b, &gt, a.spacing_mm).expect("nonempty");
            ensure((got - want).abs() <= 1e-6, format!("case {case}: mxa {got} vs {want}"))?;
        }
    }
    Ok(format!("200 random masks, {nonempty} MXA comparisons"))
}

// 2
fn loss_closed_forms() -> Check {
    let seg = loss_seg(&[0.5], &[1.0]).map_err(e)?.value;
    ensure((seg - 1.026480).abs() <= 1e-5, format!("loss_seg single voxel {seg}"))?;
    let logits = vec![0.0; 17];
    let (disc, _, _) = loss_disc(&logits, &logits).map_err(e)?;
    ensure((disc - 1.386294).abs() <= 1e-6, format!("loss_disc uniform {disc}"))?;
    let adv = loss_adv(&logits, &[BatchRole::TARGET_PS, BatchRole::TARGET_UNLABELLED]).map_err(e)?.value;
    ensure((adv - 0.693147).abs() <= 1e-6, format!("loss_adv uniform {adv}"))?;
    ensure(DEFAULT_LAMBDA_ADV == 0.0001, "default adversarial weight")?;
    ensure(LossWeights::default().lambda_adv == 0.0001, "loss weights default")?;
    let (sup, l_adv) = (0.8125, 0.6875);
    let t = total_loss(sup, l_adv, DEFAULT_LAMBDA_ADV);
    ensure(t == sup + 0.0001 * l_adv, format!("total {t}"))?;
    ensure(total_loss(sup, l_adv, 0.0) == sup, "λ = 0 total")?;
    Ok(format!("seg {seg:.6}, disc {disc:.6}, adv {adv:.6}, total {t}"))
}

// 3
fn gradient_flow() -> Check {
    for seed in 0..3u64 {
        let config = toy_config(Variant::Ugda, seed);
        let models = Models::new(&config, &mut rng(seed)).map_err(e)?;
        let samples = toy_samples(seed + 100, config.model_shape, 2, 2, 2);
        let anchored = Batch::new(vec![&samples[0], &samples[1], &samples[2], &samples[3]]).map_err(e)?;
        let free = Batch::new(vec![&samples[0], &samples[1], &samples[4], &samples[5]]).map_err(e)?;

        for (name, batch) in [("anchored", &anchored), ("unlabelled", &free)] {
            let fwd = forward_batch(&models, batch, &config).map_err(e)?;
            let (_, adv) = main_gradients(&models, batch, &fwd, &config, Terms::ADV).map_err(e)?;
            let d = adv.d.as_ref().ok_or("ugda has a discriminator")?;
            ensure(d.is_zero(), format!("seed {seed} {name}: L_adv reached the discriminator"))?;
            let (_, disc) = disc_gradients(&models, batch, &fwd, &config).map_err(e)?;
            ensure(
                disc.s.is_zero() && disc.h.as_ref().is_some_and(|h| h.is_zero()),
                format!("seed {seed} {name}: L_disc reached h or s"),
            )?;
            ensure(
                disc.d.as_ref().is_some_and(|d| !d.is_zero()),
                format!("seed {seed} {name}: discriminator got no gradient"),
            )?;
            let h = adv.h.as_ref().ok_or("ugda has a heatmap network")?;
            if name == "anchored" {
                ensure(h.is_zero(), format!("seed {seed}: L_adv reached h through anchored items"))?;
                ensure(!adv.s.is_zero(), format!("seed {seed}: L_adv did not reach s"))?;
            } else {
                ensure(!h.is_zero(), format!("seed {seed}: L_adv did not reach h for unlabelled items"))?;
            }
        }
    }
    Ok("seeds 0, 1, 2: (a) (b) (c) (d) hold".into())
}

// 4
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(&v);
            v[i] = orig - h;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn finite_differences() -> Check {
    let mut worst: f64 = 0.0;
    for c in 0..10u64 {
        let mut r = rng(700 + c);
        let n = r.gen_range(8..48);
        let normal = Normal::new(0.0, 1.5).unwrap();
        let logits = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(r)).collect() };
        let probs = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(0.05..0.95)).collect() };
        let binary = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_bool(0.4) as u8 as f64).collect() };

        let pred = logits(&mut r, n);
        let target = probs(&mut r, n);
        let g = loss_ext(&pred, &target).unwrap().grad;
        let num = central(&pred, |x| loss_ext(x, &target).unwrap().value);
        worst = worst.max(rel_err(&g, &num));
        ensure(rel_err(&g, &num) < 1e-3, format!("config {c}: L_ext"))?;

        let p = probs(&mut r, n);
        let y = binary(&mut r, n);
        let g = loss_seg(&p, &y).unwrap().grad;
        let num = central(&p, |x| loss_seg(x, &y).unwrap().value);
        worst = worst.max(rel_err(&g, &num));
        ensure(rel_err(&g, &num) < 1e-3, format!("config {c}: L_seg"))?;

        let (ns, nt) = (r.gen_range(4..20), r.gen_range(4..20));
        let both = logits(&mut r, ns + nt);
        let (_, gs, gt) = loss_disc(&both[..ns], &both[ns..]).unwrap();
        let g: Vec<f64> = gs.into_iter().chain(gt).collect();
        let num = central(&both, |x| loss_disc(&x[..ns], &x[ns..]).unwrap().0);
        worst = worst.max(rel_err(&g, &num));
        ensure(rel_err(&g, &num) < 1e-3, format!("config {c}: L_disc"))?;

        let roles = [BatchRole::TARGET_PS, BatchRole::TARGET_UNLABELLED];
        let tl = logits(&mut r, nt);
        let g = loss_adv(&tl, &roles).unwrap().grad;
        let num = central(&tl, |x| loss_adv(x, &roles).unwrap().value);
        worst = worst.max(rel_err(&g, &num));
        ensure(rel_err(&g, &num) < 1e-3, format!("config {c}: L_adv"))?;

        // total objective over a mixed batch: two deep-supervision stages per
        // item plus target logits, flattened into one vector
        let item_roles = [BatchRole::SOURCE, BatchRole::TARGET_PS, BatchRole::TARGET_UNLABELLED];
        let masks: Vec<Vec<f64>> = item_roles.iter().map(|_| binary(&mut r, n)).collect();
        let heats: Vec<Vec<f64>> = item_roles.iter().map(|_| probs(&mut r, n)).collect();
        let mut x = Vec::new();
        for _ in &item_roles {
            x.extend(probs(&mut r, 2 * n));
            x.extend(logits(&mut r, 2 * n));
        }
        x.extend(logits(&mut r, nt));
        let weights = LossWeights::default();
        let objective = |x: &[f64]| -> (f64, Vec<f64>) {
            let items: Vec<SupItem> = item_roles
                .iter()
                .enumerate()
                .map(|(i, role)| {
                    let base = i * 4 * n;
                    SupItem {
                        role: Some(*role),
                        seg_stages: vec![x[base..base + n].to_vec(), x[base + n..base + 2 * n].to_vec()],
                        mask: role.has_mask.then(|| masks[i].clone()),
                        heat_stages: vec![x[base + 2 * n..base + 3 * n].to_vec(), x[base + 3 * n..base + 4 * n].to_vec()],
                        heat_target: role.has_ps.then(|| heats[i].clone()),
                    }
                })
                .collect();
            let sup = loss_sup(&items, &weights).unwrap();
            let off = item_roles.len() * 4 * n;
            let adv = loss_adv(&x[off..], &roles).unwrap();
            let mut g = vec![0.0; x.len()];
            for (i, _) in item_roles.iter().enumerate() {
                let base = i * 4 * n;
                for (s, stage) in sup.d_seg[i].iter().enumerate() {
                    g[base + s * n..base + (s + 1) * n].copy_from_slice(stage);
                }
                for (s, stage) in sup.d_heat[i].iter().enumerate() {
                    g[base + (2 + s) * n..base + (3 + s) * n].copy_from_slice(stage);
                }
            }
            for (k, v) in adv.grad.iter().enumerate() {
                g[off + k] = weights.lambda_adv * v;
            }
            (total_loss(sup.total(), adv.value, weights.lambda_adv), g)
        };
        let (_, g) = objective(&x);
        let num = central(&x, |v| objective(v).0);
        worst = worst.max(rel_err(&g, &num));
        ensure(rel_err(&g, &num) < 1e-3, format!("config {c}: total objective"))?;
    }
    Ok(format!("10 configurations, worst relative error {worst:.2e}"))
}

// 5 and 6
fn bench_dir(cfg: &BenchmarkConfig) -> PathBuf {
    let json = serde_json::to_string(cfg).unwrap();
    let hash = Sha256::digest(json.as_bytes());
    let tag: String = hash[..6].iter().map(|b| format!("{b:02x}")).collect();
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("phantom-bench-{tag}"))
}

fn benchmark() -> &'static Result<BenchmarkResults, String> {
    static RESULTS: OnceLock<Result<BenchmarkResults, String>> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let cfg = BenchmarkConfig::default();
        let dir = bench_dir(&cfg);
        if std::env::var("UGDA_BENCH_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
            fs::remove_dir_all(&dir).map_err(e)?;
        }
        run_benchmark(&dir, &cfg, &AccessLog::default()).map_err(e)
    })
}

fn summary_line(r: &BenchmarkResults, seed: u64) -> String {
    let mut parts = Vec::new();
    for a in r.results.iter().filter(|a| a.seed == seed) {
        if let Some(g) = a.report.aggregates {
            parts.push(format!(
                "{} {:.2}/{:.2}mm/min {:.2}",
                a.arm.label(),
                g.dsc_mean * 100.0,
                g.mxa_mean,
                g.dsc_min * 100.0
            ));
        }
    }
    format!("seed {seed}: {}", parts.join(", "))
}

fn benchmark_ordering() -> Check {
    let r = benchmark().as_ref().map_err(Clone::clone)?;
    let checks = seed_checks(r);
    for c in &checks {
        println!("    {} -> {:?}", summary_line(r, c.seed), c);
    }
    let held = checks.iter().filter(|c| c.ordering_holds()).count();
    ensure(checks.len() == 3, format!("expected 3 seeds, got {}", checks.len()))?;
    ensure(held >= 2, format!("ordering held in {held} of 3 seeds"))?;
    Ok(format!("ordering held in {held} of 3 seeds"))
}

fn fraction_robustness() -> Check {
    let r = benchmark().as_ref().map_err(Clone::clone)?;
    let checks = seed_checks(r);
    let held = checks.iter().filter(|c| c.fraction_robust == Some(true)).count();
    ensure(held >= 2, format!("25% within 2 DSC points of 100% in {held} of 3 seeds"))?;
    Ok(format!("25% within 2 DSC points of 100% in {held} of 3 seeds"))
}

// 7
fn heatmap_properties() -> Check {
    ensure(DEFAULT_SIGMA_VOX == 5.0, "default sigma")?;
    ensure(TrainConfig::default().sigma_vox == 5.0, "training default sigma")?;
    let shape = [40, 40, 30];
    let pts = point_set(
        "h",
        [1.0; 3],
        [[5, 20, 15], [34, 20, 15], [20, 6, 15], [20, 33, 15], [20, 20, 4], [20, 20, 25]],
    );
    let hm = render_heatmaps(&pts, shape, DEFAULT_SIGMA_VOX).map_err(e)?;
    let want = (-0.5f64).exp();
    for (c, p) in pts.points().iter().enumerate() {
        let peak = hm.channels[c][*p] as f64;
        ensure(peak == 1.0, format!("channel {c} peak {peak}"))?;
        for a in 0..3 {
            for dir in [-5i64, 5] {
                let mut q = *p;
                let v = q[a] as i64 + dir;
                if v < 0 || v >= shape[a] as i64 {
                    continue;
                }
                q[a] = v as usize;
                let got = hm.channels[c][q] as f64;
                ensure((got - want).abs() <= 1e-6, format!("channel {c} at distance sigma: {got}"))?;
            }
        }
    }
    Ok(format!("peaks 1.0, value at sigma {want:.6}"))
}

// 8
fn scheduler() -> Check {
    let t = TrainConfig::default();
    let mut s = LrSchedule::new(t.lr_main, t.lr_disc, t.plateau_factor, t.plateau_patience);
    let mut seq: Vec<f64> = (0..10).map(|i| 0.80 + 0.01 * i as f64).collect();
    seq.extend(std::iter::repeat_n(0.85, 15));
    seq.extend((0..15).map(|i| 0.90 + 0.001 * i as f64));
    ensure(seq.len() == 40, "40 epochs")?;
    let mut changes = Vec::new();
    for (epoch, v) in seq.iter().enumerate() {
        let before = s.lr_main;
        s.plateau_step(*v);
        ensure(s.lr_disc == 0.0003, format!("lr_disc changed at epoch {epoch}"))?;
        if s.lr_main != before {
            changes.push((epoch, before, s.lr_main));
        }
    }
    ensure(changes.len() == 1, format!("{} reductions", changes.len()))?;
    let (epoch, from, to) = changes[0];
    ensure(from == 0.003 && to == 0.0003, format!("{from} -> {to}"))?;
    ensure(epoch == 24, format!("reduction at epoch {epoch}"))?;
    Ok(format!("one reduction {from} -> {to} after epoch {}", epoch + 1))
}

// 9
fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let p = dir.path();

    let mut r = rng(9);
    let mut mask = random_mask(&mut r, 24);
    while mask.is_empty() {
        mask = random_mask(&mut r, 24);
    }
    mask.spacing_mm = [0.75, 1.25, 2.5];
    mask.study_id = "m".into();
    let pts = simulate_ps(&mask, 1.0, 3).map_err(e)?;
    let ps_path = p.join("ps.json");
    pts.save(&ps_path).map_err(e)?;
    let loaded = ExtremePointSet::load(&ps_path).map_err(e)?;
    ensure(loaded == pts, "point set round trip")?;
    let again = p.join("ps2.json");
    loaded.save(&again).map_err(e)?;
    ensure(fs::read(&ps_path).map_err(e)? == fs::read(&again).map_err(e)?, "point set bytes")?;

    let mpath = p.join("m.nii");
    write_mask(&mpath, &mask).map_err(e)?;
    let m2 = read_mask(&mpath, "m").map_err(e)?;
    ensure(m2 == mask, "mask round trip")?;
    let m2path = p.join("m2.nii");
    write_mask(&m2path, &m2).map_err(e)?;
    ensure(fs::read(&mpath).map_err(e)? == fs::read(&m2path).map_err(e)?, "mask bytes")?;

    let vol = Volume::new(
        Array3::from_shape_fn(mask.shape(), |_| r.gen_range(-300.0f32..300.0)),
        mask.spacing_mm,
        "v",
    )
    .map_err(e)?;
    let vpath = p.join("v.nii");
    write_volume(&vpath, &vol).map_err(e)?;
    ensure(read_volume(&vpath, "v").map_err(e)? == vol, "volume round trip")?;

    let rows = vec![
        VolumeScore {
            study_id: "a".into(),
            dsc: 0.912345678901,
            mxa_mm: Some(1.0 / 3.0),
            empty_pred_flag: false,
        },
        VolumeScore {
            study_id: "b".into(),
            dsc: 0.0,
            mxa_mm: None,
            empty_pred_flag: true,
        },
    ];
    let report = RunReport::from_rows(Variant::Ugda, 0.25, rows, vec![]);
    let rdir = p.join("report");
    report.save(&rdir).map_err(e)?;
    let back = RunReport::load(&rdir).map_err(e)?;
    ensure(back == report, "report round trip")?;
    let rdir2 = p.join("report2");
    back.save(&rdir2).map_err(e)?;
    for f in [ugda::metrics::REPORT_FILE, ugda::metrics::PER_VOLUME_FILE] {
        ensure(
            fs::read(rdir.join(f)).map_err(e)? == fs::read(rdir2.join(f)).map_err(e)?,
            format!("report file {f} bytes"),
        )?;
    }

    let config = toy_config(Variant::Ugda, 5);
    let data = toy_data(&config, 55);
    let mut log = LossLog::default();
    let mut a = Trainer::new(config.clone()).map_err(e)?;
    for _ in 0..2 {
        a.pretrain_step(&data, &mut log).map_err(e)?;
    }
    a.adapt_step(&data, &mut log).map_err(e)?;
    let ck = p.join("a.ckpt");
    a.save(&ck).map_err(e)?;
    let mut b = Trainer::load(&ck).map_err(e)?;
    let ck2 = p.join("b.ckpt");
    b.save(&ck2).map_err(e)?;
    ensure(fs::read(&ck).map_err(e)? == fs::read(&ck2).map_err(e)?, "checkpoint bytes")?;
    let mut worst: f64 = 0.0;
    for step in 0..3 {
        let la = a.adapt_step(&data, &mut log).map_err(e)?;
        let lb = b.adapt_step(&data, &mut log).map_err(e)?;
        for (x, y) in [(la.total, lb.total), (la.l_d, lb.l_d), (la.l_adv, lb.l_adv), (la.l_seg, lb.l_seg)] {
            worst = worst.max((x - y).abs());
            ensure((x - y).abs() <= 1e-6, format!("resumed step {step}: {x} vs {y}"))?;
        }
    }
    ensure(a.models.fingerprint_main() == b.models.fingerprint_main(), "resumed weights differ")?;
    ensure(a.state == b.state, "resumed state differs")?;
    Ok(format!("all artifacts bit-exact; resumed steps differ by at most {worst:.1e}"))
}

// 10
fn isolation() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let manifest = small_corpus(&dir.path().join("corpus"), 6, 4, 2, 0.5);
    let hidden: HashSet<PathBuf> = manifest
        .evaluation_studies
        .iter()
        .map(|s| fs::canonicalize(manifest.resolve(&s.hidden_mask)).unwrap())
        .collect();
    let log = AccessLog::default();
    let mpath = dir.path().join("corpus/manifest.json");
    for variant in Variant::ALL {
        let mut cfg = toy_config(variant, 1);
        if variant.uses_target_ps() {
            cfg.ps_fraction = 0.5;
        }
        cfg.pretrain_max_epochs = 1;
        cfg.adapt_epochs = 1;
        let out = dir.path().join(format!("run-{variant}"));
        run_variant(&manifest, &mpath, &cfg, &out, &log).map_err(e)?;
    }

    // training must also work with the hidden masks absent altogether
    let hidden_dir = dir.path().join("corpus/eval/hidden_mask");
    let parked = dir.path().join("parked");
    fs::rename(&hidden_dir, &parked).map_err(e)?;
    let cfg = {
        let mut c = toy_config(Variant::Ugda, 2);
        c.ps_fraction = 0.5;
        c.pretrain_max_epochs = 1;
        c.adapt_epochs = 1;
        c
    };
    let train = DataAccess::new(AccessContext::Training, log.clone());
    let trained = (|| -> ugda::Result<Trainer> {
        let data = TrainingData::load(&manifest, &cfg, &train)?;
        let mut ll = LossLog::default();
        let pre = pretrain_source(&data, &cfg, &mut ll)?;
        adapt_target(pre, &data, &cfg, &mut ll)
    })();
    fs::rename(&parked, &hidden_dir).map_err(e)?;
    let trained = trained.map_err(|err| format!("training without hidden masks failed: {err}"))?;
    evaluate_trained(&trained, &manifest, &dir.path().join("run-check"), &log).map_err(e)?;

    let records = log.records();
    let mut eval_reads = 0;
    for rec in &records {
        let Ok(path) = fs::canonicalize(&rec.path) else { continue };
        if hidden.contains(&path) {
            ensure(
                rec.context == AccessContext::Evaluation && rec.kind == FileKind::Mask,
                format!("{:?} opened hidden mask {}", rec.context, rec.path.display()),
            )?;
            eval_reads += 1;
        }
    }
    ensure(eval_reads > 0, "audit saw no evaluation reads at all")?;
    let training_reads = records.iter().filter(|r| r.context == AccessContext::Training).count();
    Ok(format!(
        "{} audited reads ({training_reads} in training), hidden masks opened only by evaluation ({eval_reads})",
        records.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "metric oracle equivalence", metric_oracles),
        (2, "loss closed forms", loss_closed_forms),
        (3, "gradient-flow contract", gradient_flow),
        (4, "finite-difference validation", finite_differences),
        (5, "phantom benchmark ordering", benchmark_ordering),
        (6, "point-set fraction robustness", fraction_robustness),
        (7, "heatmap properties", heatmap_properties),
        (8, "plateau scheduler", scheduler),
        (9, "persistence and resume", persistence),
        (10, "evaluation-mask isolation", isolation),
    ];
    let selected: Option<Vec<u32>> = std::env::var("UGDA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(msg) => println!("criterion {id:>2} PASS  {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1} s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
