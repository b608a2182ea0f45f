mod common;

use std::fs;

use ndarray::Array3;
use proptest::prelude::*;

use common::*;
use ugda::extreme::extract_extreme_points;
use ugda::metrics::{
    boxwhisker_stats, evaluate_run, evaluation_access, make_table, pool_seeds, reference_rows, Aggregates, RunReport,
    Table, VolumeScore, BOXPLOT_FILE, PER_VOLUME_FILE, REPORT_FILE, STD_CONVENTION,
};
use ugda::nifti_io::write_mask;
use ugda::trainer::{AccessContext, DataAccess, Variant};
use ugda::volume::SegmentationMask;
use ugda::Error;

fn row(id: &str, dsc: f64, mxa: f64) -> VolumeScore {
    VolumeScore {
        study_id: id.into(),
        dsc,
        mxa_mm: Some(mxa),
        empty_pred_flag: false,
    }
}

fn report(variant: Variant, frac: f64, dscs: &[f64]) -> RunReport {
    let rows = dscs
        .iter()
        .enumerate()
        .map(|(i, &d)| row(&format!("s{i:02}"), d, 1.0 + i as f64))
        .collect();
    RunReport::from_rows(variant, frac, rows, vec![])
}

fn ball(shape: [usize; 3], c: [f64; 3], r: f64, id: &str) -> SegmentationMask {
    let v = Array3::from_shape_fn(shape, |(i, j, k)| {
        let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        u8::from(d2 <= r * r)
    });
    SegmentationMask::new(v, [1.5, 1.5, 2.0], id).unwrap()
}

#[test]
fn two_studies_mean_and_population_std() {
    let r = RunReport::from_rows(Variant::Ugda, 1.0, vec![row("a", 0.9, 1.0), row("b", 0.95, 3.0)], vec![]);
    let a = r.aggregates.unwrap();
    assert!((a.dsc_mean - 0.925).abs() < 1e-12);
    assert!((a.dsc_std - 0.025).abs() < 1e-12);
    assert!((a.mxa_mean - 2.0).abs() < 1e-12);
    assert!((a.mxa_std - 1.0).abs() < 1e-12);
    assert_eq!(a.dsc_min, 0.9);
    assert_eq!(r.std_convention, STD_CONVENTION);
    assert_eq!(STD_CONVENTION, "population");
}

#[test]
fn quartiles_by_linear_interpolation() {
    let q = boxwhisker_stats(&[5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    let q = boxwhisker_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
    let q = boxwhisker_stats(&[0.7; 6]).unwrap();
    assert!([q.min, q.q1, q.median, q.q3, q.max].iter().all(|&x| x == 0.7));
    assert!(matches!(boxwhisker_stats(&[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluate_run_scores_perfect_flagged_and_missing_studies() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, hidden, ps) = (dir.path().join("pred"), dir.path().join("hidden"), dir.path().join("ps"));
    for d in [&pred, &hidden, &ps] {
        fs::create_dir_all(d).unwrap();
    }
    let shape = [20, 18, 12];
    let a = ball(shape, [9.0, 8.0, 6.0], 5.0, "a");
    let b = ball(shape, [8.0, 9.0, 5.0], 4.0, "b");
    let c = ball(shape, [10.0, 9.0, 6.0], 4.5, "c");
    for m in [&a, &b, &c] {
        write_mask(&hidden.join(format!("{}.nii", m.study_id)), m).unwrap();
    }
    write_mask(&pred.join("a.nii"), &a).unwrap();
    let mut empty = b.clone();
    empty.voxels.fill(0);
    write_mask(&pred.join("b.nii"), &empty).unwrap();
    // c has no prediction; a has a point file equal to its derived points
    extract_extreme_points(&a).unwrap().save(&ps.join("a.json")).unwrap();

    let r = evaluate_run(&pred, &hidden, Some(&ps), &evaluation_access()).unwrap();
    assert_eq!(r.per_volume.len(), 2);
    assert_eq!(r.errors.len(), 1);
    assert_eq!(r.errors[0].study_id, "c");
    assert_eq!(r.empty_pred_count, 1);
    let flagged = r.per_volume.iter().find(|v| v.study_id == "b").unwrap();
    assert!(flagged.empty_pred_flag && flagged.mxa_mm.is_none() && flagged.dsc == 0.0);
    let a_row = r.per_volume.iter().find(|v| v.study_id == "a").unwrap();
    assert_eq!((a_row.dsc, a_row.mxa_mm), (1.0, Some(0.0)));
    let agg = r.aggregates.unwrap();
    assert_eq!((agg.dsc_mean, agg.mxa_mean, agg.dsc_min), (1.0, 0.0, 1.0));
    r.validate().unwrap();
}

#[test]
fn hidden_masks_need_the_evaluation_context() {
    let dir = tempfile::tempdir().unwrap();
    for ctx in [AccessContext::Training, AccessContext::Inference] {
        let err = evaluate_run(dir.path(), dir.path(), None, &DataAccess::untracked(ctx)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{ctx:?}");
    }
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = report(Variant::AdaMaskWithPs, 0.5, &[0.91, 0.87, 0.93]);
    r.per_volume.push(VolumeScore {
        study_id: "zz".into(),
        dsc: 0.0,
        mxa_mm: None,
        empty_pred_flag: true,
    });
    let r = RunReport::from_rows(r.variant, r.ps_fraction, r.per_volume, vec![]);
    r.save(dir.path()).unwrap();
    for f in [REPORT_FILE, PER_VOLUME_FILE, BOXPLOT_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(RunReport::load(dir.path()).unwrap(), r);
    assert_eq!(RunReport::load(&dir.path().join(REPORT_FILE)).unwrap(), r);
    let csv = ugda::metrics::read_per_volume_csv(&dir.path().join(PER_VOLUME_FILE)).unwrap();
    assert_eq!(csv, r.per_volume);
    let svg = fs::read_to_string(dir.path().join(BOXPLOT_FILE)).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn tampered_aggregates_fail_validation() {
    let mut r = report(Variant::Ugda, 1.0, &[0.9, 0.8]);
    r.validate().unwrap();
    r.aggregates = Some(Aggregates {
        dsc_mean: 0.86,
        ..r.aggregates.unwrap()
    });
    assert!(r.validate().is_err());
}

#[test]
fn reference_table_has_seven_rows() {
    let t = Table { rows: reference_rows() };
    let text = t.to_text();
    assert_eq!(t.rows.len(), 7);
    for needle in ["93.0 ± 3.2", "93.1 ± 2.4", "94.8 ± 1.8", "95.5 ± 1.0", "95.8 ± 0.8", "96.0 ± 0.9", "96.1 ± 0.8"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
    for needle in ["4.3 ± 1.2", "3.9 ± 1.2", "3.4 ± 1.6", "2.5 ± 1.0", "1.7 ± 0.8", "1.4 ± 0.9", "1.1 ± 0.9"] {
        assert!(text.contains(needle), "{needle}");
    }
    let csv = t.to_csv().unwrap();
    assert_eq!(Table::from_csv(&csv).unwrap(), t);
    assert_eq!(t.to_markdown().lines().count(), 9);
}

#[test]
fn single_report_table() {
    let t = make_table(&[report(Variant::Ugda, 0.25, &[0.9, 0.92])]).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0].ps_percent, Some(25.0));
    assert!((t.rows[0].dsc_mean - 91.0).abs() < 1e-9);
    let csv = t.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(Table::from_csv(&csv).unwrap(), t);
    assert_eq!(t.to_text().lines().count(), 2);

    let t = make_table(&[report(Variant::SupervisedDual, 1.0, &[0.8])]).unwrap();
    assert_eq!(t.rows[0].ps_percent, None);
    assert!(make_table(&[]).is_err());
    assert!(make_table(&[report(Variant::Ugda, 1.0, &[0.9]), report(Variant::Ugda, 1.0, &[0.8])]).is_err());
}

#[test]
fn pooling_merges_seeds_per_arm() {
    let mut a = report(Variant::Ugda, 1.0, &[0.9, 0.8]);
    a.seed = 0;
    let mut b = report(Variant::Ugda, 1.0, &[0.7]);
    b.seed = 1;
    let c = report(Variant::Dextr, 1.0, &[0.6]);
    let pooled = pool_seeds(&[a, b, c]);
    assert_eq!(pooled.len(), 2);
    let u = pooled.iter().find(|r| r.variant == Variant::Ugda).unwrap();
    assert_eq!(u.per_volume.len(), 3);
    assert!((u.aggregates.unwrap().dsc_mean - 0.8).abs() < 1e-12);
    assert!(make_table(&pooled).is_ok());
}

fn arb_rows() -> impl Strategy<Value = Vec<VolumeScore>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..40.0, prop::bool::weighted(0.15)), 1..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (d, m, empty))| VolumeScore {
                study_id: format!("v{i:03}"),
                dsc: if empty { 0.0 } else { d },
                mxa_mm: (!empty).then_some(m),
                empty_pred_flag: empty,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn aggregates_ignore_row_order(rows in arb_rows(), seed in any::<u64>()) {
        let a = RunReport::from_rows(Variant::Ugda, 1.0, rows.clone(), vec![]);
        let mut shuffled = rows;
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = RunReport::from_rows(Variant::Ugda, 1.0, shuffled, vec![]);
        match (a.aggregates, b.aggregates) {
            (Some(x), Some(y)) => {
                prop_assert!((x.dsc_mean - y.dsc_mean).abs() < 1e-12);
                prop_assert!((x.dsc_std - y.dsc_std).abs() < 1e-12);
                prop_assert!((x.mxa_mean - y.mxa_mean).abs() < 1e-12);
                prop_assert!((x.mxa_std - y.mxa_std).abs() < 1e-12);
                prop_assert_eq!(x.dsc_min, y.dsc_min);
            }
            (None, None) => {}
            _ => prop_assert!(false, "aggregates present in only one ordering"),
        }
        prop_assert_eq!(a.dsc_quartiles, b.dsc_quartiles);
    }

    #[test]
    fn aggregates_recompute_from_rows(rows in arb_rows()) {
        let r = RunReport::from_rows(Variant::Ugda, 1.0, rows.clone(), vec![]);
        r.validate().unwrap();
        let kept: Vec<&VolumeScore> = rows.iter().filter(|v| !v.empty_pred_flag).collect();
        prop_assert_eq!(r.empty_pred_count, rows.len() - kept.len());
        if let Some(a) = r.aggregates {
            let n = kept.len() as f64;
            let mean = kept.iter().map(|v| v.dsc).sum::<f64>() / n;
            let std = (kept.iter().map(|v| (v.dsc - mean).powi(2)).sum::<f64>() / n).sqrt();
            let min = kept.iter().map(|v| v.dsc).fold(f64::INFINITY, f64::min);
            prop_assert!((a.dsc_mean - mean).abs() < 1e-9);
            prop_assert!((a.dsc_std - std).abs() < 1e-9);
            prop_assert_eq!(a.dsc_min, min);
            prop_assert!(a.mxa_mean >= 0.0 && (0.0..=1.0).contains(&a.dsc_mean));
            let json = serde_json::to_string(&r).unwrap();
            let back: RunReport = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, r);
        } else {
            prop_assert!(kept.is_empty());
        }
    }

    #[test]
    fn quartiles_are_ordered(xs in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let q = boxwhisker_stats(&xs).unwrap();
        prop_assert!(q.min <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= q.max);
        prop_assert_eq!(q.min, xs.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(q.max, xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn random_masks_score_like_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, hidden) = (dir.path().join("pred"), dir.path().join("hidden"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&hidden).unwrap();
    let mut r = rng(5);
    let mut want = Vec::new();
    for i in 0..6 {
        let mut gt = random_mask(&mut r, 16);
        while gt.is_empty() {
            gt = random_mask(&mut r, 16);
        }
        gt.spacing_mm = [1.0, 1.5, 2.5];
        let mut p = gt.clone();
        p.voxels.mapv_inplace(|x| if rand::Rng::gen_bool(&mut r, 0.1) { 1 - x } else { x });
        let id = format!("r{i}");
        write_mask(&hidden.join(format!("{id}.nii")), &gt).unwrap();
        write_mask(&pred.join(format!("{id}.nii")), &p).unwrap();
        let pts = brute_extreme_points(&gt).unwrap();
        want.push((brute_dice(&p, &gt), brute_mxa(&p, &pts, gt.spacing_mm)));
    }
    let rep = evaluate_run(&pred, &hidden, None, &evaluation_access()).unwrap();
    for (row, (d, m)) in rep.per_volume.iter().zip(&want) {
        assert!((row.dsc - d).abs() < 1e-12);
        match (row.mxa_mm, m) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}
