//! Evaluation reports: per-volume DSC and MXA, aggregates, quartiles,
//! comparison tables and box plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::extreme::{extract_extreme_points, mxa};
use crate::trainer::{AccessContext, DataAccess, Variant};
use crate::volume::dice_score;

pub const REPORT_FILE: &str = "report.json";
pub const PER_VOLUME_FILE: &str = "per_volume.csv";
pub const BOXPLOT_FILE: &str = "dsc_boxplot.svg";

/// Standard deviations divide by N.
pub const STD_CONVENTION: &str = "population";

/// Scores of one evaluation volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub study_id: String,
    pub dsc: f64,
    /// `None` when the prediction is empty.
    pub mxa_mm: Option<f64>,
    pub empty_pred_flag: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub dsc_min: f64,
    pub mxa_mean: f64,
    pub mxa_std: f64,
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// A study that could not be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyError {
    pub study_id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub ps_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub per_volume: Vec<VolumeScore>,
    /// Over rows without the empty-prediction flag; `None` if there are none.
    pub aggregates: Option<Aggregates>,
    pub dsc_quartiles: Option<Quartiles>,
    /// Number of flagged rows left out of the aggregates.
    pub empty_pred_count: usize,
    pub errors: Vec<StudyError>,
    pub std_convention: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Linear interpolation between order statistics at `p ∈ [0, 1]`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn boxwhisker_stats(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::invalid("box-and-whisker statistics need at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("box-and-whisker statistics need finite values"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

impl Aggregates {
    /// Aggregates over unflagged rows.
    pub fn from_rows(rows: &[VolumeScore]) -> Option<Aggregates> {
        let kept: Vec<&VolumeScore> = rows.iter().filter(|r| !r.empty_pred_flag).collect();
        if kept.is_empty() {
            return None;
        }
        let dsc: Vec<f64> = kept.iter().map(|r| r.dsc).collect();
        let mxa: Vec<f64> = kept.iter().filter_map(|r| r.mxa_mm).collect();
        let (dsc_mean, dsc_std) = mean_std(&dsc);
        let (mxa_mean, mxa_std) = mean_std(&mxa);
        Some(Aggregates {
            dsc_mean,
            dsc_std,
            dsc_min: dsc.iter().copied().fold(f64::INFINITY, f64::min),
            mxa_mean,
            mxa_std,
        })
    }
}

impl RunReport {
    pub fn from_rows(variant: Variant, ps_fraction: f64, mut per_volume: Vec<VolumeScore>, errors: Vec<StudyError>) -> Self {
        per_volume.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        let dsc: Vec<f64> = per_volume.iter().filter(|r| !r.empty_pred_flag).map(|r| r.dsc).collect();
        RunReport {
            variant,
            ps_fraction,
            seed: 0,
            aggregates: Aggregates::from_rows(&per_volume),
            dsc_quartiles: boxwhisker_stats(&dsc).ok(),
            empty_pred_count: per_volume.iter().filter(|r| r.empty_pred_flag).count(),
            per_volume,
            errors,
            std_convention: STD_CONVENTION.to_string(),
        }
    }

    /// Schema checks plus agreement of the stored aggregates with the rows.
    pub fn validate(&self) -> Result<()> {
        for r in &self.per_volume {
            if !(0.0..=1.0).contains(&r.dsc) {
                return Err(Error::invalid(format!("{}: DSC {} outside [0, 1]", r.study_id, r.dsc)));
            }
            match (r.mxa_mm, r.empty_pred_flag) {
                (Some(m), false) if m >= 0.0 && m.is_finite() => {}
                (None, true) => {}
                _ => return Err(Error::invalid(format!("{}: inconsistent MXA / empty flag", r.study_id))),
            }
        }
        if self.std_convention != STD_CONVENTION {
            return Err(Error::invalid(format!("unknown std convention {:?}", self.std_convention)));
        }
        let fresh = Aggregates::from_rows(&self.per_volume);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        let ok = match (fresh, self.aggregates) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                close(a.dsc_mean, b.dsc_mean)
                    && close(a.dsc_std, b.dsc_std)
                    && close(a.dsc_min, b.dsc_min)
                    && close(a.mxa_mean, b.mxa_mean)
                    && close(a.mxa_std, b.mxa_std)
            }
            _ => false,
        };
        if !ok {
            return Err(Error::invalid("stored aggregates disagree with per-volume rows"));
        }
        Ok(())
    }

    pub fn worst_case_dsc(&self) -> Option<f64> {
        self.aggregates.map(|a| a.dsc_min)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_FILE);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(PER_VOLUME_FILE);
        let mut w = csv::Writer::from_path(&csv_path)?;
        for r in &self.per_volume {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        if let Some(q) = self.dsc_quartiles {
            let svg = dir.join(BOXPLOT_FILE);
            let label = format!("{} ({:.0}%)", self.variant, self.ps_fraction * 100.0);
            fs::write(&svg, boxplot_svg(&[(label, q)])).map_err(|e| Error::io(&svg, e))?;
        }
        Ok(())
    }

    /// Load `report.json` from a run directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let r: RunReport = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }
}

/// Parse a per-volume CSV written by [`RunReport::save`].
pub fn read_per_volume_csv(path: &Path) -> Result<Vec<VolumeScore>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn score_study(
    study_id: &str,
    pred_path: &Path,
    mask_path: &Path,
    ps_path: Option<&Path>,
    access: &DataAccess,
) -> Result<VolumeScore> {
    if !pred_path.exists() {
        return Err(Error::invalid(format!("missing prediction {}", pred_path.display())));
    }
    let pred = access.mask(pred_path, study_id)?;
    let gt = access.mask(mask_path, study_id)?;
    let dsc = dice_score(&pred, &gt)?;
    let points = match ps_path {
        Some(p) => access.points(p)?,
        None => extract_extreme_points(&gt)?,
    };
    if pred.is_empty() {
        return Ok(VolumeScore {
            study_id: study_id.to_string(),
            dsc,
            mxa_mm: None,
            empty_pred_flag: true,
        });
    }
    Ok(VolumeScore {
        study_id: study_id.to_string(),
        dsc,
        mxa_mm: Some(mxa(&pred, &points)?),
        empty_pred_flag: false,
    })
}

fn collect(jobs: Vec<(String, PathBuf, PathBuf, Option<PathBuf>)>, access: &DataAccess) -> (Vec<VolumeScore>, Vec<StudyError>) {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (id, pred, mask, ps) in jobs {
        match score_study(&id, &pred, &mask, ps.as_deref(), access) {
            Ok(r) => rows.push(r),
            Err(e) => errors.push(StudyError {
                study_id: id,
                message: e.to_string(),
            }),
        }
    }
    (rows, errors)
}

fn check_context(access: &DataAccess) -> Result<()> {
    if access.context != AccessContext::Evaluation {
        return Err(Error::Contract(format!(
            "hidden masks are only readable in the evaluation context, not {:?}",
            access.context
        )));
    }
    Ok(())
}

/// Score every `<id>.nii` in `hidden_mask_dir` against `<pred_dir>/<id>.nii`.
/// Reference points come from `<ps_dir>/<id>.json` when present, otherwise
/// they are extracted from the hidden mask. The report's variant defaults to
/// `ugda`; callers overwrite it.
pub fn evaluate_run(pred_dir: &Path, hidden_mask_dir: &Path, ps_dir: Option<&Path>, access: &DataAccess) -> Result<RunReport> {
    check_context(access)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(hidden_mask_dir).map_err(|e| Error::io(hidden_mask_dir, e))? {
        let p = entry.map_err(|e| Error::io(hidden_mask_dir, e))?.path();
        if p.extension().is_some_and(|e| e == "nii") {
            ids.push(crate::nifti_io::study_id_from_path(&p));
        }
    }
    ids.sort();
    let jobs = ids
        .into_iter()
        .map(|id| {
            let ps = ps_dir.map(|d| d.join(format!("{id}.json"))).filter(|p| p.exists());
            (
                id.clone(),
                pred_dir.join(format!("{id}.nii")),
                hidden_mask_dir.join(format!("{id}.nii")),
                ps,
            )
        })
        .collect();
    let (rows, errors) = collect(jobs, access);
    Ok(RunReport::from_rows(Variant::Ugda, 1.0, rows, errors))
}

/// Score the manifest's evaluation studies against `<pred_dir>/<id>.nii`.
pub fn evaluate_manifest(manifest: &CorpusManifest, pred_dir: &Path, access: &DataAccess) -> Result<RunReport> {
    check_context(access)?;
    let jobs = manifest
        .evaluation_studies
        .iter()
        .map(|s| {
            let ps = Some(manifest.resolve(&s.ps)).filter(|p| p.exists());
            (
                s.study_id.clone(),
                pred_dir.join(format!("{}.nii", s.study_id)),
                manifest.resolve(&s.hidden_mask),
                ps,
            )
        })
        .collect();
    let (rows, errors) = collect(jobs, access);
    Ok(RunReport::from_rows(Variant::Ugda, 1.0, rows, errors))
}

/// Pool reports of the same (variant, fraction) from several seeds into one,
/// prefixing study ids with the seed.
pub fn pool_seeds(reports: &[RunReport]) -> Vec<RunReport> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.variant.as_str().to_string(), r.ps_fraction.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            if g.len() == 1 {
                return g[0].clone();
            }
            let tag = |r: &RunReport, id: &str| format!("s{}/{id}", r.seed);
            let rows = g
                .iter()
                .flat_map(|r| {
                    r.per_volume.iter().map(|v| VolumeScore {
                        study_id: tag(r, &v.study_id),
                        ..v.clone()
                    })
                })
                .collect();
            let errors = g
                .iter()
                .flat_map(|r| {
                    r.errors.iter().map(|e| StudyError {
                        study_id: tag(r, &e.study_id),
                        message: e.message.clone(),
                    })
                })
                .collect();
            RunReport::from_rows(g[0].variant, g[0].ps_fraction, rows, errors)
        })
        .collect()
}

/// One row of a comparison table. DSC values are in percent, MXA in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "Model")]
    pub model: String,
    /// Percentage of target studies with point sets; `None` when the
    /// variant does not use them.
    #[serde(rename = "%PSs")]
    pub ps_percent: Option<f64>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub mxa_mean: f64,
    pub mxa_std: f64,
}

pub fn model_label(v: Variant) -> &'static str {
    match v {
        Variant::SupervisedDual => "dual FCN",
        Variant::Dextr => "DEXTR",
        Variant::AdaMaskNoPs => "mask-ADA (no PS)",
        Variant::AdaMaskWithPs => "mask-ADA (w PS)",
        Variant::Ugda => "UGDA",
    }
}

/// Reference scores from a full-scale CT evaluation, shown next to phantom
/// results for context:
///
/// | Model            | %PSs | DSC        | MXA (mm) |
/// |------------------|------|------------|----------|
/// | dual FCN         |      | 93.0 ± 3.2 | 4.3 ± 1.2 |
/// | DEXTR            |      | 93.1 ± 2.4 | 3.9 ± 1.2 |
/// | mask-ADA (no PS) |      | 94.8 ± 1.8 | 3.4 ± 1.6 |
/// | mask-ADA (w PS)  |      | 95.5 ± 1.0 | 2.5 ± 1.0 |
/// | UGDA             | 25   | 95.8 ± 0.8 | 1.7 ± 0.8 |
/// | UGDA             | 50   | 96.0 ± 0.9 | 1.4 ± 0.9 |
/// | UGDA             | 100  | 96.1 ± 0.8 | 1.1 ± 0.9 |
///
/// The UGDA worst case there is 94.9.
pub fn reference_rows() -> Vec<TableRow> {
    let row = |model: &str, ps: Option<f64>, d: (f64, f64), m: (f64, f64)| TableRow {
        model: model.to_string(),
        ps_percent: ps,
        dsc_mean: d.0,
        dsc_std: d.1,
        mxa_mean: m.0,
        mxa_std: m.1,
    };
    vec![
        row("dual FCN", None, (93.0, 3.2), (4.3, 1.2)),
        row("DEXTR", None, (93.1, 2.4), (3.9, 1.2)),
        row("mask-ADA (no PS)", None, (94.8, 1.8), (3.4, 1.6)),
        row("mask-ADA (w PS)", None, (95.5, 1.0), (2.5, 1.0)),
        row("UGDA", Some(25.0), (95.8, 0.8), (1.7, 0.8)),
        row("UGDA", Some(50.0), (96.0, 0.9), (1.4, 0.9)),
        row("UGDA", Some(100.0), (96.1, 0.8), (1.1, 0.9)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub rows: Vec<TableRow>,
}

/// One row per (variant, fraction); duplicates are rejected. Variants that
/// ignore point sets show no percentage. Reports without aggregates are
/// skipped.
pub fn make_table(reports: &[RunReport]) -> Result<Table> {
    if reports.is_empty() {
        return Err(Error::invalid("a table needs at least one report"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::new();
    for r in reports {
        if !seen.insert((r.variant, r.ps_fraction.to_bits())) {
            return Err(Error::invalid(format!(
                "duplicate row for {} at {}% point sets",
                r.variant,
                r.ps_fraction * 100.0
            )));
        }
        let Some(a) = r.aggregates else { continue };
        rows.push(TableRow {
            model: model_label(r.variant).to_string(),
            ps_percent: r.variant.uses_target_ps().then_some(r.ps_fraction * 100.0),
            dsc_mean: a.dsc_mean * 100.0,
            dsc_std: a.dsc_std * 100.0,
            mxa_mean: a.mxa_mean,
            mxa_std: a.mxa_std,
        });
    }
    Ok(Table { rows })
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<TableRow>, _>>()?;
        Ok(Table { rows })
    }

    fn cells(&self) -> Vec<[String; 4]> {
        let mut out = vec![[
            "Model".to_string(),
            "%PSs".to_string(),
            "Mean DSC ± std".to_string(),
            "Mean MXA ± std".to_string(),
        ]];
        for r in &self.rows {
            out.push([
                r.model.clone(),
                r.ps_percent.map_or(String::new(), |p| format!("{p:.0}")),
                format!("{:.1} ± {:.1}", r.dsc_mean, r.dsc_std),
                format!("{:.1} ± {:.1}", r.mxa_mean, r.mxa_std),
            ]);
        }
        out
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut width = [0usize; 4];
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(width)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let cells = self.cells();
        let mut s = String::new();
        for (i, row) in cells.iter().enumerate() {
            let _ = writeln!(s, "| {} |", row.join(" | "));
            if i == 0 {
                s.push_str("|---|---|---|---|\n");
            }
        }
        s
    }
}

/// Horizontal box-and-whisker plot as a standalone SVG document; the value
/// axis spans the data range.
pub fn boxplot_svg(series: &[(String, Quartiles)]) -> String {
    let (w, row_h, left, right) = (640.0, 40.0, 170.0, 30.0);
    let h = row_h * series.len() as f64 + 50.0;
    let lo = series.iter().map(|(_, q)| q.min).fold(f64::INFINITY, f64::min);
    let hi = series.iter().map(|(_, q)| q.max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.01, hi + 0.01) };
    let x = |v: f64| left + (v - lo) / (hi - lo) * (w - left - right);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    for (i, (label, q)) in series.iter().enumerate() {
        let cy = 20.0 + row_h * i as f64 + row_h / 2.0;
        let (y0, y1) = (cy - row_h * 0.3, cy + row_h * 0.3);
        let _ = writeln!(s, r#"<text x="5" y="{:.1}">{}</text>"#, cy + 4.0, xml_escape(label));
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{cy:.1}" x2="{:.2}" y2="{cy:.1}" stroke="black"/>"#,
            x(q.min),
            x(q.q1)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{cy:.1}" x2="{:.2}" y2="{cy:.1}" stroke="black"/>"#,
            x(q.q3),
            x(q.max)
        );
        for v in [q.min, q.max] {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.1}" x2="{0:.2}" y2="{2:.1}" stroke="black"/>"#,
                x(v),
                cy - row_h * 0.15,
                cy + row_h * 0.15
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{y0:.1}" width="{:.2}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            x(q.q1),
            (x(q.q3) - x(q.q1)).max(0.5),
            y1 - y0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{y0:.1}" x2="{0:.2}" y2="{y1:.1}" stroke="black" stroke-width="2"/>"#,
            x(q.median)
        );
    }
    let axis_y = h - 20.0;
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{axis_y}">{lo:.3}</text><text x="{:.1}" y="{axis_y}" text-anchor="end">{hi:.3}</text>"#,
        w - right
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Untracked evaluation-context access, for ad hoc scoring.
pub fn evaluation_access() -> DataAccess {
    DataAccess::untracked(AccessContext::Evaluation)
}
