//! Score predictions against reference masks, then build the comparison
//! table and a DSC box plot.

use std::fs;

use ndarray::s;
use ugda::corpus::{build_corpus, CorpusConfig};
use ugda::metrics::{boxplot_svg, evaluate_manifest, evaluation_access, make_table, model_label};
use ugda::nifti_io::write_mask;
use ugda::trainer::Variant;
use ugda::Error;

fn main() -> ugda::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let manifest = build_corpus(&CorpusConfig {
        out_dir: dir.path().join("corpus"),
        n_source: 1,
        n_target: 1,
        n_eval: 6,
        ..CorpusConfig::default()
    })?;
    let access = evaluation_access();

    // two fake "models": one clips a few slices, the other a thick slab
    let mut reports = Vec::new();
    for (variant, cut) in [(Variant::SupervisedDual, 3usize), (Variant::Ugda, 1)] {
        let pred_dir = dir.path().join(variant.as_str());
        fs::create_dir_all(&pred_dir).map_err(|e| Error::Io { path: pred_dir.clone(), source: e })?;
        for s in &manifest.evaluation_studies {
            let mut m = access.mask(&manifest.resolve(&s.hidden_mask), &s.study_id)?;
            let z0 = m.voxels.indexed_iter().filter(|(_, &v)| v == 1).map(|((_, _, k), _)| k).min().unwrap_or(0);
            m.voxels.slice_mut(s![.., .., z0..z0 + cut]).fill(0);
            write_mask(&pred_dir.join(format!("{}.nii", s.study_id)), &m)?;
        }
        let mut report = evaluate_manifest(&manifest, &pred_dir, &access)?;
        report.variant = variant;
        report.save(&pred_dir)?;
        reports.push(report);
    }

    let table = make_table(&reports)?;
    println!("{}", table.to_text());
    let series: Vec<_> = reports
        .iter()
        .filter_map(|r| Some((model_label(r.variant).to_string(), r.dsc_quartiles?)))
        .collect();
    let svg = dir.path().join("dsc.svg");
    fs::write(&svg, boxplot_svg(&series)).map_err(|e| Error::Io { path: svg.clone(), source: e })?;
    println!("box plot: {} bytes", fs::metadata(&svg).map_or(0, |m| m.len()));
    Ok(())
}
