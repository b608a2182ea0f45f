//! Generate a small source/target phantom corpus and summarise the manifest.
//!
//! ```text
//! cargo run --release --example phantom_corpus -- /tmp/phantoms
//! ```

use std::path::PathBuf;

use ugda::corpus::{build_corpus, CorpusConfig};
use ugda::nifti_io::{read_mask, read_volume};
use ugda::volume::dice_score;

fn main() -> ugda::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ugda-phantoms"));
    let cfg = CorpusConfig {
        out_dir: out.clone(),
        n_source: 6,
        n_target: 8,
        n_eval: 3,
        ps_fraction: 0.5,
        ..CorpusConfig::default()
    };
    let m = build_corpus(&cfg)?;
    println!("corpus in {}", out.display());
    println!(
        "{} source, {} target with points, {} unlabelled, {} evaluation",
        m.source_studies.len(),
        m.target_ps_studies.len(),
        m.target_unlabelled_studies.len(),
        m.evaluation_studies.len()
    );
    let s = &m.source_studies[0];
    let v = read_volume(&m.resolve(&s.volume), s.study_id.clone())?;
    let mask = read_mask(&m.resolve(&s.mask), s.study_id.clone())?;
    let organ: Vec<f32> = v.voxels.iter().zip(mask.voxels.iter()).filter(|(_, &m)| m == 1).map(|(&x, _)| x).collect();
    println!(
        "{}: shape {:?}, spacing {:?} mm, organ {} voxels, mean {:.0} HU",
        s.study_id,
        v.shape(),
        v.spacing_mm,
        mask.count(),
        organ.iter().sum::<f32>() / organ.len() as f32
    );
    let other = &m.source_studies[1];
    let mask2 = read_mask(&m.resolve(&other.mask), other.study_id.clone())?;
    println!("overlap between two phantoms: DSC {:.3}", dice_score(&mask, &mask2)?);
    Ok(())
}
