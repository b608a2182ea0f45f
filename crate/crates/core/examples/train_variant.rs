//! Train one variant end to end on a tiny phantom corpus and print its
//! evaluation report.
//!
//! ```text
//! cargo run --release --example train_variant -- ugda
//! ```

use ugda::corpus::{build_corpus, CorpusConfig};
use ugda::phantom::{Domain, PhantomParams};
use ugda::trainer::{run_variant, AccessLog, TrainConfig, Variant};

fn small_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::for_variant(variant);
    c.model_shape = [16, 16, 8];
    c.heatmap_net.stage_channels = vec![4, 8];
    c.seg_net.stage_channels = vec![4, 8];
    c.discriminator.channels = vec![4, 8];
    c.discriminator.dilations = vec![2];
    c.sigma_vox = 2.0;
    c.pretrain_max_epochs = 40;
    c.adapt_epochs = 5;
    c
}

fn main() -> ugda::Result<()> {
    env_logger::init();
    let variant: Variant = std::env::args().nth(1).unwrap_or_else(|| "ugda".into()).parse()?;
    let dir = tempfile::tempdir().map_err(|e| ugda::Error::InvalidArgument(e.to_string()))?;
    let shape = [32, 32, 16];
    let corpus = CorpusConfig {
        out_dir: dir.path().join("corpus"),
        n_source: 8,
        n_target: 6,
        n_eval: 3,
        source: PhantomParams::desk(Domain::Source).scaled_to(shape),
        target: PhantomParams::desk(Domain::Target).scaled_to(shape),
        ..CorpusConfig::default()
    };
    let manifest = build_corpus(&corpus)?;

    let config = small_config(variant);
    let out = dir.path().join("run");
    let report = run_variant(&manifest, &corpus.out_dir.join("manifest.json"), &config, &out, &AccessLog::default())?;
    for row in &report.per_volume {
        println!("{:<10} DSC {:.3}  MXA {:?}", row.study_id, row.dsc, row.mxa_mm);
    }
    if let Some(a) = report.aggregates {
        println!(
            "{variant}: DSC {:.3} ± {:.3} (worst {:.3}), MXA {:.2} ± {:.2} mm",
            a.dsc_mean, a.dsc_std, a.dsc_min, a.mxa_mean, a.mxa_std
        );
    }
    Ok(())
}
