//! Save a trainer mid-adaptation, reload it and check that the resumed run
//! takes the same steps as the uninterrupted one.

use ugda::corpus::{build_corpus, CorpusConfig};
use ugda::phantom::{Domain, PhantomParams};
use ugda::trainer::data::TrainingData;
use ugda::trainer::{pretrain_source, AccessContext, DataAccess, LossLog, TrainConfig, Trainer, Variant};

fn main() -> ugda::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| ugda::Error::InvalidArgument(e.to_string()))?;
    let shape = [32, 32, 16];
    let manifest = build_corpus(&CorpusConfig {
        out_dir: dir.path().join("corpus"),
        n_source: 6,
        n_target: 4,
        n_eval: 2,
        source: PhantomParams::desk(Domain::Source).scaled_to(shape),
        target: PhantomParams::desk(Domain::Target).scaled_to(shape),
        ..CorpusConfig::default()
    })?;

    let mut config = TrainConfig::for_variant(Variant::Ugda);
    config.model_shape = [16, 16, 8];
    config.heatmap_net.stage_channels = vec![4, 8];
    config.seg_net.stage_channels = vec![4, 8];
    config.discriminator.channels = vec![4, 8];
    config.discriminator.dilations = vec![2];
    config.pretrain_max_epochs = 2;

    let data = TrainingData::load(&manifest, &config, &DataAccess::untracked(AccessContext::Training))?;
    let mut log = LossLog::default();
    let mut trainer = pretrain_source(&data, &config, &mut log)?.into_adaptation(config.clone())?;
    trainer.adapt_step(&data, &mut log)?;

    let path = dir.path().join("mid.ckpt");
    trainer.save(&path)?;
    let mut resumed = Trainer::load(&path)?;
    println!("checkpoint: {} bytes, step {}", std::fs::metadata(&path).map_or(0, |m| m.len()), resumed.state.global_step);

    for _ in 0..3 {
        let a = trainer.adapt_step(&data, &mut log)?;
        let b = resumed.adapt_step(&data, &mut LossLog::default())?;
        println!(
            "step {}: total {:.6} vs {:.6}, L_d {:.6} vs {:.6}",
            trainer.state.global_step, a.total, b.total, a.l_d, b.l_d
        );
    }
    println!(
        "weights identical: {}",
        trainer.models.fingerprint_main() == resumed.models.fingerprint_main()
            && trainer.models.fingerprint_disc() == resumed.models.fingerprint_disc()
    );
    Ok(())
}
