//! A reduced phantom benchmark: every variant, two seeds, small networks.
//! Pass `--full` for the full-size configuration.
//!
//! ```text
//! cargo run --release --example benchmark -- /tmp/bench
//! ```

use std::path::PathBuf;

use ugda::benchmark::{run_benchmark, seed_checks, BenchmarkConfig};
use ugda::metrics::{make_table, pool_seeds};
use ugda::phantom::{Domain, PhantomParams};
use ugda::trainer::AccessLog;

fn main() -> ugda::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ugda-bench"));
    let full = args.any(|a| a == "--full");

    let mut cfg = BenchmarkConfig::default();
    if !full {
        let shape = [32, 32, 16];
        cfg.corpus.n_source = 10;
        cfg.corpus.n_target = 8;
        cfg.corpus.n_eval = 4;
        cfg.corpus.source = PhantomParams::desk(Domain::Source).scaled_to(shape);
        cfg.corpus.target = PhantomParams::desk(Domain::Target).scaled_to(shape);
        cfg.train.model_shape = [16, 16, 8];
        cfg.train.heatmap_net.stage_channels = vec![4, 8];
        cfg.train.seg_net.stage_channels = vec![4, 8];
        cfg.train.discriminator.channels = vec![4, 8];
        cfg.train.discriminator.dilations = vec![2];
        cfg.train.pretrain_max_epochs = 4;
        cfg.train.adapt_epochs = 2;
        cfg.seeds = vec![0, 1];
    }
    let results = run_benchmark(&dir, &cfg, &AccessLog::default())?;
    let reports: Vec<_> = results.results.iter().map(|r| r.report.clone()).collect();
    println!("{}", make_table(&pool_seeds(&reports))?.to_text());
    for c in seed_checks(&results) {
        println!(
            "seed {}: DSC ordering {}, MXA vs DEXTR {}, worst case {}, fraction robust {:?}",
            c.seed, c.dsc_ordering, c.mxa_vs_dextr, c.worst_case, c.fraction_robust
        );
    }
    Ok(())
}
