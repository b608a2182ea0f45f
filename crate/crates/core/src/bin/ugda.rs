use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use ugda::corpus::{build_corpus, CorpusConfig, CorpusManifest};
use ugda::device::Device;
use ugda::extreme::ExtremePointSet;
use ugda::metrics::{boxplot_svg, make_table, model_label, pool_seeds, RunReport};
use ugda::nifti_io::{read_volume, study_id_from_path, write_mask};
use ugda::service::{serve, ServiceState};
use ugda::trainer::{
    evaluate_trained, predict_mask, run_variant, AccessLog, RunSpec, TrainConfig, Trainer, Variant, CHECKPOINT_FILE,
    RUN_SPEC_FILE,
};
use ugda::{Error, Result};

#[derive(Parser)]
#[command(name = "ugda", version, about = "User-guided domain adaptation for 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target phantom corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one variant and evaluate it on the evaluation studies.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "ugda")]
        variant: Variant,
        #[arg(long, default_value_t = 1.0)]
        ps_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON training configuration; the flags above override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-run inference and scoring for a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Segment one volume, optionally conditioned on extreme points.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        ps: Option<PathBuf>,
        /// Output mask; defaults to `<volume stem>_pred.nii` next to the volume.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate run reports.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Directory for table.csv, table.md and the box plot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the annotation service.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    let device = Device::from_env()?;
    log::debug!("device {device}");
    match cli.command {
        Command::GenData { config } => {
            let cfg: CorpusConfig = read_json(&config)?;
            let m = build_corpus(&cfg)?;
            println!(
                "wrote {} source, {} target ({} with points), {} evaluation studies to {}",
                m.source_studies.len(),
                m.n_target(),
                m.target_ps_studies.len(),
                m.evaluation_studies.len(),
                cfg.out_dir.join("manifest.json").display()
            );
        }
        Command::Train {
            manifest,
            variant,
            ps_fraction,
            seed,
            out,
            config,
        } => {
            let base = match config {
                Some(p) => read_json::<TrainConfig>(&p)?,
                None => TrainConfig::default(),
            };
            let mut cfg = base.with_variant(variant);
            cfg.ps_fraction = ps_fraction;
            cfg.seed = seed;
            let m = CorpusManifest::load(&manifest)?;
            let report = run_variant(&m, &manifest, &cfg, &out, &AccessLog::default())?;
            print_report(&report);
        }
        Command::Eval { run } => {
            let spec: RunSpec = read_json(&run.join(RUN_SPEC_FILE))?;
            let m = CorpusManifest::load(&spec.manifest)?;
            let trainer = Trainer::load_for(&run.join(CHECKPOINT_FILE), &spec.config)?;
            let report = evaluate_trained(&trainer, &m, &run, &AccessLog::default())?;
            print_report(&report);
        }
        Command::Infer { ckpt, volume, ps, out } => {
            let trainer = Trainer::load(&ckpt)?;
            let id = study_id_from_path(&volume);
            let vol = read_volume(&volume, id.clone())?;
            let points = ps.as_deref().map(ExtremePointSet::load).transpose()?;
            let mask = predict_mask(&trainer, &vol, points.as_ref())?;
            let out = out.unwrap_or_else(|| volume.with_file_name(format!("{id}_pred.nii")));
            write_mask(&out, &mask)?;
            println!("{} foreground voxels written to {}", mask.count(), out.display());
        }
        Command::Report { runs, out } => {
            let reports = runs.iter().map(|r| RunReport::load(r)).collect::<Result<Vec<_>>>()?;
            let pooled = pool_seeds(&reports);
            let table = make_table(&pooled)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let write = |name: &str, text: String| {
                    let p = dir.join(name);
                    fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
                };
                write("table.csv", table.to_csv()?)?;
                write("table.md", table.to_markdown())?;
                let series: Vec<_> = pooled
                    .iter()
                    .filter_map(|r| {
                        let label = if r.variant.uses_target_ps() {
                            format!("{} {:.0}%", model_label(r.variant), r.ps_fraction * 100.0)
                        } else {
                            model_label(r.variant).to_string()
                        };
                        r.dsc_quartiles.map(|q| (label, q))
                    })
                    .collect();
                write("dsc_boxplot.svg", boxplot_svg(&series))?;
            }
        }
        Command::Serve { ckpt, data_dir, port } => {
            let state = Arc::new(ServiceState::open(&data_dir, ckpt.as_deref())?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: "tokio runtime".into(),
                source: e,
            })?;
            rt.block_on(serve(state, port))?;
        }
    }
    Ok(())
}

fn print_report(r: &RunReport) {
    match r.aggregates {
        Some(a) => println!(
            "{} ({:.0}% PS): DSC {:.2} ± {:.2} (worst {:.2}), MXA {:.2} ± {:.2} mm over {} volumes",
            r.variant,
            r.ps_fraction * 100.0,
            a.dsc_mean * 100.0,
            a.dsc_std * 100.0,
            a.dsc_min * 100.0,
            a.mxa_mean,
            a.mxa_std,
            r.per_volume.len() - r.empty_pred_count
        ),
        None => println!("{}: no scored volumes", r.variant),
    }
    if r.empty_pred_count > 0 {
        println!("warning: {} empty predictions excluded", r.empty_pred_count);
    }
    for e in &r.errors {
        println!("error: {}: {}", e.study_id, e.message);
    }
}
