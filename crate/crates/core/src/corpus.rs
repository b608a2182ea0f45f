//! Corpus layout on disk and the manifest describing it.
//!
//! ```text
//! <root>/manifest.json
//! <root>/source/{vol,mask}/<id>.nii
//! <root>/target/{vol,ps}/<id>.{nii,json}
//! <root>/eval/{vol,ps,hidden_mask}/<id>.{nii,json}
//! ```
//!
//! Manifest paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extreme::ExtremePointSet;
use crate::nifti_io::{study_id_from_path, write_mask, write_volume};
use crate::phantom::{generate_study, simulate_ps, study_seed, Domain, PhantomParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStudy {
    pub study_id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsStudy {
    pub study_id: String,
    pub volume: PathBuf,
    pub ps: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabelledStudy {
    pub study_id: String,
    pub volume: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStudy {
    pub study_id: String,
    pub volume: PathBuf,
    pub ps: PathBuf,
    pub hidden_mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub source_studies: Vec<SourceStudy>,
    pub target_ps_studies: Vec<PsStudy>,
    pub target_unlabelled_studies: Vec<UnlabelledStudy>,
    pub evaluation_studies: Vec<EvalStudy>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Absolute location of a manifest-relative path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Non-evaluation target studies (`N_w + N_u`).
    pub fn n_target_train(&self) -> usize {
        self.target_ps_studies.len() + self.target_unlabelled_studies.len()
    }

    /// All target studies including the evaluation set.
    pub fn n_target(&self) -> usize {
        self.n_target_train() + self.evaluation_studies.len()
    }

    pub fn study_ids(&self) -> impl Iterator<Item = &str> {
        self.source_studies
            .iter()
            .map(|s| s.study_id.as_str())
            .chain(self.target_ps_studies.iter().map(|s| s.study_id.as_str()))
            .chain(self.target_unlabelled_studies.iter().map(|s| s.study_id.as_str()))
            .chain(self.evaluation_studies.iter().map(|s| s.study_id.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.study_ids() {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate study id {id:?} in manifest")));
            }
        }
        Ok(())
    }

    /// Build a manifest from an existing directory tree in the corpus layout,
    /// pairing files by study id.
    pub fn assemble(root: &Path, seed: u64) -> Result<Self> {
        let list = |dir: &str| -> Result<Vec<(String, PathBuf)>> {
            let full = root.join(dir);
            if !full.exists() {
                return Ok(Vec::new());
            }
            let mut out = Vec::new();
            for entry in fs::read_dir(&full).map_err(|e| Error::io(&full, e))? {
                let p = entry.map_err(|e| Error::io(&full, e))?.path();
                let id = study_id_from_path(&p).trim_end_matches(".json").to_string();
                out.push((id, Path::new(dir).join(p.file_name().expect("file name"))));
            }
            out.sort();
            Ok(out)
        };
        let find = |v: &[(String, PathBuf)], id: &str| v.iter().find(|(i, _)| i == id).map(|(_, p)| p.clone());

        let src_mask = list("source/mask")?;
        let mut source_studies = Vec::new();
        for (id, vol) in list("source/vol")? {
            let mask = find(&src_mask, &id).ok_or_else(|| Error::invalid(format!("source study {id} has no mask")))?;
            source_studies.push(SourceStudy { study_id: id, volume: vol, mask });
        }
        let tgt_ps = list("target/ps")?;
        let (mut target_ps_studies, mut target_unlabelled_studies) = (Vec::new(), Vec::new());
        for (id, vol) in list("target/vol")? {
            match find(&tgt_ps, &id) {
                Some(ps) => target_ps_studies.push(PsStudy { study_id: id, volume: vol, ps }),
                None => target_unlabelled_studies.push(UnlabelledStudy { study_id: id, volume: vol }),
            }
        }
        let (ev_ps, ev_mask) = (list("eval/ps")?, list("eval/hidden_mask")?);
        let mut evaluation_studies = Vec::new();
        for (id, vol) in list("eval/vol")? {
            let ps = find(&ev_ps, &id).ok_or_else(|| Error::invalid(format!("evaluation study {id} has no points")))?;
            let hidden_mask =
                find(&ev_mask, &id).ok_or_else(|| Error::invalid(format!("evaluation study {id} has no mask")))?;
            evaluation_studies.push(EvalStudy { study_id: id, volume: vol, ps, hidden_mask });
        }
        let m = CorpusManifest {
            seed,
            source_studies,
            target_ps_studies,
            target_unlabelled_studies,
            evaluation_studies,
            root: root.to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub n_source: usize,
    /// Non-evaluation target studies.
    pub n_target: usize,
    pub n_eval: usize,
    /// Fraction of non-evaluation target studies that receive point labels.
    pub ps_fraction: f64,
    pub seed: u64,
    pub jitter_vox: f64,
    pub source: PhantomParams,
    pub target: PhantomParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("corpus"),
            n_source: 40,
            n_target: 40,
            n_eval: 10,
            ps_fraction: 1.0,
            seed: 0,
            jitter_vox: 0.0,
            source: PhantomParams::desk(Domain::Source),
            target: PhantomParams::desk(Domain::Target),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 || self.n_eval == 0 {
            return Err(Error::invalid("every split needs at least one study"));
        }
        if !(self.ps_fraction > 0.0 && self.ps_fraction <= 1.0) {
            return Err(Error::invalid(format!("ps_fraction must lie in (0, 1], got {}", self.ps_fraction)));
        }
        self.source.validate()?;
        self.target.validate()
    }

    /// `N_w`: number of non-evaluation target studies with point labels.
    pub fn n_ps(&self) -> usize {
        ((self.ps_fraction * self.n_target as f64).ceil() as usize).min(self.n_target)
    }
}

enum Split {
    Source,
    TargetPs,
    TargetUnlabelled,
    Eval,
}

struct Job {
    split: Split,
    id: String,
}

fn make_dirs(root: &Path) -> Result<()> {
    for d in [
        "source/vol",
        "source/mask",
        "target/vol",
        "target/ps",
        "eval/vol",
        "eval/ps",
        "eval/hidden_mask",
    ] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_study(cfg: &CorpusConfig, job: &Job) -> Result<()> {
    let root = &cfg.out_dir;
    let seed = study_seed(cfg.seed, &job.id);
    let params = match job.split {
        Split::Source => &cfg.source,
        _ => &cfg.target,
    };
    let (mut vol, mut mask) = generate_study(seed, params)?;
    vol.study_id = job.id.clone();
    mask.study_id = job.id.clone();
    let nii = format!("{}.nii", job.id);
    let json = format!("{}.json", job.id);
    let ps = || -> Result<ExtremePointSet> { simulate_ps(&mask, cfg.jitter_vox, seed ^ 0x5eed) };
    match job.split {
        Split::Source => {
            write_volume(&root.join("source/vol").join(&nii), &vol)?;
            write_mask(&root.join("source/mask").join(&nii), &mask)?;
        }
        Split::TargetPs => {
            write_volume(&root.join("target/vol").join(&nii), &vol)?;
            ps()?.save(&root.join("target/ps").join(&json))?;
        }
        Split::TargetUnlabelled => {
            write_volume(&root.join("target/vol").join(&nii), &vol)?;
        }
        Split::Eval => {
            write_volume(&root.join("eval/vol").join(&nii), &vol)?;
            ps()?.save(&root.join("eval/ps").join(&json))?;
            write_mask(&root.join("eval/hidden_mask").join(&nii), &mask)?;
        }
    }
    Ok(())
}

/// Generate every study, write it in the corpus layout and emit
/// `manifest.json` in `cfg.out_dir`.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<CorpusManifest> {
    cfg.validate()?;
    make_dirs(&cfg.out_dir)?;
    let n_ps = cfg.n_ps();
    let mut jobs = Vec::new();
    for i in 0..cfg.n_source {
        jobs.push(Job { split: Split::Source, id: format!("src-{i:03}") });
    }
    for i in 0..cfg.n_target {
        let split = if i < n_ps { Split::TargetPs } else { Split::TargetUnlabelled };
        jobs.push(Job { split, id: format!("tgt-{i:03}") });
    }
    for i in 0..cfg.n_eval {
        jobs.push(Job { split: Split::Eval, id: format!("eval-{i:03}") });
    }

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                s.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|j| write_study(cfg, j))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let nii = |dir: &str, id: &str| Path::new(dir).join(format!("{id}.nii"));
    let json = |dir: &str, id: &str| Path::new(dir).join(format!("{id}.json"));
    let mut m = CorpusManifest {
        seed: cfg.seed,
        source_studies: Vec::new(),
        target_ps_studies: Vec::new(),
        target_unlabelled_studies: Vec::new(),
        evaluation_studies: Vec::new(),
        root: cfg.out_dir.clone(),
    };
    for job in &jobs {
        let id = job.id.clone();
        match job.split {
            Split::Source => m.source_studies.push(SourceStudy {
                volume: nii("source/vol", &id),
                mask: nii("source/mask", &id),
                study_id: id,
            }),
            Split::TargetPs => m.target_ps_studies.push(PsStudy {
                volume: nii("target/vol", &id),
                ps: json("target/ps", &id),
                study_id: id,
            }),
            Split::TargetUnlabelled => m.target_unlabelled_studies.push(UnlabelledStudy {
                volume: nii("target/vol", &id),
                study_id: id,
            }),
            Split::Eval => m.evaluation_studies.push(EvalStudy {
                volume: nii("eval/vol", &id),
                ps: json("eval/ps", &id),
                hidden_mask: nii("eval/hidden_mask", &id),
                study_id: id,
            }),
        }
    }
    m.validate()?;
    m.save(&cfg.out_dir.join("manifest.json"))?;
    Ok(m)
}
