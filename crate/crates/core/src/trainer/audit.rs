use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::extreme::ExtremePointSet;
use crate::nifti_io::{read_mask, read_volume};
use crate::volume::{SegmentationMask, Volume};

/// Which part of the pipeline opened a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessContext {
    Training,
    Inference,
    Evaluation,
    Service,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Volume,
    Mask,
    Points,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub context: AccessContext,
    pub kind: FileKind,
    pub path: PathBuf,
}

/// Shared, append-only log of data files opened through a [`DataAccess`].
#[derive(Clone, Debug, Default)]
pub struct AccessLog(Arc<Mutex<Vec<AccessRecord>>>);

impl AccessLog {
    pub fn records(&self) -> Vec<AccessRecord> {
        self.0.lock().expect("access log poisoned").clone()
    }

    fn push(&self, r: AccessRecord) {
        self.0.lock().expect("access log poisoned").push(r);
    }
}

/// File reader that records every open under a fixed context.
#[derive(Clone, Debug)]
pub struct DataAccess {
    pub context: AccessContext,
    pub log: AccessLog,
}

impl DataAccess {
    pub fn new(context: AccessContext, log: AccessLog) -> Self {
        Self { context, log }
    }

    /// A reader with its own fresh log.
    pub fn untracked(context: AccessContext) -> Self {
        Self::new(context, AccessLog::default())
    }

    /// Same log, different context.
    pub fn with_context(&self, context: AccessContext) -> Self {
        Self::new(context, self.log.clone())
    }

    fn record(&self, kind: FileKind, path: &Path) {
        self.log.push(AccessRecord {
            context: self.context,
            kind,
            path: path.to_path_buf(),
        });
    }

    pub fn volume(&self, path: &Path, study_id: &str) -> Result<Volume> {
        self.record(FileKind::Volume, path);
        read_volume(path, study_id)
    }

    pub fn mask(&self, path: &Path, study_id: &str) -> Result<SegmentationMask> {
        self.record(FileKind::Mask, path);
        read_mask(path, study_id)
    }

    pub fn points(&self, path: &Path) -> Result<ExtremePointSet> {
        self.record(FileKind::Points, path);
        ExtremePointSet::load(path)
    }
}
