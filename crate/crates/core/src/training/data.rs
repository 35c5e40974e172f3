//! Case collections for the training and evaluation loops.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{signed_distance_map, DistanceMap};
use crate::synthvasc::{read_case, read_distance_map, read_manifest};
use crate::synthvasc::Case;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseData {
    pub case: Case,
    pub dmap: DistanceMap,
}

impl CaseData {
    /// Computes the distance map from the case's artery mask.
    pub fn from_case(case: Case) -> Self {
        let dmap = signed_distance_map(&case.artery_mask, case.spacing_mm);
        Self { case, dmap }
    }
}

/// Cases held in memory or read from disk on demand. Loading on demand
/// keeps memory flat for large synthetic sets.
#[derive(Debug, Clone)]
pub enum CaseSet {
    Memory(Vec<Arc<CaseData>>),
    Disk(Vec<PathBuf>),
}

impl CaseSet {
    pub fn from_cases(cases: Vec<Case>) -> Self {
        CaseSet::Memory(cases.into_iter().map(|c| Arc::new(CaseData::from_case(c))).collect())
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        Ok(CaseSet::Disk(read_manifest(path)?))
    }

    pub fn len(&self) -> usize {
        match self {
            CaseSet::Memory(v) => v.len(),
            CaseSet::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Arc<CaseData>> {
        match self {
            CaseSet::Memory(v) => Ok(v[i].clone()),
            CaseSet::Disk(v) => Ok(Arc::new(CaseData {
                case: read_case(&v[i])?,
                dmap: read_distance_map(&v[i])?,
            })),
        }
    }

    /// Subset by index, preserving order.
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            CaseSet::Memory(v) => CaseSet::Memory(idx.iter().map(|&i| v[i].clone()).collect()),
            CaseSet::Disk(v) => CaseSet::Disk(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}
