//! Phantom datasets on disk: per-case volume, mask and branch files plus a
//! JSON manifest holding the train/validation/test split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_branches, read_mask, read_volume, write_branches, write_mask, write_volume};
use crate::phantom::{generate, split, Branch};
use crate::volume::{Mask, Volume};

pub const MANIFEST: &str = "manifest.json";

/// Purpose tags mixed into the run seed.
pub mod stream {
    pub const CASE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const FLIP: u64 = 5;
}

/// Mixes `tags` into `seed` with the splitmix64 finalizer.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
    pub branches: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub grid: [usize; 3],
    pub cases: Vec<CaseEntry>,
    pub split: Split,
}

/// A loaded case.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume<f32>,
    pub mask: Mask,
    pub branches: Vec<Branch>,
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

pub fn case_seed(cfg: &RunConfig, i: usize) -> u64 {
    derive_seed(cfg.seed, &[stream::CASE, i as u64])
}

/// Phantom number `i` of a run, in memory.
pub fn generate_case(cfg: &RunConfig, i: usize) -> Result<Case> {
    let mut pc = cfg.phantom.clone();
    pc.seed = case_seed(cfg, i);
    let tree = generate(&pc)?;
    Ok(Case {
        id: case_id(i),
        volume: tree.volume,
        mask: tree.mask,
        branches: tree.branches,
    })
}

pub fn generate_cases(cfg: &RunConfig, range: std::ops::Range<usize>) -> Result<Vec<Case>> {
    range.map(|i| generate_case(cfg, i)).collect()
}

/// Writes `n` phantoms and the manifest under `out`. Byte-identical for a fixed config.
pub fn generate_dataset(cfg: &RunConfig, n: usize, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let case = generate_case(cfg, i)?;
        let entry = CaseEntry {
            volume: format!("{}.vol", case.id),
            mask: format!("{}.msk", case.id),
            branches: format!("{}.branches.txt", case.id),
            seed: case_seed(cfg, i),
            id: case.id,
        };
        write_volume(&out.join(&entry.volume), &case.volume)?;
        write_mask(&out.join(&entry.mask), &case.mask)?;
        write_branches(&out.join(&entry.branches), &case.branches)?;
        cases.push(entry);
    }
    let split = if n == 0 {
        Split::default()
    } else {
        let parts = split(n, &cfg.data.split, derive_seed(cfg.seed, &[stream::SPLIT]))?;
        let ids = |k: usize| parts[k].iter().map(|&i| case_id(i)).collect();
        Split {
            train: ids(0),
            val: ids(1),
            test: ids(2),
        }
    };
    let manifest = Manifest {
        seed: cfg.seed,
        grid: cfg.phantom.grid,
        cases,
        split,
    };
    manifest.save(out)?;
    Ok(manifest)
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingDataset(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Case ids of a named split: `train`, `val`, `test` or `all`.
    pub fn ids(&self, name: &str) -> Result<Vec<String>> {
        Ok(match name {
            "train" => self.split.train.clone(),
            "val" => self.split.val.clone(),
            "test" => self.split.test.clone(),
            "all" => self.cases.iter().map(|c| c.id.clone()).collect(),
            other => return Err(Error::invalid("split", format!("unknown split {other:?}"))),
        })
    }

    pub fn load_case(&self, dir: &Path, id: &str) -> Result<Case> {
        let e = self
            .cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::invalid("manifest", format!("no case {id:?}")))?;
        let volume = read_volume(&dir.join(&e.volume))?;
        let mask = read_mask(&dir.join(&e.mask))?;
        if volume.dims() != mask.dims() {
            return Err(Error::shape("case", format!("{id}: {:?} vs {:?}", volume.dims(), mask.dims())));
        }
        Ok(Case {
            id: id.to_string(),
            volume,
            mask,
            branches: read_branches(&dir.join(&e.branches))?,
        })
    }

    pub fn load_cases(&self, dir: &Path, ids: &[String]) -> Result<Vec<Case>> {
        ids.iter().map(|id| self.load_case(dir, id)).collect()
    }
}

/// Dataset directory from the config, rejecting an unset path.
pub fn dataset_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.paths.dataset.as_os_str().is_empty() {
        return Err(Error::Config("paths.dataset is not set".into()));
    }
    Ok(cfg.paths.dataset.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::with_seed(4)
    }

    #[test]
    fn single_case_writes_three_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), 1, dir.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["case_000.branches.txt", "case_000.msk", "case_000.vol", MANIFEST]);
        assert_eq!(m.split.train.len() + m.split.val.len() + m.split.test.len(), 1);
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let case = back.load_case(dir.path(), "case_000").unwrap();
        assert_eq!(case.mask.dims(), [32, 32, 32]);
    }

    #[test]
    fn zero_cases_is_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), 0, dir.path()).unwrap();
        assert!(m.cases.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&small(), 2, a.path()).unwrap();
        generate_dataset(&small(), 2, b.path()).unwrap();
        for f in ["case_001.vol", "case_001.msk", "case_001.branches.txt", MANIFEST] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        let s = derive_seed(1, &[stream::ORDER, 0]);
        assert_ne!(s, derive_seed(1, &[stream::ORDER, 1]));
        assert_ne!(s, derive_seed(1, &[stream::FLIP, 0]));
        assert_ne!(s, derive_seed(2, &[stream::ORDER, 0]));
        assert_eq!(s, derive_seed(1, &[stream::ORDER, 0]));
    }
}
