//! Labeled samples, manifest I/O and the 70/20/10 dataset split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::Volume;
use crate::rng::Rng;

/// The radiological source category of a scan. CT-0 is normal tissue;
/// the rest show increasing ground-glass involvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceClass {
    Ct0,
    Ct1,
    Ct2,
    Ct3,
    Ct4,
}

impl SourceClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "CT-0" => Ok(SourceClass::Ct0),
            "CT-1" => Ok(SourceClass::Ct1),
            "CT-2" => Ok(SourceClass::Ct2),
            "CT-3" => Ok(SourceClass::Ct3),
            "CT-4" => Ok(SourceClass::Ct4),
            other => Err(Error::Format(format!("unknown source class '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SourceClass::Ct0 => "CT-0",
            SourceClass::Ct1 => "CT-1",
            SourceClass::Ct2 => "CT-2",
            SourceClass::Ct3 => "CT-3",
            SourceClass::Ct4 => "CT-4",
        }
    }

    /// Binary label: CT-0 is healthy (0); every other category shows
    /// impairment (1). CT-1/CT-4 are held-out positives in the source data.
    pub fn label(&self) -> u8 {
        match self {
            SourceClass::Ct0 => 0,
            _ => 1,
        }
    }
}

/// A volume with its binary label and source category.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub volume: Volume,
    pub label: u8,
    pub source_class: SourceClass,
}

impl LabeledSample {
    pub fn new(volume: Volume, source_class: SourceClass) -> Self {
        LabeledSample {
            volume,
            label: source_class.label(),
            source_class,
        }
    }
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub source_class: SourceClass,
}

/// Read a `path,source_class` manifest (header row required, UTF-8).
/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "source_class" {
            return Err(Error::Format(format!(
                "{}: manifest header must be 'path,source_class', got {headers:?}",
                path.display()
            )));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Format(format!(
                "{}: manifest row needs two columns, got {record:?}",
                path.display()
            )));
        }
        let rel = PathBuf::from(&record[0]);
        let resolved = if rel.is_absolute() { rel } else { base.join(rel) };
        out.push(ManifestEntry {
            path: resolved,
            source_class: SourceClass::parse(&record[1])?,
        });
    }
    Ok(out)
}

/// Write a manifest with paths as given.
pub fn write_manifest(path: &Path, entries: &[(String, SourceClass)]) -> Result<()> {
    let mut body = String::from("path,source_class\n");
    for (p, class) in entries {
        body.push_str(&format!("{p},{}\n", class.name()));
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Shuffle and split into (train, test, validation).
///
/// Test and validation sizes are floors of their ratios; the remainder goes
/// to train. When a floor produces an empty split, it is topped up to one
/// sample so every split stays usable.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    ratios: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 samples to populate three splits, got {n}"
        )));
    }
    let (r_train, r_test, r_val) = ratios;
    if (r_train + r_test + r_val - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    if r_train <= 0.0 || r_test <= 0.0 || r_val <= 0.0 {
        return Err(Error::Config(format!("split ratios must be positive: {ratios:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let mut n_test = (r_test * n as f64).floor() as usize;
    let mut n_val = (r_val * n as f64).floor() as usize;
    if n_test == 0 {
        n_test = 1;
    }
    if n_val == 0 {
        n_val = 1;
    }
    let n_train = n - n_test - n_val;
    let train = order[..n_train]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let test = order[n_train..n_train + n_test]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let val = order[n_train + n_test..]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    Ok((train, test, val))
}

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.2, 0.1);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_samples_split_7_2_1() {
        let samples: Vec<usize> = (0..10).collect();
        let mut rng = Rng::new(1);
        let (train, test, val) = split_dataset(&samples, SPLIT_RATIOS, &mut rng).unwrap();
        assert_eq!((train.len(), test.len(), val.len()), (7, 2, 1));
    }

    #[test]
    fn three_samples_get_one_each() {
        let samples = vec![1, 2, 3];
        let mut rng = Rng::new(1);
        let (train, test, val) = split_dataset(&samples, SPLIT_RATIOS, &mut rng).unwrap();
        assert_eq!((train.len(), test.len(), val.len()), (1, 1, 1));
    }

    #[test]
    fn same_seed_identical_partitions() {
        let samples: Vec<usize> = (0..37).collect();
        let a = split_dataset(&samples, SPLIT_RATIOS, &mut Rng::new(9)).unwrap();
        let b = split_dataset(&samples, SPLIT_RATIOS, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let samples: Vec<usize> = (0..53).collect();
        let mut rng = Rng::new(4);
        let (train, test, val) = split_dataset(&samples, SPLIT_RATIOS, &mut rng).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).chain(&val).copied().collect();
        assert_eq!(all.len(), 53);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 53, "splits overlap");
    }

    #[test]
    fn empty_and_tiny_inputs_rejected() {
        let mut rng = Rng::new(1);
        assert!(split_dataset(&Vec::<usize>::new(), SPLIT_RATIOS, &mut rng).is_err());
        assert!(split_dataset(&[1, 2], SPLIT_RATIOS, &mut rng).is_err());
    }

    #[test]
    fn bad_ratios_rejected() {
        let samples = vec![1, 2, 3, 4];
        let mut rng = Rng::new(1);
        assert!(split_dataset(&samples, (0.5, 0.2, 0.1), &mut rng).is_err());
    }

    #[test]
    fn label_mapping() {
        assert_eq!(SourceClass::Ct0.label(), 0);
        assert_eq!(SourceClass::Ct1.label(), 1);
        assert_eq!(SourceClass::Ct2.label(), 1);
        assert_eq!(SourceClass::Ct3.label(), 1);
        assert_eq!(SourceClass::Ct4.label(), 1);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("voxbayes-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        write_manifest(
            &path,
            &[
                ("vol_0000.nii".to_string(), SourceClass::Ct0),
                ("vol_0001.nii".to_string(), SourceClass::Ct3),
            ],
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].source_class, SourceClass::Ct0);
        assert_eq!(entries[1].source_class, SourceClass::Ct3);
        assert!(entries[0].path.ends_with("vol_0000.nii"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_requires_header() {
        let dir = std::env::temp_dir().join(format!("voxbayes-mh-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "vol.nii,CT-0\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
