//! On-disk dataset layout: a JSON manifest next to one binary matrix file per
//! view and an optional binary label file.
//!
//! Matrix files are `"MVCD"`, `u32` rows, `u32` cols, then row-major `f32`
//! values; label files are `"MVCL"`, `u32` count, then `u32` labels. All
//! integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmcn_core::dataset::MultiViewDataset;
use tmcn_core::Tensor;

pub const MATRIX_MAGIC: &[u8; 4] = b"MVCD";
pub const LABEL_MAGIC: &[u8; 4] = b"MVCL";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: truncated or oversized file: expected {expected} bytes, found {actual}")]
    Length { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: {what} is {found} but the manifest says {expected}")]
    Disagrees {
        path: PathBuf,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Dataset(#[from] tmcn_core::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub file: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_samples: usize,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clusters: Option<usize>,
}

/// Serialized bytes of a matrix file.
pub fn matrix_bytes(t: &Tensor) -> Vec<u8> {
    let (rows, cols) = (t.rows(), t.row_len());
    let mut out = Vec::with_capacity(12 + 4 * t.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn label_bytes(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic(path: &Path, bytes: &[u8], magic: &[u8; 4], header: usize) -> Result<(), FormatError> {
    if bytes.len() < header {
        return Err(FormatError::Length {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    Ok(())
}

pub fn parse_matrix(path: &Path, bytes: &[u8]) -> Result<Tensor, FormatError> {
    check_magic(path, bytes, MATRIX_MAGIC, 12)?;
    let rows = u32_at(bytes, 4) as usize;
    let cols = u32_at(bytes, 8) as usize;
    let expected = 12 + 4 * rows as u64 * cols as u64;
    if bytes.len() as u64 != expected {
        return Err(FormatError::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data).map_err(|e| FormatError::Dataset(e.into()))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, FormatError> {
    check_magic(path, bytes, LABEL_MAGIC, 8)?;
    let n = u32_at(bytes, 4) as usize;
    let expected = 8 + 4 * n as u64;
    if bytes.len() as u64 != expected {
        return Err(FormatError::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes[8..].chunks_exact(4).map(|c| u32_at(c, 0) as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(io(path))
}

/// Resolves a dataset argument: either the manifest itself or the directory
/// holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, FormatError> {
    let path = manifest_path(path);
    let text = read(&path)?;
    serde_json::from_slice(&text).map_err(|source| FormatError::Manifest { path, source })
}

/// Loads a dataset from a manifest file or its directory.
pub fn load_dataset(path: &Path) -> Result<MultiViewDataset, FormatError> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let vpath = dir.join(&entry.file);
        let m = parse_matrix(&vpath, &read(&vpath)?)?;
        if m.rows() != manifest.n_samples {
            return Err(FormatError::Disagrees {
                path: vpath,
                what: "row count",
                expected: manifest.n_samples,
                found: m.rows(),
            });
        }
        if m.row_len() != entry.dim {
            return Err(FormatError::Disagrees {
                path: vpath,
                what: "column count",
                expected: entry.dim,
                found: m.row_len(),
            });
        }
        views.push(m);
    }
    let labels = match &manifest.labels_file {
        Some(f) => {
            let lpath = dir.join(f);
            let l = parse_labels(&lpath, &read(&lpath)?)?;
            if l.len() != manifest.n_samples {
                return Err(FormatError::Disagrees {
                    path: lpath,
                    what: "label count",
                    expected: manifest.n_samples,
                    found: l.len(),
                });
            }
            Some(l)
        }
        None => None,
    };
    Ok(MultiViewDataset::new(
        manifest.name,
        views,
        labels,
        manifest.n_clusters,
    )?)
}

/// Writes `manifest.json`, `view{m}.mvcd` and (if labeled) `labels.mvcl`
/// into `dir`, creating it if needed.
pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<Manifest, FormatError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut views = Vec::new();
    for (m, v) in dataset.views().iter().enumerate() {
        let file = format!("view{m}.mvcd");
        write(&dir.join(&file), &matrix_bytes(v))?;
        views.push(ViewEntry { file, dim: v.row_len() });
    }
    let labels_file = match dataset.labels() {
        Some(l) => {
            let file = "labels.mvcl".to_string();
            write(&dir.join(&file), &label_bytes(l))?;
            Some(file)
        }
        None => None,
    };
    let manifest = Manifest {
        name: dataset.name.clone(),
        n_samples: dataset.n_samples(),
        views,
        labels_file,
        n_clusters: dataset.n_clusters(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Dataset values rounded to the on-disk `f32` precision, so that a dataset
/// held in memory compares equal to itself after a save/load cycle.
pub fn round_trip_precision(dataset: &MultiViewDataset) -> MultiViewDataset {
    let views = dataset.views().iter().map(|v| v.map(|x| x as f32 as f64)).collect();
    MultiViewDataset::new(
        dataset.name.clone(),
        views,
        dataset.labels().map(<[usize]>::to_vec),
        dataset.n_clusters(),
    )
    .expect("rounding keeps a valid dataset valid")
}
