//! Dataset sources for the simulator.

use crate::error::{Error, Result};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

const CIFAR_DIM: usize = 3072;
const CIFAR_RECORD: usize = CIFAR_DIM + 1;
const CIFAR_CLASSES: usize = 10;
const MATRIX_MAGIC: &[u8; 4] = b"SPXM";

/// Where datapoints come from. CIFAR-10 pixels are scaled into [0, 1] so the
/// evaluation peak is 1.0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Directory holding CIFAR-10 binary batch files (data_batch_*.bin).
    Cifar10Dir { path: PathBuf },
    /// I.i.d. Gaussian vectors with uniform labels in 0..10.
    Synthetic { dim: usize, std_dev: f64, seed: u64 },
    /// A single matrix file (see `save_matrix_file` for the layout).
    MatrixFile { path: PathBuf },
}

/// Loads `limit` datapoints (all available when `None`) in a deterministic
/// order. The synthetic source is unbounded and requires an explicit limit.
pub fn load_dataset(
    source: &DatasetSource,
    limit: Option<usize>,
) -> Result<Vec<(DVector<f64>, usize)>> {
    let mut points = match source {
        DatasetSource::Cifar10Dir { path } => load_cifar_dir(path)?,
        DatasetSource::Synthetic { dim, std_dev, seed } => {
            let count = limit.ok_or_else(|| {
                Error::Config("synthetic dataset needs an explicit datapoint count".into())
            })?;
            synthetic(*dim, *std_dev, *seed, count)
        }
        DatasetSource::MatrixFile { path } => load_matrix_file(path)?,
    };
    if let Some(count) = limit {
        if points.len() < count {
            return Err(Error::Dataset(format!(
                "requested {count} datapoints but source holds {}",
                points.len()
            )));
        }
        points.truncate(count);
    }
    Ok(points)
}

fn synthetic(dim: usize, std_dev: f64, seed: u64, count: usize) -> Vec<(DVector<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = DVector::from_fn(dim, |_, _| std_dev * rng.sample::<f64, _>(StandardNormal));
            let label = rng.gen_range(0..CIFAR_CLASSES);
            (v, label)
        })
        .collect()
}

fn load_cifar_dir(dir: &Path) -> Result<Vec<(DVector<f64>, usize)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no .bin batch files under {}",
            dir.display()
        )));
    }
    let mut points = Vec::new();
    for file in files {
        points.extend(load_cifar_file(&file)?);
    }
    Ok(points)
}

/// Reads one CIFAR-10 binary batch file: 3073-byte records, one label byte
/// followed by 3072 pixel bytes (channel-major 32x32 planes).
pub fn load_cifar_file(path: &Path) -> Result<Vec<(DVector<f64>, usize)>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Dataset(format!(
            "{}: expected a multiple of {CIFAR_RECORD} bytes, got {} (trailing {} bytes after record {whole})",
            path.display(),
            bytes.len(),
            bytes.len() - whole * CIFAR_RECORD,
        )));
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|record| {
            let label = record[0] as usize;
            let v = DVector::from_fn(CIFAR_DIM, |i, _| record[1 + i] as f64 / 255.0);
            (v, label)
        })
        .collect())
}

/// Writes datapoints as a raw matrix file: magic "SPXM", u32 version, u32
/// dim, u32 count, `count * dim` f64 little-endian values (one vector after
/// another), then `count` label bytes.
pub fn save_matrix_file(path: &Path, points: &[(DVector<f64>, usize)]) -> Result<()> {
    use std::io::Write;
    let dim = points.first().map_or(0, |(v, _)| v.len());
    let mut out = Vec::with_capacity(16 + points.len() * (dim * 8 + 1));
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for (v, _) in points {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for (_, label) in points {
        out.push(*label as u8);
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn load_matrix_file(path: &Path) -> Result<Vec<(DVector<f64>, usize)>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a matrix file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported matrix file version {version}",
            path.display()
        )));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + count * (dim * 8 + 1);
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "{}: expected {expected} bytes for {count} vectors of dim {dim}, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * dim * 8;
        let v = DVector::from_fn(dim, |j, _| {
            f64::from_le_bytes(bytes[start + j * 8..start + j * 8 + 8].try_into().unwrap())
        });
        let label = bytes[16 + count * dim * 8 + i] as usize;
        points.push((v, label));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_streams_are_deterministic() {
        let source = DatasetSource::Synthetic {
            dim: 3072,
            std_dev: 1.0,
            seed: 7,
        };
        let a = load_dataset(&source, Some(5)).unwrap();
        let b = load_dataset(&source, Some(5)).unwrap();
        assert_eq!(a.len(), 5);
        for ((va, la), (vb, lb)) in a.iter().zip(b.iter()) {
            assert_eq!(va, vb);
            assert_eq!(la, lb);
        }
        assert!(load_dataset(&source, None).is_err());
    }

    #[test]
    fn cifar_file_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = Vec::new();
        for record in 0..3u8 {
            bytes.push(record); // label
            bytes.extend(std::iter::repeat(record * 100).take(CIFAR_DIM));
        }
        std::fs::write(&path, &bytes).unwrap();

        let points = load_cifar_file(&path).unwrap();
        assert_eq!(points.len(), 3);
        assert_eq!(points[2].1, 2);
        assert!((points[2].0[0] - 200.0 / 255.0).abs() < 1e-12);

        let via_dir = load_dataset(
            &DatasetSource::Cifar10Dir {
                path: dir.path().to_path_buf(),
            },
            Some(2),
        )
        .unwrap();
        assert_eq!(via_dir.len(), 2);
    }

    #[test]
    fn truncated_cifar_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD + 10]).unwrap();
        let err = load_cifar_file(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3073") && msg.contains("3083"), "{msg}");
    }

    #[test]
    fn matrix_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.spxm");
        let points = synthetic(17, 0.5, 3, 4);
        save_matrix_file(&path, &points).unwrap();
        let loaded = load_dataset(&DatasetSource::MatrixFile { path: path.clone() }, None).unwrap();
        assert_eq!(loaded.len(), 4);
        for ((va, la), (vb, lb)) in points.iter().zip(loaded.iter()) {
            assert_eq!(va, vb);
            assert_eq!(la, lb);
        }

        std::fs::write(&path, b"bogus file").unwrap();
        assert!(matches!(
            load_dataset(&DatasetSource::MatrixFile { path }, None),
            Err(Error::Format(_))
        ));
    }
}
