//! CIFAR-10 / CIFAR-100 in the published binary layout: fixed-size records of
//! label byte(s) followed by 3072 channel-major pixel bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Origin, Sample, Split};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

/// CIFAR-100 fine labels left out of the OOD pool by default because they
/// overlap semantically with CIFAR-10 classes: bus, fox, leopard, lion,
/// pickup_truck, streetcar, tiger, tractor, train, wolf.
pub const DEFAULT_CIFAR100_EXCLUDED: &[usize] = &[13, 34, 42, 43, 58, 81, 88, 89, 90, 97];

fn resolve(root: &Path, subdir: &str) -> PathBuf {
    let nested = root.join(subdir);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_records(path: &Path, label_bytes: usize) -> Result<Vec<(Vec<u8>, Vec<f64>)>> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rec = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            msg: format!("size {} is not a multiple of the {rec}-byte record", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|r| {
            let labels = r[..label_bytes].to_vec();
            let x = r[label_bytes..].iter().map(|&b| b as f64 / 255.0).collect();
            (labels, x)
        })
        .collect())
}

pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let dir = resolve(root, "cifar-10-batches-bin");
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut samples = Vec::new();
    for f in files {
        let path = dir.join(&f);
        for (labels, x) in read_records(&path, 1)? {
            let y = labels[0] as usize;
            if y >= 10 {
                return Err(Error::Ingestion {
                    path: path.clone(),
                    msg: format!("label {y} out of range"),
                });
            }
            samples.push(Sample {
                id: samples.len() as u64,
                x,
                y,
                origin: Origin::Native,
            });
        }
    }
    Dataset::new(
        match split {
            Split::Train => "cifar10-train",
            Split::Test => "cifar10-test",
        },
        10,
        vec![3, 32, 32],
        samples,
    )
}

/// Images from CIFAR-100 whose fine label is not in `excluded`, for use as an
/// out-of-distribution injection pool.
pub fn load_cifar100_pool(root: &Path, split: Split, excluded: &[usize]) -> Result<Vec<Vec<f64>>> {
    let dir = resolve(root, "cifar-100-binary");
    let path = dir.join(match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    });
    Ok(read_records(&path, 2)?
        .into_iter()
        .filter(|(labels, _)| !excluded.contains(&(labels[1] as usize)))
        .map(|(_, x)| x)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: &[u8], fill: u8) -> Vec<u8> {
        let mut r = label.to_vec();
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn reads_cifar10_layout() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-10-batches-bin");
        fs::create_dir(&sub).unwrap();
        for i in 1..=5u8 {
            let mut bytes = record(&[i], 255);
            bytes.extend(record(&[0], 0));
            fs::write(sub.join(format!("data_batch_{i}.bin")), bytes).unwrap();
        }
        let d = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.num_classes(), 10);
        assert_eq!(d.ids(), (0..10).collect::<Vec<_>>());
        assert_eq!(d.samples()[2].y, 2);
        assert!(d.samples().iter().all(|s| s.x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(d.samples()[0].x[0], 1.0);
        assert_eq!(d.samples()[1].x[0], 0.0);
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("test_batch.bin")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn cifar100_pool_filters_excluded_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(&[0, 58], 10);
        bytes.extend(record(&[1, 3], 20));
        bytes.extend(record(&[2, 90], 30));
        fs::write(dir.path().join("train.bin"), bytes).unwrap();
        let pool = load_cifar100_pool(dir.path(), Split::Train, DEFAULT_CIFAR100_EXCLUDED).unwrap();
        assert_eq!(pool.len(), 1);
        assert!((pool[0][0] - 20.0 / 255.0).abs() < 1e-15);
    }
}
