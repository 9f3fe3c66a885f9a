//! Classification datasets and their split across federated clients.

pub mod idx;
mod partition;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::nn::{Batch, Matrix};
use crate::rng;

pub use idx::IdxError;
pub use partition::{partition_dirichlet, partition_iid, Partition};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed IDX file {}: {source}", path.display())]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error(
        "count mismatch: {} holds {images} images but {} holds {labels} labels",
        images_path.display(),
        labels_path.display()
    )]
    CountMismatch {
        images_path: PathBuf,
        images: usize,
        labels_path: PathBuf,
        labels: usize,
    },
}

/// Samples (`num_samples x dim`) with labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::InvalidArgument("dataset has no samples".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(DataError::InvalidArgument(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if class_count == 0 {
            return Err(DataError::InvalidArgument("class_count must be positive".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::InvalidArgument(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Widens the label space, e.g. to align a train and a test file.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self, DataError> {
        if class_count < self.class_count {
            return Err(DataError::InvalidArgument(format!(
                "cannot shrink class count from {} to {class_count}",
                self.class_count
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::InvalidArgument(format!(
                "index {i} out of range for {} samples",
                self.len()
            )));
        }
        Dataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Stratified split into `(train, test)`: each class sends
    /// `round(test_fraction * class_size)` samples to the test side.
    pub fn split_train_test(
        &self,
        test_fraction: f64,
        seed: u64,
    ) -> Result<(Dataset, Dataset), DataError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::InvalidArgument(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = rng::stream_rng(seed, rng::Stream::Split, 0, 0);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let cut = (test_fraction * idx.len() as f64).round() as usize;
            test.extend_from_slice(&idx[..cut]);
            train.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        if train.is_empty() || test.is_empty() {
            return Err(DataError::InvalidArgument(
                "train/test split left one side empty".into(),
            ));
        }
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Gaussian blobs: class `c` is centred on a seed-dependent point drawn from
/// a standard normal per coordinate; samples add `spread * N(0, 1)` noise.
/// Rows are ordered by class.
pub fn synth_blobs(
    class_count: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if class_count < 2 || dim == 0 || samples_per_class == 0 {
        return Err(DataError::InvalidArgument(format!(
            "blobs need class_count >= 2, dim >= 1, samples_per_class >= 1 \
             (got {class_count}, {dim}, {samples_per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "spread must be finite and non-negative, got {spread}"
        )));
    }
    let mut rng = rng::stream_rng(seed, rng::Stream::Data, 0, 0);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = class_count * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(c + spread * noise);
            }
            labels.push(class);
        }
    }
    let inputs = Matrix::from_vec(n, dim, data).expect("sized buffer");
    Dataset::new(inputs, labels, class_count)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = idx::parse_images(&read_file(images_path)?).map_err(|source| DataError::Idx {
        path: images_path.to_path_buf(),
        source,
    })?;
    let labels = idx::parse_labels(&read_file(labels_path)?).map_err(|source| DataError::Idx {
        path: labels_path.to_path_buf(),
        source,
    })?;
    dataset_from_idx(&images, &labels).map_err(|e| match e {
        DataError::CountMismatch { images, labels, .. } => DataError::CountMismatch {
            images_path: images_path.to_path_buf(),
            images,
            labels_path: labels_path.to_path_buf(),
            labels,
        },
        other => other,
    })
}

/// Builds a dataset from decoded IDX content.
pub fn dataset_from_idx(images: &idx::IdxImages, labels: &[u8]) -> Result<Dataset, DataError> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images_path: PathBuf::new(),
            images: images.count,
            labels_path: PathBuf::new(),
            labels: labels.len(),
        });
    }
    let inputs = Matrix::from_vec(
        images.count,
        images.image_len(),
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(3, 2, 100, 0.5, 7).unwrap();
        let b = synth_blobs(3, 2, 100, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_blobs(3, 2, 100, 0.5, 8).unwrap());
    }

    #[test]
    fn blobs_histogram_is_exact() {
        let ds = synth_blobs(5, 3, 17, 1.0, 1).unwrap();
        assert_eq!(ds.class_histogram(), vec![17; 5]);
        assert_eq!(ds.len(), 85);
    }

    #[test]
    fn blobs_reject_bad_arguments() {
        assert!(synth_blobs(1, 2, 10, 1.0, 0).is_err());
        assert!(synth_blobs(2, 0, 10, 1.0, 0).is_err());
        assert!(synth_blobs(2, 2, 0, 1.0, 0).is_err());
        assert!(synth_blobs(2, 2, 5, f64::NAN, 0).is_err());
    }

    #[test]
    fn stratified_split() {
        let ds = synth_blobs(4, 2, 50, 1.0, 3).unwrap();
        let (train, test) = ds.split_train_test(0.2, 9).unwrap();
        assert_eq!(train.class_histogram(), vec![40; 4]);
        assert_eq!(test.class_histogram(), vec![10; 4]);
        assert!(ds.split_train_test(1.0, 9).is_err());
    }

    #[test]
    fn idx_pair_from_disk() {
        let dir = std::env::temp_dir().join(format!("fedldf-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("img.idx");
        let lbl = dir.join("lbl.idx");
        std::fs::write(&img, idx::encode_images(2, 2, &[vec![0, 255, 255, 0], vec![255; 4]]))
            .unwrap();
        std::fs::write(&lbl, idx::encode_labels(&[1, 0])).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.inputs().as_slice(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.class_count(), 2);

        std::fs::write(&lbl, idx::encode_labels(&[1, 0, 1])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3, .. }));
        assert!(err.to_string().contains("lbl.idx"));

        std::fs::write(&img, idx::encode_labels(&[1])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(matches!(err, DataError::Idx { source: IdxError::BadMagic { .. }, .. }));
        assert!(err.to_string().contains("img.idx"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
