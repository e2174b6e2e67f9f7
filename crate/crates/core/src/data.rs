//! Task construction: IDX ingestion, split-task slicing and a synthetic
//! Gaussian-cluster generator.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose, seeded};
use crate::tensor::DiffArray;

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdxError {
    #[error("expected {kind} magic 0x{expected:08x}, found 0x{found:08x}")]
    BadMagic {
        kind: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated IDX payload: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("IDX dimensions overflow the address space")]
    DimensionOverflow,
}

/// Images flattened row-major, pixels scaled into [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl ImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        match self.pixels_per_image() {
            0 => 0,
            p => self.pixels.len() / p,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Images(ImageSet),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

fn payload<'a>(bytes: &'a [u8], header: usize, dims: &[u32]) -> std::result::Result<&'a [u8], IdxError> {
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or(IdxError::DimensionOverflow)?;
    let needed = header.checked_add(len).ok_or(IdxError::DimensionOverflow)?;
    bytes.get(header..needed).ok_or(IdxError::Truncated {
        needed,
        have: bytes.len(),
    })
}

/// Parses an IDX file of either kind, dispatching on the magic number.
pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxData, IdxError> {
    match read_u32(bytes, 0)? {
        IDX_LABEL_MAGIC => parse_idx_labels(bytes).map(IdxData::Labels),
        IDX_IMAGE_MAGIC => parse_idx_images(bytes).map(IdxData::Images),
        found => Err(IdxError::BadMagic {
            kind: "image or label",
            expected: IDX_IMAGE_MAGIC,
            found,
        }),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            kind: "label",
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4)?;
    Ok(payload(bytes, 8, &[n])?.to_vec())
}

pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<ImageSet, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            kind: "image",
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4)?;
    let rows = read_u32(bytes, 8)?;
    let cols = read_u32(bytes, 12)?;
    let raw = payload(bytes, 16, &[n, rows, cols])?;
    Ok(ImageSet {
        rows: rows as usize,
        cols: cols as usize,
        pixels: raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inverse of [`parse_idx_images`]; pixels are rounded back to bytes.
pub fn encode_idx_images(images: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for d in [images.len(), images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(
        images
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Labelled inputs, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples {
            dim: self.dim,
            inputs: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Inputs as a constant `(len, dim)` array.
    pub fn input_array(&self) -> DiffArray {
        DiffArray::constant(&[self.len(), self.dim], self.inputs.clone()).expect("consistent sample buffer")
    }
}

/// One task of a sequence. Labels are local (`0..classes.len()`); local label
/// `i` corresponds to global class `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Samples,
    pub test: Samples,
}

impl TaskBundle {
    pub fn input_dim(&self) -> usize {
        self.train.dim
    }

    /// Output dimensions of this task's own label space.
    pub fn output_dims(&self) -> usize {
        self.classes.len()
    }

    /// Maps local labels to global class indices (single-head targets).
    pub fn global_labels(&self, local: &[usize]) -> Vec<usize> {
        local.iter().map(|&l| self.classes[l]).collect()
    }

    /// Keeps a seeded random subset of `limit` training examples, in original order.
    pub fn limit_train(&mut self, limit: usize, seed: u64) {
        if limit >= self.train.len() {
            return;
        }
        let mut rng = seeded(derive_seed(seed, &[self.index as u64, purpose::SUBSET]));
        let mut rows = index::sample(&mut rng, self.train.len(), limit).into_vec();
        rows.sort_unstable();
        self.train = self.train.select(&rows);
    }
}

/// One IDX image file paired with its label file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledImages {
    pub images: ImageSet,
    pub labels: Vec<u8>,
}

impl LabelledImages {
    pub fn from_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let images = parse_idx_images(images)?;
        let labels = parse_idx_labels(labels)?;
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    fn filter(&self, classes: &[usize]) -> Samples {
        let dim = self.images.pixels_per_image();
        let mut out = Samples {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for (i, &label) in self.labels.iter().enumerate() {
            if let Some(local) = classes.iter().position(|&c| c == label as usize) {
                out.inputs
                    .extend_from_slice(&self.images.pixels[i * dim..(i + 1) * dim]);
                out.labels.push(local);
            }
        }
        out
    }
}

/// Train and test halves of an IDX dataset directory.
pub struct IdxDataset {
    pub train: LabelledImages,
    pub test: LabelledImages,
}

/// Reads the four standard (Fashion-)MNIST files from `dir`.
pub fn load_idx_dir(dir: &Path) -> Result<IdxDataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    };
    Ok(IdxDataset {
        train: LabelledImages::from_bytes(&read("train-images-idx3-ubyte")?, &read("train-labels-idx1-ubyte")?)?,
        test: LabelledImages::from_bytes(&read("t10k-images-idx3-ubyte")?, &read("t10k-labels-idx1-ubyte")?)?,
    })
}

pub const DEFAULT_CLASS_PAIRS: [[usize; 2]; 5] = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]];

/// One task per class group, labels remapped to local indices.
pub fn make_split_tasks(
    train: &LabelledImages,
    test: &LabelledImages,
    class_groups: &[Vec<usize>],
) -> Result<Vec<TaskBundle>> {
    let mut seen = std::collections::HashSet::new();
    for group in class_groups {
        if group.is_empty() {
            return Err(Error::Data("empty class group".into()));
        }
        for &c in group {
            if !seen.insert(c) {
                return Err(Error::Data(format!("class {c} appears in more than one task")));
            }
        }
    }
    class_groups
        .iter()
        .enumerate()
        .map(|(index, classes)| {
            let task = TaskBundle {
                index,
                classes: classes.clone(),
                train: train.filter(classes),
                test: test.filter(classes),
            };
            for (local, class) in classes.iter().enumerate() {
                let present = |s: &Samples| s.labels.contains(&local);
                if !present(&task.train) || !present(&task.test) {
                    return Err(Error::Data(format!("class {class} has no samples")));
                }
            }
            Ok(task)
        })
        .collect()
}

/// Gaussian-cluster binary tasks; task `τ` holds global classes `2τ` and `2τ + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    /// Per-coordinate standard deviation around each cluster center.
    pub spread: f64,
    /// Minimum distance between clusters of different classes (random centers only).
    pub min_separation: f64,
    /// Explicit cluster centers, `2 * tasks * clusters_per_class` rows of `dim`;
    /// cluster `k` belongs to class `k / clusters_per_class`.
    pub centers: Option<Vec<Vec<f64>>>,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 3,
            dim: 2,
            clusters_per_class: 1,
            spread: 0.06,
            min_separation: 0.3,
            centers: None,
            train_per_task: 500,
            test_per_task: 500,
            seed: 7,
        }
    }
}

/// Generated tasks plus the cluster centers in the scaled [0, 1] coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTasks {
    pub tasks: Vec<TaskBundle>,
    /// `centers[class]` lists that class's cluster centers.
    pub centers: Vec<Vec<Vec<f64>>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn make_synthetic_split(spec: &SyntheticSpec) -> Result<SyntheticTasks> {
    if spec.tasks == 0 || spec.clusters_per_class == 0 {
        return Err(Error::Config(
            "synthetic spec needs at least one task and one cluster per class".into(),
        ));
    }
    if !(2..=16).contains(&spec.dim) {
        return Err(Error::Config(format!(
            "synthetic dim must be in 2..=16, got {}",
            spec.dim
        )));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Config(format!(
            "synthetic spread must be >= 0, got {}",
            spec.spread
        )));
    }
    if spec.train_per_task < 2 || spec.test_per_task < 2 {
        return Err(Error::Config(
            "synthetic tasks need at least 2 train and 2 test samples".into(),
        ));
    }
    let classes = 2 * spec.tasks;
    let n_clusters = classes * spec.clusters_per_class;
    let class_of = |k: usize| k / spec.clusters_per_class;
    let mut rng = seeded(derive_seed(spec.seed, &[purpose::INIT]));

    let raw_centers: Vec<Vec<f64>> = match &spec.centers {
        Some(c) => {
            if c.len() != n_clusters || c.iter().any(|p| p.len() != spec.dim) {
                return Err(Error::Config(format!(
                    "expected {n_clusters} centers of dimension {}",
                    spec.dim
                )));
            }
            c.clone()
        }
        None => {
            let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
            let mut attempts = 0;
            while centers.len() < n_clusters {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::Config(format!(
                        "could not place {n_clusters} clusters with separation {}",
                        spec.min_separation
                    )));
                }
                let cand: Vec<f64> = (0..spec.dim).map(|_| rng.random::<f64>()).collect();
                let k = centers.len();
                let ok = centers
                    .iter()
                    .enumerate()
                    .all(|(j, c)| class_of(j) == class_of(k) || distance(c, &cand) >= spec.min_separation);
                if ok {
                    centers.push(cand);
                }
            }
            centers
        }
    };
    if spec.spread == 0.0 {
        for a in 0..n_clusters {
            for b in a + 1..n_clusters {
                if class_of(a) != class_of(b) && distance(&raw_centers[a], &raw_centers[b]) == 0.0 {
                    return Err(Error::Config(
                        "degenerate synthetic spec: coincident centers of different classes with zero spread".into(),
                    ));
                }
            }
        }
    }

    // split s of task t, local class c, i-th example uses cluster i mod clusters_per_class
    let mut draw = |task: usize, n: usize| -> Samples {
        let mut s = Samples {
            dim: spec.dim,
            inputs: Vec::with_capacity(n * spec.dim),
            labels: Vec::with_capacity(n),
        };
        for i in 0..n {
            let local = i % 2;
            let cluster = (2 * task + local) * spec.clusters_per_class + (i / 2) % spec.clusters_per_class;
            for &c in &raw_centers[cluster] {
                let z: f64 = StandardNormal.sample(&mut rng);
                s.inputs.push(c + spec.spread * z);
            }
            s.labels.push(local);
        }
        s
    };
    let mut tasks: Vec<TaskBundle> = (0..spec.tasks)
        .map(|t| TaskBundle {
            index: t,
            classes: vec![2 * t, 2 * t + 1],
            train: draw(t, spec.train_per_task),
            test: draw(t, spec.test_per_task),
        })
        .collect();

    // joint per-coordinate min-max scaling over every generated point
    let mut lo = vec![f64::INFINITY; spec.dim];
    let mut hi = vec![f64::NEG_INFINITY; spec.dim];
    for t in &tasks {
        for s in [&t.train, &t.test] {
            for row in s.inputs.chunks(spec.dim) {
                for d in 0..spec.dim {
                    lo[d] = lo[d].min(row[d]);
                    hi[d] = hi[d].max(row[d]);
                }
            }
        }
    }
    let scale = |d: usize, x: f64| {
        let range = hi[d] - lo[d];
        if range > 0.0 {
            ((x - lo[d]) / range).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    for t in &mut tasks {
        for s in [&mut t.train, &mut t.test] {
            for (i, x) in s.inputs.iter_mut().enumerate() {
                *x = scale(i % spec.dim, *x);
            }
        }
    }
    let mut centers = vec![Vec::new(); classes];
    for (k, c) in raw_centers.iter().enumerate() {
        centers[class_of(k)].push(c.iter().enumerate().map(|(d, &x)| scale(d, x)).collect());
    }
    Ok(SyntheticTasks { tasks, centers })
}

/// `count x dim` matrix of i.i.d. Uniform[0, 1] entries.
pub fn sample_uniform_context(dim: usize, count: usize, seed: u64) -> Result<DiffArray> {
    if count == 0 || dim == 0 {
        return Err(Error::Invalid("uniform context needs count >= 1 and dim >= 1".into()));
    }
    let mut rng = seeded(seed);
    let values = (0..dim * count).map(|_| rng.random::<f64>()).collect();
    Ok(DiffArray::constant(&[count, dim], values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn single_white_pixel() {
        let set = parse_idx_images(&images(1, 1, 1, &[255])).unwrap();
        assert_eq!(set.pixels, vec![1.0]);
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn label_parser_rejects_image_magic() {
        let err = parse_idx_labels(&images(1, 1, 1, &[0])).unwrap_err();
        assert!(err.to_string().contains("expected label magic"), "{err}");
    }

    #[test]
    fn truncated_and_overflowing_payloads() {
        assert!(matches!(
            parse_idx_images(&images(2, 2, 2, &[0; 7])),
            Err(IdxError::Truncated { needed: 24, have: 23 })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(IdxError::Truncated { .. })));
        let huge = images(u32::MAX, u32::MAX, u32::MAX, &[]);
        let res = parse_idx_images(&huge);
        assert!(matches!(
            res,
            Err(IdxError::DimensionOverflow) | Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn generic_parse_dispatches() {
        assert!(matches!(parse_idx(&encode_idx_labels(&[1, 2])), Ok(IdxData::Labels(l)) if l == [1, 2]));
        assert!(matches!(parse_idx(&images(1, 1, 2, &[0, 255])), Ok(IdxData::Images(_))));
        assert!(matches!(parse_idx(&[0, 0, 9, 9]), Err(IdxError::BadMagic { .. })));
    }

    fn toy_split() -> (LabelledImages, LabelledImages) {
        let labels: Vec<u8> = (0..40).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = (0..40u32).flat_map(|i| [i as u8, 255 - i as u8]).collect();
        let set = LabelledImages::from_bytes(&images(40, 1, 2, &pixels), &encode_idx_labels(&labels)).unwrap();
        (set.clone(), set)
    }

    #[test]
    fn split_tasks_partition_and_remap() {
        let (train, test) = toy_split();
        let groups: Vec<Vec<usize>> = DEFAULT_CLASS_PAIRS.iter().map(|p| p.to_vec()).collect();
        let tasks = make_split_tasks(&train, &test, &groups).unwrap();
        assert_eq!(tasks.len(), 5);
        assert_eq!(tasks.iter().map(|t| t.train.len()).sum::<usize>(), 40);
        for t in &tasks {
            assert!(t.train.labels.iter().all(|&l| l < 2));
        }
        assert_eq!(tasks[1].global_labels(&[0, 1]), vec![2, 3]);
    }

    #[test]
    fn split_tasks_reject_overlap_and_missing_classes() {
        let (train, test) = toy_split();
        assert!(make_split_tasks(&train, &test, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(make_split_tasks(&train, &test, &[vec![0, 11]]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec {
            tasks: 2,
            seed: 7,
            ..Default::default()
        };
        let a = make_synthetic_split(&spec).unwrap();
        let b = make_synthetic_split(&spec).unwrap();
        assert_eq!(a, b);
        for t in &a.tasks {
            assert_eq!(t.train.len(), 500);
            assert!(t
                .train
                .inputs
                .iter()
                .chain(&t.test.inputs)
                .all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn synthetic_rejects_degenerate_spec() {
        let spec = SyntheticSpec {
            tasks: 1,
            spread: 0.0,
            centers: Some(vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
            ..Default::default()
        };
        assert!(make_synthetic_split(&spec).is_err());
        let bad_dim = SyntheticSpec {
            dim: 1,
            ..Default::default()
        };
        assert!(make_synthetic_split(&bad_dim).is_err());
    }

    #[test]
    fn uniform_context_is_seeded() {
        let a = sample_uniform_context(3, 4, 11).unwrap();
        assert_eq!(a.shape(), &[4, 3]);
        assert_eq!(a.values(), sample_uniform_context(3, 4, 11).unwrap().values());
        assert!(a.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(sample_uniform_context(3, 0, 11).is_err());
    }

    #[test]
    fn limit_train_keeps_verbatim_rows() {
        let mut t = make_synthetic_split(&SyntheticSpec {
            tasks: 1,
            ..Default::default()
        })
        .unwrap()
        .tasks
        .remove(0);
        let full = t.train.clone();
        t.limit_train(50, 3);
        assert_eq!(t.train.len(), 50);
        for i in 0..50 {
            assert!((0..full.len()).any(|j| full.row(j) == t.train.row(i)));
        }
    }
}
