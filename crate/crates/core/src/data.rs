//! Dataset ingestion, synthetic generation, stratified splitting, batching.
//!
//! Three sources feed the pipeline: CSV files (header row, trailing `label`
//! column), IDX image/label pairs (the MNIST wire format), and seeded
//! synthetic generators addressable through a URI-like string such as
//! `synthetic:gaussian_blobs?C=3&dims=2&n=100&seed=1`.

use std::collections::BTreeMap;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples with integer labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize, name: &str) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(CoreError::Dataset(format!(
                "{n} samples but {} labels",
                labels.len()
            )));
        }
        if n < class_count {
            return Err(CoreError::Dataset(format!(
                "need at least one sample per class: N={n} < C={class_count}"
            )));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(CoreError::Dataset(format!(
                "label {l} at row {row} exceeds class count {class_count}"
            )));
        }
        Ok(LabeledDataset { features, labels, class_count, name: name.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Copies the given rows into a batch tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let w = self.features.row_len();
        let mut values = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (Tensor::new(shape, values).expect("gathered batch is well-formed"), labels)
    }

    /// Dataset restricted to the given rows.
    pub fn subset(&self, indices: &[usize], name: &str) -> LabeledDataset {
        let (features, labels) = self.gather(indices);
        LabeledDataset { features, labels, class_count: self.class_count, name: name.to_string() }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Loads a dataset from CSV: header row, numeric feature columns, trailing
/// column named `label` holding nonnegative integers. `C = 1 + max(label)`.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().next_back() != Some("label") {
        return Err(CoreError::Dataset(format!(
            "{}: expected last header column to be named \"label\", got {:?}",
            path.display(),
            headers.iter().next_back().unwrap_or("<empty>")
        )));
    }
    let width = headers.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 2; // 1-based, after the header line
        if record.len() != headers.len() {
            return Err(CoreError::Dataset(format!(
                "{}: row {row_no} has {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(width);
        for cell in record.iter().take(width) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CoreError::Dataset(format!(
                    "{}: row {row_no}: non-numeric cell {cell:?}",
                    path.display()
                ))
            })?;
            row.push(v);
        }
        let label_cell = record.iter().next_back().unwrap();
        let label: usize = label_cell.trim().parse().map_err(|_| {
            CoreError::Dataset(format!(
                "{}: row {row_no}: non-integer label {label_cell:?}",
                path.display()
            ))
        })?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(CoreError::Dataset(format!("{}: no data rows", path.display())));
    }
    let class_count = 1 + *labels.iter().max().unwrap();
    let features = Tensor::from_rows(&rows)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    LabeledDataset::new(features, labels, class_count, &name)
}

/// Writes a dataset in the schema [`load_csv`] reads. Samples are flattened
/// to one row each; feature columns are named `f0..f{D-1}`.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let width = dataset.features.row_len();
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    header.push("label".to_string());
    writer.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut record: Vec<String> =
            dataset.features.row(i).iter().map(|v| format!("{v}")).collect();
        record.push(dataset.labels[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair (the Fashion-MNIST wire format). Pixels are
/// scaled to `[0, 1]`; image and label counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut ir = BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Dataset(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels)?;

    let mut lr = BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::Dataset(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(CoreError::Dataset(format!(
            "{n} images but {ln} labels"
        )));
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels)?;

    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = 1 + labels.iter().copied().max().unwrap_or(0);
    let features = Tensor::new(vec![n, h, w], values)?;
    let name = images_path.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    LabeledDataset::new(features, labels, class_count, &name)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Isotropic unit-variance Gaussians around well-separated class means.
    GaussianBlobs,
    /// Concentric rings; not linearly separable.
    RingClasses,
    /// Gaussian blobs with labels flipped independently at the given rate.
    NoisyBlobs { label_noise_rate: f64 },
}

/// Deterministic synthetic dataset. Class means sit on a circle in the first
/// two feature dimensions (or on a line for `dims == 1`) with radius
/// `difficulty`, so larger `difficulty` means wider class separation.
pub fn make_synthetic(
    kind: SyntheticKind,
    class_count: usize,
    dims: usize,
    n_per_class: usize,
    difficulty: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class < 2 {
        return Err(CoreError::invalid(format!("n_per_class {n_per_class} < 2")));
    }
    if class_count < 2 || dims == 0 {
        return Err(CoreError::invalid("need C >= 2 and dims >= 1".to_string()));
    }
    if !difficulty.is_finite() || difficulty <= 0.0 {
        return Err(CoreError::invalid(format!("difficulty {difficulty} must be positive")));
    }
    if let SyntheticKind::NoisyBlobs { label_noise_rate } = kind {
        if !(0.0..=1.0).contains(&label_noise_rate) {
            return Err(CoreError::invalid(format!(
                "label_noise_rate {label_noise_rate} outside [0, 1]"
            )));
        }
    }

    let n = class_count * n_per_class;
    let root = SeededRng::new(seed);
    let mut feature_rng = root.substream("features");
    let mut values = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let mean = class_mean(c, class_count, dims, difficulty);
        for _ in 0..n_per_class {
            match kind {
                SyntheticKind::GaussianBlobs | SyntheticKind::NoisyBlobs { .. } => {
                    for &m in &mean {
                        values.push(m + feature_rng.normal());
                    }
                }
                SyntheticKind::RingClasses => {
                    // Radius (c+1)*difficulty with unit radial noise, random angle.
                    let radius = (c as f64 + 1.0) * difficulty + feature_rng.normal();
                    let angle = feature_rng.uniform_in(0.0, std::f64::consts::TAU);
                    let mut point = vec![0.0; dims];
                    if dims == 1 {
                        point[0] = radius * angle.cos();
                    } else {
                        point[0] = radius * angle.cos();
                        point[1] = radius * angle.sin();
                        for d in point.iter_mut().skip(2) {
                            *d = feature_rng.normal();
                        }
                    }
                    values.extend_from_slice(&point);
                }
            }
            labels.push(c);
        }
    }

    if let SyntheticKind::NoisyBlobs { label_noise_rate } = kind {
        let mut noise_rng = root.substream("label-noise");
        for label in labels.iter_mut() {
            if noise_rng.uniform() < label_noise_rate {
                // Uniform among the other classes.
                let shift = 1 + noise_rng.index(class_count - 1);
                *label = (*label + shift) % class_count;
            }
        }
    }

    let kind_name = match kind {
        SyntheticKind::GaussianBlobs => "gaussian_blobs".to_string(),
        SyntheticKind::RingClasses => "ring_classes".to_string(),
        SyntheticKind::NoisyBlobs { label_noise_rate } => format!("noisy_blobs({label_noise_rate})"),
    };
    let name = format!("synthetic:{kind_name}?C={class_count}&dims={dims}&n={n_per_class}&seed={seed}");
    LabeledDataset::new(Tensor::new(vec![n, dims], values)?, labels, class_count, &name)
}

fn class_mean(c: usize, class_count: usize, dims: usize, difficulty: f64) -> Vec<f64> {
    let mut mean = vec![0.0; dims];
    if dims == 1 {
        mean[0] = difficulty * (c as f64 - (class_count as f64 - 1.0) / 2.0);
    } else {
        let angle = std::f64::consts::TAU * c as f64 / class_count as f64;
        mean[0] = difficulty * angle.cos();
        mean[1] = difficulty * angle.sin();
    }
    mean
}

/// Parses a `synthetic:<kind>?k=v&...` URI. Recognized keys: `C`, `dims`,
/// `n` (per class), `seed`, `difficulty`, `noise` (noisy_blobs only).
pub fn parse_synthetic_uri(uri: &str) -> Result<LabeledDataset> {
    let rest = uri
        .strip_prefix("synthetic:")
        .ok_or_else(|| CoreError::Dataset(format!("not a synthetic URI: {uri:?}")))?;
    let (kind_name, query) = match rest.split_once('?') {
        Some((k, q)) => (k, q),
        None => (rest, ""),
    };
    let mut params: BTreeMap<&str, &str> = BTreeMap::new();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CoreError::Dataset(format!("malformed query {pair:?} in {uri:?}")))?;
        params.insert(k, v);
    }
    fn get<T: std::str::FromStr>(
        params: &BTreeMap<&str, &str>,
        key: &str,
        default: T,
    ) -> Result<T> {
        match params.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| CoreError::Dataset(format!("bad value {raw:?} for key {key:?}"))),
        }
    }
    let known = ["C", "dims", "n", "seed", "difficulty", "noise"];
    if let Some(bad) = params.keys().find(|k| !known.contains(k)) {
        return Err(CoreError::Dataset(format!("unknown synthetic key {bad:?} in {uri:?}")));
    }
    let class_count: usize = get(&params, "C", 3)?;
    let dims: usize = get(&params, "dims", 2)?;
    let n: usize = get(&params, "n", 100)?;
    let seed: u64 = get(&params, "seed", 0)?;
    let difficulty: f64 = get(&params, "difficulty", 3.0)?;
    let noise: f64 = get(&params, "noise", 0.1)?;
    let kind = match kind_name {
        "gaussian_blobs" => SyntheticKind::GaussianBlobs,
        "ring_classes" => SyntheticKind::RingClasses,
        "noisy_blobs" => SyntheticKind::NoisyBlobs { label_noise_rate: noise },
        other => {
            return Err(CoreError::Dataset(format!("unknown synthetic kind {other:?}")));
        }
    };
    make_synthetic(kind, class_count, dims, n, difficulty, seed)
}

// ---------------------------------------------------------------------------
// Splitting and batching
// ---------------------------------------------------------------------------

/// Stratified train/validation split parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainValSplit {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

/// Splits per class so each class's train share is within one sample of the
/// global fraction. Classes with at least two samples keep at least one
/// sample on each side.
pub fn stratified_split(dataset: &LabeledDataset, spec: SplitSpec) -> Result<TrainValSplit> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CoreError::invalid(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut rng = SeededRng::new(spec.seed).substream("split");
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for c in 0..dataset.class_count {
        let mut members: Vec<usize> =
            (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        rng.shuffle(&mut members);
        let nc = members.len();
        let mut take = (spec.train_fraction * nc as f64).round() as usize;
        if nc >= 2 {
            take = take.clamp(1, nc - 1);
        }
        train_idx.extend_from_slice(&members[..take]);
        val_idx.extend_from_slice(&members[take..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CoreError::Dataset("split produced an empty side".to_string()));
    }
    Ok(TrainValSplit {
        train: dataset.subset(&train_idx, &format!("{}/train", dataset.name)),
        val: dataset.subset(&val_idx, &format!("{}/val", dataset.name)),
    })
}

/// Index slices for one epoch: a seeded permutation of `0..n` chopped into
/// `batch_size` chunks (last chunk may be short). The permutation depends on
/// `(shuffle_seed, epoch_index)` only.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch_index: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(shuffle_seed).substream(&format!("batches/epoch{epoch_index}"));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
