//! IDX (MNIST family) and CIFAR-10 binary loaders, normalization, seeded
//! splitting and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::mix_seed;
use crate::tensor::{Element, Tensor4};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `(N, C, H, W)` with pixels in `[0, 1]` (or normalized), and one
/// class index per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor4<f32>,
        labels: Vec<usize>,
        class_count: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::argument(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `(C, H, W)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Self {
        let [_, c, h, w] = self.images.dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Self {
            images: Tensor4::new([indices.len(), c, h, w], data).expect("subset dims"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: split.into(),
        }
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn truncate(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split.clone())
    }

    /// Images and labels for one batch, converted to the working precision.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let [_, c, h, w] = self.images.dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(
                self.images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| T::of(v as f64)),
            );
        }
        let x = Tensor4::new([indices.len(), c, h, w], data).expect("batch dims");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                at as u64,
                format!("truncated header: file is {} bytes", bytes.len()),
            )
        })
}

/// Item count from an IDX header, without reading the payload.
pub fn idx_item_count(path: impl AsRef<Path>) -> Result<usize> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = [0u8; 8];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&head, 0)?;
    if magic != IDX_IMAGES && magic != IDX_LABELS {
        return Err(Error::format(0, format!("bad IDX magic {magic:#010x}")));
    }
    Ok(be_u32(&head, 4)? as usize)
}

/// Parses an IDX image file into `(N, rows, cols)` and its pixel bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<([usize; 3], &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(
            (16 + payload.len().min(need)) as u64,
            format!("expected {need} pixel bytes, found {}", payload.len()),
        ));
    }
    Ok(([n, rows, cols], payload))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            0,
            format!("bad label magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            (8 + payload.len().min(n)) as u64,
            format!("expected {n} label bytes, found {}", payload.len()),
        ));
    }
    Ok(payload)
}

/// Loads an IDX image/label pair (10 classes), scaling pixels to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let ([n, rows, cols], pixels) = parse_idx_images(&image_bytes)?;
    let raw_labels = parse_idx_labels(&label_bytes)?;
    if raw_labels.len() != n {
        return Err(Error::format(
            4,
            format!(
                "{} has {n} images but {} has {} labels",
                images.display(),
                labels.display(),
                raw_labels.len()
            ),
        ));
    }
    if let Some(pos) = raw_labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(
            8 + pos as u64,
            format!("label {} outside 10 classes", raw_labels[pos]),
        ));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let split = images
        .file_name()
        .map(|s| {
            s.to_string_lossy()
                .split('-')
                .next()
                .unwrap_or_default()
                .to_string()
        })
        .unwrap_or_default();
    LabeledDataset::new(
        Tensor4::new([n, 1, rows, cols], data)?,
        raw_labels.iter().map(|&l| l as usize).collect(),
        10,
        split,
    )
}

/// Serializes a single-channel dataset with `[0, 1]` pixels back to IDX
/// `(images, labels)` bytes.
pub fn to_idx_bytes(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = ds.images.dims();
    if c != 1 {
        return Err(Error::shape(format!(
            "IDX images have one channel, dataset has {c}"
        )));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::argument("IDX labels are single bytes"));
    }
    let mut images = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Parses CIFAR-10 binary batch bytes: records of one label byte and 3072
/// channel-planar pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::format(
            (whole * CIFAR_RECORD) as u64,
            format!(
                "file length {} is not a multiple of {CIFAR_RECORD}: expected {} bytes for {} records",
                bytes.len(),
                (whole + 1) * CIFAR_RECORD,
                whole + 1
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                (i * CIFAR_RECORD) as u64,
                format!("label {} outside 10 classes", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 batch files.
pub fn load_cifar10<P: AsRef<Path>>(files: &[P], split: &str) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = f.as_ref();
        let (p, l) = parse_cifar10(&read(path)?).map_err(|e| match e {
            Error::Format { offset, message } => {
                Error::format(offset, format!("{}: {message}", path.display()))
            }
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    LabeledDataset::new(
        Tensor4::new([labels.len(), 3, 32, 32], pixels)?,
        labels,
        10,
        split,
    )
}

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(ds: &LabeledDataset) -> Self {
        let [n, c, h, w] = ds.images.dims();
        let count = (n * h * w).max(1) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for q in 0..c {
            let sum: f64 = (0..n)
                .flat_map(|b| ds.images.plane(b, q))
                .map(|&v| v as f64)
                .sum();
            let m = sum / count;
            let sq: f64 = (0..n)
                .flat_map(|b| ds.images.plane(b, q))
                .map(|&v| (v as f64 - m).powi(2))
                .sum();
            mean[q] = m;
            std[q] = (sq / count).sqrt();
        }
        Self { mean, std }
    }
}

/// `x' = (x - mean_c) / std_c` per channel.
pub fn normalize(ds: &LabeledDataset, stats: &ChannelStats) -> Result<LabeledDataset> {
    let c = ds.images.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::shape(format!(
            "stats for {} channels, dataset has {c}",
            stats.mean.len()
        )));
    }
    if let Some(q) = stats.std.iter().position(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::argument(format!(
            "channel {q} has zero standard deviation"
        )));
    }
    let mut out = ds.clone();
    for b in 0..ds.images.batch() {
        for q in 0..c {
            let (m, s) = (stats.mean[q], stats.std[q]);
            for v in out.images.plane_mut(b, q) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
    Ok(out)
}

/// Seeded deterministic split into `(train, val)` with `val_count` samples
/// held out. Both parts keep the source order.
pub fn split_train_val(
    ds: &LabeledDataset,
    val_count: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if val_count > ds.len() {
        return Err(Error::argument(format!(
            "cannot hold out {val_count} of {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = order.split_at_mut(val_count);
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(train, "train"), ds.subset(val, "val")))
}

/// Shuffled sample indices for one epoch, chunked into batches. The final
/// partial batch is kept.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
