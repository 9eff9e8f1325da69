//! Synthetic MNIST-shaped data for the determinism check.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssprop_core::datasets::to_idx_bytes;
use ssprop_core::{LabeledDataset, Tensor4};

/// 28x28 images where class `c` brightens a 6x6 patch at a class-specific
/// spot, over uniform noise.
pub fn synthetic(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let mut data = Vec::with_capacity(n * 784);
    for &c in &labels {
        let (r0, c0) = (2 + (c / 5) * 12, 1 + (c % 5) * 5);
        for r in 0..28 {
            for col in 0..28 {
                let inside = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&col);
                let base = if inside { 0.8 } else { 0.0 };
                let v: f32 = base + rng.random_range(0.0..0.2);
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    LabeledDataset::new(
        Tensor4::new([n, 1, 28, 28], data).unwrap(),
        labels,
        10,
        "synthetic",
    )
    .unwrap()
}

/// Writes MNIST-named IDX files with `train` and `test` samples.
pub fn write_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (img, lab) = to_idx_bytes(&synthetic(n, seed)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
}

pub const SMALL_MODEL: &str = r#"
[[model.layers]]
type = "conv"
out_channels = 4
kernel = 3
padding = 1

[[model.layers]]
type = "batch-norm"

[[model.layers]]
type = "relu"

[[model.layers]]
type = "max-pool"
size = 2

[[model.layers]]
type = "conv"
out_channels = 8
kernel = 3
padding = 1

[[model.layers]]
type = "relu"

[[model.layers]]
type = "max-pool"
size = 2

[[model.layers]]
type = "linear"
out_features = 10
"#;

/// Config text for a short run on the data in `data`, writing to `out`.
/// `extra` is appended verbatim (for a `[sparsify]` table).
pub fn config_text(data: &Path, out: &Path, epochs: usize, extra: &str) -> String {
    format!(
        r#"seed = 7
epochs = {epochs}
batch_size = 32
eval_batch_size = 64
record_wall_time = false
output_dir = "{}"

[dataset]
kind = "mnist"
root = "{}"
val_fraction = 0.1

[optimizer]
lr = 2e-3
{SMALL_MODEL}
{extra}
"#,
        out.display(),
        data.display()
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}
