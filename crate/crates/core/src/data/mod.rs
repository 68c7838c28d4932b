//! MedMNIST-style dataset loading, normalization, augmentation and batching.

pub mod npz;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub use npz::{encode_npy, parse_npy, write_npz, NpyArray, NpzReader};

pub const NUM_CLASSES: usize = 8;

/// Class names by label index, in the index order used by the archive.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "basophils",
    "eosinophils",
    "erythroblasts",
    "immature granulocytes",
    "lymphocytes",
    "monocytes",
    "neutrophils",
    "platelets",
];

/// Pixels of zero padding on each side before random cropping.
pub const CROP_PAD: usize = 2;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a readable ZIP archive: {reason}")]
    Archive { path: String, reason: String },
    #[error("archive is missing member `{member}`")]
    MissingMember { member: String },
    #[error("{member}: malformed NPY data: {reason}")]
    BadNpy { member: String, reason: String },
    #[error("{member}: unsupported NPY version {major}.{minor}")]
    UnsupportedVersion { member: String, major: u8, minor: u8 },
    #[error("{member}: unsupported dtype `{descr}` (expected uint8)")]
    UnsupportedDtype { member: String, descr: String },
    #[error("{member}: fortran-ordered arrays are not supported")]
    FortranOrder { member: String },
    #[error("{member}: shape mismatch: {reason}")]
    ShapeMismatch { member: String, reason: String },
    #[error("{member}: label {label} at index {index} is out of range")]
    LabelOutOfRange { member: String, index: usize, label: u8 },
    #[error("dataset split is empty")]
    Empty,
    #[error("holdout fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
}

/// One split: images `[N, H, W, C]` scaled to `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::ShapeMismatch {
                member: "split".into(),
                reason: format!("images {:?} vs {} labels", images.shape(), labels.len()),
            });
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Sub-split with the given sample indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            images: self.images.gather_leading(indices).expect("indices in range"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// All splits of an archive. The official validation split is kept for
/// reporting but not used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub class_names: Vec<String>,
}

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Per-class sample counts over all three splits.
    pub fn class_totals(&self) -> [usize; NUM_CLASSES] {
        let mut totals = [0; NUM_CLASSES];
        for split in [&self.train, &self.val, &self.test] {
            for (t, c) in totals.iter_mut().zip(split.class_counts()) {
                *t += c;
            }
        }
        totals
    }
}

/// `value / 255`.
pub fn normalize(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// `[N, K]` one-hot rows.
pub fn one_hot(labels: &[u8], k: usize) -> Result<Tensor<f32>, DataError> {
    let mut out = vec![0.0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(DataError::LabelOutOfRange { member: "labels".into(), index: i, label: l });
        }
        out[i * k + l as usize] = 1.0;
    }
    Ok(Tensor::new([labels.len(), k], out).expect("shape"))
}

fn load_split(reader: &mut NpzReader, name: &str) -> Result<Split, DataError> {
    let images_member = format!("{name}_images.npy");
    let labels_member = format!("{name}_labels.npy");
    let images = reader.read(&images_member)?;
    let labels = reader.read(&labels_member)?;
    if images.shape.len() != 4 {
        return Err(DataError::ShapeMismatch {
            member: images_member,
            reason: format!("expected [N, H, W, C], got {:?}", images.shape),
        });
    }
    let n = images.shape[0];
    let flat_ok = match labels.shape.as_slice() {
        [m] => *m == n,
        [m, 1] => *m == n,
        _ => false,
    };
    if !flat_ok {
        return Err(DataError::ShapeMismatch {
            member: labels_member,
            reason: format!("expected [{n}] or [{n}, 1] labels, got {:?}", labels.shape),
        });
    }
    if let Some((index, &label)) = labels.data.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(DataError::LabelOutOfRange { member: labels_member, index, label });
    }
    let pixels = Tensor::new(images.shape.clone(), normalize(&images.data)).expect("shape");
    Ok(Split { images: pixels, labels: labels.data })
}

/// Read `{train,val,test}_{images,labels}.npy` from a MedMNIST archive.
pub fn load_npz(path: impl AsRef<Path>) -> Result<DatasetBundle, DataError> {
    let mut reader = NpzReader::open(path)?;
    for split in SPLITS {
        for kind in ["images", "labels"] {
            let member = format!("{split}_{kind}.npy");
            if !reader.contains(&member) {
                return Err(DataError::MissingMember { member });
            }
        }
    }
    Ok(DatasetBundle {
        train: load_split(&mut reader, "train")?,
        val: load_split(&mut reader, "val")?,
        test: load_split(&mut reader, "test")?,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Inverse of [`load_npz`] for a bundle whose pixels are multiples of 1/255.
pub fn save_npz(path: impl AsRef<Path>, bundle: &DatasetBundle, compress: bool) -> Result<(), DataError> {
    let mut arrays = Vec::new();
    for name in SPLITS {
        let split = bundle.split(name).expect("known split");
        let pixels = split.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        arrays.push((format!("{name}_images.npy"), NpyArray::new(split.images.shape().to_vec(), pixels)));
        arrays.push((format!("{name}_labels.npy"), NpyArray::new(vec![split.len(), 1], split.labels.clone())));
    }
    let members: Vec<(&str, &NpyArray)> = arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
    write_npz(path, &members, compress)
}

/// Random-crop offsets into the padded image and flip flag for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// Centered crop without flip: the identity transform.
    pub const IDENTITY: AugmentParams = AugmentParams { dy: CROP_PAD, dx: CROP_PAD, flip: false };

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            dy: rng.gen_range(0..=2 * CROP_PAD),
            dx: rng.gen_range(0..=2 * CROP_PAD),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Zero-pad by [`CROP_PAD`], crop an `h × w` window at `(dy, dx)`, then
/// optionally mirror horizontally. `img` is one `[h, w, c]` image.
pub fn augment_image(img: &[f32], h: usize, w: usize, c: usize, p: AugmentParams) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let Some(sy) = (y + p.dy).checked_sub(CROP_PAD).filter(|&s| s < h) else { continue };
        for x in 0..w {
            let Some(sx) = (x + p.dx).checked_sub(CROP_PAD).filter(|&s| s < w) else { continue };
            let ox = if p.flip { w - 1 - x } else { x };
            let src = (sy * w + sx) * c;
            let dst = (y * w + ox) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Independently crop and flip every image of a `[B, H, W, C]` batch.
pub fn augment(batch: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let s = batch.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = h * w * c;
    let mut out = Vec::with_capacity(batch.len());
    for img in batch.data().chunks(per) {
        out.extend(augment_image(img, h, w, c, AugmentParams::sample(&mut rng)));
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

/// Seeded shuffle of `0..n`, returning `(fit, holdout)` index sets where the
/// holdout is the last `round(n · fraction)` shuffled indices.
pub fn holdout_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x401d])));
    let n_val = (n as f64 * fraction).round() as usize;
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

pub fn holdout_split(split: &Split, fraction: f64, seed: u64) -> Result<(Split, Split), DataError> {
    let (fit, val) = holdout_indices(split.len(), fraction, seed)?;
    Ok((split.select(&fit), split.select(&val)))
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub onehot: Tensor<f32>,
    pub labels: Vec<u8>,
    /// Positions of these samples in the source split.
    pub indices: Vec<usize>,
}

/// Shuffled minibatches over one epoch of a split.
pub struct BatchIterator<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    batch_index: u64,
    augment_seed: Option<u64>,
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut images = self.split.images.gather_leading(&indices).expect("indices in range");
        if let Some(seed) = self.augment_seed {
            images = augment(&images, derive_seed(seed, &[self.batch_index]));
        }
        self.batch_index += 1;
        let labels: Vec<u8> = indices.iter().map(|&i| self.split.labels[i]).collect();
        let onehot = one_hot(&labels, NUM_CLASSES).expect("labels validated at load");
        Some(Batch { images, onehot, labels, indices })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIterator<'_> {}

/// Minibatches for epoch `epoch`: a fresh permutation derived from
/// `(seed, epoch)`, with optional per-batch augmentation.
pub fn batches(
    split: &Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
) -> Result<BatchIterator<'_>, DataError> {
    if split.is_empty() || batch_size == 0 {
        return Err(DataError::Empty);
    }
    let epoch_seed = derive_seed(seed, &[0xba7c, epoch]);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(BatchIterator {
        split,
        order,
        batch_size,
        cursor: 0,
        batch_index: 0,
        augment_seed: augment.then(|| derive_seed(epoch_seed, &[0xa06])),
    })
}
