//! MNIST IDX parsing, normalization, and mini-batch planning.
//!
//! The IDX layout is fixed by the dataset distribution: a 4-byte big-endian
//! magic (0x00000801 for labels, 0x00000803 for images), one 4-byte
//! big-endian size per dimension, then the raw uint8 payload. Gzip'd files
//! are accepted transparently by sniffing the 0x1f8b prefix.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images normalized to `[0,1]` by `/255`, labels in `[0,9]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Loads one split from a directory holding the standard MNIST file
    /// names (optionally with a `.gz` suffix).
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self> {
        let (img_name, lbl_name) = match split {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        };
        let images = parse_idx_images(&read_maybe_gz(dir, img_name)?)?;
        let labels = parse_idx_labels(&read_maybe_gz(dir, lbl_name)?)?;
        Self::new(images, labels, split)
    }

    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "Dataset",
                expected: format!("{} labels", n),
                actual: format!("{} labels", labels.len()),
            });
        }
        // [N,H,W] -> [N,1,H,W]
        let (h, w) = (images.shape()[1], images.shape()[2]);
        let images = images.reshaped(vec![n, 1, h, w])?;
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    /// Seeded subset of the dataset, without replacement, in draw order.
    pub fn subset(&self, count: usize, seed: u64) -> Dataset {
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(count.min(self.len()));
        let (images, labels) = self.gather(&indices);
        Dataset {
            images,
            labels,
            split: self.split,
        }
    }

    /// Copies the given rows into a new `[B,1,H,W]` tensor + label vector.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let stride: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(shape, data).expect("gathered shape"), labels)
    }
}

fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let path = if plain.exists() { plain } else { gz };
    let mut bytes = Vec::new();
    std::fs::File::open(&path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {}", path.display(), e),
            ))
        })?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses an IDX image file into a `[N,rows,cols]` tensor scaled to `[0,1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let bytes = gunzip_if_needed(bytes)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::UnknownMagic(magic));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[16..needed].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

/// Parses an IDX label file into a label vector.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = gunzip_if_needed(bytes)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::UnknownMagic(magic));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Serializes labels back to IDX bytes (round-trip inverse of
/// [`parse_idx_labels`]).
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Epoch ordering: a seeded permutation of `[0, N)` cut into batches of `B`,
/// final partial batch included.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    order: Vec<u32>,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::BatchSizeZero);
        }
        if batch_size > n {
            return Err(Error::BatchTooLarge {
                batch: batch_size,
                available: n,
            });
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(Self {
            batch_size,
            seed,
            order,
        })
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }
}

/// Iterates `(images [B,1,H,W], labels [B])` batches for one epoch.
pub fn batches<'a>(
    ds: &'a Dataset,
    plan: &'a BatchPlan,
) -> impl Iterator<Item = (Tensor, Vec<u8>)> + 'a {
    plan.order.chunks(plan.batch_size).map(move |chunk| {
        let indices: Vec<usize> = chunk.iter().map(|&i| i as usize).collect();
        ds.gather(&indices)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label_file(labels: &[u8]) -> Vec<u8> {
        write_idx_labels(labels)
    }

    #[test]
    fn parses_label_header_layout() {
        // 4-byte magic 0x801, 4-byte count, raw payload
        let bytes = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 2];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 2]);
    }

    #[test]
    fn parses_images_with_endpoint_normalization() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 0, 255]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_unknown_magic_and_truncation() {
        let bad = [0x00, 0x00, 0x09, 0x01, 0, 0, 0, 0];
        assert!(matches!(
            parse_idx_labels(&bad),
            Err(Error::UnknownMagic(0x0901))
        ));
        let mut truncated = label_file(&[1, 2, 3]);
        truncated.truncate(9);
        assert!(matches!(
            parse_idx_labels(&truncated),
            Err(Error::Truncated { .. })
        ));
        let mut img = vec![0x00, 0x00, 0x08, 0x03];
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[1; 4]); // declares 8, provides 4
        assert!(matches!(parse_idx_images(&img), Err(Error::Truncated { .. })));
    }

    #[test]
    fn gzip_accepted_by_sniffing() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let plain = label_file(&[3, 1, 4, 1, 5]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&plain).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx_labels(&gz).unwrap(), vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn batch_sizes_and_full_coverage() {
        let images = Tensor::zeros(&[10, 4, 4]);
        let ds = Dataset::new(images, (0..10).collect(), Split::Train).unwrap();
        let plan = BatchPlan::new(10, 3, 99).unwrap();
        let sizes: Vec<usize> = batches(&ds, &plan).map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let mut seen: Vec<u32> = plan.order().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<u32>>());
    }

    #[test]
    fn same_seed_same_order() {
        let a = BatchPlan::new(100, 7, 5).unwrap();
        let b = BatchPlan::new(100, 7, 5).unwrap();
        assert_eq!(a.order(), b.order());
        let c = BatchPlan::new(100, 7, 6).unwrap();
        assert_ne!(a.order(), c.order());
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(matches!(BatchPlan::new(10, 0, 0), Err(Error::BatchSizeZero)));
        assert!(matches!(
            BatchPlan::new(2, 3, 0),
            Err(Error::BatchTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn label_roundtrip(labels in proptest::collection::vec(0u8..10, 0..200)) {
            let bytes = write_idx_labels(&labels);
            prop_assert_eq!(parse_idx_labels(&bytes).unwrap(), labels);
        }

        #[test]
        fn every_index_once_per_epoch(n in 1usize..300, b in 1usize..32, seed: u64) {
            prop_assume!(b <= n);
            let plan = BatchPlan::new(n, b, seed).unwrap();
            let mut seen: Vec<u32> = plan.order().to_vec();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n as u32).collect::<Vec<u32>>());
        }
    }
}
