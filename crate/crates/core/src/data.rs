//! Datasets: IDX (MNIST distribution format) files and synthetic blobs.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{rng_stream, tag};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Images `[N, C, H, W]` with pixels in `[-1, 1]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dataset(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {l} with {classes} classes")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel outside [-1, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Flat pixels of example `i`.
    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.example_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Example `i` as a `[C, H, W]` tensor.
    pub fn example_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.example_shape().to_vec(), self.example(i).to_vec())
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let [c, h, w] = self.example_shape();
        Dataset {
            images: Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded random sample of `n` distinct indices.
    pub fn sample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_stream(seed, &[tag::SAMPLE, self.len() as u64]));
        idx.truncate(n);
        idx
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX file with the given magic; returns `(dims, payload)`.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0).unwrap_or(0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let header = 4 + 4 * ndims;
    let dims: Vec<usize> = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected: header,
        })?;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected,
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Maps a byte pixel linearly onto `[-1, 1]`.
pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], rounded to the nearest byte.
pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Loads an IDX image/label pair (plain or gzip-compressed) into a
/// `[N, 1, rows, cols]` dataset with ten classes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_all(ip)?;
    let lb = read_all(lp)?;
    let (idims, pixels) = parse_idx(ip, &ib, IMAGE_MAGIC, 3)?;
    let (ldims, labels) = parse_idx(lp, &lb, LABEL_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&p| pixel_to_unit(p)).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let split = ip
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, classes, split)
}

/// Writes a single-channel dataset as uncompressed IDX files.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = ds.example_shape();
    if c != 1 {
        return Err(Error::Dataset(format!("IDX images need one channel, got {c}")));
    }
    if ds.classes > 256 {
        return Err(Error::Dataset("labels do not fit in a byte".into()));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&v| unit_to_pixel(v)));
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images_path.as_ref(), ib), (labels_path.as_ref(), lb)] {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Two-dimensional Gaussian blobs centred on the unit circle (class `c` at
/// angle `2πc / classes`), clipped to `[-1, 1]`. Shape `[N, 1, 1, 2]`,
/// class-major order.
pub fn synth_blobs(classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("{classes} classes; need at least 2")));
    }
    if !(spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("spread {spread}")));
    }
    let mut rng = rng_stream(seed, &[tag::SYNTH]);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let center = [angle.cos(), angle.sin()];
        for _ in 0..per_class {
            for m in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((m + spread * noise).clamp(-1.0, 1.0));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::from_parts(vec![n, 1, 1, 2], data), labels, classes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn all_white_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(2051, &[2, 28, 28], &[255; 2 * 784])).unwrap();
        std::fs::write(&lp, idx_bytes(2049, &[2], &[3, 7])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 28, 28]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels, [3, 7]);
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p)), p);
        }
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&lp, idx_bytes(2049, &[2], &[1, 2])).unwrap();

        std::fs::write(&ip, b"").unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { .. })));

        std::fs::write(&ip, idx_bytes(2049, &[2, 2, 2], &[0; 8])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { found: 2049, .. })));

        std::fs::write(&ip, idx_bytes(2051, &[2, 2, 2], &[0; 7])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { got: 23, expected: 24, .. })));

        std::fs::write(&ip, idx_bytes(2051, &[3, 2, 2], &[0; 12])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 3, labels: 2 })));

        assert!(matches!(load_idx(dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l"));
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_bytes(2051, &[1, 2, 2], &[0, 64, 128, 255])).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        std::fs::write(&lp, idx_bytes(2049, &[1], &[9])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.example(0), &[-1.0, pixel_to_unit(64), pixel_to_unit(128), 1.0]);
    }

    #[test]
    fn blobs_spread_zero_sits_on_centers() {
        let ds = synth_blobs(4, 3, 0.0, 9).unwrap();
        assert_eq!(ds.len(), 12);
        let e = ds.example(3);
        assert!(e[0].abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);
        assert_eq!(ds, synth_blobs(4, 3, 0.0, 1).unwrap());
        assert!(synth_blobs(1, 3, 0.1, 1).is_err());
    }
}
