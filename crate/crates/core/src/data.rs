//! MNIST IDX ingestion, data-scarce subsets and per-epoch batching.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, RngState};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 10;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Images (one row per sample, pixels scaled to `[0, 1]`) and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Consistency(format!("label {bad} outside [0, 9]")));
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Consistency("pixel values outside [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Reads an image file and a label file in IDX format, raw or gzipped.
    pub fn from_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Self> {
        let images_path = images_path.as_ref();
        let labels_path = labels_path.as_ref();
        let images = parse_images(images_path, &read_maybe_gz(images_path)?)?;
        let labels = parse_labels(labels_path, &read_maybe_gz(labels_path)?)?;
        if images.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} declares {} images but {} declares {} labels",
                images_path.display(),
                images.rows(),
                labels_path.display(),
                labels.len()
            )));
        }
        Dataset::new(images, labels)
    }

    /// Writes raw (uncompressed) IDX files. Pixels are quantized back to
    /// bytes, so datasets read from IDX round-trip exactly.
    pub fn write_idx(&self, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        let side = (self.image_dim() as f64).sqrt() as usize;
        let (rows, cols) = if side * side == self.image_dim() {
            (side, side)
        } else {
            (1, self.image_dim())
        };
        let mut img = Vec::with_capacity(16 + self.images.as_slice().len());
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(self.len() as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        img.extend(self.images.as_slice().iter().map(|p| (p * 255.0).round() as u8));

        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lab.extend_from_slice(&self.labels);

        write_file(images_path.as_ref(), &img)?;
        write_file(labels_path.as_ref(), &lab)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("magic number {found:#010x}, expected {magic:#010x}"),
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Length {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    check_header(path, bytes, IMAGES_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let dim = be_u32(bytes, 8) as usize * be_u32(bytes, 12) as usize;
    let expected = 16 + n * dim;
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::from_vec(n, dim, pixels)
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    check_header(path, bytes, LABELS_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("label {bad} outside [0, 9]"),
        });
    }
    Ok(labels)
}

/// Locates one MNIST split inside `dir`. Accepts the canonical
/// `train-images-idx3-ubyte` naming, the `train-images.idx3-ubyte` variant,
/// and either with a `.gz` suffix.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |kind: &str, idx: &str| -> Result<PathBuf> {
        let stems = [format!("{prefix}-{kind}-{idx}-ubyte"), format!("{prefix}-{kind}.{idx}-ubyte")];
        for stem in &stems {
            for suffix in ["", ".gz"] {
                let p = dir.join(format!("{stem}{suffix}"));
                if p.is_file() {
                    return Ok(p);
                }
            }
        }
        Err(Error::io(
            dir.join(&stems[0]),
            std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
        ))
    };
    Ok((find("images", "idx3")?, find("labels", "idx1")?))
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split)?;
    Dataset::from_idx(images, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// Stratified draw of `round(fraction × class count)` from every class.
    Fraction(f64),
    /// Exactly `k` samples from every class.
    PerClass(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetSpec {
    pub mode: SubsetMode,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SubsetMode::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::Config(format!("subset fraction {f} outside (0, 1]")))
            }
            SubsetMode::PerClass(0) => Err(Error::Config("per-class subset size must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Draws a class-stratified random subset. Classes are sampled uniformly
/// without replacement; the result keeps the source order.
pub fn subsample(d: &Dataset, spec: &SubsetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in d.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = RngState::substream(spec.seed, Purpose::Subset, 0);
    let mut chosen = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        let want = match spec.mode {
            SubsetMode::PerClass(k) => k,
            SubsetMode::Fraction(f) => (f * members.len() as f64).round() as usize,
        };
        if want > members.len() {
            return Err(Error::Capacity {
                class: class as u8,
                available: members.len(),
                requested: want,
            });
        }
        rng.shuffle(members);
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    Ok(d.select(&chosen))
}

/// A contiguous slice of one epoch's shuffled order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Matrix,
    pub labels: Vec<u8>,
    /// Positions of these samples in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Lazily materialized batches over one shuffled pass of a dataset.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Shuffles `d` with `rng` and splits it into `⌈n / batch_size⌉` batches; the
/// last one may be smaller.
pub fn make_batches<'a>(d: &'a Dataset, batch_size: usize, rng: &mut RngState) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    if d.is_empty() {
        return Err(Error::Domain("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    rng.shuffle(&mut order);
    Ok(Batches {
        data: d,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.data.images().gather_rows(&indices),
            labels: indices.iter().map(|&i| self.data.labels()[i]).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
