//! Task datasets: on-disk layout, IDX import, resizing, semi-supervised
//! splits and mini-batch iteration.
//!
//! Layout of one task under a data root:
//!
//! ```text
//! <root>/<task>/manifest.toml
//! <root>/<task>/train/images.bin   u8, count × height × width × channels
//! <root>/<task>/train/labels.bin   u8, count
//! <root>/<task>/test/...
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nets::ImageShape;
use crate::seed;
use crate::tape::Mat;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "LVAEGAN_DATA";

/// Images in `[0, 1]`, one flattened row per sample (row-major, channels
/// last), with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Mat,
    pub labels: Vec<usize>,
    pub shape: ImageShape,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Mat, labels: Vec<usize>, shape: ImageShape, num_classes: usize) -> Result<Self> {
        ensure(images.nrows() == labels.len(), || "image and label counts differ".into())?;
        ensure(images.ncols() == shape.pixels(), || "image width does not match shape".into())?;
        ensure(labels.iter().all(|&l| l < num_classes), || "label out of range".into())?;
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn one_hot(&self) -> Mat {
        let mut m = Mat::zeros((self.len(), self.num_classes));
        for (i, &l) in self.labels.iter().enumerate() {
            m[[i, l]] = 1.0;
        }
        m
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// SHA-256 over quantized pixels and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(quantize(&self.images));
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn row_hashes(&self) -> HashSet<[u8; 32]> {
        self.images
            .axis_iter(Axis(0))
            .map(|row| {
                let bytes: Vec<u8> = row.iter().map(|&v| to_u8(v)).collect();
                Sha256::digest(&bytes).into()
            })
            .collect()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quantize(m: &Mat) -> Vec<u8> {
    m.iter().map(|&v| to_u8(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub count: usize,
}

/// `manifest.toml` of one task directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub name: String,
    pub dtype: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train: SplitInfo,
    pub test: SplitInfo,
}

impl TaskManifest {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }
}

/// Options for [`load_task`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Resize every image to this height/width (channels unchanged).
    pub target: Option<(usize, usize)>,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

pub fn default_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(task_dir: &Path) -> Result<TaskManifest> {
    let path = task_dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: TaskManifest = toml::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    ensure(m.dtype == "u8", || format!("unsupported dtype {}", m.dtype))?;
    Ok(m)
}

fn load_split(dir: &Path, m: &TaskManifest, count: usize) -> Result<Dataset> {
    let shape = m.shape();
    let images = read_file(&dir.join("images.bin"))?;
    let labels = read_file(&dir.join("labels.bin"))?;
    if images.len() != count * shape.pixels() || labels.len() != count {
        return Err(Error::Dataset(format!(
            "{}: expected {count} samples of {} bytes",
            dir.display(),
            shape.pixels()
        )));
    }
    let x = Mat::from_shape_vec((count, shape.pixels()), images.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| Error::Dataset(e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    if labels.iter().any(|&l| l >= m.num_classes) {
        return Err(Error::Dataset(format!("{}: label out of range", dir.display())));
    }
    Dataset::new(x, labels, shape, m.num_classes)
}

/// `load_task(dir, target shape)` → `(train, test)` with pixels in `[0, 1]`.
/// Fails if any test image also occurs in the training split.
pub fn load_task(task_dir: &Path, opts: &LoadOptions) -> Result<(Dataset, Dataset)> {
    if !task_dir.is_dir() {
        return Err(Error::Dataset(format!("no dataset at {}", task_dir.display())));
    }
    let m = read_manifest(task_dir)?;
    let mut train = load_split(&task_dir.join("train"), &m, m.train.count)?;
    let mut test = load_split(&task_dir.join("test"), &m, m.test.count)?;
    if let Some(n) = opts.max_train {
        train = train.head(n);
    }
    if let Some(n) = opts.max_test {
        test = test.head(n);
    }
    let train_hashes = train.row_hashes();
    if test.row_hashes().iter().any(|h| train_hashes.contains(h)) {
        return Err(Error::Dataset(format!(
            "{}: train and test splits share images",
            task_dir.display()
        )));
    }
    if let Some((h, w)) = opts.target {
        train = resize(&train, h, w)?;
        test = resize(&test, h, w)?;
    }
    Ok((train, test))
}

/// Resize every image with a triangle (bilinear) filter.
pub fn resize(set: &Dataset, height: usize, width: usize) -> Result<Dataset> {
    use image::imageops::{self, FilterType};
    use image::{GrayImage, RgbImage};
    let s = set.shape;
    if (s.height, s.width) == (height, width) {
        return Ok(set.clone());
    }
    ensure(height > 0 && width > 0, || "target size must be positive".into())?;
    let shape = ImageShape::new(height, width, s.channels);
    let mut out = Mat::zeros((set.len(), shape.pixels()));
    for (i, row) in set.images.axis_iter(Axis(0)).enumerate() {
        let bytes: Vec<u8> = row.iter().map(|&v| to_u8(v)).collect();
        let resized: Vec<u8> = match s.channels {
            1 => {
                let img = GrayImage::from_raw(s.width as u32, s.height as u32, bytes)
                    .ok_or_else(|| Error::Image("bad grayscale buffer".into()))?;
                imageops::resize(&img, width as u32, height as u32, FilterType::Triangle).into_raw()
            }
            3 => {
                let img = RgbImage::from_raw(s.width as u32, s.height as u32, bytes)
                    .ok_or_else(|| Error::Image("bad rgb buffer".into()))?;
                imageops::resize(&img, width as u32, height as u32, FilterType::Triangle).into_raw()
            }
            c => return Err(Error::Dataset(format!("cannot resize {c}-channel images"))),
        };
        for (j, b) in resized.into_iter().enumerate() {
            out[[i, j]] = b as f64 / 255.0;
        }
    }
    Dataset::new(out, set.labels.clone(), shape, set.num_classes)
}

/// Write `(train, test)` in the on-disk layout.
pub fn write_task(root: &Path, name: &str, train: &Dataset, test: &Dataset) -> Result<PathBuf> {
    ensure(train.shape == test.shape, || "train and test shapes differ".into())?;
    ensure(train.num_classes <= 256, || "at most 256 classes fit the u8 label format".into())?;
    let dir = root.join(name);
    for (split, set) in [("train", train), ("test", test)] {
        let d = dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let p = d.join("images.bin");
        fs::write(&p, quantize(&set.images)).map_err(|e| Error::io(&p, e))?;
        let p = d.join("labels.bin");
        let labels: Vec<u8> = set.labels.iter().map(|&l| l as u8).collect();
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    }
    let m = TaskManifest {
        name: name.to_string(),
        dtype: "u8".into(),
        height: train.shape.height,
        width: train.shape.width,
        channels: train.shape.channels,
        num_classes: train.num_classes.max(test.num_classes),
        train: SplitInfo { count: train.len() },
        test: SplitInfo { count: test.len() },
    };
    let p = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// IDX archives

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = read_file(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

/// Parse an IDX image file (`ubyte`, 3 dimensions) into `(count, h, w, bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let b = read_maybe_gz(path)?;
    let bad = || Error::Dataset(format!("{}: not an IDX image file", path.display()));
    if b.len() < 16 || b[0] != 0 || b[1] != 0 || b[2] != 0x08 || b[3] != 3 {
        return Err(bad());
    }
    let (n, h, w) = (be_u32(&b, 4), be_u32(&b, 8), be_u32(&b, 12));
    if b.len() != 16 + n * h * w {
        return Err(bad());
    }
    Ok((n, h, w, b[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let b = read_maybe_gz(path)?;
    let bad = || Error::Dataset(format!("{}: not an IDX label file", path.display()));
    if b.len() < 8 || b[0] != 0 || b[1] != 0 || b[2] != 0x08 || b[3] != 1 {
        return Err(bad());
    }
    let n = be_u32(&b, 4);
    if b.len() != 8 + n {
        return Err(bad());
    }
    Ok(b[8..].to_vec())
}

fn idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, h, w, px) = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            n,
            lab.len()
        )));
    }
    let classes = lab.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let x = Mat::from_shape_vec((n, h * w), px.iter().map(|&v| v as f64 / 255.0).collect())
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Dataset::new(x, lab.iter().map(|&l| l as usize).collect(), ImageShape::new(h, w, 1), classes)
}

/// Paths of an IDX archive set (train and test, images and labels).
#[derive(Debug, Clone)]
pub struct IdxSources {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl IdxSources {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |stem: &str| {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        Self {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }
}

/// Convert IDX archives into the task layout under `root/name`.
pub fn import_idx(src: &IdxSources, root: &Path, name: &str) -> Result<PathBuf> {
    let mut train = idx_dataset(&src.train_images, &src.train_labels)?;
    let mut test = idx_dataset(&src.test_images, &src.test_labels)?;
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    write_task(root, name, &train, &test)
}

// ---------------------------------------------------------------------------
// Splits and batches

/// Class-balanced labelled subset plus the unlabelled remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiSplit {
    pub labelled: Dataset,
    pub unlabelled: Dataset,
    pub labelled_indices: Vec<usize>,
    pub seed: u64,
}

/// `make_semi_split(train, n_labelled, seed)`. Classes are visited
/// round-robin so labelled counts differ by at most one (while every class
/// still has samples left).
pub fn make_semi_split(train: &Dataset, n_labelled: usize, seed_value: u64) -> Result<SemiSplit> {
    ensure(n_labelled <= train.len(), || {
        format!("n_labelled {} exceeds the {} training samples", n_labelled, train.len())
    })?;
    let mut rng = seed::rng(seed_value);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, &l) in train.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for v in per_class.iter_mut() {
        v.shuffle(&mut rng);
        v.reverse();
    }
    let mut chosen = Vec::with_capacity(n_labelled);
    'outer: loop {
        for v in per_class.iter_mut() {
            if chosen.len() == n_labelled {
                break 'outer;
            }
            if let Some(i) = v.pop() {
                chosen.push(i);
            }
        }
    }
    chosen.sort_unstable();
    let picked: HashSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..train.len()).filter(|i| !picked.contains(i)).collect();
    Ok(SemiSplit {
        labelled: train.select(&chosen),
        unlabelled: train.select(&rest),
        labelled_indices: chosen,
        seed: seed_value,
    })
}

/// `batches(n, batch_size, seed)`: a shuffled partition of `0..n`; the last
/// batch may be short.
pub fn batches(n: usize, batch_size: usize, seed_value: u64) -> Result<Vec<Vec<usize>>> {
    ensure(batch_size >= 1, || "batch size must be >= 1".into())?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let x = Mat::from_shape_fn((n, 16), |(i, j)| ((i * 7 + j * 3) % 17) as f64 / 16.0);
        Dataset::new(x, (0..n).map(|i| i % classes).collect(), ImageShape::new(4, 4, 1), classes).unwrap()
    }

    #[test]
    fn semi_split_balance() {
        let set = toy(2000, 10);
        let s = make_semi_split(&set, 1000, 1).unwrap();
        assert!(s.labelled.class_counts().iter().all(|&c| c == 100));
        assert_eq!(s.unlabelled.len(), 1000);
        let s = make_semi_split(&set, 997, 2).unwrap();
        let c = s.labelled.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        let all = make_semi_split(&set, 2000, 3).unwrap();
        assert!(all.unlabelled.is_empty());
        assert!(make_semi_split(&set, 2001, 3).is_err());
        assert_eq!(make_semi_split(&set, 997, 2).unwrap(), s);
    }

    #[test]
    fn batch_partition() {
        let b = batches(103, 10, 4).unwrap();
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 103);
        assert_eq!(b.last().unwrap().len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(b, batches(103, 10, 4).unwrap());
        assert_ne!(b, batches(103, 10, 5).unwrap());
        assert!(batches(10, 0, 1).is_err());
    }

    #[test]
    fn idx_roundtrip_through_layout() {
        let dir = tempfile::tempdir().unwrap();
        let write_idx = |name: &str, magic: u8, dims: &[u32], body: &[u8]| {
            let mut b = vec![0, 0, 8, magic];
            for d in dims {
                b.extend_from_slice(&d.to_be_bytes());
            }
            b.extend_from_slice(body);
            fs::write(dir.path().join(name), b).unwrap();
        };
        let train_px: Vec<u8> = (0..3 * 4).map(|v| (v * 20) as u8).collect();
        let test_px: Vec<u8> = (0..2 * 4).map(|v| (v * 20 + 1) as u8).collect();
        write_idx("train-images-idx3-ubyte", 3, &[3, 2, 2], &train_px);
        write_idx("train-labels-idx1-ubyte", 1, &[3], &[0, 1, 2]);
        write_idx("t10k-images-idx3-ubyte", 3, &[2, 2, 2], &test_px);
        write_idx("t10k-labels-idx1-ubyte", 1, &[2], &[2, 0]);
        let root = dir.path().join("root");
        import_idx(&IdxSources::in_dir(dir.path()), &root, "toy").unwrap();
        let (train, test) = load_task(&root.join("toy"), &LoadOptions::default()).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.labels, vec![2, 0]);
        assert_eq!(train.images[[1, 0]], 80.0 / 255.0);
        let (again, _) = load_task(&root.join("toy"), &LoadOptions::default()).unwrap();
        assert_eq!(train.checksum(), again.checksum());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy(20, 2);
        write_task(dir.path(), "dup", &set, &set.head(3)).unwrap();
        assert!(matches!(
            load_task(&dir.path().join("dup"), &LoadOptions::default()),
            Err(Error::Dataset(_))
        ));
        assert!(load_task(&dir.path().join("missing"), &LoadOptions::default()).is_err());
    }

    #[test]
    fn resize_keeps_counts_and_range() {
        let set = toy(30, 3);
        let r = resize(&set, 2, 2).unwrap();
        assert_eq!(r.images.dim(), (30, 4));
        assert_eq!(r.labels, set.labels);
        assert!(r.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
