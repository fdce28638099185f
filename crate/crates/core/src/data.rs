//! Datasets: big-endian IDX ingestion, class-incremental task splits and a
//! procedurally generated glyph-on-texture dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Square single-channel images with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    side: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(side: usize, images: Vec<f64>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if side == 0 || images.len() != labels.len() * side * side {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            side,
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.side * self.side;
        &self.images[i * p..(i + 1) * p]
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        (0..self.len())
            .filter(|&i| wanted.contains(&self.labels[i]))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.side * self.side);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            side: self.side,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        self.subset(&self.indices_of(classes))
    }

    /// The selected images as a `[N, 1, s, s]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.side * self.side);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, self.side, self.side], data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let b = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| Error::Format {
                offset: self.offset as u64,
                message: format!("{} truncated in header", self.what),
            })?;
        self.offset = end;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn rest(&self, expected: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.offset;
        if avail < expected {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!(
                    "{} truncated: expected {expected} payload bytes, found {avail}",
                    self.what
                ),
            });
        }
        Ok(&self.bytes[self.offset..self.offset + expected])
    }
}

fn check_magic(c: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let magic = c.u32()?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: bad magic {magic:#010x}, expected {expected:#010x}",
                c.what
            ),
        });
    }
    Ok(())
}

/// Parses an IDX image file: returns `(rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut c = Cursor {
        bytes,
        offset: 0,
        what: "image file",
    };
    check_magic(&mut c, IDX_IMAGES_MAGIC)?;
    let count = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let payload = c.rest(count * rows * cols)?;
    let pixels = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor {
        bytes,
        offset: 0,
        what: "label file",
    };
    check_magic(&mut c, IDX_LABELS_MAGIC)?;
    let count = c.u32()? as usize;
    Ok(c.rest(count)?.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label file pair. Images must be square.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    if rows != cols {
        return Err(Error::Format {
            offset: 8,
            message: format!("images must be square, got {rows}x{cols}"),
        });
    }
    Dataset::new(rows, pixels, labels, Split::Train)
}

/// Loads the four standard MNIST files from `dir` as `(train, test)`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test.with_split(Split::Test)))
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [
        IDX_IMAGES_MAGIC,
        ds.len() as u32,
        ds.side as u32,
        ds.side as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.images.iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Config(format!("label {l} does not fit an IDX byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Writes `ds` as an IDX pair, quantising pixels to bytes.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let labels = encode_idx_labels(ds)?;
    fs::write(images_path, encode_idx_images(ds)).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

/// One task: a 1-based index and its global class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub index: usize,
    pub classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassOrder {
    Natural,
    Shuffled { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPartition {
    tasks: Vec<TaskSpec>,
    assignment: BTreeMap<usize, usize>,
}

impl TaskPartition {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.assignment.get(&class).copied()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// All classes of tasks `1..=n`.
    pub fn classes_upto(&self, n: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .take(n)
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }
}

/// Groups the dataset's classes into contiguous tasks of equal size.
pub fn split_tasks(
    ds: &Dataset,
    classes_per_task: usize,
    order: ClassOrder,
) -> Result<TaskPartition> {
    split_classes(ds.classes(), classes_per_task, order)
}

pub fn split_classes(
    mut classes: Vec<usize>,
    classes_per_task: usize,
    order: ClassOrder,
) -> Result<TaskPartition> {
    if classes_per_task == 0 || classes.is_empty() || classes.len() % classes_per_task != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split into tasks of {classes_per_task}",
            classes.len()
        )));
    }
    classes.sort_unstable();
    classes.dedup();
    if let ClassOrder::Shuffled { seed } = order {
        classes.shuffle(&mut rng::rng(seed, &[0x5350_4c49]));
    }
    let mut assignment = BTreeMap::new();
    let tasks = classes
        .chunks(classes_per_task)
        .enumerate()
        .map(|(i, chunk)| {
            for &c in chunk {
                assignment.insert(c, i + 1);
            }
            TaskSpec {
                index: i + 1,
                classes: chunk.to_vec(),
            }
        })
        .collect();
    Ok(TaskPartition { tasks, assignment })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Every image uses the same texture family.
    Shared,
    /// Each class has its own texture family.
    Distinct,
}

impl BackgroundMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackgroundMode::Shared => "shared",
            BackgroundMode::Distinct => "distinct",
        }
    }
}

impl FromStr for BackgroundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared" => Ok(Self::Shared),
            "distinct" => Ok(Self::Distinct),
            other => Err(Error::Config(format!(
                "unknown background mode {other:?} (expected shared or distinct)"
            ))),
        }
    }
}

impl fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const SYNTH_SIDE: usize = 28;
const GLYPH_CELLS: usize = 5;
const GLYPH_SCALE: usize = 2;
const GLYPH_JITTER: usize = 2;
/// Glyph shapes are fixed; only placement and backgrounds depend on the run seed.
const GLYPH_SEED: u64 = 0x474c_5950;

/// A `5x5` binary pattern per class, all distinct.
fn glyphs(classes: usize) -> Vec<Vec<bool>> {
    let mut r = rng::rng(GLYPH_SEED, &[]);
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let g: Vec<bool> = (0..GLYPH_CELLS * GLYPH_CELLS)
            .map(|_| r.gen_bool(0.5))
            .collect();
        let on = g.iter().filter(|&&b| b).count();
        if (9..=16).contains(&on) && !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

/// Oriented sinusoidal grating; families differ in orientation and period.
fn texture(family: usize, families: usize, rng: &mut impl Rng) -> Vec<f64> {
    let theta = std::f64::consts::PI * family as f64 / families as f64;
    let period = 3.0 + (family % 3) as f64 * 2.0;
    let freq = 2.0 * std::f64::consts::PI / period;
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let amp = rng.gen_range(0.2..0.3);
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(SYNTH_SIDE * SYNTH_SIDE);
    for i in 0..SYNTH_SIDE {
        for j in 0..SYNTH_SIDE {
            let t = freq * (j as f64 * c + i as f64 * s) + phase;
            let noise = rng.gen_range(-0.05..0.05);
            out.push((0.35 + amp * t.sin() + noise).clamp(0.0, 1.0));
        }
    }
    out
}

fn compose(glyph: &[bool], background: Vec<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = background;
    let span = GLYPH_CELLS * GLYPH_SCALE;
    let centre = (SYNTH_SIDE - span) / 2;
    let oi = centre + rng.gen_range(0..=2 * GLYPH_JITTER) - GLYPH_JITTER;
    let oj = centre + rng.gen_range(0..=2 * GLYPH_JITTER) - GLYPH_JITTER;
    for gi in 0..GLYPH_CELLS {
        for gj in 0..GLYPH_CELLS {
            if !glyph[gi * GLYPH_CELLS + gj] {
                continue;
            }
            for di in 0..GLYPH_SCALE {
                for dj in 0..GLYPH_SCALE {
                    img[(oi + gi * GLYPH_SCALE + di) * SYNTH_SIDE + oj + gj * GLYPH_SCALE + dj] =
                        1.0;
                }
            }
        }
    }
    img
}

/// Glyph-on-texture images, `28x28`. Train and test backgrounds both follow `mode`.
pub fn synth_background_dataset(
    mode: BackgroundMode,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let shapes = glyphs(classes);
    let families = classes + 1;
    let make = |split: Split, per_class: usize| -> Result<Dataset> {
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut r = rng::rng(seed, &[stream]);
        let mut images = Vec::with_capacity(classes * per_class * SYNTH_SIDE * SYNTH_SIDE);
        let mut labels = Vec::with_capacity(classes * per_class);
        for (class, glyph) in shapes.iter().enumerate() {
            for _ in 0..per_class {
                let bg = texture(background_family(mode, classes, class), families, &mut r);
                images.extend(compose(glyph, bg, &mut r));
                labels.push(class);
            }
        }
        Dataset::new(SYNTH_SIDE, images, labels, split)
    };
    let train = make(Split::Train, train_per_class)?;
    let test = make(Split::Test, test_per_class)?;
    Ok((train, test))
}

/// Texture family behind images of `class` under `mode`. The shared family
/// belongs to no class.
pub fn background_family(mode: BackgroundMode, classes: usize, class: usize) -> usize {
    match mode {
        BackgroundMode::Shared => classes,
        BackgroundMode::Distinct => class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let labels = vec![0, 1, 2, 3, 1, 0];
        let images = (0..labels.len() * 4)
            .map(|i| (i % 256) as f64 / 255.0)
            .collect();
        Dataset::new(2, images, labels, Split::Train).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Dataset::new(1, vec![1.5], vec![0], Split::Train).is_err());
        assert!(Dataset::new(2, vec![0.0; 3], vec![0], Split::Train).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let ds = tiny_dataset();
        let imgs = encode_idx_images(&ds);
        let labels = encode_idx_labels(&ds).unwrap();
        let (n, r, c, pixels) = parse_idx_images(&imgs).unwrap();
        assert_eq!((n, r, c), (6, 2, 2));
        assert_eq!(pixels, ds.pixels());
        assert_eq!(parse_idx_labels(&labels).unwrap(), ds.labels());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut imgs = encode_idx_images(&tiny_dataset());
        let err = parse_idx_labels(&imgs).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        imgs.truncate(20);
        assert!(matches!(parse_idx_images(&imgs), Err(Error::Format { .. })));
        let zero = [0u8; 16];
        assert!(matches!(parse_idx_images(&zero), Err(Error::Format { .. })));
        assert!(matches!(
            parse_idx_images(&[0, 0, 8]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap(), ds);
        let short = ds.subset(&[0, 1]);
        std::fs::write(&lp, encode_idx_labels(&short).unwrap()).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn natural_split_is_contiguous() {
        let p = split_classes((0..10).collect(), 2, ClassOrder::Natural).unwrap();
        let got: Vec<Vec<usize>> = p.tasks().iter().map(|t| t.classes.clone()).collect();
        assert_eq!(
            got,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        assert_eq!(p.task_of(7), Some(4));
        assert!(matches!(
            split_classes((0..10).collect(), 3, ClassOrder::Natural),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shuffled_split_is_seeded_partition() {
        let a = split_classes((0..12).collect(), 3, ClassOrder::Shuffled { seed: 4 }).unwrap();
        let b = split_classes((0..12).collect(), 3, ClassOrder::Shuffled { seed: 4 }).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.classes_upto(a.len());
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_sizes_and_determinism() {
        let (train, test) =
            synth_background_dataset(BackgroundMode::Shared, 10, 100, 50, 3).unwrap();
        assert_eq!((train.len(), test.len()), (1000, 500));
        assert_eq!(train.side(), 28);
        assert!(train.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let again = synth_background_dataset(BackgroundMode::Shared, 10, 100, 50, 3).unwrap();
        assert_eq!(train, again.0);
        assert_eq!(test, again.1);
        assert!(synth_background_dataset(BackgroundMode::Shared, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn distinct_mode_assigns_family_per_class() {
        assert_eq!(background_family(BackgroundMode::Distinct, 10, 3), 3);
        assert_eq!(background_family(BackgroundMode::Shared, 10, 0), 10);
        assert_eq!(background_family(BackgroundMode::Shared, 10, 5), 10);
        let (shared, shared_test) =
            synth_background_dataset(BackgroundMode::Shared, 4, 5, 2, 9).unwrap();
        let (distinct, distinct_test) =
            synth_background_dataset(BackgroundMode::Distinct, 4, 5, 2, 9).unwrap();
        assert_eq!(shared.labels(), distinct.labels());
        assert_ne!(shared.pixels(), distinct.pixels());
        assert_eq!(shared_test.labels(), distinct_test.labels());
        assert_ne!(shared_test.pixels(), distinct_test.pixels());
    }

    #[test]
    fn glyphs_are_distinct() {
        let g = glyphs(25);
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                assert_ne!(g[i], g[j]);
            }
        }
    }
}
