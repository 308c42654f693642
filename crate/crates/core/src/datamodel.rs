//! Images, class orderings and incremental task sequences.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Minimum accepted image side.
pub const MIN_SIDE: usize = 8;

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::DimMismatch(format!(
                "{} bytes for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rectangular crop with inclusive corners.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> RgbImage {
        let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..=y1 {
            let s = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[s..s + w * 3]);
        }
        RgbImage { height: h, width: w, data }
    }

    /// Unit-interval tensor `[1, h, w, 3]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.height, self.width, 3, self.data.iter().map(|&v| v as f32 / 255.0).collect())
    }

    /// Stack same-sized images into a unit-interval batch.
    pub fn batch_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::EmptyInput("image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::DimMismatch(format!(
                    "batch mixes {h}x{w} with {}x{}",
                    img.height, img.width
                )));
            }
            data.extend(img.data.iter().map(|&v| v as f32 / 255.0));
        }
        Ok(Tensor::from_vec(images.len(), h, w, 3, data))
    }

    /// Sample `index` of a unit-interval tensor, cropped to `height x width`,
    /// clamped and rounded to 8 bits.
    pub fn from_unit_tensor(t: &Tensor, index: usize, height: usize, width: usize) -> RgbImage {
        assert!(t.c == 3 && height <= t.h && width <= t.w);
        let mut data = Vec::with_capacity(height * width * 3);
        let base = index * t.h * t.w * 3;
        for y in 0..height {
            let row = base + y * t.w * 3;
            data.extend(t.data[row..row + width * 3].iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        RgbImage { height, width, data }
    }

    /// Reflect-pad (mirror without edge repeat) up to `height x width`.
    pub fn reflect_pad(&self, height: usize, width: usize) -> RgbImage {
        assert!(height >= self.height && width >= self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let sy = reflect_index(y, self.height);
            for x in 0..width {
                let sx = reflect_index(x, self.width);
                let i = (sy * self.width + sx) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        RgbImage { height, width, data }
    }

    pub fn to_dynamic(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer matches dimensions")
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        Self { height: rgb.height() as usize, width: rgb.width() as usize, data: rgb.into_raw() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Mean squared error in unit-interval pixel space.
    pub fn mse(&self, other: &RgbImage) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimMismatch("mse on differently sized images".into()));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a as f64 - b as f64) / 255.0;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Mirror index `i` into `[0, n)` with period `2(n - 1)`.
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Peak signal-to-noise ratio for a unit-interval MSE.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// One training or test sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub id: u64,
    pub label: usize,
    pub image: RgbImage,
}

impl LabeledImage {
    pub fn new(id: u64, label: usize, image: RgbImage) -> Result<Self> {
        if image.height < MIN_SIDE || image.width < MIN_SIDE {
            return Err(Error::DimMismatch(format!(
                "image {id} is {}x{}, minimum side is {MIN_SIDE}",
                image.height, image.width
            )));
        }
        Ok(Self { id, label, image })
    }
}

/// Ingested dataset with named classes and a train/test split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Class id `i` is `class_names[i]`; names are sorted.
    pub class_names: Vec<String>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// SplitMix64 generator; the class-order PRNG.
#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// A permutation of class ids; position in `permutation` is the incremental
/// head index of that class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassOrder {
    pub permutation: Vec<usize>,
    pub seed: u64,
}

impl ClassOrder {
    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// Inverse permutation: class id -> position.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.permutation.len()];
        for (i, &c) in self.permutation.iter().enumerate() {
            pos[c] = i;
        }
        pos
    }
}

/// Fisher-Yates shuffle of `0..num_classes` driven by SplitMix64(`seed`).
///
/// Starting from the identity, for `i` from `n - 1` down to `1` the element at
/// `i` is swapped with the one at `next_u64() % (i + 1)`.
pub fn shuffle_classes(num_classes: usize, seed: u64) -> Result<ClassOrder> {
    if num_classes == 0 {
        return Err(Error::EmptyDomain("cannot order zero classes".into()));
    }
    let mut perm: Vec<usize> = (0..num_classes).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..num_classes).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    Ok(ClassOrder { permutation: perm, seed })
}

/// Bits needed to store an uncompressed 8-bit RGB image.
pub fn raw_image_bits(height: usize, width: usize) -> u64 {
    height as u64 * width as u64 * 3 * 8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    /// Learning from scratch: the first task is about one step wide.
    Lfs,
    /// Learning from half: the first task holds half of the classes.
    Lfh,
}

impl FromStr for ProtocolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lfs" => Ok(Self::Lfs),
            "lfh" => Ok(Self::Lfh),
            other => Err(Error::Config(format!("unknown protocol `{other}` (expected lfs or lfh)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetMode {
    /// A fixed total number of raw-image equivalents.
    FixedTotal,
    /// A fixed number of raw-image equivalents per seen class.
    PerClassGrowing,
}

impl FromStr for BudgetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed_total" | "fixed" => Ok(Self::FixedTotal),
            "per_class_growing" | "per_class" | "growing" => Ok(Self::PerClassGrowing),
            other => Err(Error::Config(format!("unknown budget mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub base_classes: usize,
    pub step_classes: usize,
    pub budget_mode: BudgetMode,
    /// Raw-image equivalents: total (fixed mode) or per class (growing mode).
    pub budget_images: usize,
    pub raw_reference_dims: (usize, usize),
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.step_classes == 0 {
            return Err(Error::Config("base_classes and step_classes must be at least 1".into()));
        }
        if self.raw_reference_dims.0 == 0 || self.raw_reference_dims.1 == 0 {
            return Err(Error::Config("raw_reference_dims must be positive".into()));
        }
        Ok(())
    }

    /// Number of tasks when covering `num_classes`, if the partition is exact.
    pub fn num_tasks(&self, num_classes: usize) -> Result<usize> {
        self.validate()?;
        if num_classes < self.base_classes || !(num_classes - self.base_classes).is_multiple_of(self.step_classes) {
            return Err(Error::Config(format!(
                "{num_classes} classes cannot be split as base {} + k * step {}",
                self.base_classes, self.step_classes
            )));
        }
        Ok(1 + (num_classes - self.base_classes) / self.step_classes)
    }

    pub fn raw_reference_bits(&self) -> u64 {
        raw_image_bits(self.raw_reference_dims.0, self.raw_reference_dims.1)
    }
}

/// One incremental task: its classes and training samples.
#[derive(Clone, Debug)]
pub struct Task {
    pub classes: Vec<usize>,
    pub samples: Vec<LabeledImage>,
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub test_pool: Vec<LabeledImage>,
    pub order: ClassOrder,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of tasks `0..=phase`, in head order.
    pub fn seen_classes(&self, phase: usize) -> Vec<usize> {
        self.tasks[..=phase].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Split `dataset` into tasks following `order` and `config`.
pub fn build_task_sequence(dataset: &Dataset, order: &ClassOrder, config: &ProtocolConfig) -> Result<TaskSequence> {
    let n = dataset.num_classes();
    if order.len() != n {
        return Err(Error::Config(format!("class order covers {} classes, dataset has {n}", order.len())));
    }
    let distinct: HashSet<_> = order.permutation.iter().copied().collect();
    if distinct.len() != n || order.permutation.iter().any(|&c| c >= n) {
        return Err(Error::Config("class order is not a permutation of the dataset classes".into()));
    }
    let num_tasks = config.num_tasks(n)?;
    let mut task_of_class = vec![0usize; n];
    let mut tasks: Vec<Task> = Vec::with_capacity(num_tasks);
    let mut pos = 0;
    for t in 0..num_tasks {
        let width = if t == 0 { config.base_classes } else { config.step_classes };
        let classes = order.permutation[pos..pos + width].to_vec();
        for &c in &classes {
            task_of_class[c] = t;
        }
        tasks.push(Task { classes, samples: Vec::new() });
        pos += width;
    }
    for s in &dataset.train {
        if s.label >= n {
            return Err(Error::Config(format!("sample {} has label {} outside {n} classes", s.id, s.label)));
        }
        tasks[task_of_class[s.label]].samples.push(s.clone());
    }
    Ok(TaskSequence { tasks, test_pool: dataset.test.clone(), order: order.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// Options for reading an image directory.
#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Resize every image to this `(height, width)`.
    pub resize: Option<(usize, usize)>,
    /// Fraction of each class held out for testing when neither a manifest
    /// nor `train/`/`test/` subdirectories declare a split.
    pub test_fraction: f64,
    /// Manifest path; defaults to `<root>/manifest.txt` when present.
    pub manifest: Option<PathBuf>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { resize: None, test_fraction: 0.2, manifest: None }
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn class_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

fn load_image(path: &Path, resize: Option<(usize, usize)>) -> Result<RgbImage> {
    let img = image::open(path)?;
    let img = match resize {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
        }
        _ => img,
    };
    Ok(RgbImage::from_dynamic(&img))
}

/// Read a dataset directory.
///
/// Layouts, in order of precedence: a manifest (`path,class,split` per line,
/// paths relative to `root`); `root/train/<class>/*` plus `root/test/<class>/*`;
/// or `root/<class>/*` with a deterministic per-class holdout of the last
/// files by name. Class names map to ids in sorted order.
pub fn ingest_directory(root: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let mut entries: Vec<(PathBuf, String, Split)> = Vec::new();
    let manifest = opts.manifest.clone().or_else(|| {
        let p = root.join("manifest.txt");
        p.is_file().then_some(p)
    });
    if let Some(manifest) = manifest {
        let text = std::fs::read_to_string(&manifest)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let [path, class, split] = parts[..] else {
                return Err(Error::Config(format!("{}:{}: expected `path,class,split`", manifest.display(), lineno + 1)));
            };
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Config(format!("{}:{}: unknown split `{other}`", manifest.display(), lineno + 1)))
                }
            };
            entries.push((root.join(path), class.to_string(), split));
        }
    } else if root.join("train").is_dir() && root.join("test").is_dir() {
        for (split_dir, split) in [("train", Split::Train), ("test", Split::Test)] {
            for (class, dir) in class_dirs(&root.join(split_dir))? {
                for f in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
                    entries.push((f, class.clone(), split));
                }
            }
        }
    } else {
        for (class, dir) in class_dirs(root)? {
            let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
            let held = ((files.len() as f64) * opts.test_fraction).round() as usize;
            let cut = files.len().saturating_sub(held);
            for (i, f) in files.into_iter().enumerate() {
                entries.push((f, class.clone(), if i < cut { Split::Train } else { Split::Test }));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput(format!("no images under {}", root.display())));
    }
    let names: BTreeSet<String> = entries.iter().map(|e| e.1.clone()).collect();
    let ids: BTreeMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    let mut ds = Dataset { class_names: names.into_iter().collect(), ..Default::default() };
    for (i, (path, class, split)) in entries.into_iter().enumerate() {
        let img = load_image(&path, opts.resize)?;
        let sample = LabeledImage::new(i as u64, ids[&class], img)?;
        match split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}
