//! Exemplar selection, compressed records and the bit-budgeted store.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE};
use serde::{Deserialize, Serialize};

use crate::cam::{paste, BoundingBox, CompressionMode};
use crate::codec::{self, Bitstream, CodecModel};
use crate::datamodel::{BudgetMode, RgbImage};
use crate::error::{Error, Result};

/// Bits charged per record for the box (four u16) and label plus flags.
pub const RECORD_META_BITS: u64 = 64 + 32;
const DEGENERATE: u16 = u16::MAX;

/// iCaRL herding: greedily pick the sample that keeps the running mean of the
/// chosen features closest to the overall mean. Ties go to the lowest index.
pub fn herding_select(features: &[Vec<f32>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyInput("herding over an empty feature list".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::DimMismatch("herding features differ in dimension".into()));
    }
    if m > n {
        return Err(Error::Config(format!("cannot select {m} of {n} samples")));
    }
    let mut mu = vec![0.0f64; d];
    for f in features {
        for (a, &v) in mu.iter_mut().zip(f) {
            *a += v as f64 / n as f64;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut sum = vec![0.0f64; d];
    for k in 1..=m {
        let mut best: Option<(f64, usize)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|j| {
                    let e = mu[j] - (sum[j] + f[j] as f64) / k as f64;
                    e * e
                })
                .sum();
            // Exact ties differ by rounding only; they go to the lowest index.
            if best.is_none_or(|(b, _)| dist < b - 1e-12 * (1.0 + b)) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.expect("m <= n leaves a candidate");
        taken[i] = true;
        for (s, &v) in sum.iter_mut().zip(&features[i]) {
            *s += v as f64;
        }
        chosen.push(i);
    }
    Ok(chosen)
}

/// Scales a vector to unit Euclidean norm (zero vectors are left alone).
pub fn l2_normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// One stored exemplar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExemplarRecord {
    pub label: usize,
    pub source_id: u64,
    pub phase_created: usize,
    pub mode: CompressionMode,
    /// `None` when the foreground mask came out empty.
    pub bbox: Option<BoundingBox>,
    /// Original pixels inside `bbox`.
    pub foreground: Option<RgbImage>,
    /// Codec bitstream, or a header-only container that just records the
    /// image dims for modes without a compressed background.
    pub background: Option<Bitstream>,
}

impl ExemplarRecord {
    /// Image dims at materialisation.
    pub fn dims(&self) -> (usize, usize) {
        match (&self.background, &self.foreground) {
            (Some(b), _) => (b.orig_h as usize, b.orig_w as usize),
            (None, Some(f)) => (f.height, f.width),
            (None, None) => (0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::Contract("record has neither background nor foreground".into()));
        }
        match (&self.bbox, &self.foreground) {
            (Some(b), Some(f)) if b.fits(h, w) && (f.height, f.width) == (b.height(), b.width()) => Ok(()),
            (None, None) => Ok(()),
            _ => Err(Error::Contract("foreground does not match its box".into())),
        }
    }
}

/// Background bits plus 24 bits per foreground pixel plus [`RECORD_META_BITS`].
pub fn exemplar_cost_bits(r: &ExemplarRecord) -> u64 {
    let bg = r.background.as_ref().map_or(0, Bitstream::total_bits);
    let fg = r.foreground.as_ref().map_or(0, |f| f.pixels() as u64 * 24);
    bg + fg + RECORD_META_BITS
}

/// Packs one image as a record of the given mode. `bbox` is the CAM box
/// (ignored by the raw and full-compression modes).
pub fn build_record(
    mode: CompressionMode,
    codec: Option<&CodecModel>,
    image: &RgbImage,
    bbox: Option<BoundingBox>,
    label: usize,
    source_id: u64,
    phase: usize,
) -> Result<ExemplarRecord> {
    let (h, w) = (image.height, image.width);
    let bbox = match mode {
        CompressionMode::Raw => Some(BoundingBox::full(h, w)),
        CompressionMode::FullCompression => None,
        _ => bbox,
    };
    let foreground = bbox.map(|b| b.crop(image)).transpose()?;
    let background = if mode.uses_codec() {
        let codec = codec.ok_or_else(|| Error::Config(format!("mode {mode} needs a codec")))?;
        Some(codec::encode(codec, image)?)
    } else if mode == CompressionMode::Raw {
        None
    } else {
        Some(dims_only(h, w))
    };
    let r = ExemplarRecord { label, source_id, phase_created: phase, mode, bbox, foreground, background };
    r.validate()?;
    Ok(r)
}

fn dims_only(h: usize, w: usize) -> Bitstream {
    Bitstream {
        version: codec::bitstream::FORMAT_VERSION,
        digest: 0,
        orig_h: h as u16,
        orig_w: w as u16,
        pad_h: h as u16,
        pad_w: w as u16,
        hyper: Vec::new(),
        main: Vec::new(),
    }
}

/// Bit capacity of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub total_bits: u64,
    pub mode: BudgetMode,
    /// Raw-equivalent images per seen class (growing mode).
    pub per_class_images: usize,
    pub raw_reference_bits: u64,
}

impl MemoryBudget {
    pub fn fixed(budget_images: usize, raw_reference_bits: u64) -> Self {
        Self { total_bits: budget_images as u64 * raw_reference_bits, mode: BudgetMode::FixedTotal, per_class_images: 0, raw_reference_bits }
    }

    pub fn growing(per_class_images: usize, classes_seen: usize, raw_reference_bits: u64) -> Self {
        Self {
            total_bits: (per_class_images * classes_seen) as u64 * raw_reference_bits,
            mode: BudgetMode::PerClassGrowing,
            per_class_images,
            raw_reference_bits,
        }
    }

    /// Explicit capacity, for tests and tooling.
    pub fn bits(total_bits: u64) -> Self {
        Self { total_bits, mode: BudgetMode::FixedTotal, per_class_images: 0, raw_reference_bits: 0 }
    }

    pub fn with_total(self, total_bits: u64) -> Self {
        Self { total_bits, ..self }
    }
}

/// Records per class in herding rank order, under a bit budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExemplarStore {
    pub records: BTreeMap<usize, Vec<ExemplarRecord>>,
    pub budget: MemoryBudget,
}

impl ExemplarStore {
    pub fn new(budget: MemoryBudget) -> Self {
        Self { records: BTreeMap::new(), budget }
    }

    pub fn used_bits(&self) -> u64 {
        self.records.values().flatten().map(exemplar_cost_bits).sum()
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, class: usize) -> usize {
        self.records.get(&class).map_or(0, Vec::len)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.records.iter().filter(|(_, v)| !v.is_empty()).map(|(&c, _)| c).collect()
    }

    /// Adds candidates (herding order within each class) round-robin until
    /// the budget is exhausted.
    pub fn admit(&mut self, candidates: BTreeMap<usize, Vec<ExemplarRecord>>) {
        let counts = candidates.iter().map(|(&c, v)| (c, v.len())).collect();
        let mut pool: BTreeMap<usize, Vec<Option<ExemplarRecord>>> =
            candidates.into_iter().map(|(c, v)| (c, v.into_iter().map(Some).collect())).collect();
        self.admit_with(counts, |c, rank| Ok(pool.get_mut(&c).unwrap()[rank].take().unwrap()))
            .expect("prebuilt candidates cannot fail");
    }

    /// Round-robin over classes (ascending id), rank by rank, building each
    /// candidate with `make(class, rank)` only when its turn comes. A record
    /// that does not fit is skipped and closes its class.
    pub fn admit_with(
        &mut self,
        counts: BTreeMap<usize, usize>,
        mut make: impl FnMut(usize, usize) -> Result<ExemplarRecord>,
    ) -> Result<()> {
        let mut used = self.used_bits();
        let total = self.budget.total_bits;
        let mut open: Vec<usize> = counts.keys().copied().collect();
        let mut rank = 0;
        while !open.is_empty() {
            let mut still = Vec::with_capacity(open.len());
            for c in open {
                if rank >= counts[&c] {
                    continue;
                }
                let r = make(c, rank)?;
                let cost = exemplar_cost_bits(&r);
                if used.checked_add(cost).is_some_and(|u| u <= total) {
                    used += cost;
                    self.records.entry(c).or_default().push(r);
                    still.push(c);
                }
            }
            open = still;
            rank += 1;
        }
        Ok(())
    }

    /// Re-admits the current records, best-ranked first, under `budget`;
    /// anything that no longer fits is dropped.
    pub fn rebalance(&mut self, budget: MemoryBudget) {
        let old = std::mem::take(&mut self.records);
        self.budget = budget;
        self.admit(old);
    }

    /// Decodes and composites every record, in class then rank order.
    pub fn materialize(&self, codec: Option<&CodecModel>) -> Result<Vec<(RgbImage, usize)>> {
        self.records.values().flatten().map(|r| Ok((materialize_record(r, codec)?, r.label))).collect()
    }

    /// Writes `manifest` plus one binary file per record.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = std::fs::File::create(dir.join("manifest"))?;
        writeln!(manifest, "# file,class,phase,cost_bits,mode,source_id")?;
        writeln!(manifest, "# total_bits={}", self.budget.total_bits)?;
        for (i, r) in self.records.values().flatten().enumerate() {
            let name = format!("record_{i:06}.bin");
            std::fs::write(dir.join(&name), record_to_bytes(r))?;
            writeln!(manifest, "{name},{},{},{},{},{}", r.label, r.phase_created, exemplar_cost_bits(r), r.mode, r.source_id)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`ExemplarStore::save`].
    pub fn load(dir: &Path, budget: MemoryBudget) -> Result<Self> {
        let mut store = Self::new(budget);
        for entry in read_manifest(dir)? {
            let bytes = std::fs::read(dir.join(&entry.file))?;
            let r = record_from_bytes(&bytes, entry.class, entry.phase, entry.source_id)?;
            if r.mode != entry.mode || exemplar_cost_bits(&r) != entry.cost_bits {
                return Err(Error::CorruptStream(format!("{} disagrees with the manifest", entry.file)));
            }
            store.records.entry(entry.class).or_default().push(r);
        }
        Ok(store)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub class: usize,
    pub phase: usize,
    pub cost_bits: u64,
    pub mode: CompressionMode,
    pub source_id: u64,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join("manifest"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::CorruptStream(format!("manifest line {}: `{line}`", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            file: f[0].to_string(),
            class: f[1].parse().map_err(|_| bad())?,
            phase: f[2].parse().map_err(|_| bad())?,
            cost_bits: f[3].parse().map_err(|_| bad())?,
            mode: f[4].parse().map_err(|_| bad())?,
            source_id: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// `bbox 4 x u16 | mode u8 | foreground bytes | container`; an all-`0xFFFF`
/// box marks an empty foreground.
pub fn record_to_bytes(r: &ExemplarRecord) -> Vec<u8> {
    let mut out = Vec::new();
    let b = r.bbox.map_or([DEGENERATE; 4], |b| [b.x_min, b.y_min, b.x_max, b.y_max]);
    for v in b {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(r.mode.code());
    if let Some(f) = &r.foreground {
        out.extend_from_slice(&f.data);
    }
    if let Some(bg) = &r.background {
        out.extend_from_slice(&bg.to_bytes());
    }
    out
}

pub fn record_from_bytes(bytes: &[u8], label: usize, phase: usize, source_id: u64) -> Result<ExemplarRecord> {
    let corrupt = |m: &str| Error::CorruptStream(format!("record: {m}"));
    if bytes.len() < 9 {
        return Err(corrupt("shorter than its header"));
    }
    let v: Vec<u16> = (0..4).map(|i| LE::read_u16(&bytes[2 * i..2 * i + 2])).collect();
    let mode = CompressionMode::from_code(bytes[8]).ok_or_else(|| corrupt("unknown mode"))?;
    let bbox = (v != [DEGENERATE; 4]).then_some(BoundingBox { x_min: v[0], y_min: v[1], x_max: v[2], y_max: v[3] });
    let mut pos = 9;
    let foreground = match bbox {
        Some(b) => {
            if b.x_min > b.x_max || b.y_min > b.y_max {
                return Err(corrupt("inverted box"));
            }
            let n = b.area() * 3;
            let data = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated foreground"))?.to_vec();
            pos += n;
            Some(RgbImage::new(b.height(), b.width(), data)?)
        }
        None => None,
    };
    let background = if pos < bytes.len() { Some(Bitstream::from_bytes(&bytes[pos..])?) } else { None };
    let r = ExemplarRecord { label, source_id, phase_created: phase, mode, bbox, foreground, background };
    r.validate().map_err(|e| corrupt(&e.to_string()))?;
    Ok(r)
}

/// Rebuilds the replay image for one record.
pub fn materialize_record(r: &ExemplarRecord, codec: Option<&CodecModel>) -> Result<RgbImage> {
    let (h, w) = r.dims();
    let mut canvas = match r.mode.background_fill() {
        Some(fill) => RgbImage::filled(h, w, [fill; 3]),
        None => match (&r.background, r.mode) {
            (Some(bg), m) if m.uses_codec() => {
                let codec = codec.ok_or_else(|| Error::Config(format!("mode {m} needs a codec to materialise")))?;
                codec::decode(codec, bg).map_err(|e| match e {
                    Error::IncompatibleModel { expected, found, .. } => Error::IncompatibleModel {
                        expected,
                        found,
                        record: Some(format!("class {} source {}", r.label, r.source_id)),
                    },
                    e => e,
                })?
            }
            _ => RgbImage::filled(h, w, [0; 3]),
        },
    };
    if let (Some(b), Some(f)) = (r.bbox, &r.foreground) {
        paste(&mut canvas, f, b)?;
    }
    Ok(canvas)
}
