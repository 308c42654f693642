//! Class activation maps, foreground boxes and background compositing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cil::ClassifierModel;
use crate::datamodel::RgbImage;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Foreground threshold on the normalised map.
pub const DEFAULT_THRESHOLD: f32 = 0.6;

/// Class evidence at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    /// Row-major, each 0 or 1.
    pub values: Vec<u8>,
    pub threshold_used: f32,
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u16,
    pub y_min: u16,
    pub x_max: u16,
    pub y_max: u16,
}

impl BoundingBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self { x_min: 0, y_min: 0, x_max: (width - 1) as u16, y_max: (height - 1) as u16 }
    }

    pub fn width(&self) -> usize {
        (self.x_max - self.x_min) as usize + 1
    }

    pub fn height(&self) -> usize {
        (self.y_max - self.y_min) as usize + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min as usize..=self.y_max as usize).contains(&y) && (self.x_min as usize..=self.x_max as usize).contains(&x)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && (self.x_max as usize) < width && (self.y_max as usize) < height
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!("{self:?} does not fit a {height}x{width} image")))
        }
    }

    /// The pixels inside the box.
    pub fn crop(&self, image: &RgbImage) -> Result<RgbImage> {
        self.check(image.height, image.width)?;
        Ok(image.crop(self.y_min as usize, self.x_min as usize, self.y_max as usize, self.x_max as usize))
    }
}

/// How exemplars are stored; the last three are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// Uncompressed original images.
    Raw,
    /// Whole image through the codec; no foreground kept.
    FullCompression,
    /// Original pixels inside the CAM box over a compressed background.
    CamComposite,
    /// Original pixels inside the box over mid-gray.
    BlankBackground,
    /// Original pixels inside the box over black.
    BackgroundRemoval,
}

impl CompressionMode {
    pub const ALL: [CompressionMode; 5] = [
        CompressionMode::Raw,
        CompressionMode::FullCompression,
        CompressionMode::CamComposite,
        CompressionMode::BlankBackground,
        CompressionMode::BackgroundRemoval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressionMode::Raw => "raw",
            CompressionMode::FullCompression => "full_compression",
            CompressionMode::CamComposite => "cam_composite",
            CompressionMode::BlankBackground => "blank_background",
            CompressionMode::BackgroundRemoval => "background_removal",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Whether records of this mode carry a codec bitstream.
    pub fn uses_codec(self) -> bool {
        matches!(self, CompressionMode::FullCompression | CompressionMode::CamComposite)
    }

    /// Whether records keep an original-pixel foreground crop.
    pub fn keeps_foreground(self) -> bool {
        !matches!(self, CompressionMode::FullCompression)
    }

    /// Constant fill for the background, for the modes that discard it.
    pub fn background_fill(self) -> Option<u8> {
        match self {
            CompressionMode::BlankBackground => Some(128),
            CompressionMode::BackgroundRemoval => Some(0),
            _ => None,
        }
    }
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompressionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown compression mode `{s}` (expected one of raw, full_compression, cam_composite, blank_background, background_removal)")))
    }
}

/// A classifier whose logits are a linear head over a globally pooled final
/// feature map. `None` from [`CamSource::head_weights`] means the model
/// lacks that shape.
pub trait CamSource {
    /// Final feature maps for a batch, `[n, h, w, k]`.
    fn feature_maps(&self, x: &Tensor) -> Tensor;
    /// Head weights as `[k, classes]`, row-major.
    fn head_weights(&self) -> Option<(&[f32], usize, usize)>;
}

impl CamSource for ClassifierModel {
    fn feature_maps(&self, x: &Tensor) -> Tensor {
        self.infer(x).feature_map
    }

    fn head_weights(&self) -> Option<(&[f32], usize, usize)> {
        Some((&self.head.weight.value, self.head.cin, self.head.cout))
    }
}

/// `sum_k w[k, class] * F_k` for sample `index` of a feature-map batch.
pub fn cam_from_features(maps: &Tensor, index: usize, weights: &[f32], classes: usize, class_id: usize) -> ActivationMap {
    let k = maps.c;
    assert_eq!(weights.len(), k * classes, "head weights do not match feature channels");
    let plane = maps.h * maps.w;
    let base = index * plane * k;
    let values = (0..plane)
        .map(|p| {
            let f = &maps.data[base + p * k..base + (p + 1) * k];
            f.iter().enumerate().map(|(ch, v)| v * weights[ch * classes + class_id]).sum()
        })
        .collect();
    ActivationMap { height: maps.h, width: maps.w, values, class_id }
}

fn head_of<C: CamSource + ?Sized>(classifier: &C, class_id: usize) -> Result<(&[f32], usize)> {
    let (w, _k, classes) = classifier
        .head_weights()
        .ok_or_else(|| Error::UnsupportedArchitecture("class activation maps need a pooled linear head".into()))?;
    if class_id >= classes {
        return Err(Error::Config(format!("class {class_id} is outside the head's {classes} outputs")));
    }
    Ok((w, classes))
}

pub fn compute_cam<C: CamSource + ?Sized>(classifier: &C, image: &RgbImage, class_id: usize) -> Result<ActivationMap> {
    let (w, classes) = head_of(classifier, class_id)?;
    let maps = classifier.feature_maps(&image.to_unit_tensor());
    Ok(cam_from_features(&maps, 0, w, classes, class_id))
}

/// Maps for a batch of same-sized images, one class per image.
pub fn compute_cams<C: CamSource + ?Sized>(classifier: &C, images: &[&RgbImage], class_ids: &[usize]) -> Result<Vec<ActivationMap>> {
    assert_eq!(images.len(), class_ids.len());
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut heads = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        heads.push(head_of(classifier, c)?);
    }
    let maps = classifier.feature_maps(&RgbImage::batch_to_tensor(images)?);
    Ok(heads.iter().zip(class_ids).enumerate().map(|(i, (&(w, classes), &c))| cam_from_features(&maps, i, w, classes, c)).collect())
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(values: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = ((dst as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Normalise, upsample to `(height, width)`, and keep values strictly above `threshold`.
pub fn mask_from_cam(cam: &ActivationMap, threshold: f32, target: (usize, usize)) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("zero-area mask target".into()));
    }
    let up = upsample_bilinear(&normalize(&cam.values), cam.height, cam.width, h, w);
    Ok(BinaryMask { height: h, width: w, values: up.iter().map(|&v| (v > threshold) as u8).collect(), threshold_used: threshold })
}

/// Tightest box around the 1-pixels; `None` when the mask is empty.
pub fn mask_to_bbox(mask: &BinaryMask) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.values[y * mask.width + x] == 0 {
                continue;
            }
            let (x, y) = (x as u16, y as u16);
            b = Some(match b {
                None => BoundingBox { x_min: x, y_min: y, x_max: x, y_max: y },
                Some(b) => BoundingBox { x_min: b.x_min.min(x), y_min: b.y_min.min(y), x_max: b.x_max.max(x), y_max: b.y_max.max(y) },
            });
        }
    }
    b
}

/// Inside the box from `original`, outside from `reconstructed`.
pub fn composite(original: &RgbImage, reconstructed: &RgbImage, bbox: BoundingBox) -> Result<RgbImage> {
    if (original.height, original.width) != (reconstructed.height, reconstructed.width) {
        return Err(Error::DimMismatch("composite sources differ in size".into()));
    }
    bbox.check(original.height, original.width)?;
    let mut out = reconstructed.clone();
    paste(&mut out, &bbox.crop(original)?, bbox)?;
    Ok(out)
}

/// Writes a foreground crop into `canvas` at `bbox`.
pub fn paste(canvas: &mut RgbImage, foreground: &RgbImage, bbox: BoundingBox) -> Result<()> {
    bbox.check(canvas.height, canvas.width)?;
    if (foreground.height, foreground.width) != (bbox.height(), bbox.width()) {
        return Err(Error::DimMismatch("foreground does not match its box".into()));
    }
    let row = bbox.width() * 3;
    for (i, y) in (bbox.y_min as usize..=bbox.y_max as usize).enumerate() {
        let dst = (y * canvas.width + bbox.x_min as usize) * 3;
        canvas.data[dst..dst + row].copy_from_slice(&foreground.data[i * row..(i + 1) * row]);
    }
    Ok(())
}

/// CAM for `class_id`, thresholded and boxed; `None` for an empty mask.
pub fn localize<C: CamSource + ?Sized>(classifier: &C, image: &RgbImage, class_id: usize, threshold: f32) -> Result<Option<BoundingBox>> {
    let cam = compute_cam(classifier, image, class_id)?;
    Ok(mask_to_bbox(&mask_from_cam(&cam, threshold, (image.height, image.width))?))
}
