//! Learned feature providers for the local, distant and global levels: a
//! built-in small convnet (penultimate activations) and an importer for
//! externally precomputed feature files. The local level additionally gets
//! the softmax outputs of a C-way and a binary foreground net over 25x25
//! superpixel crops padded to 35x35.

use crate::binio;
use crate::descriptors::store::FeatureStore;
use crate::imagecore::LabImage;
use crate::neuralnet::conv::{train_convnet, ConvArch, ConvNetModel};
use crate::neuralnet::{ClassStats, TrainConfig};
use crate::superpixel::Rect;
use crate::{Error, Result};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

/// Superpixel-id sentinel for whole-image rows in precomputed files.
pub const GLOBAL_KEY: u32 = 0xFFFF_FFFF;

pub const LOCAL_CROP: usize = 25;
pub const LOCAL_INPUT: usize = 35;
/// Lab values are divided by this before entering a convnet.
pub const LAB_SCALE: f64 = 50.0;

/// Bilinear sample of one Lab channel at fractional coordinates.
fn sample_bilinear(img: &LabImage, ch: usize, x: f64, y: f64) -> f64 {
    let plane = img.plane(ch);
    let w = img.width;
    let h = img.height;
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn clamp_rect(r: Rect, w: usize, h: usize) -> Rect {
    Rect {
        x0: r.x0.min(w.saturating_sub(1)),
        y0: r.y0.min(h.saturating_sub(1)),
        x1: r.x1.clamp(r.x0.min(w - 1) + 1, w),
        y1: r.y1.clamp(r.y0.min(h - 1) + 1, h),
    }
}

/// Crop `rect` (clamped to the image) and resize to `tw x th` with bilinear
/// interpolation; output is CHW f64 Lab. Constant crops stay constant.
pub fn crop_resize(img: &LabImage, rect: Rect, tw: usize, th: usize) -> Result<Vec<f64>> {
    if tw == 0 || th == 0 {
        return Err(Error::Dimension("zero-sized resize target".into()));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Dimension("empty source image".into()));
    }
    let r = clamp_rect(rect, img.width, img.height);
    let sw = r.width();
    let sh = r.height();
    let mut out = vec![0.0; 3 * tw * th];
    for ch in 0..3 {
        for ty in 0..th {
            // endpoint-aligned mapping so a 1:1 crop is the identity
            let sy = if th > 1 {
                r.y0 as f64 + ty as f64 * (sh - 1) as f64 / (th - 1) as f64
            } else {
                r.y0 as f64 + (sh - 1) as f64 / 2.0
            };
            for tx in 0..tw {
                let sx = if tw > 1 {
                    r.x0 as f64 + tx as f64 * (sw - 1) as f64 / (tw - 1) as f64
                } else {
                    r.x0 as f64 + (sw - 1) as f64 / 2.0
                };
                out[ch * tw * th + ty * tw + tx] = sample_bilinear(img, ch, sx, sy);
            }
        }
    }
    Ok(out)
}

/// Per-channel mean Lab value over a set of images; the padding value for
/// local crops.
pub fn dataset_channel_mean(images: &[&LabImage]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for ch in 0..3 {
            sums[ch] += img.plane(ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        n += img.width * img.height;
    }
    if n == 0 {
        return [0.0; 3];
    }
    [sums[0] / n as f64, sums[1] / n as f64, sums[2] / n as f64]
}

fn normalize(crop: &mut [f64], mean: [f64; 3], hw: usize) {
    for ch in 0..3 {
        for v in &mut crop[ch * hw..(ch + 1) * hw] {
            *v = (*v - mean[ch]) / LAB_SCALE;
        }
    }
}

/// Superpixel bounding box resized to 25x25, centered in a 35x35 canvas whose
/// border is the dataset mean, then mean-normalized; CHW f64, ready for the
/// local convnet.
pub fn local_crop(img: &LabImage, bbox: Rect, mean: [f64; 3]) -> Result<Vec<f64>> {
    let inner = crop_resize(img, bbox, LOCAL_CROP, LOCAL_CROP)?;
    let pad = (LOCAL_INPUT - LOCAL_CROP) / 2;
    let mut out = vec![0.0; 3 * LOCAL_INPUT * LOCAL_INPUT];
    for ch in 0..3 {
        let canvas = &mut out[ch * LOCAL_INPUT * LOCAL_INPUT..(ch + 1) * LOCAL_INPUT * LOCAL_INPUT];
        for v in canvas.iter_mut() {
            *v = mean[ch];
        }
        for y in 0..LOCAL_CROP {
            for x in 0..LOCAL_CROP {
                canvas[(y + pad) * LOCAL_INPUT + (x + pad)] =
                    inner[ch * LOCAL_CROP * LOCAL_CROP + y * LOCAL_CROP + x];
            }
        }
    }
    normalize(&mut out, mean, LOCAL_INPUT * LOCAL_INPUT);
    Ok(out)
}

/// Crop for a built-in distant/global provider: rect resized to the net's
/// input resolution and mean-normalized.
pub fn provider_crop(
    img: &LabImage,
    rect: Rect,
    arch: &ConvArch,
    mean: [f64; 3],
) -> Result<Vec<f64>> {
    let (_, th, tw) = arch.input;
    let mut crop = crop_resize(img, rect, tw, th)?;
    normalize(&mut crop, mean, tw * th);
    Ok(crop)
}

/// The two nets of the local learned block: C-way class scores and binary
/// figure/ground, both over the same padded crop.
#[derive(Debug, Clone)]
pub struct LocalNets {
    pub cway: ConvNetModel,
    pub binary: Option<ConvNetModel>,
    pub mean: [f64; 3],
}

impl LocalNets {
    /// C+2 when the binary net is present, C otherwise.
    pub fn dim(&self) -> usize {
        self.cway.arch.num_classes + self.binary.as_ref().map_or(0, |b| b.arch.num_classes)
    }

    /// Softmax outputs concatenated: C class probabilities then (bg, fg).
    pub fn emit(&self, img: &LabImage, bbox: Rect) -> Result<Vec<f32>> {
        let crop = local_crop(img, bbox, self.mean)?;
        let mut out: Vec<f32> = self
            .cway
            .forward_single(&crop)?
            .iter()
            .map(|&v| v as f32)
            .collect();
        if let Some(b) = &self.binary {
            out.extend(b.forward_single(&crop)?.iter().map(|&v| v as f32));
        }
        Ok(out)
    }
}

/// Trains the C-way and binary figure/ground local nets on prepared crops
/// (`n x input_len` f64, labels in 0..num_classes with 0 = background).
pub fn train_local_convnet(
    crops: &[f64],
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    arch: Option<ConvArch>,
    mean: [f64; 3],
) -> Result<LocalNets> {
    if num_classes < 2 {
        return Err(Error::Data("local net needs at least 2 classes".into()));
    }
    let arch = arch.unwrap_or_else(|| ConvArch::standard_local(num_classes));
    if arch.num_classes != num_classes {
        return Err(Error::Dimension("arch class count mismatch".into()));
    }
    let mut counts = vec![0u64; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Data(format!("crop label {y} out of range")));
        }
        counts[y] += 1;
    }
    let stats = ClassStats::from_counts(counts)?;
    let (cway, _) = train_convnet(crops, labels, &stats, cfg, arch.clone())?;

    let bin_labels: Vec<usize> = labels.iter().map(|&y| usize::from(y != 0)).collect();
    let mut bin_counts = vec![0u64; 2];
    for &y in &bin_labels {
        bin_counts[y] += 1;
    }
    let bin_stats = ClassStats::from_counts(bin_counts)?;
    let mut bin_arch = arch;
    bin_arch.num_classes = 2;
    let bin_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(0x42),
        ..*cfg
    };
    let (binary, _) = train_convnet(crops, &bin_labels, &bin_stats, &bin_cfg, bin_arch)?;
    Ok(LocalNets {
        cway,
        binary: Some(binary),
        mean,
    })
}

/// Built-in provider: penultimate activations of a small convnet over the
/// level's crop.
#[derive(Debug, Clone)]
pub struct BuiltinProvider {
    pub model: ConvNetModel,
    pub mean: [f64; 3],
}

impl BuiltinProvider {
    pub fn dim(&self) -> usize {
        self.model.penultimate_dim()
    }

    pub fn extract(&self, img: &LabImage, rect: Rect) -> Result<Vec<f32>> {
        let crop = provider_crop(img, rect, &self.model.arch, self.mean)?;
        Ok(self
            .model
            .penultimate(&crop)?
            .iter()
            .map(|&v| v as f32)
            .collect())
    }
}

/// Compact default architecture for built-in distant/global nets: 64-dim
/// penultimate output over a 32x32 crop.
pub fn builtin_provider_arch(num_classes: usize, input: usize) -> ConvArch {
    ConvArch::with_defaults((3, input, input), vec![8, 16], vec![64], num_classes)
}

/// Rows imported from a ZOFT file keyed by (image-id hash, superpixel id).
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    store: FeatureStore,
    index: HashMap<(u64, u32), u32>,
}

impl PrecomputedProvider {
    pub fn dim(&self) -> usize {
        self.store.layout.total_dim as usize
    }

    pub fn lookup(&self, image_id: &str, spid: Option<u32>) -> Result<&[f32]> {
        let key = (binio::fnv1a64(image_id), spid.unwrap_or(GLOBAL_KEY));
        match self.index.get(&key) {
            Some(&row) => Ok(self.store.row(row as usize)),
            None => Err(Error::Data(format!(
                "no precomputed features for image {image_id:?} superpixel {:?}",
                spid
            ))),
        }
    }
}

/// Reads a ZOFT feature store followed by its key table: u32 n_entries, then
/// (image-id hash u64, superpixel id u32 or GLOBAL, row index u32) per entry.
pub fn import_precomputed(path: &Path) -> Result<PrecomputedProvider> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_precomputed(&mut r)
}

pub fn read_precomputed<R: Read>(r: &mut R) -> Result<PrecomputedProvider> {
    let store = FeatureStore::read_from(r)?;
    if store.layout.total_dim == 0 {
        return Err(Error::Format("precomputed features have dimension 0".into()));
    }
    let n_entries = binio::read_u32(r)? as usize;
    let mut index = HashMap::with_capacity(n_entries);
    for _ in 0..n_entries {
        let hash = binio::read_u64(r)?;
        let spid = binio::read_u32(r)?;
        let row = binio::read_u32(r)?;
        if row as usize >= store.n_rows {
            return Err(Error::Format(format!(
                "key table row {row} beyond {} stored rows",
                store.n_rows
            )));
        }
        if index.insert((hash, spid), row).is_some() {
            return Err(Error::Format("duplicate key in precomputed table".into()));
        }
    }
    Ok(PrecomputedProvider { store, index })
}

/// Writes a precomputed file; `keys` are (image id, superpixel id or None for
/// GLOBAL) aligned with the store's rows.
pub fn write_precomputed<W: std::io::Write>(
    w: &mut W,
    store: &FeatureStore,
    keys: &[(String, Option<u32>)],
) -> Result<()> {
    if keys.len() != store.n_rows {
        return Err(Error::Dimension("one key per stored row required".into()));
    }
    let io = |e: std::io::Error| Error::Format(format!("precomputed write: {e}"));
    store.write_to(w).map_err(io)?;
    binio::write_u32(w, keys.len() as u32).map_err(io)?;
    for (row, (id, spid)) in keys.iter().enumerate() {
        binio::write_u64(w, binio::fnv1a64(id)).map_err(io)?;
        binio::write_u32(w, spid.unwrap_or(GLOBAL_KEY)).map_err(io)?;
        binio::write_u32(w, row as u32).map_err(io)?;
    }
    Ok(())
}

/// A pluggable feature source for one zoom-out level.
#[derive(Debug, Clone)]
pub enum FeatureProvider {
    /// contributes nothing (dimension 0)
    Null,
    Builtin(BuiltinProvider),
    Precomputed(PrecomputedProvider),
}

impl FeatureProvider {
    pub fn dim(&self) -> usize {
        match self {
            FeatureProvider::Null => 0,
            FeatureProvider::Builtin(b) => b.dim(),
            FeatureProvider::Precomputed(p) => p.dim(),
        }
    }

    /// Feature vector for one superpixel's level crop; `spid = None` denotes
    /// the whole-image (global) entry for precomputed lookups.
    pub fn extract(
        &self,
        img: &LabImage,
        image_id: &str,
        rect: Rect,
        spid: Option<u32>,
    ) -> Result<Vec<f32>> {
        let out = match self {
            FeatureProvider::Null => Vec::new(),
            FeatureProvider::Builtin(b) => b.extract(img, rect)?,
            FeatureProvider::Precomputed(p) => p.lookup(image_id, spid)?.to_vec(),
        };
        if out.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "provider emitted {} dims, declared {}",
                out.len(),
                self.dim()
            )));
        }
        Ok(out)
    }
}
