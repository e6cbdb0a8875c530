//! Handcrafted feature extraction: color, texton and SIFT bag-of-words
//! blocks, location encoding, codebook training, and assembly of the
//! concatenated zoom-out feature vector.

pub mod color;
pub mod filterbank;
pub mod kmeans;
pub mod sift;
pub mod store;

pub use color::{color_histograms, color_histograms_with, ColorBinning, COLOR_DIM};
pub use filterbank::{
    assign_textons, texton_features, texton_features_from_map, train_texton_codebook,
    FILTER_COUNT, TEXTON_DIM, TEXTON_K,
};
pub use sift::{
    assign_words, dense_sift, sift_bow_features, sift_bow_from_assignments, train_sift_codebook,
    DenseSiftParams, SiftSamples, SIFT_BOW_DIM, SIFT_DESC_DIM, SIFT_WORD_K,
};
pub use store::{load_feature_store, save_feature_store, BlockLayout, FeatureStore};

use crate::binio;
use crate::imagecore::LabImage;
use crate::superpixel::{Rect, Superpixelization};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const LOCATION_DIM: usize = 4;
pub const HANDCRAFTED_DIM: usize = COLOR_DIM + TEXTON_DIM + SIFT_BOW_DIM + LOCATION_DIM;

/// Compile-time check of the descriptor block arithmetic.
const _: () = assert!(HANDCRAFTED_DIM == 1818);

/// A pixel region over one image: either a bounding box or an explicit mask.
#[derive(Debug, Clone)]
pub enum RegionSelector {
    Box(Rect),
    Mask {
        width: usize,
        height: usize,
        indices: Vec<usize>,
        bits: Vec<u64>,
    },
}

impl RegionSelector {
    pub fn from_box(rect: Rect) -> Result<Self> {
        if rect.x1 <= rect.x0 || rect.y1 <= rect.y0 {
            return Err(Error::Data("empty region box".into()));
        }
        Ok(RegionSelector::Box(rect))
    }

    pub fn from_mask(width: usize, height: usize, mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty region mask".into()));
        }
        indices.sort_unstable();
        indices.dedup();
        if *indices.last().unwrap() >= width * height {
            return Err(Error::Data("region mask exceeds image bounds".into()));
        }
        let mut bits = vec![0u64; (width * height).div_ceil(64)];
        for &i in &indices {
            bits[i / 64] |= 1 << (i % 64);
        }
        Ok(RegionSelector::Mask {
            width,
            height,
            indices,
            bits,
        })
    }

    /// Mask covering the union of the given superpixels.
    pub fn from_superpixels(sp: &Superpixelization, ids: &[u32]) -> Result<Self> {
        let mut member = vec![false; sp.count()];
        for &id in ids {
            if id as usize >= sp.count() {
                return Err(Error::Data(format!("superpixel id {id} out of range")));
            }
            member[id as usize] = true;
        }
        let indices: Vec<usize> = sp
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| member[id as usize])
            .map(|(i, _)| i)
            .collect();
        Self::from_mask(sp.width, sp.height, indices)
    }

    pub fn is_empty(&self) -> bool {
        match self {
            RegionSelector::Box(r) => r.area() == 0,
            RegionSelector::Mask { indices, .. } => indices.is_empty(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        match self {
            RegionSelector::Box(r) => r.area(),
            RegionSelector::Mask { indices, .. } => indices.len(),
        }
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match self {
            RegionSelector::Box(r) => x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1,
            RegionSelector::Mask { width, bits, .. } => {
                let i = y * width + x;
                bits[i / 64] & (1 << (i % 64)) != 0
            }
        }
    }

    pub fn for_each_pixel(&self, image_width: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            RegionSelector::Box(r) => {
                for y in r.y0..r.y1 {
                    for x in r.x0..r.x1 {
                        f(x, y);
                    }
                }
            }
            RegionSelector::Mask { width, indices, .. } => {
                debug_assert_eq!(*width, image_width);
                for &i in indices {
                    f(i % width, i / width);
                }
            }
        }
    }

    pub fn centroid(&self) -> (f64, f64) {
        match self {
            RegionSelector::Box(r) => (
                (r.x0 + r.x1) as f64 / 2.0 - 0.5,
                (r.y0 + r.y1) as f64 / 2.0 - 0.5,
            ),
            RegionSelector::Mask { width, indices, .. } => {
                let mut sx = 0f64;
                let mut sy = 0f64;
                for &i in indices {
                    sx += (i % width) as f64;
                    sy += (i / width) as f64;
                }
                let n = indices.len() as f64;
                (sx / n, sy / n)
            }
        }
    }
}

/// Shannon entropy in bits of a normalized histogram. Entries must be
/// non-negative and sum to 1 within 1e-6.
pub fn entropy(hist: &[f32]) -> Result<f32> {
    if hist.iter().any(|&v| v < 0.0) {
        return Err(Error::Data("histogram has negative entries".into()));
    }
    let sum: f32 = hist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!("histogram sums to {sum}, not 1")));
    }
    Ok(entropy_unchecked(hist))
}

/// Entropy with the 0 log 0 = 0 convention; all-zero input yields 0.
pub(crate) fn entropy_unchecked(hist: &[f32]) -> f32 {
    -hist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f32>()
}

/// (x_hat, y_hat, |x_hat|, |y_hat|) with coordinates normalized to [-1, 1]
/// relative to the image center.
pub fn location_features(centroid: (f64, f64), width: usize, height: usize) -> [f32; 4] {
    let xh = (2.0 * centroid.0 / (width.max(1) as f64 - 1.0).max(1.0) - 1.0) as f32;
    let yh = (2.0 * centroid.1 / (height.max(1) as f64 - 1.0).max(1.0) - 1.0) as f32;
    [xh, yh, xh.abs(), yh.abs()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CodebookKind {
    Texton,
    VisualWord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub kind: CodebookKind,
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
}

const ZOCB_MAGIC: &[u8; 4] = b"ZOCB";
const ZOCB_VERSION: u32 = 1;

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    binio::write_magic(&mut w, ZOCB_MAGIC).map_err(io_err)?;
    binio::write_u32(&mut w, ZOCB_VERSION).map_err(io_err)?;
    let kind = match cb.kind {
        CodebookKind::Texton => 0u8,
        CodebookKind::VisualWord => 1u8,
    };
    std::io::Write::write_all(&mut w, &[kind]).map_err(io_err)?;
    binio::write_u32(&mut w, cb.k as u32).map_err(io_err)?;
    binio::write_u32(&mut w, cb.dim as u32).map_err(io_err)?;
    binio::write_f32_slice(&mut w, &cb.centroids).map_err(io_err)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::read_magic(&mut r, ZOCB_MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != ZOCB_VERSION {
        return Err(Error::Format(format!("unsupported ZOCB version {version}")));
    }
    let kind = match binio::read_u8(&mut r)? {
        0 => CodebookKind::Texton,
        1 => CodebookKind::VisualWord,
        other => return Err(Error::Format(format!("unknown codebook kind {other}"))),
    };
    let k = binio::read_u32(&mut r)? as usize;
    let dim = binio::read_u32(&mut r)? as usize;
    let centroids = binio::read_f32_vec(&mut r, k * dim)?;
    Ok(Codebook {
        kind,
        k,
        dim,
        centroids,
    })
}

/// Per-image cache for handcrafted extraction: color binning, texton map and
/// SIFT word assignments are computed once and shared across all regions of
/// the image.
pub struct HandcraftedContext<'a> {
    pub img: &'a LabImage,
    binning: ColorBinning,
    texton_map: Vec<u16>,
    texton_k: usize,
    sift: SiftSamples,
    word_assignments: Vec<u16>,
    word_k: usize,
}

impl<'a> HandcraftedContext<'a> {
    pub fn new(
        img: &'a LabImage,
        texton_cb: &Codebook,
        sift_cb: &Codebook,
        sift_params: &DenseSiftParams,
    ) -> Result<Self> {
        let binning = ColorBinning::from_image(img);
        let texton_map = assign_textons(img, texton_cb)?;
        // images too small for any SIFT patch get zero bag-of-words blocks
        let sift = match dense_sift(img, sift_params) {
            Ok(s) => s,
            Err(Error::Dimension(_)) => SiftSamples {
                sites: Vec::new(),
                params: *sift_params,
                descriptors: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        let word_assignments = assign_words(&sift, sift_cb)?;
        Ok(HandcraftedContext {
            img,
            binning,
            texton_map,
            texton_k: texton_cb.k,
            sift,
            word_assignments,
            word_k: sift_cb.k,
        })
    }

    /// [color | texton | sift bag-of-words | location] for one region.
    pub fn descriptor(&self, region: &RegionSelector) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(color_histograms_with(self.img, region, &self.binning)?);
        out.extend(texton_features_from_map(
            &self.texton_map,
            self.texton_k,
            self.img.width,
            region,
        )?);
        out.extend(sift_bow_from_assignments(
            &self.sift,
            &self.word_assignments,
            self.word_k,
            region,
        ));
        out.extend(location_features(
            region.centroid(),
            self.img.width,
            self.img.height,
        ));
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        COLOR_DIM + self.texton_k + 1 + 3 * self.word_k + 6 + LOCATION_DIM
    }
}

/// One-shot handcrafted descriptor; 1818 dims with the default codebook sizes
/// (texton k=64, visual words k=500).
pub fn handcrafted_descriptor(
    img: &LabImage,
    region: &RegionSelector,
    texton_cb: &Codebook,
    sift_cb: &Codebook,
    sift_params: &DenseSiftParams,
) -> Result<Vec<f32>> {
    HandcraftedContext::new(img, texton_cb, sift_cb, sift_params)?.descriptor(region)
}

/// Concatenated zoom-out descriptor with the start offset of every non-empty
/// level block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub offsets: Vec<u32>,
}

/// Concatenates level blocks in order (local, proximal, distant, global);
/// empty blocks are skipped. When `expected` is given, the resulting layout
/// must match it exactly.
pub fn assemble_zoomout(blocks: &[&[f32]], expected: Option<&BlockLayout>) -> Result<FeatureVector> {
    let dims: Vec<usize> = blocks.iter().filter(|b| !b.is_empty()).map(|b| b.len()).collect();
    if dims.is_empty() {
        return Err(Error::Data("all zoom-out blocks are empty".into()));
    }
    let layout = BlockLayout::from_block_dims(&dims);
    if let Some(exp) = expected {
        if exp != &layout {
            return Err(Error::Dimension(format!(
                "feature layout drift: got {:?}/{}, expected {:?}/{}",
                layout.offsets, layout.total_dim, exp.offsets, exp.total_dim
            )));
        }
    }
    let mut values = Vec::with_capacity(layout.total_dim as usize);
    for b in blocks.iter().filter(|b| !b.is_empty()) {
        values.extend_from_slice(b);
    }
    Ok(FeatureVector {
        values,
        offsets: layout.offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_constants() {
        assert_eq!(COLOR_DIM, 243);
        assert_eq!(TEXTON_DIM, 65);
        assert_eq!(SIFT_BOW_DIM, 1506);
        assert_eq!(LOCATION_DIM, 4);
        assert_eq!(HANDCRAFTED_DIM, 1818);
    }

    #[test]
    fn entropy_reference_values() {
        let uniform = vec![1.0f32 / 32.0; 32];
        assert!((entropy(&uniform).unwrap() - 5.0).abs() < 1e-5);
        let mut onehot = vec![0.0f32; 16];
        onehot[3] = 1.0;
        assert_eq!(entropy(&onehot).unwrap(), 0.0);
        let half = vec![0.5f32, 0.5, 0.0, 0.0];
        assert!((entropy(&half).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        assert!(entropy(&[0.5, -0.5, 1.0]).is_err());
        assert!(entropy(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn location_center_and_corner() {
        let center = location_features((4.5, 4.5), 10, 10);
        for v in center {
            assert!(v.abs() < 1e-6, "{center:?}");
        }
        let corner = location_features((0.0, 0.0), 10, 10);
        assert_eq!(corner, [-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn assemble_offsets_and_drift() {
        let local = vec![0.0f32; 1841];
        let prox = vec![0.0f32; 1818];
        let dist = vec![0.0f32; 7];
        let glob = vec![0.0f32; 5];
        let fv = assemble_zoomout(&[&local, &prox, &dist, &glob], None).unwrap();
        assert_eq!(fv.offsets, vec![0, 1841, 3659, 3666]);
        assert_eq!(fv.values.len(), 3671);

        // empty global block collapses to three blocks
        let fv3 = assemble_zoomout(&[&local, &prox, &dist, &[]], None).unwrap();
        assert_eq!(fv3.offsets.len(), 3);

        let wrong = BlockLayout::from_block_dims(&[1841, 1818, 7, 6]);
        assert!(assemble_zoomout(&[&local, &prox, &dist, &glob], Some(&wrong)).is_err());
    }

    #[test]
    fn codebook_round_trip() {
        let cb = Codebook {
            kind: CodebookKind::VisualWord,
            k: 3,
            dim: 4,
            centroids: (0..12).map(|i| i as f32 * 0.5).collect(),
        };
        let dir = std::env::temp_dir().join("zoomout_cb_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cb.zocb");
        save_codebook(&cb, &path).unwrap();
        assert_eq!(load_codebook(&path).unwrap(), cb);
    }

    #[test]
    fn handcrafted_equals_concatenation_of_blocks() {
        let img = crate::synth::test_texture_image(48, 48, 4);
        let texton_cb = train_texton_codebook(std::slice::from_ref(&img), 64, 0).unwrap();
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        let sift_cb = train_sift_codebook(&s.descriptors, 500, 0);
        // 48x48 yields 36*6=216 descriptors, not enough for k=500; use k=50
        let sift_cb = match sift_cb {
            Ok(cb) => cb,
            Err(_) => train_sift_codebook(&s.descriptors, 50, 0).unwrap(),
        };
        let region = RegionSelector::from_box(Rect {
            x0: 4,
            y0: 4,
            x1: 24,
            y1: 24,
        })
        .unwrap();
        let ctx =
            HandcraftedContext::new(&img, &texton_cb, &sift_cb, &DenseSiftParams::default())
                .unwrap();
        let d = ctx.descriptor(&region).unwrap();
        assert_eq!(d.len(), ctx.dim());
        // equals the concatenation of the four sub-blocks
        let c = color_histograms(&img, &region).unwrap();
        assert_eq!(&d[..243], &c[..]);
        let t = texton_features(&img, &region, &texton_cb).unwrap();
        assert_eq!(&d[243..308], &t[..]);
        let loc = location_features(region.centroid(), 48, 48);
        assert_eq!(&d[d.len() - 4..], &loc[..]);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn disjoint_regions_of_constant_image_differ_only_in_location() {
        let img = crate::imagecore::rgb_to_lab(&crate::imagecore::Image::filled(
            64,
            64,
            [90, 140, 30],
        ));
        let texton_cb = train_texton_codebook(std::slice::from_ref(&img), 8, 0).unwrap();
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        let sift_cb = train_sift_codebook(&s.descriptors, 4, 0).unwrap();
        let ctx =
            HandcraftedContext::new(&img, &texton_cb, &sift_cb, &DenseSiftParams::default())
                .unwrap();
        let r1 = RegionSelector::from_box(Rect {
            x0: 0,
            y0: 0,
            x1: 16,
            y1: 16,
        })
        .unwrap();
        let r2 = RegionSelector::from_box(Rect {
            x0: 40,
            y0: 40,
            x1: 56,
            y1: 56,
        })
        .unwrap();
        let d1 = ctx.descriptor(&r1).unwrap();
        let d2 = ctx.descriptor(&r2).unwrap();
        let appearance = d1.len() - 4;
        assert_eq!(&d1[..appearance], &d2[..appearance]);
        assert_ne!(&d1[appearance..], &d2[appearance..]);
    }
}
