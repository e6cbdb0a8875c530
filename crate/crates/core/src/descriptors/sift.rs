//! Dense SIFT on a regular grid over each Lab channel, and bag-of-visual-words
//! region histograms against a 500-word dictionary.

use super::kmeans::{kmeans, nearest};
use super::{entropy_unchecked, Codebook, CodebookKind, RegionSelector};
use crate::imagecore::LabImage;
use crate::{Error, Result};

pub const SIFT_DESC_DIM: usize = 128; // 4x4 cells x 8 orientations
pub const SIFT_WORD_K: usize = 500;
pub const SIFT_BOW_DIM: usize = 3 * SIFT_WORD_K + 6;
pub const N_CHANNELS: usize = 3;
pub const N_PATCH_SIZES: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct DenseSiftParams {
    pub grid_step: usize,
    pub patch_sizes: [usize; N_PATCH_SIZES],
}

impl Default for DenseSiftParams {
    fn default() -> Self {
        DenseSiftParams {
            grid_step: 8,
            patch_sizes: [8, 18],
        }
    }
}

/// Grid-sampled descriptors for one image: per site, one 128-dim descriptor
/// for each (channel, patch size).
#[derive(Debug, Clone)]
pub struct SiftSamples {
    pub sites: Vec<(usize, usize)>,
    pub params: DenseSiftParams,
    /// layout: ((site * 3 + channel) * 2 + patch) * 128
    pub descriptors: Vec<f32>,
}

impl SiftSamples {
    #[inline]
    pub fn desc(&self, site: usize, channel: usize, patch: usize) -> &[f32] {
        let i = ((site * N_CHANNELS + channel) * N_PATCH_SIZES + patch) * SIFT_DESC_DIM;
        &self.descriptors[i..i + SIFT_DESC_DIM]
    }

    pub fn n_descriptors(&self) -> usize {
        self.sites.len() * N_CHANNELS * N_PATCH_SIZES
    }
}

/// Dense SIFT: sites every `grid_step` pixels wherever the largest patch fits;
/// 4x4-cell x 8-orientation descriptors, L2-normalized with clamping at 0.2
/// and renormalization.
pub fn dense_sift(img: &LabImage, params: &DenseSiftParams) -> Result<SiftSamples> {
    let (w, h) = (img.width, img.height);
    let max_patch = *params.patch_sizes.iter().max().unwrap();
    let half = max_patch / 2 + max_patch % 2;
    if w < max_patch + 1 || h < max_patch + 1 {
        return Err(Error::Dimension(format!(
            "image {w}x{h} too small for {max_patch}-pixel patches"
        )));
    }
    let mut sites = Vec::new();
    let mut y = half;
    while y + half <= h {
        let mut x = half;
        while x + half <= w {
            sites.push((x, y));
            x += params.grid_step;
        }
        y += params.grid_step;
    }
    if sites.is_empty() {
        return Err(Error::Dimension("no SIFT grid sites fit the image".into()));
    }

    // gradients per channel, central differences
    let mut grads: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(N_CHANNELS);
    for ch in 0..N_CHANNELS {
        let plane = img.plane(ch);
        let mut gx = vec![0f32; w * h];
        let mut gy = vec![0f32; w * h];
        for yy in 0..h {
            for xx in 0..w {
                let xm = xx.saturating_sub(1);
                let xp = (xx + 1).min(w - 1);
                let ym = yy.saturating_sub(1);
                let yp = (yy + 1).min(h - 1);
                gx[yy * w + xx] = (plane[yy * w + xp] - plane[yy * w + xm]) * 0.5;
                gy[yy * w + xx] = (plane[yp * w + xx] - plane[ym * w + xx]) * 0.5;
            }
        }
        grads.push((gx, gy));
    }

    let mut descriptors =
        Vec::with_capacity(sites.len() * N_CHANNELS * N_PATCH_SIZES * SIFT_DESC_DIM);
    for &(cx, cy) in &sites {
        for (gx, gy) in &grads {
            for &patch in &params.patch_sizes {
                let d = patch_descriptor(gx, gy, w, h, cx, cy, patch);
                descriptors.extend_from_slice(&d);
            }
        }
    }
    Ok(SiftSamples {
        sites,
        params: *params,
        descriptors,
    })
}

fn patch_descriptor(
    gx: &[f32],
    gy: &[f32],
    w: usize,
    h: usize,
    cx: usize,
    cy: usize,
    patch: usize,
) -> [f32; SIFT_DESC_DIM] {
    let mut hist = [0f32; SIFT_DESC_DIM];
    let x0 = cx as isize - (patch / 2) as isize;
    let y0 = cy as isize - (patch / 2) as isize;
    for dy in 0..patch {
        let y = y0 + dy as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        let cell_y = dy * 4 / patch;
        for dx in 0..patch {
            let x = x0 + dx as isize;
            if x < 0 || x >= w as isize {
                continue;
            }
            let cell_x = dx * 4 / patch;
            let idx = y as usize * w + x as usize;
            let (vx, vy) = (gx[idx], gy[idx]);
            let mag = (vx * vx + vy * vy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = vy.atan2(vx); // [-pi, pi]
            let bin = (((angle + std::f32::consts::PI) / (2.0 * std::f32::consts::PI)) * 8.0)
                .floor() as usize;
            let bin = bin.min(7);
            hist[(cell_y * 4 + cell_x) * 8 + bin] += mag;
        }
    }
    let norm: f32 = hist.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 {
        return hist; // all-zero descriptor for gradient-free patches
    }
    for v in &mut hist {
        *v = (*v / norm).min(0.2);
    }
    let norm2: f32 = hist.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm2 > 1e-12 {
        for v in &mut hist {
            *v /= norm2;
        }
    }
    hist
}

/// Visual-word dictionary over a descriptor sample, k-means with a
/// deterministic subsample cap.
pub fn train_sift_codebook(descriptors: &[f32], k: usize, seed: u64) -> Result<Codebook> {
    const MAX_SAMPLES: usize = 50_000;
    if k < 1 {
        return Err(Error::Data("visual-word k must be at least 1".into()));
    }
    if descriptors.len() % SIFT_DESC_DIM != 0 {
        return Err(Error::Data("descriptor buffer not a multiple of 128".into()));
    }
    let mut data = descriptors.to_vec();
    let mut n = data.len() / SIFT_DESC_DIM;
    if n > MAX_SAMPLES {
        let stride = n.div_ceil(MAX_SAMPLES);
        let mut kept = Vec::with_capacity(MAX_SAMPLES * SIFT_DESC_DIM);
        for i in (0..n).step_by(stride) {
            kept.extend_from_slice(&data[i * SIFT_DESC_DIM..(i + 1) * SIFT_DESC_DIM]);
        }
        data = kept;
        n = data.len() / SIFT_DESC_DIM;
    }
    let centroids = kmeans(&data, n, SIFT_DESC_DIM, k, seed)?;
    Ok(Codebook {
        kind: CodebookKind::VisualWord,
        k,
        dim: SIFT_DESC_DIM,
        centroids,
    })
}

/// Nearest-word assignment for every descriptor; one u16 per
/// (site, channel, patch), same layout as the descriptors.
pub fn assign_words(samples: &SiftSamples, cb: &Codebook) -> Result<Vec<u16>> {
    if cb.kind != CodebookKind::VisualWord || cb.dim != SIFT_DESC_DIM {
        return Err(Error::Data("codebook is not a visual-word dictionary".into()));
    }
    Ok((0..samples.n_descriptors())
        .map(|i| {
            let row = &samples.descriptors[i * SIFT_DESC_DIM..(i + 1) * SIFT_DESC_DIM];
            nearest(row, &cb.centroids, cb.k, cb.dim).0 as u16
        })
        .collect())
}

/// Bag-of-words block for a region: per channel the two patch-size histograms
/// averaged (3 x k values), then the entropies of the six pre-average
/// histograms. Grid samples belong to a region iff their center pixel does.
/// Regions with no samples yield zeros.
pub fn sift_bow_from_assignments(
    samples: &SiftSamples,
    assignments: &[u16],
    k: usize,
    region: &RegionSelector,
) -> Vec<f32> {
    let mut hists = vec![vec![0f32; k]; N_CHANNELS * N_PATCH_SIZES];
    let mut counts = [0usize; N_CHANNELS * N_PATCH_SIZES];
    for (site, &(x, y)) in samples.sites.iter().enumerate() {
        if !region.contains(x, y) {
            continue;
        }
        for ch in 0..N_CHANNELS {
            for p in 0..N_PATCH_SIZES {
                let di = (site * N_CHANNELS + ch) * N_PATCH_SIZES + p;
                hists[ch * N_PATCH_SIZES + p][assignments[di] as usize] += 1.0;
                counts[ch * N_PATCH_SIZES + p] += 1;
            }
        }
    }
    for (hist, &c) in hists.iter_mut().zip(&counts) {
        if c > 0 {
            let norm = c as f32;
            hist.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut out = Vec::with_capacity(3 * k + 6);
    for ch in 0..N_CHANNELS {
        let a = &hists[ch * N_PATCH_SIZES];
        let b = &hists[ch * N_PATCH_SIZES + 1];
        out.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
    }
    for hist in &hists {
        out.push(entropy_unchecked(hist));
    }
    out
}

pub fn sift_bow_features(
    samples: &SiftSamples,
    cb: &Codebook,
    region: &RegionSelector,
) -> Result<Vec<f32>> {
    let assignments = assign_words(samples, cb)?;
    Ok(sift_bow_from_assignments(samples, &assignments, cb.k, region))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{rgb_to_lab, Image};
    use crate::superpixel::Rect;

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = rgb_to_lab(&Image::filled(40, 40, [128, 60, 20]));
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        assert!(s.descriptors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_arithmetic_64x64() {
        let img = rgb_to_lab(&Image::filled(64, 64, [0, 0, 0]));
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        // half = 9, sites at 9,17,25,33,41,49 in each axis
        assert_eq!(s.sites.len(), 36);
        assert_eq!(s.n_descriptors(), 36 * 6);
        assert_eq!(s.descriptors.len(), 36 * 6 * SIFT_DESC_DIM);
    }

    #[test]
    fn too_small_image_rejected() {
        let img = rgb_to_lab(&Image::filled(10, 10, [0, 0, 0]));
        assert!(dense_sift(&img, &DenseSiftParams::default()).is_err());
    }

    #[test]
    fn descriptors_are_normalized() {
        let img = crate::synth::test_texture_image(48, 48, 5);
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        for i in 0..s.n_descriptors() {
            let d = &s.descriptors[i * SIFT_DESC_DIM..(i + 1) * SIFT_DESC_DIM];
            let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-4, "norm {norm}");
            // clamped-then-renormalized: nonnegative, never above unit length
            assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn k1_codebook_is_mean_descriptor() {
        let img = crate::synth::test_texture_image(48, 48, 2);
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        let cb = train_sift_codebook(&s.descriptors, 1, 0).unwrap();
        let n = s.n_descriptors();
        for j in 0..SIFT_DESC_DIM {
            let mean: f32 =
                (0..n).map(|i| s.descriptors[i * SIFT_DESC_DIM + j]).sum::<f32>() / n as f32;
            assert!((cb.centroids[j] - mean).abs() < 1e-4);
        }
    }

    #[test]
    fn region_with_no_samples_yields_zeros() {
        let img = crate::synth::test_texture_image(48, 48, 9);
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        let cb = train_sift_codebook(&s.descriptors, 4, 0).unwrap();
        // 1x1 region at the corner contains no grid site
        let region = RegionSelector::from_box(Rect {
            x0: 0,
            y0: 0,
            x1: 1,
            y1: 1,
        })
        .unwrap();
        let out = sift_bow_features(&s, &cb, &region).unwrap();
        assert_eq!(out.len(), 3 * 4 + 6);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_site_region_is_one_hot() {
        let img = crate::synth::test_texture_image(48, 48, 9);
        let s = dense_sift(&img, &DenseSiftParams::default()).unwrap();
        let cb = train_sift_codebook(&s.descriptors, 8, 1).unwrap();
        // region containing exactly the first grid site
        let (x, y) = s.sites[0];
        let region = RegionSelector::from_box(Rect {
            x0: x,
            y0: y,
            x1: x + 1,
            y1: y + 1,
        })
        .unwrap();
        let out = sift_bow_features(&s, &cb, &region).unwrap();
        // each channel's averaged histogram sums to 1 and the per-histogram
        // entropies are 0 (single sample each)
        for ch in 0..3 {
            let hist = &out[ch * 8..(ch + 1) * 8];
            assert!((hist.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        for e in &out[24..30] {
            assert_eq!(*e, 0.0);
        }
    }
}
