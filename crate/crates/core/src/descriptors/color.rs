//! Color histograms over Lab channels: fixed-range 32- and 8-bin histograms,
//! their entropies, and quantile-adaptive rebinning from whole-image
//! statistics. 243 dimensions total.

use super::{entropy_unchecked, RegionSelector};
use crate::imagecore::LabImage;
use crate::{Error, Result};

pub const COLOR_DIM: usize = 243;

/// Fixed channel ranges for equally spaced binning.
pub const CHANNEL_RANGES: [(f32, f32); 3] = [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)];

const BIG_BINS: usize = 32;
const SMALL_BINS: usize = 8;

/// Per-image quantile bin edges, computed once and reused for every region.
#[derive(Debug, Clone)]
pub struct ColorBinning {
    /// per channel: 31 interior edges for 32 equal-mass bins
    edges_big: [Vec<f32>; 3],
    /// per channel: 7 interior edges for 8 equal-mass bins
    edges_small: [Vec<f32>; 3],
}

impl ColorBinning {
    pub fn from_image(img: &LabImage) -> Self {
        let mut edges_big: [Vec<f32>; 3] = Default::default();
        let mut edges_small: [Vec<f32>; 3] = Default::default();
        for ch in 0..3 {
            let mut vals: Vec<f32> = img.plane(ch).to_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            edges_big[ch] = quantile_edges(&vals, BIG_BINS);
            edges_small[ch] = quantile_edges(&vals, SMALL_BINS);
        }
        ColorBinning {
            edges_big,
            edges_small,
        }
    }
}

fn quantile_edges(sorted: &[f32], bins: usize) -> Vec<f32> {
    let n = sorted.len();
    (1..bins)
        .map(|i| {
            let pos = (i as f64 / bins as f64) * (n - 1) as f64;
            sorted[pos.round() as usize]
        })
        .collect()
}

#[inline]
fn fixed_bin(v: f32, lo: f32, hi: f32, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f32).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

#[inline]
fn adaptive_bin(v: f32, edges: &[f32]) -> usize {
    // number of interior edges <= v; degenerate channels land in the last bin
    edges.partition_point(|&e| e <= v)
}

/// 243-dim color block: 120 fixed-range histogram dims, 3 entropies of the
/// 32-bin fixed histograms, then 120 adaptive-binned dims.
pub fn color_histograms(img: &LabImage, region: &RegionSelector) -> Result<Vec<f32>> {
    let binning = ColorBinning::from_image(img);
    color_histograms_with(img, region, &binning)
}

pub fn color_histograms_with(
    img: &LabImage,
    region: &RegionSelector,
    binning: &ColorBinning,
) -> Result<Vec<f32>> {
    if region.is_empty() {
        return Err(Error::Data("empty region for color histograms".into()));
    }
    let mut fixed = vec![0f32; 3 * (BIG_BINS + SMALL_BINS)];
    let mut adaptive = vec![0f32; 3 * (BIG_BINS + SMALL_BINS)];
    let mut count = 0usize;
    region.for_each_pixel(img.width, |x, y| {
        count += 1;
        let lab = img.lab(x, y);
        for ch in 0..3 {
            let v = lab[ch];
            let (lo, hi) = CHANNEL_RANGES[ch];
            let base = ch * (BIG_BINS + SMALL_BINS);
            fixed[base + fixed_bin(v, lo, hi, BIG_BINS)] += 1.0;
            fixed[base + BIG_BINS + fixed_bin(v, lo, hi, SMALL_BINS)] += 1.0;
            adaptive[base + adaptive_bin(v, &binning.edges_big[ch])] += 1.0;
            adaptive[base + BIG_BINS + adaptive_bin(v, &binning.edges_small[ch])] += 1.0;
        }
    });
    let norm = count as f32;
    for v in fixed.iter_mut().chain(adaptive.iter_mut()) {
        *v /= norm;
    }
    let mut out = Vec::with_capacity(COLOR_DIM);
    out.extend_from_slice(&fixed);
    for ch in 0..3 {
        let base = ch * (BIG_BINS + SMALL_BINS);
        out.push(entropy_unchecked(&fixed[base..base + BIG_BINS]));
    }
    out.extend_from_slice(&adaptive);
    debug_assert_eq!(out.len(), COLOR_DIM);
    Ok(out)
}
