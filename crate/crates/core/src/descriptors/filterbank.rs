//! TextonBoost-style 17-filter bank and texton features.
//!
//! Gaussians at scales 1, 2, 4 on all three Lab channels; x/y
//! derivative-of-Gaussian at scales 2, 4 on L; Laplacian-of-Gaussian at
//! scales 1, 2, 4, 8 on L. Pixels are quantized to their nearest texton from
//! a k-means dictionary; a region is a 64-bin assignment histogram plus its
//! entropy.

use super::kmeans::{kmeans, nearest};
use super::{entropy_unchecked, Codebook, CodebookKind, RegionSelector};
use crate::imagecore::LabImage;
use crate::{Error, Result};

pub const FILTER_COUNT: usize = 17;
pub const TEXTON_K: usize = 64;
pub const TEXTON_DIM: usize = TEXTON_K + 1;

const GAUSS_SCALES: [f32; 3] = [1.0, 2.0, 4.0];
const DERIV_SCALES: [f32; 2] = [2.0, 4.0];
const LOG_SCALES: [f32; 4] = [1.0, 2.0, 4.0, 8.0];

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// First derivative of a Gaussian, zero-sum.
fn gaussian_deriv_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let g = gaussian_kernel(sigma);
    (-radius..=radius)
        .zip(&g)
        .map(|(i, &gv)| -(i as f32) / (sigma * sigma) * gv)
        .collect()
}

/// Second derivative of a Gaussian, used to build the LoG separably.
fn gaussian_second_deriv_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let g = gaussian_kernel(sigma);
    let mut k: Vec<f32> = (-radius..=radius)
        .zip(&g)
        .map(|(i, &gv)| {
            let x2 = (i * i) as f32;
            (x2 / (sigma * sigma) - 1.0) / (sigma * sigma) * gv
        })
        .collect();
    // remove the DC leak from truncation so constants map to exactly zero
    let mean = k.iter().sum::<f32>() / k.len() as f32;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

/// Separable convolution with reflected borders.
fn conv_separable(plane: &[f32], w: usize, h: usize, kx: &[f32], ky: &[f32]) -> Vec<f32> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - i - 1;
            }
        }
        i as usize
    };
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (ki, kv) in kx.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - rx, w);
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (ki, kv) in ky.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - ry, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel filter-bank responses, row-major `n_pixels x 17`.
pub fn filter_responses(img: &LabImage) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(FILTER_COUNT);
    for &sigma in &GAUSS_SCALES {
        let g = gaussian_kernel(sigma);
        for ch in 0..3 {
            planes.push(conv_separable(img.plane(ch), w, h, &g, &g));
        }
    }
    for &sigma in &DERIV_SCALES {
        let g = gaussian_kernel(sigma);
        let dg = gaussian_deriv_kernel(sigma);
        planes.push(conv_separable(&img.l, w, h, &dg, &g)); // d/dx
        planes.push(conv_separable(&img.l, w, h, &g, &dg)); // d/dy
    }
    for &sigma in &LOG_SCALES {
        let g = gaussian_kernel(sigma);
        let d2g = gaussian_second_deriv_kernel(sigma);
        let gxx = conv_separable(&img.l, w, h, &d2g, &g);
        let gyy = conv_separable(&img.l, w, h, &g, &d2g);
        planes.push(gxx.iter().zip(&gyy).map(|(a, b)| a + b).collect());
    }
    debug_assert_eq!(planes.len(), FILTER_COUNT);
    let mut out = vec![0f32; n * FILTER_COUNT];
    for (f, plane) in planes.iter().enumerate() {
        for i in 0..n {
            out[i * FILTER_COUNT + f] = plane[i];
        }
    }
    out
}

/// Trains a texton dictionary with k-means over filter responses sampled from
/// the given images. At most `MAX_SAMPLES` pixels are kept, strided
/// deterministically.
pub fn train_texton_codebook(images: &[LabImage], k: usize, seed: u64) -> Result<Codebook> {
    const MAX_SAMPLES: usize = 100_000;
    if k < 1 {
        return Err(Error::Data("texton k must be at least 1".into()));
    }
    let mut samples: Vec<f32> = Vec::new();
    for img in images {
        samples.extend(filter_responses(img));
    }
    let mut n = samples.len() / FILTER_COUNT;
    if n > MAX_SAMPLES {
        let stride = n.div_ceil(MAX_SAMPLES);
        let mut kept = Vec::with_capacity(MAX_SAMPLES * FILTER_COUNT);
        for i in (0..n).step_by(stride) {
            kept.extend_from_slice(&samples[i * FILTER_COUNT..(i + 1) * FILTER_COUNT]);
        }
        samples = kept;
        n = samples.len() / FILTER_COUNT;
    }
    if n < 10 * k {
        return Err(Error::Data(format!(
            "texton training needs at least {} pixels, got {n}",
            10 * k
        )));
    }
    let centroids = kmeans(&samples, n, FILTER_COUNT, k, seed)?;
    Ok(Codebook {
        kind: CodebookKind::Texton,
        k,
        dim: FILTER_COUNT,
        centroids,
    })
}

/// Per-pixel nearest-texton assignment; computed once per image and reused
/// across regions.
pub fn assign_textons(img: &LabImage, cb: &Codebook) -> Result<Vec<u16>> {
    if cb.kind != CodebookKind::Texton || cb.dim != FILTER_COUNT {
        return Err(Error::Data("codebook is not a texton dictionary".into()));
    }
    let responses = filter_responses(img);
    let n = img.width * img.height;
    Ok((0..n)
        .map(|i| {
            let row = &responses[i * FILTER_COUNT..(i + 1) * FILTER_COUNT];
            nearest(row, &cb.centroids, cb.k, cb.dim).0 as u16
        })
        .collect())
}

/// k-bin texton histogram over a region plus its entropy: k+1 values.
pub fn texton_features_from_map(
    map: &[u16],
    k: usize,
    width: usize,
    region: &RegionSelector,
) -> Result<Vec<f32>> {
    if region.is_empty() {
        return Err(Error::Data("empty region for texton features".into()));
    }
    let mut hist = vec![0f32; k];
    let mut count = 0usize;
    region.for_each_pixel(width, |x, y| {
        hist[map[y * width + x] as usize] += 1.0;
        count += 1;
    });
    for v in &mut hist {
        *v /= count as f32;
    }
    let ent = entropy_unchecked(&hist);
    hist.push(ent);
    Ok(hist)
}

pub fn texton_features(
    img: &LabImage,
    region: &RegionSelector,
    cb: &Codebook,
) -> Result<Vec<f32>> {
    let map = assign_textons(img, cb)?;
    texton_features_from_map(&map, cb.k, img.width, region)
}
