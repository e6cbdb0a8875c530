//! Seeded k-means used for both texton and visual-word dictionaries.
//!
//! k-means++ initialization, at most 50 Lloyd iterations or relative
//! objective change below 1e-4; empty clusters are reseeded to the point
//! farthest from its centroid.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const MAX_ITERS: usize = 50;
pub const REL_TOL: f64 = 1e-4;

/// `data` is `n` rows of `dim` values; returns `k * dim` centroid values.
pub fn kmeans(data: &[f32], n: usize, dim: usize, k: usize, seed: u64) -> Result<Vec<f32>> {
    if k < 1 {
        return Err(Error::Data("k must be at least 1".into()));
    }
    if n == 0 || data.len() != n * dim {
        return Err(Error::Data(format!(
            "bad k-means input: n={n}, dim={dim}, len={}",
            data.len()
        )));
    }
    if n < k {
        return Err(Error::Data(format!("{n} samples for k={k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, n, dim, k, &mut rng);

    let mut assignment = vec![0u32; n];
    let mut prev_obj = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let obj = assign(data, n, dim, &centroids, k, &mut assignment);
        update(data, n, dim, k, &assignment, &mut centroids);
        reseed_empty(data, n, dim, k, &assignment, &mut centroids);
        if prev_obj.is_finite() {
            let rel = (prev_obj - obj).abs() / prev_obj.max(1e-30);
            if rel < REL_TOL {
                break;
            }
        }
        prev_obj = obj;
    }
    Ok(centroids)
}

fn plus_plus_init(data: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data[i * dim..(i + 1) * dim], &centroids[0..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        let start = centroids.len();
        centroids.extend_from_slice(&data[pick * dim..(pick + 1) * dim]);
        let c = centroids[start..start + dim].to_vec();
        for i in 0..n {
            let d = sq_dist(&data[i * dim..(i + 1) * dim], &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn assign(
    data: &[f32],
    n: usize,
    dim: usize,
    centroids: &[f32],
    k: usize,
    assignment: &mut [u32],
) -> f64 {
    let objs: Vec<f64> = assignment
        .par_iter_mut()
        .enumerate()
        .map(|(i, a)| {
            let row = &data[i * dim..(i + 1) * dim];
            let (best, d) = nearest(row, centroids, k, dim);
            *a = best as u32;
            d
        })
        .collect();
    objs.iter().sum::<f64>() / n as f64
}

fn update(data: &[f32], n: usize, dim: usize, k: usize, assignment: &[u32], centroids: &mut [f32]) {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = assignment[i] as usize;
        counts[c] += 1;
        let row = &data[i * dim..(i + 1) * dim];
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
}

fn reseed_empty(
    data: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    assignment: &[u32],
    centroids: &mut [f32],
) {
    let mut counts = vec![0usize; k];
    for &a in assignment {
        counts[a as usize] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            // farthest point from its current centroid takes over
            let mut far = 0usize;
            let mut far_d = -1.0f64;
            for i in 0..n {
                let cc = assignment[i] as usize;
                let d = sq_dist(
                    &data[i * dim..(i + 1) * dim],
                    &centroids[cc * dim..(cc + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        }
    }
}

/// Nearest centroid by squared L2 distance, ties to the lower index.
pub fn nearest(row: &[f32], centroids: &[f32], k: usize, dim: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(row, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k1_centroid_is_mean() {
        let data = vec![1.0f32, 2.0, 3.0, 4.0]; // 4 points in 1-d
        let c = kmeans(&data, 4, 1, 1, 0).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn separated_clusters_found() {
        // brute-force oracle: two tight blobs, centroids must land near blob means
        let mut data = Vec::new();
        for i in 0..20 {
            data.push(0.0 + (i % 5) as f32 * 0.01);
            data.push(0.0 + (i % 3) as f32 * 0.01);
        }
        for i in 0..20 {
            data.push(10.0 + (i % 5) as f32 * 0.01);
            data.push(10.0 + (i % 3) as f32 * 0.01);
        }
        let c = kmeans(&data, 40, 2, 2, 7).unwrap();
        let mut cents: Vec<(f32, f32)> = c.chunks(2).map(|p| (p[0], p[1])).collect();
        cents.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((cents[0].0 - 0.02).abs() < 0.1 && (cents[0].1 - 0.0066).abs() < 0.1);
        assert!((cents[1].0 - 10.02).abs() < 0.1 && (cents[1].1 - 10.0066).abs() < 0.1);
    }

    #[test]
    fn duplicate_points_collapse() {
        let data = vec![5.0f32; 12]; // 12 identical 1-d points
        let c = kmeans(&data, 12, 1, 3, 1).unwrap();
        for v in c {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data: Vec<f32> = (0..300).map(|i| ((i * 37) % 101) as f32).collect();
        let a = kmeans(&data, 100, 3, 5, 42).unwrap();
        let b = kmeans(&data, 100, 3, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(kmeans(&[1.0, 2.0], 2, 1, 3, 0).is_err());
        assert!(kmeans(&[1.0], 1, 1, 0, 0).is_err());
    }
}
