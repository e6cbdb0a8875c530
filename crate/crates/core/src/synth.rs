//! Synthetic image generation: textured test images and a labeled dataset of
//! colored shapes whose class identity depends on context at different
//! spatial ranges.
//!
//! Scene construction (8 classes, 0 = background):
//!   - red objects are class 1 or 2; the pair member is signaled by a bright
//!     halo ring separated from the object by a gap of plain background
//!   - green objects are class 3 or 4, signaled by a small marker dot placed
//!     well outside the halo range
//!   - blue objects are class 5 or 6 depending on the scene style, which is
//!     signaled only by the position (top vs bottom) of a fixed-color band;
//!     both styles have identical image-level color statistics
//!   - yellow objects are the rare class 7
//!
//! A superpixel inside an object therefore cannot be classified from its own
//! pixels alone: the halo is only visible in the proximal neighborhood, the
//! marker dot at mid range, and the band position only at image scale.

use crate::imagecore::{rgb_to_lab, save_image, save_label_map, Image, LabImage, LabelMap, IGNORE};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SYNTH_CLASSES: usize = 8;
const BAND_HEIGHT: usize = 6;

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub objects_per_image: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 96,
            height: 96,
            objects_per_image: 2,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn noisy(rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64) -> [u8; 3] {
    [
        clamp_u8(base[0] + rng.gen_range(-amp..amp)),
        clamp_u8(base[1] + rng.gen_range(-amp..amp)),
        clamp_u8(base[2] + rng.gen_range(-amp..amp)),
    ]
}

/// Multi-frequency color texture converted to Lab; a generic non-constant
/// image for unit tests.
pub fn test_texture_image(width: usize, height: usize, seed: u64) -> LabImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64;
            let fy = y as f64;
            let r = 128.0
                + 60.0 * (0.11 * fx + phases[0]).sin()
                + 30.0 * (0.23 * fy + phases[1]).cos();
            let g = 128.0
                + 55.0 * (0.07 * (fx + fy) + phases[2]).sin()
                + 25.0 * (0.31 * fx + phases[3]).cos();
            let b = 128.0
                + 50.0 * (0.17 * fy + phases[4]).sin()
                + 35.0 * (0.05 * fx + phases[5]).cos();
            let n = rng.gen_range(-8.0..8.0);
            data.push(clamp_u8(r + n));
            data.push(clamp_u8(g + n));
            data.push(clamp_u8(b + n));
        }
    }
    rgb_to_lab(&Image::new(width, height, data).expect("sized correctly"))
}

/// Photo-like image: smooth gradients, a horizon, soft blobs, fine noise.
pub fn natural_like_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = (height as f64 * rng.gen_range(0.35..0.65)) as usize;
    let sky_top = [rng.gen_range(90.0..140.0), rng.gen_range(130.0..180.0), rng.gen_range(190.0..240.0)];
    let sky_bot = [sky_top[0] + 60.0, sky_top[1] + 50.0, sky_top[2] + 15.0];
    let ground = [rng.gen_range(60.0..110.0), rng.gen_range(90.0..140.0), rng.gen_range(40.0..80.0)];
    let n_blobs = rng.gen_range(3..7);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(6.0..18.0),
                [
                    rng.gen_range(40.0..220.0),
                    rng.gen_range(40.0..220.0),
                    rng.gen_range(40.0..220.0),
                ],
            )
        })
        .collect();
    let mut img = Image::filled(width, height, [0, 0, 0]);
    for y in 0..height {
        for x in 0..width {
            let mut c = if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                [
                    sky_top[0] + t * (sky_bot[0] - sky_top[0]),
                    sky_top[1] + t * (sky_bot[1] - sky_top[1]),
                    sky_top[2] + t * (sky_bot[2] - sky_top[2]),
                ]
            } else {
                let shade = 1.0 - 0.3 * ((y - horizon) as f64 / (height - horizon).max(1) as f64);
                [ground[0] * shade, ground[1] * shade, ground[2] * shade]
            };
            for &(bx, by, r, col) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let w = (-d2 / (2.0 * r * r)).exp();
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - w) + col[ch] * w;
                }
            }
            img.set_pixel(x, y, noisy(&mut rng, c, 7.0));
        }
    }
    img
}

const RED: [f64; 3] = [200.0, 40.0, 40.0];
const GREEN: [f64; 3] = [40.0, 170.0, 50.0];
const BLUE: [f64; 3] = [45.0, 60.0, 200.0];
const YELLOW: [f64; 3] = [230.0, 210.0, 40.0];
const HALO: [f64; 3] = [245.0, 245.0, 245.0];
const BAND: [f64; 3] = [70.0, 55.0, 40.0];
const MARKER: [f64; 3] = [160.0, 40.0, 170.0];
/// background-filled gap between an object and its halo ring, so the halo
/// never touches the object's own superpixels
const HALO_GAP: f64 = 6.0;
const HALO_WIDTH: f64 = 4.0;
/// center-to-center distance of a green object's marker dot; far enough that
/// the dot sits outside the proximal neighborhood
const DOT_DIST: f64 = 36.0;
const DOT_R: f64 = 4.5;

struct ObjectSpec {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
    halo: bool,
    dot: Option<(f64, f64)>,
    class: u8,
}

/// One labeled scene. `seed` fully determines the output.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> SynthScene {
    let (w, h) = (cfg.width, cfg.height);
    assert!(w >= 64 && h >= 64, "scenes need at least 64x64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band_at_bottom = rng.gen_bool(0.5);

    // objects: sample color kind by weight, positions in the vertical middle
    // so neither band location is within proximal reach
    let mut objects: Vec<ObjectSpec> = Vec::new();
    for _ in 0..cfg.objects_per_image {
        let kind = {
            let t: f64 = rng.gen();
            if t < 0.30 {
                0 // red
            } else if t < 0.60 {
                1 // green
            } else if t < 0.90 {
                2 // blue
            } else {
                3 // yellow
            }
        };
        let r = rng.gen_range(10.0..13.0);
        let halo = kind == 0 && rng.gen_bool(0.5);
        let wants_dot = kind == 1 && rng.gen_bool(0.5);
        let (color, class) = match kind {
            0 => (RED, if halo { 1 } else { 2 }),
            1 => (GREEN, if wants_dot { 3 } else { 4 }),
            2 => (BLUE, if band_at_bottom { 6 } else { 5 }),
            _ => (YELLOW, 7),
        };
        let margin = r + HALO_GAP + HALO_WIDTH + 2.0;
        let mut placed = None;
        'tries: for _ in 0..60 {
            let cx = rng.gen_range(margin..w as f64 - margin);
            let cy = rng.gen_range(h as f64 * 0.40..h as f64 * 0.60);
            let clear = objects.iter().all(|o| {
                ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.r + r + 14.0
                    && o.dot.is_none_or(|(dx, dy)| {
                        ((dx - cx).powi(2) + (dy - cy).powi(2)).sqrt() > 46.0
                    })
            });
            if !clear {
                continue;
            }
            if !wants_dot {
                placed = Some((cx, cy, None));
                break;
            }
            // dot must land inside the image, off the band rows, and clear of
            // every object (including the objects not yet placed is handled
            // by the pairwise distance when they are placed)
            for _ in 0..40 {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let dx = cx + DOT_DIST * a.cos();
                let dy = cy + DOT_DIST * a.sin();
                let pad = DOT_R + 2.0;
                let in_bounds = dx > pad
                    && dx < w as f64 - pad
                    && dy > BAND_HEIGHT as f64 + pad
                    && dy < (h - BAND_HEIGHT) as f64 - pad;
                let clear = objects
                    .iter()
                    .all(|o| ((o.cx - dx).powi(2) + (o.cy - dy).powi(2)).sqrt() > 46.0);
                if in_bounds && clear {
                    placed = Some((cx, cy, Some((dx, dy))));
                    break 'tries;
                }
            }
        }
        if let Some((cx, cy, dot)) = placed {
            objects.push(ObjectSpec {
                cx,
                cy,
                r,
                color,
                halo,
                dot,
                class,
            });
        }
    }

    let mut img = Image::filled(w, h, [0, 0, 0]);
    let mut labels = vec![0u8; w * h];
    let tex_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64;
            let fy = y as f64;
            // mid-gray textured background, identical for both styles
            let t = 12.0 * (0.25 * fx + tex_phase).sin() * (0.21 * fy).cos();
            let mut base = [128.0 + t, 128.0 + t, 128.0 + t];
            let mut label = 0u8;
            let in_band = if band_at_bottom {
                y >= h - BAND_HEIGHT
            } else {
                y < BAND_HEIGHT
            };
            if in_band {
                base = BAND;
            }
            for o in &objects {
                let d = ((fx - o.cx).powi(2) + (fy - o.cy).powi(2)).sqrt();
                if d <= o.r {
                    let tex = 14.0 * (0.5 * (fx + fy)).sin();
                    base = [o.color[0] + tex, o.color[1] + tex, o.color[2] + tex];
                    label = o.class;
                } else if d <= o.r + 1.5 {
                    label = IGNORE;
                } else if o.halo
                    && d > o.r + HALO_GAP
                    && d <= o.r + HALO_GAP + HALO_WIDTH
                {
                    base = HALO;
                }
                if let Some((dx, dy)) = o.dot {
                    if ((fx - dx).powi(2) + (fy - dy).powi(2)).sqrt() <= DOT_R {
                        base = MARKER;
                    }
                }
            }
            img.set_pixel(x, y, noisy(&mut rng, base, 9.0));
            labels[y * w + x] = label;
        }
    }
    let labels = LabelMap::new(w, h, SYNTH_CLASSES, labels).expect("labels in range");
    SynthScene { image: img, labels }
}

/// Write `n_images` scenes plus a TSV manifest (`image<TAB>label<TAB>split`,
/// paths relative to the manifest) into `dir`; the first 80% are `train`.
pub fn generate_dataset(
    dir: &Path,
    n_images: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<PathBuf> {
    if n_images < 2 {
        return Err(Error::Data("dataset needs at least 2 images".into()));
    }
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest =
        std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let n_train = (n_images * 4) / 5;
    for i in 0..n_images {
        let scene = synth_scene(seed.wrapping_add(i as u64), cfg);
        let img_rel = format!("images/img_{i:04}.png");
        let lab_rel = format!("labels/lab_{i:04}.png");
        save_image(&scene.image, &dir.join(&img_rel))?;
        save_label_map(&scene.labels, &dir.join(&lab_rel))?;
        let split = if i < n_train { "train" } else { "test" };
        writeln!(manifest, "{img_rel}\t{lab_rel}\t{split}")
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_image_is_not_constant() {
        let lab = test_texture_image(32, 24, 3);
        let l = lab.plane(0);
        let min = l.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(max - min > 10.0);
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_scene(17, &cfg);
        let b = synth_scene(17, &cfg);
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.labels.data, b.labels.data);
        let c = synth_scene(18, &cfg);
        assert_ne!(a.image.data, c.image.data);
    }

    #[test]
    fn labels_are_valid_classes() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            let s = synth_scene(seed, &cfg);
            for &l in &s.labels.data {
                assert!(l == IGNORE || (l as usize) < SYNTH_CLASSES);
            }
        }
    }

    #[test]
    fn all_classes_appear_across_many_seeds() {
        let cfg = SynthConfig::default();
        let mut seen = [false; SYNTH_CLASSES];
        for seed in 0..200 {
            let s = synth_scene(seed, &cfg);
            for &l in &s.labels.data {
                if l != IGNORE {
                    seen[l as usize] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "{seen:?}");
    }

    #[test]
    fn blue_class_follows_band_style() {
        // classes 5 and 6 never co-occur in one image
        let cfg = SynthConfig::default();
        for seed in 0..100 {
            let s = synth_scene(seed, &cfg);
            let has5 = s.labels.data.iter().any(|&l| l == 5);
            let has6 = s.labels.data.iter().any(|&l| l == 6);
            assert!(!(has5 && has6), "seed {seed}");
        }
    }

    #[test]
    fn dataset_writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let manifest = generate_dataset(dir.path(), 5, &cfg, 0).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].ends_with("train"));
        assert!(lines[4].ends_with("test"));
        for line in lines {
            let mut parts = line.split('\t');
            let img = parts.next().unwrap();
            let lab = parts.next().unwrap();
            assert!(dir.path().join(img).exists());
            assert!(dir.path().join(lab).exists());
        }
    }
}
