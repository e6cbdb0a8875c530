//! Image and label-map I/O, sRGB to CIELAB conversion, and color-coded
//! rendering of predicted label maps.

use crate::{Error, Result};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

/// Sentinel pixel value for "void" pixels excluded from training and evaluation.
pub const IGNORE: u8 = 255;

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// r,g,b interleaved, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image must be at least 1x1".into()));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match {}x{} RGB",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// CIELAB image with separate float planes. L in [0,100], a/b roughly [-128,127].
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl LabImage {
    #[inline]
    pub fn lab(&self, x: usize, y: usize) -> [f32; 3] {
        let i = y * self.width + x;
        [self.l[i], self.a[i], self.b[i]]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        match channel {
            0 => &self.l,
            1 => &self.a,
            _ => &self.b,
        }
    }
}

/// Per-pixel class ids in `{0..num_classes-1}` plus the [`IGNORE`] sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > IGNORE as usize {
            return Err(Error::Data(format!(
                "num_classes must be in 1..=254, got {num_classes}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "label buffer length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            return Err(Error::Data(format!(
                "label value {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelMap {
            width,
            height,
            num_classes,
            data,
        })
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// One RGB triple per class id; class 0 is black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Standard VOC bit-reversal colormap for an arbitrary class count.
    pub fn voc(num_classes: usize) -> Self {
        let colors = (0..num_classes).map(voc_color).collect();
        Palette { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

/// VOC colormap entry: spread the low bits of the id across the high bits of r/g/b.
pub fn voc_color(id: usize) -> [u8; 3] {
    let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
    let mut c = id;
    for shift in 0..8 {
        r |= (((c >> 0) & 1) as u8) << (7 - shift);
        g |= (((c >> 1) & 1) as u8) << (7 - shift);
        b |= (((c >> 2) & 1) as u8) << (7 - shift);
        c >>= 3;
    }
    [r, g, b]
}

pub fn load_image(path: &Path) -> Result<Image> {
    let dyn_img = image::open(path).map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let rgb = dyn_img.into_rgb8();
    Image::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// sRGB (D65) to CIELAB, standard gamma and white point.
pub fn rgb_to_lab(img: &Image) -> LabImage {
    let n = img.width * img.height;
    let mut l = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for px in img.data.chunks_exact(3) {
        let (ll, la, lb) = srgb_to_lab(px[0], px[1], px[2]);
        l.push(ll);
        a.push(la);
        b.push(lb);
    }
    LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    }
}

#[inline]
fn srgb_linearize(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA3: f64 = 216.0 / 24389.0; // (6/29)^3
    if t > DELTA3 {
        t.cbrt()
    } else {
        t * (841.0 / 108.0) + 4.0 / 29.0
    }
}

fn srgb_to_lab(r: u8, g: u8, b: u8) -> (f32, f32, f32) {
    let rl = srgb_linearize(r);
    let gl = srgb_linearize(g);
    let bl = srgb_linearize(b);
    // sRGB -> XYZ, D65.
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let fx = lab_f(x / 0.95047);
    let fy = lab_f(y);
    let fz = lab_f(z / 1.08883);
    let ll = 116.0 * fy - 16.0;
    let la = 500.0 * (fx - fy);
    let lb = 200.0 * (fy - fz);
    (ll as f32, la as f32, lb as f32)
}

/// Reads a label map from an indexed or 8-bit grayscale PNG; pixel value is
/// the class id, 255 means ignore.
pub fn load_label_map(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    // keep raw palette indices instead of expanded RGB
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed, png::BitDepth::Eight)
        | (png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (ct, bd) => {
            return Err(Error::Decode {
                path: path.into(),
                reason: format!("unsupported label PNG: {ct:?} at {bd:?}"),
            })
        }
    }
    buf.truncate(info.buffer_size());
    LabelMap::new(info.width as usize, info.height as usize, num_classes, buf)
}

/// Writes a label map as an 8-bit indexed PNG with the VOC palette; id 255
/// stays the ignore sentinel.
pub fn save_label_map(lm: &LabelMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), lm.width as u32, lm.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let mut palette = Vec::with_capacity(256 * 3);
    for id in 0..256 {
        let rgb = if id == IGNORE as usize {
            [255, 255, 255]
        } else {
            voc_color(id)
        };
        palette.extend_from_slice(&rgb);
    }
    encoder.set_palette(palette);
    let mut writer = encoder.write_header().map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    writer.write_image_data(&lm.data).map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Per-pixel palette lookup; IGNORE pixels render as white.
pub fn render_labels(lm: &LabelMap, pal: &Palette) -> Result<Image> {
    let mut data = Vec::with_capacity(3 * lm.width * lm.height);
    for &id in &lm.data {
        let rgb = if id == IGNORE {
            [255, 255, 255]
        } else {
            *pal.colors.get(id as usize).ok_or_else(|| {
                Error::Data(format!(
                    "class id {id} beyond palette of {} entries",
                    pal.len()
                ))
            })?
        };
        data.extend_from_slice(&rgb);
    }
    Image::new(lm.width, lm.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_maps_to_zero_lightness() {
        let (l, a, b) = srgb_to_lab(0, 0, 0);
        assert_eq!(l, 0.0);
        assert_eq!(a, 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn white_maps_to_l100() {
        let (l, a, b) = srgb_to_lab(255, 255, 255);
        assert!((l - 100.0).abs() < 1e-3, "L = {l}");
        assert!(a.abs() < 0.01);
        assert!(b.abs() < 0.01);
    }

    #[test]
    fn pure_red_reference_values() {
        // reference values from evaluating sRGB -> XYZ (D65) -> Lab by hand
        let (l, a, b) = srgb_to_lab(255, 0, 0);
        assert!((l - 53.24).abs() < 0.05, "L = {l}");
        assert!((a - 80.09).abs() < 0.1, "a = {a}");
        assert!((b - 67.20).abs() < 0.1, "b = {b}");
    }

    #[test]
    fn gray_inputs_have_near_zero_chroma() {
        for v in (0..=255u16).step_by(17) {
            let (_, a, b) = srgb_to_lab(v as u8, v as u8, v as u8);
            assert!(a.abs() < 0.5 && b.abs() < 0.5);
        }
    }

    #[test]
    fn voc_palette_known_entries() {
        assert_eq!(voc_color(0), [0, 0, 0]);
        assert_eq!(voc_color(1), [128, 0, 0]); // aeroplane
        assert_eq!(voc_color(2), [0, 128, 0]); // bicycle
        assert_eq!(voc_color(15), [192, 128, 128]); // person
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        let err = LabelMap::new(1, 1, 21, vec![30]);
        assert!(err.is_err());
        // 255 is the ignore sentinel, always allowed
        assert!(LabelMap::new(1, 1, 21, vec![IGNORE]).is_ok());
    }

    #[test]
    fn render_black_background_and_ignore_white() {
        let lm = LabelMap::new(2, 1, 21, vec![0, IGNORE]).unwrap();
        let img = render_labels(&lm, &Palette::voc(21)).unwrap();
        assert_eq!(img.pixel(0, 0), [0, 0, 0]);
        assert_eq!(img.pixel(1, 0), [255, 255, 255]);
    }

    #[test]
    fn render_rejects_id_beyond_palette() {
        let lm = LabelMap::new(1, 1, 21, vec![20]).unwrap();
        let pal = Palette::voc(20);
        assert!(render_labels(&lm, &pal).is_err());
    }

    #[test]
    fn label_map_png_round_trip() {
        let dir = std::env::temp_dir().join("zoomout_imagecore_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.png");
        let data: Vec<u8> = (0..21).chain([IGNORE, 0, 20, 7]).collect();
        let lm = LabelMap::new(5, 5, 21, data).unwrap();
        save_label_map(&lm, &path).unwrap();
        let back = load_label_map(&path, 21).unwrap();
        assert_eq!(lm, back);
    }

    #[test]
    fn load_image_missing_file_errors() {
        assert!(load_image(Path::new("/nonexistent/x.png")).is_err());
    }

    #[test]
    fn load_image_truncated_file_errors() {
        let dir = std::env::temp_dir().join("zoomout_imagecore_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\n\x00\x00").unwrap();
        assert!(load_image(&path).is_err());
    }
}
