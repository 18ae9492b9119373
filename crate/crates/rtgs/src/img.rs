//! Image containers and file IO.
//!
//! Two pixel containers are used throughout the crate: [`Image`] stores f32
//! samples and is what the loaders and writers produce and consume, while
//! [`Map`] stores f64 samples and is the working type of the differentiable
//! pipeline. Supported formats are 8-bit PNG (color is converted between
//! sRGB and linear on the way in and out) and PFM, which stores raw little-
//! endian floats and is used for ground-truth renders, normal maps and
//! debug dumps of the shading buffers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved f32 raster, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn to_map(&self) -> Map {
        Map {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Interleaved f64 raster used inside the pipeline, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Map {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] += v;
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Casts to f32 storage for writing.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// sRGB encode for one linear channel value.
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// sRGB decode to linear for one channel value in [0, 1].
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Loads an 8-bit PNG as linear RGB (sRGB decode applied per channel).
pub fn load_png_linear(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::new(w, h, 3);
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out.data[i * 3 + c] = srgb_to_linear(px.0[c] as f64 / 255.0) as f32;
        }
    }
    Ok(out)
}

/// Writes linear RGB as an 8-bit sRGB PNG.
pub fn save_png_srgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::validation(format!(
            "png color write needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let lin = (img.get(x, y, c) as f64).clamp(0.0, 1.0);
                px[c] = (linear_to_srgb(lin) * 255.0).round() as u8;
            }
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path)
        .map_err(|e| Error::parse(path, format!("png encode failed: {e}")))
}

/// Loads a grayscale PNG as a binary mask (0.0 or 1.0, threshold at 128).
pub fn load_png_mask(path: &Path) -> Result<Image> {
    let dynamic = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?;
    let gray = dynamic.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Image::new(w, h, 1);
    for (i, px) in gray.pixels().enumerate() {
        out.data[i] = if px.0[0] >= 128 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Writes a binary mask as a grayscale PNG (1.0 maps to 255).
pub fn save_png_mask(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::validation(format!(
            "mask write needs 1 channel, got {}",
            img.channels
        )));
    }
    let mut gray = image::GrayImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = if img.get(x, y, 0) >= 0.5 { 255 } else { 0 };
            gray.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    gray.save(path)
        .map_err(|e| Error::parse(path, format!("png encode failed: {e}")))
}

/// Reads a PFM file (`PF` color or `Pf` grayscale). Raster order in the file
/// is bottom to top; a negative scale marks little-endian floats.
pub fn load_pfm(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;

    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated pfm header"));
        }
        let tok = String::from_utf8_lossy(&raw[start..pos]).into_owned();
        pos += 1; // single whitespace after each header token
        Ok(tok)
    };

    let magic = token(&raw)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(Error::parse(path, format!("bad pfm magic {other:?}")));
        }
    };
    let width: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::parse(path, "bad pfm width"))?;
    let height: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::parse(path, "bad pfm height"))?;
    let scale: f64 = token(&raw)?
        .parse()
        .map_err(|_| Error::parse(path, "bad pfm scale"))?;
    let little_endian = scale < 0.0;

    let count = width * height * channels;
    if raw.len() < pos + count * 4 {
        return Err(Error::parse(path, "pfm data shorter than header claims"));
    }
    let mut out = Image::new(width, height, channels);
    for row in 0..height {
        let y = height - 1 - row; // file rows run bottom to top
        for x in 0..width {
            for c in 0..channels {
                let idx = pos + ((row * width + x) * channels + c) * 4;
                let bytes: [u8; 4] = raw[idx..idx + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(bytes)
                } else {
                    f32::from_be_bytes(bytes)
                };
                out.set(x, y, c, v);
            }
        }
    }
    Ok(out)
}

/// Writes a PFM file (little-endian, scale -1).
pub fn save_pfm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        3 => "PF",
        1 => "Pf",
        n => {
            return Err(Error::validation(format!(
                "pfm supports 1 or 3 channels, got {n}"
            )));
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write!(writer, "{magic}\n{} {}\n-1.0\n", img.width, img.height)
        .map_err(|e| Error::io(path, e))?;
    for row in 0..img.height {
        let y = img.height - 1 - row;
        for x in 0..img.width {
            for c in 0..img.channels {
                let v = img.get(x, y, c);
                writer
                    .write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip() {
        for i in 0..=100 {
            let c = i as f64 / 100.0;
            let back = srgb_to_linear(linear_to_srgb(c));
            assert!((back - c).abs() < 1e-12, "c={c} back={back}");
        }
        // Spot values of the encode curve.
        assert!((linear_to_srgb(0.0) - 0.0).abs() < 1e-15);
        assert!((linear_to_srgb(1.0) - 1.0).abs() < 1e-12);
        assert!((linear_to_srgb(0.002) - 12.92 * 0.002).abs() < 1e-15);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let mut img = Image::new(5, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32).sin() * 3.25 - 1.0;
        }
        save_pfm(&path, &img).unwrap();
        let back = load_pfm(&path).unwrap();
        assert_eq!(img, back);

        let mut gray = Image::new(4, 6, 1);
        for (i, v) in gray.data.iter_mut().enumerate() {
            *v = i as f32 * 0.125;
        }
        let gpath = dir.path().join("g.pfm");
        save_pfm(&gpath, &gray).unwrap();
        assert_eq!(gray, load_pfm(&gpath).unwrap());
    }

    #[test]
    fn png_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask = Image::new(8, 4, 1);
        for (i, v) in mask.data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else { 0.0 };
        }
        save_png_mask(&path, &mask).unwrap();
        assert_eq!(mask, load_png_mask(&path).unwrap());
    }

    #[test]
    fn png_color_preserves_8bit_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut img = Image::new(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = srgb_to_linear((i as f64 * 17.0 % 256.0) / 255.0) as f32;
        }
        save_png_srgb(&path, &img).unwrap();
        let back = load_png_linear(&path).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 3e-3, "{a} vs {b}");
        }
    }
}
