//! Small RGB rasters and netpbm (PPM/PGM) I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl SceneImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Flattened pixels of the `patch_px`-sized patch at grid cell `(row, col)`:
    /// rows of the patch top to bottom, RGB interleaved.
    pub fn patch(&self, patch_px: usize, row: usize, col: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(patch_px * patch_px * 3);
        for dy in 0..patch_px {
            let y = row * patch_px + dy;
            let start = (y * self.width + col * patch_px) * 3;
            out.extend_from_slice(&self.pixels[start..start + patch_px * 3]);
        }
        out
    }

    pub fn set_patch(&mut self, patch_px: usize, row: usize, col: usize, values: &[f64]) {
        for dy in 0..patch_px {
            let y = row * patch_px + dy;
            let start = (y * self.width + col * patch_px) * 3;
            let src = &values[dy * patch_px * 3..(dy + 1) * patch_px * 3];
            self.pixels[start..start + patch_px * 3].copy_from_slice(src);
        }
    }

    /// Binary PPM (P6, maxval 255). Channels are clamped and rounded.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let header = read_header(&mut reader, "P6")?;
        let (width, height, maxval) = header;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let mut raw = vec![0u8; width * height * 3];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        let pixels = raw.iter().map(|&b| b as f64 / maxval as f64).collect();
        Self::from_pixels(width, height, pixels)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

fn read_header(reader: &mut impl BufRead, magic: &str) -> Result<(usize, usize, usize)> {
    let mut tokens: Vec<String> = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens.len() != 4 || tokens[0] != magic {
        return Err(Error::Format(format!("expected a {magic} header")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field `{s}`")));
    Ok((num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?))
}

/// Binary PGM (P5) from 8-bit gray values.
pub fn gray_to_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_8bit_values() {
        let mut img = SceneImage::new(3, 2);
        img.set(0, 0, [1.0, 0.0, 128.0 / 255.0]);
        img.set(2, 1, [17.0 / 255.0, 1.0, 0.0]);
        let back = SceneImage::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 255]);
        let img = SceneImage::from_ppm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 1.0]);
        assert!(SceneImage::from_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(SceneImage::from_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn patch_get_set() {
        let mut img = SceneImage::new(4, 4);
        let vals: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        img.set_patch(2, 1, 0, &vals);
        assert_eq!(img.patch(2, 1, 0), vals);
        assert!(img.patch(2, 0, 0).iter().all(|&v| v == 0.0));
    }
}
