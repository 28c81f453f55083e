//! RGB image grid with binary PPM (P6) reading and writing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An H×W×3 image with values in [0,1], stored channel-major (R plane, G
/// plane, B plane) so it drops straight into [b,c,h,w] convolution inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize) -> Self {
        ImageGrid { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image data length mismatch");
        ImageGrid { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean of one channel over a rectangular window (y0..y1, x0..x1).
    pub fn channel_mean(&self, c: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> f32 {
        let mut sum = 0.0;
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += self.get(c, y, x);
                n += 1;
            }
        }
        sum / n.max(1) as f32
    }

    pub fn mse(&self, other: &ImageGrid) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image size mismatch");
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
        acc / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB against a reference, peak value 1.0.
    pub fn psnr(&self, reference: &ImageGrid) -> f64 {
        let mse = self.mse(reference);
        if mse == 0.0 {
            return f64::INFINITY;
        }
        10.0 * (1.0 / mse).log10()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut row = Vec::with_capacity(3 * self.width);
        for y in 0..self.height {
            row.clear();
            for x in 0..self.width {
                for c in 0..3 {
                    row.push(quantize(self.get(c, y, x)));
                }
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String> {
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("unexpected end of PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token(&bytes)? != "P6" {
            return Err(Error::Parse("not a P6 pixmap".into()));
        }
        let width: usize =
            token(&bytes)?.parse().map_err(|_| Error::Parse("bad PPM width".into()))?;
        let height: usize =
            token(&bytes)?.parse().map_err(|_| Error::Parse("bad PPM height".into()))?;
        let maxval: usize =
            token(&bytes)?.parse().map_err(|_| Error::Parse("bad PPM maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Parse(format!("unsupported PPM maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = 3 * width * height;
        if bytes.len() < pos + need {
            return Err(Error::Parse("PPM payload truncated".into()));
        }
        let mut img = ImageGrid::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = bytes[pos + (y * width + x) * 3 + c];
                    img.set(c, y, x, v as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_u8_grid() {
        let mut img = ImageGrid::new(4, 6);
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..3 {
                    img.set(c, y, x, ((y * 6 + x + c * 7) % 256) as f32 / 255.0);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = ImageGrid::read_ppm(&path).unwrap();
        assert_eq!(img.height, back.height);
        assert_eq!(img.width, back.width);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = ImageGrid::new(8, 8);
        assert!(img.psnr(&img).is_infinite());
    }
}
