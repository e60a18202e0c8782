//! Small RGB images with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

/// Square `H×W×3` image, row-major `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    resolution: usize,
    pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(resolution: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != resolution * resolution * 3 {
            return Err(Error::ShapeMismatch {
                context: "ToyImage::new",
                detail: format!("{} values for resolution {resolution}", pixels.len()),
            });
        }
        if pixels.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn filled(resolution: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(resolution * resolution * 3);
        for _ in 0..resolution * resolution {
            pixels.extend_from_slice(&rgb);
        }
        Self { resolution, pixels }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn num_values(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn index(resolution: usize, y: usize, x: usize, c: usize) -> usize {
        (y * resolution + x) * 3 + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[Self::index(self.resolution, y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = Self::index(self.resolution, y, x, c);
        self.pixels[i] = v;
    }

    /// 8-bit quantization: `round(255·v)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(resolution: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(resolution, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// The image as it reads back after an 8-bit PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.resolution, &self.to_bytes()).expect("quantized image is valid")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.resolution as u32, self.resolution as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Invalid(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.to_bytes())
                .map_err(|e| Error::Invalid(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Invalid(format!("png decode: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Invalid("png too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Invalid(format!("png decode: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Invalid("expected 8-bit RGB png".into()));
        }
        if info.width != info.height {
            return Err(Error::Invalid("expected a square image".into()));
        }
        Self::from_bytes(info.width as usize, &buf[..info.buffer_size()])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_after_quantization() {
        let mut img = ToyImage::filled(4, [0.2, 0.5, 0.9]);
        img.set(1, 2, 0, 0.123);
        let q = img.quantized();
        let back = ToyImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ToyImage::new(1, vec![0.0, 1.2, 0.5]).is_err());
        assert!(ToyImage::new(2, vec![0.0; 3]).is_err());
    }
}
