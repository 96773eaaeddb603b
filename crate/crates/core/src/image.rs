//! RGB images and their PPM/PNG encodings.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{CatError, Result};

/// Linear RGB image with channel values nominally in `[0, 1]`, row-major,
/// top-left origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(CatError::Invalid(format!("{}x{} image needs {} values, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn quantize(&self) -> Image8 {
        let data = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image8 { width: self.width, height: self.height, data }
    }
}

/// 8-bit RGB image, the on-disk representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn to_float(&self) -> Image {
        let data = self.data.iter().map(|v| f64::from(*v) / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| CatError::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CatError::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|m| CatError::format(path, m))
    }

    /// Binary P6 with maxval 255; `#` comments are allowed in the header.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("expected P6 magic, found `{}`", fields[0]));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
        let (width, height, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < need {
            return Err(format!("truncated raster: {} of {need} bytes", raster.len()));
        }
        if raster.len() > need {
            return Err(format!("{} trailing bytes after raster", raster.len() - need));
        }
        Ok(Self { width, height, data: raster.to_vec() })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| CatError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CatError::format(path, e.to_string()))?;
        writer.write_image_data(&self.data).map_err(|e| CatError::format(path, e.to_string()))
    }
}
