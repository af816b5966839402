//! RGB images in linear radiance, with PFM and PNG output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::{Add, AddAssign, Mul};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Rgb(pub [f64; 3]);

impl Rgb {
    pub const ZERO: Rgb = Rgb([0.0; 3]);

    pub fn splat(v: f64) -> Self {
        Rgb([v; 3])
    }

    /// Rec. 709 luminance.
    pub fn luminance(&self) -> f64 {
        0.2126 * self.0[0] + 0.7152 * self.0[1] + 0.0722 * self.0[2]
    }

    pub fn max_channel(&self) -> f64 {
        self.0[0].max(self.0[1]).max(self.0[2])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn hadamard(self, other: Rgb) -> Rgb {
        Rgb([
            self.0[0] * other.0[0],
            self.0[1] * other.0[1],
            self.0[2] * other.0[2],
        ])
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        Rgb([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        for (a, b) in self.0.iter_mut().zip(o.0) {
            *a += b;
        }
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        Rgb([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

/// Row-major image; row 0 is the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![Rgb::ZERO; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn get(&self, col: usize, row: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(Rgb::is_finite)
    }

    /// Mean over pixels and channels.
    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|p| p.0.iter().sum::<f64>()).sum::<f64>()
            / (3 * self.pixels.len()) as f64
    }

    /// Encodes as a little-endian PFM: "PF" header, scale -1, rows bottom to top.
    pub fn to_pfm_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 12);
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                for c in self.get(col, row).0 {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pfm_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a PFM written by [`Image::to_pfm_bytes`] (little-endian, colour).
    pub fn from_pfm_bytes(bytes: &[u8]) -> Result<Image> {
        let bad = |m: &str| Error::InvalidState(format!("malformed PFM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        pos += 1;
        if fields[0] != "PF" {
            return Err(bad("expected PF"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("scale"))?;
        if scale >= 0.0 {
            return Err(bad("big-endian data not supported"));
        }
        let data = &bytes[pos..];
        if data.len() != width * height * 12 {
            return Err(bad("payload size"));
        }
        let mut img = Image::new(width, height);
        for (i, chunk) in data.chunks_exact(12).enumerate() {
            let row = height - 1 - i / width;
            let col = i % width;
            let mut px = [0.0; 3];
            for (c, b) in px.iter_mut().zip(chunk.chunks_exact(4)) {
                *c = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            img.pixels[row * width + col] = Rgb(px);
        }
        Ok(img)
    }

    /// 8-bit sRGB-style encoding: exposure scale, clamp, gamma 2.2.
    pub fn to_ldr(&self, exposure: f64) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.0)
            .map(|c| {
                let v = (c * exposure).clamp(0.0, 1.0).powf(1.0 / 2.2);
                (v * 255.0 + 0.5) as u8
            })
            .collect()
    }

    pub fn write_png(&self, path: &Path, exposure: f64) -> Result<()> {
        write_png_bytes(path, self.width, self.height, png::ColorType::Rgb, &self.to_ldr(exposure))
    }
}

pub(crate) fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    w.flush().map_err(|e| Error::io(path, e))
}
