//! 8-bit grayscale rasters and binary PGM/PPM I/O.

use std::fs;
use std::path::Path;

use super::DataError;

/// A row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidImage(format!(
                "extents must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(DataError::InvalidImage(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear interpolation at continuous pixel-center coordinates,
    /// clamping to the border.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx, yy| f64::from(self.get(xx, yy));
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Copies out the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Encodes as binary PGM (P5, maxval 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decodes a binary PGM (P5) or PPM (P6) with maxval 255. Color input is
    /// collapsed to gray with `round(0.299 R + 0.587 G + 0.114 B)`.
    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut header = HeaderReader { bytes, pos: 0 };
        let magic = header.token()?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(DataError::UnsupportedFormat(format!(
                    "magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = header.number()?;
        let height = header.number()?;
        let maxval = header.number()?;
        if maxval != 255 {
            return Err(DataError::UnsupportedFormat(format!("maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(DataError::UnsupportedFormat(format!(
                "zero extent {width}x{height}"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = header.pos + 1;
        let expected = width * height * channels;
        let payload = bytes.get(start..).unwrap_or(&[]);
        if payload.len() < expected {
            return Err(DataError::TruncatedFile {
                expected,
                found: payload.len(),
            });
        }
        let payload = &payload[..expected];
        let pixels = if channels == 1 {
            payload.to_vec()
        } else {
            payload.chunks_exact(3).map(|rgb| luma(rgb[0], rgb[1], rgb[2])).collect()
        };
        Image::new(width, height, pixels)
    }
}

/// ITU-R BT.601 luma, rounded to the nearest integer.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], DataError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(DataError::TruncatedFile {
                expected: start + 1,
                found: self.bytes.len(),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, DataError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                DataError::UnsupportedFormat(format!(
                    "bad header field {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    Image::from_pnm_bytes(&bytes)
}

pub fn write_pgm(image: &Image, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, image.to_pgm_bytes()).map_err(|e| DataError::io(path, e))
}
