//! Image containers, pinhole intrinsics, and lossless raster I/O
//! (PNG for color, PGM for masks and 16-bit depth, PPM for debug dumps).
//!
//! Convention: camera frame is z forward, x right, y down;
//! u = fx*x/z + cx indexes columns, v = fy*y/z + cy indexes rows, and pixel
//! (x, y) samples the ray through (u, v) = (x, y).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("intrinsics", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 || self.width > 4096 || self.height > 4096 {
            return Err(Error::config("intrinsics", "image size must be in 1..=4096"));
        }
        Ok(())
    }

    /// Project a camera-frame point; None when at or behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }

    /// Unit ray through pixel (u, v).
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 3] {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let n = (d[0] * d[0] + d[1] * d[1] + 1.0).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

/// RGB image, channel values nominally in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Quantize to 8-bit RGB (round half away from zero after clamping).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::data("rgb8 buffer size mismatch"));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| {
                [
                    c[0] as f64 / 255.0,
                    c[1] as f64 / 255.0,
                    c[2] as f64 / 255.0,
                ]
            })
            .collect();
        Ok(ColorImage {
            width,
            height,
            data,
        })
    }

    /// Quantize to 8-bit and re-expand: the fixed point of PNG round trips.
    pub fn quantized(&self) -> Self {
        ColorImage::from_rgb8(self.width, self.height, &self.to_rgb8()).unwrap()
    }
}

/// Single-channel f64 image (depth in meters, weights, ...), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

// ---------------------------------------------------------------------------
// PNG (RGB, 8-bit)
// ---------------------------------------------------------------------------

pub fn encode_png_rgb8(img: &ColorImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::data(format!("png header: {e}")))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| Error::data(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png_rgb8(bytes: &[u8]) -> Result<ColorImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(format!("png read_info: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(format!("png frame: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(Error::data("expected 8-bit RGB png"));
    }
    ColorImage::from_rgb8(
        info.width as usize,
        info.height as usize,
        &buf[..info.buffer_size()],
    )
}

// ---------------------------------------------------------------------------
// PGM / PPM (Netpbm binary)
// ---------------------------------------------------------------------------

/// P5, 8-bit.
pub fn encode_pgm8(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// P5, 16-bit big-endian samples (Netpbm byte order).
pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// P6, 8-bit RGB.
pub fn encode_ppm(img: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_rgb8());
    out
}

/// Parse a Netpbm binary header (P5/P6): returns (width, height, maxval,
/// payload offset). Comments and arbitrary whitespace are accepted.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::data("netpbm: wrong magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("netpbm: truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data("netpbm: bad header field"))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data("netpbm: missing header terminator"));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

pub fn decode_pgm8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, maxval, off) = parse_netpbm_header(bytes, b"P5")?;
    if maxval != 255 {
        return Err(Error::data("pgm8: maxval must be 255"));
    }
    let need = w * h;
    if bytes.len() < off + need {
        return Err(Error::data("pgm8: truncated payload"));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, maxval, off) = parse_netpbm_header(bytes, b"P5")?;
    if maxval != 65535 {
        return Err(Error::data("pgm16: maxval must be 65535"));
    }
    let need = w * h * 2;
    if bytes.len() < off + need {
        return Err(Error::data("pgm16: truncated payload"));
    }
    let samples = bytes[off..off + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, samples))
}

/// Depth image (meters) to 16-bit PGM at 256 counts per meter, saturating.
pub fn depth_to_pgm16(depth: &ScalarImage) -> Vec<u8> {
    let samples: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| (d * 256.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    encode_pgm16(depth.width, depth.height, &samples)
}

pub fn pgm16_to_depth(bytes: &[u8]) -> Result<ScalarImage> {
    let (w, h, samples) = decode_pgm16(bytes)?;
    Ok(ScalarImage {
        width: w,
        height: h,
        data: samples.into_iter().map(|s| s as f64 / 256.0).collect(),
    })
}
