//! On-disk formats: the `EASTTNSR` tensor container, the quad text file, and
//! binary PGM / PPM images.

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{Detection, GeometryError, Point, Quad};

pub const TENSOR_MAGIC: &[u8; 8] = b"EASTTNSR";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    BadVersion(u32),
    #[error("tensor file truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad image: {0}")]
    BadImage(String),
}

impl FormatError {
    /// Whether the error is a malformed-input problem (as opposed to I/O).
    pub fn is_parse(&self) -> bool {
        matches!(self, FormatError::Parse { .. })
    }
}

/// A tensor as stored on disk: dimensions plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(FormatError::Truncated {
                    expected,
                    actual: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        need(8)?;
        if &bytes[..8] != TENSOR_MAGIC {
            return Err(FormatError::BadMagic);
        }
        need(16)?;
        let version = word(8);
        if version != TENSOR_VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let rank = word(12) as usize;
        let header = 16 + 4 * rank;
        need(header)?;
        let dims: Vec<usize> = (0..rank).map(|i| word(16 + 4 * i) as usize).collect();
        let count: usize = dims.iter().product();
        let expected = header + 4 * count;
        need(expected)?;
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// One line of a quad file: eight clockwise coordinates and an optional score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadRecord {
    pub coords: [f64; 8],
    pub score: Option<f64>,
}

impl QuadRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            coords: d.quad.coords(),
            score: Some(d.score),
        }
    }

    pub fn from_quad(q: &Quad) -> Self {
        Self {
            coords: q.coords(),
            score: None,
        }
    }

    pub fn to_quad(&self) -> Result<Quad, GeometryError> {
        Quad::from_coords(self.coords)
    }

    /// Records without a score are treated as certain.
    pub fn to_detection(&self) -> Result<Detection, GeometryError> {
        Ok(Detection::new(self.to_quad()?, self.score.unwrap_or(1.0)))
    }

    /// Coordinates with three decimals, score with six.
    pub fn format(&self) -> String {
        let mut s = self
            .coords
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(score) = self.score {
            s.push_str(&format!(",{score:.6}"));
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 && fields.len() != 9 {
            return Err(format!("expected 8 or 9 comma-separated fields, found {}", fields.len()));
        }
        let mut values = [0.0; 9];
        for (i, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| format!("field {} ({f:?}) is not a number", i + 1))?;
            if !v.is_finite() {
                return Err(format!("field {} is not finite", i + 1));
            }
            values[i] = v;
        }
        Ok(Self {
            coords: std::array::from_fn(|i| values[i]),
            score: (fields.len() == 9).then_some(values[8]),
        })
    }
}

/// Parses a quad file; blank lines are ignored and line numbers are 1-based.
pub fn parse_quad_file(text: &str) -> Result<Vec<QuadRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(QuadRecord::parse(line).map_err(|message| FormatError::Parse { line: i + 1, message })?);
    }
    Ok(out)
}

pub fn format_quad_file(records: &[QuadRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.format());
        s.push('\n');
    }
    s
}

pub fn read_quad_file(path: impl AsRef<Path>) -> Result<Vec<QuadRecord>, FormatError> {
    parse_quad_file(&std::fs::read_to_string(path)?)
}

pub fn write_quad_file(path: impl AsRef<Path>, records: &[QuadRecord]) -> Result<(), FormatError> {
    std::fs::write(path, format_quad_file(records))?;
    Ok(())
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit RGB image, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Quantizes values in `[0, 1]` (clamped) to bytes.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        let pixels = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self { width, height, pixels }
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, FormatError> {
        let (magic, width, height, body) = parse_netpbm_header(bytes)?;
        if magic != "P5" {
            return Err(FormatError::BadImage(format!("expected P5, found {magic}")));
        }
        if body.len() < width * height {
            return Err(FormatError::BadImage("pixel data truncated".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: body[..width * height].to_vec(),
        })
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        }
    }
}

impl RgbImage {
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Bresenham line, clipped to the image.
    pub fn line(&mut self, a: Point, b: Point, color: [u8; 3]) {
        let (mut x0, mut y0) = (a.x.round() as i64, a.y.round() as i64);
        let (x1, y1) = (b.x.round() as i64, b.y.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn quad(&mut self, q: &Quad, color: [u8; 3]) {
        let p = q.points();
        for i in 0..4 {
            self.line(p[i], p[(i + 1) % 4], color);
        }
    }
}

/// Blue for low scores through red for high ones.
pub fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

/// Draws detections over a grayscale image, colored by score.
pub fn render_detections(image: &GrayImage, dets: &[Detection]) -> RgbImage {
    let mut out = image.to_rgb();
    for d in dets {
        out.quad(&d.quad, score_color(d.score));
    }
    out
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<(String, usize, usize, &[u8]), FormatError> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(FormatError::BadImage("header truncated".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the pixels.
    let body = bytes.get(i + 1..).unwrap_or(&[]);
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| FormatError::BadImage(format!("bad header field {s:?}")))
    };
    if num(&fields[3])? != 255 {
        return Err(FormatError::BadImage("only 8-bit images are supported".into()));
    }
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, body))
}
