//! Binary PGM (P5) and PPM (P6) rasters, 8 or 16 bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw samples as stored in the file, row-major, interleaved for PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn ingest_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset: format!("byte {offset}"),
        message: message.into(),
    }
}

impl Raster {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(ingest_err(path, 0, "not a binary PGM/PPM (P5/P6) file")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(ingest_err(path, pos, "expected a decimal header field"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ingest_err(path, start, "header field out of range"))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(ingest_err(path, pos, format!("bad header {width}x{height} maxval {maxval}")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(ingest_err(path, pos, "missing whitespace after header"));
        }
        pos += 1;
        let n = width * height * channels;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let body = bytes
            .get(pos..pos + need)
            .ok_or_else(|| ingest_err(path, pos, format!("expected {need} bytes of pixel data")))?;
        let samples: Vec<u16> = if wide {
            body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            body.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
            return Err(ingest_err(path, pos + i, "sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ingest_err(path, 0, e.to_string()))?;
        Self::parse(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Channels-first tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let scale = f64::from(self.maxval);
        let mut data = vec![0.0; c * h * w];
        for (i, &s) in self.samples.iter().enumerate() {
            let (px, ch) = (i / c, i % c);
            data[ch * h * w + px] = f64::from(s) / scale;
        }
        Tensor::new(&[c, h, w], data).expect("raster extents")
    }

    /// Quantizes a `[C,H,W]` tensor (values clamped to `[0,1]`).
    pub fn from_tensor(t: &Tensor, maxval: u16) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if !matches!(c, 1 | 3) {
            return Err(Error::Shape(format!("raster needs 1 or 3 channels, got {c}")));
        }
        let scale = f64::from(maxval);
        let mut samples = vec![0u16; c * h * w];
        for ch in 0..c {
            for px in 0..h * w {
                let v = t.data()[ch * h * w + px].clamp(0.0, 1.0);
                samples[px * c + ch] = (v * scale).round() as u16;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            maxval,
            samples,
        })
    }
}
