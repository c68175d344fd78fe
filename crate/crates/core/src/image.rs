//! Multi-channel float image buffers and their PNG / PFM codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `width × height × channels` float buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dim("image buffer", width * height * channels, data.len()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_size(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_shape(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub(crate) fn check_size(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Channel `c` as a single-channel plane.
    pub fn channel(&self, c: usize) -> ImagePlane {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> ImagePlane {
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Codec(format!("cannot encode {c}-channel image as PNG"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Codec(e.to_string()))?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Codec(e.to_string()))?;
        }
        Ok(out)
    }

    /// Writes an 8-bit PNG; values are clamped to [0, 1].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads an 8-bit gray/RGB PNG into [0, 1].
    pub fn read_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let file = BufReader::new(File::open(path)?);
        let mut decoder = png::Decoder::new(file);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Codec(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Codec("png too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Codec(e.to_string()))?;
        let (channels, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Indexed => return Err(Error::Codec("unexpanded palette".into())),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * keep);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
        ImagePlane::from_vec(w, h, keep, data)
    }

    /// Writes a little-endian PFM (`Pf` gray / `PF` color), rows bottom-to-top.
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::Codec(format!("cannot encode {c}-channel image as PFM"))),
        };
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for &v in &self.data[y * row..(y + 1) * row] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImagePlane> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse("pfm header", "unexpected end of header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "Pf" => 1,
            "PF" => 3,
            t => return Err(Error::parse("pfm header", format!("bad magic {t:?}"))),
        };
        let parse_usize = |s: String| {
            s.parse::<usize>()
                .map_err(|_| Error::parse("pfm header", format!("bad size {s:?}")))
        };
        let width = parse_usize(token()?)?;
        let height = parse_usize(token()?)?;
        let scale_tok = token()?;
        let scale: f64 = scale_tok
            .parse()
            .map_err(|_| Error::parse("pfm header", format!("bad scale {scale_tok:?}")))?;
        // exactly one whitespace byte separates the header from the payload
        pos += 1;
        let row = width * channels;
        let need = row * height * 4;
        if bytes.len() < pos + need {
            return Err(Error::parse("pfm payload", "truncated"));
        }
        let payload = &bytes[pos..pos + need];
        let mut data = vec![0.0; row * height];
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v as f64;
        }
        ImagePlane::from_vec(width, height, channels, data)
    }
}

#[inline]
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f32 * 0.37) as f64).collect();
        let img = ImagePlane::from_vec(2, 3, 3, data).unwrap();
        img.write_pfm(&path).unwrap();
        assert_eq!(ImagePlane::read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImagePlane::from_vec(2, 1, 1, vec![0.0, 1.5]).unwrap();
        img.write_png(&path).unwrap();
        let back = ImagePlane::read_png(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImagePlane::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
