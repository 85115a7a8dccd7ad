//! Pre-exported segmentation rasters in the `.smr` format: an ASCII header
//! line `SMR1 <width> <height> <channels>` followed by row-major
//! little-endian `f32` values, channels innermost.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{GtpError, Result};

pub const SCORE_CHANNELS: usize = 150;
pub const FEATURE_CHANNELS: usize = 512;

/// A `height × width × channels` grid of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(GtpError::Data(format!(
                "raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "SMR1 {} {} {}", self.width, self.height, self.channels)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R, origin: &Path) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let parse_err = |msg: String| GtpError::Parse {
            path: origin.to_path_buf(),
            line: 1,
            msg,
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "SMR1" {
            return Err(parse_err(format!("bad header {:?}", header.trim_end())));
        }
        let dims: std::result::Result<Vec<usize>, _> = fields[1..].iter().map(|f| f.parse()).collect();
        let dims = dims.map_err(|e| parse_err(e.to_string()))?;
        let (width, height, channels) = (dims[0], dims[1], dims[2]);
        let count = width * height * channels;
        let mut bytes = vec![0u8; count * 4];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| parse_err(format!("payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Raster::new(width, height, channels, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Segmentation scores (150 categories) and penultimate-layer features (512)
/// over the same background image.
#[derive(Clone, Debug)]
pub struct SemanticRaster {
    pub scores: Raster,
    pub features: Raster,
}

impl SemanticRaster {
    pub fn new(scores: Raster, features: Raster) -> Result<Self> {
        if scores.channels != SCORE_CHANNELS {
            return Err(GtpError::Data(format!(
                "score raster has {} channels, expected {SCORE_CHANNELS}",
                scores.channels
            )));
        }
        if features.channels != FEATURE_CHANNELS {
            return Err(GtpError::Data(format!(
                "feature raster has {} channels, expected {FEATURE_CHANNELS}",
                features.channels
            )));
        }
        if (scores.width, scores.height) != (features.width, features.height) {
            return Err(GtpError::Data(format!(
                "score raster is {}x{} but feature raster is {}x{}",
                scores.width, scores.height, features.width, features.height
            )));
        }
        Ok(SemanticRaster { scores, features })
    }

    pub fn width(&self) -> usize {
        self.scores.width
    }

    pub fn height(&self) -> usize {
        self.scores.height
    }

    pub fn load(scores: &Path, features: &Path) -> Result<Self> {
        Self::new(Raster::load(scores)?, Raster::load(features)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smr_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32 * 0.25 - 1.0).collect();
        let r = Raster::new(2, 3, 4, data).unwrap();
        let mut bytes = Vec::new();
        r.write(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"SMR1 2 3 4\n"));
        assert_eq!(bytes.len(), 11 + 24 * 4);
        let back = Raster::read(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn bad_header_and_short_payload() {
        assert!(Raster::read(&b"SMR2 1 1 1\n\0\0\0\0"[..], Path::new("x")).is_err());
        assert!(Raster::read(&b"SMR1 2 2 1\n\0\0\0\0"[..], Path::new("x")).is_err());
    }

    #[test]
    fn channel_depths_checked() {
        let s = Raster::zeros(2, 2, SCORE_CHANNELS);
        let f = Raster::zeros(2, 2, FEATURE_CHANNELS);
        assert!(SemanticRaster::new(s.clone(), f.clone()).is_ok());
        assert!(SemanticRaster::new(Raster::zeros(2, 2, 149), f.clone()).is_err());
        assert!(SemanticRaster::new(s.clone(), Raster::zeros(2, 2, 256)).is_err());
        assert!(SemanticRaster::new(s, Raster::zeros(3, 2, FEATURE_CHANNELS)).is_err());
    }
}
