//! Image and buffer IO: binary PPM (P6, 8-bit) for color images and raw
//! little-endian f32 planes with a JSON sidecar for float buffers such as
//! canonical-correspondence maps.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolactError};

/// Row-major H x W x 3 float image with channel values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> ImageBuffer {
        ImageBuffer {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            for k in 0..3 {
                let d = a[k] - b[k];
                acc += d * d;
            }
        }
        acc / (3.0 * self.data.len() as f64)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit binary PPM (P6). Values are clamped to [0, 1].
pub fn write_ppm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    let mut bytes = Vec::with_capacity(image.data.len() * 3);
    for px in &image.data {
        bytes.extend_from_slice(&[quantize(px[0]), quantize(px[1]), quantize(px[2])]);
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Read an 8-bit binary PPM (P6), mapping samples back to [0, 1].
pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let bad = |msg: &str| VolactError::Config(format!("{}: {}", path.display(), msg));
    let mut pos = 0;
    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token(&raw)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + need]
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]
        })
        .collect();
    Ok(ImageBuffer {
        width,
        height,
        data,
    })
}

/// Shape descriptor stored next to a raw f32 plane file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSidecar {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Write interleaved little-endian f32 planes plus a `<path>.json` sidecar.
pub fn write_planes(path: &Path, sidecar: &PlaneSidecar, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), sidecar.height * sidecar.width * sidecar.channels);
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let meta = path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    fs::write(&meta, serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

/// Read raw f32 planes, validating against the JSON sidecar.
pub fn read_planes(path: &Path) -> Result<(PlaneSidecar, Vec<f32>)> {
    let meta = path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let sidecar: PlaneSidecar = serde_json::from_slice(&fs::read(&meta)?)?;
    let raw = fs::read(path)?;
    let expect = sidecar.height * sidecar.width * sidecar.channels * 4;
    if raw.len() != expect {
        return Err(VolactError::Config(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((sidecar, data))
}
