//! Channel-first float images, resampling, and the netpbm formats used on disk.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::kernels;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

/// `[channels, height, width]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    /// Copies the in-bounds window `b`. The caller clips `b` first.
    pub fn crop(&self, b: &BBox) -> Result<Image> {
        if !b.fits(self.height, self.width) {
            return Err(Error::invalid(format!(
                "crop {b:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let (w, h) = (b.w as usize, b.h as usize);
        let mut data = Vec::with_capacity(self.channels * w * h);
        for c in 0..self.channels {
            for r in 0..h {
                let start = (c * self.height + b.y as usize + r) * self.width + b.x as usize;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Half-pixel bilinear resize to any size.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let data = kernels::bilinear_forward(&self.data, self.channels, self.height, self.width, height, width);
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("image values are finite")
    }

    pub fn read(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_netpbm(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::format(what, format!("{}: {detail}", path.display())),
            other => other,
        })
    }

    /// Writes 8-bit PPM (3 channels) or PGM (1 channel).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        encode_netpbm(self, &mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_netpbm<W: Write>(img: &Image, mut w: W) -> std::io::Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("cannot write {c}-channel image as netpbm"),
            ))
        }
    };
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let plane = img.height * img.width;
    let mut body = Vec::with_capacity(plane * img.channels);
    for p in 0..plane {
        for c in 0..img.channels {
            body.push(quantize(img.data[c * plane + p]));
        }
    }
    w.write_all(&body)
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let bad = |d: &str| Error::format("netpbm", d.to_string());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("netpbm", format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let plane = width * height;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != plane * channels {
        return Err(Error::format(
            "netpbm",
            format!("expected {} data bytes, got {}", plane * channels, body.len()),
        ));
    }
    let mut data = vec![0.0; plane * channels];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = body[p * channels + c] as f64 / 255.0;
        }
    }
    Image::new(channels, height, width, data)
}

/// Nearest-neighbour resize (pixel-center sampling), which keeps masks binary.
pub fn resize_mask_nearest(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let src =
        |o: usize, out: usize, len: usize| (((o as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1);
    let mut out = BinaryMask::new(height, width);
    for r in 0..height {
        let sr = src(r, height, m.height());
        for c in 0..width {
            out.set(r, c, m.get(sr, src(c, width, m.width())));
        }
    }
    out
}

pub fn crop_mask(m: &BinaryMask, b: &BBox) -> Result<BinaryMask> {
    if !b.fits(m.height(), m.width()) {
        return Err(Error::invalid(format!(
            "crop {b:?} outside {}x{} mask",
            m.height(),
            m.width()
        )));
    }
    let mut out = BinaryMask::new(b.h as usize, b.w as usize);
    for r in 0..b.h as usize {
        for c in 0..b.w as usize {
            out.set(r, c, m.get(b.y as usize + r, b.x as usize + c));
        }
    }
    Ok(out)
}

/// PGM (P5) with foreground 255 and background 0.
pub fn write_mask<W: Write>(m: &BinaryMask, mut w: W) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", m.width(), m.height())?;
    let body: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&body)
}

/// Reads a P5 mask; any nonzero byte is foreground.
pub fn read_mask<R: Read>(mut r: R) -> Result<BinaryMask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("pgm", e.to_string()))?;
    let img = decode_netpbm(&bytes)?;
    if img.channels != 1 {
        return Err(Error::format("pgm", "mask must be single-channel P5"));
    }
    BinaryMask::from_bits(img.height, img.width, img.data.iter().map(|&v| v > 0.0).collect())
}

pub fn save_mask(m: &BinaryMask, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_mask(m, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_mask(bytes.as_slice()).map_err(|e| match e {
        Error::Format { what, detail } => Error::format(what, format!("{}: {detail}", path.display())),
        other => other,
    })
}
