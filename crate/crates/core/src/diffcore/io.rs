//! Tensor file formats: PFM for 2-D float maps and a named binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic  b"BXTC"     4 bytes
//! version u32        currently 1
//! count   u32        number of entries
//! entry*:
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims u64 * ndim
//!   data f64 * prod(dims)
//! ```

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BXTC";
const VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("tensor container", e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let bad = |d: String| Error::format("tensor container", d);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| bad(e.to_string()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(|e| bad(format!("{name}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes a `[H,W]` (or `[1,H,W]`) tensor as a little-endian greyscale PFM.
/// PFM stores rows bottom-to-top in `f32`.
pub fn write_pfm<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let (h, wd) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::shape("write_pfm", format!("expected a 2-D map, got {s:?}"))),
    };
    let io = |e| Error::format("pfm", format!("{e}"));
    write!(w, "Pf\n{wd} {h}\n-1.0\n").map_err(io)?;
    for row in (0..h).rev() {
        for v in &t.data()[row * wd..(row + 1) * wd] {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_pfm<R: Read>(mut r: R) -> Result<Tensor> {
    let bad = |d: String| Error::format("pfm", d);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
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
            return Err(bad("truncated header".into()));
        }
        let s = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1;
        Ok(s)
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(bad(format!("expected greyscale 'Pf', got {magic:?}")));
    }
    let w: usize = token()?.parse().map_err(|_| bad("width".into()))?;
    let h: usize = token()?.parse().map_err(|_| bad("height".into()))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("scale".into()))?;
    let little = scale < 0.0;
    let body = &bytes[pos..];
    if body.len() != w * h * 4 {
        return Err(bad(format!("expected {} data bytes, got {}", w * h * 4, body.len())));
    }
    let mut data = vec![0.0; w * h];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = v as f64;
    }
    Tensor::new(vec![h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let entries = vec![
            (
                "a.weight".to_string(),
                Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap(),
            ),
            ("b".to_string(), Tensor::scalar(0.125)),
        ];
        let mut buf = Vec::new();
        write_container(&mut buf, &entries).unwrap();
        assert_eq!(&buf[..4], b"BXTC");
        assert_eq!(read_container(buf.as_slice()).unwrap(), entries);
        assert!(read_container(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn pfm_round_trip_and_row_order() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 2.0, 3.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm(&mut buf, &t).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&buf[..header.len()], header);
        // bottom row first
        assert_eq!(
            f32::from_le_bytes(buf[header.len()..header.len() + 4].try_into().unwrap()),
            2.0
        );
        assert_eq!(read_pfm(buf.as_slice()).unwrap(), t);
    }
}
