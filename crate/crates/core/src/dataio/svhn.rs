//! SVHN cropped-digit format (`train_32x32.mat`, `test_32x32.mat`): MATLAB
//! level-5 MAT files holding `X` (32×32×3×N uint8, column-major) and `y`
//! (N×1, digit 0 stored as 10). Compressed (zlib) elements are supported.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::ZlibDecoder;

use super::{Dataset, Origin, Sample, Split};
use crate::error::{Error, Result};

const MI_INT8: u32 = 1;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

#[derive(Debug)]
struct MatArray {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("unexpected end of data at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    /// Reads one tagged element, honouring the small-element format and
    /// 8-byte padding. Returns (type, payload).
    fn element(&mut self) -> std::result::Result<(u32, &'a [u8]), String> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            let n = (first >> 16) as usize;
            let data = self.take(4)?;
            return Ok((first & 0xffff, &data[..n.min(4)]));
        }
        let n = self.u32()? as usize;
        let data = self.take(n)?;
        // compressed elements are not padded
        let pad = if first == MI_COMPRESSED { 0 } else { (8 - n % 8) % 8 };
        if pad > 0 && self.pos + pad <= self.buf.len() {
            self.pos += pad;
        }
        Ok((first, data))
    }
}

fn numeric(ty: u32, data: &[u8]) -> std::result::Result<Vec<f64>, String> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
    }
    Ok(match ty {
        1 => data.iter().map(|&b| b as i8 as f64).collect(),
        2 => data.iter().map(|&b| b as f64).collect(),
        3 => conv!(i16, 2),
        4 => conv!(u16, 2),
        5 => conv!(i32, 4),
        6 => conv!(u32, 4),
        7 => conv!(f32, 4),
        9 => conv!(f64, 8),
        12 => conv!(i64, 8),
        13 => conv!(u64, 8),
        other => return Err(format!("unsupported numeric type {other}")),
    })
}

fn parse_matrix(payload: &[u8]) -> std::result::Result<MatArray, String> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let (ty, _flags) = c.element()?;
    if ty != MI_UINT32 {
        return Err("matrix without array flags".into());
    }
    let (ty, dims) = c.element()?;
    if ty != MI_INT32 {
        return Err("matrix without dimensions".into());
    }
    let dims = dims
        .chunks_exact(4)
        .map(|d| i32::from_le_bytes(d.try_into().unwrap()) as usize)
        .collect();
    let (ty, name) = c.element()?;
    if ty != MI_INT8 {
        return Err("matrix without name".into());
    }
    let name = String::from_utf8_lossy(name).into_owned();
    let (ty, real) = c.element()?;
    Ok(MatArray {
        name,
        dims,
        values: numeric(ty, real)?,
    })
}

fn parse_mat(bytes: &[u8]) -> std::result::Result<Vec<MatArray>, String> {
    if bytes.len() < 128 {
        return Err("file shorter than the 128-byte MAT header".into());
    }
    if &bytes[126..128] != b"IM" {
        return Err("not a little-endian level-5 MAT file".into());
    }
    let mut out = Vec::new();
    let mut c = Cursor { buf: &bytes[128..], pos: 0 };
    while !c.done() {
        let (ty, payload) = c.element()?;
        match ty {
            MI_MATRIX => out.push(parse_matrix(payload)?),
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(payload)
                    .read_to_end(&mut inflated)
                    .map_err(|e| format!("zlib: {e}"))?;
                let mut inner = Cursor { buf: &inflated, pos: 0 };
                let (ity, ipayload) = inner.element()?;
                if ity == MI_MATRIX {
                    out.push(parse_matrix(ipayload)?);
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn load_svhn(root: &Path, split: Split) -> Result<Dataset> {
    let path = root.join(match split {
        Split::Train => "train_32x32.mat",
        Split::Test => "test_32x32.mat",
    });
    let ingest = |msg: String| Error::Ingestion {
        path: path.clone(),
        msg,
    };
    let bytes = fs::read(&path).map_err(|e| ingest(e.to_string()))?;
    let arrays = parse_mat(&bytes).map_err(ingest)?;
    let find = |n: &str| arrays.iter().find(|a| a.name == n);
    let x = find("X").ok_or_else(|| ingest("no variable X".into()))?;
    let y = find("y").ok_or_else(|| ingest("no variable y".into()))?;
    if x.dims.len() != 4 || x.dims[..3] != [32, 32, 3] {
        return Err(ingest(format!("X has dims {:?}, expected 32×32×3×N", x.dims)));
    }
    let n = x.dims[3];
    if y.values.len() != n || x.values.len() != n * 3072 {
        return Err(ingest("X/y sample counts disagree".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = vec![0.0; 3072];
        for ch in 0..3 {
            for col in 0..32 {
                for row in 0..32 {
                    // column-major: row fastest, then column, channel, sample
                    let src = row + 32 * (col + 32 * (ch + 3 * i));
                    img[(ch * 32 + row) * 32 + col] = x.values[src] / 255.0;
                }
            }
        }
        let raw = y.values[i] as usize;
        let label = if raw == 10 { 0 } else { raw };
        if label >= 10 {
            return Err(ingest(format!("label {raw} out of range at sample {i}")));
        }
        samples.push(Sample {
            id: i as u64,
            x: img,
            y: label,
            origin: Origin::Native,
        });
    }
    Dataset::new(
        match split {
            Split::Train => "svhn-train",
            Split::Test => "svhn-test",
        },
        10,
        vec![3, 32, 32],
        samples,
    )
}
