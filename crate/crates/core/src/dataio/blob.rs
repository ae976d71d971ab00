//! Portable binary dump of a dataset.
//!
//! Layout: `PATDS001`, u64 LE header length, JSON header, then per sample:
//! u64 id, u32 label, u8 origin (0 native, 1 injected_ood, 2 label_flipped),
//! and the sample values as f64 LE.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Origin, Sample};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"PATDS001";

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    name: String,
    num_classes: usize,
    item_shape: Vec<usize>,
    count: usize,
    generator: Option<String>,
}

fn origin_code(o: Origin) -> u8 {
    match o {
        Origin::Native => 0,
        Origin::InjectedOod => 1,
        Origin::LabelFlipped => 2,
    }
}

pub fn save_blob(path: &Path, d: &Dataset) -> Result<()> {
    let header = BlobHeader {
        name: d.name().to_string(),
        num_classes: d.num_classes(),
        item_shape: d.item_shape().to_vec(),
        count: d.len(),
        generator: d.generator().map(str::to_string),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for s in d.samples() {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&(s.y as u32).to_le_bytes())?;
        w.write_all(&[origin_code(s.origin)])?;
        for v in &s.x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_blob(path: &Path) -> Result<Dataset> {
    let bad = |msg: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = std::io::BufReader::new(fs::File::open(path).map_err(|e| bad(&e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != BLOB_MAGIC {
        return Err(bad("bad magic, expected PATDS001"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: BlobHeader = serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;
    let per: usize = header.item_shape.iter().product();
    let mut samples = Vec::with_capacity(header.count);
    let mut buf = vec![0u8; 13 + per * 8];
    for _ in 0..header.count {
        r.read_exact(&mut buf).map_err(|_| bad("truncated sample"))?;
        let id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let y = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let origin = match buf[12] {
            0 => Origin::Native,
            1 => Origin::InjectedOod,
            2 => Origin::LabelFlipped,
            _ => return Err(bad("bad origin code")),
        };
        let x = buf[13..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample { id, x, y, origin });
    }
    let d = Dataset::new(header.name, header.num_classes, header.item_shape, samples)?;
    Ok(match header.generator {
        Some(g) => d.with_generator(g),
        None => d,
    })
}
