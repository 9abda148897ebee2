//! `DVDS` dataset archive.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      4 bytes  "DVDS"
//! version    u16      1
//! spec_len   u32      followed by spec_len bytes of UTF-8 TOML (generator spec echo)
//! classes    u32
//! channels   u32
//! height     u32
//! width      u32
//! count      u32
//! man_len    u32      followed by man_len bytes of UTF-8 manifest
//! blob       count * channels * height * width  f32
//! checksum   32 bytes SHA-256 of every preceding byte
//! ```
//!
//! The manifest has one line per sample, in blob order:
//! `id<TAB>labels<TAB>placements`. `labels` is a hex byte string where byte
//! `k` holds classes `8k..8k+7`, lowest bit first. `placements` is
//! `class:x,y` entries joined by `;`, or `-` when empty.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::synthetic::{Dataset, Placement, Sample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DVDS";
pub const DATASET_VERSION: u16 = 1;

fn label_hex(labels: &[bool]) -> String {
    let mut out = String::new();
    for chunk in labels.chunks(8) {
        let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &l)| acc | ((l as u8) << i));
        write!(out, "{byte:02x}").unwrap();
    }
    out
}

fn parse_label_hex(text: &str, classes: usize) -> Result<Vec<bool>> {
    if text.len() != classes.div_ceil(8) * 2 {
        return Err(Error::format(format!("label field {text:?} has wrong width for {classes} classes")));
    }
    let mut labels = Vec::with_capacity(classes);
    for k in 0..classes.div_ceil(8) {
        let byte = u8::from_str_radix(&text[2 * k..2 * k + 2], 16)
            .map_err(|_| Error::format(format!("label field {text:?} is not hex")))?;
        for bit in 0..8 {
            if labels.len() < classes {
                labels.push(byte >> bit & 1 == 1);
            } else if byte >> bit & 1 == 1 {
                return Err(Error::format(format!("label field {text:?} sets bits beyond class {classes}")));
            }
        }
    }
    Ok(labels)
}

pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(DATASET_MAGIC);
    buf.extend(DATASET_VERSION.to_le_bytes());
    buf.extend((ds.spec_echo.len() as u32).to_le_bytes());
    buf.extend(ds.spec_echo.as_bytes());
    for v in [ds.classes, ds.channels, ds.image_size, ds.image_size, ds.len()] {
        buf.extend((v as u32).to_le_bytes());
    }
    let mut manifest = String::new();
    for s in &ds.samples {
        let places = if s.glyphs.is_empty() {
            "-".to_string()
        } else {
            s.glyphs
                .iter()
                .map(|g| format!("{}:{},{}", g.class, g.x, g.y))
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(manifest, "{}\t{}\t{}", s.id, label_hex(&s.labels), places).unwrap();
    }
    buf.extend((manifest.len() as u32).to_le_bytes());
    buf.extend(manifest.as_bytes());
    for s in &ds.samples {
        for x in &s.image {
            buf.extend(x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend(digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("truncated archive while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

fn parse_placements(text: &str) -> Result<Vec<Placement>> {
    if text == "-" {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|p| {
            let bad = || Error::format(format!("malformed placement {p:?}"));
            let (class, xy) = p.split_once(':').ok_or_else(bad)?;
            let (x, y) = xy.split_once(',').ok_or_else(bad)?;
            Ok(Placement {
                class: class.parse().map_err(|_| bad())?,
                x: x.parse().map_err(|_| bad())?,
                y: y.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format("not a DVDS archive (bad magic)"));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported DVDS version {version}")));
    }
    if bytes.len() < 32 {
        return Err(Error::format("truncated archive while reading checksum"));
    }
    let spec_len = r.u32("spec length")?;
    let spec_echo = String::from_utf8(r.take(spec_len, "spec echo")?.to_vec())
        .map_err(|_| Error::format("spec echo is not UTF-8"))?;
    let classes = r.u32("classes")?;
    let channels = r.u32("channels")?;
    let height = r.u32("height")?;
    let width = r.u32("width")?;
    let count = r.u32("count")?;
    if height != width {
        return Err(Error::format(format!("non-square images {height}x{width}")));
    }
    let man_len = r.u32("manifest length")?;
    let manifest = std::str::from_utf8(r.take(man_len, "manifest")?).map_err(|_| Error::format("manifest is not UTF-8"))?;
    let per = channels * height * width;
    let blob = r.take(count * per * 4, "image blob")?;
    let body_end = r.pos;
    let checksum = r.take(32, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checksum"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != checksum {
        return Err(Error::format("checksum mismatch"));
    }
    let lines: Vec<&str> = manifest.lines().collect();
    if lines.len() != count {
        return Err(Error::format(format!("manifest has {} records, header declares {count}", lines.len())));
    }
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(count);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(format!("manifest line {}: expected 3 fields", i + 1)));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad id {:?}", i + 1, fields[0])))?;
        if !seen.insert(id) {
            return Err(Error::format(format!("duplicate sample id {id}")));
        }
        let image = blob[i * per * 4..(i + 1) * per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            id,
            image,
            labels: parse_label_hex(fields[1], classes)?,
            glyphs: parse_placements(fields[2])?,
        });
    }
    Ok(Dataset {
        classes,
        channels,
        image_size: height,
        samples,
        spec_echo,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_dataset(&bytes)
}
