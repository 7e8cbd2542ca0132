//! `.mbr` container:
//!
//! ```text
//! magic[8] | header_len u64 | header JSON | crc32(header)
//! nodata mask (1 byte per pixel) | crc32(mask)
//! per band: r*c little-endian f32 | crc32(plane)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DepositRecord, GeoTransform, Label, LabelRaster, MultiBandRaster};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"PRSPMBR1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    bands: usize,
    rows: usize,
    cols: usize,
    dtype: String,
    band_names: Vec<String>,
    transform: GeoTransform,
}

pub fn save_raster(raster: &MultiBandRaster, path: &Path) -> Result<()> {
    let header = Header {
        bands: raster.bands(),
        rows: raster.rows(),
        cols: raster.cols(),
        dtype: "f32".into(),
        band_names: raster.band_names().to_vec(),
        transform: *raster.transform(),
    };
    let hdr = serde_json::to_vec(&header)?;
    let n = raster.pixels();
    let mut buf = Vec::with_capacity(32 + hdr.len() + n * (1 + 4 * raster.bands()) + 4 * (raster.bands() + 2));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hdr);
    buf.extend_from_slice(&crc32fast::hash(&hdr).to_le_bytes());
    let start = buf.len();
    buf.extend(raster.nodata().iter().map(|&m| m as u8));
    let crc = crc32fast::hash(&buf[start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    for j in 0..raster.bands() {
        let start = buf.len();
        for v in raster.band(j) {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        let crc = crc32fast::hash(&buf[start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn checked(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let data = self.take(n)?;
        if crc32fast::hash(data) != self.u32()? {
            return Err(Error::Checksum {
                path: self.path.into(),
                section: section.into(),
            });
        }
        Ok(data)
    }
}

pub fn load_raster(path: &Path) -> Result<MultiBandRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if bytes.len() >= 8 && bytes[..8] != MAGIC {
        return Err(Error::BadMagic(path.into()));
    }
    rd.take(8)?;
    let hlen = u64::from_le_bytes(rd.take(8)?.try_into().unwrap()) as usize;
    let hdr = rd.checked(hlen, "header")?;
    let header: Header = serde_json::from_slice(hdr).map_err(|e| Error::Malformed {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32" || header.band_names.len() != header.bands {
        return Err(Error::Malformed {
            path: path.into(),
            reason: "inconsistent header".into(),
        });
    }
    let n = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| Error::Malformed {
            path: path.into(),
            reason: "grid size overflows".into(),
        })?;
    let mask: Vec<bool> = rd.checked(n, "nodata mask")?.iter().map(|&b| b != 0).collect();
    let mut data = Vec::with_capacity(n * header.bands);
    for name in &header.band_names {
        let plane = rd.checked(n * 4, &format!("band {name}"))?;
        data.extend(
            plane
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))),
        );
    }
    if rd.pos != bytes.len() {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("{} trailing bytes", bytes.len() - rd.pos),
        });
    }
    MultiBandRaster::new(header.rows, header.cols, header.band_names, data, Some(mask), header.transform)
}

/// Label grids are stored as a one-band raster of codes 1/0/255.
pub fn save_labels(labels: &LabelRaster, transform: &GeoTransform, path: &Path) -> Result<()> {
    let data = labels.labels().iter().map(|l| l.code() as f32).collect();
    let r = MultiBandRaster::new(labels.rows(), labels.cols(), vec!["label".into()], data, None, *transform)?;
    save_raster(&r, path)
}

pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    let r = load_raster(path)?;
    if r.bands() != 1 {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("label raster has {} bands", r.bands()),
        });
    }
    let labels = r
        .band(0)
        .iter()
        .map(|&v| {
            (v >= 0.0 && v <= 255.0 && v.fract() == 0.0)
                .then(|| Label::from_code(v as u8))
                .flatten()
                .ok_or_else(|| Error::Malformed {
                    path: path.into(),
                    reason: format!("invalid label code {v}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelRaster::from_labels(r.rows(), r.cols(), labels)
}

pub fn read_records(path: &Path) -> Result<Vec<DepositRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.into(),
            reason: format!("{other:?}"),
        },
    })?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: DepositRecord = rec?;
        if !(rec.x.is_finite() && rec.y.is_finite()) {
            return Err(Error::Malformed {
                path: path.into(),
                reason: format!("record {} has non-finite coordinates", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[DepositRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.into(),
            reason: format!("{other:?}"),
        },
    })?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
