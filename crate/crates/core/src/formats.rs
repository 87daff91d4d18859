//! On-disk formats, all little-endian and byte-exact:
//!
//! - ZDM raster: magic `ZDM1`, u32 width, height, channels, then
//!   channels*H*W f32 values row-major; NaN marks invalid depth.
//! - Checkpoint: magic `ZOEC`, u32 version, then a sequence of named arrays
//!   (u32 name length, UTF-8 name, u32 rank, u32 extents, raw f32 payload).
//!   The run-config snapshot travels as the `__config__` entry whose payload
//!   stores one UTF-8 byte per f32 value.
//! - Manifest: UTF-8 lines `path,domain`.
//! - Metrics CSV: header `dataset,delta1,delta2,delta3,rel,rmse,log10`,
//!   six-decimal fixed-point cells.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::array::NdArray;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::router::DomainLabel;

pub const ZDM_MAGIC: &[u8; 4] = b"ZDM1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZOEC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let v = u32::from_le_bytes(bytes[*pos..end].try_into().expect("4 bytes"));
    *pos = end;
    Ok(v)
}

fn read_f32s(bytes: &[u8], pos: &mut usize, count: usize, what: &str) -> Result<Vec<f32>> {
    let end = *pos + 4 * count;
    if end > bytes.len() {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let out = bytes[*pos..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    *pos = end;
    Ok(out)
}

/// Writes a [C, H, W] (or [H, W]) raster.
pub fn write_zdm(path: &Path, array: &NdArray<f32>) -> Result<()> {
    let (c, h, w) = match array.shape() {
        [h, w] => (1usize, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension(format!("zdm arrays must be rank 2 or 3, got {other:?}")))
        }
    };
    let mut buf = Vec::with_capacity(16 + 4 * array.len());
    buf.extend_from_slice(ZDM_MAGIC);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for v in array.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a raster back as [C, H, W].
pub fn read_zdm(path: &Path) -> Result<NdArray<f32>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    if bytes.len() < 16 || &bytes[..4] != ZDM_MAGIC {
        return Err(Error::Format(format!("{}: not a ZDM1 file", path.display())));
    }
    pos += 4;
    let w = read_u32(&bytes, &mut pos, "zdm width")? as usize;
    let h = read_u32(&bytes, &mut pos, "zdm height")? as usize;
    let c = read_u32(&bytes, &mut pos, "zdm channels")? as usize;
    let data = read_f32s(&bytes, &mut pos, c * h * w, "zdm payload")?;
    if pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    NdArray::from_vec(vec![c, h, w], data)
}

/// Serialized model state: named arrays plus the config snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub arrays: Vec<(String, NdArray<f32>)>,
    pub config_text: String,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&NdArray<f32>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing array '{name}'")))
    }
}

fn push_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    arrays: &[(String, NdArray<f32>)],
    config_text: &str,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_entry(
        &mut buf,
        CONFIG_ENTRY,
        &[config_text.len()],
        config_text.bytes().map(|b| b as f32),
    );
    for (name, arr) in arrays {
        push_entry(&mut buf, name, arr.shape(), arr.data().iter().copied());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let mut pos = 4usize;
    let version = read_u32(&bytes, &mut pos, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut arrays = Vec::new();
    let mut config_text = None;
    while pos < bytes.len() {
        let name_len = read_u32(&bytes, &mut pos, "entry name length")? as usize;
        if pos + name_len > bytes.len() {
            return Err(Error::Format("truncated entry name".into()));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        pos += name_len;
        let rank = read_u32(&bytes, &mut pos, "entry rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&bytes, &mut pos, "entry extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let data = read_f32s(&bytes, &mut pos, count, &format!("array '{name}'"))?;
        if name == CONFIG_ENTRY {
            let text: std::result::Result<String, ()> = data
                .iter()
                .map(|&v| {
                    let b = v as u32;
                    if v.fract() == 0.0 && b < 256 {
                        Ok(b as u8 as char)
                    } else {
                        Err(())
                    }
                })
                .collect();
            config_text =
                Some(text.map_err(|_| Error::Format("config entry is not byte-coded".into()))?);
        } else {
            arrays.push((name, NdArray::from_vec(shape, data)?));
        }
    }
    Ok(Checkpoint {
        version,
        arrays,
        config_text: config_text
            .ok_or_else(|| Error::Format("checkpoint has no config snapshot".into()))?,
    })
}

/// Writes `path,domain` lines.
pub fn write_manifest(path: &Path, entries: &[(String, DomainLabel)]) -> Result<()> {
    let mut text = String::new();
    for (p, d) in entries {
        text.push_str(p);
        text.push(',');
        text.push_str(d.name());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, DomainLabel)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((p, d)) = line.rsplit_once(',') else {
            return Err(Error::Format(format!("manifest line {}: expected 'path,domain'", lineno + 1)));
        };
        out.push((p.to_string(), DomainLabel::parse(d.trim())?));
    }
    Ok(out)
}

/// Writes a dataset as ZDM pairs plus a manifest. Each sample becomes
/// `sample_NNNNN.zdm` (image channels) and `sample_NNNNN.depth.zdm` (depth
/// with NaN invalids); the manifest lists `image-path,domain` lines.
pub fn export_dataset(dir: &Path, samples: &[crate::datagen::Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_name = format!("sample_{i:05}.zdm");
        let depth_name = format!("sample_{i:05}.depth.zdm");
        write_zdm(&dir.join(&image_name), &s.image)?;
        write_zdm(&dir.join(&depth_name), &s.depth.values)?;
        entries.push((image_name, s.domain));
    }
    write_manifest(&dir.join("manifest.csv"), &entries)
}

pub const METRICS_HEADER: &str = "dataset,delta1,delta2,delta3,rel,rmse,log10";

/// Renders metric rows with fixed six-decimal cells (byte-stable output).
pub fn metrics_csv_string(rows: &[(String, MetricRecord)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.delta1, r.delta2, r.delta3, r.rel, r.rmse, r.log10
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricRecord)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, metrics_csv_string(rows))?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, MetricRecord)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "metrics csv must start with '{METRICS_HEADER}', got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 7 {
            return Err(Error::Format(format!(
                "metrics csv line {}: expected 7 cells, got {}",
                lineno + 2,
                cells.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("metrics csv line {}: bad number '{}'", lineno + 2, cells[i])))
        };
        rows.push((
            cells[0].to_string(),
            MetricRecord {
                delta1: num(1)?,
                delta2: num(2)?,
                delta3: num(3)?,
                rel: num(4)?,
                rmse: num(5)?,
                log10: num(6)?,
                n_pixels: 0,
            },
        ));
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, MetricRecord)>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}
