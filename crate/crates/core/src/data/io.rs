//! Grid file format.
//!
//! ```text
//! "ENSDOWN-GRID-v1"             15 bytes
//! byte-order marker             u32, 0x01020304 written little-endian
//! header length                 u64 little-endian
//! header                        JSON: shape, coordinates, calendar, units, checksum
//! payload                       f64 little-endian, row-major [T, C, H, W]
//! ```
//! The checksum is the SHA-256 of the payload bytes.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calendar::NoLeapDay;
use super::grid::GridField;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write_with;

pub const GRID_MAGIC: &[u8] = b"ENSDOWN-GRID-v1";
const BYTE_ORDER_MARK: u32 = 0x0102_0304;

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    shape: [usize; 4],
    dtype: String,
    byte_order: String,
    calendar: String,
    /// Contiguous daily runs `[first_day, n_days]`.
    time_runs: Vec<(i64, usize)>,
    variables: Vec<String>,
    units: Vec<String>,
    lat: Vec<f64>,
    lon: Vec<f64>,
    checksum: String,
}

fn time_runs(time: &[NoLeapDay]) -> Vec<(i64, usize)> {
    let mut runs: Vec<(i64, usize)> = Vec::new();
    for d in time {
        match runs.last_mut() {
            Some((start, len)) if *start + *len as i64 == d.0 => *len += 1,
            _ => runs.push((d.0, 1)),
        }
    }
    runs
}

fn payload_checksum(values: &Array4<f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values.iter() {
        hasher.update(v.to_le_bytes());
    }
    format!("sha256:{}", hex::encode(hasher.finalize()))
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "grid",
        detail: detail.into(),
    }
}

pub fn write_grid<W: Write>(field: &GridField, mut w: W) -> std::io::Result<()> {
    let (t, c, h, wd) = field.values().dim();
    let header = GridHeader {
        shape: [t, c, h, wd],
        dtype: "f64".into(),
        byte_order: "little".into(),
        calendar: "noleap".into(),
        time_runs: time_runs(field.time()),
        variables: field.variables().to_vec(),
        units: field.units().to_vec(),
        lat: field.lat().to_vec(),
        lon: field.lon().to_vec(),
        checksum: payload_checksum(field.values()),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(GRID_MAGIC)?;
    w.write_all(&BYTE_ORDER_MARK.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in field.values().as_slice().expect("standard layout").chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<GridField> {
    let mut magic = [0u8; GRID_MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("file shorter than the magic string"))?;
    if magic != GRID_MAGIC {
        return Err(corrupt("bad magic string; not an ENSDOWN grid file"));
    }
    let mut mark = [0u8; 4];
    r.read_exact(&mut mark).map_err(|_| corrupt("missing byte-order marker"))?;
    match u32::from_le_bytes(mark) {
        BYTE_ORDER_MARK => {}
        m if m == BYTE_ORDER_MARK.swap_bytes() => {
            return Err(corrupt(
                "byte-order marker is flipped: file was written big-endian, only little-endian is supported",
            ))
        }
        m => return Err(corrupt(format!("unrecognised byte-order marker {m:#010x}"))),
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| corrupt("missing header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(corrupt(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let header: GridHeader =
        serde_json::from_slice(&json).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.dtype != "f64" || header.byte_order != "little" || header.calendar != "noleap" {
        return Err(corrupt(format!(
            "unsupported dtype/byte order/calendar {}/{}/{}",
            header.dtype, header.byte_order, header.calendar
        )));
    }
    let [t, c, h, w] = header.shape;
    let time: Vec<NoLeapDay> = header
        .time_runs
        .iter()
        .flat_map(|&(start, n)| (0..n as i64).map(move |d| NoLeapDay(start + d)))
        .collect();
    if time.len() != t {
        return Err(corrupt(format!(
            "header declares {t} time steps but its time axis has {}",
            time.len()
        )));
    }
    let n = t
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| corrupt("shape overflows"))?;

    let mut data = Vec::with_capacity(n);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 8 * 8192];
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(8192);
        let bytes = &mut buf[..8 * take];
        r.read_exact(bytes).map_err(|_| {
            corrupt(format!(
                "payload truncated: header shape {:?} needs {} values, file holds {}",
                header.shape,
                n,
                n - remaining
            ))
        })?;
        hasher.update(&*bytes);
        data.extend(
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
        );
        remaining -= take;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|_| corrupt("read error after payload"))? != 0 {
        return Err(corrupt(format!(
            "payload longer than header shape {:?} declares",
            header.shape
        )));
    }
    let checksum = format!("sha256:{}", hex::encode(hasher.finalize()));
    if checksum != header.checksum {
        return Err(corrupt(format!(
            "checksum mismatch: header {}, payload {checksum}",
            header.checksum
        )));
    }
    let values = Array4::from_shape_vec((t, c, h, w), data).expect("length checked");
    GridField::new(values, header.variables, header.units, header.lat, header.lon, time)
        .map_err(|e| corrupt(e.to_string()))
}

/// Writes `field` to `path` atomically.
pub fn save_grid(field: &GridField, path: &Path) -> Result<()> {
    atomic_write_with(path, |w| write_grid(field, w).map_err(|e| Error::io(path, e)))
}

pub fn load_grid(path: &Path) -> Result<GridField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid(BufReader::with_capacity(1 << 20, file))
}
