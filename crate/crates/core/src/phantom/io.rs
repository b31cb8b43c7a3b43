//! SGVL volume container.
//!
//! ```text
//! "SGVL" | version u32 | dtype u8 | slices u32 | height u32 | width u32
//! spacing row f64 | col f64 | slice f64 | payload LE
//! ```
//!
//! dtype 0 is an `f32` image, 1 a `u8` label mask.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Domain, ImageVolume, LabelMask, Spacing};

pub const MAGIC: &[u8; 4] = b"SGVL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 12 + 24;

const DTYPE_IMAGE: u8 = 0;
const DTYPE_MASK: u8 = 1;

fn header(dtype: u8, dims: Dims, spacing: Spacing) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    for e in [dims.slices, dims.height, dims.width] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in spacing.as_array() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn encode_image(vol: &ImageVolume) -> Vec<u8> {
    let mut out = header(DTYPE_IMAGE, vol.dims(), vol.spacing);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = header(DTYPE_MASK, mask.dims(), mask.spacing);
    out.extend_from_slice(mask.data());
    out
}

struct Parsed<'a> {
    dims: Dims,
    spacing: Spacing,
    payload: &'a [u8],
}

fn field<const N: usize>(bytes: &[u8], at: usize, name: &str) -> Result<[u8; N]> {
    bytes
        .get(at..at + N)
        .map(|b| b.try_into().unwrap())
        .ok_or_else(|| Error::format("volume", format!("header truncated in field `{name}`")))
}

fn parse(bytes: &[u8], want: u8) -> Result<Parsed<'_>> {
    if field::<4>(bytes, 0, "magic")? != *MAGIC {
        return Err(Error::format("volume", "bad magic, expected \"SGVL\""));
    }
    let version = u32::from_le_bytes(field(bytes, 4, "version")?);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let [dtype] = field::<1>(bytes, 8, "dtype")?;
    if dtype != want {
        let name = |t| match t {
            DTYPE_IMAGE => "f32 image".to_string(),
            DTYPE_MASK => "u8 mask".to_string(),
            other => format!("unknown tag {other}"),
        };
        return Err(Error::format(
            "volume",
            format!("dtype is {}, expected {}", name(dtype), name(want)),
        ));
    }
    let dim =
        |i: usize, name: &str| -> Result<usize> { Ok(u32::from_le_bytes(field(bytes, 9 + 4 * i, name)?) as usize) };
    let dims = Dims {
        slices: dim(0, "slices")?,
        height: dim(1, "height")?,
        width: dim(2, "width")?,
    };
    let sp = |i: usize, name: &str| -> Result<f64> { Ok(f64::from_le_bytes(field(bytes, 21 + 8 * i, name)?)) };
    let spacing = Spacing {
        row: sp(0, "spacing row")?,
        col: sp(1, "spacing col")?,
        slice: sp(2, "spacing slice")?,
    };
    spacing
        .validate()
        .map_err(|e| Error::format("volume spacing", e.to_string()))?;
    let elem = if dtype == DTYPE_IMAGE { 4 } else { 1 };
    let expected = dims.len() * elem;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            "volume",
            format!("payload short: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            "volume",
            format!("{} trailing bytes after the payload", payload.len() - expected),
        ));
    }
    Ok(Parsed { dims, spacing, payload })
}

/// The subject id and domain are not stored in the file; the caller
/// supplies them (normally from the manifest).
pub fn decode_image(bytes: &[u8], subject_id: &str, domain: Domain) -> Result<ImageVolume> {
    let p = parse(bytes, DTYPE_IMAGE)?;
    let data = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageVolume::new(p.dims, data, p.spacing, subject_id, domain)
}

/// With `num_classes`, every label must be below it.
pub fn decode_mask(bytes: &[u8], num_classes: Option<usize>) -> Result<LabelMask> {
    let p = parse(bytes, DTYPE_MASK)?;
    let mask = LabelMask::new(p.dims, p.payload.to_vec(), p.spacing)?;
    if let Some(k) = num_classes {
        mask.validate_classes(k)?;
    }
    Ok(mask)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, vol: &ImageVolume) -> Result<()> {
    write(path, &encode_image(vol))
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write(path, &encode_mask(mask))
}

pub fn load_image(path: &Path, subject_id: &str, domain: Domain) -> Result<ImageVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, subject_id, domain)
}

pub fn load_mask(path: &Path, num_classes: Option<usize>) -> Result<LabelMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, num_classes)
}
