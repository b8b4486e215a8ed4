//! The BMSR multi-band raster container.
//!
//! ```text
//! "BMSR" | u32 version=1 | u32 width | u32 height | u32 bands | u8 dtype=0 | f32 gsd
//! per band: 16-byte NUL-padded ASCII tag, then height*width f32, row-major
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use super::raster::{BandRole, RasterStack};
use crate::error::{Error, Result};
use crate::fsutil::{read_all, write_atomic, Reader};

const MAGIC: &[u8; 4] = b"BMSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const TAG_LEN: usize = 16;
pub const HEADER_LEN: usize = 25;

/// Exact size in bytes of a BMSR file holding `bands` bands of `width x height`.
pub fn encoded_len(width: usize, height: usize, bands: usize) -> usize {
    HEADER_LEN + bands * (TAG_LEN + width * height * 4)
}

pub fn encode(stack: &RasterStack) -> Result<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(encoded_len(stack.width(), stack.height(), stack.bands().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(stack.width(), "width")?.to_le_bytes());
    out.extend_from_slice(&dim(stack.height(), "height")?.to_le_bytes());
    out.extend_from_slice(&dim(stack.bands().len(), "band count")?.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&stack.gsd().to_le_bytes());
    for band in stack.bands() {
        let mut tag = [0u8; TAG_LEN];
        let name = band.role.tag().as_bytes();
        tag[..name.len()].copy_from_slice(name);
        out.extend_from_slice(&tag);
        for v in &band.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RasterStack> {
    let mut r = Reader::new(bytes, "BMSR");
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a BMSR file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported BMSR version {version}")));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let bands = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported BMSR dtype code {dtype}")));
    }
    let gsd = r.f32()?;
    let pixels = width
        .checked_mul(height)
        .filter(|p| p.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("BMSR dims {width}x{height} overflow")))?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("BMSR dims {width}x{height} are empty")));
    }
    // Reject absurd band counts before allocating anything.
    let per_band = TAG_LEN + pixels * 4;
    if bands.checked_mul(per_band).map_or(true, |n| n > r.remaining()) {
        return Err(Error::Format(format!(
            "BMSR truncated: {bands} bands of {width}x{height} need more than {} bytes",
            r.remaining()
        )));
    }
    let mut stack = RasterStack::new(width, height, gsd)?;
    for _ in 0..bands {
        let raw = r.take(TAG_LEN)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(TAG_LEN);
        if raw[end..].iter().any(|&b| b != 0) {
            return Err(Error::Format("BMSR band tag is not NUL-padded".into()));
        }
        let tag = std::str::from_utf8(&raw[..end])
            .map_err(|_| Error::Format("BMSR band tag is not ASCII".into()))?;
        let role: BandRole = tag.parse()?;
        let data = r.f32s(pixels)?;
        stack
            .push_band(role, data)
            .map_err(|e| Error::Format(format!("BMSR band {role}: {e}")))?;
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("BMSR has {} trailing bytes", r.remaining())));
    }
    Ok(stack)
}

pub fn read_bmsr(path: impl AsRef<Path>) -> Result<RasterStack> {
    let path = path.as_ref();
    decode(&read_all(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Writes atomically: the destination is either untouched or complete.
pub fn write_bmsr(stack: &RasterStack, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(stack)?)
}
