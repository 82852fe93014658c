//! AVFB tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! offset 0   magic   "AVFB"
//! offset 4   version u8 = 1
//! offset 5   dtype   u8  (0 = f32, 1 = f64)
//! offset 6   ndim    u8
//! offset 7   reserved u8 = 0
//! offset 8   ndim × u64 extents
//! then       row-major payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVFB";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Serializes one tensor block.
pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.ndim() == 0 || t.is_empty() {
        return Err(Error::validation(format!(
            "refusing to store degenerate tensor of shape {:?}",
            t.shape()
        )));
    }
    if t.ndim() > u8::MAX as usize {
        return Err(Error::validation("too many dimensions for AVFB"));
    }
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), t.ndim() as u8, 0]);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            if t.data().iter().any(|v| v.abs() > f32::MAX as f64) {
                return Err(Error::validation("value exceeds the 32-bit float range"));
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses one tensor block starting at `bytes[0]`; `base` is the absolute
/// file offset of that byte and is used in error messages. Returns the
/// tensor, its stored dtype and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8], base: u64) -> Result<(Tensor, DType, usize)> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            Err(Error::format(
                base + bytes.len() as u64,
                format!("truncated {what}: need {n} bytes, have {}", bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(8, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            base,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(base + 4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::format(base + 5, format!("unknown dtype {other}"))),
    };
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(Error::format(base + 6, "zero-dimensional tensor"));
    }
    let header = 8 + 8 * ndim;
    need(header, "extents")?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 8 * i;
        let e = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8-byte slice"));
        if e == 0 {
            return Err(Error::format(base + off as u64, "zero extent"));
        }
        shape.push(usize::try_from(e).map_err(|_| Error::format(base + off as u64, "extent overflow"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(base + 8, "element count overflow"))?;
    let total = count
        .checked_mul(dtype.width())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::format(base + 8, "payload size overflow"))?;
    need(total, "payload")?;
    let payload = &bytes[header..total];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            base + (header + pos * dtype.width()) as u64,
            "non-finite payload value",
        ));
    }
    Ok((Tensor::new(&shape, data)?, dtype, total))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    write_atomic(path, &encode_tensor(t, dtype)?)
}

/// Reads a single-block AVFB file; trailing bytes are a format error.
pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, _, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// Feature matrices are stored as 32-bit floats.
pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_file(path, t, DType::F32)
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    read_tensor_file(path)
}
