//! `OFGP` parameter checkpoints.
//!
//! Layout (little-endian): magic, `u32` version (1), `u32` level count,
//! `u32` channels per level, `f32` leaky slope, `u32` kernel size (3),
//! `u32` parameter count, then the parameters as `f32` in layout order.

use std::path::Path;

use super::{Architecture, PredictorParams};
use crate::data::{read_bytes, write_bytes, ByteReader};
use crate::error::{FormatError, OfgError, Result};

pub const MAGIC_CHECKPOINT: [u8; 4] = *b"OFGP";
const VERSION: u32 = 1;
const KERNEL: u32 = 3;

pub fn write_checkpoint(path: &Path, params: &PredictorParams) -> Result<()> {
    let arch = params.architecture();
    let mut out = Vec::with_capacity(32 + 4 * params.values().len());
    out.extend_from_slice(&MAGIC_CHECKPOINT);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.levels() as u32).to_le_bytes());
    for &c in &arch.channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.leaky_slope.to_le_bytes());
    out.extend_from_slice(&KERNEL.to_le_bytes());
    out.extend_from_slice(&(params.values().len() as u32).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &out)
}

fn parse(bytes: &[u8]) -> Result<(Architecture, Vec<f32>), FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC_CHECKPOINT)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let levels = r.u32()? as usize;
    if levels == 0 || levels > 8 {
        return Err(FormatError::BadHeader {
            offset: 8,
            reason: format!("level count {levels} outside 1..=8"),
        });
    }
    let channels = (0..levels)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let slope_at = r.pos();
    let leaky_slope = r.f32()?;
    let kernel_at = r.pos();
    let kernel = r.u32()?;
    if kernel != KERNEL {
        return Err(FormatError::BadHeader {
            offset: kernel_at,
            reason: format!("kernel size {kernel} unsupported"),
        });
    }
    let arch = Architecture {
        channels,
        leaky_slope,
    };
    arch.validate().map_err(|e| FormatError::BadHeader {
        offset: slope_at,
        reason: e.to_string(),
    })?;
    let count_at = r.pos();
    let count = r.u32()? as usize;
    if count != arch.param_count() {
        return Err(FormatError::BadHeader {
            offset: count_at,
            reason: format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            ),
        });
    }
    r.expect_remaining(4 * count)?;
    let values = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    Ok((arch, values))
}

pub fn read_checkpoint(path: &Path) -> Result<PredictorParams> {
    let bytes = read_bytes(path)?;
    let (arch, values) = parse(&bytes).map_err(|kind| OfgError::Format {
        path: path.to_path_buf(),
        kind,
    })?;
    PredictorParams::from_values(arch, values).map_err(|e| e.context(path.display().to_string()))
}
