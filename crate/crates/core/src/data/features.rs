//! Precomputed per-frame features.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `DVLAFEAT` |
//! | 8 | 1 | version, currently 1 |
//! | 9 | 4 | `d_embed` (u32) |
//! | 13 | 4 | `F` (u32) |
//! | 17 | 4 | `count` (u32) |
//! | 21 | `4*count*F*d_embed` | row-major `f32` values, `[count, F, d_embed]` |
//!
//! Item ids live in a parallel UTF-8 file (`<path>.ids`), one per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DVLAFEAT";
pub const FEATURE_VERSION: u8 = 1;
const HEADER_LEN: usize = 21;

/// Id-indexed `[count, F, d_embed]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub values: Tensor,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, values: Tensor) -> Result<Self> {
        match values.shape() {
            &[n, _, _] if n == ids.len() => Ok(Self { ids, values }),
            s => Err(Error::Shape(format!("{} ids for features of shape {s:?}", ids.len()))),
        }
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn d_embed(&self) -> usize {
        self.values.shape()[2]
    }
}

fn ids_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Writes `table`, rounding values to `f32`.
pub fn write_feature_file(path: &Path, table: &FeatureTable) -> Result<()> {
    let dims = [table.d_embed(), table.frames(), table.ids.len()];
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * table.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in table.values.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for id in &table.ids {
        if id.contains('\n') || id.contains('\r') {
            return Err(Error::Format { path: path.to_path_buf(), offset: 0, message: format!("id {id:?} contains a line break") });
        }
    }
    fs::write(path, out)?;
    let mut ids = table.ids.join("\n");
    ids.push('\n');
    fs::write(ids_path(path), ids)?;
    Ok(())
}

/// Reads a feature file and checks its header against the expected
/// `d_embed` and frame count.
pub fn load_feature_file(path: &Path, d_embed: usize, frames: usize) -> Result<FeatureTable> {
    let bytes = fs::read(path)?;
    let fmt = |offset: usize, message: String| Error::Format { path: path.to_path_buf(), offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    if bytes[8] != FEATURE_VERSION {
        return Err(fmt(8, format!("unsupported version {} (expected {FEATURE_VERSION})", bytes[8])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (d, f, count) = (word(9), word(13), word(17));
    if d != d_embed {
        return Err(fmt(9, format!("d_embed is {d}, expected {d_embed}")));
    }
    if f != frames {
        return Err(Error::Arity { what: "frames in feature file", expected: frames, actual: f });
    }
    let expected = count
        .checked_mul(f)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt(17, format!("count {count} overflows")))?;
    if bytes.len() != expected {
        return Err(fmt(bytes.len().min(expected), format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(count * f * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(fmt(HEADER_LEN + 4 * k, format!("non-finite value {x}")));
        }
        data.push(f64::from(x));
    }
    let ids_file = ids_path(path);
    let text = fs::read_to_string(&ids_file)?;
    let ids: Vec<String> = text.lines().map(str::to_owned).collect();
    if ids.len() != count {
        return Err(Error::Format {
            path: ids_file,
            offset: text.len(),
            message: format!("{} ids for {count} feature rows", ids.len()),
        });
    }
    FeatureTable::new(ids, Tensor::new([count, f, d], data)?)
}
