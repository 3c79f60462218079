//! Per-class probability map files.
//!
//! Layout: `FPM1\n`, then an ASCII line `<width> <height> <classes>\n`, then
//! `width * height * classes` little-endian f32 values in class-major,
//! row-major order. Values live in `[0, 1]` and round-trip exactly.

use std::fs;
use std::path::Path;

use super::{DataError, ProbMapStack};

const MAGIC: &[u8] = b"FPM1\n";

/// Write a probability stack to `path`.
pub fn write_prob_map(probs: &ProbMapStack, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(MAGIC.len() + 32 + probs.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(
        format!("{} {} {}\n", probs.width(), probs.height(), probs.classes()).as_bytes(),
    );
    for &v in probs.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Read a probability stack written by [`write_prob_map`].
pub fn read_prob_map(path: &Path) -> Result<ProbMapStack, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = bytes[..bytes.len().min(4)]
            .iter()
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '?' })
            .collect::<String>();
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: "FPM1".into(),
            found,
        });
    }
    let rest = &bytes[MAGIC.len()..];
    let line_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DataError::Header {
            path: path.display().to_string(),
            detail: "missing dimension line".into(),
        })?;
    let dims_line = String::from_utf8_lossy(&rest[..line_end]);
    let parts: Vec<&str> = dims_line.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(DataError::Header {
            path: path.display().to_string(),
            detail: format!("expected `width height classes`, got `{dims_line}`"),
        });
    }
    let parse = |s: &str, what: &str| -> Result<usize, DataError> {
        s.parse().map_err(|e| DataError::Header {
            path: path.display().to_string(),
            detail: format!("bad {what}: {e}"),
        })
    };
    let width = parse(parts[0], "width")?;
    let height = parse(parts[1], "height")?;
    let classes = parse(parts[2], "classes")?;
    let payload = &rest[line_end + 1..];
    let expected = width * height * classes * 4;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::TrailingData {
            path: path.display().to_string(),
        });
    }
    let mut values = Vec::with_capacity(width * height * classes);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(DataError::ValueOutOfRange {
                path: path.display().to_string(),
                value: v,
            });
        }
        values.push(v);
    }
    ProbMapStack::new(width, height, classes, values)
}
