//! Binary netpbm I/O: PPM (P6) images, PGM (P5) grayscale images and the
//! one-PGM-per-class mask stack layout.
//!
//! Mask files carry pixel values of exactly 0 or 255; anything else is
//! rejected on read. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, ImageTensor, MaskStack};

/// Image header description: width, height, channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u16,
    /// Offset of the first payload byte.
    payload: usize,
}

/// Tokenizing header parser. Comments (`#` to end of line) are skipped, as
/// produced by common editors.
fn parse_header(bytes: &[u8], path: &Path) -> Result<Header, DataError> {
    let err = |detail: String| DataError::Header {
        path: path.display().to_string(),
        detail,
    };
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String, DataError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(DataError::Header {
                path: path.display().to_string(),
                detail: "unexpected end of header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P6" && magic != "P5" {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: "P6 or P5".into(),
            found: magic,
        });
    }
    let magic_bytes = [magic.as_bytes()[0], magic.as_bytes()[1]];
    let width: usize = next_token(&mut pos)?
        .parse()
        .map_err(|e| err(format!("bad width: {e}")))?;
    let height: usize = next_token(&mut pos)?
        .parse()
        .map_err(|e| err(format!("bad height: {e}")))?;
    let maxval: u16 = next_token(&mut pos)?
        .parse()
        .map_err(|e| err(format!("bad maxval: {e}")))?;
    if width == 0 || height == 0 {
        return Err(err(format!("degenerate dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("unsupported maxval {maxval}, need 1..=255")));
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing separator before payload".into()));
    }
    pos += 1;
    Ok(Header {
        magic: magic_bytes,
        width,
        height,
        maxval,
        payload: pos,
    })
}

/// Read a P6 (3-channel) or P5 (1-channel) image, normalizing values by the
/// header maxval.
pub fn read_image(path: &Path) -> Result<ImageTensor, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    let channels = if &header.magic == b"P6" { 3 } else { 1 };
    let expected = header.width * header.height * channels;
    let payload = &bytes[header.payload..];
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
    let maxval = f32::from(header.maxval);
    let data: Vec<f32> = payload.iter().map(|&b| f32::from(b) / maxval).collect();
    ImageTensor::new(header.width, header.height, channels, data)
}

/// Parse only the header of a PPM/PGM file.
pub fn read_image_dims(path: &Path) -> Result<ImageDims, DataError> {
    // Headers are tiny; reading the whole file keeps the parser shared.
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    Ok(ImageDims {
        width: header.width,
        height: header.height,
        channels: if &header.magic == b"P6" { 3 } else { 1 },
    })
}

/// Write an image as binary PPM (3 channels) or PGM (1 channel) with
/// maxval 255. Values are clamped to `[0, 1]` and rounded.
pub fn write_image(image: &ImageTensor, path: &Path) -> Result<(), DataError> {
    let magic = match image.channels() {
        3 => "P6",
        1 => "P5",
        c => {
            return Err(DataError::Invalid {
                what: "image".into(),
                detail: format!("cannot write {c}-channel image as PPM/PGM"),
            })
        }
    };
    let mut out = Vec::with_capacity(image.data().len() + 32);
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", image.width(), image.height()).as_bytes());
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

fn write_pgm_plane(width: usize, height: usize, bytes: &[u8], path: &Path) -> Result<(), DataError> {
    debug_assert_eq!(bytes.len(), width * height);
    let mut out = Vec::with_capacity(bytes.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// File name of class plane `class` for a stack stored under `stem`.
pub fn mask_plane_filename(stem: &str, class: usize) -> String {
    format!("{stem}.class{class}.pgm")
}

/// Write one PGM per class into `dir`, named `<stem>.class<k>.pgm`, with
/// pixel values 0 / 255.
pub fn write_mask_stack(mask: &MaskStack, dir: &Path, stem: &str) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for class in 0..mask.classes() {
        let bytes: Vec<u8> = mask.plane(class).iter().map(|&b| b * 255).collect();
        let path = dir.join(mask_plane_filename(stem, class));
        write_pgm_plane(mask.width(), mask.height(), &bytes, &path)?;
    }
    Ok(())
}

/// Read a single mask plane from a PGM file; values must be exactly 0 or 255.
pub fn read_mask_plane(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    if &header.magic != b"P5" {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: "P5".into(),
            found: String::from_utf8_lossy(&header.magic).into_owned(),
        });
    }
    let expected = header.width * header.height;
    let payload = &bytes[header.payload..];
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
    let mut bits = Vec::with_capacity(expected);
    for &b in payload {
        match b {
            0 => bits.push(0u8),
            255 => bits.push(1u8),
            other => {
                return Err(DataError::BadMaskByte {
                    path: path.display().to_string(),
                    value: other,
                })
            }
        }
    }
    Ok((header.width, header.height, bits))
}

/// Read a `classes`-plane mask stack stored under `dir/<stem>.class<k>.pgm`.
/// All planes must agree on dimensions.
pub fn read_mask_stack(dir: &Path, stem: &str, classes: usize) -> Result<MaskStack, DataError> {
    let mut width = 0usize;
    let mut height = 0usize;
    let mut bits: Vec<u8> = Vec::new();
    for class in 0..classes {
        let path = dir.join(mask_plane_filename(stem, class));
        let (w, h, plane) = read_mask_plane(&path)?;
        if class == 0 {
            width = w;
            height = h;
            bits.reserve(w * h * classes);
        } else if w != width || h != height {
            return Err(DataError::DimensionMismatch {
                path: path.display().to_string(),
                detail: format!("plane is {w}x{h}, class 0 was {width}x{height}"),
            });
        }
        bits.extend_from_slice(&plane);
    }
    MaskStack::from_bits(width, height, classes, bits)
}

/// Read mask planes from explicit per-class paths (manifest ground truth).
pub fn read_mask_stack_from_paths(paths: &[PathBuf]) -> Result<MaskStack, DataError> {
    let mut width = 0usize;
    let mut height = 0usize;
    let mut bits: Vec<u8> = Vec::new();
    for (class, path) in paths.iter().enumerate() {
        let (w, h, plane) = read_mask_plane(path)?;
        if class == 0 {
            width = w;
            height = h;
        } else if w != width || h != height {
            return Err(DataError::DimensionMismatch {
                path: path.display().to_string(),
                detail: format!("plane is {w}x{h}, class 0 was {width}x{height}"),
            });
        }
        bits.extend_from_slice(&plane);
    }
    MaskStack::from_bits(width, height, paths.len(), bits)
}
