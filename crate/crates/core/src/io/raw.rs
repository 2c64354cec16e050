//! Raw dense array container.
//!
//! Layout: a structured-text header, a `---` terminator line, then the
//! contiguous little-endian payload in row-major order.
//!
//! ```text
//! rawtensor v1
//! shape 96 96
//! dtype f32
//! spacing 1.0 1.0
//! role image
//! ---
//! <payload>
//! ```
//!
//! `dtype` is `f32` or `i16`; `spacing` has one entry per *spatial* axis
//! (vector fields carry a trailing component axis not covered by spacing).

use crate::error::{Error, Result};
use crate::io::Role;
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "rawtensor v1";
const TERMINATOR: &[u8] = b"---\n";

struct Header {
    shape: Vec<usize>,
    dtype: String,
    spacing: Vec<f64>,
    role: Role,
}

fn render_header(h: &Header) -> String {
    let shape = h
        .shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let spacing = h
        .spacing
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{MAGIC}\nshape {shape}\ndtype {}\nspacing {spacing}\nrole {}\n---\n",
        h.dtype,
        h.role.as_str()
    )
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected `{MAGIC}`, found `{magic}`"),
        ));
    }
    let mut shape = None;
    let mut dtype = None;
    let mut spacing = None;
    let mut role = None;
    for line in lines {
        let mut it = line.splitn(2, ' ');
        let key = it.next().unwrap_or_default();
        let value = it.next().unwrap_or_default();
        match key {
            "shape" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(|t| t.parse()).collect();
                shape = Some(parsed.map_err(|e| Error::format("shape", e.to_string()))?);
            }
            "dtype" => {
                if value != "f32" && value != "i16" {
                    return Err(Error::format(
                        "dtype",
                        format!("unsupported dtype `{value}`"),
                    ));
                }
                dtype = Some(value.to_string());
            }
            "spacing" => {
                let parsed: std::result::Result<Vec<f64>, _> =
                    value.split_whitespace().map(|t| t.parse()).collect();
                spacing = Some(parsed.map_err(|e| Error::format("spacing", e.to_string()))?);
            }
            "role" => role = Some(Role::parse(value)?),
            other => {
                return Err(Error::format(
                    other.to_string(),
                    "unknown header key".to_string(),
                ));
            }
        }
    }
    Ok(Header {
        shape: shape.ok_or_else(|| Error::format("shape", "missing"))?,
        dtype: dtype.ok_or_else(|| Error::format("dtype", "missing"))?,
        spacing: spacing.ok_or_else(|| Error::format("spacing", "missing"))?,
        role: role.ok_or_else(|| Error::format("role", "missing"))?,
    })
}

fn split_file(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let pos = bytes
        .windows(TERMINATOR.len())
        .position(|w| w == TERMINATOR)
        .ok_or_else(|| Error::format("header", "missing `---` terminator"))?;
    let header = std::str::from_utf8(&bytes[..pos])
        .map_err(|e| Error::format("header", e.to_string()))?;
    Ok((header, &bytes[pos + TERMINATOR.len()..]))
}

fn check_payload(h: &Header, payload_len: usize, elem_size: usize) -> Result<()> {
    let expect: usize = h.shape.iter().product::<usize>() * elem_size;
    if payload_len != expect {
        return Err(Error::format(
            "shape",
            format!(
                "payload has {payload_len} bytes but shape {:?} ({} dtype) requires {expect}",
                h.shape, h.dtype
            ),
        ));
    }
    Ok(())
}

pub fn write_f32(path: &Path, data: &ArrayD<f32>, spacing: &[f64], role: Role) -> Result<()> {
    let header = Header {
        shape: data.shape().to_vec(),
        dtype: "f32".into(),
        spacing: spacing.to_vec(),
        role,
    };
    let mut file = fs::File::create(path)?;
    file.write_all(render_header(&header).as_bytes())?;
    let contiguous;
    let view = match data.as_slice() {
        Some(s) => s,
        None => {
            contiguous = data.iter().copied().collect::<Vec<f32>>();
            &contiguous
        }
    };
    let mut buf = Vec::with_capacity(view.len() * 4);
    for &x in view {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn write_i16(path: &Path, data: &ArrayD<i32>, spacing: &[f64], role: Role) -> Result<()> {
    for &x in data.iter() {
        if x < i32::from(i16::MIN) || x > i32::from(i16::MAX) {
            return Err(Error::format("dtype", format!("value {x} overflows i16")));
        }
    }
    let header = Header {
        shape: data.shape().to_vec(),
        dtype: "i16".into(),
        spacing: spacing.to_vec(),
        role,
    };
    let mut file = fs::File::create(path)?;
    file.write_all(render_header(&header).as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 2);
    for &x in data.iter() {
        buf.extend_from_slice(&(x as i16).to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<(ArrayD<f32>, Vec<f64>, Role)> {
    let bytes = fs::read(path)?;
    let (header_text, payload) = split_file(&bytes)?;
    let h = parse_header(header_text)?;
    if h.dtype != "f32" {
        return Err(Error::format(
            "dtype",
            format!("expected f32, found {}", h.dtype),
        ));
    }
    check_payload(&h, payload.len(), 4)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&h.shape), values)
        .map_err(|e| Error::format("shape", e.to_string()))?;
    Ok((arr, h.spacing, h.role))
}

pub fn read_i32(path: &Path) -> Result<(ArrayD<i32>, Vec<f64>, Role)> {
    let bytes = fs::read(path)?;
    let (header_text, payload) = split_file(&bytes)?;
    let h = parse_header(header_text)?;
    if h.dtype != "i16" {
        return Err(Error::format(
            "dtype",
            format!("expected i16, found {}", h.dtype),
        ));
    }
    check_payload(&h, payload.len(), 2)?;
    let values: Vec<i32> = payload
        .chunks_exact(2)
        .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&h.shape), values)
        .map_err(|e| Error::format("shape", e.to_string()))?;
    Ok((arr, h.spacing, h.role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn f32_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rvol");
        let data =
            ArrayD::from_shape_vec(IxDyn(&[4, 3]), (0..12).map(|i| i as f32 * 0.1).collect())
                .unwrap();
        write_f32(&path, &data, &[1.0, 2.0], Role::Image).unwrap();
        let (back, spacing, role) = read_f32(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(spacing, vec![1.0, 2.0]);
        assert_eq!(role, Role::Image);
    }

    #[test]
    fn truncated_payload_names_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.rvol");
        // header says 64x64 but payload holds 64x63 floats
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            b"rawtensor v1\nshape 64 64\ndtype f32\nspacing 1.0 1.0\nrole image\n---\n",
        );
        bytes.extend(std::iter::repeat(0u8).take(64 * 63 * 4));
        fs::write(&path, &bytes).unwrap();
        let err = read_f32(&path).unwrap_err();
        match err {
            Error::Format { field, .. } => assert_eq!(field, "shape"),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad2.rvol");
        fs::write(
            &path,
            b"rawtensor v1\nshape 1\ndtype f32\nspacing 1.0\nrole image\nbogus 3\n---\n\x00\x00\x00\x00",
        )
        .unwrap();
        assert!(read_f32(&path).is_err());
    }

    #[test]
    fn i16_overflow_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rvol");
        let data = ArrayD::from_shape_vec(IxDyn(&[1]), vec![70_000i32]).unwrap();
        assert!(write_i16(&path, &data, &[1.0], Role::Labels).is_err());
    }
}
