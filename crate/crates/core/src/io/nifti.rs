//! Minimal NIfTI-1 reader/writer (little-endian, single file `.nii`).
//!
//! The writer emits a 348-byte header with spacing on the sform affine
//! diagonal (`sform_code = 1`), a zeroed extension flag, and the payload at
//! offset 352. The in-memory row-major last axis maps to the NIfTI `x`
//! axis (fastest varying on disk), so buffers are written as-is and the
//! dim/pixdim entries are reversed relative to the array shape.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::Write;
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn build_header(shape: &[usize], spacing: &[f64], datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    if shape.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "NIfTI writer supports 3D volumes, got {}D",
            shape.len()
        )));
    }
    let mut h = vec![0u8; HEADER_SIZE + 4]; // header + zero extension flag
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[39] = b'r'; // regular
    // dim: [ndim, x, y, z, ...] with x = fastest-varying = our last axis
    put_i16(&mut h, 40, 3);
    for (i, &d) in shape.iter().rev().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::format("shape", format!("axis size {d} overflows")));
        }
        put_i16(&mut h, 40 + 2 * (i + 1), d as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0); // pixdim[0] (qfac)
    for (i, &s) in spacing.iter().rev().enumerate() {
        put_f32(&mut h, 76 + 4 * (i + 1), s as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 252, 0); // qform_code
    put_i16(&mut h, 254, 1); // sform_code: scanner-aligned
    // srow: spacing on the diagonal, zero offset
    put_f32(&mut h, 280, spacing[2] as f32);
    put_f32(&mut h, 296 + 4, spacing[1] as f32);
    put_f32(&mut h, 312 + 8, spacing[0] as f32);
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

pub fn write_f32(path: &Path, data: &ArrayD<f32>, spacing: &[f64]) -> Result<()> {
    let header = build_header(data.shape(), spacing, DT_FLOAT32, 32)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
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

pub fn write_i16(path: &Path, data: &ArrayD<i32>, spacing: &[f64]) -> Result<()> {
    for &x in data.iter() {
        if x < i32::from(i16::MIN) || x > i32::from(i16::MAX) {
            return Err(Error::format("datatype", format!("value {x} overflows i16")));
        }
    }
    let header = build_header(data.shape(), spacing, DT_INT16, 16)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    let mut buf = Vec::with_capacity(data.len() * 2);
    for &x in data.iter() {
        buf.extend_from_slice(&(x as i16).to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

struct Parsed {
    shape: Vec<usize>,     // row-major (our order)
    spacing: Vec<f64>,     // matching shape order
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn parse_header(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format("sizeof_hdr", "file shorter than NIfTI header"));
    }
    if get_i32(bytes, 0) != HEADER_SIZE as i32 {
        return Err(Error::format(
            "sizeof_hdr",
            "not a little-endian NIfTI-1 file",
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format("magic", "missing NIfTI-1 magic"));
    }
    let ndim = get_i16(bytes, 40);
    if ndim != 3 {
        return Err(Error::format("dim", format!("expected 3D, found dim[0]={ndim}")));
    }
    let mut shape_xyz = [0usize; 3];
    let mut spacing_xyz = [0f64; 3];
    for i in 0..3 {
        let d = get_i16(bytes, 40 + 2 * (i + 1));
        if d <= 0 {
            return Err(Error::format("dim", format!("non-positive axis size {d}")));
        }
        shape_xyz[i] = d as usize;
        spacing_xyz[i] = f64::from(get_f32(bytes, 76 + 4 * (i + 1)));
    }
    Ok(Parsed {
        shape: shape_xyz.iter().rev().copied().collect(),
        spacing: spacing_xyz.iter().rev().copied().collect(),
        datatype: get_i16(bytes, 70),
        vox_offset: get_f32(bytes, 108) as usize,
        scl_slope: get_f32(bytes, 112),
        scl_inter: get_f32(bytes, 116),
    })
}

fn payload<'a>(bytes: &'a [u8], p: &Parsed, elem: usize) -> Result<&'a [u8]> {
    let n: usize = p.shape.iter().product();
    let need = p.vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::format(
            "shape",
            format!("payload truncated: need {need} bytes, have {}", bytes.len()),
        ));
    }
    Ok(&bytes[p.vox_offset..p.vox_offset + n * elem])
}

pub fn read_f32(path: &Path) -> Result<(ArrayD<f32>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let p = parse_header(&bytes)?;
    let n: usize = p.shape.iter().product();
    let mut values: Vec<f32> = match p.datatype {
        DT_FLOAT32 => payload(&bytes, &p, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DT_FLOAT64 => payload(&bytes, &p, 8)?
            .chunks_exact(8)
            .map(|c| {
                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
            })
            .collect(),
        DT_UINT8 => payload(&bytes, &p, 1)?.iter().map(|&b| f32::from(b)).collect(),
        DT_INT16 => payload(&bytes, &p, 2)?
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DT_INT32 => payload(&bytes, &p, 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
        other => {
            return Err(Error::format(
                "datatype",
                format!("unsupported datatype code {other}"),
            ));
        }
    };
    debug_assert_eq!(values.len(), n);
    if p.scl_slope != 0.0 && (p.scl_slope != 1.0 || p.scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * p.scl_slope + p.scl_inter;
        }
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&p.shape), values)
        .map_err(|e| Error::format("shape", e.to_string()))?;
    Ok((arr, p.spacing))
}

pub fn read_i32(path: &Path) -> Result<(ArrayD<i32>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let p = parse_header(&bytes)?;
    let values: Vec<i32> = match p.datatype {
        DT_INT16 => payload(&bytes, &p, 2)?
            .chunks_exact(2)
            .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DT_UINT8 => payload(&bytes, &p, 1)?.iter().map(|&b| i32::from(b)).collect(),
        DT_INT32 => payload(&bytes, &p, 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        other => {
            return Err(Error::format(
                "datatype",
                format!("unsupported integer datatype code {other}"),
            ));
        }
    };
    let arr = ArrayD::from_shape_vec(IxDyn(&p.shape), values)
        .map_err(|e| Error::format("shape", e.to_string()))?;
    Ok((arr, p.spacing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn f32_round_trip_3d() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let data = ArrayD::from_shape_vec(
            IxDyn(&[4, 5, 6]),
            (0..120).map(|i| i as f32 / 120.0).collect(),
        )
        .unwrap();
        write_f32(&path, &data, &[0.5, 0.75, 0.875]).unwrap();
        let (back, spacing) = read_f32(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(spacing, vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn affine_diagonal_encodes_spacing() {
        // independent byte-level check of the sform rows
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let data = ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), vec![0.0f32; 8]).unwrap();
        write_f32(&path, &data, &[1.5, 2.5, 3.5]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let srow_x = get_f32(&bytes, 280);
        let srow_y = get_f32(&bytes, 300);
        let srow_z = get_f32(&bytes, 320);
        // x = our last axis
        assert_eq!(srow_x, 3.5);
        assert_eq!(srow_y, 2.5);
        assert_eq!(srow_z, 1.5);
        // off-diagonals of srow_x are zero
        assert_eq!(get_f32(&bytes, 284), 0.0);
        assert_eq!(get_f32(&bytes, 288), 0.0);
        assert_eq!(get_i16(&bytes, 254), 1); // sform_code
    }

    #[test]
    fn rejects_2d_volume() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let data = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0f32; 4]).unwrap();
        assert!(write_f32(&path, &data, &[1.0, 1.0]).is_err());
    }
}
