//! Image volume data model.
//!
//! An [`ImageVolume`] is a dense scalar intensity grid (2D or 3D) with voxel
//! spacing, an optional integer label map, and an optional boolean
//! foreground mask, all on the same grid. Intensities are normalized to
//! `[0, 1]`.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    /// Scalar intensities in `[0, 1]`, row-major.
    pub data: ArrayD<f32>,
    /// Physical voxel size per axis (mm/voxel), strictly positive.
    pub spacing: Vec<f64>,
    /// Optional integer label map on the same grid; 0 is background.
    pub labels: Option<ArrayD<i32>>,
    /// Optional boolean foreground mask on the same grid.
    pub foreground: Option<ArrayD<bool>>,
}

impl ImageVolume {
    pub fn new(data: ArrayD<f32>, spacing: Vec<f64>) -> Result<Self> {
        let vol = ImageVolume {
            data,
            spacing,
            labels: None,
            foreground: None,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn with_labels(mut self, labels: ArrayD<i32>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_foreground(mut self, fg: ArrayD<bool>) -> Result<Self> {
        self.foreground = Some(fg);
        self.validate()?;
        Ok(self)
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }

    /// Check all type invariants: shape agreement, finite `[0, 1]`
    /// intensities, positive spacing, supported dimensionality.
    pub fn validate(&self) -> Result<()> {
        let d = self.data.ndim();
        if d != 2 && d != 3 {
            return Err(Error::InvalidInput(format!(
                "volume must be 2D or 3D, got {d}D"
            )));
        }
        if self.spacing.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "spacing has {} entries for a {d}D volume",
                self.spacing.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "spacing must be strictly positive and finite, got {:?}",
                self.spacing
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.shape() != self.data.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "labels shape {:?} != data shape {:?}",
                    labels.shape(),
                    self.data.shape()
                )));
            }
        }
        if let Some(fg) = &self.foreground {
            if fg.shape() != self.data.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "foreground shape {:?} != data shape {:?}",
                    fg.shape(),
                    self.data.shape()
                )));
            }
        }
        for &x in self.data.iter() {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(Error::InvalidInput(format!(
                    "intensity {x} outside [0, 1] or non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Rescale intensities to `[0, 1]` in place (no-op for a constant image,
    /// which maps to all zeros if negative-valued, else is clamped).
    pub fn normalize(data: &mut ArrayD<f32>) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in data.iter() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let range = hi - lo;
        if range > 0.0 {
            data.mapv_inplace(|x| ((x - lo) / range).clamp(0.0, 1.0));
        } else {
            data.mapv_inplace(|x| x.clamp(0.0, 1.0));
        }
    }
}

/// Result of foreground extraction; `empty` flags an all-background image
/// (a warning condition, not an error).
#[derive(Debug, Clone)]
pub struct MaskResult {
    pub mask: ArrayD<bool>,
    pub empty: bool,
}

/// Extract a foreground mask: threshold at `threshold_frac` of the maximum
/// intensity, morphologically close with radius 1, and keep the largest
/// connected component (face connectivity).
pub fn foreground_mask(vol: &ImageVolume, threshold_frac: f64) -> MaskResult {
    let max = vol.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let thr = (threshold_frac as f32) * max;
    let raw: Vec<bool> = vol.data.iter().map(|&x| x > thr).collect();
    let shape = vol.shape().to_vec();
    let closed = erode(&dilate(&raw, &shape), &shape);
    let kept = largest_component(&closed, &shape);
    let empty = !kept.iter().any(|&b| b);
    MaskResult {
        mask: ArrayD::from_shape_vec(IxDyn(&shape), kept).expect("shape preserved"),
        empty,
    }
}

fn neighbor_offsets(shape: &[usize]) -> Vec<Vec<isize>> {
    // face neighbors: +/-1 along each axis
    let d = shape.len();
    let mut offs = Vec::with_capacity(2 * d);
    for ax in 0..d {
        for s in [-1isize, 1] {
            let mut o = vec![0isize; d];
            o[ax] = s;
            offs.push(o);
        }
    }
    offs
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn unravel(mut flat: usize, strides: &[usize]) -> Vec<usize> {
    strides
        .iter()
        .map(|&s| {
            let c = flat / s;
            flat %= s;
            c
        })
        .collect()
}

fn morph(mask: &[bool], shape: &[usize], dilate: bool) -> Vec<bool> {
    let strides = strides_of(shape);
    let offs = neighbor_offsets(shape);
    let mut out = vec![false; mask.len()];
    for flat in 0..mask.len() {
        let coords = unravel(flat, &strides);
        // dilation: OR over the neighborhood (outside = background);
        // erosion: AND with outside treated as foreground, so closing an
        // all-foreground image leaves it unchanged
        let mut acc = mask[flat];
        for off in &offs {
            let mut ok = true;
            let mut nflat = 0usize;
            for (ax, (&c, &o)) in coords.iter().zip(off.iter()).enumerate() {
                let nc = c as isize + o;
                if nc < 0 || nc >= shape[ax] as isize {
                    ok = false;
                    break;
                }
                nflat += nc as usize * strides[ax];
            }
            let v = if ok { mask[nflat] } else { !dilate };
            if dilate {
                acc = acc || v;
            } else {
                acc = acc && v;
            }
        }
        out[flat] = acc;
    }
    out
}

fn dilate(mask: &[bool], shape: &[usize]) -> Vec<bool> {
    morph(mask, shape, true)
}

fn erode(mask: &[bool], shape: &[usize]) -> Vec<bool> {
    morph(mask, shape, false)
}

fn largest_component(mask: &[bool], shape: &[usize]) -> Vec<bool> {
    let strides = strides_of(shape);
    let offs = neighbor_offsets(shape);
    let mut comp = vec![u32::MAX; mask.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        comp[start] = id;
        stack.push(start);
        while let Some(flat) = stack.pop() {
            size += 1;
            let coords = unravel(flat, &strides);
            for off in &offs {
                let mut ok = true;
                let mut nflat = 0usize;
                for (ax, (&c, &o)) in coords.iter().zip(off.iter()).enumerate() {
                    let nc = c as isize + o;
                    if nc < 0 || nc >= shape[ax] as isize {
                        ok = false;
                        break;
                    }
                    nflat += nc as usize * strides[ax];
                }
                if ok && mask[nflat] && comp[nflat] == u32::MAX {
                    comp[nflat] = id;
                    stack.push(nflat);
                }
            }
        }
        sizes.push(size);
    }
    if sizes.is_empty() {
        return vec![false; mask.len()];
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by_key(|(i, &s)| (s, usize::MAX - i))
        .map(|(i, _)| i as u32)
        .unwrap();
    comp.iter().map(|&c| c == best).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn vol_from(data: Vec<f32>, shape: &[usize]) -> ImageVolume {
        ImageVolume::new(
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
            vec![1.0; shape.len()],
        )
        .unwrap()
    }

    #[test]
    fn uniform_zero_image_gives_empty_mask() {
        let vol = vol_from(vec![0.0; 64 * 64], &[64, 64]);
        let res = foreground_mask(&vol, 0.05);
        assert!(res.empty);
        assert!(res.mask.iter().all(|&b| !b));
    }

    #[test]
    fn uniform_one_image_gives_full_mask() {
        let vol = vol_from(vec![1.0; 32 * 32], &[32, 32]);
        let res = foreground_mask(&vol, 0.05);
        assert!(!res.empty);
        assert!(res.mask.iter().all(|&b| b));
    }

    #[test]
    fn largest_component_drops_specks() {
        // a 10x10 block plus a single distant speck
        let mut data = vec![0.0f32; 64 * 64];
        for i in 20..30 {
            for j in 20..30 {
                data[i * 64 + j] = 1.0;
            }
        }
        data[5 * 64 + 5] = 1.0;
        let vol = vol_from(data, &[64, 64]);
        let res = foreground_mask(&vol, 0.05);
        assert!(!res.mask[[5, 5]]);
        assert!(res.mask[[25, 25]]);
    }

    #[test]
    fn validation_rejects_mismatched_labels() {
        let data = ArrayD::from_shape_vec(IxDyn(&[8, 8]), vec![0.5; 64]).unwrap();
        let labels = ArrayD::from_shape_vec(IxDyn(&[8, 7]), vec![0i32; 56]).unwrap();
        let err = ImageVolume::new(data, vec![1.0, 1.0])
            .unwrap()
            .with_labels(labels)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn validation_rejects_out_of_range_intensity() {
        let data = ArrayD::from_shape_vec(IxDyn(&[4, 4]), vec![1.5; 16]).unwrap();
        assert!(ImageVolume::new(data, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn validation_rejects_nonpositive_spacing() {
        let data = ArrayD::from_shape_vec(IxDyn(&[4, 4]), vec![0.5; 16]).unwrap();
        assert!(ImageVolume::new(data, vec![1.0, 0.0]).is_err());
    }
}
