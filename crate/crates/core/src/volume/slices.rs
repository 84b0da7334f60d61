//! Extraction of three adjacent slices from a volume, resized to the
//! network input size and stacked as image channels.

use super::{SliceStack, Volume3D, VolumeError};
use crate::volume::resample::center_aligned_coord;

/// Volume axis perpendicular to the extracted slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    fn index(self) -> usize {
        match self {
            SliceAxis::X => 0,
            SliceAxis::Y => 1,
            SliceAxis::Z => 2,
        }
    }
}

/// A plain 2D raster used for slice resizing and the augmentation ops.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Self {
        Plane { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.w + c] = v;
    }

    /// Bilinear sample at continuous (row, col); zero outside the raster.
    pub fn sample_bilinear(&self, r: f64, c: f64) -> f64 {
        if r <= -1.0 || c <= -1.0 || r >= self.h as f64 || c >= self.w as f64 {
            return 0.0;
        }
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = r - r0;
        let fc = c - c0;
        let r0 = r0 as isize;
        let c0 = c0 as isize;
        let fetch = |row: isize, col: isize| -> f64 {
            if row < 0 || col < 0 || row >= self.h as isize || col >= self.w as isize {
                0.0
            } else {
                f64::from(self.data[row as usize * self.w + col as usize])
            }
        };
        let v00 = fetch(r0, c0);
        let v01 = fetch(r0, c0 + 1);
        let v10 = fetch(r0 + 1, c0);
        let v11 = fetch(r0 + 1, c0 + 1);
        v00 * (1.0 - fr) * (1.0 - fc)
            + v01 * (1.0 - fr) * fc
            + v10 * fr * (1.0 - fc)
            + v11 * fr * fc
    }

    /// Bilinear resize with corner-center alignment (same convention as
    /// volume resampling).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Plane {
        let mut out = Plane::zeros(out_h, out_w);
        for r in 0..out_h {
            let src_r = center_aligned_coord(r, out_h, self.h);
            for c in 0..out_w {
                let src_c = center_aligned_coord(c, out_w, self.w);
                out.set(r, c, self.sample_bilinear(src_r, src_c) as f64 as f32);
            }
        }
        out
    }
}

/// Pulls the plane at position `at` along `axis`. Rows follow the later
/// of the two in-plane axes (z before y before x), so axial slices come
/// out with rows = y / cols = x, coronal with rows = z / cols = x, and
/// sagittal with rows = z / cols = y.
fn plane_at(vol: &Volume3D, axis: SliceAxis, at: usize) -> Plane {
    let d = vol.dims();
    match axis {
        SliceAxis::Z => {
            let mut p = Plane::zeros(d[1], d[0]);
            for r in 0..d[1] {
                for c in 0..d[0] {
                    p.set(r, c, vol.at(c, r, at));
                }
            }
            p
        }
        SliceAxis::Y => {
            let mut p = Plane::zeros(d[2], d[0]);
            for r in 0..d[2] {
                for c in 0..d[0] {
                    p.set(r, c, vol.at(c, at, r));
                }
            }
            p
        }
        SliceAxis::X => {
            let mut p = Plane::zeros(d[2], d[1]);
            for r in 0..d[2] {
                for c in 0..d[1] {
                    p.set(r, c, vol.at(at, c, r));
                }
            }
            p
        }
    }
}

/// Extracts slices `center-1, center, center+1` along `axis`, resizes
/// each to `out_h x out_w`, and stacks them as the three channels.
///
/// `center` must leave one slice of margin on both sides.
pub fn extract_slices(
    vol: &Volume3D,
    axis: SliceAxis,
    center: usize,
    out_h: usize,
    out_w: usize,
) -> Result<SliceStack, VolumeError> {
    if out_h == 0 || out_w == 0 {
        return Err(VolumeError::InvalidDimensions(format!("{out_h}x{out_w}")));
    }
    let len = vol.dims()[axis.index()];
    if center < 1 || center + 1 >= len {
        return Err(VolumeError::IndexOutOfRange { index: center, len });
    }
    let mut stack = SliceStack::zeros(out_h, out_w);
    for (channel, at) in [center - 1, center, center + 1].into_iter().enumerate() {
        let plane = plane_at(vol, axis, at).resize(out_h, out_w);
        for r in 0..out_h {
            for c in 0..out_w {
                stack.set(r, c, channel, plane.at(r, c));
            }
        }
    }
    Ok(stack)
}

pub(crate) fn plane_from_channel(stack: &SliceStack, channel: usize) -> Plane {
    let mut p = Plane::zeros(stack.height(), stack.width());
    for r in 0..stack.height() {
        for c in 0..stack.width() {
            p.set(r, c, stack.at(r, c, channel));
        }
    }
    p
}

pub(crate) fn stack_from_planes(planes: [Plane; 3]) -> SliceStack {
    let h = planes[0].h;
    let w = planes[0].w;
    let mut stack = SliceStack::zeros(h, w);
    for (channel, p) in planes.iter().enumerate() {
        debug_assert_eq!((p.h, p.w), (h, w));
        for r in 0..h {
            for c in 0..w {
                stack.set(r, c, channel, p.at(r, c));
            }
        }
    }
    stack
}

/// Packs a slice stack as a `width x height x 3` volume so it can be
/// persisted through the regular NIfTI writer. The mapping is a pure
/// index permutation, so it is exact.
pub fn slice_stack_to_volume(stack: &SliceStack) -> Volume3D {
    let (h, w) = (stack.height(), stack.width());
    let mut data = vec![0.0f32; h * w * SliceStack::CHANNELS];
    for ch in 0..SliceStack::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                data[x + w * (y + h * ch)] = stack.at(y, x, ch);
            }
        }
    }
    Volume3D::new([w, h, SliceStack::CHANNELS], [1.0; 3], [0.0; 3], data)
        .expect("stack dimensions are valid by construction")
}

/// Inverse of [`slice_stack_to_volume`]; the volume's z extent must be 3.
pub fn slice_stack_from_volume(vol: &Volume3D) -> Result<SliceStack, VolumeError> {
    let [w, h, nz] = vol.dims();
    if nz != SliceStack::CHANNELS {
        return Err(VolumeError::InvalidDimensions(format!(
            "expected 3 slices along z, found {nz}"
        )));
    }
    let mut stack = SliceStack::zeros(h, w);
    for ch in 0..SliceStack::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                stack.set(y, x, ch, vol.at(x, y, ch));
            }
        }
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume() -> Volume3D {
        // Distinct value per voxel so channel identity is checkable.
        let dims = [4, 5, 6];
        let data: Vec<f32> = (0..dims[0] * dims[1] * dims[2]).map(|i| i as f32).collect();
        Volume3D::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    #[test]
    fn extracts_three_adjacent_slices_in_channel_order() {
        let vol = ramp_volume();
        // Keep the native plane size so no interpolation happens.
        let stack = extract_slices(&vol, SliceAxis::Z, 2, 5, 4).unwrap();
        assert_eq!(stack.height(), 5);
        assert_eq!(stack.width(), 4);
        for (channel, z) in [1usize, 2, 3].into_iter().enumerate() {
            for r in 0..5 {
                for c in 0..4 {
                    assert_eq!(stack.at(r, c, channel), vol.at(c, r, z));
                }
            }
        }
    }

    #[test]
    fn border_centers_are_rejected() {
        let vol = ramp_volume();
        assert!(matches!(
            extract_slices(&vol, SliceAxis::Z, 0, 5, 4),
            Err(VolumeError::IndexOutOfRange { index: 0, len: 6 })
        ));
        assert!(matches!(
            extract_slices(&vol, SliceAxis::Z, 5, 5, 4),
            Err(VolumeError::IndexOutOfRange { index: 5, len: 6 })
        ));
    }

    #[test]
    fn resize_produces_requested_shape() {
        let vol = ramp_volume();
        let stack = extract_slices(&vol, SliceAxis::Y, 2, 10, 9).unwrap();
        assert_eq!((stack.height(), stack.width()), (10, 9));
    }

    #[test]
    fn axis_conventions_match_radiological_planes() {
        let vol = ramp_volume();
        // Coronal: rows = z, cols = x.
        let stack = extract_slices(&vol, SliceAxis::Y, 2, 6, 4).unwrap();
        assert_eq!(stack.at(3, 1, 1), vol.at(1, 2, 3));
        // Sagittal: rows = z, cols = y.
        let stack = extract_slices(&vol, SliceAxis::X, 2, 6, 5).unwrap();
        assert_eq!(stack.at(3, 1, 1), vol.at(2, 1, 3));
    }

    #[test]
    fn stack_volume_conversion_is_a_bit_exact_roundtrip() {
        let mut stack = SliceStack::zeros(5, 4);
        for r in 0..5 {
            for c in 0..4 {
                for ch in 0..3 {
                    stack.set(r, c, ch, (r * 100 + c * 10 + ch) as f32 * 0.125);
                }
            }
        }
        let vol = slice_stack_to_volume(&stack);
        assert_eq!(vol.dims(), [4, 5, 3]);
        let back = slice_stack_from_volume(&vol).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn non_three_channel_volume_is_rejected() {
        let vol = Volume3D::filled([4, 4, 4], [1.0; 3], [0.0; 3], 0.0).unwrap();
        assert!(slice_stack_from_volume(&vol).is_err());
    }
}
