//! Volume and mask containers plus geometric primitives.
//!
//! Voxel data is stored in NIfTI order: x fastest, then y, then z, so the
//! flat index of `(x, y, z)` is `x + nx * (y + ny * z)`. Shapes and spacings
//! are `[x, y, z]` triples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation kind for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    /// Trilinear interpolation with clamp-to-edge behaviour.
    Trilinear,
    /// Nearest neighbour; preserves binary values exactly.
    Nearest,
}

/// Orientation metadata carried through from NIfTI headers.
///
/// The pipeline never reorients volumes; these fields are echoed verbatim
/// when a volume read from disk is written back.
#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
        }
    }
}

/// Axis-aligned half-open voxel box: `lower[a] <= v < upper[a]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lower: [usize; 3],
    pub upper: [usize; 3],
}

impl BoundingBox {
    pub fn new(lower: [usize; 3], upper: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lower[a] >= upper[a] {
                return Err(Error::Argument(format!(
                    "bounding box empty on axis {a}: {} >= {}",
                    lower[a], upper[a]
                )));
            }
        }
        Ok(BoundingBox { lower, upper })
    }

    /// Extent in voxels along each axis.
    pub fn shape(&self) -> [usize; 3] {
        [
            self.upper[0] - self.lower[0],
            self.upper[1] - self.lower[1],
            self.upper[2] - self.lower[2],
        ]
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| v[a] >= self.lower[a] && v[a] < self.upper[a])
    }

    pub fn num_voxels(&self) -> usize {
        let s = self.shape();
        s[0] * s[1] * s[2]
    }
}

/// Scalar 3D volume with spacing and origin in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<f32>,
    orient: Orientation,
}

/// Binary 3D mask; voxel values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<u8>,
}

fn check_shape_spacing(shape: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Argument(format!("zero-sized shape {shape:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Argument(format!("non-positive spacing {spacing:?}")));
    }
    let expect = shape[0] * shape[1] * shape[2];
    if expect != len {
        return Err(Error::Shape(format!(
            "data length {len} does not match shape {shape:?} ({expect} voxels)"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_shape_spacing(shape, spacing, data.len())?;
        Ok(Volume {
            shape,
            spacing,
            origin: [0.0; 3],
            data,
            orient: Orientation::default(),
        })
    }

    /// All-zero volume of the given geometry.
    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        Volume::new(shape, spacing, vec![0.0; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn set_origin(&mut self, origin: [f32; 3]) {
        self.origin = origin;
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orient
    }

    pub fn set_orientation(&mut self, o: Orientation) {
        self.orient = o;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Flat index of voxel `(x, y, z)`.
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    /// Physical volume of one voxel in cubic millimetres.
    pub fn voxel_volume_mm3(&self) -> f64 {
        voxel_volume_mm3(self.spacing)
    }

    /// Extract the sub-volume covered by `bb`. Spacing is kept; the origin
    /// shifts by the cropped offset.
    pub fn crop(&self, bb: &BoundingBox) -> Result<Volume> {
        for a in 0..3 {
            if bb.upper[a] > self.shape[a] {
                return Err(Error::Argument(format!(
                    "bounding box {bb:?} exceeds shape {:?}",
                    self.shape
                )));
            }
        }
        let s = bb.shape();
        let mut data = Vec::with_capacity(s[0] * s[1] * s[2]);
        for z in bb.lower[2]..bb.upper[2] {
            for y in bb.lower[1]..bb.upper[1] {
                let row = self.idx(bb.lower[0], y, z);
                data.extend_from_slice(&self.data[row..row + s[0]]);
            }
        }
        let mut out = Volume::new(s, self.spacing, data)?;
        out.origin = [
            self.origin[0] + bb.lower[0] as f32 * self.spacing[0],
            self.origin[1] + bb.lower[1] as f32 * self.spacing[1],
            self.origin[2] + bb.lower[2] as f32 * self.spacing[2],
        ];
        out.orient = self.orient.clone();
        Ok(out)
    }

    /// Place this volume into a zero-filled volume of `full_shape` at the
    /// position given by `bb`. Inverse of [`Volume::crop`] up to the zeroed
    /// outside region.
    pub fn embed(&self, full_shape: [usize; 3], bb: &BoundingBox) -> Result<Volume> {
        if bb.shape() != self.shape {
            return Err(Error::Shape(format!(
                "bounding box shape {:?} does not match volume shape {:?}",
                bb.shape(),
                self.shape
            )));
        }
        for a in 0..3 {
            if bb.upper[a] > full_shape[a] {
                return Err(Error::Argument(format!(
                    "bounding box {bb:?} exceeds target shape {full_shape:?}"
                )));
            }
        }
        let mut out = Volume::zeros(full_shape, self.spacing)?;
        for z in 0..self.shape[2] {
            for y in 0..self.shape[1] {
                let src = self.idx(0, y, z);
                let dst = out.idx(bb.lower[0], bb.lower[1] + y, bb.lower[2] + z);
                out.data[dst..dst + self.shape[0]]
                    .copy_from_slice(&self.data[src..src + self.shape[0]]);
            }
        }
        Ok(out)
    }
}

impl Mask {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        check_shape_spacing(shape, spacing, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            shape,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        Mask::new(shape, spacing, vec![0; n])
    }

    /// Threshold a volume at 0.5; used to read masks stored as images.
    pub fn from_volume(v: &Volume) -> Self {
        let data = v.data().iter().map(|&x| u8::from(x > 0.5)).collect();
        let mut m = Mask {
            shape: v.shape,
            spacing: v.spacing,
            origin: v.origin,
            data,
        };
        m.origin = v.origin;
        m
    }

    /// View of the mask as a float volume (0.0 / 1.0), e.g. for writing.
    pub fn to_volume(&self) -> Volume {
        let data = self.data.iter().map(|&v| v as f32).collect();
        let mut out = Volume::new(self.shape, self.spacing, data).expect("mask is valid");
        out.origin = self.origin;
        out
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn set_origin(&mut self, origin: [f32; 3]) {
        self.origin = origin;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        debug_assert!(v <= 1);
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        voxel_volume_mm3(self.spacing)
    }

    /// Total foreground volume in cubic millimetres.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.voxel_volume_mm3()
    }

    pub fn crop(&self, bb: &BoundingBox) -> Result<Mask> {
        let v = self.to_volume().crop(bb)?;
        let mut m = Mask::from_volume(&v);
        m.origin = v.origin;
        Ok(m)
    }

    pub fn embed(&self, full_shape: [usize; 3], bb: &BoundingBox) -> Result<Mask> {
        let v = self.to_volume().embed(full_shape, bb)?;
        Ok(Mask::from_volume(&v))
    }
}

/// Physical volume of one voxel in cubic millimetres.
pub fn voxel_volume_mm3(spacing: [f32; 3]) -> f64 {
    spacing[0] as f64 * spacing[1] as f64 * spacing[2] as f64
}

/// Tightest bounding box of voxels with intensity strictly above `threshold`,
/// plus the cropped volume. A volume with no voxel above threshold is
/// returned unchanged with its full-extent box.
pub fn crop_to_foreground(v: &Volume, threshold: f32) -> (Volume, BoundingBox) {
    let [nx, ny, nz] = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            let row = v.idx(0, y, z);
            for x in 0..nx {
                if v.data()[row + x] > threshold {
                    any = true;
                    lo[0] = lo[0].min(x);
                    lo[1] = lo[1].min(y);
                    lo[2] = lo[2].min(z);
                    hi[0] = hi[0].max(x);
                    hi[1] = hi[1].max(y);
                    hi[2] = hi[2].max(z);
                }
            }
        }
    }
    let bb = if any {
        BoundingBox {
            lower: lo,
            upper: [hi[0] + 1, hi[1] + 1, hi[2] + 1],
        }
    } else {
        BoundingBox {
            lower: [0, 0, 0],
            upper: v.shape(),
        }
    };
    let cropped = v.crop(&bb).expect("box is within the volume");
    (cropped, bb)
}

/// Output shape when resampling `shape` from `spacing` to `target`:
/// `round(n * s / t)` per axis, at least 1.
pub fn resampled_shape(shape: [usize; 3], spacing: [f32; 3], target: [f32; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (shape[a] as f64 * spacing[a] as f64 / target[a] as f64).round() as usize;
        out[a] = n.max(1);
    }
    out
}

/// Resample a volume to a new isotropic or anisotropic spacing.
///
/// Sample positions map through index space (`src = dst * target / spacing`),
/// so grid points shared by the two lattices keep their values exactly.
/// Out-of-range samples clamp to the nearest edge voxel.
pub fn resample(v: &Volume, target: [f32; 3], interp: Interp) -> Result<Volume> {
    if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::Argument(format!("non-positive target spacing {target:?}")));
    }
    let out_shape = resampled_shape(v.shape(), v.spacing(), target);
    let mut out = resample_to_shape(v, out_shape, interp)?;
    out.spacing = target;
    Ok(out)
}

/// Resample to an explicit output shape; the per-axis scale factor is
/// `in_n / out_n` in index space. Used to undo a resample exactly.
pub fn resample_to_shape(v: &Volume, out_shape: [usize; 3], interp: Interp) -> Result<Volume> {
    if out_shape.iter().any(|&n| n == 0) {
        return Err(Error::Argument("zero-sized output shape".into()));
    }
    let [nx, ny, nz] = v.shape();
    let [ox, oy, oz] = out_shape;
    let scale = [
        nx as f64 / ox as f64,
        ny as f64 / oy as f64,
        nz as f64 / oz as f64,
    ];
    let mut data = vec![0f32; ox * oy * oz];
    let src = v.data();
    let mut write = 0usize;
    for z in 0..oz {
        let sz = z as f64 * scale[2];
        for y in 0..oy {
            let sy = y as f64 * scale[1];
            for x in 0..ox {
                let sx = x as f64 * scale[0];
                data[write] = match interp {
                    Interp::Nearest => {
                        let ix = (sx.round() as isize).clamp(0, nx as isize - 1) as usize;
                        let iy = (sy.round() as isize).clamp(0, ny as isize - 1) as usize;
                        let iz = (sz.round() as isize).clamp(0, nz as isize - 1) as usize;
                        src[v.idx(ix, iy, iz)]
                    }
                    Interp::Trilinear => trilinear(v, src, sx, sy, sz),
                };
                write += 1;
            }
        }
    }
    let mut out = Volume::new(out_shape, v.spacing(), data)?;
    out.origin = v.origin;
    out.orient = v.orient.clone();
    Ok(out)
}

fn trilinear(v: &Volume, src: &[f32], sx: f64, sy: f64, sz: f64) -> f32 {
    let [nx, ny, nz] = v.shape();
    let clampf = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    let px = clampf(sx, nx);
    let py = clampf(sy, ny);
    let pz = clampf(sz, nz);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let z0 = pz.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let fz = pz - z0 as f64;
    let at = |x: usize, y: usize, z: usize| src[v.idx(x, y, z)] as f64;
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

/// Resample a binary mask with nearest-neighbour interpolation.
pub fn resample_mask(m: &Mask, target: [f32; 3], _interp: Interp) -> Result<Mask> {
    let v = m.to_volume();
    let out = resample(&v, target, Interp::Nearest)?;
    let mut rm = Mask::from_volume(&out);
    rm.spacing = out.spacing;
    rm.origin = out.origin;
    Ok(rm)
}

/// Nearest-neighbour mask resample to an explicit shape.
pub fn resample_mask_to_shape(m: &Mask, out_shape: [usize; 3]) -> Result<Mask> {
    let v = m.to_volume();
    let out = resample_to_shape(&v, out_shape, Interp::Nearest)?;
    let mut rm = Mask::from_volume(&out);
    rm.spacing = out.spacing;
    rm.origin = out.origin;
    Ok(rm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3], spacing: [f32; 3]) -> Volume {
        let n = shape[0] * shape[1] * shape[2];
        let data = (0..n).map(|i| i as f32).collect();
        Volume::new(shape, spacing, data).unwrap()
    }

    #[test]
    fn layout_is_x_fastest() {
        let v = ramp([3, 4, 5], [1.0; 3]);
        assert_eq!(v.idx(1, 0, 0), 1);
        assert_eq!(v.idx(0, 1, 0), 3);
        assert_eq!(v.idx(0, 0, 1), 12);
        assert_eq!(v.get(2, 3, 4), (2 + 3 * 3 + 12 * 4) as f32);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, -1.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Mask::new([2, 1, 1], [1.0; 3], vec![0, 2]).is_err());
    }

    #[test]
    fn voxel_volume_example() {
        let v = voxel_volume_mm3([0.9375, 0.9375, 1.2]);
        assert!((v - 1.0546875).abs() < 1e-6, "{v}");
    }

    #[test]
    fn crop_matches_brute_force() {
        let mut v = Volume::zeros([7, 6, 5], [1.0; 3]).unwrap();
        v.set(2, 1, 1, 5.0);
        v.set(4, 3, 2, 7.0);
        v.set(3, 2, 3, 1.0);
        let (c, bb) = crop_to_foreground(&v, 0.0);
        assert_eq!(bb.lower, [2, 1, 1]);
        assert_eq!(bb.upper, [5, 4, 4]);
        assert_eq!(c.shape(), [3, 3, 3]);
        assert_eq!(c.get(0, 0, 0), 5.0);
        assert_eq!(c.get(2, 2, 1), 7.0);
        assert_eq!(c.get(1, 1, 2), 1.0);
        // Threshold is strict: exactly-threshold voxels are background,
        // leaving only the 7.0 voxel.
        let (_, bb2) = crop_to_foreground(&v, 5.0);
        assert_eq!(bb2.lower, [4, 3, 2]);
        assert_eq!(bb2.upper, [5, 4, 3]);
    }

    #[test]
    fn crop_without_foreground_returns_full_volume() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let (c, bb) = crop_to_foreground(&v, 0.0);
        assert_eq!(bb.lower, [0, 0, 0]);
        assert_eq!(bb.upper, [4, 4, 4]);
        assert_eq!(c.shape(), [4, 4, 4]);
    }

    #[test]
    fn crop_then_embed_roundtrip() {
        let mut v = Volume::zeros([6, 5, 4], [1.0; 3]).unwrap();
        v.set(1, 1, 1, 3.0);
        v.set(3, 2, 2, 4.0);
        let (c, bb) = crop_to_foreground(&v, 0.0);
        let back = c.embed([6, 5, 4], &bb).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn resampled_shape_formula() {
        assert_eq!(resampled_shape([4, 4, 4], [2.0; 3], [1.0; 3]), [8, 8, 8]);
        assert_eq!(resampled_shape([5, 5, 5], [1.0; 3], [2.0; 3]), [3, 3, 3]);
        assert_eq!(resampled_shape([1, 1, 1], [1.0; 3], [10.0; 3]), [1, 1, 1]);
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = ramp([4, 3, 2], [1.5, 1.0, 2.0]);
        let r = resample(&v, v.spacing(), Interp::Trilinear).unwrap();
        assert_eq!(r.shape(), v.shape());
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn upsample_preserves_coincident_grid_points() {
        let v = ramp([4, 4, 4], [2.0; 3]);
        let r = resample(&v, [1.0; 3], Interp::Trilinear).unwrap();
        assert_eq!(r.shape(), [8, 8, 8]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(r.get(2 * x, 2 * y, 2 * z), v.get(x, y, z));
                }
            }
        }
        // Midpoints are linear interpolations of their neighbours.
        let mid = r.get(1, 0, 0);
        assert!((mid - 0.5 * (v.get(0, 0, 0) + v.get(1, 0, 0))).abs() < 1e-5);
    }

    #[test]
    fn nearest_preserves_binary_values() {
        let mut m = Mask::zeros([5, 5, 5], [1.0; 3]).unwrap();
        m.set(2, 2, 2, 1);
        m.set(3, 2, 2, 1);
        let r = resample_mask(&m, [0.6, 0.6, 0.6], Interp::Nearest).unwrap();
        assert!(r.data().iter().all(|&v| v <= 1));
        assert!(r.count() > 0);
    }

    #[test]
    fn resample_to_shape_inverts_resample() {
        let v = ramp([6, 5, 4], [1.0; 3]);
        let down = resample(&v, [2.0; 3], Interp::Trilinear).unwrap();
        let back = resample_to_shape(&down, v.shape(), Interp::Trilinear).unwrap();
        assert_eq!(back.shape(), v.shape());
    }

    #[test]
    fn edge_samples_clamp() {
        let v = ramp([2, 2, 2], [1.0; 3]);
        // Upsampling 2 -> 5 pushes the last sample past the source extent.
        let r = resample_to_shape(&v, [5, 5, 5], Interp::Trilinear).unwrap();
        assert_eq!(r.get(4, 4, 4), v.get(1, 1, 1));
    }

    #[test]
    fn mask_volume_and_count() {
        let mut m = Mask::zeros([4, 4, 4], [0.5, 0.5, 2.0]).unwrap();
        m.set(0, 0, 0, 1);
        m.set(1, 0, 0, 1);
        assert_eq!(m.count(), 2);
        assert!((m.volume_mm3() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bounding_box_rejects_empty() {
        assert!(BoundingBox::new([1, 0, 0], [1, 2, 2]).is_err());
        let bb = BoundingBox::new([1, 2, 3], [4, 5, 6]).unwrap();
        assert_eq!(bb.shape(), [3, 3, 3]);
        assert_eq!(bb.num_voxels(), 27);
        assert!(bb.contains([1, 2, 3]));
        assert!(!bb.contains([4, 2, 3]));
    }
}
