//! Voxel grids with physical spacing.
//!
//! Every grid stores its voxels in a single `Vec` in x-fastest, z-slowest
//! order: voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`. The same order
//! is used on disk (see [`io`]) and by the network tensors, where a grid maps
//! to a `1 x 1 x nz x ny x nx` activation without copying.
//!
//! Physical lengths are millimetres. Cubic centimetres only appear at the
//! reporting boundary ([`mask_volume_cm3`]).

pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voxel counts along x, y, z.
pub type Dims3 = [usize; 3];

#[derive(Debug, Error)]
pub enum VolgridError {
    #[error("invalid spacing ({0}, {1}, {2}): every edge length must be finite and > 0")]
    InvalidSpacing(f64, f64, f64),
    #[error("data length {actual} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch { dims: Dims3, expected: usize, actual: usize },
    #[error("voxel {index} holds an invalid value")]
    InvalidVoxel { index: usize },
    #[error("box origin {origin:?} size {size:?} leaves grid {dims:?}")]
    OutOfBounds { origin: [i64; 3], size: Dims3, dims: Dims3 },
    #[error("grid geometry differs: {a:?} vs {b:?}")]
    GeometryMismatch { a: Dims3, b: Dims3 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes, header implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("file stores dtype {found}, expected {expected}")]
    WrongDtype { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Physical voxel edge lengths in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing3 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing3 {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self, VolgridError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Self { dx, dy, dz })
        } else {
            Err(VolgridError::InvalidSpacing(dx, dy, dz))
        }
    }

    pub fn isotropic(d: f64) -> Result<Self, VolgridError> {
        Self::new(d, d, d)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }
}

/// Volume of one voxel in mm³.
pub fn voxel_volume_mm3(spacing: Spacing3) -> f64 {
    spacing.dx * spacing.dy * spacing.dz
}

/// Element types that may live in a grid. `is_valid` is checked whenever a
/// grid is built from external data.
pub trait Voxel: Copy + Send + Sync + PartialEq + std::fmt::Debug {
    fn is_valid(&self) -> bool {
        true
    }
}

impl Voxel for f32 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

impl Voxel for bool {}

/// Dense 3D grid of voxels with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: Dims3,
    spacing: Spacing3,
    data: Vec<T>,
}

/// Scalar intensity or probability volume.
pub type Volume3 = Grid<f32>;
/// Binary mask, one byte per voxel in memory.
pub type Mask3 = Grid<bool>;

impl<T: Voxel> Grid<T> {
    pub fn new(dims: Dims3, spacing: Spacing3, data: Vec<T>) -> Result<Self, VolgridError> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolgridError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_valid()) {
            return Err(VolgridError::InvalidVoxel { index });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims3, spacing: Spacing3, value: T) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Builds a grid by evaluating `f(x, y, z)` in storage order.
    pub fn from_fn(dims: Dims3, spacing: Spacing3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Physical position (mm) of a voxel centre; voxel `(0,0,0)` sits at the origin.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [x as f64 * self.spacing.dx, y as f64 * self.spacing.dy, z as f64 * self.spacing.dz]
    }

    pub fn same_geometry<U: Voxel>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_geometry<U: Voxel>(&self, other: &Grid<U>) -> Result<(), VolgridError> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(VolgridError::GeometryMismatch { a: self.dims, b: other.dims })
        }
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the box `[origin, origin + size)`. The box must lie inside the grid.
    pub fn crop_box(&self, origin: [i64; 3], size: Dims3) -> Result<Self, VolgridError> {
        let inside = (0..3).all(|a| size[a] > 0 && origin[a] >= 0 && origin[a] as usize + size[a] <= self.dims[a]);
        if !inside {
            return Err(VolgridError::OutOfBounds { origin, size, dims: self.dims });
        }
        let [ox, oy, oz] = origin.map(|o| o as usize);
        let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in oz..oz + size[2] {
            for y in oy..oy + size[1] {
                let start = self.index(ox, y, z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Ok(Self {
            dims: size,
            spacing: self.spacing,
            data,
        })
    }

    /// Crops a `size` box whose centre voxel is `center` (origin `center - size/2`).
    pub fn crop_centered(&self, center: [usize; 3], size: Dims3) -> Result<Self, VolgridError> {
        let origin = [0, 1, 2].map(|a| center[a] as i64 - (size[a] / 2) as i64);
        self.crop_box(origin, size)
    }

    /// Writes `block` into this grid at `origin`; the block must fit.
    pub fn paste(&mut self, block: &Self, origin: [usize; 3]) -> Result<(), VolgridError> {
        let size = block.dims;
        if (0..3).any(|a| origin[a] + size[a] > self.dims[a]) {
            return Err(VolgridError::OutOfBounds {
                origin: origin.map(|o| o as i64),
                size,
                dims: self.dims,
            });
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = self.index(origin[0], origin[1] + y, origin[2] + z);
                let src = block.index(0, y, z);
                self.data[dst..dst + size[0]].copy_from_slice(&block.data[src..src + size[0]]);
            }
        }
        Ok(())
    }
}

impl Volume3 {
    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Mean and population standard deviation, accumulated in f64.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Pads along z to `before + nz + after` slices by repeating the edge slices.
    pub fn pad_z_replicate(&self, before: usize, after: usize) -> Self {
        let [nx, ny, nz] = self.dims;
        let plane = nx * ny;
        let mut data = Vec::with_capacity(plane * (nz + before + after));
        for z in 0..nz + before + after {
            let src = z.saturating_sub(before).min(nz - 1);
            data.extend_from_slice(&self.data[src * plane..(src + 1) * plane]);
        }
        Self {
            dims: [nx, ny, nz + before + after],
            spacing: self.spacing,
            data,
        }
    }
}

impl Mask3 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        self.map(|b| !b)
    }
}

fn zip_masks(a: &Mask3, b: &Mask3, f: impl Fn(bool, bool) -> bool) -> Result<Mask3, VolgridError> {
    a.check_geometry(b)?;
    Ok(Grid {
        dims: a.dims,
        spacing: a.spacing,
        data: a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect(),
    })
}

pub fn mask_and(a: &Mask3, b: &Mask3) -> Result<Mask3, VolgridError> {
    zip_masks(a, b, |p, q| p && q)
}

/// `a \ b`: voxels set in `a` but not in `b`.
pub fn mask_and_not(a: &Mask3, b: &Mask3) -> Result<Mask3, VolgridError> {
    zip_masks(a, b, |p, q| p && !q)
}

pub fn mask_or(a: &Mask3, b: &Mask3) -> Result<Mask3, VolgridError> {
    zip_masks(a, b, |p, q| p || q)
}

/// True iff every voxel set in `a` is set in `b`.
pub fn mask_subset(a: &Mask3, b: &Mask3) -> Result<bool, VolgridError> {
    a.check_geometry(b)?;
    Ok(a.data.iter().zip(&b.data).all(|(&p, &q)| !p || q))
}

pub fn mask_volume_cm3(mask: &Mask3) -> f64 {
    count_volume_cm3(mask.count(), mask.spacing())
}

/// Volume in cm³ of `count` voxels at `spacing`.
pub fn count_volume_cm3(count: usize, spacing: Spacing3) -> f64 {
    count as f64 * voxel_volume_mm3(spacing) / 1000.0
}

/// Chebyshev (box) dilation by `radius` voxels, done as three separable passes.
pub fn dilate(mask: &Mask3, radius: usize) -> Mask3 {
    if radius == 0 {
        return mask.clone();
    }
    let dims = mask.dims();
    let mut cur = mask.data.clone();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut next = vec![false; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride) % n;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(n - 1);
            let base = i - pos * stride;
            *out = (lo..=hi).any(|p| cur[base + p * stride]);
        }
        cur = next;
    }
    Grid {
        dims,
        spacing: mask.spacing,
        data: cur,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Spacing3 {
        Spacing3::isotropic(1.0).unwrap()
    }

    fn sphere(dims: Dims3, c: [f64; 3], r: f64) -> Mask3 {
        Mask3::from_fn(dims, unit(), |x, y, z| {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            d2 <= r * r
        })
    }

    #[test]
    fn spacing_rejects_nonpositive_and_nonfinite() {
        assert!(Spacing3::new(0.0, 1.0, 1.0).is_err());
        assert!(Spacing3::new(1.0, -1.0, 1.0).is_err());
        assert!(Spacing3::new(1.0, 1.0, f64::NAN).is_err());
        assert!(Spacing3::new(0.8, 0.8, 0.987).is_ok());
    }

    #[test]
    fn voxel_volume_examples() {
        assert_eq!(voxel_volume_mm3(unit()), 1.0);
        let s = Spacing3::new(0.8, 0.8, 0.987).unwrap();
        assert!((voxel_volume_mm3(s) - 0.63168).abs() < 1e-12);
        let s = Spacing3::new(0.5, 0.5, 2.0).unwrap();
        assert_eq!(voxel_volume_mm3(s), 0.5);
    }

    #[test]
    fn mask_volume_examples() {
        let s = Spacing3::new(0.8, 0.8, 0.987).unwrap();
        assert_eq!(mask_volume_cm3(&Mask3::filled([10, 10, 10], s, false)), 0.0);
        // 1000 set voxels in a larger grid
        let mut m = Mask3::filled([20, 10, 10], s, false);
        for i in 0..1000 {
            m.data_mut()[i] = true;
        }
        assert!((mask_volume_cm3(&m) - 0.63168).abs() < 1e-12);
        assert!((mask_volume_cm3(&Mask3::filled([10, 10, 10], unit(), true)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn new_checks_length_and_values() {
        assert!(matches!(
            Volume3::new([2, 2, 2], unit(), vec![0.0; 7]),
            Err(VolgridError::LengthMismatch { .. })
        ));
        let mut v = vec![0.0; 8];
        v[3] = f32::NAN;
        assert!(matches!(Volume3::new([2, 2, 2], unit(), v), Err(VolgridError::InvalidVoxel { index: 3 })));
    }

    #[test]
    fn crop_small_grid_matches_hand_indexing() {
        let v = Volume3::from_fn([4, 4, 4], unit(), |x, y, z| (x + 4 * y + 16 * z) as f32);
        let c = v.crop_centered([1, 1, 1], [2, 2, 2]).unwrap();
        // voxels {0,1}^3, listed x-fastest
        let expected = [0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0];
        assert_eq!(c.data(), &expected);
        assert_eq!(c.dims(), [2, 2, 2]);
        assert_eq!(c.spacing(), v.spacing());
    }

    #[test]
    fn crop_identity_and_bounds() {
        let v = Volume3::from_fn([5, 6, 7], unit(), |x, y, z| (x * y + z) as f32);
        let c = v.crop_centered([2, 3, 3], [5, 6, 7]).unwrap();
        assert_eq!(c, v);
        assert!(matches!(v.crop_centered([0, 0, 0], [2, 2, 2]), Err(VolgridError::OutOfBounds { .. })));
        assert!(v.crop_box([3, 0, 0], [3, 1, 1]).is_err());
    }

    #[test]
    fn crop_from_clinical_sized_slice_stack() {
        let v = Volume3::filled([512, 512, 3], unit(), 1.0);
        let c = v.crop_centered([300, 256, 1], [192, 192, 3]).unwrap();
        assert_eq!(c.dims(), [192, 192, 3]);
    }

    #[test]
    fn mask_algebra() {
        let a = sphere([20, 20, 20], [10.0, 10.0, 10.0], 8.0);
        let e = sphere([20, 20, 20], [10.0, 10.0, 10.0], 6.0);
        assert_eq!(mask_and_not(&a, &a).unwrap().count(), 0);
        let shell = mask_and_not(&a, &e).unwrap();
        let brute = (0..a.len()).filter(|&i| a.data()[i] && !e.data()[i]).count();
        assert_eq!(shell.count(), brute);
        assert!(mask_subset(&e, &a).unwrap());
        assert!(!mask_subset(&a, &e).unwrap());
        let empty = Mask3::filled([20, 20, 20], unit(), false);
        assert!(mask_subset(&empty, &a).unwrap());
        assert_eq!(mask_and(&a, &e).unwrap(), e);
        let other = Mask3::filled([20, 20, 19], unit(), false);
        assert!(matches!(mask_and(&a, &other), Err(VolgridError::GeometryMismatch { .. })));
    }

    #[test]
    fn pad_replicates_edges() {
        let v = Volume3::from_fn([1, 1, 3], unit(), |_, _, z| z as f32);
        let p = v.pad_z_replicate(2, 1);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn dilate_grows_a_point_into_a_cube() {
        let mut m = Mask3::filled([7, 7, 7], unit(), false);
        m.set(3, 3, 3, true);
        assert_eq!(dilate(&m, 1).count(), 27);
        assert_eq!(dilate(&m, 0), m);
        m.set(3, 3, 3, false);
        m.set(0, 0, 0, true);
        assert_eq!(dilate(&m, 2).count(), 27);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn crop_preserves_values(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7,
                                     seed in any::<u64>()) {
                let v = Volume3::from_fn([nx, ny, nz], Spacing3::new(0.5, 0.7, 1.3).unwrap(),
                    |x, y, z| ((x * 31 + y * 17 + z * 7) as u64 ^ seed) as f32);
                let size = [1 + (seed as usize) % nx, 1 + (seed as usize >> 8) % ny, 1 + (seed as usize >> 16) % nz];
                let origin = [(seed as usize >> 24) % (nx - size[0] + 1), (seed as usize >> 32) % (ny - size[1] + 1), (seed as usize >> 40) % (nz - size[2] + 1)];
                let c = v.crop_box(origin.map(|o| o as i64), size).unwrap();
                prop_assert_eq!(c.spacing(), v.spacing());
                for z in 0..size[2] { for y in 0..size[1] { for x in 0..size[0] {
                    prop_assert_eq!(c.get(x, y, z), v.get(x + origin[0], y + origin[1], z + origin[2]));
                }}}
            }

            #[test]
            fn volume_is_additive_and_shell_volume_subtracts(bits in proptest::collection::vec(0u8..4, 216)) {
                let s = Spacing3::new(0.8, 0.8, 0.987).unwrap();
                let p = Mask3::new([6, 6, 6], s, bits.iter().map(|&b| b >= 1).collect()).unwrap();
                let e = Mask3::new([6, 6, 6], s, bits.iter().map(|&b| b >= 2).collect()).unwrap();
                prop_assert!(mask_subset(&e, &p).unwrap());
                let shell = mask_and_not(&p, &e).unwrap();
                prop_assert!((mask_volume_cm3(&shell) - (mask_volume_cm3(&p) - mask_volume_cm3(&e))).abs() < 1e-12);
                let low = Mask3::new([6, 6, 6], s, bits.iter().map(|&b| b == 1).collect()).unwrap();
                let high = Mask3::new([6, 6, 6], s, bits.iter().map(|&b| b == 3).collect()).unwrap();
                let union = mask_or(&low, &high).unwrap();
                prop_assert!((mask_volume_cm3(&union) - mask_volume_cm3(&low) - mask_volume_cm3(&high)).abs() < 1e-12);
            }
        }
    }
}
