//! Boundary voxels and nearest-surface distances.
//!
//! Distances to a surface are read from an exact squared Euclidean distance
//! transform of the surface voxels (separable lower-envelope algorithm of
//! Felzenszwalb and Huttenlocher, with per-axis spacing), so each lookup is
//! the true minimum over all surface voxels.

use super::MetricsError;
use crate::volgrid::{Dims3, Mask3, Spacing3, Volume3};

/// Foreground voxels with at least one 6-connected background neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub dims: Dims3,
    pub spacing: Spacing3,
    /// Linear voxel indices, ascending.
    pub indices: Vec<usize>,
    /// Voxel-centre coordinates in mm.
    pub coords: Vec<[f64; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn check_pair(&self, other: &SurfaceSet) -> Result<(), MetricsError> {
        if self.is_empty() || other.is_empty() {
            return Err(MetricsError::EmptySurface);
        }
        if self.dims != other.dims || self.spacing != other.spacing {
            return Err(crate::volgrid::VolgridError::GeometryMismatch { a: self.dims, b: other.dims }.into());
        }
        Ok(())
    }
}

pub fn extract_surface(mask: &Mask3) -> Result<SurfaceSet, MetricsError> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut indices = Vec::new();
    let mut coords = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if !data[i] {
                    continue;
                }
                let boundary = x == 0
                    || x + 1 == nx
                    || y == 0
                    || y + 1 == ny
                    || z == 0
                    || z + 1 == nz
                    || !data[i - 1]
                    || !data[i + 1]
                    || !data[i - nx]
                    || !data[i + nx]
                    || !data[i - nx * ny]
                    || !data[i + nx * ny];
                if boundary {
                    indices.push(i);
                    coords.push(mask.position(x, y, z));
                }
            }
        }
    }
    if indices.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(SurfaceSet {
        dims: mask.dims(),
        spacing: mask.spacing(),
        indices,
        coords,
    })
}

/// One-dimensional squared distance transform of `f` (`INFINITY` marks
/// non-sites) with sample spacing `d`, written back into `f`.
fn edt_1d(f: &mut [f64], d: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let d2 = d * d;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + d2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + d2 * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * d2 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..f.len() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = d * (q as f64 - p as f64);
        out.push(dq * dq + f[p]);
    }
    f.copy_from_slice(out);
}

/// Squared distance (mm²) from every voxel to the nearest site.
pub fn squared_edt(sites: &[bool], dims: Dims3, spacing: Spacing3) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    let strides = [1, nx, nx * ny];
    let steps = spacing.as_array();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        // Enumerate line starts: all voxels whose coordinate along `axis` is 0.
        for start in 0..g.len() {
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| g[start + k * stride]));
            edt_1d(&mut line, steps[axis], &mut v, &mut zb, &mut out);
            for (k, &val) in line.iter().enumerate() {
                g[start + k * stride] = val;
            }
        }
    }
    g
}

/// Distance (mm) from each voxel of `from` to the nearest voxel of `to`.
pub fn nearest_distances(from: &SurfaceSet, to: &SurfaceSet) -> Result<Vec<f64>, MetricsError> {
    from.check_pair(to)?;
    let n: usize = to.dims.iter().product();
    let mut sites = vec![false; n];
    for &i in &to.indices {
        sites[i] = true;
    }
    let d2 = squared_edt(&sites, to.dims, to.spacing);
    Ok(from.indices.iter().map(|&i| d2[i].sqrt()).collect())
}

/// Average surface distance in mm, symmetric in its arguments.
pub fn asd(pred: &SurfaceSet, truth: &SurfaceSet) -> Result<f64, MetricsError> {
    let a = nearest_distances(pred, truth)?;
    let b = nearest_distances(truth, pred)?;
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64)
}

/// Nearest-truth distance for each predicted surface voxel, in `pred.indices` order.
pub fn surface_distance_map(pred: &SurfaceSet, truth: &SurfaceSet) -> Result<Vec<f64>, MetricsError> {
    nearest_distances(pred, truth)
}

/// Paints per-voxel surface distances into a volume; voxels not on the
/// surface hold `-1`.
pub fn distance_map_volume(surface: &SurfaceSet, distances: &[f64]) -> Result<Volume3, MetricsError> {
    if distances.len() != surface.len() {
        return Err(MetricsError::LengthMismatch(surface.len(), distances.len()));
    }
    let mut vol = Volume3::filled(surface.dims, surface.spacing, -1.0);
    let data = vol.data_mut();
    for (&i, &d) in surface.indices.iter().zip(distances) {
        data[i] = d as f32;
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid;

    fn sp(d: [f64; 3]) -> Spacing3 {
        Spacing3::new(d[0], d[1], d[2]).unwrap()
    }

    fn mask_from(dims: Dims3, s: Spacing3, f: impl Fn(usize, usize, usize) -> bool) -> Mask3 {
        Grid::from_fn(dims, s, f)
    }

    #[test]
    fn surface_counts() {
        let s = sp([1.0; 3]);
        let single = mask_from([5, 5, 5], s, |x, y, z| (x, y, z) == (2, 2, 2));
        let surf = extract_surface(&single).unwrap();
        assert_eq!(surf.indices, vec![single.index(2, 2, 2)]);

        let cube = mask_from([6, 6, 6], s, |x, y, z| (1..5).contains(&x) && (1..5).contains(&y) && (1..5).contains(&z));
        assert_eq!(extract_surface(&cube).unwrap().len(), 56);

        let full = Mask3::filled([4, 4, 4], s, true);
        assert_eq!(extract_surface(&full).unwrap().len(), 56);

        let empty = Mask3::filled([3, 3, 3], s, false);
        assert!(matches!(extract_surface(&empty), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn single_voxels_along_x() {
        let s = sp([0.8, 1.0, 1.0]);
        let a = extract_surface(&mask_from([8, 3, 3], s, |x, y, z| (x, y, z) == (1, 1, 1))).unwrap();
        let b = extract_surface(&mask_from([8, 3, 3], s, |x, y, z| (x, y, z) == (4, 1, 1))).unwrap();
        assert!((asd(&a, &b).unwrap() - 2.4).abs() < 1e-12);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn parallel_plates() {
        let s = sp([1.0; 3]);
        let a = extract_surface(&mask_from([7, 7, 6], s, |x, y, z| z == 1 && (1..6).contains(&x) && (1..6).contains(&y))).unwrap();
        let b = extract_surface(&mask_from([7, 7, 6], s, |x, y, z| z == 3 && (1..6).contains(&x) && (1..6).contains(&y))).unwrap();
        assert_eq!(a.len(), 25);
        assert!((asd(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_map_volume_marks_off_surface() {
        let s = sp([1.0; 3]);
        let a = extract_surface(&mask_from([4, 4, 4], s, |x, y, z| (x, y, z) == (1, 1, 1))).unwrap();
        let b = extract_surface(&mask_from([4, 4, 4], s, |x, y, z| (x, y, z) == (1, 1, 3))).unwrap();
        let d = surface_distance_map(&a, &b).unwrap();
        assert_eq!(d, vec![2.0]);
        let vol = distance_map_volume(&a, &d).unwrap();
        assert_eq!(vol.get(1, 1, 1), 2.0);
        assert_eq!(vol.get(0, 0, 0), -1.0);
    }

    #[test]
    fn geometry_mismatch_and_empty() {
        let a = extract_surface(&Mask3::filled([2, 2, 2], sp([1.0; 3]), true)).unwrap();
        let b = extract_surface(&Mask3::filled([2, 2, 2], sp([2.0, 1.0, 1.0]), true)).unwrap();
        assert!(matches!(asd(&a, &b), Err(MetricsError::Geometry(_))));
        let mut e = a.clone();
        e.indices.clear();
        e.coords.clear();
        assert!(matches!(asd(&a, &e), Err(MetricsError::EmptySurface)));
    }
}
