//! Synthetic proximal-femur phantoms with exact ground truth.
//!
//! The bone is a union of three solids: a sphere (head), a capped cylinder
//! running from the head centre along `neck_axis` (neck), and a capped
//! cylinder hanging from the neck end along `shaft_axis` (shaft, whose top
//! cap sits one shaft radius above the neck junction). Ground truth comes
//! from exact signed distances to those solids evaluated at voxel centres:
//! the periosteal mask is the union, the endosteal mask is the union of each
//! solid inset by its own cortical thickness. Intensities are painted from
//! the masks, then blurred and corrupted with seeded Gaussian noise.
//!
//! Region labels are analytic as well: head sphere is FH, neck cylinder
//! (outside the head) is FN, and the shaft is split into TR above and IT
//! below `trochanter_fraction` of its axial length. This is a stand-in for
//! a vendor-defined partition and is reported as such.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regions::Region;
use crate::rng::SeededRng;
use crate::volgrid::{Dims3, Grid, Mask3, Spacing3, Volume3};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom solid does not fit the grid with a 2-voxel margin on axis {axis}: extent [{lo:.3}, {hi:.3}] mm, allowed [{min:.3}, {max:.3}] mm")]
    SpecOutOfBounds { axis: usize, lo: f64, hi: f64, min: f64, max: f64 },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorticalThickness {
    pub head: f64,
    pub neck: f64,
    pub shaft: f64,
}

/// Hounsfield-like intensity of each tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityLevels {
    pub background: f64,
    pub trabecular: f64,
    pub cortical: f64,
}

/// Geometry and appearance of one phantom. Lengths in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub head_center: [f64; 3],
    pub head_radius: f64,
    pub neck_axis: [f64; 3],
    pub neck_radius: f64,
    /// Zero removes both neck and shaft, leaving a sphere.
    pub neck_length: f64,
    pub shaft_axis: [f64; 3],
    pub shaft_radius: f64,
    /// Length below the neck junction; zero removes the shaft.
    pub shaft_length: f64,
    pub cortical_thickness: CorticalThickness,
    pub intensity_levels: IntensityLevels,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Axial fraction of the shaft (from its top) labelled trochanter.
    pub trochanter_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// Fits a 96 x 96 x 48 grid at 1 mm spacing.
    fn default() -> Self {
        Self {
            head_center: [62.0, 48.0, 33.0],
            head_radius: 11.0,
            neck_axis: [-0.8, 0.0, -0.6],
            neck_radius: 7.0,
            neck_length: 20.0,
            shaft_axis: [0.0, 0.0, -1.0],
            shaft_radius: 10.5,
            shaft_length: 14.0,
            cortical_thickness: CorticalThickness {
                head: 2.0,
                neck: 2.5,
                shaft: 3.0,
            },
            intensity_levels: IntensityLevels {
                background: 150.0,
                trabecular: 250.0,
                cortical: 1000.0,
            },
            blur_sigma: 0.5,
            noise_sigma: 50.0,
            trochanter_fraction: 0.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// The default geometry rescaled to fit a grid of `dims` at `spacing`,
    /// centred on the grid and respecting the two-voxel margin.
    pub fn for_grid(dims: Dims3, spacing: Spacing3) -> Self {
        Self::fitted(dims, spacing, 0.0, 0.0)
    }

    /// Like [`for_grid`](Self::for_grid), shrunk so that every member drawn
    /// with `jitter` still fits.
    pub fn for_cohort(dims: Dims3, spacing: Spacing3, jitter: &CohortJitter) -> Self {
        let rel = jitter.radius_frac.max(jitter.length_frac);
        Self::fitted(dims, spacing, jitter.center_mm, rel)
    }

    fn fitted(dims: Dims3, spacing: Spacing3, slack_mm: f64, rel: f64) -> Self {
        let d = Self::default();
        let steps = spacing.as_array();
        // Usable extent of the default 96 x 96 x 48 grid at 1 mm.
        let reference = [91.0, 91.0, 43.0];
        let s = (0..3)
            .map(|a| ((dims[a] as f64 - 5.0) * steps[a] - 2.0 * slack_mm) / reference[a] / (1.0 + rel))
            .fold(f64::INFINITY, f64::min);
        let bounds = FemurSolid::new(&d).expect("default spec is valid").bounds();
        let centre_ref = bounds.map(|(lo, hi)| (lo + hi) / 2.0);
        let centre = [0, 1, 2].map(|a| (dims[a] - 1) as f64 * steps[a] / 2.0);
        Self {
            head_center: [0, 1, 2].map(|a| centre[a] + (d.head_center[a] - centre_ref[a]) * s),
            head_radius: d.head_radius * s,
            neck_radius: d.neck_radius * s,
            neck_length: d.neck_length * s,
            shaft_radius: d.shaft_radius * s,
            shaft_length: d.shaft_length * s,
            cortical_thickness: CorticalThickness {
                head: d.cortical_thickness.head * s,
                neck: d.cortical_thickness.neck * s,
                shaft: d.cortical_thickness.shaft * s,
            },
            blur_sigma: d.blur_sigma * s,
            ..d
        }
    }

    /// A lone sphere (no neck, no shaft).
    pub fn sphere(center: [f64; 3], radius: f64, cortical: f64) -> Self {
        Self {
            head_center: center,
            head_radius: radius,
            neck_length: 0.0,
            shaft_length: 0.0,
            cortical_thickness: CorticalThickness {
                head: cortical,
                neck: cortical,
                shaft: cortical,
            },
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        let t = self.cortical_thickness;
        if !(self.head_radius > t.head && t.head > 0.0) {
            return bad("head_radius > cortical head thickness > 0 violated");
        }
        if self.neck_length < 0.0 || self.shaft_length < 0.0 {
            return bad("lengths must be non-negative");
        }
        if self.neck_length > 0.0 {
            if !(self.neck_radius > t.neck && t.neck > 0.0) {
                return bad("neck_radius > cortical neck thickness > 0 violated");
            }
            if norm(self.neck_axis) == 0.0 {
                return bad("neck_axis is zero");
            }
        }
        if self.neck_length > 0.0 && self.shaft_length > 0.0 {
            if !(self.shaft_radius > t.shaft && t.shaft > 0.0) {
                return bad("shaft_radius > cortical shaft thickness > 0 violated");
            }
            if norm(self.shaft_axis) == 0.0 {
                return bad("shaft_axis is zero");
            }
        }
        let l = self.intensity_levels;
        if !(l.cortical > l.trabecular && l.trabecular > l.background) {
            return bad("intensity levels must satisfy cortical > trabecular > background");
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("blur_sigma and noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.trochanter_fraction) {
            return bad("trochanter_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Solid geometry resolved from a spec.
#[derive(Debug, Clone)]
pub struct FemurSolid {
    head: Sphere,
    neck: Option<Cylinder>,
    shaft: Option<Cylinder>,
    trochanter_fraction: f64,
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: [f64; 3],
    radius: f64,
    cortical: f64,
}

#[derive(Debug, Clone, Copy)]
struct Cylinder {
    start: [f64; 3],
    axis: [f64; 3],
    length: f64,
    radius: f64,
    cortical: f64,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|c| c / n)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Sphere {
    fn sdf(&self, p: [f64; 3]) -> f64 {
        norm(sub(p, self.center)) - self.radius
    }
}

impl Cylinder {
    fn axial(&self, p: [f64; 3]) -> f64 {
        dot(sub(p, self.start), self.axis)
    }

    /// Exact signed distance to the capped cylinder.
    fn sdf(&self, p: [f64; 3]) -> f64 {
        let rel = sub(p, self.start);
        let t = dot(rel, self.axis);
        let radial = [0, 1, 2].map(|i| rel[i] - t * self.axis[i]);
        let dr = norm(radial) - self.radius;
        let dt = (-t).max(t - self.length);
        dr.max(dt).min(0.0) + (dr.max(0.0).powi(2) + dt.max(0.0).powi(2)).sqrt()
    }

    fn end(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.start[i] + self.length * self.axis[i])
    }

    fn bounds(&self) -> [(f64, f64); 3] {
        let a = self.start;
        let b = self.end();
        [0, 1, 2].map(|i| {
            let ext = self.radius * (1.0 - self.axis[i] * self.axis[i]).max(0.0).sqrt();
            (a[i].min(b[i]) - ext, a[i].max(b[i]) + ext)
        })
    }
}

impl FemurSolid {
    pub fn new(spec: &PhantomSpec) -> Result<Self, PhantomError> {
        spec.validate()?;
        let t = spec.cortical_thickness;
        let head = Sphere {
            center: spec.head_center,
            radius: spec.head_radius,
            cortical: t.head,
        };
        let neck = (spec.neck_length > 0.0).then(|| Cylinder {
            start: spec.head_center,
            axis: unit(spec.neck_axis),
            length: spec.neck_length,
            radius: spec.neck_radius,
            cortical: t.neck,
        });
        let shaft = match neck {
            Some(n) if spec.shaft_length > 0.0 => {
                let axis = unit(spec.shaft_axis);
                let junction = n.end();
                Some(Cylinder {
                    start: [0, 1, 2].map(|i| junction[i] - spec.shaft_radius * axis[i]),
                    axis,
                    length: spec.shaft_radius + spec.shaft_length,
                    radius: spec.shaft_radius,
                    cortical: t.shaft,
                })
            }
            _ => None,
        };
        Ok(Self {
            head,
            neck,
            shaft,
            trochanter_fraction: spec.trochanter_fraction,
        })
    }

    /// Signed distance to the periosteal surface (negative inside).
    pub fn periosteal_sdf(&self, p: [f64; 3]) -> f64 {
        let mut d = self.head.sdf(p);
        for c in self.neck.iter().chain(&self.shaft) {
            d = d.min(c.sdf(p));
        }
        d
    }

    pub fn inside_periosteal(&self, p: [f64; 3]) -> bool {
        self.periosteal_sdf(p) <= 0.0
    }

    pub fn inside_endosteal(&self, p: [f64; 3]) -> bool {
        self.head.sdf(p) <= -self.head.cortical || self.neck.iter().chain(&self.shaft).any(|c| c.sdf(p) <= -c.cortical)
    }

    /// Region of any point: the containing part by precedence FH, FN, shaft,
    /// or the nearest part for points outside the solid.
    pub fn region_at(&self, p: [f64; 3]) -> Region {
        let dh = self.head.sdf(p);
        let dn = self.neck.map(|c| c.sdf(p)).unwrap_or(f64::INFINITY);
        let ds = self.shaft.map(|c| c.sdf(p)).unwrap_or(f64::INFINITY);
        let shaft_label = |c: &Cylinder| {
            let u = (c.axial(p) / c.length).clamp(0.0, 1.0);
            if u < self.trochanter_fraction {
                Region::Trochanter
            } else {
                Region::Intertrochanter
            }
        };
        if dh <= 0.0 {
            Region::FemurHead
        } else if dn <= 0.0 {
            Region::FemurNeck
        } else if ds <= 0.0 {
            shaft_label(self.shaft.as_ref().unwrap())
        } else if dh <= dn && dh <= ds {
            Region::FemurHead
        } else if dn <= ds {
            Region::FemurNeck
        } else {
            shaft_label(self.shaft.as_ref().unwrap())
        }
    }

    /// Axis-aligned bounding box of the solid, mm.
    pub fn bounds(&self) -> [(f64, f64); 3] {
        let h = &self.head;
        let mut b = [0, 1, 2].map(|i| (h.center[i] - h.radius, h.center[i] + h.radius));
        for c in self.neck.iter().chain(&self.shaft) {
            let cb = c.bounds();
            for i in 0..3 {
                b[i] = (b[i].0.min(cb[i].0), b[i].1.max(cb[i].1));
            }
        }
        b
    }

    fn check_fits(&self, dims: Dims3, spacing: Spacing3) -> Result<(), PhantomError> {
        let d = spacing.as_array();
        for (axis, (lo, hi)) in self.bounds().into_iter().enumerate() {
            let min = 2.0 * d[axis];
            let max = (dims[axis] as f64 - 3.0) * d[axis];
            if lo < min || hi > max {
                return Err(PhantomError::SpecOutOfBounds { axis, lo, hi, min, max });
            }
        }
        Ok(())
    }
}

/// One generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub spec: PhantomSpec,
    pub intensity: Volume3,
    pub periosteal: Mask3,
    pub endosteal: Mask3,
    pub regions: Grid<Region>,
}

pub fn generate(spec: &PhantomSpec, dims: Dims3, spacing: Spacing3) -> Result<PhantomSample, PhantomError> {
    let solid = FemurSolid::new(spec)?;
    solid.check_fits(dims, spacing)?;
    let pos = |x: usize, y: usize, z: usize| [x as f64 * spacing.dx, y as f64 * spacing.dy, z as f64 * spacing.dz];
    let periosteal = Mask3::from_fn(dims, spacing, |x, y, z| solid.inside_periosteal(pos(x, y, z)));
    let endosteal = Mask3::from_fn(dims, spacing, |x, y, z| solid.inside_endosteal(pos(x, y, z)));
    let regions = Grid::<Region>::from_fn(dims, spacing, |x, y, z| {
        if periosteal.get(x, y, z) {
            solid.region_at(pos(x, y, z))
        } else {
            Region::None
        }
    });

    let l = spec.intensity_levels;
    let mut field: Vec<f64> = periosteal
        .data()
        .iter()
        .zip(endosteal.data())
        .map(|(&p, &e)| match (p, e) {
            (_, true) => l.trabecular,
            (true, false) => l.cortical,
            (false, false) => l.background,
        })
        .collect();
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut field, dims, spacing, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = SeededRng::new(spec.seed, 0);
        for v in field.iter_mut() {
            *v += spec.noise_sigma * rng.standard_normal();
        }
    }
    let intensity = Volume3::from_fn(dims, spacing, |x, y, z| field[x + dims[0] * (y + dims[1] * z)] as f32);
    Ok(PhantomSample {
        spec: spec.clone(),
        intensity,
        periosteal,
        endosteal,
        regions,
    })
}

/// Normalised Gaussian taps for standard deviation `sigma` voxels, truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur in place, `sigma_mm` in millimetres; edges replicate.
pub fn gaussian_blur(field: &mut [f64], dims: Dims3, spacing: Spacing3, sigma_mm: f64) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let d = spacing.as_array();
    let mut scratch = vec![0.0; field.len()];
    for axis in 0..3 {
        let sigma = sigma_mm / d[axis];
        if sigma <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let n = dims[axis] as i64;
        let stride = strides[axis];
        for (i, out) in scratch.iter_mut().enumerate() {
            let pos = ((i / stride) as i64) % n;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = (pos + k as i64 - r).clamp(0, n - 1) as usize;
                acc += w * field[base + q * stride];
            }
            *out = acc;
        }
        field.copy_from_slice(&scratch);
    }
}

/// Per-sample perturbation ranges for cohort generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortJitter {
    /// Relative half-width for every radius, e.g. 0.2 for ±20%.
    pub radius_frac: f64,
    /// Relative half-width for neck and shaft lengths.
    pub length_frac: f64,
    /// Relative half-width for cortical thicknesses.
    pub cortical_frac: f64,
    /// Absolute half-width (mm) for the head centre on each axis.
    pub center_mm: f64,
}

impl CohortJitter {
    pub fn none() -> Self {
        Self {
            radius_frac: 0.0,
            length_frac: 0.0,
            cortical_frac: 0.0,
            center_mm: 0.0,
        }
    }
}

impl Default for CohortJitter {
    fn default() -> Self {
        Self {
            radius_frac: 0.08,
            length_frac: 0.08,
            cortical_frac: 0.1,
            center_mm: 1.5,
        }
    }
}

/// Draws the spec of cohort member `index`. Geometry comes from the stream
/// `(seed, index)`; the noise seed is `base.seed + index`.
pub fn draw_member_spec(base: &PhantomSpec, jitter: &CohortJitter, seed: u64, index: usize) -> PhantomSpec {
    let mut rng = SeededRng::new(seed, index as u64);
    let mut rel = |frac: f64, v: f64| v * rng.uniform_in(1.0 - frac, 1.0 + frac);
    let mut s = base.clone();
    s.head_radius = rel(jitter.radius_frac, s.head_radius);
    s.neck_radius = rel(jitter.radius_frac, s.neck_radius);
    s.shaft_radius = rel(jitter.radius_frac, s.shaft_radius);
    s.neck_length = rel(jitter.length_frac, s.neck_length);
    s.shaft_length = rel(jitter.length_frac, s.shaft_length);
    s.cortical_thickness.head = rel(jitter.cortical_frac, s.cortical_thickness.head);
    s.cortical_thickness.neck = rel(jitter.cortical_frac, s.cortical_thickness.neck);
    s.cortical_thickness.shaft = rel(jitter.cortical_frac, s.cortical_thickness.shaft);
    for c in s.head_center.iter_mut() {
        *c += rng.uniform_in(-jitter.center_mm, jitter.center_mm);
    }
    s.seed = base.seed.wrapping_add(index as u64);
    s
}

pub fn generate_cohort(
    n: usize,
    base: &PhantomSpec,
    jitter: &CohortJitter,
    dims: Dims3,
    spacing: Spacing3,
    seed: u64,
) -> Result<Vec<PhantomSample>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::InvalidSpec("cohort size must be >= 1".into()));
    }
    (0..n).map(|i| generate(&draw_member_spec(base, jitter, seed, i), dims, spacing)).collect()
}
