//! Training-time augmentation: isotropic zoom, brightness and additive noise.
//!
//! Zoom keeps the grid dimensions and scales content about the grid centre:
//! output voxel `p` samples the input at `c + (p - c) / factor` (voxel
//! coordinates, `c = (n - 1) / 2`). Images are resampled trilinearly with
//! edge clamping, masks by nearest neighbour with outside samples empty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::volgrid::{Mask3, Volume3};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("interval '{name}' is invalid: [{lo}, {hi}]")]
    InvalidInterval { name: &'static str, lo: f64, hi: f64 },
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn check(&self, name: &'static str) -> Result<(), AugmentError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(AugmentError::InvalidInterval {
                name,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Noise sigma as a fraction of the volume's intensity std.
    pub noise_sigma_range: Interval,
    pub brightness_scale_range: Interval,
    /// Brightness shift as a fraction of the volume's intensity range.
    pub brightness_shift_range: Interval,
    pub scale_factor_range: Interval,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma_range: Interval::new(0.0, 0.05),
            brightness_scale_range: Interval::new(0.9, 1.1),
            brightness_shift_range: Interval::new(-0.05, 0.05),
            scale_factor_range: Interval::new(0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every range collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            noise_sigma_range: Interval::point(0.0),
            brightness_scale_range: Interval::point(1.0),
            brightness_shift_range: Interval::point(0.0),
            scale_factor_range: Interval::point(1.0),
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self
            == Self {
                seed: self.seed,
                ..Self::identity()
            }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        self.noise_sigma_range.check("noise_sigma_range")?;
        self.brightness_scale_range.check("brightness_scale_range")?;
        self.brightness_shift_range.check("brightness_shift_range")?;
        self.scale_factor_range.check("scale_factor_range")?;
        if self.noise_sigma_range.lo < 0.0 {
            return Err(AugmentError::InvalidInterval {
                name: "noise_sigma_range",
                lo: self.noise_sigma_range.lo,
                hi: self.noise_sigma_range.hi,
            });
        }
        if self.scale_factor_range.lo <= 0.0 {
            return Err(AugmentError::InvalidInterval {
                name: "scale_factor_range",
                lo: self.scale_factor_range.lo,
                hi: self.scale_factor_range.hi,
            });
        }
        Ok(())
    }
}

/// Parameters drawn for one augmented sample. Fractions are as drawn from
/// the config; `noise_sigma` and `brightness_shift` are in intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub noise_fraction: f64,
    pub noise_sigma: f64,
    pub brightness_scale: f64,
    pub shift_fraction: f64,
    pub brightness_shift: f64,
    pub scale_factor: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub intensity: Volume3,
    pub masks: Vec<Mask3>,
    pub params: AugmentParams,
}

pub fn add_gaussian_noise(vol: &Volume3, sigma: f64, seed: u64) -> Volume3 {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    if sigma == 0.0 {
        return vol.clone();
    }
    let mut rng = SeededRng::new(seed, 0);
    let mut out = vol.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.standard_normal()) as f32;
    }
    out
}

pub fn brightness(vol: &Volume3, scale: f64, shift: f64) -> Volume3 {
    vol.map(|v| (scale * v as f64 + shift) as f32)
}

/// Source coordinate (voxel units) sampled by output index `i` along an axis of length `n`.
fn source_coord(i: usize, n: usize, factor: f64) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    c + (i as f64 - c) / factor
}

pub fn scale_3d(vol: &Volume3, factor: f64) -> Volume3 {
    assert!(factor > 0.0, "scale factor must be positive");
    if factor == 1.0 {
        return vol.clone();
    }
    let [nx, ny, nz] = vol.dims();
    let data = vol.data();
    // Per-axis (lower index, upper index, upper weight) with edge clamping.
    let taps = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let s = source_coord(i, n, factor).clamp(0.0, (n - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (tx, ty, tz) = (taps(nx), taps(ny), taps(nz));
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;
    Volume3::from_fn(vol.dims(), vol.spacing(), |x, y, z| {
        let (x0, x1, wx) = tx[x];
        let (y0, y1, wy) = ty[y];
        let (z0, z1, wz) = tz[z];
        let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), wx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), wx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), wx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), wx);
        lerp(lerp(c00, c10, wy), lerp(c01, c11, wy), wz) as f32
    })
}

pub fn scale_3d_mask(mask: &Mask3, factor: f64) -> Mask3 {
    assert!(factor > 0.0, "scale factor must be positive");
    if factor == 1.0 {
        return mask.clone();
    }
    let dims = mask.dims();
    let near = |n: usize| -> Vec<Option<usize>> {
        (0..n)
            .map(|i| {
                let s = source_coord(i, n, factor).round();
                (s >= 0.0 && s <= (n - 1) as f64).then_some(s as usize)
            })
            .collect()
    };
    let (sx, sy, sz) = (near(dims[0]), near(dims[1]), near(dims[2]));
    Mask3::from_fn(dims, mask.spacing(), |x, y, z| match (sx[x], sy[y], sz[z]) {
        (Some(a), Some(b), Some(c)) => mask.get(a, b, c),
        _ => false,
    })
}

pub fn draw_params(vol: &Volume3, config: &AugmentConfig, seed: u64) -> AugmentParams {
    let mut rng = SeededRng::new(config.seed, seed);
    let (_, std) = vol.mean_std();
    let (min, max) = vol.min_max();
    let scale_factor = rng.uniform_in(config.scale_factor_range.lo, config.scale_factor_range.hi);
    let brightness_scale = rng.uniform_in(config.brightness_scale_range.lo, config.brightness_scale_range.hi);
    let shift_fraction = rng.uniform_in(config.brightness_shift_range.lo, config.brightness_shift_range.hi);
    let noise_fraction = rng.uniform_in(config.noise_sigma_range.lo, config.noise_sigma_range.hi);
    AugmentParams {
        noise_fraction,
        noise_sigma: noise_fraction * std,
        brightness_scale,
        shift_fraction,
        brightness_shift: shift_fraction * (max - min) as f64,
        scale_factor,
        noise_seed: rng.next_u64(),
    }
}

/// Zooms image and masks together, then applies brightness and noise to the image.
pub fn augment_sample(intensity: &Volume3, masks: &[Mask3], config: &AugmentConfig, seed: u64) -> Result<AugmentedSample, AugmentError> {
    config.validate()?;
    let params = draw_params(intensity, config, seed);
    let zoomed = scale_3d(intensity, params.scale_factor);
    let bright = if params.brightness_scale == 1.0 && params.brightness_shift == 0.0 {
        zoomed
    } else {
        brightness(&zoomed, params.brightness_scale, params.brightness_shift)
    };
    Ok(AugmentedSample {
        intensity: add_gaussian_noise(&bright, params.noise_sigma, params.noise_seed),
        masks: masks.iter().map(|m| scale_3d_mask(m, params.scale_factor)).collect(),
        params,
    })
}
