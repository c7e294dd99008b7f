//! Whole-volume prediction with a depth-sliding window, Otsu binarisation
//! and the two-stage periosteal then endosteal cascade.
//!
//! Windows span the full in-plane extent and `window_depth` slices, with a
//! stride of one slice. Overlapping outputs are averaged per voxel. Volumes
//! thinner than the window are padded by replicating their edge slices and
//! cropped back afterwards.

use std::time::Instant;

use num_bigint::BigUint;
use thiserror::Error;

use crate::nn::{NnError, Tensor, VNetModel};
use crate::volgrid::{dilate, mask_and, Mask3, VolgridError, Volume3};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volgrid(#[from] VolgridError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all values fall into one histogram bin")]
    DegenerateHistogram,
}

pub const DEFAULT_WINDOW_DEPTH: usize = 64;
pub const DEFAULT_IN_PLANE: [usize; 2] = [192, 192];
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    /// Slices in the unpadded volume.
    pub slices: usize,
    pub window_depth: usize,
    /// Expected `(nx, ny)`; `None` accepts any in-plane size.
    pub in_plane: Option<[usize; 2]>,
    pub pad_before: usize,
    pub pad_after: usize,
    /// Window start slices in the padded volume.
    pub starts: Vec<usize>,
}

impl WindowPlan {
    pub fn padded_slices(&self) -> usize {
        self.slices + self.pad_before + self.pad_after
    }

    pub fn window_count(&self) -> usize {
        self.starts.len()
    }

    /// Number of windows covering each slice of the unpadded volume.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.slices];
        for &s in &self.starts {
            for z in s..s + self.window_depth {
                if z >= self.pad_before && z < self.pad_before + self.slices {
                    c[z - self.pad_before] += 1;
                }
            }
        }
        c
    }

    pub fn with_in_plane(mut self, nx: usize, ny: usize) -> Self {
        self.in_plane = Some([nx, ny]);
        self
    }
}

pub fn plan_windows(slices: usize, window_depth: usize) -> WindowPlan {
    assert!(slices >= 1 && window_depth >= 1, "slices and window depth must be positive");
    if slices >= window_depth {
        return WindowPlan {
            slices,
            window_depth,
            in_plane: None,
            pad_before: 0,
            pad_after: 0,
            starts: (0..=slices - window_depth).collect(),
        };
    }
    let pad = window_depth - slices;
    WindowPlan {
        slices,
        window_depth,
        in_plane: None,
        pad_before: pad / 2,
        pad_after: pad - pad / 2,
        starts: vec![0],
    }
}

/// Anything that maps an intensity window to per-voxel foreground probabilities.
pub trait WindowModel {
    /// Returns one probability per voxel of `window`, in its voxel order.
    fn predict_window(&mut self, window: &Volume3) -> Result<Vec<f32>, InferenceError>;
}

impl WindowModel for VNetModel<f32> {
    fn predict_window(&mut self, window: &Volume3) -> Result<Vec<f32>, InferenceError> {
        let [nx, ny, nz] = window.dims();
        // Grid order (x fastest) is the tensor's (w fastest) order.
        let x = Tensor::new(vec![1, 1, nz, ny, nx], window.data().to_vec())?;
        let p = self.net.predict(&x)?;
        Ok(p.data[window.len()..].to_vec())
    }
}

/// Adapts a closure into a [`WindowModel`].
pub struct FnModel<F>(pub F);

impl<F: FnMut(&Volume3) -> Vec<f32>> WindowModel for FnModel<F> {
    fn predict_window(&mut self, window: &Volume3) -> Result<Vec<f32>, InferenceError> {
        Ok((self.0)(window))
    }
}

/// Mean of all window outputs covering each voxel.
pub fn predict_volume<M: WindowModel + ?Sized>(model: &mut M, vol: &Volume3, plan: &WindowPlan) -> Result<Volume3, InferenceError> {
    let [nx, ny, nz] = vol.dims();
    if nz != plan.slices {
        return Err(InferenceError::ShapeMismatch(format!("volume has {nz} slices, plan expects {}", plan.slices)));
    }
    if let Some([px, py]) = plan.in_plane {
        if [px, py] != [nx, ny] {
            return Err(InferenceError::ShapeMismatch(format!("in-plane {nx}x{ny}, plan expects {px}x{py}")));
        }
    }
    let padded = vol.pad_z_replicate(plan.pad_before, plan.pad_after);
    let plane = nx * ny;
    let mut sum = vec![0.0f64; plane * padded.dims()[2]];
    let mut count = vec![0u32; padded.dims()[2]];
    for &s in &plan.starts {
        let window = padded.crop_box([0, 0, s as i64], [nx, ny, plan.window_depth])?;
        let out = model.predict_window(&window)?;
        if out.len() != window.len() {
            return Err(InferenceError::ShapeMismatch(format!(
                "model returned {} values for {} voxels",
                out.len(),
                window.len()
            )));
        }
        for (acc, &p) in sum[s * plane..(s + plan.window_depth) * plane].iter_mut().zip(&out) {
            *acc += p as f64;
        }
        count[s..s + plan.window_depth].iter_mut().for_each(|c| *c += 1);
    }
    let data = (0..plane * nz)
        .map(|i| {
            let z = i / plane + plan.pad_before;
            (sum[z * plane + i % plane] / count[z] as f64) as f32
        })
        .collect();
    Ok(Volume3::new(vol.dims(), vol.spacing(), data)?)
}

/// Histogram bin of a probability: `min(floor(v * 256), 255)`, negatives in bin 0.
pub fn otsu_bin(v: f32) -> usize {
    ((v.max(0.0) as f64 * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

pub fn histogram(values: &[f32]) -> [u64; OTSU_BINS] {
    let mut h = [0u64; OTSU_BINS];
    for &v in values {
        h[otsu_bin(v)] += 1;
    }
    h
}

/// Otsu bin boundary `k` (threshold `k / 256`) over a 256-bin histogram;
/// class one is bins `>= k`. Between-class variance is compared exactly
/// and ties resolve to the smallest `k`.
pub fn otsu_boundary(h: &[u64; OTSU_BINS]) -> Result<usize, InferenceError> {
    let n: u64 = h.iter().sum();
    if h.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(InferenceError::DegenerateHistogram);
    }
    let total: u128 = h.iter().enumerate().map(|(b, &c)| b as u128 * c as u128).sum();
    // Score ~ (S0 * n - S * n0)^2 / (n0 * n1), proportional to the between-class variance.
    let mut best: Option<(usize, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for k in 1..OTSU_BINS {
        n0 += h[k - 1] as u128;
        s0 += (k as u128 - 1) * h[k - 1] as u128;
        let n1 = n as u128 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 * n as u128).abs_diff(total * n0);
        let num = BigUint::from(d) * BigUint::from(d);
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    Ok(best.map(|(k, _, _)| k).expect("two occupied bins give a valid split"))
}

pub fn otsu_threshold(prob: &Volume3) -> Result<f64, InferenceError> {
    Ok(otsu_boundary(&histogram(prob.data()))? as f64 / OTSU_BINS as f64)
}

pub fn binarize(prob: &Volume3, threshold: f64) -> Mask3 {
    prob.map(|p| p as f64 > threshold)
}

/// Otsu threshold, or 0.5 when the histogram is degenerate.
pub fn threshold_or_default(prob: &Volume3) -> f64 {
    match otsu_threshold(prob) {
        Ok(t) => t,
        Err(_) => {
            log::warn!("probability map occupies one histogram bin; using threshold 0.5");
            0.5
        }
    }
}

/// Probability map, mask and threshold of one segmentation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub probability: Volume3,
    pub mask: Mask3,
    pub threshold: f64,
    pub seconds: f64,
}

pub fn segment<M: WindowModel + ?Sized>(model: &mut M, vol: &Volume3, window_depth: usize) -> Result<StageOutput, InferenceError> {
    let t = Instant::now();
    let plan = plan_windows(vol.dims()[2], window_depth);
    let probability = predict_volume(model, vol, &plan)?;
    let threshold = threshold_or_default(&probability);
    let mask = binarize(&probability, threshold);
    Ok(StageOutput {
        probability,
        mask,
        threshold,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeConfig {
    pub window_depth: usize,
    /// Voxels by which the periosteal mask is grown before masking stage two.
    pub dilation_margin: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            window_depth: DEFAULT_WINDOW_DEPTH,
            dilation_margin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub periosteal: StageOutput,
    pub endosteal: StageOutput,
}

/// Intensities outside the (dilated) mask set to zero.
pub fn mask_intensity(vol: &Volume3, mask: &Mask3, margin: usize) -> Result<Volume3, InferenceError> {
    vol.check_geometry(mask)?;
    let keep = dilate(mask, margin);
    let data = vol.data().iter().zip(keep.data()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    Ok(Volume3::new(vol.dims(), vol.spacing(), data)?)
}

/// Stage one segments the periosteal surface; stage two sees only the
/// intensities inside it and its mask is intersected with stage one's.
pub fn cascade_segment<P, E>(periosteal: &mut P, endosteal: &mut E, vol: &Volume3, cfg: &CascadeConfig) -> Result<CascadeResult, InferenceError>
where
    P: WindowModel + ?Sized,
    E: WindowModel + ?Sized,
{
    let peri = segment(periosteal, vol, cfg.window_depth)?;
    let t = Instant::now();
    let masked = mask_intensity(vol, &peri.mask, cfg.dilation_margin)?;
    let mut endo = segment(endosteal, &masked, cfg.window_depth)?;
    endo.mask = mask_and(&endo.mask, &peri.mask)?;
    endo.seconds = t.elapsed().as_secs_f64();
    Ok(CascadeResult {
        periosteal: peri,
        endosteal: endo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};
    use crate::volgrid::{mask_subset, Spacing3};

    fn sp() -> Spacing3 {
        Spacing3::isotropic(1.0).unwrap()
    }

    #[test]
    fn window_plans() {
        let p = plan_windows(100, 64);
        assert_eq!(p.window_count(), 37);
        assert_eq!(p.starts.last(), Some(&36));
        let p = plan_windows(64, 64);
        assert_eq!((p.window_count(), p.starts[0]), (1, 0));
        let p = plan_windows(40, 64);
        assert_eq!((p.window_count(), p.pad_before, p.pad_after, p.padded_slices()), (1, 12, 12, 64));
        let p = plan_windows(41, 64);
        assert_eq!((p.pad_before, p.pad_after), (11, 12));
    }

    #[test]
    fn coverage_matches_interval_counting() {
        let p = plan_windows(100, 64);
        let c = p.coverage();
        assert_eq!(c[0], 1);
        assert_eq!(c[50], 37);
        for (z, &n) in c.iter().enumerate() {
            let brute = (0..=36).filter(|&s| s <= z && z < s + 64).count();
            assert_eq!(n, brute);
        }
    }

    #[test]
    fn constant_stub_aggregates_to_constant() {
        let vol = Volume3::from_fn([4, 3, 10], sp(), |x, y, z| (x + y + z) as f32);
        for depth in [4, 10, 16] {
            let plan = plan_windows(10, depth);
            let mut m = FnModel(|w: &Volume3| vec![0.3f32; w.len()]);
            let p = predict_volume(&mut m, &vol, &plan).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        }
    }

    #[test]
    fn single_window_passes_through_and_padding_crops_back() {
        let vol = Volume3::from_fn([3, 2, 6], sp(), |x, y, z| (x + 10 * y + 100 * z) as f32 / 1000.0);
        let mut id = FnModel(|w: &Volume3| w.data().to_vec());
        assert_eq!(predict_volume(&mut id, &vol, &plan_windows(6, 6)).unwrap(), vol);
        assert_eq!(predict_volume(&mut id, &vol, &plan_windows(6, 9)).unwrap(), vol);
        let plan = plan_windows(6, 6).with_in_plane(4, 4);
        assert!(matches!(predict_volume(&mut id, &vol, &plan), Err(InferenceError::ShapeMismatch(_))));
    }

    #[test]
    fn aggregation_is_a_mean_of_windows() {
        // Each window reports its own start index as the probability.
        let vol = Volume3::filled([2, 2, 7], sp(), 0.0);
        let plan = plan_windows(7, 3);
        let mut starts = plan.starts.clone().into_iter();
        let mut m = FnModel(move |w: &Volume3| vec![starts.next().unwrap() as f32 / 10.0; w.len()]);
        let p = predict_volume(&mut m, &vol, &plan).unwrap();
        for z in 0..7 {
            let covering: Vec<f64> = (0..=4).filter(|&s| s <= z && z < s + 3).map(|s| s as f64 / 10.0).collect();
            let want = covering.iter().sum::<f64>() / covering.len() as f64;
            assert!((p.get(0, 0, z) as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn otsu_two_level_and_degenerate() {
        let vals: Vec<f32> = (0..100).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let vol = Volume3::new([100, 1, 1], sp(), vals).unwrap();
        let t = otsu_threshold(&vol).unwrap();
        assert!(t > 0.1 && t < 0.9);
        // Bins 25 and 230: every boundary in 26..=230 separates them equally; lowest wins.
        assert_eq!(t, 26.0 / 256.0);
        assert!(matches!(
            otsu_threshold(&Volume3::filled([3, 3, 3], sp(), 0.4)),
            Err(InferenceError::DegenerateHistogram)
        ));
        assert_eq!(threshold_or_default(&Volume3::filled([3, 3, 3], sp(), 0.4)), 0.5);
    }

    #[test]
    fn binarize_cases() {
        let vol = Volume3::new([4, 1, 1], sp(), vec![0.2, 0.7, 0.2, 0.7]).unwrap();
        assert_eq!(binarize(&vol, 0.5).data(), &[false, true, false, true]);
        assert_eq!(binarize(&vol, 1.0).count(), 0);
        assert_eq!(binarize(&vol, 0.1).count(), 4);
    }

    fn noiseless_spheres() -> crate::phantom::PhantomSample {
        let spec = PhantomSpec {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::sphere([16.0, 16.0, 12.0], 8.0, 2.5)
        };
        generate(&spec, [32, 32, 24], sp()).unwrap()
    }

    #[test]
    fn oracle_cascade_recovers_ground_truth() {
        let s = noiseless_spheres();
        let lv = s.spec.intensity_levels;
        let bg = lv.background as f32;
        let trab = lv.trabecular as f32;
        let mut peri = FnModel(move |w: &Volume3| w.data().iter().map(|&v| if v != bg { 1.0 } else { 0.0 }).collect());
        let mut endo = FnModel(move |w: &Volume3| w.data().iter().map(|&v| if v == trab { 1.0 } else { 0.0 }).collect());
        let cfg = CascadeConfig {
            window_depth: 16,
            dilation_margin: 1,
        };
        let r = cascade_segment(&mut peri, &mut endo, &s.intensity, &cfg).unwrap();
        assert_eq!(r.periosteal.mask, s.periosteal);
        assert_eq!(r.endosteal.mask, s.endosteal);
        assert!(mask_subset(&r.endosteal.mask, &r.periosteal.mask).unwrap());
    }

    #[test]
    fn all_ones_stage_two_reproduces_periosteal_mask() {
        let s = noiseless_spheres();
        let bg = s.spec.intensity_levels.background as f32;
        let mut peri = FnModel(move |w: &Volume3| w.data().iter().map(|&v| if v != bg { 0.9 } else { 0.1 }).collect());
        let mut ones = FnModel(|w: &Volume3| vec![1.0f32; w.len()]);
        let r = cascade_segment(
            &mut peri,
            &mut ones,
            &s.intensity,
            &CascadeConfig {
                window_depth: 8,
                dilation_margin: 1,
            },
        )
        .unwrap();
        assert_eq!(r.endosteal.mask, r.periosteal.mask);
    }

    #[test]
    fn masking_zeroes_outside_the_dilated_mask() {
        let vol = Volume3::filled([5, 5, 5], sp(), 7.0);
        let m = Mask3::from_fn([5, 5, 5], sp(), |x, y, z| (x, y, z) == (2, 2, 2));
        let out = mask_intensity(&vol, &m, 1).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 7.0).count(), 27);
        assert_eq!(mask_intensity(&vol, &m, 0).unwrap().data().iter().filter(|&&v| v == 7.0).count(), 1);
    }
}
