//! Procedural stereo pairs with exact disparity.
//!
//! The right view samples a continuous value-noise texture at integer columns.
//! The left view at `(x, y)` is the right view bilinearly sampled at `x - d`,
//! or the texture itself where `x - d` leaves the frame, so re-warping the
//! right view with the GT reproduces the left view exactly.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_row, Calibration, StereoSample};
use crate::error::{Error, Result};

const OCTAVES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub s_max: usize,
    pub n_blobs: usize,
    /// Lattice frequency of the coarsest texture octave, in cycles per pixel.
    pub texture_scale: f64,
    pub seed: u64,
    pub base_disparity: f64,
    /// Disparity change per pixel along x and y.
    pub slope_x: f64,
    pub slope_y: f64,
    /// Upper bound on the magnitude of each Gaussian bump.
    pub max_blob_amplitude: f64,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, s_max: usize, n_blobs: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            s_max,
            n_blobs,
            texture_scale: 0.25,
            seed,
            base_disparity: s_max as f64 / 4.0,
            slope_x: 0.0,
            slope_y: 0.0,
            max_blob_amplitude: s_max as f64 / 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic image must be non-empty".into()));
        }
        if self.s_max < 2 {
            return Err(Error::Config(format!("s_max {} must be at least 2", self.s_max)));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale <= 1.0) {
            return Err(Error::Config(format!("texture_scale {} outside (0, 1]", self.texture_scale)));
        }
        if !(0.0..self.s_max as f64).contains(&self.base_disparity) {
            return Err(Error::Config(format!("base disparity {} outside [0, s_max)", self.base_disparity)));
        }
        if !(self.max_blob_amplitude >= 0.0 && self.max_blob_amplitude < self.s_max as f64) {
            return Err(Error::Config(format!(
                "blob amplitude {} must be in [0, s_max = {})",
                self.max_blob_amplitude, self.s_max
            )));
        }
        Ok(())
    }
}

/// Multi-octave value noise over `u in [u_min, u_max]`, `y in [0, height)`.
struct Texture {
    u_min: f64,
    octaves: Vec<(f64, f64, Array3<f64>)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, u_min: f64, u_max: f64, height: usize, base_freq: f64) -> Self {
        let mut octaves = Vec::with_capacity(OCTAVES);
        let mut amp_total = 0.0;
        for o in 0..OCTAVES {
            let freq = (base_freq * (1 << o) as f64).min(1.0);
            let amp = 0.5f64.powi(o as i32);
            amp_total += amp;
            let nu = ((u_max - u_min) * freq).ceil() as usize + 2;
            let ny = (height as f64 * freq).ceil() as usize + 2;
            let lattice = Array3::from_shape_fn((3, ny, nu), |_| rng.random_range(0.0..1.0));
            octaves.push((freq, amp, lattice));
        }
        for o in &mut octaves {
            o.1 /= amp_total;
        }
        Self { u_min, octaves }
    }

    fn at(&self, c: usize, u: f64, y: usize) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let mut v = 0.0;
        for (freq, amp, lat) in &self.octaves {
            let fu = (u - self.u_min) * freq;
            let fy = y as f64 * freq;
            let (iu, iy) = (fu.floor() as usize, fy.floor() as usize);
            let (tu, ty) = (smooth(fu - iu as f64), smooth(fy - iy as f64));
            let top = (1.0 - tu) * lat[[c, iy, iu]] + tu * lat[[c, iy, iu + 1]];
            let bottom = (1.0 - tu) * lat[[c, iy + 1, iu]] + tu * lat[[c, iy + 1, iu + 1]];
            v += amp * ((1.0 - ty) * top + ty * bottom);
        }
        v
    }
}

/// Renders one pair with GT disparity, validity (in-frame and unoccluded) and calibration.
pub fn generate_synthetic_pair(spec: &SynthSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..spec.n_blobs)
        .map(|_| {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let sigma = rng.random_range(side / 8.0..=side / 3.0).max(1.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * spec.max_blob_amplitude * rng.random_range(0.3..=1.0);
            (cx, cy, sigma, amp)
        })
        .collect();
    let upper = spec.s_max as f64 - 1.0 - 1e-6;
    let gt = Array2::from_shape_fn((h, w), |(y, x)| {
        let (xf, yf) = (x as f64, y as f64);
        let mut d = spec.base_disparity + spec.slope_x * xf + spec.slope_y * yf;
        for &(cx, cy, sigma, amp) in &blobs {
            d += amp * (-((xf - cx).powi(2) + (yf - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
        d.clamp(0.0, upper)
    });

    let texture = Texture::new(&mut rng, -(spec.s_max as f64) - 2.0, w as f64 + 2.0, h, spec.texture_scale);
    let right = Array3::from_shape_fn((3, h, w), |(c, y, u)| texture.at(c, u as f64, y));
    let mut left = Array3::zeros((3, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        let mut nearest_right = f64::INFINITY;
        for x in (0..w).rev() {
            let u = x as f64 - gt[[y, x]];
            for c in 0..3 {
                left[[c, y, x]] = if u >= 0.0 { sample_row(right.view(), c, y, u) } else { texture.at(c, u, y) };
            }
            valid[[y, x]] = u >= 0.0 && u < nearest_right;
            nearest_right = nearest_right.min(u);
        }
    }
    Ok(StereoSample {
        id: format!("synth_{}", spec.seed),
        left,
        right,
        gt_disparity: Some(gt),
        valid_mask: Some(valid),
        calibration: Some(Calibration { focal_px: w as f64, baseline_m: 0.1 }),
    })
}

/// `count` scenes varying base disparity, slant and blob layout around `template`.
pub fn synthetic_dataset(template: &SynthSpec, count: usize, seed: u64) -> Result<Vec<StereoSample>> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = template.s_max as f64;
    let max_slope = 0.1 * s / template.width.max(template.height) as f64;
    (0..count)
        .map(|i| {
            let spec = SynthSpec {
                seed: rng.random(),
                base_disparity: rng.random_range(0.15 * s..0.45 * s),
                slope_x: rng.random_range(-max_slope..=max_slope),
                slope_y: rng.random_range(-max_slope..=max_slope),
                ..template.clone()
            };
            let mut sample = generate_synthetic_pair(&spec)?;
            sample.id = format!("synth_{seed}_{i:04}");
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::warp_residual;
    use super::*;

    /// Independent per-pixel oracle: linear interpolation written out by hand.
    fn residual_oracle(s: &StereoSample) -> f64 {
        let (gt, mask) = (s.gt_disparity.as_ref().unwrap(), s.valid_mask.as_ref().unwrap());
        let (h, w) = gt.dim();
        let (mut sum, mut n) = (0.0, 0);
        for y in 0..h {
            for x in 0..w {
                if !mask[[y, x]] {
                    continue;
                }
                let u = x as f64 - gt[[y, x]];
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(w - 1);
                let t = u - i0 as f64;
                for c in 0..3 {
                    let r = s.right[[c, y, i0]] * (1.0 - t) + s.right[[c, y, i1]] * t;
                    sum += (s.left[[c, y, x]] - r).abs();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn zero_disparity_is_identity() {
        let mut spec = SynthSpec::new(16, 32, 8, 0, 1);
        spec.base_disparity = 0.0;
        let s = generate_synthetic_pair(&spec).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.gt_disparity.unwrap().iter().all(|&d| d == 0.0));
        assert!(s.valid_mask.unwrap().iter().all(|&m| m));
    }

    #[test]
    fn constant_shift() {
        let mut spec = SynthSpec::new(16, 32, 8, 0, 2);
        spec.base_disparity = 3.0;
        let s = generate_synthetic_pair(&spec).unwrap();
        let mask = s.valid_mask.as_ref().unwrap();
        for y in 0..16 {
            for x in 0..32 {
                assert_eq!(mask[[y, x]], x >= 3);
                if x >= 3 {
                    for c in 0..3 {
                        assert_eq!(s.left[[c, y, x]], s.right[[c, y, x - 3]]);
                    }
                }
            }
        }
    }

    #[test]
    fn rewarp_residual_is_exact() {
        let s = generate_synthetic_pair(&SynthSpec::new(64, 128, 32, 3, 7)).unwrap();
        let oracle = residual_oracle(&s);
        assert!(oracle < 1e-6, "oracle residual {oracle}");
        let (gt, mask) = (s.gt_disparity.as_ref().unwrap(), s.valid_mask.as_ref().unwrap());
        assert!(warp_residual(s.left.view(), s.right.view(), gt.view(), mask.view()) < 1e-6);
        for y in 0..64 {
            for x in 0..128 {
                if x as f64 - gt[[y, x]] < 0.0 {
                    assert!(!mask[[y, x]]);
                }
                assert!(gt[[y, x]] >= 0.0 && gt[[y, x]] < 32.0);
            }
        }
        assert!(s.left.iter().chain(s.right.iter()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn validity_matches_brute_force_visibility() {
        let mut spec = SynthSpec::new(32, 96, 32, 4, 3);
        spec.max_blob_amplitude = 24.0;
        let s = generate_synthetic_pair(&spec).unwrap();
        let (gt, mask) = (s.gt_disparity.unwrap(), s.valid_mask.unwrap());
        let t = |x: usize, y: usize| x as f64 - gt[[y, x]];
        let mut occluded = 0;
        for y in 0..32 {
            for x in 0..96 {
                let hidden = ((x + 1)..96).any(|x2| t(x2, y) <= t(x, y));
                if t(x, y) >= 0.0 && hidden {
                    occluded += 1;
                }
                assert_eq!(mask[[y, x]], t(x, y) >= 0.0 && !hidden, "pixel ({x}, {y})");
            }
        }
        assert!(occluded > 0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SynthSpec::new(16, 16, 8, 2, 0);
        spec.max_blob_amplitude = 8.0;
        assert!(matches!(generate_synthetic_pair(&spec), Err(Error::Config(_))));
        assert!(generate_synthetic_pair(&SynthSpec::new(16, 16, 1, 0, 0)).is_err());
    }

    #[test]
    fn dataset_is_reproducible() {
        let t = SynthSpec::new(16, 32, 16, 2, 0);
        let a = synthetic_dataset(&t, 3, 11).unwrap();
        let b = synthetic_dataset(&t, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].left, a[1].left);
    }
}
