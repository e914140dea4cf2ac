//! Stereo samples, augmentation and masks.
//!
//! Disparity follows the left-view convention: the left pixel `(x, y)` shows the
//! same point as the right pixel `(x - d, y)`.

mod io;
mod synth;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, read_disparity, read_image, read_pfm, read_png16, save_dataset, write_disparity_png, write_pfm,
    write_png16, write_rgb_png, CalibrationRef, ManifestEntry,
};
pub use synth::{generate_synthetic_pair, synthetic_dataset, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub focal_px: f64,
    pub baseline_m: f64,
}

/// One rectified pair. Images are planar `[3, H, W]` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub id: String,
    pub left: Array3<f64>,
    pub right: Array3<f64>,
    pub gt_disparity: Option<Array2<f64>>,
    /// Present whenever `gt_disparity` is.
    pub valid_mask: Option<Array2<bool>>,
    pub calibration: Option<Calibration>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn is_labeled(&self) -> bool {
        self.gt_disparity.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.shape() != self.right.shape() || self.left.shape()[0] != 3 {
            return Err(Error::Data(format!(
                "{}: left {:?} and right {:?} must both be [3, H, W]",
                self.id,
                self.left.shape(),
                self.right.shape()
            )));
        }
        let hw = [self.height(), self.width()];
        match (&self.gt_disparity, &self.valid_mask) {
            (Some(gt), Some(mask)) => {
                if gt.shape() != hw || mask.shape() != hw {
                    return Err(Error::Data(format!("{}: GT or mask shape differs from the images", self.id)));
                }
            }
            (Some(_), None) => return Err(Error::Data(format!("{}: GT without a valid mask", self.id))),
            _ => {}
        }
        Ok(())
    }

    /// Marks GT at or beyond `s_max` (and non-finite GT) invalid.
    pub fn restrict_range(&mut self, s_max: usize) {
        if let (Some(gt), Some(mask)) = (&self.gt_disparity, &mut self.valid_mask) {
            Zip::from(mask).and(gt).for_each(|m, &d| *m = *m && d.is_finite() && d >= 0.0 && d < s_max as f64);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub gamma_range: (f64, f64),
    pub brightness_range: (f64, f64),
}

impl AugmentConfig {
    /// Full-size crop, no flip, no photometric change.
    pub fn identity(h: usize, w: usize) -> Self {
        Self { crop_h: h, crop_w: w, flip_prob: 0.0, gamma_range: (1.0, 1.0), brightness_range: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let contains_one = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= 1.0 && 1.0 <= hi;
        if !contains_one(self.gamma_range) || !contains_one(self.brightness_range) {
            return Err(Error::Config("gamma and brightness ranges must be positive and contain 1.0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Random crop, geometry-consistent horizontal flip, and shared gamma/brightness jitter.
pub fn augment<R: Rng + ?Sized>(sample: &StereoSample, cfg: &AugmentConfig, rng: &mut R) -> Result<StereoSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    if cfg.crop_h > h || cfg.crop_w > w {
        return Err(Error::Data(format!(
            "{}: {h}x{w} image smaller than the {}x{} crop",
            sample.id, cfg.crop_h, cfg.crop_w
        )));
    }
    let flipped;
    let src = if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        flipped = flip(sample);
        &flipped
    } else {
        sample
    };
    let y0 = rng.random_range(0..=h - cfg.crop_h);
    let x0 = rng.random_range(0..=w - cfg.crop_w);
    let mut out = crop(src, y0, x0, cfg.crop_h, cfg.crop_w);
    let gamma = sample_range(rng, cfg.gamma_range);
    let brightness = sample_range(rng, cfg.brightness_range);
    if gamma != 1.0 || brightness != 1.0 {
        let adjust = |v: f64| (brightness * v.powf(gamma)).clamp(0.0, 1.0);
        out.left.mapv_inplace(adjust);
        out.right.mapv_inplace(adjust);
    }
    Ok(out)
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn crop(sample: &StereoSample, y0: usize, x0: usize, h: usize, w: usize) -> StereoSample {
    let win = s![y0..y0 + h, x0..x0 + w];
    StereoSample {
        id: sample.id.clone(),
        left: sample.left.slice(s![.., y0..y0 + h, x0..x0 + w]).to_owned(),
        right: sample.right.slice(s![.., y0..y0 + h, x0..x0 + w]).to_owned(),
        gt_disparity: sample.gt_disparity.as_ref().map(|g| g.slice(win).to_owned()),
        valid_mask: sample.valid_mask.as_ref().map(|m| m.slice(win).to_owned()),
        calibration: sample.calibration,
    }
}

/// Swaps the views and mirrors them. The mirrored right view becomes the new
/// reference, so GT is re-expressed as right-view disparity before mirroring.
pub fn flip(sample: &StereoSample) -> StereoSample {
    let mirror3 = |a: &Array3<f64>| a.slice(s![.., .., ..;-1]).to_owned();
    let (gt, mask) = match (&sample.gt_disparity, &sample.valid_mask) {
        (Some(gt), Some(mask)) => {
            let (g, m) = left_to_right_disparity(gt.view(), mask.view());
            (Some(g.slice(s![.., ..;-1]).to_owned()), Some(m.slice(s![.., ..;-1]).to_owned()))
        }
        _ => (None, None),
    };
    StereoSample {
        id: sample.id.clone(),
        left: mirror3(&sample.right),
        right: mirror3(&sample.left),
        gt_disparity: gt,
        valid_mask: mask,
        calibration: sample.calibration,
    }
}

/// Forward-splats left-view disparity onto the right-view grid. Each valid left
/// pixel lands at `x - d`; the two neighbouring right pixels within half a pixel
/// take its value, the largest disparity (nearest surface) winning collisions.
pub fn left_to_right_disparity(gt: ArrayView2<f64>, mask: ArrayView2<bool>) -> (Array2<f64>, Array2<bool>) {
    let (h, w) = gt.dim();
    let mut out = Array2::from_elem((h, w), f64::NEG_INFINITY);
    let mut dist = Array2::from_elem((h, w), f64::INFINITY);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let d = gt[[y, x]];
            let u = x as f64 - d;
            let nearest = u.round();
            if nearest < 0.0 || nearest >= w as f64 {
                continue;
            }
            let ui = nearest as usize;
            let off = (u - nearest).abs();
            // z-buffer on disparity, then on sub-pixel distance
            let better = d > out[[y, ui]] + 1e-9 || ((d - out[[y, ui]]).abs() <= 1e-9 && off < dist[[y, ui]]);
            if off <= 0.5 && better {
                out[[y, ui]] = d;
                dist[[y, ui]] = off;
            }
        }
    }
    let valid = out.mapv(|v| v.is_finite());
    out.mapv_inplace(|v| if v.is_finite() { v } else { 0.0 });
    (out, valid)
}

/// Specular highlights: HSV saturation below 0.1 and value above 0.9.
pub fn reflective_mask(image: ArrayView3<f64>) -> Array2<bool> {
    let (r, g, b) = (image.index_axis(Axis(0), 0), image.index_axis(Axis(0), 1), image.index_axis(Axis(0), 2));
    let mut out = Array2::from_elem(r.dim(), false);
    Zip::from(&mut out).and(&r).and(&g).and(&b).for_each(|o, &r, &g, &b| {
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
        *o = sat < 0.1 && max > 0.9;
    });
    out
}

/// `d = f * B / z`; pixels with `z <= 0` (or non-finite) are invalid and set to 0.
pub fn depth_to_disparity(
    depth: ArrayView2<f64>,
    calibration: Option<&Calibration>,
) -> Result<(Array2<f64>, Array2<bool>)> {
    let c = calibration.ok_or_else(|| Error::Data("depth conversion needs calibration".into()))?;
    let fb = c.focal_px * c.baseline_m;
    let valid = depth.mapv(|z| z.is_finite() && z > 0.0);
    let disp = depth.mapv(|z| if z.is_finite() && z > 0.0 { fb / z } else { 0.0 });
    Ok((disp, valid))
}

/// `z = f * B / d` with `d` clamped to at least `min_disparity`.
pub fn disparity_to_depth(disparity: ArrayView2<f64>, calibration: &Calibration, min_disparity: f64) -> Array2<f64> {
    let fb = calibration.focal_px * calibration.baseline_m;
    disparity.mapv(|d| fb / d.max(min_disparity))
}

/// Bilinear sample of row `y` of channel `c` at horizontal position `u` (clamped at the borders).
pub fn sample_row(img: ArrayView3<f64>, c: usize, y: usize, u: f64) -> f64 {
    let w = img.shape()[2];
    let u = u.clamp(0.0, (w - 1) as f64);
    let i = u.floor() as usize;
    let t = u - i as f64;
    if i + 1 >= w {
        return img[[c, y, w - 1]];
    }
    (1.0 - t) * img[[c, y, i]] + t * img[[c, y, i + 1]]
}

/// Mean `|left(x, y) - right(x - d, y)|` over valid pixels, bilinear in `x`.
pub fn warp_residual(left: ArrayView3<f64>, right: ArrayView3<f64>, gt: ArrayView2<f64>, mask: ArrayView2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            for c in 0..3 {
                sum += (left[[c, y, x]] - sample_row(right, c, y, x as f64 - gt[[y, x]])).abs();
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
