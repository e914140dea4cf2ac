//! Disparity and depth error metrics and evaluation reports.

use std::collections::BTreeMap;

use ndarray::{ArrayView, ArrayView2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Calibration;

/// Outlier thresholds reported by default, in pixels.
pub const OUTLIER_THRESHOLDS: [u32; 4] = [1, 2, 3, 4];
/// Smallest disparity used when converting to depth.
pub const MIN_DISPARITY: f64 = 1e-3;

fn masked_errors<D: Dimension>(d: ArrayView<f64, D>, gt: ArrayView<f64, D>, mask: ArrayView<bool, D>) -> Vec<f64> {
    let mut out = Vec::new();
    Zip::from(&d).and(&gt).and(&mask).for_each(|&p, &g, &m| {
        if m {
            out.push(p - g);
        }
    });
    out
}

/// Mean absolute error over valid pixels; 0 when none are valid.
pub fn mae<D: Dimension>(d: ArrayView<f64, D>, gt: ArrayView<f64, D>, mask: ArrayView<bool, D>) -> f64 {
    let e = masked_errors(d, gt, mask);
    if e.is_empty() {
        0.0
    } else {
        e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64
    }
}

/// Root-mean-square error over valid pixels; 0 when none are valid.
pub fn rmse<D: Dimension>(d: ArrayView<f64, D>, gt: ArrayView<f64, D>, mask: ArrayView<bool, D>) -> f64 {
    let e = masked_errors(d, gt, mask);
    if e.is_empty() {
        0.0
    } else {
        (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
    }
}

/// Percentage of valid pixels whose error exceeds `n` pixels (strictly).
pub fn outlier_pct<D: Dimension>(d: ArrayView<f64, D>, gt: ArrayView<f64, D>, mask: ArrayView<bool, D>, n: f64) -> f64 {
    let e = masked_errors(d, gt, mask);
    if e.is_empty() {
        0.0
    } else {
        100.0 * e.iter().filter(|v| v.abs() > n).count() as f64 / e.len() as f64
    }
}

/// Sum of per-sample mean confidences.
pub fn scu(mean_confidences: &[f64]) -> f64 {
    mean_confidences.iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Valid pixels whose predicted disparity was raised to [`MIN_DISPARITY`].
    pub clamped: usize,
}

/// Depth errors of predicted disparity `d` against `gt_depth`, in the depth's units.
pub fn depth_metrics(
    d: ArrayView2<f64>,
    calibration: &Calibration,
    gt_depth: ArrayView2<f64>,
    mask: ArrayView2<bool>,
) -> DepthMetrics {
    let fb = calibration.focal_px * calibration.baseline_m;
    let mut clamped = 0;
    Zip::from(&d).and(&mask).for_each(|&v, &m| {
        if m && v < MIN_DISPARITY {
            clamped += 1;
        }
    });
    let depth = d.mapv(|v| fb / v.max(MIN_DISPARITY));
    DepthMetrics {
        mae: mae(depth.view(), gt_depth, mask),
        rmse: rmse(depth.view(), gt_depth, mask),
        clamped,
    }
}

/// Metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub valid_pixels: usize,
    pub valid_fraction: f64,
    pub mae_px: f64,
    pub rmse_px: f64,
    pub outlier_pct: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_mae_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_rmse_mm: Option<f64>,
    #[serde(default)]
    pub depth_clamped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    #[serde(skip)]
    sums: PixelSums,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PixelSums {
    abs: f64,
    sq: f64,
    outliers: [usize; 4],
}

impl SampleMetrics {
    /// Disparity metrics plus depth metrics when calibration is known. Depth
    /// GT defaults to the GT disparity converted with the same calibration;
    /// depth is reported in millimetres assuming a baseline in metres.
    pub fn compute(
        id: &str,
        d: ArrayView2<f64>,
        gt: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        calibration: Option<&Calibration>,
        gt_depth: Option<ArrayView2<f64>>,
    ) -> Self {
        let errors = masked_errors(d, gt, mask);
        let n = errors.len();
        let mut sums = PixelSums::default();
        for e in &errors {
            sums.abs += e.abs();
            sums.sq += e * e;
            for (k, &t) in OUTLIER_THRESHOLDS.iter().enumerate() {
                if e.abs() > t as f64 {
                    sums.outliers[k] += 1;
                }
            }
        }
        let outlier_pct = OUTLIER_THRESHOLDS
            .iter()
            .map(|&t| (t.to_string(), outlier_pct(d, gt, mask, t as f64)))
            .collect();
        let depth = calibration.map(|c| {
            let fb = c.focal_px * c.baseline_m;
            let converted;
            let gt_depth = match gt_depth {
                Some(z) => z,
                None => {
                    converted = gt.mapv(|v| fb / v.max(MIN_DISPARITY));
                    converted.view()
                }
            };
            depth_metrics(d, c, gt_depth, mask)
        });
        Self {
            id: id.to_owned(),
            valid_pixels: n,
            valid_fraction: n as f64 / mask.len().max(1) as f64,
            mae_px: mae(d, gt, mask),
            rmse_px: rmse(d, gt, mask),
            outlier_pct,
            depth_mae_mm: depth.map(|m| m.mae * 1000.0),
            depth_rmse_mm: depth.map(|m| m.rmse * 1000.0),
            depth_clamped: depth.map_or(0, |m| m.clamped),
            mean_confidence: None,
            branch: None,
            sums,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average of per-sample metrics.
    #[default]
    PerSample,
    /// Metrics over all valid pixels pooled together.
    Population,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_px: f64,
    pub rmse_px: f64,
    pub outlier_pct: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_mae_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_rmse_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scu: Option<f64>,
    pub aggregation: Aggregation,
    /// Samples dropped for having too few valid pixels.
    #[serde(default)]
    pub excluded: Vec<String>,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    /// Aggregates samples whose valid fraction is at least `min_valid_fraction`
    /// (samples without any valid pixel are always dropped).
    pub fn aggregate(samples: Vec<SampleMetrics>, aggregation: Aggregation, min_valid_fraction: f64) -> Self {
        let (kept, dropped): (Vec<_>, Vec<_>) =
            samples.into_iter().partition(|s| s.valid_pixels > 0 && s.valid_fraction >= min_valid_fraction);
        let excluded = dropped.into_iter().map(|s| s.id).collect();
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| {
            if kept.is_empty() {
                0.0
            } else {
                kept.iter().map(f).sum::<f64>() / kept.len() as f64
            }
        };
        let mean_opt = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| {
            let v: Vec<f64> = kept.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let pixels: usize = kept.iter().map(|s| s.valid_pixels).sum();
        let (mae_px, rmse_px, outlier_pct) = match aggregation {
            Aggregation::PerSample => (
                mean(&|s| s.mae_px),
                mean(&|s| s.rmse_px),
                OUTLIER_THRESHOLDS
                    .iter()
                    .map(|t| (t.to_string(), mean(&|s| s.outlier_pct[&t.to_string()])))
                    .collect(),
            ),
            Aggregation::Population => {
                let p = pixels.max(1) as f64;
                let abs: f64 = kept.iter().map(|s| s.sums.abs).sum();
                let sq: f64 = kept.iter().map(|s| s.sums.sq).sum();
                let outliers = OUTLIER_THRESHOLDS
                    .iter()
                    .enumerate()
                    .map(|(k, t)| (t.to_string(), 100.0 * kept.iter().map(|s| s.sums.outliers[k]).sum::<usize>() as f64 / p))
                    .collect();
                (abs / p, (sq / p).sqrt(), outliers)
            }
        };
        Self {
            mae_px,
            rmse_px,
            outlier_pct,
            depth_mae_mm: mean_opt(&|s| s.depth_mae_mm),
            depth_rmse_mm: mean_opt(&|s| s.depth_rmse_mm),
            scu: None,
            aggregation,
            excluded,
            per_sample: kept,
        }
    }

    /// One row per sample followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_owned(), "mae_px".into(), "rmse_px".into()];
        header.extend(OUTLIER_THRESHOLDS.iter().map(|t| format!("outlier_{t}px_pct")));
        header.extend(["depth_mae_mm".into(), "depth_rmse_mm".into()]);
        w.write_record(&header).expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut row = |id: &str, mae: f64, rmse: f64, out: &BTreeMap<String, f64>, dm: Option<f64>, dr: Option<f64>| {
            let mut r = vec![id.to_owned(), format!("{mae:.6}"), format!("{rmse:.6}")];
            r.extend(OUTLIER_THRESHOLDS.iter().map(|t| format!("{:.4}", out[&t.to_string()])));
            r.extend([opt(dm), opt(dr)]);
            w.write_record(&r).expect("in-memory write");
        };
        for s in &self.per_sample {
            row(&s.id, s.mae_px, s.rmse_px, &s.outlier_pct, s.depth_mae_mm, s.depth_rmse_mm);
        }
        row("mean", self.mae_px, self.rmse_px, &self.outlier_pct, self.depth_mae_mm, self.depth_rmse_mm);
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    fn fixture(errors: &[f64]) -> (Array1<f64>, Array1<f64>, Array1<bool>) {
        let gt = Array1::from_elem(errors.len(), 10.0);
        let d = &gt + &arr1(errors);
        (d, gt, Array1::from_elem(errors.len(), true))
    }

    #[test]
    fn hand_computed_fixtures() {
        let (d, gt, m) = fixture(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mae(d.view(), gt.view(), m.view()), 0.0);
        assert_eq!(rmse(d.view(), gt.view(), m.view()), 0.0);
        let (d, gt, m) = fixture(&[1.0, -3.0]);
        assert_eq!(mae(d.view(), gt.view(), m.view()), 2.0);
        let (d, gt, m) = fixture(&[0.0, 2.0]);
        assert_eq!(rmse(d.view(), gt.view(), m.view()), 2f64.sqrt());
        let (d, gt, m) = fixture(&[0.0, 1.0, 2.0, 4.0]);
        assert_eq!(outlier_pct(d.view(), gt.view(), m.view(), 3.0), 25.0);
        let (d, gt, m) = fixture(&[3.0, 3.0, 0.0, 0.0]);
        assert_eq!(outlier_pct(d.view(), gt.view(), m.view(), 3.0), 0.0);
    }

    #[test]
    fn scu_examples() {
        assert_eq!(scu(&[1.0; 10]), 10.0);
        assert_eq!(scu(&[]), 0.0);
        assert_eq!(scu(&[0.4, 0.6]), 1.0);
    }

    #[test]
    fn depth_examples() {
        let cal = Calibration { focal_px: 100.0, baseline_m: 0.05 };
        let d = ndarray::arr2(&[[1.0, 2.0], [5.0, 0.0]]);
        let m = ndarray::arr2(&[[true, true], [true, true]]);
        let (z, valid) = crate::data::depth_to_disparity(d.view(), Some(&cal)).unwrap();
        // disparity maps of depth are depth maps of disparity
        let gt_depth = d.mapv(|v| if v > 0.0 { 5.0 / v } else { 5.0 / MIN_DISPARITY });
        let r = depth_metrics(d.view(), &cal, gt_depth.view(), m.view());
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.clamped, 1);
        assert!(valid[[0, 0]] && !valid[[1, 1]]);
        assert_eq!(z[[0, 0]], 5.0);

        let pred = ndarray::arr2(&[[2.0, 2.5]]);
        let gt_z = ndarray::arr2(&[[3.0, 1.0]]);
        let m = ndarray::arr2(&[[true, true]]);
        let r = depth_metrics(pred.view(), &cal, gt_z.view(), m.view());
        let oracle = ((5.0f64 / 2.0 - 3.0).abs() + (5.0f64 / 2.5 - 1.0).abs()) / 2.0;
        assert!((r.mae - oracle).abs() < 1e-12);
    }

    #[test]
    fn random_instance_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = ndarray::Array2::from_shape_fn((6, 7), |_| rng.random_range(0.0..20.0));
        let gt = ndarray::Array2::from_shape_fn((6, 7), |_| rng.random_range(0.0..20.0));
        let m = ndarray::Array2::from_shape_fn((6, 7), |_| rng.random_bool(0.7));
        let (mut abs, mut sq, mut out, mut n) = (0.0f64, 0.0f64, 0, 0);
        for y in 0..6 {
            for x in 0..7 {
                if m[[y, x]] {
                    let e: f64 = d[[y, x]] - gt[[y, x]];
                    abs += e.abs();
                    sq += e * e;
                    out += usize::from(e.abs() > 2.0);
                    n += 1;
                }
            }
        }
        assert!((mae(d.view(), gt.view(), m.view()) - abs / n as f64).abs() < 1e-12);
        assert!((rmse(d.view(), gt.view(), m.view()) - (sq / n as f64).sqrt()).abs() < 1e-12);
        assert!((outlier_pct(d.view(), gt.view(), m.view(), 2.0) - 100.0 * out as f64 / n as f64).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_dominates_and_outliers_monotone(
            pairs in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, any::<bool>()), 1..40)
        ) {
            let d = Array1::from_iter(pairs.iter().map(|p| p.0));
            let gt = Array1::from_iter(pairs.iter().map(|p| p.1));
            let m = Array1::from_iter(pairs.iter().map(|p| p.2));
            prop_assert!(rmse(d.view(), gt.view(), m.view()) + 1e-12 >= mae(d.view(), gt.view(), m.view()));
            let mut last = 100.0;
            for n in 0..8 {
                let o = outlier_pct(d.view(), gt.view(), m.view(), n as f64);
                prop_assert!((0.0..=100.0).contains(&o) && o <= last);
                last = o;
            }
        }

        #[test]
        fn masked_pixels_are_ignored(junk in -100.0f64..100.0) {
            let (mut d, gt, mut m) = fixture(&[0.5, -1.5, 2.5]);
            m[2] = false;
            let base = (mae(d.view(), gt.view(), m.view()), rmse(d.view(), gt.view(), m.view()));
            d[2] = junk;
            prop_assert_eq!(base, (mae(d.view(), gt.view(), m.view()), rmse(d.view(), gt.view(), m.view())));
        }
    }

    #[test]
    fn report_aggregation() {
        let m = ndarray::arr2(&[[true, true], [true, false]]);
        let gt = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let a = SampleMetrics::compute("a", gt.view(), gt.view(), m.view(), None, None);
        let d = ndarray::arr2(&[[2.0, 2.0], [3.0, 4.0]]);
        let b = SampleMetrics::compute("b", d.view(), gt.view(), ndarray::arr2(&[[true, false], [false, false]]).view(), None, None);
        let empty = SampleMetrics::compute("c", d.view(), gt.view(), ndarray::Array2::from_elem((2, 2), false).view(), None, None);
        let r = EvalReport::aggregate(vec![a.clone(), b.clone(), empty], Aggregation::PerSample, 0.0);
        assert_eq!(r.mae_px, 0.5);
        assert_eq!(r.excluded, vec!["c".to_string()]);
        let p = EvalReport::aggregate(vec![a.clone(), b.clone()], Aggregation::Population, 0.0);
        assert_eq!(p.mae_px, 0.25);
        let f = EvalReport::aggregate(vec![a, b], Aggregation::PerSample, 0.5);
        assert_eq!(f.per_sample.len(), 1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,0.5"));
    }
}
