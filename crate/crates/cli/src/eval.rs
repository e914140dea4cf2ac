use std::path::{Path, PathBuf};

use dualstereo::data::{load_dataset, read_image, write_disparity_png, write_pfm};
use dualstereo::metrics::{Aggregation, EvalReport, SampleMetrics};
use dualstereo::trainer::{Branch, DualBranchState};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::{prepare_output_dir, resolve_device, write_json, CmdResult, Failure, RunManifest};

/// Lower edges of the absolute-error colour bands, in pixels.
pub const ERROR_BANDS: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 5.0];
const BAND_COLORS: [[u8; 3]; 5] = [[49, 54, 149], [116, 173, 209], [254, 224, 144], [244, 109, 67], [165, 0, 38]];

/// Colour of an absolute error; black marks pixels without GT.
pub fn error_band_color(err: f64, valid: bool) -> [u8; 3] {
    if !valid || !err.is_finite() {
        return [0, 0, 0];
    }
    let band = ERROR_BANDS.iter().rposition(|&lo| err >= lo).unwrap_or(0);
    BAND_COLORS[band]
}

fn write_error_map(path: &Path, d: ArrayView2<f64>, gt: ArrayView2<f64>, mask: ArrayView2<bool>) -> CmdResult<()> {
    let (h, w) = d.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(error_band_color((d[[y, x]] - gt[[y, x]]).abs(), mask[[y, x]]))
    });
    img.save(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "gt_as_prediction")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to `eval/` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_aggregation, default_value = "per_sample")]
    pub aggregation: Aggregation,
    /// Drop samples with a smaller fraction of valid GT pixels.
    #[arg(long, default_value_t = 0.0)]
    pub min_valid_fraction: f64,
    /// Score the GT itself instead of a model; checks the evaluation plumbing.
    #[arg(long)]
    pub gt_as_prediction: bool,
    #[arg(long)]
    pub device: Option<String>,
    #[arg(long)]
    pub force: bool,
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s {
        "per_sample" => Ok(Aggregation::PerSample),
        "population" => Ok(Aggregation::Population),
        other => Err(format!("unknown aggregation {other:?} (per_sample or population)")),
    }
}

fn branch_name(b: Branch) -> String {
    match b {
        Branch::A => "a".into(),
        Branch::B => "b".into(),
    }
}

/// Evaluates on every labeled manifest entry and writes `eval_report.json`,
/// `metrics.csv`, per-sample error maps and disparity images.
pub fn cmd_eval(args: &EvalArgs) -> CmdResult<EvalReport> {
    resolve_device(args.device.as_deref(), None)?;
    if !(0.0..=1.0).contains(&args.min_valid_fraction) {
        return Err(Failure::Config("min_valid_fraction must lie in [0, 1]".into()));
    }
    let out = match (&args.out, &args.checkpoint) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.parent().unwrap_or(Path::new(".")).join("eval"),
        (None, None) => return Err(Failure::Config("--out is required with --gt-as-prediction".into())),
    };
    prepare_output_dir(&out, args.force)?;
    RunManifest::new("eval", args.checkpoint.as_deref(), &out, None).write()?;
    let state = match (&args.checkpoint, args.gt_as_prediction) {
        (Some(c), false) => Some(DualBranchState::load_checkpoint(c)?),
        _ => None,
    };
    let s_max = state.as_ref().map(|s| s.config.scale.s_max);
    let samples = load_dataset(&args.manifest, s_max)?;
    let vis_hi = s_max.map_or_else(
        || samples.iter().filter_map(|s| s.gt_disparity.as_ref()).flat_map(|d| d.iter().copied()).fold(1.0, f64::max),
        |s| s as f64,
    );
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut confidences = Vec::new();
    for s in &samples {
        let (Some(gt), Some(mask)) = (&s.gt_disparity, &s.valid_mask) else {
            return Err(Failure::Data(format!("{}: evaluation needs GT disparity", s.id)));
        };
        let (d, conf): (Array2<f64>, _) = match &state {
            Some(st) => {
                let inf = st.infer(s.left.view(), s.right.view())?;
                let mean = inf.mean_confidence_a.max(inf.mean_confidence_b);
                confidences.push(mean);
                (inf.disparity, Some((mean, branch_name(inf.branch))))
            }
            None => (gt.clone(), None),
        };
        let mut m = SampleMetrics::compute(&s.id, d.view(), gt.view(), mask.view(), s.calibration.as_ref(), None);
        if let Some((mean, branch)) = conf {
            m.mean_confidence = Some(mean);
            m.branch = Some(branch);
        }
        write_error_map(&out.join(format!("{}_error.png", s.id)), d.view(), gt.view(), mask.view())?;
        write_disparity_png(&out.join(format!("{}_disp.png", s.id)), &d, 0.0, vis_hi)?;
        per_sample.push(m);
    }
    let mut report = EvalReport::aggregate(per_sample, args.aggregation, args.min_valid_fraction);
    if state.is_some() {
        report.scu = Some(dualstereo::metrics::scu(&confidences));
    }
    if !report.mae_px.is_finite() || !report.rmse_px.is_finite() {
        return Err(Failure::Numeric("non-finite evaluation metric".into()));
    }
    write_json(&out.join("eval_report.json"), &report)?;
    let csv_path = out.join("metrics.csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(crate::io_failure(&csv_path))?;
    log::info!("mae {:.4} px, rmse {:.4} px over {} samples", report.mae_px, report.rmse_px, report.per_sample.len());
    Ok(report)
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub device: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Serialize)]
struct InferMetadata {
    checkpoint: PathBuf,
    left: PathBuf,
    right: PathBuf,
    height: usize,
    width: usize,
    branch: String,
    mean_confidence_a: f64,
    mean_confidence_b: f64,
    tie_break: &'static str,
}

/// Writes `disparity.pfm`, `confidence.png` and `metadata.json`.
pub fn cmd_infer(args: &InferArgs) -> CmdResult<PathBuf> {
    resolve_device(args.device.as_deref(), None)?;
    prepare_output_dir(&args.out, args.force)?;
    RunManifest::new("infer", Some(&args.checkpoint), &args.out, None).write()?;
    let state = DualBranchState::load_checkpoint(&args.checkpoint)?;
    let left = read_image(&args.left)?;
    let right = read_image(&args.right)?;
    let inf = state.infer(left.view(), right.view())?;
    write_pfm(&args.out.join("disparity.pfm"), &inf.disparity)?;
    write_disparity_png(&args.out.join("confidence.png"), &inf.confidence, 0.0, 1.0)?;
    let (height, width) = inf.disparity.dim();
    let meta = InferMetadata {
        checkpoint: args.checkpoint.clone(),
        left: args.left.clone(),
        right: args.right.clone(),
        height,
        width,
        branch: branch_name(inf.branch),
        mean_confidence_a: inf.mean_confidence_a,
        mean_confidence_b: inf.mean_confidence_b,
        tie_break: "a",
    };
    write_json(&args.out.join("metadata.json"), &meta)?;
    Ok(args.out.clone())
}
