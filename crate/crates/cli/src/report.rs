use std::path::{Path, PathBuf};

use dualstereo::metrics::{EvalReport, OUTLIER_THRESHOLDS};
use dualstereo::trainer::Ablation;
use serde::Serialize;

use crate::{prepare_output_dir, read_json, CmdResult, Failure, RunManifest, TrainFile};

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Run directories (or evaluation directories) to compare.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub variant: String,
    pub mae_px: f64,
    pub rmse_px: f64,
    pub outlier_pct: Vec<f64>,
    pub scu: Option<f64>,
}

fn find_eval(run: &Path) -> CmdResult<(PathBuf, Option<PathBuf>)> {
    let direct = run.join("eval_report.json");
    if direct.exists() {
        let config = run.parent().map(|p| p.join("config.json")).filter(|p| p.exists());
        return Ok((direct, config));
    }
    let nested = run.join("eval").join("eval_report.json");
    if nested.exists() {
        let config = Some(run.join("config.json")).filter(|p| p.exists());
        return Ok((nested, config));
    }
    Err(Failure::Data(format!("{}: no eval_report.json (run `dualstereo eval` first)", run.display())))
}

/// Short name of an objective configuration.
pub fn variant_label(a: &Ablation) -> String {
    let mut parts = Vec::new();
    match (a.aps_on, a.acs_on) {
        (false, false) => return "baseline".into(),
        (true, true) => parts.push("aps+acs"),
        (true, false) => parts.push("aps"),
        (false, true) => parts.push("acs"),
    }
    if !a.adaptive_aps && a.aps_on {
        parts.push("fixed-aps");
    }
    if !a.adaptive_acs && a.acs_on {
        parts.push("fixed-acs");
    }
    if !a.bidirectional {
        parts.push("unidirectional");
    }
    parts.join(" ")
}

fn markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("| run | variant | MAE (px) | RMSE (px) |");
    for t in OUTLIER_THRESHOLDS {
        s += &format!(" >{t}px (%) |");
    }
    s += " SCU |\n|---|---|---|---|";
    s += &"---|".repeat(OUTLIER_THRESHOLDS.len() + 1);
    s += "\n";
    for r in rows {
        s += &format!("| {} | {} | {:.4} | {:.4} |", r.run, r.variant, r.mae_px, r.rmse_px);
        for o in &r.outlier_pct {
            s += &format!(" {o:.2} |");
        }
        s += &match r.scu {
            Some(v) => format!(" {v:.3} |\n"),
            None => " - |\n".into(),
        };
    }
    s
}

fn csv_table(rows: &[ReportRow]) -> CmdResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string(), "variant".into(), "mae_px".into(), "rmse_px".into()];
    header.extend(OUTLIER_THRESHOLDS.iter().map(|t| format!("outlier_{t}px_pct")));
    header.push("scu".into());
    let fail = |e: csv::Error| Failure::Data(e.to_string());
    w.write_record(&header).map_err(fail)?;
    for r in rows {
        let mut rec = vec![r.run.clone(), r.variant.clone(), r.mae_px.to_string(), r.rmse_px.to_string()];
        rec.extend(r.outlier_pct.iter().map(f64::to_string));
        rec.push(r.scu.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes `report.md` and `report.csv` with one row per run, sorted by MAE.
pub fn cmd_report(args: &ReportArgs) -> CmdResult<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(args.runs.len());
    for run in &args.runs {
        let (eval_path, config) = find_eval(run)?;
        let report: EvalReport = read_json(&eval_path).map_err(|e| Failure::Data(e.to_string()))?;
        let variant = match config {
            Some(p) => variant_label(&read_json::<TrainFile>(&p)?.train.ablation),
            None => "-".into(),
        };
        let name = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push(ReportRow {
            run: name,
            variant,
            mae_px: report.mae_px,
            rmse_px: report.rmse_px,
            outlier_pct: OUTLIER_THRESHOLDS.iter().map(|t| report.outlier_pct.get(&t.to_string()).copied().unwrap_or(f64::NAN)).collect(),
            scu: report.scu,
        });
    }
    rows.sort_by(|a, b| a.mae_px.total_cmp(&b.mae_px));
    prepare_output_dir(&args.out, args.force)?;
    RunManifest::new("report", None, &args.out, None).write()?;
    let md = args.out.join("report.md");
    std::fs::write(&md, markdown(&rows)).map_err(crate::io_failure(&md))?;
    let csv_path = args.out.join("report.csv");
    std::fs::write(&csv_path, csv_table(&rows)?).map_err(crate::io_failure(&csv_path))?;
    Ok(rows)
}
