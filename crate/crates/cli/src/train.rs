use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualstereo::data::{load_dataset, StereoSample};
use dualstereo::trainer::{DualBranchState, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{
    io_failure, prepare_output_dir, read_json, relative_to, resolve_device, write_json, CmdResult, Failure,
    RunManifest, RUN_DIR_ENV,
};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; overrides the config and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the shared-weight and data-order seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub device: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub labeled: PathBuf,
    #[serde(default)]
    pub unlabeled: Option<PathBuf>,
}

/// On-disk training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
    /// Checkpoint period in epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub device: Option<String>,
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    epochs: usize,
    warmup_epochs: usize,
    semi_epochs: usize,
    labeled_samples: usize,
    unlabeled_samples: usize,
    weights: usize,
    final_labeled_value_loss: f64,
    final_unlabeled_self_loss: f64,
    scu_unlabeled: Option<f64>,
    wall_seconds: f64,
}

fn load_split(path: &Path, s_max: usize) -> CmdResult<Vec<StereoSample>> {
    load_dataset(path, Some(s_max)).map_err(|e| Failure::Data(e.to_string()))
}

/// Trains per the config and returns the run directory.
pub fn cmd_train(args: &TrainArgs) -> CmdResult<PathBuf> {
    let mut file: TrainFile = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        file.train.seed = seed;
    }
    file.device = Some(resolve_device(args.device.as_deref(), file.device.as_deref())?);
    let run_dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .or_else(|| file.run_dir.as_ref().map(|p| relative_to(&args.config, p)))
        .ok_or_else(|| Failure::Config(format!("no run directory: pass --out, set {RUN_DIR_ENV} or run_dir")))?;
    file.train.validate()?;
    file.data.labeled = relative_to(&args.config, &file.data.labeled);
    file.data.unlabeled = file.data.unlabeled.as_ref().map(|p| relative_to(&args.config, p));
    file.run_dir = Some(run_dir.clone());

    prepare_output_dir(&run_dir, args.force)?;
    RunManifest::new("train", Some(&args.config), &run_dir, Some(file.train.seed)).write()?;
    write_json(&run_dir.join("config.json"), &file)?;

    let s_max = file.train.scale.s_max;
    let labeled = load_split(&file.data.labeled, s_max)?;
    if let Some(bad) = labeled.iter().find(|s| !s.is_labeled()) {
        return Err(Failure::Data(format!("{}: labeled split sample without disparity", bad.id)));
    }
    let mut unlabeled = match &file.data.unlabeled {
        Some(p) => load_split(p, s_max)?,
        None => Vec::new(),
    };
    for s in &mut unlabeled {
        s.gt_disparity = None;
        s.valid_mask = None;
    }

    let ckpt_dir = run_dir.join("checkpoints");
    if file.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(io_failure(&ckpt_dir))?;
    }
    let log_path = run_dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_failure(&log_path))?);
    let mut state = DualBranchState::init(&file.train)?;
    let header = json!({
        "event": "start",
        "deterministic": true,
        "threads": 1,
        "labeled": labeled.len(),
        "unlabeled": unlabeled.len(),
        "weights": state.store.weight_count(""),
    });
    writeln!(log, "{header}").map_err(io_failure(&log_path))?;

    let start = Instant::now();
    let mut last = None;
    let result = state.train(&labeled, &unlabeled, |st, summary| {
        let line = serde_json::to_string(&json!({ "event": "epoch", "summary": summary })).expect("summary serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| dualstereo::Error::io(&log_path, e))?;
        log::info!(
            "epoch {} {:?}: labeled value {:.4}, self {:.4}",
            summary.epoch,
            summary.stage,
            summary.labeled.value,
            summary.unlabeled.self_total
        );
        if file.checkpoint_every > 0 && st.epoch % file.checkpoint_every == 0 {
            st.save_checkpoint(&ckpt_dir.join(format!("epoch_{:04}.ckpt", st.epoch)))?;
        }
        last = Some(summary.clone());
        Ok(())
    });
    if let Err(e) = result {
        let event = json!({ "event": "error", "epoch": state.epoch, "message": e.to_string() });
        writeln!(log, "{event}").and_then(|_| log.flush()).map_err(io_failure(&log_path))?;
        return Err(e.into());
    }
    state.save_checkpoint(&run_dir.join("final.ckpt"))?;
    let scu = if unlabeled.is_empty() { None } else { Some(state.scu(&unlabeled)?) };
    writeln!(log, "{}", json!({ "event": "done", "epochs": state.epoch })).map_err(io_failure(&log_path))?;
    log.flush().map_err(io_failure(&log_path))?;
    let last = last.expect("at least one epoch");
    let report = TrainReport {
        epochs: state.epoch,
        warmup_epochs: file.train.warmup_epochs,
        semi_epochs: file.train.semi_epochs,
        labeled_samples: labeled.len(),
        unlabeled_samples: unlabeled.len(),
        weights: state.store.weight_count(""),
        final_labeled_value_loss: last.labeled.value,
        final_unlabeled_self_loss: last.unlabeled.self_total,
        scu_unlabeled: scu,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&run_dir.join("report.json"), &report)?;
    Ok(run_dir)
}

pub(crate) fn template() -> serde_json::Value {
    let t = TrainConfig::tiny();
    let full = TrainConfig::default();
    json!({
        "_comment": "Training configuration. Relative paths resolve against this file.",
        "data": {
            "labeled": "data/labeled/manifest.json",
            "unlabeled": "data/unlabeled/manifest.json",
        },
        "run_dir": "runs/example",
        "device": "cpu",
        "checkpoint_every": 10,
        "train": {
            "_comment": format!(
                "Desk-scale values. Full-scale: {} warm-up and {} semi epochs, batch {}, scale \"full\" with 256x256 crops.",
                full.warmup_epochs, full.semi_epochs, full.batch_size
            ),
            "warmup_epochs": t.warmup_epochs,
            "semi_epochs": t.semi_epochs,
            "lr_init": t.lr_init,
            "_comment_lr": "halved at every quarter of each stage",
            "batch_size": t.batch_size,
            "seed": t.seed,
            "seed_a": t.seed_a,
            "seed_b": t.seed_b,
            "_comment_seeds": "seed sets the weights shared by both branches; seed_a/seed_b set each branch's last two layers and confidence head",
            "scale": t.scale,
            "weights": t.weights,
            "augment": t.augment,
            "ablation": t.ablation,
            "_comment_ablation": "aps_on/acs_on off together gives the supervised-only baseline; bidirectional false lets only branch A teach",
            "semi_labeled_batches": t.semi_labeled_batches,
            "_comment_semi_labeled_batches": "null cycles labeled data to match the unlabeled batch count",
            "mask_reflective": t.mask_reflective,
        },
    })
}
