use std::path::PathBuf;

use dualstereo::data::{save_dataset, synthetic_dataset, SynthSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{prepare_output_dir, read_json, write_json, CmdResult, Failure, RunManifest};

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Synthetic job description (JSON); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSplit {
    pub name: String,
    pub count: usize,
    /// Unlabeled splits are written without disparity or mask.
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthJob {
    pub height: usize,
    pub width: usize,
    pub s_max: usize,
    pub n_blobs: usize,
    pub texture_scale: f64,
    pub seed: u64,
    pub splits: Vec<SynthSplit>,
}

impl Default for SynthJob {
    fn default() -> Self {
        let split = |name: &str, count, labeled| SynthSplit { name: name.into(), count, labeled };
        Self {
            height: 64,
            width: 128,
            s_max: 32,
            n_blobs: 3,
            texture_scale: 0.25,
            seed: 0,
            splits: vec![split("labeled", 8, true), split("unlabeled", 64, false), split("test", 16, true)],
        }
    }
}

impl SynthJob {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec { texture_scale: self.texture_scale, ..SynthSpec::new(self.height, self.width, self.s_max, self.n_blobs, self.seed) }
    }

    /// Seed of split `index`; splits never share scenes.
    pub fn split_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1)
    }
}

/// Writes one sub-directory with a `manifest.json` per split. Returns the output directory.
pub fn cmd_synth(args: &SynthArgs) -> CmdResult<PathBuf> {
    let mut job: SynthJob = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthJob::default(),
    };
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    job.spec().validate()?;
    let mut names: Vec<&str> = job.splits.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != job.splits.len() || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
        return Err(Failure::Config("split names must be unique plain names".into()));
    }
    prepare_output_dir(&args.out, args.force)?;
    RunManifest::new("synth", args.config.as_deref(), &args.out, Some(job.seed)).write()?;
    write_json(&args.out.join("synth.json"), &job)?;
    for (i, split) in job.splits.iter().enumerate() {
        let mut samples = synthetic_dataset(&job.spec(), split.count, job.split_seed(i))?;
        if !split.labeled {
            for s in &mut samples {
                s.gt_disparity = None;
                s.valid_mask = None;
            }
        }
        save_dataset(&args.out.join(&split.name), &samples)?;
        log::info!("wrote {} {} pairs", split.count, split.name);
    }
    Ok(args.out.clone())
}

pub(crate) fn template() -> serde_json::Value {
    let d = SynthJob::default();
    json!({
        "_comment": "Synthetic stereo job. Each split becomes <out>/<name>/manifest.json.",
        "height": d.height,
        "width": d.width,
        "s_max": d.s_max,
        "_comment_s_max": "number of disparity levels; generated disparity stays below it",
        "n_blobs": d.n_blobs,
        "texture_scale": d.texture_scale,
        "seed": d.seed,
        "splits": d.splits,
    })
}
