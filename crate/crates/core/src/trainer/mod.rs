//! Dual-branch training: warm-up on labeled data, then joint labeled and
//! cross-branch self-supervised steps, plus confidence-based branch selection.

mod checkpoint;
mod optim;

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Ix3, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::confnet::Confnet;
use crate::data::{augment, reflective_mask, AugmentConfig, StereoSample};
use crate::denet::{stack_images, Denet, DenetOutput, NetScale};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::supervision::{self, Directions, LossBreakdown, LossWeights, RhoSource};

pub use optim::{lr_schedule, Adam};

/// Switches for the objective ablations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub aps_on: bool,
    pub acs_on: bool,
    /// Weight cross-branch disparity terms by the teacher's confidence (otherwise by 1).
    pub adaptive_aps: bool,
    /// Soften cross-branch targets by confidence (otherwise with a fixed sharpness of 1).
    pub adaptive_acs: bool,
    /// Both teaching directions; otherwise branch A only teaches branch B.
    pub bidirectional: bool,
    /// Let the distribution loss train the confidence head through the target width.
    pub joint: bool,
    pub acs_rho_source: RhoSource,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            aps_on: true,
            acs_on: true,
            adaptive_aps: true,
            adaptive_acs: true,
            bidirectional: true,
            joint: true,
            acs_rho_source: RhoSource::Student,
        }
    }
}

impl Ablation {
    /// Supervised-only training: no cross-branch terms.
    pub fn baseline() -> Self {
        Self { aps_on: false, acs_on: false, ..Self::default() }
    }

    pub fn unidirectional() -> Self {
        Self { bidirectional: false, ..Self::default() }
    }

    pub fn self_supervised(&self) -> bool {
        self.aps_on || self.acs_on
    }

    pub fn directions(&self) -> Directions {
        if self.bidirectional {
            Directions::BOTH
        } else {
            Directions::A_TO_B
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub semi_epochs: usize,
    pub lr_init: f64,
    pub batch_size: usize,
    /// Seed of the weights shared by both disparity networks and of data order.
    pub seed: u64,
    pub seed_a: u64,
    pub seed_b: u64,
    pub scale: NetScale,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub ablation: Ablation,
    /// Labeled batches per semi-supervised epoch; `None` cycles labeled data to
    /// match the number of unlabeled batches.
    pub semi_labeled_batches: Option<usize>,
    /// Exclude specular pixels (judged on the left view) from every loss.
    pub mask_reflective: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 300,
            semi_epochs: 100,
            lr_init: 1e-3,
            batch_size: 3,
            seed: 0,
            seed_a: 1,
            seed_b: 2,
            scale: NetScale::full(),
            weights: LossWeights::default(),
            augment: AugmentConfig {
                crop_h: 256,
                crop_w: 256,
                flip_prob: 0.5,
                gamma_range: (0.8, 1.2),
                brightness_range: (0.8, 1.2),
            },
            ablation: Ablation::default(),
            semi_labeled_batches: None,
            mask_reflective: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn tiny() -> Self {
        Self {
            warmup_epochs: 40,
            semi_epochs: 10,
            batch_size: 4,
            scale: NetScale::tiny(),
            augment: AugmentConfig {
                crop_h: 32,
                crop_w: 64,
                flip_prob: 0.5,
                gamma_range: (0.9, 1.1),
                brightness_range: (0.9, 1.1),
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.augment.validate()?;
        if self.warmup_epochs == 0 || self.semi_epochs == 0 {
            return Err(Error::Config("warmup_epochs and semi_epochs must be >= 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init {} must be positive", self.lr_init)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.augment.crop_h % 16 != 0 || self.augment.crop_w % 16 != 0 {
            return Err(Error::Config(format!(
                "crop {}x{} must be a multiple of 16",
                self.augment.crop_h, self.augment.crop_w
            )));
        }
        if !(self.weights.lambda_conf > 0.0) {
            return Err(Error::Config("lambda_conf must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Semi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    A,
    B,
}

/// A stacked batch. Images are `[N, 3, H, W]`, maps `[N, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub gt: Option<Array3<f64>>,
    /// Pixels where losses apply.
    pub mask: Array3<bool>,
}

impl Batch {
    /// Stacks equally sized samples. A batch is labeled only if every sample is.
    pub fn new(samples: &[StereoSample], s_max: usize, mask_reflective: bool) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        for s in samples {
            s.validate()?;
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Data(format!("{}: batch samples differ in size", s.id)));
            }
        }
        let lefts: Vec<ArrayView3<f64>> = samples.iter().map(|s| s.left.view()).collect();
        let rights: Vec<ArrayView3<f64>> = samples.iter().map(|s| s.right.view()).collect();
        let labeled = samples.iter().all(StereoSample::is_labeled);
        let mut mask = Array3::from_elem((samples.len(), h, w), true);
        let mut gt = labeled.then(|| Array3::zeros((samples.len(), h, w)));
        for (i, s) in samples.iter().enumerate() {
            let mut m = mask.index_axis_mut(Axis(0), i);
            if mask_reflective {
                let r = reflective_mask(s.left.view());
                m.zip_mut_with(&r, |v, &r| *v = *v && !r);
            }
            if let (Some(gt), Some(d), Some(valid)) = (gt.as_mut(), &s.gt_disparity, &s.valid_mask) {
                gt.index_axis_mut(Axis(0), i).assign(d);
                m.zip_mut_with(valid, |v, &ok| *v = *v && ok);
                m.zip_mut_with(d, |v, &d| *v = *v && d.is_finite() && d >= 0.0 && d < s_max as f64);
            }
        }
        Ok(Self { left: stack_images(&lefts), right: stack_images(&rights), gt, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients of one objective evaluation, not yet applied.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub losses: LossBreakdown,
    pub grads: Vec<(ParamId, Tensor)>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub labeled_steps: usize,
    pub unlabeled_steps: usize,
    /// Mean labeled-step losses.
    pub labeled: LossBreakdown,
    /// Mean unlabeled-step losses.
    pub unlabeled: LossBreakdown,
    pub empty_mask_steps: usize,
}

/// Prediction of both branches for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub disparity: Array2<f64>,
    pub confidence: Array2<f64>,
    pub branch: Branch,
    pub mean_confidence_a: f64,
    pub mean_confidence_b: f64,
}

/// Picks the branch with the larger mean confidence; ties go to A.
pub fn select_branch(mean_a: f64, mean_b: f64) -> Branch {
    if mean_b > mean_a {
        Branch::B
    } else {
        Branch::A
    }
}

struct BranchVars {
    out: DenetOutput,
    confidence: Var,
}

fn map3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("[N, H, W] map")
}

fn dist4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("[N, S, H, W] distribution")
}

fn check_outputs(g: &Graph, branches: &[BranchVars; 2]) -> Result<()> {
    for (name, b) in ["a", "b"].iter().zip(branches) {
        for (what, v) in [("disparity", b.out.disparity), ("confidence", b.confidence), ("distribution", b.out.prob)] {
            if g.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("branch {name} {what}")));
            }
        }
    }
    Ok(())
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// Both branches, their optimizer state and the training cursor.
#[derive(Clone, Debug)]
pub struct DualBranchState {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub denet_a: Denet,
    pub denet_b: Denet,
    pub confnet_a: Confnet,
    pub confnet_b: Confnet,
    pub adam: Adam,
    /// Epochs completed across both stages.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl DualBranchState {
    /// Builds both branches. The disparity networks share all weights except the
    /// last two layers, which are drawn from `seed_a` and `seed_b`; the confidence
    /// heads are independent.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.seed_a == config.seed_b {
            log::warn!("seed_a == seed_b: both branches start identical");
        }
        let mut store = ParamStore::new();
        let shared = ChaCha8Rng::seed_from_u64(config.seed);
        let denet_a = Denet::new(&mut store, &mut shared.clone(), "denet_a", &config.scale)?;
        let denet_b = Denet::new(&mut store, &mut shared.clone(), "denet_b", &config.scale)?;
        let mut rng_a = ChaCha8Rng::seed_from_u64(config.seed_a);
        let mut rng_b = ChaCha8Rng::seed_from_u64(config.seed_b);
        denet_a.reinit_head(&mut store, &mut rng_a);
        denet_b.reinit_head(&mut store, &mut rng_b);
        let levels = config.scale.s_max;
        let confnet_a = Confnet::new(&mut store, &mut rng_a, "confnet_a", levels);
        let confnet_b = Confnet::new(&mut store, &mut rng_b, "confnet_b", levels);
        Ok(Self {
            config: config.clone(),
            store,
            denet_a,
            denet_b,
            confnet_a,
            confnet_b,
            adam: Adam::default(),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
        })
    }

    pub fn stage(&self) -> Stage {
        if self.epoch < self.config.warmup_epochs {
            Stage::Warmup
        } else {
            Stage::Semi
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.config.warmup_epochs + self.config.semi_epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    /// Learning rate of the upcoming epoch; each stage restarts the schedule.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        match self.stage() {
            Stage::Warmup => lr_schedule(self.epoch, c.warmup_epochs, c.lr_init),
            Stage::Semi => lr_schedule(self.epoch - c.warmup_epochs, c.semi_epochs, c.lr_init),
        }
    }

    fn forward_branches(&self, ctx: &mut Ctx, batch: &Batch, confnet_train: bool) -> Result<[BranchVars; 2]> {
        let left = ctx.graph.constant(batch.left.clone());
        let right = ctx.graph.constant(batch.right.clone());
        let denet_train = ctx.train;
        let mut run = |denet: &Denet, confnet: &Confnet| -> Result<BranchVars> {
            ctx.train = denet_train;
            let out = denet.forward(ctx, left, right)?;
            // the confidence head never back-propagates into the disparity network
            let cost = ctx.graph.detach(out.cost);
            ctx.train = confnet_train;
            let confidence = confnet.forward(ctx, cost)?;
            ctx.train = denet_train;
            Ok(BranchVars { out, confidence })
        };
        Ok([run(&self.denet_a, &self.confnet_a)?, run(&self.denet_b, &self.confnet_b)?])
    }

    /// Gradients of the fully supervised objective on a labeled batch.
    pub fn full_gradients(&self, batch: &Batch) -> Result<StepGradients> {
        let gt = batch.gt.as_ref().ok_or_else(|| Error::Data("labeled step needs GT".into()))?;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, true);
        let branches = self.forward_branches(&mut ctx, batch, true)?;
        check_outputs(&g, &branches)?;
        let [a, b] = branches;
        let (da, db) = (map3(g.value(a.out.disparity)), map3(g.value(b.out.disparity)));
        let (ka, kb) = (map3(g.value(a.confidence)), map3(g.value(b.confidence)));
        let (pa, pb) = (dist4(g.value(a.out.prob)), dist4(g.value(b.out.prob)));
        let mask = batch.mask.view();
        let lambda = self.config.weights.lambda_conf;

        let ta = supervision::gt_confidence(da, gt.view(), mask);
        let tb = supervision::gt_confidence(db, gt.view(), mask);
        let conf = supervision::conf_loss(ka, ta.view(), kb, tb.view(), mask)?;
        let value = supervision::value_loss(da, db, gt.view(), mask)?;
        let dist = supervision::dist_loss(pa, ka, pb, kb, gt.view(), mask)?;
        let total = lambda * conf.value + value.value + dist.value;
        let losses = LossBreakdown {
            conf: conf.value,
            value: value.value,
            dist: dist.value,
            full_total: total,
            masked_pixel_count: value.count,
            empty_mask: value.count == 0,
            ..Default::default()
        };
        check_finite("full loss", total)?;
        let [gca, gcb] = conf.grads;
        let [gva, gvb] = value.grads;
        let [gpa, gka, gpb, gkb] = dist.grads;
        let k_grad = |c: Tensor, d: Tensor| if self.config.ablation.joint { c * lambda + d } else { c * lambda };
        let parts = vec![
            (a.confidence, k_grad(gca, gka)),
            (b.confidence, k_grad(gcb, gkb)),
            (a.out.disparity, gva),
            (b.out.disparity, gvb),
            (a.out.prob, gpa),
            (b.out.prob, gpb),
        ];
        let root = g.loss(total, parts);
        let grads = g.backward(root);
        let param_grads = g.param_grads(&grads);
        let buffer_updates = g.take_buffer_updates();
        Ok(StepGradients { losses, grads: param_grads, buffer_updates })
    }

    /// Gradients of the cross-branch objective on an unlabeled batch, for the
    /// given teaching directions. Confidence heads run in inference mode and
    /// act as constants; each term only reaches the receiving branch.
    pub fn self_gradients(&self, batch: &Batch, dirs: Directions) -> Result<StepGradients> {
        let ab = &self.config.ablation;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, true);
        let branches = self.forward_branches(&mut ctx, batch, false)?;
        check_outputs(&g, &branches)?;
        let [a, b] = branches;
        let (da, db) = (map3(g.value(a.out.disparity)), map3(g.value(b.out.disparity)));
        let (ka, kb) = (map3(g.value(a.confidence)), map3(g.value(b.confidence)));
        let (pa, pb) = (dist4(g.value(a.out.prob)), dist4(g.value(b.out.prob)));
        let mask = batch.mask.view();
        let ones = Array3::<f64>::ones(da.raw_dim());
        let mut losses = LossBreakdown::default();
        let mut parts = Vec::new();
        let mut count = mask.iter().filter(|&&m| m).count();
        if ab.aps_on {
            let (wa, wb) = if ab.adaptive_aps { (ka, kb) } else { (ones.view(), ones.view()) };
            let l = supervision::aps_loss(da, wa, db, wb, mask, dirs)?;
            losses.aps = l.value;
            count = l.count;
            let [ga, gb] = l.grads;
            parts.push((a.out.disparity, ga));
            parts.push((b.out.disparity, gb));
        }
        if ab.acs_on {
            let (ra, rb) = if ab.adaptive_acs { (ka, kb) } else { (ones.view(), ones.view()) };
            let l = supervision::acs_loss(pa, da, ra, pb, db, rb, mask, dirs, ab.acs_rho_source)?;
            losses.acs = l.value;
            count = l.count;
            let [ga, gb] = l.grads;
            parts.push((a.out.prob, ga));
            parts.push((b.out.prob, gb));
        }
        losses.self_total = losses.aps + losses.acs;
        losses.masked_pixel_count = count;
        losses.empty_mask = count == 0;
        check_finite("self loss", losses.self_total)?;
        // drop all-zero parts so a silent direction leaves its branch without gradients
        parts.retain(|(_, t)| t.iter().any(|&v| v != 0.0));
        let root = g.loss(losses.self_total, parts);
        let grads = g.backward(root);
        let param_grads = g.param_grads(&grads);
        // a branch that only teaches keeps its batch-norm statistics as well
        let students: Vec<&str> = [(dirs.a_to_b, "denet_b."), (dirs.b_to_a, "denet_a.")]
            .into_iter()
            .filter_map(|(on, p)| on.then_some(p))
            .collect();
        let mut buffer_updates = g.take_buffer_updates();
        buffer_updates.retain(|(id, _)| students.iter().any(|p| self.store.name(*id).starts_with(p)));
        Ok(StepGradients { losses, grads: param_grads, buffer_updates })
    }

    /// Applies gradients with Adam and commits batch-norm statistics.
    pub fn apply(&mut self, step: StepGradients, lr: f64) -> Result<LossBreakdown> {
        for (id, g) in &step.grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", self.store.name(*id))));
            }
        }
        self.adam.step(&mut self.store, &step.grads, lr);
        for (id, value) in step.buffer_updates {
            self.store.set(id, value);
        }
        Ok(step.losses)
    }

    fn augmented_batches(&mut self, samples: &[StereoSample], count: usize) -> Result<Vec<Batch>> {
        let bs = self.config.batch_size;
        let mut order: Vec<usize> = Vec::with_capacity(count * bs);
        while order.len() < count * bs {
            let mut round: Vec<usize> = (0..samples.len()).collect();
            round.shuffle(&mut self.rng);
            order.extend(round);
        }
        let mut batches = Vec::with_capacity(count);
        for chunk in order.chunks(bs).take(count) {
            let aug: Vec<StereoSample> = chunk
                .iter()
                .map(|&i| augment(&samples[i], &self.config.augment, &mut self.rng))
                .collect::<Result<_>>()?;
            batches.push(Batch::new(&aug, self.config.scale.s_max, self.config.mask_reflective)?);
        }
        Ok(batches)
    }

    /// One pass over the labeled data with the fully supervised objective.
    pub fn warmup_epoch(&mut self, labeled: &[StereoSample]) -> Result<EpochSummary> {
        if labeled.is_empty() {
            return Err(Error::Data("warm-up needs labeled samples".into()));
        }
        let lr = self.current_lr();
        let n = labeled.len().div_ceil(self.config.batch_size);
        let batches = self.augmented_batches(labeled, n)?;
        let mut sum = Accumulator::default();
        for (step, batch) in batches.iter().enumerate() {
            let g = self.full_gradients(batch).map_err(|e| self.annotate(e, step))?;
            sum.add(&self.apply(g, lr).map_err(|e| self.annotate(e, step))?);
        }
        Ok(self.finish_epoch(Stage::Warmup, lr, sum, Accumulator::default()))
    }

    /// Interleaves labeled and unlabeled steps. Unlabeled steps are skipped
    /// entirely when no cross-branch term is active.
    pub fn semi_epoch(&mut self, labeled: &[StereoSample], unlabeled: &[StereoSample]) -> Result<EpochSummary> {
        let lr = self.current_lr();
        let bs = self.config.batch_size;
        let n_unlabeled = unlabeled.len().div_ceil(bs);
        let n_labeled = if labeled.is_empty() {
            0
        } else {
            self.config.semi_labeled_batches.unwrap_or(n_unlabeled.max(labeled.len().div_ceil(bs)))
        };
        let labeled_batches = if n_labeled > 0 { self.augmented_batches(labeled, n_labeled)? } else { Vec::new() };
        let self_on = self.config.ablation.self_supervised();
        let unlabeled_batches =
            if self_on && n_unlabeled > 0 { self.augmented_batches(unlabeled, n_unlabeled)? } else { Vec::new() };
        let dirs = self.config.ablation.directions();
        let (mut lab, mut unl) = (Accumulator::default(), Accumulator::default());
        let mut li = labeled_batches.iter();
        let mut ui = unlabeled_batches.iter();
        let mut step = 0;
        loop {
            let (l, u) = (li.next(), ui.next());
            if l.is_none() && u.is_none() {
                break;
            }
            if let Some(batch) = l {
                let g = self.full_gradients(batch).map_err(|e| self.annotate(e, step))?;
                lab.add(&self.apply(g, lr).map_err(|e| self.annotate(e, step))?);
                step += 1;
            }
            if let (Some(batch), true) = (u, self_on) {
                let g = self.self_gradients(batch, dirs).map_err(|e| self.annotate(e, step))?;
                unl.add(&self.apply(g, lr).map_err(|e| self.annotate(e, step))?);
                step += 1;
            }
        }
        Ok(self.finish_epoch(Stage::Semi, lr, lab, unl))
    }

    /// Runs whichever stage the cursor is in for one epoch.
    pub fn run_epoch(&mut self, labeled: &[StereoSample], unlabeled: &[StereoSample]) -> Result<EpochSummary> {
        match self.stage() {
            Stage::Warmup => self.warmup_epoch(labeled),
            Stage::Semi => self.semi_epoch(labeled, unlabeled),
        }
    }

    /// Trains to completion, calling `on_epoch` after every epoch.
    pub fn train<F>(&mut self, labeled: &[StereoSample], unlabeled: &[StereoSample], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochSummary) -> Result<()>,
    {
        while !self.is_finished() {
            let summary = self.run_epoch(labeled, unlabeled)?;
            on_epoch(self, &summary)?;
        }
        Ok(())
    }

    fn annotate(&self, e: Error, step: usize) -> Error {
        match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("epoch {} step {step}: {msg}", self.epoch)),
            other => other,
        }
    }

    fn finish_epoch(&mut self, stage: Stage, lr: f64, lab: Accumulator, unl: Accumulator) -> EpochSummary {
        let summary = EpochSummary {
            epoch: self.epoch,
            stage,
            lr,
            labeled_steps: lab.steps,
            unlabeled_steps: unl.steps,
            labeled: lab.mean(),
            unlabeled: unl.mean(),
            empty_mask_steps: lab.empty + unl.empty,
        };
        if summary.empty_mask_steps > 0 {
            log::warn!("epoch {}: {} steps had no maskable pixels", self.epoch, summary.empty_mask_steps);
        }
        self.epoch += 1;
        summary
    }

    /// Disparity, confidence and chosen branch for one pair of any size; inputs
    /// are edge-padded to a multiple of 16 and outputs cropped back.
    pub fn infer(&self, left: ArrayView3<f64>, right: ArrayView3<f64>) -> Result<Inference> {
        if left.shape() != right.shape() || left.shape()[0] != 3 {
            return Err(Error::Shape(format!("left {:?} / right {:?}", left.shape(), right.shape())));
        }
        let (h, w) = (left.shape()[1], left.shape()[2]);
        let (pl, pr) = (pad16(left), pad16(right));
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let batch = Batch {
            left: stack_images(&[pl.view()]),
            right: stack_images(&[pr.view()]),
            gt: None,
            mask: Array3::from_elem((1, pl.shape()[1], pl.shape()[2]), true),
        };
        let [a, b] = self.forward_branches(&mut ctx, &batch, false)?;
        let crop = |v: Var| -> Array2<f64> { first_map(g.value(v)).slice(s![..h, ..w]).to_owned() };
        let (da, db, ka, kb) = (crop(a.out.disparity), crop(b.out.disparity), crop(a.confidence), crop(b.confidence));
        let (ma, mb) = (ka.mean().unwrap_or(0.0), kb.mean().unwrap_or(0.0));
        if da.iter().chain(db.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inference produced non-finite disparity".into()));
        }
        let branch = select_branch(ma, mb);
        let (disparity, confidence) = match branch {
            Branch::A => (da, ka),
            Branch::B => (db, kb),
        };
        Ok(Inference { disparity, confidence, branch, mean_confidence_a: ma, mean_confidence_b: mb })
    }

    /// Sum over samples of the selected branch's mean confidence.
    pub fn scu(&self, samples: &[StereoSample]) -> Result<f64> {
        let means = samples
            .iter()
            .map(|s| {
                let inf = self.infer(s.left.view(), s.right.view())?;
                Ok(inf.mean_confidence_a.max(inf.mean_confidence_b))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(crate::metrics::scu(&means))
    }

    /// Ids of the last-two-layer parameters of each disparity network.
    pub fn head_param_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (self.denet_a.head_param_ids(), self.denet_b.head_param_ids())
    }
}

fn first_map(t: &Tensor) -> Array2<f64> {
    t.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("[N, H, W] map")
}

/// Edge-replicating pad on the bottom and right up to a multiple of 16.
fn pad16(img: ArrayView3<f64>) -> Array3<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ph, pw) = (h.div_ceil(16).max(1) * 16, w.div_ceil(16).max(1) * 16);
    Array3::from_shape_fn((3, ph, pw), |(c, y, x)| img[[c, y.min(h - 1), x.min(w - 1)]])
}

#[derive(Default)]
struct Accumulator {
    sum: LossBreakdown,
    steps: usize,
    empty: usize,
}

impl Accumulator {
    fn add(&mut self, l: &LossBreakdown) {
        let s = &mut self.sum;
        s.aps += l.aps;
        s.acs += l.acs;
        s.conf += l.conf;
        s.value += l.value;
        s.dist += l.dist;
        s.self_total += l.self_total;
        s.full_total += l.full_total;
        s.masked_pixel_count += l.masked_pixel_count;
        self.steps += 1;
        self.empty += usize::from(l.empty_mask);
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        let s = &self.sum;
        LossBreakdown {
            aps: s.aps / n,
            acs: s.acs / n,
            conf: s.conf / n,
            value: s.value / n,
            dist: s.dist / n,
            self_total: s.self_total / n,
            full_total: s.full_total / n,
            masked_pixel_count: s.masked_pixel_count,
            empty_mask: self.empty > 0,
        }
    }
}
