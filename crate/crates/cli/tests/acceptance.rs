//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::process::Command;
use std::time::{Duration, Instant};

use dualstereo::autograd::{kernels, Graph, Tensor};
use dualstereo::data::{synthetic_dataset, StereoSample, SynthSpec};
use dualstereo::denet::{build_gwc_volume, shift_concat_volume, FeatureMap};
use dualstereo::metrics::{mae, outlier_pct, rmse, scu};
use dualstereo::supervision::{
    acs_loss, aps_loss, conf_loss, dist_loss, gt_confidence, rho, unimodal_generate, value_loss, Directions, RhoSource,
};
use dualstereo::trainer::{Ablation, Batch, DualBranchState, TrainConfig};
use ndarray::{arr1, Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let ok = pass && elapsed <= budget;
    // written to the handle directly so the line survives libtest's output capture
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {n}: {} ({detail}; {:.1}s of {:.0}s budget)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    )
    .unwrap();
    drop(out);
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(elapsed <= budget, "criterion {n} exceeded its runtime budget");
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn random_map(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(lo..hi))
}

fn random_dist(levels: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut p = Array3::from_shape_fn((levels, h, w), |_| rng.random_range(0.05..1.0));
    let z = p.sum_axis(Axis(0));
    for mut lvl in p.axis_iter_mut(Axis(0)) {
        lvl /= &z;
    }
    p
}

fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let mut m = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.7));
    m[[0, 0]] = true;
    m
}

// Scalar oracles written straight from the loss definitions.

fn ug_oracle(d: f64, k: f64, levels: usize) -> Vec<f64> {
    let r = 1.0 / (2.0 - k);
    let w: Vec<f64> = (0..levels).map(|s| (-(s as f64 - d).abs() * r).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn sl1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn ce_oracle(t: &[f64], p: &Array3<f64>, y: usize, x: usize) -> f64 {
    -t.iter().enumerate().map(|(s, &ts)| ts * p[[s, y, x]].ln()).sum::<f64>()
}

struct Instance {
    levels: usize,
    d_a: Array2<f64>,
    d_b: Array2<f64>,
    k_a: Array2<f64>,
    k_b: Array2<f64>,
    p_a: Array3<f64>,
    p_b: Array3<f64>,
    gt: Array2<f64>,
    mask: Array2<bool>,
}

impl Instance {
    fn random(h: usize, w: usize, levels: usize, rng: &mut ChaCha8Rng) -> Self {
        let top = levels as f64 - 1.0;
        Self {
            levels,
            d_a: random_map(h, w, 0.0, top, rng),
            d_b: random_map(h, w, 0.0, top, rng),
            k_a: random_map(h, w, 0.02, 0.98, rng),
            k_b: random_map(h, w, 0.02, 0.98, rng),
            p_a: random_dist(levels, h, w, rng),
            p_b: random_dist(levels, h, w, rng),
            gt: random_map(h, w, 0.0, top, rng),
            mask: random_mask(h, w, rng),
        }
    }

    fn pixels(&self) -> Vec<(usize, usize)> {
        self.mask.indexed_iter().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    fn aps(&self) -> f64 {
        let px = self.pixels();
        px.iter()
            .map(|&(y, x)| {
                self.k_a[[y, x]] * sl1(self.d_b[[y, x]] - self.d_a[[y, x]])
                    + self.k_b[[y, x]] * sl1(self.d_a[[y, x]] - self.d_b[[y, x]])
            })
            .sum::<f64>()
            / px.len() as f64
    }

    fn acs(&self) -> f64 {
        let px = self.pixels();
        px.iter()
            .map(|&(y, x)| {
                let tb = ug_oracle(self.d_a[[y, x]], self.k_b[[y, x]], self.levels);
                let ta = ug_oracle(self.d_b[[y, x]], self.k_a[[y, x]], self.levels);
                ce_oracle(&tb, &self.p_b, y, x) + ce_oracle(&ta, &self.p_a, y, x)
            })
            .sum::<f64>()
            / px.len() as f64
    }

    fn conf(&self) -> f64 {
        let px = self.pixels();
        let bce = |k: f64, t: f64| -(t * k.ln() + (1.0 - t) * (1.0 - k).ln());
        px.iter()
            .map(|&(y, x)| {
                let ta = if (self.d_a[[y, x]] - self.gt[[y, x]]).abs() < 3.0 { 1.0 } else { 0.0 };
                let tb = if (self.d_b[[y, x]] - self.gt[[y, x]]).abs() < 3.0 { 1.0 } else { 0.0 };
                bce(self.k_a[[y, x]], ta) + bce(self.k_b[[y, x]], tb)
            })
            .sum::<f64>()
            / px.len() as f64
    }

    fn value(&self) -> f64 {
        let px = self.pixels();
        let max = px.iter().map(|&(y, x)| self.gt[[y, x]]).fold(0.0, f64::max);
        px.iter()
            .map(|&(y, x)| {
                let alpha = self.gt[[y, x]] / max;
                alpha * (sl1(self.d_a[[y, x]] - self.gt[[y, x]]) + sl1(self.d_b[[y, x]] - self.gt[[y, x]]))
            })
            .sum::<f64>()
            / px.len() as f64
    }

    fn dist(&self) -> f64 {
        let px = self.pixels();
        px.iter()
            .map(|&(y, x)| {
                let ta = ug_oracle(self.gt[[y, x]], self.k_a[[y, x]], self.levels);
                let tb = ug_oracle(self.gt[[y, x]], self.k_b[[y, x]], self.levels);
                ce_oracle(&ta, &self.p_a, y, x) + ce_oracle(&tb, &self.p_b, y, x)
            })
            .sum::<f64>()
            / px.len() as f64
    }
}

fn targets(inst: &Instance) -> (Array2<f64>, Array2<f64>) {
    (
        gt_confidence(inst.d_a.view(), inst.gt.view(), inst.mask.view()),
        gt_confidence(inst.d_b.view(), inst.gt.view(), inst.mask.view()),
    )
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut vol_err, mut loss_err) = (0.0f64, 0.0f64);
    for _ in 0..300 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let levels = rng.random_range(1..=8);
        let groups = rng.random_range(1..=4);
        let c = groups * rng.random_range(1..=3);
        let l = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0));
        let r = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0));
        let concat = shift_concat_volume(&FeatureMap(l.clone()), &FeatureMap(r.clone()), levels).unwrap();
        let gwc = build_gwc_volume(&FeatureMap(l.clone()), &FeatureMap(r.clone()), groups, levels).unwrap();
        let per = c / groups;
        for s in 0..levels {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        vol_err = vol_err.max((concat[[ch, s, y, x]] - l[[ch, y, x]]).abs());
                        let shifted = if x >= s { r[[ch, y, x - s]] } else { 0.0 };
                        vol_err = vol_err.max((concat[[c + ch, s, y, x]] - shifted).abs());
                    }
                    for g in 0..groups {
                        let mut want = 0.0;
                        if x >= s {
                            for ch in g * per..(g + 1) * per {
                                want += l[[ch, y, x]] * r[[ch, y, x - s]];
                            }
                            want /= per as f64;
                        }
                        vol_err = vol_err.max((gwc[[g, s, y, x]] - want).abs());
                    }
                }
            }
        }

        let levels = levels.max(2);
        let inst = Instance::random(h, w, levels, &mut rng);
        let i = &inst;
        let aps = aps_loss(i.d_a.view(), i.k_a.view(), i.d_b.view(), i.k_b.view(), i.mask.view(), Directions::BOTH).unwrap();
        let acs = acs_loss(
            i.p_a.view(),
            i.d_a.view(),
            i.k_a.view(),
            i.p_b.view(),
            i.d_b.view(),
            i.k_b.view(),
            i.mask.view(),
            Directions::BOTH,
            RhoSource::Student,
        )
        .unwrap();
        let (ta, tb) = targets(i);
        let conf = conf_loss(i.k_a.view(), ta.view(), i.k_b.view(), tb.view(), i.mask.view()).unwrap();
        let value = value_loss(i.d_a.view(), i.d_b.view(), i.gt.view(), i.mask.view()).unwrap();
        let dist = dist_loss(i.p_a.view(), i.k_a.view(), i.p_b.view(), i.k_b.view(), i.gt.view(), i.mask.view()).unwrap();
        for (got, want) in [(aps.value, i.aps()), (acs.value, i.acs()), (conf.value, i.conf()), (value.value, i.value()), (dist.value, i.dist())] {
            loss_err = loss_err.max((got - want).abs());
        }
        let ug = unimodal_generate(i.d_a.view(), i.k_a.view(), levels).unwrap();
        for ((y, x), _) in i.mask.indexed_iter() {
            let want = ug_oracle(i.d_a[[y, x]], i.k_a[[y, x]], levels);
            for (s, v) in want.iter().enumerate() {
                loss_err = loss_err.max((ug[[s, y, x]] - v).abs());
            }
        }
    }
    let pass = vol_err < 1e-5 && loss_err < 1e-9;
    verdict(1, pass, start.elapsed(), minutes(1), &format!("max volume diff {vol_err:.2e}, max loss diff {loss_err:.2e}"));
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over a whole gradient.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(&v);
            v[i] = orig - h;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn softmax_neg(cost: &[f64], levels: usize, plane: usize) -> Array3<f64> {
    let mut out = vec![0.0; cost.len()];
    kernels::neg_softmax(cost, levels, plane, &mut out);
    Array3::from_shape_vec((levels, 4, plane / 4), out).unwrap()
}

/// Chain rule through `P = softmax(-C)` for a gradient given w.r.t. `P`.
fn through_softmax(p: &Array3<f64>, dp: &ArrayD<f64>, levels: usize) -> Vec<f64> {
    let plane = p.len() / levels;
    let mut dc = vec![0.0; p.len()];
    kernels::neg_softmax_adjoint(p.as_slice().unwrap(), dp.as_slice().unwrap(), levels, plane, &mut dc);
    dc
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let (h, w, levels) = (4usize, 4usize, 8usize);
    let plane = h * w;
    let mut worst = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // cost -> distribution -> disparity through the autograd graph
        let cost = Tensor::from_shape_fn(IxDyn(&[1, levels, h, w]), |_| rng.random_range(-2.0..2.0));
        let weights = Tensor::from_shape_fn(IxDyn(&[1, h, w]), |_| rng.random_range(-1.0..1.0));
        let objective = |c: &[f64]| {
            let mut p = vec![0.0; c.len()];
            kernels::neg_softmax(c, levels, plane, &mut p);
            let mut d = vec![0.0; plane];
            kernels::expectation(&p, levels, plane, &mut d);
            d.iter().zip(weights.iter()).map(|(d, w)| d * w).sum::<f64>()
        };
        let mut g = Graph::new();
        let c = g.leaf(cost.clone(), true);
        let p = g.neg_softmax(c);
        let d = g.expectation(p);
        let value = objective(cost.as_slice().unwrap());
        let root = g.loss(value, vec![(d, weights.clone())]);
        let grads = g.backward(root);
        let analytic = grads.get(c).unwrap().iter().copied().collect::<Vec<_>>();
        worst.push(("cost->disparity", rel_err(&analytic, &numeric_grad(cost.as_slice().unwrap(), objective))));

        let mut inst = Instance::random(h, w, levels, &mut rng);
        inst.mask = random_mask(h, w, &mut rng);
        let i = &inst;
        let all = Directions::BOTH;

        // APS w.r.t. both disparities
        let l = aps_loss(i.d_a.view(), i.k_a.view(), i.d_b.view(), i.k_b.view(), i.mask.view(), all).unwrap();
        let f_a = |x: &[f64]| {
            let d = Array2::from_shape_vec((h, w), x.to_vec()).unwrap();
            aps_loss(d.view(), i.k_a.view(), i.d_b.view(), i.k_b.view(), i.mask.view(), Directions::B_TO_A).unwrap().value
        };
        let f_b = |x: &[f64]| {
            let d = Array2::from_shape_vec((h, w), x.to_vec()).unwrap();
            aps_loss(i.d_a.view(), i.k_a.view(), d.view(), i.k_b.view(), i.mask.view(), Directions::A_TO_B).unwrap().value
        };
        worst.push(("aps dD_a", rel_err(l.grads[0].as_slice().unwrap(), &numeric_grad(i.d_a.as_slice().unwrap(), f_a))));
        worst.push(("aps dD_b", rel_err(l.grads[1].as_slice().unwrap(), &numeric_grad(i.d_b.as_slice().unwrap(), f_b))));

        // ACS and dist w.r.t. the cost that produced each distribution
        let ca: Vec<f64> = (0..levels * plane).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cb: Vec<f64> = (0..levels * plane).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (pa, pb) = (softmax_neg(&ca, levels, plane), softmax_neg(&cb, levels, plane));
        let acs = |pa: &Array3<f64>, pb: &Array3<f64>, dirs| {
            acs_loss(pa.view(), i.d_a.view(), i.k_a.view(), pb.view(), i.d_b.view(), i.k_b.view(), i.mask.view(), dirs, RhoSource::Student)
                .unwrap()
        };
        let l = acs(&pa, &pb, all);
        let num_a = numeric_grad(&ca, |x| acs(&softmax_neg(x, levels, plane), &pb, Directions::B_TO_A).value);
        let num_b = numeric_grad(&cb, |x| acs(&pa, &softmax_neg(x, levels, plane), Directions::A_TO_B).value);
        worst.push(("acs dC_a", rel_err(&through_softmax(&pa, &l.grads[0], levels), &num_a)));
        worst.push(("acs dC_b", rel_err(&through_softmax(&pb, &l.grads[1], levels), &num_b)));

        let dist = |pa: &Array3<f64>, ka: &Array2<f64>| {
            dist_loss(pa.view(), ka.view(), pb.view(), i.k_b.view(), i.gt.view(), i.mask.view()).unwrap()
        };
        let l = dist(&pa, &i.k_a);
        let num_c = numeric_grad(&ca, |x| dist(&softmax_neg(x, levels, plane), &i.k_a).value);
        let num_k = numeric_grad(i.k_a.as_slice().unwrap(), |x| dist(&pa, &Array2::from_shape_vec((h, w), x.to_vec()).unwrap()).value);
        worst.push(("dist dC_a", rel_err(&through_softmax(&pa, &l.grads[0], levels), &num_c)));
        worst.push(("dist dK_a", rel_err(l.grads[1].as_slice().unwrap(), &num_k)));

        // value w.r.t. disparity, conf w.r.t. confidence (targets held fixed)
        let l = value_loss(i.d_a.view(), i.d_b.view(), i.gt.view(), i.mask.view()).unwrap();
        let num = numeric_grad(i.d_a.as_slice().unwrap(), |x| {
            let d = Array2::from_shape_vec((h, w), x.to_vec()).unwrap();
            value_loss(d.view(), i.d_b.view(), i.gt.view(), i.mask.view()).unwrap().value
        });
        worst.push(("value dD_a", rel_err(l.grads[0].as_slice().unwrap(), &num)));
        let (ta, tb) = targets(i);
        let l = conf_loss(i.k_a.view(), ta.view(), i.k_b.view(), tb.view(), i.mask.view()).unwrap();
        let num = numeric_grad(i.k_b.as_slice().unwrap(), |x| {
            let k = Array2::from_shape_vec((h, w), x.to_vec()).unwrap();
            conf_loss(i.k_a.view(), ta.view(), k.view(), tb.view(), i.mask.view()).unwrap().value
        });
        worst.push(("conf dK_b", rel_err(l.grads[1].as_slice().unwrap(), &num)));
    }
    let (name, max) = worst.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    verdict(2, max < 1e-3, start.elapsed(), minutes(2), &format!("worst relative error {max:.2e} ({name}) over {} checks", worst.len()));
}

fn unlabeled_copies(s: &[StereoSample]) -> Vec<StereoSample> {
    s.iter()
        .cloned()
        .map(|mut x| {
            x.gt_disparity = None;
            x.valid_mask = None;
            x
        })
        .collect()
}

#[test]
fn criterion_3_routing_contract() {
    let start = Instant::now();
    let mut cfg = TrainConfig::tiny();
    cfg.batch_size = 2;
    cfg.warmup_epochs = 1;
    cfg.semi_epochs = 1;
    cfg.augment.crop_h = 32;
    cfg.augment.crop_w = 32;
    let spec = SynthSpec::new(32, 64, 32, 2, 0);
    let labeled = synthetic_dataset(&spec, 2, 11).unwrap();
    let unlabeled = unlabeled_copies(&synthetic_dataset(&spec, 2, 12).unwrap());
    let mut st = DualBranchState::init(&cfg).unwrap();
    st.warmup_epoch(&labeled).unwrap();

    let batch = Batch::new(&unlabeled, 32, true).unwrap();
    let mut problems = Vec::new();
    for (dirs, student) in [(Directions::A_TO_B, "denet_b."), (Directions::B_TO_A, "denet_a.")] {
        let g = st.self_gradients(&batch, dirs).unwrap();
        if g.grads.is_empty() {
            problems.push(format!("{dirs:?} produced no gradient"));
        }
        for (id, grad) in &g.grads {
            let name = st.store.name(*id);
            if !name.starts_with(student) && grad.iter().any(|&v| v != 0.0) {
                problems.push(format!("{dirs:?} reached {name}"));
            }
        }
    }
    let snapshot = |st: &DualBranchState| {
        st.store.with_prefix("confnet_").map(|id| st.store.get(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let before = snapshot(&st);
    st.semi_epoch(&[], &unlabeled).unwrap();
    if snapshot(&st) != before {
        problems.push("confidence heads changed during an unlabeled epoch".into());
    }
    let detail = if problems.is_empty() { "teacher and confidence gradients exactly zero".to_string() } else { problems.join("; ") };
    verdict(3, problems.is_empty(), start.elapsed(), minutes(1), &detail);
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[test]
fn criterion_4_unimodal_generator() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let levels = rng.random_range(2..=48usize);
        let d = rng.random_range(0.0..(levels - 1) as f64);
        let k = rng.random_range(0.0..=1.0);
        let k2 = rng.random_range(0.0..=1.0);
        let gen = |k: f64| {
            let p = unimodal_generate(Array2::from_elem((1, 1), d).view(), Array2::from_elem((1, 1), k).view(), levels).unwrap();
            p.iter().copied().collect::<Vec<f64>>()
        };
        let p = gen(k);
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            failures.push(format!("#{trial}: sum {sum}"));
        }
        let nearest = d.round() as usize;
        let argmax = (0..levels).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        if (argmax as f64 - d).abs() > (nearest as f64 - d).abs() + 1e-12 {
            failures.push(format!("#{trial}: argmax {argmax} for d {d}"));
        }
        // monotone decay away from the nearest level(s) on both sides
        let lo = d.floor() as usize;
        let hi = (d.ceil() as usize).min(levels - 1);
        let decays = (lo + 1..levels).filter(|&s| s > hi).all(|s| p[s] < p[s - 1]) && (0..lo).all(|s| p[s] < p[s + 1]);
        if !decays {
            failures.push(format!("#{trial}: not monotone around {d}"));
        }
        if (k - k2).abs() > 1e-9 {
            let (lo_k, hi_k) = if k < k2 { (k, k2) } else { (k2, k) };
            if entropy(&gen(lo_k)) <= entropy(&gen(hi_k)) {
                failures.push(format!("#{trial}: entropy not decreasing in K ({lo_k} vs {hi_k})"));
            }
        }
        if rho(k) < 0.5 || rho(k) > 1.0 {
            failures.push(format!("#{trial}: rho {} out of range", rho(k)));
        }
    }
    let detail = if failures.is_empty() { "1000 pairs normalized, peaked, monotone, entropy decreasing".to_string() } else { failures[..failures.len().min(3)].join("; ") };
    verdict(4, failures.is_empty(), start.elapsed(), minutes(1), &detail);
}

// Desk-scale benchmark shared by the two ablation criteria. Every seed trains one
// warm-up, then runs each variant's semi-supervised stage from that same state.

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_WARMUP: usize = 300;
const BENCH_SEMI: usize = 20;

#[derive(Debug)]
struct VariantRun {
    test_mae: f64,
    scu: f64,
}

#[derive(Debug)]
struct SeedRuns {
    seed: u64,
    warmup_mae: f64,
    baseline: VariantRun,
    full: VariantRun,
    unidirectional: VariantRun,
}

struct Bench {
    runs: Vec<SeedRuns>,
    /// Warm-up plus the baseline and full stages.
    ablation_time: Duration,
    /// The unidirectional stages.
    unidirectional_time: Duration,
    log_dir: PathBuf,
}

fn bench_data(seed: u64) -> (Vec<StereoSample>, Vec<StereoSample>, Vec<StereoSample>) {
    let spec = SynthSpec::new(64, 128, 32, 3, 0);
    let labeled = synthetic_dataset(&spec, 8, 1000 + seed).unwrap();
    let unlabeled = unlabeled_copies(&synthetic_dataset(&spec, 64, 2000 + seed).unwrap());
    let test = synthetic_dataset(&spec, 16, 3000 + seed).unwrap();
    (labeled, unlabeled, test)
}

fn test_mae(st: &DualBranchState, test: &[StereoSample]) -> f64 {
    let total: f64 = test
        .iter()
        .map(|s| {
            let inf = st.infer(s.left.view(), s.right.view()).unwrap();
            mae(inf.disparity.view(), s.gt_disparity.as_ref().unwrap().view(), s.valid_mask.as_ref().unwrap().view())
        })
        .sum();
    total / test.len() as f64
}

fn semi_stage(
    warm: &DualBranchState,
    ablation: Ablation,
    name: &str,
    seed: u64,
    data: &(Vec<StereoSample>, Vec<StereoSample>, Vec<StereoSample>),
    log_dir: &Path,
) -> VariantRun {
    let (labeled, unlabeled, test) = data;
    let mut st = warm.clone();
    st.config.ablation = ablation;
    let mut log = std::fs::File::create(log_dir.join(format!("seed{seed}_{name}.jsonl"))).unwrap();
    while !st.is_finished() {
        let summary = st.run_epoch(labeled, unlabeled).unwrap();
        writeln!(log, "{}", serde_json::to_string(&summary).unwrap()).unwrap();
    }
    let run = VariantRun { test_mae: test_mae(&st, test), scu: st.scu(unlabeled).unwrap() };
    writeln!(log, "{}", serde_json::json!({"event": "result", "test_mae": run.test_mae, "scu": run.scu})).unwrap();
    run
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let (mut ablation_time, mut unidirectional_time) = (Duration::ZERO, Duration::ZERO);
        let log_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_bench");
        std::fs::create_dir_all(&log_dir).unwrap();
        let runs = BENCH_SEEDS
            .iter()
            .map(|&seed| {
                let data = bench_data(seed);
                let mut cfg = TrainConfig::tiny();
                cfg.warmup_epochs = BENCH_WARMUP;
                cfg.semi_epochs = BENCH_SEMI;
                cfg.seed = seed;
                cfg.seed_a = 10 + seed;
                cfg.seed_b = 20 + seed;
                let start = Instant::now();
                let mut warm = DualBranchState::init(&cfg).unwrap();
                let mut log = std::fs::File::create(log_dir.join(format!("seed{seed}_warmup.jsonl"))).unwrap();
                while warm.epoch < BENCH_WARMUP {
                    let summary = warm.run_epoch(&data.0, &data.1).unwrap();
                    writeln!(log, "{}", serde_json::to_string(&summary).unwrap()).unwrap();
                }
                let warmup_mae = test_mae(&warm, &data.2);
                let baseline = semi_stage(&warm, Ablation::baseline(), "baseline", seed, &data, &log_dir);
                let full = semi_stage(&warm, Ablation::default(), "full", seed, &data, &log_dir);
                ablation_time += start.elapsed();
                let start = Instant::now();
                let unidirectional = semi_stage(&warm, Ablation::unidirectional(), "unidirectional", seed, &data, &log_dir);
                unidirectional_time += start.elapsed();
                let runs = SeedRuns { seed, warmup_mae, baseline, full, unidirectional };
                writeln!(
                    std::io::stdout().lock(),
                    "  seed {seed}: warm-up MAE {:.4}; baseline MAE {:.4} SCU {:.3}; full MAE {:.4} SCU {:.3}; unidirectional MAE {:.4} SCU {:.3}",
                    runs.warmup_mae,
                    runs.baseline.test_mae,
                    runs.baseline.scu,
                    runs.full.test_mae,
                    runs.full.scu,
                    runs.unidirectional.test_mae,
                    runs.unidirectional.scu
                )
                .unwrap();
                runs
            })
            .collect();
        Bench { runs, ablation_time, unidirectional_time, log_dir }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_5_desk_ablation() {
    let b = bench();
    let full = median(b.runs.iter().map(|r| r.full.test_mae).collect());
    let base = median(b.runs.iter().map(|r| r.baseline.test_mae).collect());
    let wins = b.runs.iter().filter(|r| r.full.test_mae < r.baseline.test_mae).count();
    let detail = format!(
        "median test MAE full {full:.4} vs baseline {base:.4} ({:+.1}%), full strictly lower on {wins}/{} seeds; logs in {}",
        100.0 * (base - full) / base,
        b.runs.len(),
        b.log_dir.display()
    );
    verdict(5, full <= base && wins >= 2, b.ablation_time, minutes(45), &detail);
}

#[test]
fn criterion_6_bidirectional_scu() {
    let b = bench();
    let bi = median(b.runs.iter().map(|r| r.full.scu).collect());
    let uni = median(b.runs.iter().map(|r| r.unidirectional.scu).collect());
    let per_seed: Vec<String> = b.runs.iter().map(|r| format!("seed {} {:.3}/{:.3}", r.seed, r.full.scu, r.unidirectional.scu)).collect();
    let detail = format!(
        "median SCU bidirectional {bi:.3} vs unidirectional {uni:.3} [{}]; logs in {}",
        per_seed.join(", "),
        b.log_dir.display()
    );
    // reuses the full runs of criterion 5; only the unidirectional stages are its own
    verdict(6, bi >= uni, b.unidirectional_time, minutes(45), &detail);
}

#[test]
fn criterion_7_metric_fidelity() {
    let start = Instant::now();
    let mut problems = Vec::new();
    let gt = Array1::zeros(4);
    let all = Array1::from_elem(4, true);
    let mut check = |what: &str, got: f64, want: f64| {
        if got != want {
            problems.push(format!("{what}: {got} != {want}"));
        }
    };
    check("mae identity", mae(gt.view(), gt.view(), all.view()), 0.0);
    check("mae [1,3]", mae(arr1(&[1.0, 3.0]).view(), arr1(&[0.0, 0.0]).view(), arr1(&[true, true]).view()), 2.0);
    check("rmse identity", rmse(gt.view(), gt.view(), all.view()), 0.0);
    check("rmse [0,2]", rmse(arr1(&[0.0, 2.0]).view(), arr1(&[0.0, 0.0]).view(), arr1(&[true, true]).view()), 2f64.sqrt());
    let d = arr1(&[0.0, 1.0, 2.0, 4.0]);
    check("outliers [0,1,2,4] n=3", outlier_pct(d.view(), gt.view(), all.view(), 3.0), 25.0);
    check("error exactly n", outlier_pct(arr1(&[3.0]).view(), arr1(&[0.0]).view(), arr1(&[true]).view(), 3.0), 0.0);
    check("outliers n=1", outlier_pct(d.view(), gt.view(), all.view(), 1.0), 50.0);
    check("scu ones", scu(&[1.0; 10]), 10.0);
    check("scu empty", scu(&[]), 0.0);
    check("scu additive", scu(&[0.4, 0.6]), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let n = rng.random_range(1..40);
        let d = Array1::from_shape_fn(n, |_| rng.random_range(-10.0..10.0));
        let g = Array1::from_shape_fn(n, |_| rng.random_range(-10.0..10.0));
        let mut m = Array1::from_shape_fn(n, |_| rng.random_bool(0.6));
        m[0] = true;
        let (a, r) = (mae(d.view(), g.view(), m.view()), rmse(d.view(), g.view(), m.view()));
        if r + 1e-12 < a {
            problems.push(format!("#{trial}: rmse {r} < mae {a}"));
        }
        let pct: Vec<f64> = (1..=4).map(|t| outlier_pct(d.view(), g.view(), m.view(), t as f64)).collect();
        if pct.windows(2).any(|w| w[1] > w[0]) || pct.iter().any(|p| !(0.0..=100.0).contains(p)) {
            problems.push(format!("#{trial}: outliers {pct:?}"));
        }
    }
    let detail = if problems.is_empty() { "fixtures exact; 1000 random instances consistent".to_string() } else { problems[..problems.len().min(3)].join("; ") };
    verdict(7, problems.is_empty(), start.elapsed(), minutes(1), &detail);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dualstereo"))
        .args(args)
        .env_remove("DUALSTEREO_RUN_DIR")
        .env_remove("DUALSTEREO_DEVICE")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn find_nulls(v: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Null => out.push(path.to_string()),
        serde_json::Value::Object(m) => m.iter().for_each(|(k, v)| find_nulls(v, &format!("{path}.{k}"), out)),
        serde_json::Value::Array(a) => a.iter().for_each(|v| find_nulls(v, path, out)),
        _ => {}
    }
}

#[test]
fn criterion_8_end_to_end_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut problems = Vec::new();
    let mut step = |name: &str, args: &[&str]| {
        let o = cli(args);
        if !o.status.success() {
            problems.push(format!("{name} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
    };

    let synth_cfg = root.join("synth.json");
    let job = serde_json::json!({
        "height": 32, "width": 64, "s_max": 32, "n_blobs": 2, "seed": 8,
        "splits": [
            {"name": "labeled", "count": 4, "labeled": true},
            {"name": "unlabeled", "count": 4, "labeled": false},
            {"name": "test", "count": 4, "labeled": true}
        ]
    });
    std::fs::write(&synth_cfg, job.to_string()).unwrap();
    let data = root.join("data");
    step("synth", &["synth", "--config", p(&synth_cfg), "--out", p(&data)]);

    let train_cfg = root.join("train.json");
    step("template", &["template", "--out", p(&train_cfg)]);
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&train_cfg).unwrap()).unwrap();
    cfg["data"]["labeled"] = serde_json::json!(data.join("labeled/manifest.json"));
    cfg["data"]["unlabeled"] = serde_json::json!(data.join("unlabeled/manifest.json"));
    cfg["train"]["warmup_epochs"] = 2.into();
    cfg["train"]["semi_epochs"] = 2.into();
    cfg["train"]["augment"]["crop_h"] = 32.into();
    cfg["train"]["augment"]["crop_w"] = 32.into();
    cfg["checkpoint_every"] = 2.into();
    std::fs::write(&train_cfg, cfg.to_string()).unwrap();
    let run = root.join("run");
    step("train", &["train", "--config", p(&train_cfg), "--out", p(&run)]);
    step("eval", &["eval", "--checkpoint", p(&run.join("final.ckpt")), "--manifest", p(&data.join("test/manifest.json"))]);
    let table = root.join("table");
    step("report", &["report", p(&run), "--out", p(&table)]);

    let artifacts = [
        data.join("manifest.json"),
        data.join("labeled/manifest.json"),
        run.join("manifest.json"),
        run.join("config.json"),
        run.join("log.jsonl"),
        run.join("checkpoints/epoch_0002.ckpt"),
        run.join("checkpoints/epoch_0004.ckpt"),
        run.join("final.ckpt"),
        run.join("report.json"),
        run.join("eval/eval_report.json"),
        run.join("eval/metrics.csv"),
        table.join("report.md"),
        table.join("report.csv"),
    ];
    for a in &artifacts {
        if !a.exists() {
            problems.push(format!("missing {}", a.display()));
        }
    }
    // serde_json writes non-finite floats as null
    let mut non_finite = Vec::new();
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap_or_default();
    for line in log.lines() {
        let event: serde_json::Value = serde_json::from_str(line).unwrap();
        if event["event"] == "epoch" {
            for key in ["lr", "labeled", "unlabeled"] {
                find_nulls(&event["summary"][key], key, &mut non_finite);
            }
        }
    }
    if let Ok(text) = std::fs::read_to_string(run.join("eval/eval_report.json")) {
        let report: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["mae_px", "rmse_px", "outlier_pct", "scu"] {
            find_nulls(&report[key], key, &mut non_finite);
        }
    }
    let csv = std::fs::read_to_string(table.join("report.csv")).unwrap_or_default();
    let numbers = csv.lines().skip(1).flat_map(|l| l.split(',').skip(2).filter(|f| !f.is_empty()).map(|f| f.parse::<f64>()));
    if numbers.into_iter().any(|v| !v.is_ok_and(f64::is_finite)) {
        non_finite.push("report.csv".into());
    }
    if !non_finite.is_empty() {
        problems.push(format!("non-finite values in {}", non_finite.join(", ")));
    }
    let maps = std::fs::read_dir(run.join("eval")).map(|d| d.filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().ends_with("_error.png")).count()).unwrap_or(0);
    if maps != 4 {
        problems.push(format!("{maps} error maps instead of 4"));
    }
    let detail = if problems.is_empty() { "synth, train 2+2, eval, report all exit 0 with artifacts".to_string() } else { problems.join("; ") };
    verdict(8, problems.is_empty(), start.elapsed(), minutes(5), &detail);
}
