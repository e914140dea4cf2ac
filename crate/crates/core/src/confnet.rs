//! Confidence head: reads a cost volume and predicts per-pixel reliability in (0, 1).

use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::denet::CostVolume;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBn, Ctx, Init};
use crate::supervision;

/// Per-pixel confidence `[H, W]`, strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap(pub Array2<f64>);

impl ConfidenceMap {
    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }
}

/// Binary confidence targets with the mask of pixels where they are defined.
#[derive(Clone, Debug, PartialEq)]
pub struct GtConfidenceMap {
    pub values: Array2<f64>,
    pub valid_mask: Array2<bool>,
}

/// Targets of 1 where the prediction is within three pixels of GT.
pub fn gt_confidence(d: ArrayView2<f64>, gt: ArrayView2<f64>, valid_mask: ArrayView2<bool>) -> GtConfidenceMap {
    GtConfidenceMap {
        values: supervision::gt_confidence(d, gt, valid_mask),
        valid_mask: valid_mask.to_owned(),
    }
}

#[derive(Clone, Debug)]
pub struct Confnet {
    levels: usize,
    hidden: ConvBn,
    head: Conv,
}

impl Confnet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, levels: usize) -> Self {
        let width = Self::hidden_width(levels);
        let init = &mut Init { store, rng };
        Self {
            levels,
            hidden: ConvBn::planar(init, &format!("{prefix}.hidden"), levels, width, 3, 1, true),
            head: Conv::planar(init, &format!("{prefix}.head"), width, 1, 1, 1, true),
        }
    }

    /// Intermediate width: a third of the level count, at least one.
    pub fn hidden_width(levels: usize) -> usize {
        ((levels as f64 / 3.0).round() as usize).max(1)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// `[N, S, H, W]` cost to `[N, H, W]` confidence.
    pub fn forward(&self, ctx: &mut Ctx, cost: Var) -> Result<Var> {
        let shape = ctx.graph.shape(cost).to_vec();
        if shape.len() != 4 || shape[1] != self.levels {
            return Err(Error::Shape(format!("confnet expects [N, {}, H, W], got {shape:?}", self.levels)));
        }
        let h = self.hidden.forward(ctx, cost);
        let logit = self.head.forward(ctx, h);
        let k = ctx.graph.sigmoid(logit);
        Ok(ctx.graph.reshape(k, &[shape[0], shape[2], shape[3]]))
    }

    /// Confidence of one `[S, H, W]` cost volume (inference mode).
    pub fn confidence(&self, store: &ParamStore, cost: &CostVolume) -> Result<ConfidenceMap> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let c = ctx.graph.constant(cost.0.clone().insert_axis(Axis(0)).into_dyn());
        let k = self.forward(&mut ctx, c)?;
        let map = g.value(k).index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("rank-3 output");
        Ok(ConfidenceMap(map))
    }
}
