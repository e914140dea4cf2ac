use crate::autograd::{ParamId, ParamStore, Tensor};

/// `lr_init * 0.5^floor(4 * epoch / total)`: halved every quarter of the stage.
pub fn lr_schedule(epoch: usize, total_epochs: usize, lr_init: f64) -> f64 {
    let quarters = (4 * epoch) / total_epochs.max(1);
    lr_init * 0.5f64.powi(quarters as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam with per-parameter step counts. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) slots: Vec<Option<AdamSlot>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: Vec::new() }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        for (id, g) in grads {
            let slot = self.slots[id.0].get_or_insert_with(|| AdamSlot {
                m: Tensor::zeros(g.raw_dim()),
                v: Tensor::zeros(g.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(slot.t as i32);
            let c2 = 1.0 - b2.powi(slot.t as i32);
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(&mut slot.m).and(&mut slot.v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }

    /// Steps taken by one parameter.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.slots.get(id.0).and_then(|s| s.as_ref()).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{tensor, ParamKind};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 0.001), 0.001);
        assert_eq!(lr_schedule(50, 100, 0.001), 0.00025);
        assert_eq!(lr_schedule(99, 100, 0.001), 0.000125);
        assert_eq!(lr_schedule(24, 100, 0.001), 0.001);
        assert_eq!(lr_schedule(25, 100, 0.001), 0.0005);
    }

    #[test]
    fn first_step_moves_by_lr_and_skips_missing() {
        let mut store = ParamStore::new();
        let a = store.add("a", tensor(&[2], vec![1.0, -1.0]), ParamKind::Weight);
        let b = store.add("b", tensor(&[1], vec![5.0]), ParamKind::Weight);
        let mut adam = Adam::default();
        adam.step(&mut store, &[(a, tensor(&[2], vec![0.3, -2.0]))], 0.1);
        // bias-corrected first step is lr * sign(g)
        let v = store.get(a);
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(b)[0], 5.0);
        assert_eq!(adam.steps(a), 1);
        assert_eq!(adam.steps(b), 0);
    }
}
