use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{invalid, GradientMap, ParamId, Result};

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v = m * v + g + wd * p`, `p -= lr * v`.
///
/// Parameters the loss cannot reach are left untouched (no decay, no
/// momentum carry-over), so a branch cut off by stop-gradients stays
/// bit-identical.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.0).and_then(|v| v.as_deref())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for g in grads.iter() {
            let Some(id) = g.param else { continue };
            if !g.reached {
                continue;
            }
            let entry = store.entry(id);
            if !entry.kind.trainable() {
                continue;
            }
            let p = entry.value.data();
            if g.grad.len() != p.len() {
                return Err(invalid(
                    "sgd_step",
                    format!("{}: gradient has {} values, parameter {}", entry.name, g.grad.len(), p.len()),
                ));
            }
            let wd = if entry.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
            let mut next = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g.grad[i] + wd * p[i];
                next.push(p[i] - lr * v[i]);
            }
            store.set_data(id, next);
        }
        Ok(())
    }
}
