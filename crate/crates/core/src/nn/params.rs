use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, weight decay applies.
    Weight,
    /// Trainable, excluded from weight decay (norm affine, class tokens).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named, ordered parameter set. Trainable entries are stored as leaf
/// tensors tagged with their [`ParamId`], so forward passes can use them
/// directly.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name or a shape/data mismatch: both are
    /// construction bugs, not runtime conditions.
    pub fn register(&mut self, name: &str, group: &str, kind: ParamKind, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let t = Tensor::new(shape, data).unwrap_or_else(|e| panic!("parameter {name}: {e}"));
        let value = if kind.trainable() { t.into_parameter(id) } else { t };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group: group.to_string(),
            kind,
            value,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All trainable leaves, in registration order.
    pub fn trainable(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.clone())
            .collect()
    }

    /// Replaces an entry's value, keeping its id and kind.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) {
        let e = &mut self.entries[id.0];
        let t = Tensor::new(e.value.shape(), data).unwrap_or_else(|err| panic!("parameter {}: {err}", e.name));
        e.value = if e.kind.trainable() { t.into_parameter(id) } else { t };
    }

    /// Copy of the store where `id` is backed by `value` (used to probe a
    /// single parameter with an external leaf).
    pub fn with_override(&self, id: ParamId, value: Tensor) -> ParamStore {
        let mut out = self.clone();
        out.entries[id.0].value = value;
        out
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for e in &self.entries {
            if !groups.contains(&e.group) {
                groups.push(e.group.clone());
            }
        }
        groups
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let m = u.momentum;
            let mean: Vec<f64> = self
                .get(u.running_mean)
                .data()
                .iter()
                .zip(&u.batch_mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let var: Vec<f64> = self
                .get(u.running_var)
                .data()
                .iter()
                .zip(&u.batch_var)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            self.set_data(u.running_mean, mean);
            self.set_data(u.running_var, var);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a train-mode norm layer.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Forward-pass context: read-only parameters plus collected side effects.
pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    pub mode: Mode,
    updates: RefCell<Vec<StatUpdate>>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            params,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.params.get(id).clone()
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub(crate) fn push_update(&self, u: StatUpdate) {
        self.updates.borrow_mut().push(u);
    }

    pub fn take_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_not_leaves() {
        let mut s = ParamStore::new();
        let w = s.register("w", "g", ParamKind::Weight, &[2], vec![1.0, 2.0]);
        let b = s.register("rm", "g", ParamKind::Buffer, &[2], vec![0.0, 0.0]);
        assert_eq!(s.get(w).param_id(), Some(w));
        assert!(s.get(b).param_id().is_none());
        assert_eq!(s.trainable().len(), 1);
        s.set_data(w, vec![3.0, 4.0]);
        assert_eq!(s.get(w).param_id(), Some(w));
        assert_eq!(s.get(w).data(), &[3.0, 4.0]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::new();
        let m = s.register("m", "g", ParamKind::Buffer, &[1], vec![0.0]);
        let v = s.register("v", "g", ParamKind::Buffer, &[1], vec![1.0]);
        s.apply_stat_updates(vec![StatUpdate {
            running_mean: m,
            running_var: v,
            batch_mean: vec![2.0],
            batch_var: vec![3.0],
            momentum: 0.1,
        }]);
        assert!((s.get(m).item() - 0.2).abs() < 1e-15);
        assert!((s.get(v).item() - 1.2).abs() < 1e-15);
    }
}
