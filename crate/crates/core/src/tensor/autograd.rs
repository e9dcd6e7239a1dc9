use std::collections::{HashMap, HashSet};

use super::{ParamId, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Keep backward closures and parent links alive after the pass.
    pub retain_graph: bool,
}

/// Gradient of the loss with respect to one requested leaf.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: Option<ParamId>,
    pub node: u64,
    pub shape: Vec<usize>,
    pub grad: Vec<f64>,
    /// Whether any gradient actually arrived at this leaf. Unreached leaves
    /// still carry an all-zero `grad` of the right shape.
    pub reached: bool,
}

impl GradEntry {
    pub fn max_abs(&self) -> f64 {
        self.grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()))
    }
}

/// One entry per requested parameter, in request order.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: Vec<GradEntry>,
    by_param: HashMap<ParamId, usize>,
    by_node: HashMap<u64, usize>,
}

impl GradientMap {
    fn push(&mut self, entry: GradEntry) {
        let idx = self.entries.len();
        if let Some(p) = entry.param {
            self.by_param.insert(p, idx);
        }
        self.by_node.insert(entry.node, idx);
        self.entries.push(entry);
    }

    pub fn get(&self, t: &Tensor) -> Option<&GradEntry> {
        self.by_node.get(&t.id()).map(|&i| &self.entries[i])
    }

    pub fn get_param(&self, id: ParamId) -> Option<&GradEntry> {
        self.by_param.get(&id).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_leaves(params: &[Tensor]) -> Result<()> {
    for p in params {
        if p.param_id().is_none() || !p.requires_grad() {
            return Err(TensorError::NotLeaf(p.id()));
        }
    }
    Ok(())
}

/// Gradients of a scalar `loss` with respect to `params`. Consumes the graph.
pub fn backward(loss: &Tensor, params: &[Tensor]) -> Result<GradientMap> {
    backward_with(loss, params, BackwardOptions::default())
}

pub fn backward_with(loss: &Tensor, params: &[Tensor], opts: BackwardOptions) -> Result<GradientMap> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    check_leaves(params)?;
    let is_leaf = loss.param_id().is_some();
    if loss.is_tracked() && !is_leaf && loss.grad_fn().is_none() {
        return Err(TensorError::GraphConsumed);
    }

    let order = if loss.requires_grad() {
        topo_order(loss)
    } else {
        Vec::new()
    };

    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut leaf_grads: HashMap<u64, Vec<f64>> = HashMap::new();
    if !order.is_empty() {
        pending.insert(loss.id(), vec![1.0]);
    }

    for node in order.iter().rev() {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        if node.param_id().is_some() {
            accumulate(&mut leaf_grads, node.id(), grad);
            continue;
        }
        let taken;
        let mut guard = node.grad_fn();
        let grad_fn = if opts.retain_graph {
            guard.as_ref()
        } else {
            taken = guard.take();
            taken.as_ref()
        };
        let Some(grad_fn) = grad_fn else { continue };
        let Some(back) = &grad_fn.backward else {
            continue;
        };
        let parent_grads = back(&grad);
        for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
            if let Some(pg) = pg {
                if parent.requires_grad() {
                    debug_assert_eq!(pg.len(), parent.numel());
                    accumulate(&mut pending, parent.id(), pg);
                }
            }
        }
    }

    let mut map = GradientMap::default();
    for p in params {
        let (grad, reached) = match leaf_grads.get(&p.id()) {
            Some(g) => (g.clone(), true),
            None => (vec![0.0; p.numel()], false),
        };
        map.push(GradEntry {
            param: p.param_id(),
            node: p.id(),
            shape: p.shape().to_vec(),
            grad,
            reached,
        });
    }
    Ok(map)
}

fn accumulate(map: &mut HashMap<u64, Vec<f64>>, id: u64, grad: Vec<f64>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
        None => {
            map.insert(id, grad);
        }
    }
}

/// Post-order over nodes that require grad, walking only through
/// gradient-carrying edges (barriers are not expanded).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        let guard = t.grad_fn();
        if let Some(gf) = guard.as_ref() {
            if gf.backward.is_some() {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
    }
    order
}

/// Static reachability from a loss, ignoring values.
#[derive(Clone, Debug, Default)]
pub struct Reachability {
    /// Leaf node ids reachable along a path with no stop-gradient barrier.
    pub direct: HashSet<u64>,
    /// Leaf node ids reachable only by crossing at least one barrier.
    pub via_barrier: HashSet<u64>,
    /// Number of distinct barrier nodes encountered.
    pub barriers: usize,
}

impl Reachability {
    pub fn reaches(&self, t: &Tensor) -> bool {
        self.direct.contains(&t.id())
    }

    pub fn reaches_only_through_barrier(&self, t: &Tensor) -> bool {
        !self.direct.contains(&t.id()) && self.via_barrier.contains(&t.id())
    }
}

pub fn graph_reachability(loss: &Tensor) -> Reachability {
    let mut out = Reachability::default();
    let mut seen: HashSet<(u64, bool)> = HashSet::new();
    let mut barrier_ids = HashSet::new();
    let mut stack = vec![(loss.clone(), false)];
    while let Some((t, crossed)) = stack.pop() {
        if !seen.insert((t.id(), crossed)) {
            continue;
        }
        if t.param_id().is_some() {
            if crossed {
                out.via_barrier.insert(t.id());
            } else {
                out.direct.insert(t.id());
            }
            continue;
        }
        let guard = t.grad_fn();
        if let Some(gf) = guard.as_ref() {
            let is_barrier = gf.backward.is_none();
            if is_barrier {
                barrier_ids.insert(t.id());
            }
            for p in &gf.parents {
                if p.is_tracked() {
                    stack.push((p.clone(), crossed || is_barrier));
                }
            }
        }
    }
    out.barriers = barrier_ids.len();
    out
}
