use std::collections::{HashMap, HashSet};

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Runs reverse accumulation from one or more seeded tensors.
///
/// Seeds for the same tensor add up. Every `requires_grad` tensor reached from
/// a seed receives (accumulates) its gradient. This is how a partition resumes
/// back-propagation from a gradient that arrived over the wire.
pub fn backward_seeded<T: Scalar>(seeds: &[(Tensor<T>, Vec<T>)]) -> Result<()> {
    let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
    for (t, g) in seeds {
        if g.len() != t.numel() {
            return Err(TensorError::Backward(format!(
                "seed gradient has {} values for a tensor of shape {:?}",
                g.len(),
                t.shape()
            )));
        }
        if !t.requires_grad() {
            continue;
        }
        add_into(&mut pending, t.id(), g);
    }

    // Iterative post-order DFS; parents visited in declaration order so the
    // accumulation order (and thus the floating-point result) is fixed.
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    for (root, _) in seeds {
        if !root.requires_grad() || visited.contains(&root.id()) {
            continue;
        }
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.id());
        while let Some((t, next)) = stack.pop() {
            let parents = t.node.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
    }

    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else { continue };
        if let Some(grad_fn) = &t.node.grad_fn {
            let parent_grads = (grad_fn.backward)(&g);
            debug_assert_eq!(parent_grads.len(), grad_fn.parents.len(), "{}", grad_fn.op);
            for (p, pg) in grad_fn.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.requires_grad() {
                        debug_assert_eq!(pg.len(), p.numel(), "{} parent grad size", grad_fn.op);
                        add_into(&mut pending, p.id(), &pg);
                    }
                }
            }
        }
        t.accumulate_grad(&g);
    }
    Ok(())
}

fn add_into<T: Scalar>(pending: &mut HashMap<u64, Vec<T>>, id: u64, g: &[T]) {
    match pending.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => {
            pending.insert(id, g.to_vec());
        }
    }
}
