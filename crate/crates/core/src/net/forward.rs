use super::arch::{ArchKind, ArchitectureSpec, WeightIndex};
use super::weights::WeightSet;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm_sq};
use crate::scalar::Scalar;

/// Everything a forward pass computed for one input.
///
/// ReLU sites are stored flat in `activations` / `masks`:
/// - Vanilla: site `l-1` is hidden layer `l` (its activation is also `y^l`).
/// - ResNet: site `(l-1)(m-1) + h-1` is `q^{l-1,h}` for h in 1..m.
/// - DenseNet: site `h` is `q^h` for h in 0..L. Layers pruned by a reduction
///   have empty `y^h` and empty site vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Vec<T>,
    /// `y^0 ..= y^L`.
    pub block_outputs: Vec<Vec<T>>,
    /// Vanilla: `[l-1][0]` is the pre-activation of layer `l`.
    /// ResNet: `[l-1][h-1]` is `y^{l-1,h}`, h in 1..=m. DenseNet: empty.
    pub branch_preacts: Vec<Vec<Vec<T>>>,
    pub activations: Vec<Vec<T>>,
    pub masks: Vec<Vec<bool>>,
    pub output: T,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn resnet_site(spec: &ArchitectureSpec, l: usize, h: usize) -> usize {
        (l - 1) * (spec.branch_depth - 1) + (h - 1)
    }
}

/// `(√2·max(0, u), 1[u > 0])`
pub fn relu_site<T: Scalar>(pre: &[T]) -> (Vec<T>, Vec<bool>) {
    let s2 = T::SQRT_2();
    let mut act = Vec::with_capacity(pre.len());
    let mut mask = Vec::with_capacity(pre.len());
    for &u in pre {
        let on = u > T::zero();
        mask.push(on);
        act.push(if on { s2 * u } else { T::zero() });
    }
    (act, mask)
}

pub(crate) fn check_input<T: Scalar>(spec: &ArchitectureSpec, x: &[T]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::InputDimension {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    if !(norm_sq(x) > T::zero()) {
        return Err(Error::ZeroInput);
    }
    Ok(())
}

pub fn forward<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<ForwardTrace<T>> {
    check_input(spec, x)?;
    w.check_shapes(spec)?;
    Ok(forward_unchecked(spec, w, x))
}

/// Forward pass without validation; callers guarantee shapes and a nonzero input.
pub(crate) fn forward_unchecked<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    x: &[T],
) -> ForwardTrace<T> {
    let n = spec.width;
    let inv_sqrt_n = T::one() / T::of_usize(n).sqrt();
    let y0 = {
        let mut y = vec![T::zero(); n];
        w.initial
            .matvec_acc(x, T::one() / T::of_usize(spec.input_dim).sqrt(), &mut y);
        y
    };
    let mut trace = ForwardTrace {
        input: x.to_vec(),
        block_outputs: vec![y0],
        branch_preacts: Vec::new(),
        activations: Vec::new(),
        masks: Vec::new(),
        output: T::zero(),
    };

    match spec.kind {
        ArchKind::Vanilla => {
            for l in 1..=spec.depth {
                let mut u = vec![T::zero(); n];
                w.body[l - 1].matvec_acc(&trace.block_outputs[l - 1], inv_sqrt_n, &mut u);
                let (q, z) = relu_site(&u);
                trace.branch_preacts.push(vec![u]);
                trace.activations.push(q.clone());
                trace.masks.push(z);
                trace.block_outputs.push(q);
            }
        }
        ArchKind::ResNet => {
            let m = spec.branch_depth;
            for l in 1..=spec.depth {
                let mut pres: Vec<Vec<T>> = Vec::with_capacity(m);
                for h in 1..=m {
                    let mut u = vec![T::zero(); n];
                    let slot = spec.slot(WeightIndex::new(l, h));
                    if h == 1 {
                        w.body[slot].matvec_acc(&trace.block_outputs[l - 1], inv_sqrt_n, &mut u);
                    } else {
                        let (q, z) = relu_site(&pres[h - 2]);
                        w.body[slot].matvec_acc(&q, inv_sqrt_n, &mut u);
                        trace.activations.push(q);
                        trace.masks.push(z);
                    }
                    pres.push(u);
                }
                let sa = T::of(spec.alpha(l)).sqrt();
                let branch = &pres[m - 1];
                let prev = &trace.block_outputs[l - 1];
                let y: Vec<T> = if spec.has_skip(l) {
                    prev.iter().zip(branch).map(|(&p, &b)| p + sa * b).collect()
                } else {
                    branch.iter().map(|&b| sa * b).collect()
                };
                trace.branch_preacts.push(pres);
                trace.block_outputs.push(y);
            }
        }
        ArchKind::DenseNet => {
            let alpha = T::of(spec.dense_alpha());
            for l in 1..=spec.depth {
                let prev = &trace.block_outputs[l - 1];
                let (q, z) = if prev.is_empty() {
                    (Vec::new(), Vec::new())
                } else {
                    relu_site(prev)
                };
                trace.activations.push(q);
                trace.masks.push(z);
                let y = match spec.dense_sources(l) {
                    None => Vec::new(),
                    Some(range) => {
                        let c = (alpha / (T::of_usize(n) * T::of_usize(l))).sqrt();
                        let mut y = vec![T::zero(); n];
                        for h in range {
                            let slot = spec.slot(WeightIndex::new(l, h));
                            w.body[slot].matvec_acc(&trace.activations[h], c, &mut y);
                        }
                        y
                    }
                };
                trace.block_outputs.push(y);
            }
        }
    }

    let y_last = trace.block_outputs.last().expect("y^0 is always present");
    trace.output = dot(w.final_projection.row(0), y_last) * inv_sqrt_n;
    trace
}
