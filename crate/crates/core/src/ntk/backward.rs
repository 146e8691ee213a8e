use crate::error::{Error, Result};
use crate::net::{ArchKind, ArchitectureSpec, ForwardTrace, MatrixId, WeightIndex, WeightSet};
use crate::numerics::{dot, norm_sq, Matrix};
use crate::scalar::Scalar;

/// Gradient of the output with respect to one weight matrix.
///
/// Each matrix is used exactly once per forward pass, so its gradient is the
/// outer product `left ⊗ right` of the adjoint arriving at its output and the
/// vector it multiplies.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOne<T> {
    pub left: Vec<T>,
    pub right: Vec<T>,
}

impl<T: Scalar> RankOne<T> {
    fn zero(rows: usize, cols: usize) -> Self {
        RankOne {
            left: vec![T::zero(); rows],
            right: vec![T::zero(); cols],
        }
    }

    /// Frobenius inner product with another rank-one matrix.
    pub fn inner(&self, other: &RankOne<T>) -> T {
        dot(&self.left, &other.left) * dot(&self.right, &other.right)
    }

    pub fn norm_sq(&self) -> T {
        norm_sq(&self.left) * norm_sq(&self.right)
    }

    /// `⟨W, left ⊗ right⟩ = leftᵀ W right`
    pub fn contract(&self, w: &Matrix<T>) -> T {
        w.bilinear(&self.left, &self.right)
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_fn(self.left.len(), self.right.len(), |i, j| {
            self.left[i] * self.right[j]
        })
    }
}

/// Per-matrix Jacobians of one input, in factored form.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianFactors<T> {
    pub initial: RankOne<T>,
    pub body: Vec<RankOne<T>>,
    pub final_projection: RankOne<T>,
}

impl<T: Scalar> JacobianFactors<T> {
    pub fn get(&self, spec: &ArchitectureSpec, id: MatrixId) -> &RankOne<T> {
        match id {
            MatrixId::Initial => &self.initial,
            MatrixId::Body(k) => &self.body[spec.slot(k)],
            MatrixId::Final => &self.final_projection,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &RankOne<T>> {
        std::iter::once(&self.initial)
            .chain(&self.body)
            .chain(std::iter::once(&self.final_projection))
    }

    /// `⟨J(x), J(x')⟩` summed over every matrix.
    pub fn inner(&self, other: &JacobianFactors<T>) -> T {
        self.iter().zip(other.iter()).map(|(a, b)| a.inner(b)).sum()
    }

    pub fn norm_sq(&self) -> T {
        self.iter().map(RankOne::norm_sq).sum()
    }

    pub fn to_gradients(&self, spec: &ArchitectureSpec) -> GradientSet<T> {
        GradientSet {
            d_initial: self.initial.to_matrix(),
            d_body: self.body.iter().map(RankOne::to_matrix).collect(),
            d_final: self.final_projection.to_matrix(),
            keys: spec.body_indices(),
        }
    }
}

/// Materialized gradient of the output with respect to every weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub d_initial: Matrix<T>,
    pub d_body: Vec<Matrix<T>>,
    pub d_final: Matrix<T>,
    keys: Vec<WeightIndex>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn keys(&self) -> &[WeightIndex] {
        &self.keys
    }

    pub fn matrix(&self, id: MatrixId) -> Option<&Matrix<T>> {
        match id {
            MatrixId::Initial => Some(&self.d_initial),
            MatrixId::Body(k) => self.keys.binary_search(&k).ok().map(|i| &self.d_body[i]),
            MatrixId::Final => Some(&self.d_final),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (MatrixId, &Matrix<T>)> {
        std::iter::once((MatrixId::Initial, &self.d_initial))
            .chain(self.keys.iter().map(|&k| MatrixId::Body(k)).zip(&self.d_body))
            .chain(std::iter::once((MatrixId::Final, &self.d_final)))
    }

    pub fn norm_sq(&self) -> T {
        self.iter().map(|(_, m)| m.frobenius_dot(m)).sum()
    }
}

pub fn backward<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    trace: &ForwardTrace<T>,
) -> Result<GradientSet<T>> {
    Ok(backward_factors(spec, w, trace)?.to_gradients(spec))
}

fn check_trace<T: Scalar>(spec: &ArchitectureSpec, trace: &ForwardTrace<T>) -> Result<()> {
    let n = spec.width;
    let mismatch = |m: &str| Err(Error::TraceMismatch(m.into()));
    if trace.input.len() != spec.input_dim {
        return mismatch("input dimension");
    }
    if trace.block_outputs.len() != spec.depth + 1 {
        return mismatch("number of block outputs");
    }
    let sites = match spec.kind {
        ArchKind::Vanilla => spec.depth,
        ArchKind::ResNet => spec.depth * (spec.branch_depth - 1),
        ArchKind::DenseNet => spec.depth,
    };
    if trace.activations.len() != sites || trace.masks.len() != sites {
        return mismatch("number of activation sites");
    }
    for (a, z) in trace.activations.iter().zip(&trace.masks) {
        if a.len() != z.len() || !(a.is_empty() || a.len() == n) {
            return mismatch("activation width");
        }
    }
    if trace.block_outputs[spec.depth].len() != n || trace.block_outputs[0].len() != n {
        return mismatch("block width");
    }
    match spec.kind {
        ArchKind::Vanilla | ArchKind::ResNet => {
            if trace.branch_preacts.len() != spec.depth {
                return mismatch("number of branch pre-activations");
            }
        }
        ArchKind::DenseNet => {}
    }
    Ok(())
}

/// `√2 · z ⊙ g`
fn through_relu<T: Scalar>(g: &[T], mask: &[bool]) -> Vec<T> {
    let s2 = T::SQRT_2();
    g.iter()
        .zip(mask)
        .map(|(&v, &on)| if on { s2 * v } else { T::zero() })
        .collect()
}

fn scaled<T: Scalar>(v: &[T], s: T) -> Vec<T> {
    v.iter().map(|&a| a * s).collect()
}

/// Reverse-mode pass returning each matrix's Jacobian as a rank-one factor.
/// Masks are treated as constants, so the ReLU sub-gradient at 0 is 0.
pub fn backward_factors<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    trace: &ForwardTrace<T>,
) -> Result<JacobianFactors<T>> {
    check_trace(spec, trace)?;
    w.check_shapes(spec)?;
    Ok(backward_unchecked(spec, w, trace))
}

pub(crate) fn backward_unchecked<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    trace: &ForwardTrace<T>,
) -> JacobianFactors<T> {
    let n = spec.width;
    let inv_sqrt_n = T::one() / T::of_usize(n).sqrt();
    let y_last = &trace.block_outputs[spec.depth];
    let final_projection = RankOne {
        left: vec![T::one()],
        right: scaled(y_last, inv_sqrt_n),
    };
    let mut body: Vec<RankOne<T>> = (0..spec.body_len()).map(|_| RankOne::zero(n, n)).collect();
    // adjoint of y^L
    let mut g: Vec<T> = scaled(w.final_projection.row(0), inv_sqrt_n);

    match spec.kind {
        ArchKind::Vanilla => {
            for l in (1..=spec.depth).rev() {
                let gu = through_relu(&g, &trace.masks[l - 1]);
                let mut gin = vec![T::zero(); n];
                w.body[l - 1].tr_matvec_acc(&gu, inv_sqrt_n, &mut gin);
                body[l - 1] = RankOne {
                    left: scaled(&gu, inv_sqrt_n),
                    right: trace.block_outputs[l - 1].clone(),
                };
                g = gin;
            }
        }
        ArchKind::ResNet => {
            let m = spec.branch_depth;
            for l in (1..=spec.depth).rev() {
                let sa = T::of(spec.alpha(l)).sqrt();
                let mut gb = scaled(&g, sa);
                for h in (1..=m).rev() {
                    let slot = spec.slot(WeightIndex::new(l, h));
                    let input = if h == 1 {
                        &trace.block_outputs[l - 1]
                    } else {
                        &trace.activations[ForwardTrace::<T>::resnet_site(spec, l, h - 1)]
                    };
                    let mut gin = vec![T::zero(); n];
                    w.body[slot].tr_matvec_acc(&gb, inv_sqrt_n, &mut gin);
                    body[slot] = RankOne {
                        left: scaled(&gb, inv_sqrt_n),
                        right: input.clone(),
                    };
                    if h > 1 {
                        let site = ForwardTrace::<T>::resnet_site(spec, l, h - 1);
                        gb = through_relu(&gin, &trace.masks[site]);
                    } else if spec.has_skip(l) {
                        for (a, b) in g.iter_mut().zip(&gin) {
                            *a += *b;
                        }
                    } else {
                        g = gin;
                    }
                }
            }
        }
        ArchKind::DenseNet => {
            let alpha = T::of(spec.dense_alpha());
            // adjoints of q^h, accumulated from every consuming layer
            let mut gq: Vec<Vec<T>> = vec![vec![T::zero(); n]; spec.depth];
            for l in (1..=spec.depth).rev() {
                if l < spec.depth {
                    if trace.masks[l].is_empty() {
                        continue;
                    }
                    g = through_relu(&gq[l], &trace.masks[l]);
                }
                let Some(range) = spec.dense_sources(l) else {
                    continue;
                };
                let c = (alpha / (T::of_usize(n) * T::of_usize(l))).sqrt();
                let left = scaled(&g, c);
                for h in range {
                    let slot = spec.slot(WeightIndex::new(l, h));
                    w.body[slot].tr_matvec_acc(&g, c, &mut gq[h]);
                    body[slot] = RankOne {
                        left: left.clone(),
                        right: trace.activations[h].clone(),
                    };
                }
            }
            g = through_relu(&gq[0], &trace.masks[0]);
        }
    }

    let initial = RankOne {
        left: scaled(&g, T::one() / T::of_usize(spec.input_dim).sqrt()),
        right: trace.input.clone(),
    };
    JacobianFactors {
        initial,
        body,
        final_projection,
    }
}
