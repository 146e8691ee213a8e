//! Infinite-width covariance and NTK recursions for ReLU networks.
//!
//! Input covariances use the same `1/√n₀` projection as the finite network,
//! so `Λ⁰ = (‖x‖²/n₀, ‖x'‖²/n₀, x·x'/n₀)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{ArchKind, ArchitectureSpec};
use crate::ntk::GramMatrix;
use crate::numerics::{dot, norm_sq, standard_normal, MomentEstimate, RngStream};
use crate::scalar::Scalar;

/// Covariance of a pair `(u, v)`: `a = E u²`, `b = E v²`, `c = E uv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BivariateCov<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Scalar> BivariateCov<T> {
    /// Clamps `c` so that `c² ≤ ab`.
    pub fn new(a: T, b: T, c: T) -> Self {
        let a = a.max(T::zero());
        let b = b.max(T::zero());
        let bound = (a * b).sqrt();
        BivariateCov {
            a,
            b,
            c: c.max(-bound).min(bound),
        }
    }

    pub fn diagonal(a: T) -> Self {
        Self::new(a, a, a)
    }

    pub fn from_inputs(x: &[T], x2: &[T]) -> Result<Self> {
        if x.len() != x2.len() {
            return Err(Error::ShapeMismatch("inputs differ in dimension".into()));
        }
        let (a, b) = (norm_sq(x), norm_sq(x2));
        if !(a > T::zero() && b > T::zero()) {
            return Err(Error::ZeroInput);
        }
        let n0 = T::of_usize(x.len());
        Ok(Self::new(a / n0, b / n0, dot(x, x2) / n0))
    }

    /// Correlation clamped to [-1, 1]; 0 when either variance vanishes.
    pub fn correlation(&self) -> T {
        let ab = self.a * self.b;
        if ab <= T::zero() {
            return T::zero();
        }
        (self.c / ab.sqrt()).max(-T::one()).min(T::one())
    }

    pub fn scale(&self, s: T) -> Self {
        BivariateCov {
            a: self.a * s,
            b: self.b * s,
            c: self.c * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.a + o.a, self.b + o.b, self.c + o.c)
    }
}

/// Covariance of `(√2φ(u), √2φ(v))` for ReLU `φ` and `(u, v) ~ N(0, cov)`.
pub fn relu_cov_map<T: Scalar>(cov: BivariateCov<T>) -> BivariateCov<T> {
    let rho = cov.correlation();
    let s = (cov.a * cov.b).sqrt();
    let c = s / T::PI() * ((T::one() - rho * rho).max(T::zero()).sqrt() + (T::PI() - rho.acos()) * rho);
    BivariateCov::new(cov.a, cov.b, c)
}

/// `2 E[φ'(u) φ'(v)] = (π - arccos ρ) / π`.
pub fn relu_dot_map<T: Scalar>(cov: BivariateCov<T>) -> T {
    (T::PI() - cov.correlation().acos()) / T::PI()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GaussMap {
    Cov,
    Dot,
}

/// Monte Carlo estimate of `2E[φ(u)φ(v)]` or `2E[φ'(u)φ'(v)]`.
pub fn mc_gauss_oracle(
    cov: BivariateCov<f64>,
    map: GaussMap,
    n_samples: usize,
    stream: &RngStream,
) -> Result<MomentEstimate> {
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument("oracle needs at least 10^4 samples".into()));
    }
    let mut rng = stream.generator();
    let sa = cov.a.sqrt();
    let (v1, v2) = if cov.a > 0.0 {
        (cov.c / sa, (cov.b - cov.c * cov.c / cov.a).max(0.0).sqrt())
    } else {
        (0.0, cov.b.sqrt())
    };
    let mut est = MomentEstimate::new();
    for _ in 0..n_samples {
        let z1 = standard_normal(&mut rng);
        let z2 = standard_normal(&mut rng);
        let u = sa * z1;
        let v = v1 * z1 + v2 * z2;
        let s = match map {
            GaussMap::Cov => 2.0 * u.max(0.0) * v.max(0.0),
            GaussMap::Dot => {
                if u > 0.0 && v > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
        };
        est.push(s)?;
    }
    Ok(est)
}

/// Limit NTK split by where the trainable matrices sit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LimitNtk<T> {
    /// Contribution of the input projection.
    pub initial: T,
    /// Contribution of the hidden / branch matrices.
    pub body: T,
    /// Contribution of the output row.
    pub final_projection: T,
}

impl<T: Scalar> LimitNtk<T> {
    /// The full kernel, comparable with the empirical NTK over all matrices.
    pub fn total(&self) -> T {
        self.initial + self.body + self.final_projection
    }
}

/// Quantities propagated by the infinite-width recursion for one input pair.
///
/// Vanilla: `lambda[l]` is the covariance of `y^l`; `sigma[l-1] = [Σ^l]`,
/// `sigma_dot[l-1] = [Σ̇^l]`.
/// ResNet: `lambda[l]` is `Λ^l`; `sigma[l-1][h] = Σ^{l-1,h}` for h in 0..m
/// (with `Σ^{l-1,0} = Λ^{l-1}`); `sigma_dot[l-1][h-1] = Σ̇^{l-1,h}` for h in 1..m.
/// DenseNet: `lambda[l]` is `Λ^l`; `sigma[h] = [Σ^h]`, `sigma_dot[h] = [Σ̇^h]`, h in 0..L.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitKernelState<T> {
    pub lambda: Vec<BivariateCov<T>>,
    pub sigma: Vec<Vec<BivariateCov<T>>>,
    pub sigma_dot: Vec<Vec<T>>,
    pub ntk: LimitNtk<T>,
}

pub fn vanilla_limit_state<T: Scalar>(cov: BivariateCov<T>, depth: usize) -> LimitKernelState<T> {
    let mut lambda = vec![cov];
    let mut sigma = Vec::with_capacity(depth);
    let mut sigma_dot = Vec::with_capacity(depth);
    for l in 1..=depth {
        let s = relu_cov_map(lambda[l - 1]);
        sigma_dot.push(vec![relu_dot_map(lambda[l - 1])]);
        sigma.push(vec![s]);
        lambda.push(s);
    }
    // squared adjoint norm at y^l, backwards from the output
    let mut p = T::one();
    let mut body = T::zero();
    for l in (1..=depth).rev() {
        p *= sigma_dot[l - 1][0];
        body += lambda[l - 1].c * p;
    }
    let ntk = LimitNtk {
        initial: cov.c * p,
        body,
        final_projection: lambda[depth].c,
    };
    LimitKernelState {
        lambda,
        sigma,
        sigma_dot,
        ntk,
    }
}

pub fn resnet_limit_state<T: Scalar>(
    cov: BivariateCov<T>,
    spec: &ArchitectureSpec,
) -> Result<LimitKernelState<T>> {
    if spec.kind != ArchKind::ResNet {
        return Err(Error::InvalidSpec("expected a resnet".into()));
    }
    spec.validate()?;
    let (depth, m) = (spec.depth, spec.branch_depth);
    let mut lambda = vec![cov];
    let mut sigma = Vec::with_capacity(depth);
    let mut sigma_dot = Vec::with_capacity(depth);
    for l in 1..=depth {
        let mut s = vec![lambda[l - 1]];
        let mut sd = Vec::with_capacity(m - 1);
        for h in 1..m {
            sd.push(relu_dot_map(s[h - 1]));
            s.push(relu_cov_map(s[h - 1]));
        }
        let branch = s[m - 1].scale(T::of(spec.alpha(l)));
        lambda.push(lambda[l - 1].add(&branch));
        sigma.push(s);
        sigma_dot.push(sd);
    }

    let prod = |l: usize, from: usize| -> T {
        (from..m).map(|h| sigma_dot[l - 1][h - 1]).fold(T::one(), |a, b| a * b)
    };
    // p[l]: product over later blocks of (α_{l'+1} Π Σ̇ + 1), l in 0..=L
    let mut p = vec![T::one(); depth + 1];
    for l in (0..depth).rev() {
        p[l] = p[l + 1] * (T::of(spec.alpha(l + 1)) * prod(l + 1, 1) + T::one());
    }
    let mut body = T::zero();
    for l in 1..=depth {
        let alpha = T::of(spec.alpha(l));
        let block: T = (1..=m).map(|h| sigma[l - 1][h - 1].c * prod(l, h)).sum();
        body += alpha * block * p[l];
    }
    let ntk = LimitNtk {
        initial: cov.c * p[0],
        body,
        final_projection: lambda[depth].c,
    };
    Ok(LimitKernelState {
        lambda,
        sigma,
        sigma_dot,
        ntk,
    })
}

pub fn densenet_limit_state<T: Scalar>(
    cov: BivariateCov<T>,
    spec: &ArchitectureSpec,
) -> Result<LimitKernelState<T>> {
    if spec.kind != ArchKind::DenseNet {
        return Err(Error::InvalidSpec("expected a densenet".into()));
    }
    spec.validate()?;
    let depth = spec.depth;
    let alpha = T::of(spec.dense_alpha());
    let mut lambda = vec![cov];
    let mut sigma: Vec<Vec<BivariateCov<T>>> = Vec::with_capacity(depth);
    let mut sigma_dot = Vec::with_capacity(depth);
    let mut running = BivariateCov::new(T::zero(), T::zero(), T::zero());
    for l in 1..=depth {
        let h = l - 1;
        let s = relu_cov_map(lambda[h]);
        sigma_dot.push(vec![relu_dot_map(lambda[h])]);
        sigma.push(vec![s]);
        running = running.add(&s);
        lambda.push(running.scale(alpha / T::of_usize(l)));
    }

    let mut k = alpha * sigma[0][0].c;
    for l in 2..=depth {
        let lt = T::of_usize(l);
        k = k * (alpha * sigma_dot[l - 1][0] / lt + (lt - T::one()) / lt)
            + alpha * sigma[l - 1][0].c / lt;
    }

    // squared adjoint norm at y^0: B_0 = Σ̇^0 · α Σ_{l=1}^L B_l / l
    let mut b = vec![T::zero(); depth + 1];
    b[depth] = T::one();
    let mut tail = T::one() / T::of_usize(depth);
    for l in (0..depth).rev() {
        b[l] = alpha * sigma_dot[l][0] * tail;
        if l > 0 {
            tail += b[l] / T::of_usize(l);
        }
    }
    let ntk = LimitNtk {
        initial: cov.c * b[0],
        body: k,
        final_projection: lambda[depth].c,
    };
    Ok(LimitKernelState {
        lambda,
        sigma,
        sigma_dot,
        ntk,
    })
}

/// Recursion state for any architecture kind.
pub fn limit_state<T: Scalar>(
    spec: &ArchitectureSpec,
    cov: BivariateCov<T>,
) -> Result<LimitKernelState<T>> {
    match spec.kind {
        ArchKind::Vanilla => Ok(vanilla_limit_state(cov, spec.depth)),
        ArchKind::ResNet => resnet_limit_state(cov, spec),
        ArchKind::DenseNet => densenet_limit_state(cov, spec),
    }
}

/// Vanilla limit NTK of depth `depth` (`depth = 0` is the two-matrix linear model).
pub fn ntk_limit_vanilla<T: Scalar>(x: &[T], x2: &[T], depth: usize) -> Result<LimitNtk<T>> {
    Ok(vanilla_limit_state(BivariateCov::from_inputs(x, x2)?, depth).ntk)
}

pub fn ntk_limit_resnet<T: Scalar>(
    x: &[T],
    x2: &[T],
    spec: &ArchitectureSpec,
) -> Result<LimitNtk<T>> {
    Ok(resnet_limit_state(BivariateCov::from_inputs(x, x2)?, spec)?.ntk)
}

pub fn ntk_limit_densenet<T: Scalar>(
    x: &[T],
    x2: &[T],
    spec: &ArchitectureSpec,
) -> Result<LimitNtk<T>> {
    Ok(densenet_limit_state(BivariateCov::from_inputs(x, x2)?, spec)?.ntk)
}

pub fn ntk_limit<T: Scalar>(spec: &ArchitectureSpec, x: &[T], x2: &[T]) -> Result<LimitNtk<T>> {
    if x.len() != spec.input_dim || x2.len() != spec.input_dim {
        return Err(Error::InputDimension {
            expected: spec.input_dim,
            got: if x.len() != spec.input_dim { x.len() } else { x2.len() },
        });
    }
    Ok(limit_state(spec, BivariateCov::from_inputs(x, x2)?)?.ntk)
}

/// Gram matrix of the full limit NTK (all matrices, projections included).
pub fn limit_gram<T: Scalar>(spec: &ArchitectureSpec, xs: &[Vec<T>]) -> Result<GramMatrix<T>> {
    // validate once so the pairwise closure cannot fail
    for x in xs {
        ntk_limit(spec, x, x)?;
    }
    Ok(GramMatrix::from_pairs(xs.len(), |i, j| {
        ntk_limit(spec, &xs[i], &xs[j])
            .expect("inputs validated above")
            .total()
    }))
}
