use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::backward::{backward_factors, backward_unchecked, JacobianFactors};
use crate::error::{Error, Result};
use crate::net::forward::{check_input, forward_unchecked};
use crate::net::{forward, sample_weights, ArchitectureSpec, ForwardTrace, MatrixId, WeightSet};
use crate::numerics::{Matrix, RngStream};
use crate::scalar::Scalar;

/// Symmetric kernel matrix over a list of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    entries: Matrix<T>,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn from_matrix(entries: Matrix<T>) -> Result<Self> {
        if !entries.is_symmetric(T::of(1e-12)) {
            return Err(Error::NotSymmetric);
        }
        Ok(GramMatrix { entries })
    }

    /// Fills the upper triangle with `f(i, j)` and mirrors it.
    pub fn from_pairs(size: usize, f: impl Fn(usize, usize) -> T + Sync) -> Self {
        let rows: Vec<Vec<T>> = (0..size)
            .into_par_iter()
            .map(|i| (i..size).map(|j| f(i, j)).collect())
            .collect();
        let mut m = Matrix::zeros(size, size);
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                m[(i, i + off)] = v;
                m[(i + off, i)] = v;
            }
        }
        GramMatrix { entries: m }
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.entries
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.size()).map(|i| self.get(i, i)).collect()
    }

    /// Rows `rows`, columns `cols`.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Matrix<T> {
        Matrix::from_fn(rows.len(), cols.len(), |i, j| self.get(rows[i], cols[j]))
    }

    pub fn principal(&self, idx: &[usize]) -> GramMatrix<T> {
        GramMatrix {
            entries: self.block(idx, idx),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        GramMatrix {
            entries: self.entries.scaled(s),
        }
    }

    /// CSV: a header of sample indices, then one row of entries per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.size();
        let header: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> = self.entries.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

#[derive(Serialize)]
struct GramJson<'a, T> {
    size: usize,
    entries: Vec<&'a [T]>,
}

impl<T: Scalar + Serialize> GramMatrix<T> {
    /// JSON object `{"size": n, "entries": [[...], ...]}`.
    pub fn to_json(&self) -> Result<String> {
        let body = GramJson {
            size: self.size(),
            entries: (0..self.size()).map(|i| self.entries.row(i)).collect(),
        };
        Ok(serde_json::to_string(&body)?)
    }
}

/// Forward and backward for one input.
pub fn jacobian<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<(ForwardTrace<T>, JacobianFactors<T>)> {
    let trace = forward(spec, w, x)?;
    let factors = backward_factors(spec, w, &trace)?;
    Ok((trace, factors))
}

fn factors_for<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    xs: &[Vec<T>],
) -> Result<Vec<JacobianFactors<T>>> {
    w.check_shapes(spec)?;
    for x in xs {
        check_input(spec, x)?;
    }
    Ok(xs
        .par_iter()
        .map(|x| backward_unchecked(spec, w, &forward_unchecked(spec, w, x)))
        .collect())
}

/// Empirical NTK entry `Σ_k ⟨J^k(x), J^k(x')⟩`.
pub fn ntk_entry<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    x: &[T],
    x2: &[T],
) -> Result<T> {
    let (_, a) = jacobian(spec, w, x)?;
    let (_, b) = jacobian(spec, w, x2)?;
    Ok(a.inner(&b))
}

pub fn factor_gram<T: Scalar>(factors: &[JacobianFactors<T>]) -> GramMatrix<T> {
    GramMatrix::from_pairs(factors.len(), |i, j| factors[i].inner(&factors[j]))
}

/// Gram matrix of the empirical NTK for one weight draw.
pub fn ntk_gram<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    xs: &[Vec<T>],
) -> Result<GramMatrix<T>> {
    Ok(factor_gram(&factors_for(spec, w, xs)?))
}

/// Draws combined per parallel block; sums are added in draw order.
const DRAW_BLOCK: usize = 8;

/// Mean of `draws` Gram matrices, draw `i` (1-based) sampled from `base.offset(i)`.
pub fn avg_ntk_gram<T: Scalar>(
    spec: &ArchitectureSpec,
    xs: &[Vec<T>],
    base: RngStream,
    draws: usize,
) -> Result<GramMatrix<T>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    for x in xs {
        check_input(spec, x)?;
    }
    let m = xs.len();
    let mut sum = Matrix::zeros(m, m);
    let mut start = 1;
    while start <= draws {
        let end = (start + DRAW_BLOCK).min(draws + 1);
        let grams: Vec<GramMatrix<T>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let w = sample_weights(spec, &base.offset(i as u64));
                let f: Vec<_> = xs
                    .iter()
                    .map(|x| backward_unchecked(spec, &w, &forward_unchecked(spec, &w, x)))
                    .collect();
                factor_gram(&f)
            })
            .collect();
        for g in &grams {
            sum.add_assign(g.matrix());
        }
        start = end;
    }
    Ok(GramMatrix {
        entries: sum.scaled(T::one() / T::of_usize(draws)),
    })
}

/// `⟨W^k, J^k⟩`: the part of the output carried by paths through `W^k`.
pub fn f_through<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    grads: &super::GradientSet<T>,
    k: MatrixId,
) -> Result<T> {
    spec.check_matrix(k)?;
    let (wk, jk) = match (w.matrix(k), grads.matrix(k)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidIndex(format!("{k} not present"))),
    };
    if wk.shape() != jk.shape() {
        return Err(Error::ShapeMismatch(format!("gradient for {k} has the wrong shape")));
    }
    Ok(wk.frobenius_dot(jk))
}

/// [`f_through`] on factored Jacobians.
pub fn f_through_factors<T: Scalar>(
    spec: &ArchitectureSpec,
    w: &WeightSet<T>,
    factors: &JacobianFactors<T>,
    k: MatrixId,
) -> Result<T> {
    spec.check_matrix(k)?;
    let wk = w
        .matrix(k)
        .ok_or_else(|| Error::InvalidIndex(format!("{k} not present")))?;
    Ok(factors.get(spec, k).contract(wk))
}
