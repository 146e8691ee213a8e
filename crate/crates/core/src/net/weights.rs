use rand::Rng;

use super::arch::{ArchitectureSpec, MatrixId, WeightIndex};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::scalar::Scalar;

/// All weight matrices of one network draw.
///
/// `body[i]` belongs to `keys[i]`; keys are in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    pub initial: Matrix<T>,
    pub body: Vec<Matrix<T>>,
    pub final_projection: Matrix<T>,
    keys: Vec<WeightIndex>,
}

impl<T: Scalar> WeightSet<T> {
    /// Builds a set from explicit matrices, checking every shape against `spec`.
    pub fn new(
        spec: &ArchitectureSpec,
        initial: Matrix<T>,
        body: Vec<Matrix<T>>,
        final_projection: Matrix<T>,
    ) -> Result<Self> {
        let w = WeightSet {
            initial,
            body,
            final_projection,
            keys: spec.body_indices(),
        };
        w.check_shapes(spec)?;
        Ok(w)
    }

    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        let n = spec.width;
        WeightSet {
            initial: Matrix::zeros(n, spec.input_dim),
            body: (0..spec.body_len()).map(|_| Matrix::zeros(n, n)).collect(),
            final_projection: Matrix::zeros(1, n),
            keys: spec.body_indices(),
        }
    }

    pub fn keys(&self) -> &[WeightIndex] {
        &self.keys
    }

    pub fn body_matrix(&self, k: WeightIndex) -> Option<&Matrix<T>> {
        self.keys.binary_search(&k).ok().map(|i| &self.body[i])
    }

    pub fn body_matrix_mut(&mut self, k: WeightIndex) -> Option<&mut Matrix<T>> {
        self.keys.binary_search(&k).ok().map(move |i| &mut self.body[i])
    }

    pub fn matrix(&self, id: MatrixId) -> Option<&Matrix<T>> {
        match id {
            MatrixId::Initial => Some(&self.initial),
            MatrixId::Body(k) => self.body_matrix(k),
            MatrixId::Final => Some(&self.final_projection),
        }
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> Option<&mut Matrix<T>> {
        match id {
            MatrixId::Initial => Some(&mut self.initial),
            MatrixId::Body(k) => self.body_matrix_mut(k),
            MatrixId::Final => Some(&mut self.final_projection),
        }
    }

    /// `(id, matrix)` pairs: initial, body, final.
    pub fn iter(&self) -> impl Iterator<Item = (MatrixId, &Matrix<T>)> {
        std::iter::once((MatrixId::Initial, &self.initial))
            .chain(self.keys.iter().map(|&k| MatrixId::Body(k)).zip(&self.body))
            .chain(std::iter::once((MatrixId::Final, &self.final_projection)))
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    pub fn check_shapes(&self, spec: &ArchitectureSpec) -> Result<()> {
        let n = spec.width;
        let want = |name: &str, m: &Matrix<T>, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, architecture needs {shape:?}",
                    m.shape()
                )))
            }
        };
        want("initial projection", &self.initial, (n, spec.input_dim))?;
        want("final projection", &self.final_projection, (1, n))?;
        if self.keys != spec.body_indices() || self.body.len() != self.keys.len() {
            return Err(Error::ShapeMismatch("body matrices do not match architecture".into()));
        }
        for (k, m) in self.keys.iter().zip(&self.body) {
            want(&format!("W{k}"), m, (n, n))?;
        }
        Ok(())
    }
}

/// Draws every matrix i.i.d. standard normal from one generator, in the order
/// initial, body (storage order), final.
pub fn sample_weights_with<T: Scalar, R: Rng + ?Sized>(
    spec: &ArchitectureSpec,
    rng: &mut R,
) -> WeightSet<T> {
    let n = spec.width;
    let initial = Matrix::standard_normal(rng, n, spec.input_dim);
    let body = (0..spec.body_len())
        .map(|_| Matrix::standard_normal(rng, n, n))
        .collect();
    let final_projection = Matrix::standard_normal(rng, 1, n);
    WeightSet {
        initial,
        body,
        final_projection,
        keys: spec.body_indices(),
    }
}

pub fn sample_weights<T: Scalar>(spec: &ArchitectureSpec, stream: &RngStream) -> WeightSet<T> {
    sample_weights_with(spec, &mut stream.generator())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_shapes() {
        let spec = ArchitectureSpec::vanilla(3, 2, 4).unwrap();
        let w: WeightSet<f64> = sample_weights(&spec, &RngStream::new(1, 0));
        assert_eq!(w.body.len(), 2);
        assert!(w.body.iter().all(|m| m.shape() == (4, 4)));
        assert_eq!(w.initial.shape(), (4, 3));
        assert_eq!(w.final_projection.shape(), (1, 4));
        assert!(w.check_shapes(&spec).is_ok());
    }

    #[test]
    fn deterministic() {
        let spec = ArchitectureSpec::densenet(3, 3, 4, 0.5).unwrap();
        let a: WeightSet<f64> = sample_weights(&spec, &RngStream::new(9, 2));
        let b: WeightSet<f64> = sample_weights(&spec, &RngStream::new(9, 2));
        let c: WeightSet<f64> = sample_weights(&spec, &RngStream::new(9, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let keys: Vec<_> = a.keys().iter().map(|k| (k.layer, k.sublayer)).collect();
        assert_eq!(keys, vec![(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]);
        assert!(a.body_matrix(WeightIndex::new(3, 3)).is_none());
    }
}
