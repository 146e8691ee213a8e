#![allow(dead_code)]

use ntk_core::net::{forward, WeightSet};
use ntk_core::ntk::backward;
use ntk_core::numerics::{norm_sq, standard_normal, RngStream};
use ntk_core::ArchitectureSpec;

pub fn unit_vector(dim: usize, stream: &RngStream) -> Vec<f64> {
    let mut rng = stream.generator();
    let v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    let s = norm_sq(&v).sqrt();
    v.into_iter().map(|a| a / s).collect()
}

/// Vector with ‖x‖² = dim, so that the input covariance has unit diagonal.
pub fn unit_scale_vector(dim: usize, stream: &RngStream) -> Vec<f64> {
    let s = (dim as f64).sqrt();
    unit_vector(dim, stream).into_iter().map(|a| a * s).collect()
}

pub fn all_kinds(input_dim: usize, depth: usize, width: usize) -> Vec<ArchitectureSpec> {
    vec![
        ArchitectureSpec::vanilla(input_dim, depth, width).unwrap(),
        ArchitectureSpec::resnet(input_dim, width, 2, vec![0.3; depth]).unwrap(),
        ArchitectureSpec::densenet(input_dim, depth, width, 0.5).unwrap(),
    ]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub const STEP: f64 = 1e-5;

/// Largest relative error between backward and central differences over every
/// weight entry, and whether any ReLU mask flipped inside a perturbation.
pub fn fd_max_rel_err(spec: &ArchitectureSpec, w: &WeightSet<f64>, x: &[f64]) -> (f64, bool) {
    let base = forward(spec, w, x).unwrap();
    let grads = backward(spec, w, &base).unwrap();
    let mut worst = 0.0f64;
    let mut flipped = false;
    for id in spec.matrix_ids() {
        let g = grads.matrix(id).unwrap();
        let (rows, cols) = g.shape();
        for i in 0..rows {
            for j in 0..cols {
                let mut wp = w.clone();
                wp.matrix_mut(id).unwrap()[(i, j)] += STEP;
                let mut wm = w.clone();
                wm.matrix_mut(id).unwrap()[(i, j)] -= STEP;
                let tp = forward(spec, &wp, x).unwrap();
                let tm = forward(spec, &wm, x).unwrap();
                flipped |= tp.masks != base.masks || tm.masks != base.masks;
                let fd = (tp.output - tm.output) / (2.0 * STEP);
                worst = worst.max(rel_err(g[(i, j)], fd));
            }
        }
    }
    (worst, flipped)
}
