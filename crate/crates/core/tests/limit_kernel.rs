mod common;

use std::f64::consts::PI;

use common::{all_kinds, unit_scale_vector, unit_vector};
use ntk_core::limit::{
    densenet_limit_state, limit_gram, limit_state, mc_gauss_oracle, ntk_limit, ntk_limit_vanilla,
    relu_cov_map, relu_dot_map, resnet_limit_state, vanilla_limit_state, BivariateCov, GaussMap,
};
use ntk_core::net::{sample_weights, WeightSet};
use ntk_core::ntk::{avg_ntk_gram, ntk_entry, ntk_gram, GramMatrix};
use ntk_core::numerics::{cholesky, map_draws, Matrix, MomentEstimate};
use ntk_core::{ArchitectureSpec, RngStream};
use proptest::prelude::*;

fn cov_rho(a: f64, b: f64, rho: f64) -> BivariateCov<f64> {
    BivariateCov::new(a, b, rho * (a * b).sqrt())
}

fn within(est: &MomentEstimate, want: f64, gate: f64) -> bool {
    (est.mean() - want).abs() <= gate * est.stderr().max(1e-15)
}

#[test]
fn closed_form_values() {
    assert!((relu_dot_map(cov_rho(1.0, 1.0, 0.8)) - 0.795167235).abs() < 1e-8);
    let c = relu_cov_map(cov_rho(4.0, 4.0, 1.0));
    assert!((c.c - 4.0).abs() < 1e-14);
}

#[test]
fn mc_oracle_examples() {
    let s = RngStream::new(11, 0);
    let e = mc_gauss_oracle(cov_rho(1.0, 2.0, 0.6), GaussMap::Cov, 10_000_000, &s).unwrap();
    assert!(within(&e, relu_cov_map(cov_rho(1.0, 2.0, 0.6)).c, 3.0), "{e:?}");
    let e = mc_gauss_oracle(cov_rho(1.0, 1.0, 1.0), GaussMap::Cov, 1_000_000, &s.offset(1)).unwrap();
    assert!(within(&e, 1.0, 3.0));
    let e = mc_gauss_oracle(cov_rho(1.0, 1.0, 0.0), GaussMap::Dot, 1_000_000, &s.offset(2)).unwrap();
    assert!(within(&e, 0.5, 3.0));
    let e = mc_gauss_oracle(cov_rho(1.0, 1.0, 0.8), GaussMap::Dot, 1_000_000, &s.offset(3)).unwrap();
    assert!(within(&e, (PI - 0.8f64.acos()) / PI, 3.0));
    assert!(mc_gauss_oracle(cov_rho(1.0, 1.0, 0.0), GaussMap::Dot, 9_999, &s).is_err());
}

#[test]
fn vanilla_unit_diagonal_counts_matrices() {
    for depth in 0..6 {
        let st = vanilla_limit_state(BivariateCov::diagonal(1.0f64), depth);
        assert!(st.sigma_dot.iter().all(|v| (v[0] - 1.0).abs() < 1e-15));
        assert!((st.ntk.body - depth as f64).abs() < 1e-12);
        assert!((st.ntk.total() - (depth + 2) as f64).abs() < 1e-12);
    }
}

#[test]
fn vanilla_depth_zero_is_linear_model() {
    let x = [0.6f64, 0.8];
    let y = [1.0, -0.5];
    let k = ntk_limit_vanilla(&x, &y, 0).unwrap();
    let c = (0.6 - 0.4) / 2.0;
    assert_eq!(k.body, 0.0);
    assert!((k.initial - c).abs() < 1e-15 && (k.final_projection - c).abs() < 1e-15);
    assert!(ntk_limit_vanilla(&[0.0, 0.0], &y, 1).is_err());
}

/// Forward-mode recursion over pre-activations, written out independently.
/// `y⁰` is linear, so each hidden matrix adds its input covariance before the
/// ReLU derivative factor is applied: `Θ ← (Θ + Λ) Σ̇`, then the output row adds `Λ^L`.
fn vanilla_forward_mode(cov: BivariateCov<f64>, depth: usize) -> f64 {
    let mut lam = cov;
    let mut theta = cov.c;
    for _ in 0..depth {
        let rho = (lam.c / (lam.a * lam.b).sqrt()).clamp(-1.0, 1.0);
        let sd = (PI - rho.acos()) / PI;
        let s = (lam.a * lam.b).sqrt() / PI * ((1.0 - rho * rho).sqrt() + (PI - rho.acos()) * rho);
        theta = (theta + lam.c) * sd;
        lam = BivariateCov::new(lam.a, lam.b, s);
    }
    theta + lam.c
}

#[test]
fn vanilla_matches_textbook_recursion() {
    for (i, rho) in [-0.7, 0.0, 0.3, 0.95].into_iter().enumerate() {
        let cov = cov_rho(1.3, 0.7, rho);
        for depth in 0..5 {
            let st = vanilla_limit_state(cov, depth);
            let want = vanilla_forward_mode(cov, depth);
            assert!((st.ntk.total() - want).abs() < 1e-12 * want.abs().max(1.0), "{i} {depth}");
        }
    }
}

#[test]
fn resnet_single_block_example() {
    for a in [0.1, 0.3, 1.0] {
        let spec = ArchitectureSpec::resnet(1, 4, 2, vec![a]).unwrap();
        let k = ntk_limit(&spec, &[1.0], &[1.0]).unwrap();
        assert!((k.body - 2.0 * a).abs() < 1e-14);
    }
}

#[test]
fn resnet_diagonal_product_form() {
    let alphas = vec![0.3, 0.1, 0.7, 0.25];
    for m in 2..5 {
        let spec = ArchitectureSpec::resnet(1, 4, m, alphas.clone()).unwrap();
        let st = resnet_limit_state(BivariateCov::diagonal(1.0f64), &spec).unwrap();
        let want: f64 = m as f64
            * (0..4)
                .map(|l| {
                    alphas[l]
                        * (0..4).filter(|&j| j != l).map(|j| 1.0 + alphas[j]).product::<f64>()
                })
                .sum::<f64>();
        assert!((st.ntk.body - want).abs() < 1e-12, "m={m}");
        let growth: f64 = alphas.iter().map(|a| 1.0 + a).product();
        assert!((st.lambda[4].a - growth).abs() < 1e-12);
        // two-block output second moment, as in the E f² examples
        let s2 = ArchitectureSpec::resnet(1, 4, m, vec![0.3, 0.3]).unwrap();
        let st2 = resnet_limit_state(BivariateCov::diagonal(1.0f64), &s2).unwrap();
        assert!((st2.lambda[2].a - 1.69).abs() < 1e-12);
    }
}

/// Block-wise recursion on the same state: `K_l = K_{l-1}(α_l Π_h Σ̇ + 1) + T_l`.
#[test]
fn resnet_recursion_matches_closed_sum() {
    let x = unit_scale_vector(5, &RngStream::new(1, 0));
    let y = unit_scale_vector(5, &RngStream::new(1, 1));
    for m in 2..5 {
        for depth in 1..6 {
            let alphas: Vec<f64> = (0..depth).map(|l| 0.1 + 0.15 * l as f64).collect();
            let spec = ArchitectureSpec::resnet(5, 4, m, alphas).unwrap();
            let st = limit_state(&spec, BivariateCov::from_inputs(&x, &y).unwrap()).unwrap();
            let mut k = 0.0;
            for l in 1..=depth {
                let a = spec.alpha(l);
                let sd = &st.sigma_dot[l - 1];
                let all: f64 = sd.iter().product();
                let t: f64 = (1..=m)
                    .map(|h| st.sigma[l - 1][h - 1].c * sd[h - 1..].iter().product::<f64>())
                    .sum();
                k = k * (a * all + 1.0) + a * t;
            }
            assert!((k - st.ntk.body).abs() < 1e-12 * k.abs().max(1.0), "m={m} L={depth}");
        }
    }
}

#[test]
fn densenet_unit_alpha_diagonal_formula() {
    for depth in 1..8 {
        let alpha = 1.0;
        let spec = ArchitectureSpec::densenet(1, depth, 4, alpha).unwrap();
        let st = densenet_limit_state(BivariateCov::diagonal(1.0f64), &spec).unwrap();
        let want: f64 = (1..=depth)
            .map(|l| {
                alpha / l as f64
                    * ((l + 1)..=depth).map(|j| 1.0 + (alpha - 1.0) / j as f64).product::<f64>()
            })
            .sum();
        assert!((st.ntk.body - want).abs() < 1e-12);
    }
}

/// Diagonal body kernel as a sum over matrices `W^{l,h}` of the second moment
/// of the reduced network's output, computed from its own variance recursion.
fn densenet_diag_via_reductions(alpha: f64, depth: usize) -> f64 {
    let mut lam = vec![1.0];
    for l in 1..=depth {
        lam.push(alpha / l as f64 * lam.iter().sum::<f64>());
    }
    let mut total = 0.0;
    for lk in 1..=depth {
        for hk in 0..lk {
            // reduced net: y^{lk} fed only by q^{hk}; later layers skip everything before lk
            let mut r = vec![0.0; depth + 1];
            r[lk] = alpha / lk as f64 * lam[hk];
            for l in lk + 1..=depth {
                r[l] = alpha / l as f64 * r[lk..l].iter().sum::<f64>();
            }
            total += r[depth];
        }
    }
    total
}

#[test]
fn densenet_diagonal_from_reduced_networks() {
    for alpha in [0.3, 0.5, 1.0, 2.0] {
        for depth in 1..7 {
            let spec = ArchitectureSpec::densenet(1, depth, 4, alpha).unwrap();
            let st = densenet_limit_state(BivariateCov::diagonal(1.0f64), &spec).unwrap();
            let want = densenet_diag_via_reductions(alpha, depth);
            assert!((st.ntk.body - want).abs() < 1e-12 * want, "α={alpha} L={depth}");
        }
    }
}

/// `K = Σ_l Λ^l B_l` with `B` the squared adjoint norm at `y^l`.
#[test]
fn densenet_recursion_matches_adjoint_sum() {
    let x = unit_scale_vector(4, &RngStream::new(2, 0));
    let y = unit_scale_vector(4, &RngStream::new(2, 1));
    for alpha in [0.5, 1.5] {
        for depth in 1..7 {
            let spec = ArchitectureSpec::densenet(4, depth, 4, alpha).unwrap();
            let st = limit_state(&spec, BivariateCov::from_inputs(&x, &y).unwrap()).unwrap();
            let mut b = vec![0.0; depth + 1];
            b[depth] = 1.0;
            for l in (1..depth).rev() {
                let tail: f64 = (l + 1..=depth).map(|j| b[j] / j as f64).sum();
                b[l] = alpha * st.sigma_dot[l][0] * tail;
            }
            let k: f64 = (1..=depth).map(|l| st.lambda[l].c * b[l]).sum();
            assert!((k - st.ntk.body).abs() < 1e-12 * k.abs().max(1.0), "α={alpha} L={depth}");
        }
    }
}

#[test]
fn densenet_single_layer_base_case() {
    let spec = ArchitectureSpec::densenet(3, 1, 4, 0.7).unwrap();
    let x = unit_vector(3, &RngStream::new(3, 0));
    let y = unit_vector(3, &RngStream::new(3, 1));
    let cov = BivariateCov::from_inputs(&x, &y).unwrap();
    let k = ntk_limit(&spec, &x, &y).unwrap();
    assert!((k.body - 0.7 * relu_cov_map(cov).c).abs() < 1e-15);
}

#[test]
fn state_invariants() {
    let x = unit_scale_vector(4, &RngStream::new(4, 0));
    let y = unit_scale_vector(4, &RngStream::new(4, 1));
    let cov = BivariateCov::from_inputs(&x, &y).unwrap();
    for spec in all_kinds(4, 4, 8) {
        let st = limit_state(&spec, cov).unwrap();
        assert!(st.sigma_dot.iter().flatten().all(|&s| (0.0..=1.0).contains(&s)));
        for s in st.sigma.iter().flatten() {
            assert!(s.c * s.c <= s.a * s.b + 1e-12);
        }
    }
}

#[test]
fn mismatched_kinds_rejected() {
    let v = ArchitectureSpec::vanilla(2, 2, 4).unwrap();
    assert!(resnet_limit_state(BivariateCov::diagonal(1.0f64), &v).is_err());
    assert!(densenet_limit_state(BivariateCov::diagonal(1.0f64), &v).is_err());
    assert!(ntk_limit(&v, &[1.0], &[1.0]).is_err());
}

#[test]
fn limit_gram_is_psd_and_symmetric() {
    let xs: Vec<Vec<f64>> = (0..12).map(|i| unit_vector(6, &RngStream::new(5, i))).collect();
    for spec in all_kinds(6, 3, 8) {
        let g = limit_gram(&spec, &xs).unwrap();
        let tr = g.matrix().trace();
        assert!(g.matrix().is_symmetric(1e-12));
        assert!(cholesky(g.matrix(), 1e-8 * tr).is_ok());
    }
}

#[test]
fn empirical_vanilla_entry_average() {
    let spec = ArchitectureSpec::vanilla(2, 2, 512).unwrap();
    let (x, y) = ([1.0, 0.3], [0.2, 1.0]);
    let vals = map_draws(50, |i| {
        let w = sample_weights(&spec, &RngStream::new(40, i));
        ntk_entry(&spec, &w, &x, &y).unwrap()
    });
    let mean = vals.iter().sum::<f64>() / 50.0;
    let lim = ntk_limit(&spec, &x, &y).unwrap().total();
    assert!((mean - lim).abs() < 0.05 * lim, "{mean} vs {lim}");
}

#[test]
fn empirical_vanilla_orthogonal_and_linear() {
    let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let spec = ArchitectureSpec::vanilla(2, 2, 1024).unwrap();
    let g = avg_ntk_gram::<f64>(&spec, &xs, RngStream::new(41, 0), 200).unwrap();
    let lim = limit_gram(&spec, &xs).unwrap();
    assert!((g.get(0, 1) - lim.get(0, 1)).abs() < 0.05 * lim.get(0, 1));
    // depth 0: E G = 2 x·x'/n₀ exactly in expectation
    let lin = ArchitectureSpec::vanilla(2, 0, 256).unwrap();
    let xs = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
    let g = avg_ntk_gram::<f64>(&lin, &xs, RngStream::new(42, 0), 200).unwrap();
    assert!((g.get(0, 1) - 1.0).abs() < 0.05);
}

#[test]
fn empirical_densenet_diagonal() {
    let spec = ArchitectureSpec::densenet(4, 4, 256, 0.5).unwrap();
    let xs: Vec<Vec<f64>> = (0..3).map(|i| unit_scale_vector(4, &RngStream::new(43, i))).collect();
    let g = avg_ntk_gram::<f64>(&spec, &xs, RngStream::new(44, 0), 100).unwrap();
    let lim = limit_gram(&spec, &xs).unwrap();
    for i in 0..3 {
        assert!((g.get(i, i) - lim.get(i, i)).abs() < 0.05 * lim.get(i, i));
    }
}

const WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Leading `n`-wide blocks of a wider draw; each block is itself a valid draw.
fn truncate(spec: &ArchitectureSpec, w: &WeightSet<f64>) -> WeightSet<f64> {
    let n = spec.width;
    let body = w
        .body
        .iter()
        .map(|m| Matrix::from_fn(n, n, |i, j| m[(i, j)]))
        .collect();
    WeightSet::new(
        spec,
        Matrix::from_fn(n, spec.input_dim, |i, j| w.initial[(i, j)]),
        body,
        Matrix::from_fn(1, n, |_, j| w.final_projection[(0, j)]),
    )
    .unwrap()
}

/// Median over the 10 input pairs of the largest normalized 2×2 block error.
fn median_block_error(g: &Matrix<f64>, lim: &GramMatrix<f64>) -> f64 {
    let mut errs: Vec<f64> = (0..lim.size() / 2)
        .map(|p| {
            let idx = [2 * p, 2 * p + 1];
            let mut e: f64 = 0.0;
            for &i in &idx {
                for &j in &idx {
                    let scale = (lim.get(i, i) * lim.get(j, j)).sqrt();
                    e = e.max((g[(i, j)] - lim.get(i, j)).abs() / scale);
                }
            }
            e
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    (errs[4] + errs[5]) / 2.0
}

/// Widths share draws through nested blocks, so the comparison between widths
/// is not swamped by independent Monte Carlo noise at each width.
#[test]
fn empirical_error_shrinks_with_width() {
    let draws = 200;
    let xs: Vec<Vec<f64>> = (0..20).map(|i| unit_scale_vector(4, &RngStream::new(45, i))).collect();
    for (s, base) in all_kinds(4, 2, 512).into_iter().enumerate() {
        let specs: Vec<ArchitectureSpec> = WIDTHS
            .iter()
            .map(|&n| ArchitectureSpec { width: n, ..base.clone() })
            .collect();
        let mut sums = vec![Matrix::zeros(20, 20); WIDTHS.len()];
        for i in 0..draws {
            let wide = sample_weights::<f64>(&base, &RngStream::new(46 + s as u64, i));
            for (spec, sum) in specs.iter().zip(&mut sums) {
                sum.add_assign(ntk_gram(spec, &truncate(spec, &wide), &xs).unwrap().matrix());
            }
        }
        let errs: Vec<f64> = specs
            .iter()
            .zip(&sums)
            .map(|(spec, sum)| {
                median_block_error(&sum.scaled(1.0 / draws as f64), &limit_gram(spec, &xs).unwrap())
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{:?}: {errs:?}", base.kind);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_cov_map_keeps_diagonal(a in 0.01f64..10.0, b in 0.01f64..10.0, rho in -1.0f64..1.0) {
        let out = relu_cov_map(cov_rho(a, b, rho));
        prop_assert_eq!(out.a, a);
        prop_assert_eq!(out.b, b);
        prop_assert!(out.c * out.c <= a * b * (1.0 + 1e-12));
    }

    #[test]
    fn prop_dot_map_monotone(r1 in -1.0f64..1.0, r2 in -1.0f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let a = relu_dot_map(cov_rho(1.0, 1.0, lo));
        let b = relu_dot_map(cov_rho(1.0, 1.0, hi));
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn prop_limit_kernels_symmetric_and_psd(seed in 0u64..1_000_000, kind in 0usize..3, depth in 1usize..6) {
        let spec = all_kinds(3, depth, 8).swap_remove(kind);
        let x = unit_scale_vector(3, &RngStream::new(seed, 0));
        let y: Vec<f64> = unit_vector(3, &RngStream::new(seed, 1)).iter().map(|v| v * 0.5).collect();
        let kxy = ntk_limit(&spec, &x, &y).unwrap().total();
        let kyx = ntk_limit(&spec, &y, &x).unwrap().total();
        let kxx = ntk_limit(&spec, &x, &x).unwrap().total();
        let kyy = ntk_limit(&spec, &y, &y).unwrap().total();
        prop_assert!((kxy - kyx).abs() <= 1e-12 * kxy.abs().max(1e-12));
        prop_assert!(kxx * kyy >= kxy * kxy * (1.0 - 1e-12));
    }
}
