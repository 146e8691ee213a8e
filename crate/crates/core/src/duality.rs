//! Monte Carlo checks of the moment identities linking reduced networks,
//! path sums through one matrix, and per-matrix Jacobian norms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::forward::{check_input, forward_unchecked};
use crate::net::{sample_weights, sample_weights_with, ArchKind, ArchitectureSpec, ForwardTrace, MatrixId, WeightIndex};
use crate::ntk::backward::backward_unchecked;
use crate::numerics::{map_draws, norm_sq, Matrix, MomentEstimate, RngStream};

/// Gate, in standard errors, for equality checks.
pub const EQUALITY_GATE: f64 = 4.0;
/// Gate, in standard errors, for recursion ratios and sign-flip moments.
pub const RECURSION_GATE: f64 = 3.0;
/// Relative floor on paired standard errors. Identities that hold exactly per
/// draw differ only by rounding, whose mean is not a sampling error.
const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DualityCheck {
    /// Reduced-network moments equal path-sum moments.
    ReducedVsThrough,
    /// `E‖J^k‖² = E f_(k)²`.
    JacobianSecond,
    /// `E f_(k)⁴ / 3 ≤ E‖J^k‖⁴ ≤ E f_(k)⁴`.
    JacobianFourth,
}

impl DualityCheck {
    pub fn label(&self) -> &'static str {
        match self {
            DualityCheck::ReducedVsThrough => "reduced_vs_through",
            DualityCheck::JacobianSecond => "jacobian_second",
            DualityCheck::JacobianFourth => "jacobian_fourth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    pub check: DualityCheck,
    pub k: MatrixId,
    pub moment_order: u32,
    pub lhs: MomentEstimate,
    pub rhs: MomentEstimate,
    pub sandwich_lower: Option<f64>,
    /// Standard error of the paired difference behind `z_score`.
    pub stderr: f64,
    /// Equality: `|mean difference| / stderr`. Sandwich: the larger of the two
    /// one-sided violation scores (negative when both bounds hold with room).
    pub z_score: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Thm4Reports {
    pub second: DualityReport,
    pub fourth: DualityReport,
}

/// Paired difference statistics: `(mean, stderr)` of `a_i - b_i`, with the rounding floor.
fn paired(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let d = MomentEstimate::from_samples(a.iter().zip(b).map(|(x, y)| x - y))?;
    let scale = a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64
        + b.iter().map(|v| v.abs()).sum::<f64>() / b.len() as f64;
    Ok((d.mean(), d.stderr().max(ROUNDING_FLOOR * scale)))
}

fn powi(v: &[f64], p: u32) -> Vec<f64> {
    v.iter().map(|x| x.powi(p as i32)).collect()
}

fn equality_report(
    check: DualityCheck,
    k: MatrixId,
    order: u32,
    lhs: &[f64],
    rhs: &[f64],
) -> Result<DualityReport> {
    let (diff, se) = paired(lhs, rhs)?;
    let z = diff.abs() / se;
    Ok(DualityReport {
        check,
        k,
        moment_order: order,
        lhs: MomentEstimate::from_samples(lhs.iter().copied())?,
        rhs: MomentEstimate::from_samples(rhs.iter().copied())?,
        sandwich_lower: None,
        stderr: se,
        z_score: z,
        pass: z <= EQUALITY_GATE,
    })
}

/// Per-draw quantities for a set of matrices, all evaluated on shared weight draws.
///
/// For each matrix `k` and draw `i`: the reduced-network output `f_(k)`, the
/// path sum `⟨W^k, J^k⟩` on the full network, and `‖J^k‖²`.
#[derive(Clone, Debug)]
pub struct DualityDraws {
    ids: Vec<MatrixId>,
    output: Vec<f64>,
    reduced: Vec<Vec<f64>>,
    through: Vec<Vec<f64>>,
    jac_sq: Vec<Vec<f64>>,
}

impl DualityDraws {
    /// Draw `i` uses weights from `stream.offset(i)`.
    pub fn collect(
        spec: &ArchitectureSpec,
        x: &[f64],
        ids: &[MatrixId],
        draws: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        spec.validate()?;
        check_input(spec, x)?;
        let reduced_specs: Vec<ArchitectureSpec> = ids
            .iter()
            .map(|&k| spec.reduce_matrix(k))
            .collect::<Result<_>>()?;
        let rows: Vec<(f64, Vec<[f64; 3]>)> = map_draws(draws, |i| {
            let w = sample_weights(spec, &stream.offset(i));
            let trace = forward_unchecked(spec, &w, x);
            let jac = backward_unchecked(spec, &w, &trace);
            let per_k = ids
                .iter()
                .zip(&reduced_specs)
                .map(|(&k, rs)| {
                    let fr = if rs.reduction.is_some() {
                        forward_unchecked(rs, &w, x).output
                    } else {
                        trace.output
                    };
                    let j = jac.get(spec, k);
                    let wk = w.matrix(k).expect("validated index");
                    [fr, j.contract(wk), j.norm_sq()]
                })
                .collect();
            (trace.output, per_k)
        });
        let mut out = DualityDraws {
            ids: ids.to_vec(),
            output: Vec::with_capacity(draws),
            reduced: vec![Vec::with_capacity(draws); ids.len()],
            through: vec![Vec::with_capacity(draws); ids.len()],
            jac_sq: vec![Vec::with_capacity(draws); ids.len()],
        };
        for (f, per_k) in rows {
            out.output.push(f);
            for (j, [r, t, s]) in per_k.into_iter().enumerate() {
                out.reduced[j].push(r);
                out.through[j].push(t);
                out.jac_sq[j].push(s);
            }
        }
        Ok(out)
    }

    pub fn ids(&self) -> &[MatrixId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    pub fn outputs(&self) -> &[f64] {
        &self.output
    }

    pub fn reduced_outputs(&self, pos: usize) -> &[f64] {
        &self.reduced[pos]
    }

    pub fn through_outputs(&self, pos: usize) -> &[f64] {
        &self.through[pos]
    }

    pub fn jacobian_norms_sq(&self, pos: usize) -> &[f64] {
        &self.jac_sq[pos]
    }

    fn prefix(&self, draws: usize) -> Result<usize> {
        if draws == 0 || draws > self.len() {
            return Err(Error::InvalidArgument(format!(
                "asked for {draws} draws, {} collected",
                self.len()
            )));
        }
        Ok(draws)
    }

    /// Reduced-network vs path-sum moments of even `order` over the first `draws` draws.
    pub fn reduced_vs_through(&self, pos: usize, order: u32, draws: usize) -> Result<DualityReport> {
        if order % 2 != 0 {
            return Err(Error::InvalidArgument(format!("order {order} is odd")));
        }
        let n = self.prefix(draws)?;
        equality_report(
            DualityCheck::ReducedVsThrough,
            self.ids[pos],
            order,
            &powi(&self.reduced[pos][..n], order),
            &powi(&self.through[pos][..n], order),
        )
    }

    /// `E‖J^k‖² = E f_(k)²` over the first `draws` draws.
    pub fn jacobian_second(&self, pos: usize, draws: usize) -> Result<DualityReport> {
        let n = self.prefix(draws)?;
        equality_report(
            DualityCheck::JacobianSecond,
            self.ids[pos],
            2,
            &self.jac_sq[pos][..n],
            &powi(&self.reduced[pos][..n], 2),
        )
    }

    /// `E f_(k)⁴/3 ≤ E‖J^k‖⁴ ≤ E f_(k)⁴`, each side with `EQUALITY_GATE` stderr slack.
    pub fn jacobian_fourth(&self, pos: usize, draws: usize) -> Result<DualityReport> {
        let n = self.prefix(draws)?;
        let j4 = powi(&self.jac_sq[pos][..n], 2);
        let f4 = powi(&self.reduced[pos][..n], 4);
        let f4_third: Vec<f64> = f4.iter().map(|v| v / 3.0).collect();
        let (up, se_up) = paired(&j4, &f4)?;
        let (lo, se_lo) = paired(&f4_third, &j4)?;
        let (z_up, z_lo) = (up / se_up, lo / se_lo);
        let rhs = MomentEstimate::from_samples(f4.iter().copied())?;
        Ok(DualityReport {
            check: DualityCheck::JacobianFourth,
            k: self.ids[pos],
            moment_order: 4,
            lhs: MomentEstimate::from_samples(j4.iter().copied())?,
            rhs,
            sandwich_lower: Some(rhs.mean() / 3.0),
            stderr: if z_up >= z_lo { se_up } else { se_lo },
            z_score: z_up.max(z_lo),
            pass: z_up <= EQUALITY_GATE && z_lo <= EQUALITY_GATE,
        })
    }
}

fn require_draws(draws: usize, min: usize, what: &str) -> Result<()> {
    if draws < min {
        return Err(Error::InvalidArgument(format!("{what} needs at least {min} draws, got {draws}")));
    }
    Ok(())
}

/// `min(count, total)` distinct matrices of `spec`, uniformly chosen, in the
/// order of [`ArchitectureSpec::matrix_ids`].
pub fn sample_matrix_ids(spec: &ArchitectureSpec, count: usize, stream: &RngStream) -> Vec<MatrixId> {
    let all = spec.matrix_ids();
    let mut picked = rand::seq::index::sample(&mut stream.generator(), all.len(), count.min(all.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// `E[f(x; w)^order]` over independent weight draws.
pub fn estimate_output_moments(
    spec: &ArchitectureSpec,
    x: &[f64],
    order: u32,
    draws: usize,
    stream: &RngStream,
) -> Result<MomentEstimate> {
    if order % 2 != 0 {
        return Err(Error::InvalidArgument(format!("order {order} is odd")));
    }
    require_draws(draws, 1000, "an output moment")?;
    spec.validate()?;
    check_input(spec, x)?;
    let vals = map_draws(draws, |i| {
        let w = sample_weights(spec, &stream.offset(i));
        forward_unchecked(spec, &w, x).output.powi(order as i32)
    });
    MomentEstimate::from_samples(vals)
}

/// `E‖J^k‖^power`, power 2 or 4.
pub fn estimate_jacobian_moments(
    spec: &ArchitectureSpec,
    x: &[f64],
    k: MatrixId,
    power: u32,
    draws: usize,
    stream: &RngStream,
) -> Result<MomentEstimate> {
    if power != 2 && power != 4 {
        return Err(Error::InvalidArgument(format!("power must be 2 or 4, got {power}")));
    }
    spec.check_matrix(k)?;
    let d = DualityDraws::collect(spec, x, &[k], draws, stream)?;
    MomentEstimate::from_samples(d.jac_sq[0].iter().map(|s| s.powi(power as i32 / 2)))
}

/// Reduced-network moments against path-sum moments through `k`.
pub fn check_thm3(
    spec: &ArchitectureSpec,
    x: &[f64],
    k: MatrixId,
    order: u32,
    draws: usize,
    stream: &RngStream,
) -> Result<DualityReport> {
    if order % 2 != 0 {
        return Err(Error::InvalidArgument(format!("order {order} is odd")));
    }
    spec.check_matrix(k)?;
    DualityDraws::collect(spec, x, &[k], draws, stream)?.reduced_vs_through(0, order, draws)
}

/// Jacobian-norm moments against reduced-network output moments through `k`.
pub fn check_thm4(
    spec: &ArchitectureSpec,
    x: &[f64],
    k: MatrixId,
    draws: usize,
    stream: &RngStream,
) -> Result<Thm4Reports> {
    require_draws(draws, 100_000, "a fourth-moment check")?;
    spec.check_matrix(k)?;
    let d = DualityDraws::collect(spec, x, &[k], draws, stream)?;
    Ok(Thm4Reports {
        second: d.jacobian_second(0, draws)?,
        fourth: d.jacobian_fourth(0, draws)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Relu,
    Linear,
}

impl std::str::FromStr for ChainKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ChainKind::Relu),
            "linear" => Ok(ChainKind::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown chain {s:?}"))),
        }
    }
}

impl std::fmt::Display for ChainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChainKind::Relu => "relu",
            ChainKind::Linear => "linear",
        })
    }
}

/// Per-layer ratio `E‖y^l‖^p / E‖y^{l-1}‖^p` in a constant-width chain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentRecursionReport {
    pub kind: ChainKind,
    pub width: usize,
    pub layer: usize,
    /// 2 or 4.
    pub moment_order: u32,
    /// Linearized per-draw contributions; their mean is the ratio estimate and
    /// their standard error the delta-method standard error of the ratio.
    pub observed_ratio: MomentEstimate,
    pub predicted_ratio: f64,
    pub z_score: f64,
    pub pass: bool,
}

/// `(n+5)/n` for the √2-scaled ReLU chain, `(n+2)/n` for the linear chain.
pub fn predicted_fourth_moment_ratio(kind: ChainKind, n: usize) -> f64 {
    let n = n as f64;
    match kind {
        ChainKind::Relu => (n + 5.0) / n,
        ChainKind::Linear => (n + 2.0) / n,
    }
}

fn ratio_estimate(num: &[f64], den: &[f64]) -> Result<MomentEstimate> {
    let mn = num.iter().sum::<f64>() / num.len() as f64;
    let md = den.iter().sum::<f64>() / den.len() as f64;
    let r = mn / md;
    MomentEstimate::from_samples(num.iter().zip(den).map(|(a, b)| r + (a - r * b) / md))
}

pub fn check_norm_recursion(
    kind: ChainKind,
    n: usize,
    depth: usize,
    draws: usize,
    stream: &RngStream,
) -> Result<Vec<MomentRecursionReport>> {
    if n < 4 {
        return Err(Error::InvalidArgument("chain width must be at least 4".into()));
    }
    if depth == 0 {
        return Err(Error::InvalidArgument("chain depth must be at least 1".into()));
    }
    require_draws(draws, 2, "a recursion check")?;
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let s2 = std::f64::consts::SQRT_2;
    // per draw: ‖y^l‖² for l in 0..=depth
    let norms: Vec<Vec<f64>> = map_draws(draws, |i| {
        let mut rng = stream.offset(i).generator();
        let mut y = vec![0.0; n];
        y[0] = 1.0;
        let mut out = vec![1.0];
        for _ in 0..depth {
            let w = Matrix::<f64>::standard_normal(&mut rng, n, n);
            let mut u = vec![0.0; n];
            w.matvec_acc(&y, inv_sqrt_n, &mut u);
            if kind == ChainKind::Relu {
                for v in &mut u {
                    *v = if *v > 0.0 { s2 * *v } else { 0.0 };
                }
            }
            out.push(norm_sq(&u));
            y = u;
        }
        out
    });
    let mut reports = Vec::with_capacity(2 * depth);
    for l in 1..=depth {
        for order in [2u32, 4] {
            let p = order as i32 / 2;
            let num: Vec<f64> = norms.iter().map(|v| v[l].powi(p)).collect();
            let den: Vec<f64> = norms.iter().map(|v| v[l - 1].powi(p)).collect();
            let est = ratio_estimate(&num, &den)?;
            let predicted = if order == 2 { 1.0 } else { predicted_fourth_moment_ratio(kind, n) };
            let z = (est.mean() - predicted) / est.stderr();
            reports.push(MomentRecursionReport {
                kind,
                width: n,
                layer: l,
                moment_order: order,
                observed_ratio: est,
                predicted_ratio: predicted,
                z_score: z,
                pass: z.abs() <= RECURSION_GATE,
            });
        }
    }
    Ok(reports)
}

/// `E[w^p] / 2` for a standard normal weight: 0 for odd p, `(p-1)!!/2` for even p.
pub fn sign_flip_prediction(power: u32) -> f64 {
    if power % 2 == 1 {
        return 0.0;
    }
    let mut c = 1.0;
    let mut k = power as i64 - 1;
    while k > 1 {
        c *= k as f64;
        k -= 2;
    }
    c / 2.0
}

/// `E[w^power · z]` for a uniformly chosen weight `w` of a matrix feeding a ReLU
/// site in `layer`, with `z` that site's mask.
///
/// Vanilla: `W^layer` (layer in 1..=L). ResNet: `W^{layer,1}`, the first branch
/// matrix of block `layer`. DenseNet: `W^{layer,h}` with `h` uniform in
/// `0..layer`, feeding `q^layer` (layer in 1..L), or `W^0` for layer 0.
pub fn check_sign_flip(
    spec: &ArchitectureSpec,
    x: &[f64],
    layer: usize,
    power: u32,
    draws: usize,
    stream: &RngStream,
) -> Result<MomentEstimate> {
    spec.validate()?;
    check_input(spec, x)?;
    let ok = match spec.kind {
        ArchKind::Vanilla | ArchKind::ResNet => (1..=spec.depth).contains(&layer),
        ArchKind::DenseNet => layer < spec.depth,
    };
    if !ok {
        return Err(Error::InvalidIndex(format!(
            "layer {layer} feeds no ReLU site in a {} of depth {}",
            spec.kind, spec.depth
        )));
    }
    let n = spec.width;
    let vals = map_draws(draws, |i| {
        let mut rng = stream.offset(i).generator();
        let w = sample_weights_with::<f64, _>(spec, &mut rng);
        let trace = forward_unchecked(spec, &w, x);
        let (matrix, site) = match spec.kind {
            ArchKind::Vanilla => (&w.body[layer - 1], layer - 1),
            ArchKind::ResNet => (
                &w.body[spec.slot(WeightIndex::new(layer, 1))],
                ForwardTrace::<f64>::resnet_site(spec, layer, 1),
            ),
            ArchKind::DenseNet if layer == 0 => (&w.initial, 0),
            ArchKind::DenseNet => {
                let h = rng.random_range(0..layer);
                (&w.body[spec.slot(WeightIndex::new(layer, h))], layer)
            }
        };
        let r = rng.random_range(0..n);
        let c = rng.random_range(0..matrix.cols());
        let z = if trace.masks[site][r] { 1.0 } else { 0.0 };
        matrix[(r, c)].powi(power as i32) * z
    });
    MomentEstimate::from_samples(vals)
}
