//! Normalized variance of empirical NTK entries over weight draws, depth and
//! width sweeps, and the exponential envelopes bounding it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::forward::{check_input, forward_unchecked};
use crate::net::{sample_weights, ArchKind, ArchitectureSpec};
use crate::ntk::backward::backward_unchecked;
use crate::numerics::{map_draws, norm_sq, standard_normal, MomentEstimate, RngStream};

/// Smallest draw count accepted by the estimators.
pub const MIN_DRAWS: usize = 100;
/// Means below this magnitude cannot be normalized by.
const DEGENERATE_MEAN: f64 = 1e-12;

/// Unit-norm pair with coordinates drawn from `N(0.5, 1)` and `N(-0.5, 1)`.
pub fn gen_inputs(input_dim: usize, stream: &RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    if input_dim == 0 {
        return Err(Error::InvalidArgument("input_dim must be at least 1".into()));
    }
    let mut rng = stream.generator();
    let mut draw = |shift: f64| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..input_dim).map(|_| shift + standard_normal(&mut rng)).collect();
            let s = norm_sq(&v).sqrt();
            if s > 0.0 {
                return v.into_iter().map(|a| a / s).collect();
            }
        }
    };
    let x = draw(0.5);
    let x2 = draw(-0.5);
    Ok((x, x2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchSummary {
    pub kind: ArchKind,
    pub n: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub m: usize,
    pub alpha_summary: String,
}

impl From<&ArchitectureSpec> for ArchSummary {
    fn from(spec: &ArchitectureSpec) -> Self {
        ArchSummary {
            kind: spec.kind,
            n: spec.width,
            depth: spec.depth,
            m: spec.branch_depth,
            alpha_summary: spec.alpha_summary(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub arch: ArchSummary,
    /// `x == x'`. Off-diagonal entries are an empirical extension of the bounds.
    pub diag: bool,
    pub n_draws: usize,
    pub mean_g: MomentEstimate,
    /// Unbiased sample variance of the entries.
    pub var_g: f64,
    pub normalized_variance: f64,
    /// Delete-1 jackknife.
    pub normalized_variance_stderr: f64,
    pub eta: f64,
}

/// Normalized variance of `samples` with its jackknife standard error.
///
/// Leave-one-out moments come from the centered totals in O(1) each, so the
/// jackknife costs one pass.
pub fn normalized_variance(samples: &[f64]) -> Result<(MomentEstimate, f64, f64, f64)> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::InvalidArgument("need at least 3 samples".into()));
    }
    let est = MomentEstimate::from_samples(samples.iter().copied())?;
    let mean = est.mean();
    if mean.abs() < DEGENERATE_MEAN {
        return Err(Error::DegenerateMean(mean));
    }
    let nf = n as f64;
    let q: f64 = samples.iter().map(|g| (g - mean) * (g - mean)).sum();
    let var = q / (nf - 1.0);
    let v = var / (mean * mean);
    let loo: Vec<f64> = samples
        .iter()
        .map(|g| {
            let c = g - mean;
            let shift = -c / (nf - 1.0);
            let var_i = (q - c * c - (nf - 1.0) * shift * shift) / (nf - 2.0);
            let m_i = mean + shift;
            var_i / (m_i * m_i)
        })
        .collect();
    let avg = loo.iter().sum::<f64>() / nf;
    let se = ((nf - 1.0) / nf * loo.iter().map(|u| (u - avg) * (u - avg)).sum::<f64>()).sqrt();
    Ok((est, var, v, se))
}

fn report(spec: &ArchitectureSpec, diag: bool, samples: &[f64]) -> Result<VarianceReport> {
    let (mean_g, var_g, v, se) = normalized_variance(samples)?;
    Ok(VarianceReport {
        arch: spec.into(),
        diag,
        n_draws: samples.len(),
        mean_g,
        var_g,
        normalized_variance: v,
        normalized_variance_stderr: se,
        eta: v + 1.0,
    })
}

fn check_draws(draws: usize) -> Result<()> {
    if draws < MIN_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "variance estimates need at least {MIN_DRAWS} draws, got {draws}"
        )));
    }
    Ok(())
}

/// `Var(G)/E[G]²` for the entry `G(x, x'; w)`, draw `i` from `stream.offset(i)`.
pub fn estimate_normalized_variance(
    spec: &ArchitectureSpec,
    x: &[f64],
    x2: &[f64],
    draws: usize,
    stream: &RngStream,
) -> Result<VarianceReport> {
    check_draws(draws)?;
    spec.validate()?;
    check_input(spec, x)?;
    check_input(spec, x2)?;
    let diag = x == x2;
    let samples = map_draws(draws, |i| {
        let w = sample_weights(spec, &stream.offset(i));
        let a = backward_unchecked(spec, &w, &forward_unchecked(spec, &w, x));
        if diag {
            a.norm_sq()
        } else {
            a.inner(&backward_unchecked(spec, &w, &forward_unchecked(spec, &w, x2)))
        }
    });
    report(spec, diag, &samples)
}

/// Diagonal `G(x, x)` and off-diagonal `G(x, x')` reports from the same draws.
pub fn estimate_pair(
    spec: &ArchitectureSpec,
    x: &[f64],
    x2: &[f64],
    draws: usize,
    stream: &RngStream,
) -> Result<(VarianceReport, VarianceReport)> {
    check_draws(draws)?;
    spec.validate()?;
    check_input(spec, x)?;
    check_input(spec, x2)?;
    let samples: Vec<(f64, f64)> = map_draws(draws, |i| {
        let w = sample_weights(spec, &stream.offset(i));
        let a = backward_unchecked(spec, &w, &forward_unchecked(spec, &w, x));
        let b = backward_unchecked(spec, &w, &forward_unchecked(spec, &w, x2));
        (a.norm_sq(), a.inner(&b))
    });
    let (d, o): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
    Ok((report(spec, true, &d)?, report(spec, false, &o)?))
}

/// How a family sets its branch scalings at depth `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `α_l = a` for every block.
    Constant(f64),
    /// `α_l = c / L`, keeping `Σ α_l = c`.
    OverDepth(f64),
}

impl AlphaRule {
    pub fn at_depth(&self, depth: usize) -> f64 {
        match *self {
            AlphaRule::Constant(a) => a,
            AlphaRule::OverDepth(c) => c / depth.max(1) as f64,
        }
    }
}

/// An architecture with its depth and width left open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFamily {
    pub kind: ArchKind,
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub alpha: Option<AlphaRule>,
}

impl ArchFamily {
    pub fn vanilla() -> Self {
        ArchFamily {
            kind: ArchKind::Vanilla,
            m: 0,
            alpha: None,
        }
    }

    pub fn resnet(m: usize, alpha: AlphaRule) -> Self {
        ArchFamily {
            kind: ArchKind::ResNet,
            m,
            alpha: Some(alpha),
        }
    }

    pub fn densenet(alpha: f64) -> Self {
        ArchFamily {
            kind: ArchKind::DenseNet,
            m: 0,
            alpha: Some(AlphaRule::Constant(alpha)),
        }
    }

    pub fn spec(&self, input_dim: usize, depth: usize, width: usize) -> Result<ArchitectureSpec> {
        let alpha = || {
            self.alpha
                .map(|r| r.at_depth(depth))
                .ok_or_else(|| Error::InvalidSpec(format!("{} needs an alpha", self.kind)))
        };
        match self.kind {
            ArchKind::Vanilla => ArchitectureSpec::vanilla(input_dim, depth, width),
            ArchKind::ResNet => ArchitectureSpec::resnet(input_dim, width, self.m, vec![alpha()?; depth]),
            ArchKind::DenseNet => ArchitectureSpec::densenet(input_dim, depth, width, alpha()?),
        }
    }
}

/// Full grid; each cell gets its own inputs and weights from a stream derived
/// from `(family, depth, width)` positions, so cells do not depend on each other.
pub fn sweep(
    families: &[ArchFamily],
    depths: &[usize],
    widths: &[usize],
    input_dim: usize,
    draws: usize,
    stream: &RngStream,
) -> Result<Vec<VarianceReport>> {
    if families.is_empty() || depths.is_empty() || widths.is_empty() {
        return Err(Error::InvalidArgument("sweep lists must be nonempty".into()));
    }
    let mut out = Vec::with_capacity(2 * families.len() * depths.len() * widths.len());
    for (fi, fam) in families.iter().enumerate() {
        for &depth in depths {
            for &width in widths {
                let spec = fam.spec(input_dim, depth, width)?;
                let cell = stream
                    .derive(fi as u64)
                    .derive(depth as u64)
                    .derive(width as u64);
                let (x, x2) = gen_inputs(input_dim, &cell.derive(0))?;
                let (d, o) = estimate_pair(&spec, &x, &x2, draws, &cell.derive(1))?;
                out.push(d);
                out.push(o);
            }
        }
    }
    Ok(out)
}

/// `V(b) / V(a)` with a delta-method standard error.
pub fn variance_ratio(a: &VarianceReport, b: &VarianceReport) -> (f64, f64) {
    let (va, vb) = (a.normalized_variance, b.normalized_variance);
    let r = vb / va;
    let rel = ((a.normalized_variance_stderr / va).powi(2) + (b.normalized_variance_stderr / vb).powi(2)).sqrt();
    (r, r * rel)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub t: f64,
}

/// Weighted least squares of `ln V` on depth, weights `(V / se)²`.
pub fn log_variance_trend(reports: &[VarianceReport]) -> Result<SlopeFit> {
    if reports.len() < 3 {
        return Err(Error::InvalidArgument("trend needs at least 3 reports".into()));
    }
    let mut pts = Vec::with_capacity(reports.len());
    for r in reports {
        let v = r.normalized_variance;
        if !(v > 0.0 && r.normalized_variance_stderr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot take the log of normalized variance {v}"
            )));
        }
        let w = (v / r.normalized_variance_stderr).powi(2);
        pts.push((r.arch.depth as f64, v.ln(), w));
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("trend needs at least two distinct depths".into()));
    }
    let slope = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let stderr = (1.0 / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        stderr,
        t: slope / stderr,
    })
}

/// User-supplied constants of the envelopes; the theory fixes only their existence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        BoundParams {
            c: 1.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("bound constants must be positive".into()));
        }
        Ok(())
    }

    /// `(1 + 5/n)^{m/2}`.
    pub fn rho(n: usize, m: usize) -> f64 {
        (1.0 + 5.0 / n as f64).powf(m as f64 / 2.0)
    }
}

/// `ψ'(x)` for `x > 0`: recurrence up to 20, then the asymptotic series.
fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// `5α² Σ_{l≥1} (l + α - 1)⁻²`, a finite value for the DenseNet constant.
pub fn densenet_c2_preset(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    Ok(5.0 * alpha * alpha * trigamma(alpha))
}

/// `(lower, upper)` envelope of `η(n, L)`, without the `1 + O(1/n)` factor.
pub fn bound_xi(spec: &ArchitectureSpec, params: &BoundParams) -> Result<(f64, f64)> {
    spec.validate()?;
    params.validate()?;
    let n = spec.width as f64;
    match spec.kind {
        ArchKind::Vanilla => Err(Error::InvalidSpec("no envelope is defined for vanilla networks".into())),
        ArchKind::ResNet => {
            let alphas: Vec<f64> = (1..=spec.depth).map(|l| spec.alpha(l)).collect();
            let s: f64 = alphas.iter().map(|a| a / (1.0 + a)).sum();
            let xi = (5.0 * spec.branch_depth as f64 / n + params.c / n * s).exp();
            let sum: f64 = alphas.iter().sum();
            let ratio = alphas.iter().map(|a| a * a).sum::<f64>() / (sum * sum);
            Ok(((ratio * xi).max(1.0), xi))
        }
        ArchKind::DenseNet => {
            let xi = (params.c2 / n).exp();
            let l = spec.depth as f64;
            let denom = l * l.ln().powi(2);
            let lower = if denom > 0.0 { (params.c1 / denom * xi).max(1.0) } else { 1.0 };
            Ok((lower, xi))
        }
    }
}

/// Flat record behind the CSV and JSON-lines outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub kind: ArchKind,
    pub n: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub m: usize,
    pub alpha_summary: String,
    pub diag: bool,
    pub draws: usize,
    pub mean_g: f64,
    pub var_g: f64,
    pub normalized_variance: f64,
    pub nv_stderr: f64,
    pub eta: f64,
}

impl From<&VarianceReport> for VarianceRow {
    fn from(r: &VarianceReport) -> Self {
        VarianceRow {
            kind: r.arch.kind,
            n: r.arch.n,
            depth: r.arch.depth,
            m: r.arch.m,
            alpha_summary: r.arch.alpha_summary.clone(),
            diag: r.diag,
            draws: r.n_draws,
            mean_g: r.mean_g.mean(),
            var_g: r.var_g,
            normalized_variance: r.normalized_variance,
            nv_stderr: r.normalized_variance_stderr,
            eta: r.eta,
        }
    }
}

pub fn write_csv<W: Write>(reports: &[VarianceReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(VarianceRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}
