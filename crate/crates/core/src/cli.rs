//! `ntk` command-line front end.
//!
//! Every subcommand resolves its flags over an optional `--config` JSON file
//! (flags win), prints the fully expanded configuration as one JSON line, then
//! writes its records as CSV or JSON lines. Exit codes: 0 success, 1 when a
//! statistical check misses its gate, 2 on usage or input errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::duality::{
    check_norm_recursion, check_sign_flip, sample_matrix_ids, sign_flip_prediction, ChainKind, DualityDraws,
    DualityReport, RECURSION_GATE,
};
use crate::error::Error;
use crate::kreg::{run_experiment, AccuracyRow, ExperimentConfig};
use crate::limit::limit_gram;
use crate::net::{ArchKind, ArchitectureSpec, MatrixId};
use crate::ntk::avg_ntk_gram;
use crate::numerics::RngStream;
use crate::variance::{
    bound_xi, densenet_c2_preset, gen_inputs, sweep, AlphaRule, ArchFamily, BoundParams, VarianceRow,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Parser, Debug)]
#[command(name = "ntk", version, about = "Finite-width NTK experiments: variance sweeps, duality checks, kernels, regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalized variance of NTK entries over a depth × width grid.
    Variance(VarianceFlags),
    /// Reduced-network and Jacobian moment identities for chosen matrices.
    Duality(DualityFlags),
    /// Norm recursions of constant-width chains and sign-flip moments.
    Moments(MomentsFlags),
    /// Limit kernel on random input pairs, optionally against the averaged empirical NTK.
    Kernel(KernelFlags),
    /// Kernel regression accuracy over an architecture grid.
    Regress(RegressFlags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Variance(_) => "variance",
            Command::Duality(_) => "duality",
            Command::Moments(_) => "moments",
            Command::Kernel(_) => "kernel",
            Command::Regress(_) => "regress",
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Serialize)]
struct CommonFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo draws (`T` for kernel averages).
    #[arg(long, visible_alias = "T")]
    draws: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// JSON file with the same keys as the flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct VarianceFlags {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonFlags,
    #[arg(long, value_parser = parse_kind)]
    arch: Option<ArchKind>,
    #[arg(long)]
    m: Option<usize>,
    /// Constant branch scaling.
    #[arg(long)]
    alpha: Option<f64>,
    /// ResNet scaling `c / L`.
    #[arg(long)]
    alpha_over_depth: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long, alias = "width", value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Use the finite series value for the DenseNet constant C₂.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    c2_preset: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
struct DualityFlags {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonFlags,
    #[arg(long, value_parser = parse_kind)]
    arch: Option<ArchKind>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-block ResNet scalings; sets the depth.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    /// Explicit input vector; drawn from the seed when absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    /// Matrix to test: `l,h`, `l`, `initial` or `final`. Repeatable.
    #[arg(long)]
    k: Option<Vec<String>>,
    /// How many matrices to pick when no `--k` is given.
    #[arg(long)]
    random_k: Option<usize>,
    /// Moment orders of the reduced-vs-path-sum check.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<u32>>,
}

#[derive(Args, Debug, Serialize)]
struct MomentsFlags {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonFlags,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    chains: Option<Vec<ChainKind>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sign_flip: Option<bool>,
    #[arg(long)]
    sign_width: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    powers: Option<Vec<u32>>,
}

#[derive(Args, Debug, Serialize)]
struct KernelFlags {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonFlags,
    #[arg(long, value_parser = parse_kind)]
    arch: Option<ArchKind>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    compare_empirical: Option<bool>,
    /// Relative error gate for the empirical comparison.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct RegressFlags {
    #[command(flatten)]
    common: CommonFlags,
    /// CSV dataset; synthetic data when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Replaces the architecture grid with a single family.
    #[arg(long, value_parser = parse_kind)]
    arch: Option<ArchKind>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_over_depth: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long, alias = "width", value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    limit: Option<bool>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    split: Option<f64>,
}

fn parse_kind(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a run: bad input (exit 2) or a computation error (also 2).
#[derive(Debug)]
struct CliError(String);

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError(msg.into())
}

fn read_config(path: Option<&Path>, command: &str) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut obj = match serde_json::from_str(&text)? {
        Value::Object(o) => o,
        _ => return Err(usage("config must be a JSON object")),
    };
    match obj.remove("command") {
        None => {}
        Some(Value::String(c)) if c == command => {}
        Some(other) => return Err(usage(format!("config is for {other}, not {command}"))),
    }
    Ok(obj)
}

/// File values overlaid with every flag that was given.
fn merge<F: Serialize, R: DeserializeOwned>(flags: &F, file: Map<String, Value>) -> CliResult<R> {
    let mut merged = file;
    if let Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

fn positive(name: &str, v: usize) -> CliResult<()> {
    if v == 0 {
        return Err(usage(format!("{name} must be positive")));
    }
    Ok(())
}

/// `alpha`, `alphas` and `alpha_over_depth` only make sense for some kinds.
fn check_alpha_flags(kind: ArchKind, alpha: Option<f64>, alphas: bool, over_depth: bool) -> CliResult<()> {
    match kind {
        ArchKind::Vanilla if alpha.is_some() || alphas || over_depth => {
            Err(usage("vanilla networks take no alpha"))
        }
        ArchKind::DenseNet if alphas || over_depth => Err(usage("densenet takes a single --alpha")),
        _ if alpha.is_some() && (alphas || over_depth) => Err(usage("give only one of the alpha flags")),
        _ => Ok(()),
    }
}

fn default_alpha(kind: ArchKind) -> Option<f64> {
    match kind {
        ArchKind::Vanilla => None,
        ArchKind::ResNet => Some(0.3),
        ArchKind::DenseNet => Some(0.5),
    }
}

fn family(kind: ArchKind, m: usize, alpha: Option<f64>, over_depth: Option<f64>) -> ArchFamily {
    match kind {
        ArchKind::Vanilla => ArchFamily::vanilla(),
        ArchKind::ResNet => ArchFamily::resnet(
            m,
            over_depth.map_or_else(|| AlphaRule::Constant(alpha.unwrap_or(0.3)), AlphaRule::OverDepth),
        ),
        ArchKind::DenseNet => ArchFamily::densenet(alpha.unwrap_or(0.5)),
    }
}

/// Single-depth architecture with an optional per-block alpha list.
fn single_spec(
    kind: ArchKind,
    input_dim: usize,
    depth: usize,
    width: usize,
    m: usize,
    alpha: Option<f64>,
    alphas: &Option<Vec<f64>>,
) -> CliResult<ArchitectureSpec> {
    Ok(match (kind, alphas) {
        (ArchKind::ResNet, Some(a)) => ArchitectureSpec::resnet(input_dim, width, m, a.clone())?,
        _ => family(kind, m, alpha, None).spec(input_dim, depth, width)?,
    })
}

fn write_rows<T: Serialize>(rows: &[T], format: Format, out: &mut dyn Write) -> CliResult<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut *out, r)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Records go to `--out` when set, otherwise to standard output.
fn emit<T: Serialize>(rows: &[T], format: Format, path: &Option<PathBuf>, stdout: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => {
            let mut buf = Vec::new();
            write_rows(rows, format, &mut buf)?;
            std::fs::write(p, buf).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok(())
        }
        None => write_rows(rows, format, stdout),
    }
}

fn print_effective<C: Serialize>(command: &str, cfg: &C, stdout: &mut dyn Write) -> CliResult<()> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(o) = &mut v {
        let mut with_cmd = Map::new();
        with_cmd.insert("command".into(), Value::String(command.into()));
        with_cmd.append(o);
        v = Value::Object(with_cmd);
    }
    writeln!(stdout, "{v}")?;
    Ok(())
}

/// Result of a subcommand: whether every gated check passed.
struct Outcome {
    all_pass: bool,
}

// ---------------------------------------------------------------- variance

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VarianceConfig {
    seed: u64,
    draws: usize,
    out: Option<PathBuf>,
    format: Format,
    threads: Option<usize>,
    arch: ArchKind,
    m: usize,
    alpha: Option<f64>,
    alpha_over_depth: Option<f64>,
    depths: Vec<usize>,
    widths: Vec<usize>,
    input_dim: usize,
    c: f64,
    c1: f64,
    c2: f64,
    c2_preset: bool,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        VarianceConfig {
            seed: 0,
            draws: 5000,
            out: None,
            format: Format::Csv,
            threads: None,
            arch: ArchKind::ResNet,
            m: 2,
            alpha: None,
            alpha_over_depth: None,
            depths: vec![2, 4, 8, 16],
            widths: vec![16],
            input_dim: 784,
            c: 1.0,
            c1: 1.0,
            c2: 1.0,
            c2_preset: false,
        }
    }
}

impl VarianceConfig {
    fn finish(&mut self) -> CliResult<()> {
        check_alpha_flags(self.arch, self.alpha, false, self.alpha_over_depth.is_some())?;
        if self.alpha.is_none() && self.alpha_over_depth.is_none() {
            self.alpha = default_alpha(self.arch);
        }
        if self.c2_preset {
            if self.arch != ArchKind::DenseNet {
                return Err(usage("--c2-preset applies to densenet"));
            }
            self.c2 = densenet_c2_preset(self.alpha.unwrap_or(0.5))?;
        }
        positive("draws", self.draws)?;
        positive("input_dim", self.input_dim)?;
        if self.depths.is_empty() || self.widths.is_empty() {
            return Err(usage("depths and widths must be nonempty"));
        }
        Ok(())
    }
}

fn cmd_variance(cfg: &VarianceConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<Outcome> {
    let fam = family(cfg.arch, cfg.m, cfg.alpha, cfg.alpha_over_depth);
    writeln!(
        stderr,
        "variance: {} cells x {} draws",
        cfg.depths.len() * cfg.widths.len(),
        cfg.draws
    )?;
    let reports = sweep(
        std::slice::from_ref(&fam),
        &cfg.depths,
        &cfg.widths,
        cfg.input_dim,
        cfg.draws,
        &RngStream::new(cfg.seed, 0),
    )?;
    let rows: Vec<VarianceRow> = reports.iter().map(VarianceRow::from).collect();
    emit(&rows, cfg.format, &cfg.out, stdout)?;
    let params = BoundParams {
        c: cfg.c,
        c1: cfg.c1,
        c2: cfg.c2,
    };
    for r in &reports {
        let spec = fam.spec(cfg.input_dim, r.arch.depth, r.arch.n)?;
        let env = match bound_xi(&spec, &params) {
            Ok((lo, hi)) => format!("  envelope [{lo:.4}, {hi:.4}]"),
            Err(_) => String::new(),
        };
        writeln!(
            stdout,
            "# {} n={} L={} {}: V = {:.4e} ± {:.2e}, eta = {:.4}{}{}",
            r.arch.kind,
            r.arch.n,
            r.arch.depth,
            if r.diag { "diag" } else { "off-diag" },
            r.normalized_variance,
            r.normalized_variance_stderr,
            r.eta,
            env,
            if r.diag { "" } else { " (empirical extension)" }
        )?;
    }
    Ok(Outcome { all_pass: true })
}

// ---------------------------------------------------------------- duality

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DualityConfig {
    seed: u64,
    draws: usize,
    out: Option<PathBuf>,
    format: Format,
    threads: Option<usize>,
    arch: ArchKind,
    m: usize,
    alpha: Option<f64>,
    alphas: Option<Vec<f64>>,
    width: usize,
    depth: usize,
    input_dim: usize,
    x: Option<Vec<f64>>,
    k: Vec<String>,
    random_k: usize,
    order: Vec<u32>,
}

impl Default for DualityConfig {
    fn default() -> Self {
        DualityConfig {
            seed: 0,
            draws: 200_000,
            out: None,
            format: Format::Csv,
            threads: None,
            arch: ArchKind::ResNet,
            m: 2,
            alpha: None,
            alphas: None,
            width: 8,
            depth: 3,
            input_dim: 2,
            x: None,
            k: Vec::new(),
            random_k: 5,
            order: vec![2, 4],
        }
    }
}

impl DualityConfig {
    fn finish(&mut self) -> CliResult<ArchitectureSpec> {
        check_alpha_flags(self.arch, self.alpha, self.alphas.is_some(), false)?;
        if let Some(a) = &self.alphas {
            self.depth = a.len();
        } else if self.alpha.is_none() {
            self.alpha = default_alpha(self.arch);
        }
        if let Some(x) = &self.x {
            self.input_dim = x.len();
        }
        positive("draws", self.draws)?;
        if self.order.is_empty() || self.order.iter().any(|o| o % 2 == 1 || *o == 0) {
            return Err(usage("orders must be positive and even"));
        }
        let spec = single_spec(self.arch, self.input_dim, self.depth, self.width, self.m, self.alpha, &self.alphas)?;
        if self.k.is_empty() {
            positive("random_k", self.random_k)?;
            let stream = RngStream::new(self.seed, 0).derive(2);
            self.k = sample_matrix_ids(&spec, self.random_k, &stream)
                .into_iter()
                .map(|id| id.to_string())
                .collect();
        }
        Ok(spec)
    }
}

/// One duality check as a flat record.
#[derive(Serialize)]
struct DualityRow {
    check: &'static str,
    arch: ArchKind,
    n: usize,
    #[serde(rename = "L")]
    depth: usize,
    k_layer: String,
    k_sublayer: String,
    order: u32,
    lhs_mean: f64,
    rhs_mean: f64,
    stderr: f64,
    z: f64,
    pass: bool,
}

impl DualityRow {
    fn new(spec: &ArchitectureSpec, r: &DualityReport) -> Self {
        let (kl, ks) = match r.k {
            MatrixId::Body(w) => (w.layer.to_string(), w.sublayer.to_string()),
            other => (other.to_string(), "-".into()),
        };
        DualityRow {
            check: r.check.label(),
            arch: spec.kind,
            n: spec.width,
            depth: spec.depth,
            k_layer: kl,
            k_sublayer: ks,
            order: r.moment_order,
            lhs_mean: r.lhs.mean(),
            rhs_mean: r.rhs.mean(),
            stderr: r.stderr,
            z: r.z_score,
            pass: r.pass,
        }
    }
}

fn cmd_duality(
    cfg: &DualityConfig,
    spec: &ArchitectureSpec,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<Outcome> {
    let master = RngStream::new(cfg.seed, 0);
    let x = match &cfg.x {
        Some(x) => x.clone(),
        None => gen_inputs(cfg.input_dim, &master.derive(0))?.0,
    };
    let ids: Vec<MatrixId> = cfg
        .k
        .iter()
        .map(|s| s.parse::<MatrixId>())
        .collect::<Result<_, _>>()?;
    for &id in &ids {
        spec.check_matrix(id)?;
    }
    writeln!(stderr, "duality: {} matrices x {} draws", ids.len(), cfg.draws)?;
    let d = DualityDraws::collect(spec, &x, &ids, cfg.draws, &master.derive(1))?;
    let mut rows = Vec::new();
    for pos in 0..ids.len() {
        for &o in &cfg.order {
            rows.push(DualityRow::new(spec, &d.reduced_vs_through(pos, o, cfg.draws)?));
        }
        rows.push(DualityRow::new(spec, &d.jacobian_second(pos, cfg.draws)?));
        rows.push(DualityRow::new(spec, &d.jacobian_fourth(pos, cfg.draws)?));
    }
    emit(&rows, cfg.format, &cfg.out, stdout)?;
    let failed: Vec<&DualityRow> = rows.iter().filter(|r| !r.pass).collect();
    writeln!(stdout, "# {} checks, {} failed", rows.len(), failed.len())?;
    for r in &failed {
        writeln!(stdout, "# FAIL {} k=({},{}) order {}: z = {:.2}", r.check, r.k_layer, r.k_sublayer, r.order, r.z)?;
    }
    Ok(Outcome {
        all_pass: failed.is_empty(),
    })
}

// ---------------------------------------------------------------- moments

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MomentsConfig {
    seed: u64,
    draws: usize,
    out: Option<PathBuf>,
    format: Format,
    threads: Option<usize>,
    widths: Vec<usize>,
    depth: usize,
    chains: Vec<ChainKind>,
    sign_flip: bool,
    sign_width: usize,
    m: usize,
    alpha: f64,
    powers: Vec<u32>,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        MomentsConfig {
            seed: 0,
            draws: 100_000,
            out: None,
            format: Format::Csv,
            threads: None,
            widths: vec![8, 16, 32],
            depth: 3,
            chains: vec![ChainKind::Relu, ChainKind::Linear],
            sign_flip: true,
            sign_width: 8,
            m: 2,
            alpha: 0.5,
            powers: vec![1, 2, 4],
        }
    }
}

#[derive(Serialize)]
struct MomentRow {
    check: &'static str,
    chain: String,
    n: usize,
    layer: usize,
    order: u32,
    observed: f64,
    predicted: f64,
    stderr: f64,
    z: f64,
    pass: bool,
}

fn cmd_moments(cfg: &MomentsConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<Outcome> {
    positive("draws", cfg.draws)?;
    positive("depth", cfg.depth)?;
    let master = RngStream::new(cfg.seed, 0);
    let mut rows = Vec::new();
    for (ci, &chain) in cfg.chains.iter().enumerate() {
        for &n in &cfg.widths {
            writeln!(stderr, "moments: {chain} chain n={n}")?;
            let s = master.derive(1).derive(ci as u64).derive(n as u64);
            for r in check_norm_recursion(chain, n, cfg.depth, cfg.draws, &s)? {
                rows.push(MomentRow {
                    check: "norm_recursion",
                    chain: chain.to_string(),
                    n,
                    layer: r.layer,
                    order: r.moment_order,
                    observed: r.observed_ratio.mean(),
                    predicted: r.predicted_ratio,
                    stderr: r.observed_ratio.stderr(),
                    z: r.z_score,
                    pass: r.pass,
                });
            }
        }
    }
    if cfg.sign_flip {
        // ResNet first-branch matrices see symmetric inputs, so every power has a prediction
        let spec = ArchitectureSpec::resnet(3, cfg.sign_width, cfg.m, vec![cfg.alpha; cfg.depth])?;
        let (x, _) = gen_inputs(3, &master.derive(2))?;
        writeln!(stderr, "moments: sign flip, {} layers", cfg.depth)?;
        for layer in 1..=cfg.depth {
            for &p in &cfg.powers {
                let s = master.derive(3).derive(layer as u64).derive(p as u64);
                let e = check_sign_flip(&spec, &x, layer, p, cfg.draws, &s)?;
                let want = sign_flip_prediction(p);
                let z = (e.mean() - want) / e.stderr();
                rows.push(MomentRow {
                    check: "sign_flip",
                    chain: "resnet".into(),
                    n: cfg.sign_width,
                    layer,
                    order: p,
                    observed: e.mean(),
                    predicted: want,
                    stderr: e.stderr(),
                    z,
                    pass: z.abs() <= RECURSION_GATE,
                });
            }
        }
    }
    emit(&rows, cfg.format, &cfg.out, stdout)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    writeln!(stdout, "# {} checks, {} failed", rows.len(), failed)?;
    for r in rows.iter().filter(|r| !r.pass) {
        writeln!(stdout, "# FAIL {} {} n={} layer {} order {}: z = {:.2}", r.check, r.chain, r.n, r.layer, r.order, r.z)?;
    }
    Ok(Outcome { all_pass: failed == 0 })
}

// ---------------------------------------------------------------- kernel

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KernelConfig {
    seed: u64,
    draws: usize,
    out: Option<PathBuf>,
    format: Format,
    threads: Option<usize>,
    arch: ArchKind,
    m: usize,
    alpha: Option<f64>,
    alphas: Option<Vec<f64>>,
    width: usize,
    depth: usize,
    input_dim: usize,
    pairs: usize,
    compare_empirical: bool,
    tolerance: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            seed: 0,
            draws: 200,
            out: None,
            format: Format::Csv,
            threads: None,
            arch: ArchKind::ResNet,
            m: 2,
            alpha: None,
            alphas: None,
            width: 512,
            depth: 2,
            input_dim: 8,
            pairs: 5,
            compare_empirical: false,
            tolerance: 0.05,
        }
    }
}

#[derive(Serialize)]
struct KernelRow {
    pair: usize,
    entry: &'static str,
    limit: f64,
    empirical: Option<f64>,
    rel_err: Option<f64>,
    pass: Option<bool>,
}

fn cmd_kernel(
    cfg: &KernelConfig,
    spec: &ArchitectureSpec,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<Outcome> {
    positive("pairs", cfg.pairs)?;
    positive("draws", cfg.draws)?;
    let master = RngStream::new(cfg.seed, 0);
    let mut xs = Vec::with_capacity(2 * cfg.pairs);
    for p in 0..cfg.pairs {
        let (a, b) = gen_inputs(cfg.input_dim, &master.derive(0).derive(p as u64))?;
        xs.push(a);
        xs.push(b);
    }
    let lim = limit_gram(spec, &xs)?;
    let emp = if cfg.compare_empirical {
        writeln!(stderr, "kernel: averaging {} draws at n={}", cfg.draws, cfg.width)?;
        Some(avg_ntk_gram(spec, &xs, master.derive(1), cfg.draws)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for p in 0..cfg.pairs {
        let (i, j) = (2 * p, 2 * p + 1);
        for (entry, a, b) in [("xx", i, i), ("yy", j, j), ("xy", i, j)] {
            let k = lim.get(a, b);
            // off-diagonal entries can be near zero; use the diagonal scale
            let scale = (lim.get(a, a) * lim.get(b, b)).sqrt();
            let e = emp.as_ref().map(|g| g.get(a, b));
            let rel = e.map(|e| (e - k).abs() / scale);
            rows.push(KernelRow {
                pair: p,
                entry,
                limit: k,
                empirical: e,
                rel_err: rel,
                pass: rel.map(|r| r < cfg.tolerance),
            });
        }
    }
    emit(&rows, cfg.format, &cfg.out, stdout)?;
    let all_pass = rows.iter().all(|r| r.pass != Some(false));
    if let Some(worst) = rows.iter().filter_map(|r| r.rel_err).reduce(f64::max) {
        writeln!(
            stdout,
            "# max relative error {worst:.4} (gate {}): {}",
            cfg.tolerance,
            if all_pass { "pass" } else { "FAIL" }
        )?;
    }
    Ok(Outcome { all_pass })
}

// ---------------------------------------------------------------- regress

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RegressConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    format: Format,
    #[serde(default)]
    threads: Option<usize>,
}

fn regress_config(flags: &RegressFlags, file: Map<String, Value>) -> CliResult<RegressConfig> {
    let known: Vec<String> = match serde_json::to_value(RegressConfig::default())? {
        Value::Object(o) => o.keys().cloned().collect(),
        _ => unreachable!(),
    };
    if let Some(k) = file.keys().find(|k| !known.contains(k)) {
        return Err(usage(format!("config: unknown key {k:?}")));
    }
    let mut v = file;
    let c = &flags.common;
    let mut set = |k: &str, val: Value| {
        v.insert(k.into(), val);
    };
    if let Some(s) = c.seed {
        set("seed", s.into());
    }
    if let Some(t) = c.draws {
        set("T", t.into());
    }
    if let Some(p) = &c.out {
        set("out", serde_json::to_value(p)?);
    }
    if let Some(f) = c.format {
        set("format", serde_json::to_value(f)?);
    }
    if let Some(t) = c.threads {
        set("threads", t.into());
    }
    if let Some(r) = flags.repeats {
        set("repeats", r.into());
    }
    if let Some(j) = flags.jitter {
        set("jitter", j.into());
    }
    if let Some(s) = flags.split {
        set("split", s.into());
    }
    if let Some(path) = &flags.data {
        let mut d = Map::new();
        d.insert("path".into(), serde_json::to_value(path)?);
        if let Some(l) = &flags.label_column {
            d.insert("label_column".into(), l.clone().into());
        }
        let mut wrap = Map::new();
        wrap.insert("path".into(), Value::Object(d));
        v.insert("dataset".into(), Value::Object(wrap));
    } else if flags.classes.is_some() || flags.dim.is_some() || flags.per_class.is_some() || flags.separation.is_some() {
        let mut syn = v
            .get("dataset")
            .and_then(|d| d.get("synthetic"))
            .and_then(|s| s.as_object().cloned())
            .unwrap_or_default();
        for (k, val) in [
            ("classes", flags.classes.map(Value::from)),
            ("dim", flags.dim.map(Value::from)),
            ("per_class", flags.per_class.map(Value::from)),
            ("separation", flags.separation.map(Value::from)),
        ] {
            if let Some(val) = val {
                syn.insert(k.into(), val);
            }
        }
        let mut wrap = Map::new();
        wrap.insert("synthetic".into(), Value::Object(syn));
        v.insert("dataset".into(), Value::Object(wrap));
    }
    if let Some(kind) = flags.arch {
        check_alpha_flags(kind, flags.alpha, false, flags.alpha_over_depth.is_some())?;
        let alpha = flags.alpha.or(default_alpha(kind));
        let fam = family(kind, flags.m.unwrap_or(2), alpha, flags.alpha_over_depth);
        let grid = crate::kreg::ArchGrid {
            family: fam,
            depths: flags.depths.clone().unwrap_or_else(|| vec![3]),
            widths: flags.widths.clone().unwrap_or_default(),
            limit: flags.limit.unwrap_or(flags.widths.is_none()),
        };
        v.insert("archs".into(), Value::Array(vec![serde_json::to_value(grid)?]));
    } else if flags.depths.is_some() || flags.widths.is_some() || flags.limit.is_some() || flags.m.is_some() {
        return Err(usage("grid flags need --arch"));
    }
    let cfg: RegressConfig = serde_json::from_value(Value::Object(v)).map_err(|e| usage(format!("config: {e}")))?;
    cfg.experiment.validate()?;
    Ok(cfg)
}

fn cmd_regress(cfg: &RegressConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<Outcome> {
    writeln!(stderr, "regress: {} grids", cfg.experiment.archs.len())?;
    let report = run_experiment(&cfg.experiment)?;
    let rows: Vec<AccuracyRow> = report.cells.iter().map(AccuracyRow::from).collect();
    match (cfg.format, &cfg.out) {
        (Format::Csv, Some(p)) => {
            let mut buf = Vec::new();
            crate::kreg::write_csv(&report, &mut buf)?;
            std::fs::write(p, buf).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        }
        (Format::Csv, None) => crate::kreg::write_csv(&report, &mut *stdout)?,
        (Format::Jsonl, _) => emit(&rows, cfg.format, &cfg.out, stdout)?,
    }
    writeln!(
        stdout,
        "# train {} / test {} points, {} classes, jitter {}",
        report.train_size, report.test_size, report.class_count, report.jitter_policy
    )?;
    for r in &rows {
        writeln!(
            stdout,
            "# {} n={} L={} T={}: {:.4} ± {:.4} over {}",
            r.kind, r.n, r.depth, r.draws, r.mean_accuracy, r.std_accuracy, r.repeat_count
        )?;
    }
    Ok(Outcome { all_pass: true })
}

// ---------------------------------------------------------------- dispatch

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(usage("threads must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> CliResult<Outcome> {
    let name = cmd.name();
    match cmd {
        Command::Variance(f) => {
            let mut cfg: VarianceConfig = merge(&f, read_config(f.common.config.as_deref(), name)?)?;
            cfg.finish()?;
            print_effective(name, &cfg, stdout)?;
            with_threads(cfg.threads, || cmd_variance(&cfg, stdout, stderr))?
        }
        Command::Duality(f) => {
            let mut cfg: DualityConfig = merge(&f, read_config(f.common.config.as_deref(), name)?)?;
            let spec = cfg.finish()?;
            print_effective(name, &cfg, stdout)?;
            with_threads(cfg.threads, || cmd_duality(&cfg, &spec, stdout, stderr))?
        }
        Command::Moments(f) => {
            let cfg: MomentsConfig = merge(&f, read_config(f.common.config.as_deref(), name)?)?;
            print_effective(name, &cfg, stdout)?;
            with_threads(cfg.threads, || cmd_moments(&cfg, stdout, stderr))?
        }
        Command::Kernel(f) => {
            let mut cfg: KernelConfig = merge(&f, read_config(f.common.config.as_deref(), name)?)?;
            check_alpha_flags(cfg.arch, cfg.alpha, cfg.alphas.is_some(), false)?;
            if let Some(a) = &cfg.alphas {
                cfg.depth = a.len();
            } else if cfg.alpha.is_none() {
                cfg.alpha = default_alpha(cfg.arch);
            }
            let spec = single_spec(cfg.arch, cfg.input_dim, cfg.depth, cfg.width, cfg.m, cfg.alpha, &cfg.alphas)?;
            print_effective(name, &cfg, stdout)?;
            with_threads(cfg.threads, || cmd_kernel(&cfg, &spec, stdout, stderr))?
        }
        Command::Regress(f) => {
            let cfg = regress_config(&f, read_config(f.common.config.as_deref(), name)?)?;
            print_effective(name, &cfg, stdout)?;
            with_threads(cfg.threads, || cmd_regress(&cfg, stdout, stderr))?
        }
    }
}

/// Runs the CLI with explicit output sinks and returns the exit code.
pub fn run_with<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(o) if o.all_pass => 0,
        Ok(_) => 1,
        Err(CliError(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            2
        }
    }
}

/// Runs the CLI on the process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    let code = run_with(args, &mut out, &mut err);
    let _ = out.flush();
    code
}
