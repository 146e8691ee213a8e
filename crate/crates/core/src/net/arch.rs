use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Vanilla,
    ResNet,
    DenseNet,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Vanilla => "vanilla",
            ArchKind::ResNet => "resnet",
            ArchKind::DenseNet => "densenet",
        })
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ArchKind::Vanilla),
            "resnet" => Ok(ArchKind::ResNet),
            "densenet" => Ok(ArchKind::DenseNet),
            other => Err(Error::InvalidSpec(format!("unknown kind {other:?}"))),
        }
    }
}

/// Branch scalings: one per block for ResNets, a single value for DenseNets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alphas {
    Single(f64),
    PerLayer(Vec<f64>),
}

impl Default for Alphas {
    fn default() -> Self {
        Alphas::PerLayer(Vec::new())
    }
}

/// Position of one body weight matrix.
///
/// ResNet: block `layer` in 1..=L, branch layer `sublayer` in 1..=m.
/// DenseNet: `W^{layer, sublayer}` with 0 <= sublayer < layer <= L.
/// Vanilla: hidden layer `layer` in 1..=L, `sublayer` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WeightIndex {
    pub layer: usize,
    pub sublayer: usize,
}

impl WeightIndex {
    pub const fn new(layer: usize, sublayer: usize) -> Self {
        WeightIndex { layer, sublayer }
    }
}

impl fmt::Display for WeightIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.sublayer)
    }
}

/// Any trainable matrix: the input projection, a body matrix, or the output row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixId {
    Initial,
    Body(WeightIndex),
    Final,
}

impl From<WeightIndex> for MatrixId {
    fn from(k: WeightIndex) -> Self {
        MatrixId::Body(k)
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixId::Initial => f.write_str("initial"),
            MatrixId::Body(k) => write!(f, "{},{}", k.layer, k.sublayer),
            MatrixId::Final => f.write_str("final"),
        }
    }
}

impl std::str::FromStr for MatrixId {
    type Err = Error;
    /// Accepts `initial`, `final`, `l,h` or a bare `l`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "initial" => return Ok(MatrixId::Initial),
            "final" => return Ok(MatrixId::Final),
            _ => {}
        }
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidIndex(format!("cannot parse {s:?}")))
        };
        let mut parts = t.split(',');
        let layer = parse(parts.next().unwrap_or(""))?;
        let sublayer = match parts.next() {
            Some(p) => parse(p)?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(Error::InvalidIndex(format!("cannot parse {s:?}")));
        }
        Ok(MatrixId::Body(WeightIndex::new(layer, sublayer)))
    }
}

/// Network description. Widths are constant: every hidden vector has `width` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub branch_depth: usize,
    #[serde(default)]
    pub alphas: Alphas,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<WeightIndex>,
}

/// Validates a spec and returns it unchanged.
pub fn build_arch(spec: ArchitectureSpec) -> Result<ArchitectureSpec> {
    spec.validate()?;
    Ok(spec)
}

impl ArchitectureSpec {
    pub fn vanilla(input_dim: usize, depth: usize, width: usize) -> Result<Self> {
        build_arch(ArchitectureSpec {
            kind: ArchKind::Vanilla,
            input_dim,
            depth,
            width,
            branch_depth: 0,
            alphas: Alphas::default(),
            reduction: None,
        })
    }

    pub fn resnet(
        input_dim: usize,
        width: usize,
        branch_depth: usize,
        alphas: Vec<f64>,
    ) -> Result<Self> {
        build_arch(ArchitectureSpec {
            kind: ArchKind::ResNet,
            input_dim,
            depth: alphas.len(),
            width,
            branch_depth,
            alphas: Alphas::PerLayer(alphas),
            reduction: None,
        })
    }

    pub fn densenet(input_dim: usize, depth: usize, width: usize, alpha: f64) -> Result<Self> {
        build_arch(ArchitectureSpec {
            kind: ArchKind::DenseNet,
            input_dim,
            depth,
            width,
            branch_depth: 0,
            alphas: Alphas::Single(alpha),
            reduction: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1".into());
        }
        if self.width == 0 {
            return bad("width must be at least 1".into());
        }
        match self.kind {
            // depth 0 is the two-matrix linear model
            ArchKind::Vanilla => {}
            ArchKind::ResNet => {
                if self.depth == 0 {
                    return bad("depth must be at least 1".into());
                }
                if self.branch_depth < 2 {
                    return bad(format!("branch_depth must be at least 2, got {}", self.branch_depth));
                }
                match &self.alphas {
                    Alphas::PerLayer(a) if a.len() == self.depth => {
                        if let Some((i, v)) =
                            a.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0))
                        {
                            return bad(format!("alpha_{} = {v} must be positive", i + 1));
                        }
                    }
                    Alphas::PerLayer(a) => {
                        return bad(format!("expected {} alphas, got {}", self.depth, a.len()))
                    }
                    Alphas::Single(_) => {
                        return bad("resnet needs one alpha per block".into());
                    }
                }
            }
            ArchKind::DenseNet => {
                if self.depth == 0 {
                    return bad("depth must be at least 1".into());
                }
                match self.alphas {
                    Alphas::Single(a) if a.is_finite() && a > 0.0 => {}
                    Alphas::Single(a) => return bad(format!("alpha = {a} must be positive")),
                    Alphas::PerLayer(_) => return bad("densenet takes a single alpha".into()),
                }
            }
        }
        if let Some(k) = self.reduction {
            self.check_index(k)?;
        }
        Ok(())
    }

    pub fn check_index(&self, k: WeightIndex) -> Result<()> {
        let ok = match self.kind {
            ArchKind::Vanilla => (1..=self.depth).contains(&k.layer) && k.sublayer == 0,
            ArchKind::ResNet => {
                (1..=self.depth).contains(&k.layer) && (1..=self.branch_depth).contains(&k.sublayer)
            }
            ArchKind::DenseNet => (1..=self.depth).contains(&k.layer) && k.sublayer < k.layer,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIndex(format!("{k} is outside a {} of depth {}", self.kind, self.depth)))
        }
    }

    pub fn check_matrix(&self, id: MatrixId) -> Result<()> {
        match id {
            MatrixId::Body(k) => self.check_index(k),
            _ => Ok(()),
        }
    }

    /// ResNet block scaling `α_l`, l in 1..=L.
    pub fn alpha(&self, l: usize) -> f64 {
        match &self.alphas {
            Alphas::PerLayer(a) => a[l - 1],
            Alphas::Single(a) => *a,
        }
    }

    /// DenseNet scaling `α`.
    pub fn dense_alpha(&self) -> f64 {
        match &self.alphas {
            Alphas::Single(a) => *a,
            Alphas::PerLayer(a) => a[0],
        }
    }

    pub fn body_len(&self) -> usize {
        let l = self.depth;
        match self.kind {
            ArchKind::Vanilla => l,
            ArchKind::ResNet => l * self.branch_depth,
            ArchKind::DenseNet => l * (l + 1) / 2,
        }
    }

    /// Body indices in storage order (lexicographic in `(layer, sublayer)`).
    pub fn body_indices(&self) -> Vec<WeightIndex> {
        let mut out = Vec::with_capacity(self.body_len());
        for l in 1..=self.depth {
            match self.kind {
                ArchKind::Vanilla => out.push(WeightIndex::new(l, 0)),
                ArchKind::ResNet => {
                    out.extend((1..=self.branch_depth).map(|h| WeightIndex::new(l, h)))
                }
                ArchKind::DenseNet => out.extend((0..l).map(|h| WeightIndex::new(l, h))),
            }
        }
        out
    }

    /// Every trainable matrix: initial, body in storage order, final.
    pub fn matrix_ids(&self) -> Vec<MatrixId> {
        let mut ids = vec![MatrixId::Initial];
        ids.extend(self.body_indices().into_iter().map(MatrixId::Body));
        ids.push(MatrixId::Final);
        ids
    }

    /// Storage slot of a (valid) body index.
    pub fn slot(&self, k: WeightIndex) -> usize {
        match self.kind {
            ArchKind::Vanilla => k.layer - 1,
            ArchKind::ResNet => (k.layer - 1) * self.branch_depth + (k.sublayer - 1),
            ArchKind::DenseNet => k.layer * (k.layer - 1) / 2 + k.sublayer,
        }
    }

    /// The network computing the reduced output for `k`: all connections that
    /// bypass `W^k` are removed. Vanilla networks are returned unchanged.
    pub fn reduce(&self, k: WeightIndex) -> Result<ArchitectureSpec> {
        self.check_index(k)?;
        let mut out = self.clone();
        out.reduction = match self.kind {
            ArchKind::Vanilla => None,
            _ => Some(k),
        };
        Ok(out)
    }

    /// Like [`reduce`](Self::reduce); the projections have no bypassing paths.
    pub fn reduce_matrix(&self, id: MatrixId) -> Result<ArchitectureSpec> {
        match id {
            MatrixId::Body(k) => self.reduce(k),
            _ => {
                let mut out = self.clone();
                out.reduction = None;
                Ok(out)
            }
        }
    }

    /// Whether ResNet block `l` keeps its identity skip.
    pub fn has_skip(&self, l: usize) -> bool {
        self.reduction.is_none_or(|k| k.layer != l)
    }

    /// DenseNet layer `l` inputs `q^h` for `h` in the returned range, or `None`
    /// when the layer is pruned from a reduced network.
    pub fn dense_sources(&self, l: usize) -> Option<Range<usize>> {
        match self.reduction {
            None => Some(0..l),
            Some(k) if l == k.layer => Some(k.sublayer..k.sublayer + 1),
            Some(k) if l > k.layer => Some(k.layer..l),
            Some(k) if l <= k.sublayer => Some(0..l),
            Some(_) => None,
        }
    }

    /// Short alpha description used in reports.
    pub fn alpha_summary(&self) -> String {
        match self.kind {
            ArchKind::Vanilla => "-".into(),
            ArchKind::DenseNet => format!("{}", self.dense_alpha()),
            ArchKind::ResNet => match &self.alphas {
                Alphas::PerLayer(a) if a.iter().all(|v| *v == a[0]) => {
                    format!("{}x{}", a.len(), a[0])
                }
                Alphas::PerLayer(a) => format!("sum={}", a.iter().sum::<f64>()),
                Alphas::Single(a) => format!("{a}"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_examples() {
        assert!(ArchitectureSpec::resnet(4, 8, 2, vec![0.1 / 3.0; 3]).is_ok());
        assert!(ArchitectureSpec::densenet(4, 3, 8, 0.5).is_ok());
        assert!(ArchitectureSpec::vanilla(4, 2, 8).is_ok());
    }

    #[test]
    fn invalid_examples() {
        let e = ArchitectureSpec::resnet(4, 8, 2, vec![0.1, 0.0, 0.1]).unwrap_err();
        assert!(matches!(e, Error::InvalidSpec(ref m) if m.contains("alpha_2")));
        assert!(ArchitectureSpec::resnet(4, 8, 1, vec![0.1]).is_err());
        assert!(ArchitectureSpec::densenet(4, 3, 8, -0.5).is_err());
        assert!(ArchitectureSpec::densenet(4, 0, 8, 0.5).is_err());
        assert!(ArchitectureSpec::vanilla(0, 2, 8).is_err());
        assert!(ArchitectureSpec::vanilla(3, 2, 0).is_err());
    }

    #[test]
    fn dense_keys_and_slots() {
        let s = ArchitectureSpec::densenet(2, 3, 4, 0.5).unwrap();
        let keys: Vec<(usize, usize)> =
            s.body_indices().iter().map(|k| (k.layer, k.sublayer)).collect();
        assert_eq!(keys, vec![(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]);
        for (i, k) in s.body_indices().into_iter().enumerate() {
            assert_eq!(s.slot(k), i);
        }
        let r = ArchitectureSpec::resnet(2, 4, 3, vec![0.1; 2]).unwrap();
        for (i, k) in r.body_indices().into_iter().enumerate() {
            assert_eq!(r.slot(k), i);
        }
    }

    #[test]
    fn reductions() {
        let v = ArchitectureSpec::vanilla(3, 3, 4).unwrap();
        assert_eq!(v.reduce(WeightIndex::new(2, 0)).unwrap(), v);
        assert!(v.reduce(WeightIndex::new(4, 0)).is_err());

        let d = ArchitectureSpec::densenet(3, 3, 4, 0.5).unwrap();
        let r = d.reduce(WeightIndex::new(2, 1)).unwrap();
        assert_eq!(r.dense_sources(1), Some(0..1));
        assert_eq!(r.dense_sources(2), Some(1..2));
        assert_eq!(r.dense_sources(3), Some(2..3));
        let r = d.reduce(WeightIndex::new(3, 0)).unwrap();
        assert_eq!(r.dense_sources(1), None);
        assert_eq!(r.dense_sources(2), None);
        assert_eq!(r.dense_sources(3), Some(0..1));
        assert!(d.reduce(WeightIndex::new(2, 2)).is_err());

        let res = ArchitectureSpec::resnet(3, 4, 2, vec![0.2; 3]).unwrap();
        let r = res.reduce(WeightIndex::new(2, 1)).unwrap();
        assert!(r.has_skip(1) && !r.has_skip(2) && r.has_skip(3));
    }

    #[test]
    fn json_round_trip() {
        let s = ArchitectureSpec::resnet(4, 8, 2, vec![0.3, 0.3])
            .unwrap()
            .reduce(WeightIndex::new(1, 2))
            .unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"kind\":\"resnet\""));
        assert_eq!(serde_json::from_str::<ArchitectureSpec>(&j).unwrap(), s);

        let d: ArchitectureSpec = serde_json::from_str(
            r#"{"kind":"densenet","input_dim":2,"depth":3,"width":5,"alphas":0.5}"#,
        )
        .unwrap();
        assert_eq!(d.alphas, Alphas::Single(0.5));
        assert!(build_arch(d).is_ok());
    }

    #[test]
    fn parse_matrix_ids() {
        assert_eq!("2,1".parse::<MatrixId>().unwrap(), MatrixId::Body(WeightIndex::new(2, 1)));
        assert_eq!("3".parse::<MatrixId>().unwrap(), MatrixId::Body(WeightIndex::new(3, 0)));
        assert_eq!("final".parse::<MatrixId>().unwrap(), MatrixId::Final);
        assert!("x,1".parse::<MatrixId>().is_err());
    }
}
