//! Per-glimpse classifiers, the concatenation, individual and ensemble
//! losses, and prediction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rra_tensor::{Graph, Mode, Tensor, Var, LOG_FLOOR};

use crate::error::{Error, Result};

/// `s = W (dropout x̂) + b` and `ŷ = softmax(s)`, row-wise over `[B, c]`.
pub fn glimpse_score<R: Rng + ?Sized>(
    g: &mut Graph,
    xhat: Var,
    w: Var,
    b: Var,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let x = g.dropout(xhat, dropout, mode, rng)?;
    let s = g.linear(x, w, Some(b))?;
    let y = g.softmax(s)?;
    Ok((s, y))
}

fn require_glimpses(vars: &[Var]) -> Result<()> {
    if vars.is_empty() {
        return Err(Error::Config("at least one glimpse is required".into()));
    }
    Ok(())
}

/// Cross entropy of `softmax(Σ_k s^k)`.
pub fn concat_loss(g: &mut Graph, scores: &[Var], targets: &Tensor) -> Result<Var> {
    require_glimpses(scores)?;
    let sum = g.add_all(scores)?;
    let p = g.softmax(sum)?;
    Ok(g.cross_entropy(p, targets.clone())?)
}

/// `Σ_k CE(ŷ^k)`.
pub fn individual_loss(g: &mut Graph, probs: &[Var], targets: &Tensor) -> Result<Var> {
    require_glimpses(probs)?;
    let terms = probs
        .iter()
        .map(|&p| g.cross_entropy(p, targets.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(g.add_all(&terms)?)
}

/// Cross entropy of the mean glimpse distribution.
pub fn ensemble_loss(g: &mut Graph, probs: &[Var], targets: &Tensor) -> Result<Var> {
    require_glimpses(probs)?;
    let sum = g.add_all(probs)?;
    let mean = g.scale(sum, 1.0 / probs.len() as f64)?;
    Ok(g.cross_entropy(mean, targets.clone())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Concat,
    Individual,
    Ensemble,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Concat, LossKind::Individual, LossKind::Ensemble];

    pub fn token(self) -> &'static str {
        match self {
            LossKind::Concat => "lc",
            LossKind::Individual => "li",
            LossKind::Ensemble => "le",
        }
    }
}

/// Enabled losses with their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub lc: Option<f64>,
    pub li: Option<f64>,
    pub le: Option<f64>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            lc: Some(1.0),
            li: Some(1.0),
            le: Some(1.0),
        }
    }
}

impl LossSpec {
    pub fn weight(&self, kind: LossKind) -> Option<f64> {
        match kind {
            LossKind::Concat => self.lc,
            LossKind::Individual => self.li,
            LossKind::Ensemble => self.le,
        }
    }

    pub fn enabled(&self) -> impl Iterator<Item = (LossKind, f64)> + '_ {
        LossKind::ALL
            .into_iter()
            .filter_map(|k| self.weight(k).map(|w| (k, w)))
    }

    /// All seven non-empty combinations, singles first.
    pub fn combinations() -> Vec<LossSpec> {
        ["lc", "li", "le", "lc+li", "lc+le", "li+le", "lc+li+le"]
            .iter()
            .map(|s| s.parse().expect("valid token list"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled().next().is_none() {
            return Err(Error::Config("no loss enabled".into()));
        }
        if self.enabled().any(|(_, w)| !w.is_finite() || w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.enabled().map(|(k, _)| k.token()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Parses tokens such as `lc+li+le`; weights default to 1.
impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = LossSpec {
            lc: None,
            li: None,
            le: None,
        };
        for tok in s.split('+').map(str::trim) {
            let slot = match tok.to_ascii_lowercase().as_str() {
                "lc" => &mut spec.lc,
                "li" => &mut spec.li,
                "le" => &mut spec.le,
                _ => return Err(Error::Config(format!("unknown loss {tok:?} (expected lc, li, le)"))),
            };
            *slot = Some(1.0);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// The summed objective and the value of each enabled term.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub terms: Vec<(LossKind, f64)>,
}

pub fn total_loss(g: &mut Graph, spec: &LossSpec, scores: &[Var], probs: &[Var], targets: &Tensor) -> Result<LossOutput> {
    spec.validate()?;
    let mut weighted = Vec::new();
    let mut terms = Vec::new();
    for (kind, w) in spec.enabled() {
        let l = match kind {
            LossKind::Concat => concat_loss(g, scores, targets)?,
            LossKind::Individual => individual_loss(g, probs, targets)?,
            LossKind::Ensemble => ensemble_loss(g, probs, targets)?,
        };
        terms.push((kind, g.value(l).item()));
        weighted.push(if w == 1.0 { l } else { g.scale(l, w)? });
    }
    Ok(LossOutput {
        total: g.add_all(&weighted)?,
        terms,
    })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} >= {classes} classes")));
        }
        t.data_mut()[r * classes + l] = 1.0;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PredictMode {
    #[default]
    Ensemble,
    Concat,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Class distributions `[B, C]` and predicted classes from per-glimpse raw
/// scores (each `[B, C]`).
pub fn predict(scores: &[Tensor], mode: PredictMode) -> Result<(Tensor, Vec<usize>)> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Config("at least one glimpse is required".into()))?;
    if scores.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Data("glimpse scores differ in shape".into()));
    }
    let (rows, cols) = first.as_matrix();
    let k = scores.len() as f64;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let dst = &mut out[r * cols..(r + 1) * cols];
        match mode {
            PredictMode::Ensemble => {
                for s in scores {
                    for (d, p) in dst.iter_mut().zip(softmax_row(&s.data()[r * cols..(r + 1) * cols])) {
                        *d += p / k;
                    }
                }
            }
            PredictMode::Concat => {
                let mut sum = vec![0.0; cols];
                for s in scores {
                    for (a, b) in sum.iter_mut().zip(&s.data()[r * cols..(r + 1) * cols]) {
                        *a += b;
                    }
                }
                dst.copy_from_slice(&softmax_row(&sum));
            }
        }
    }
    let classes = out.chunks(cols.max(1)).map(argmax).collect();
    Ok((Tensor::new(&[rows, cols], out)?, classes))
}

/// `-log(max(p, floor))` of the target class, for callers working with
/// plain tensors.
pub fn nll(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}
