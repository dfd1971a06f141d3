//! Angle-margin alignment loss, cross-entropy and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleLossParams {
    pub tau_l: f64,
    pub tau_s: f64,
}

impl Default for AngleLossParams {
    fn default() -> Self {
        Self { tau_l: 1.0, tau_s: 0.85 }
    }
}

impl AngleLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_s && self.tau_s <= self.tau_l && self.tau_l <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < tau_s <= tau_l <= 1, got tau_s={} tau_l={}",
                self.tau_s, self.tau_l
            )));
        }
        Ok(())
    }
}

/// The angle loss is undefined for a batch drawn from a single environment.
#[derive(Debug)]
pub enum AngleLoss<'t> {
    Value(Var<'t>),
    NotApplicable,
}

impl<'t> AngleLoss<'t> {
    pub fn value(&self) -> Option<&Var<'t>> {
        match self {
            AngleLoss::Value(v) => Some(v),
            AngleLoss::NotApplicable => None,
        }
    }
}

/// Index lists describing which squared terms a batch contributes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnglePairs {
    /// Flat `a * B + b` indices into a Gram matrix for live/live cross-env pairs.
    pub live: Vec<usize>,
    pub spoof: Vec<usize>,
    /// Same-label cross-env sample pairs `(a, b)`.
    pub same_label: Vec<(usize, usize)>,
}

impl AnglePairs {
    pub fn new(labels: &[u8], envs: &[usize]) -> Self {
        let n = labels.len();
        let mut pairs = Self::default();
        for a in 0..n {
            for b in a + 1..n {
                if envs[a] == envs[b] || labels[a] != labels[b] {
                    continue;
                }
                if labels[a] == 1 {
                    pairs.live.push(a * n + b);
                } else {
                    pairs.spoof.push(a * n + b);
                }
                pairs.same_label.push((a, b));
            }
        }
        pairs
    }

    /// Number of squared terms for `m` modalities.
    pub fn count(&self, m: usize) -> usize {
        m * (self.live.len() + self.spoof.len()) + m * (m - 1) / 2 * self.same_label.len()
    }
}

/// Sum of `(x - c)^2` over a vector.
fn sq_dev_sum<'t>(x: &Var<'t>, c: f64) -> Result<Var<'t>> {
    x.add_scalar(-c)?.square()?.sum()
}

fn row_dots<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    let ones = a.tape().leaf(Tensor::ones(&[s[1], 1]));
    a.mul(b)?.matmul(&ones)?.reshape(&[s[0]])
}

/// `features[m]` is the `(B, d)` top-level feature matrix of modality `m`.
///
/// For every pair of samples from different environments with the same label,
/// each modality contributes `(cos - tau_l)^2` (live) or `(cos - tau_s)^2`
/// (spoof), and each modality pair `(i, j)` contributes the squared gap
/// between the two samples' `cos(z_i, z_j)`. The result is the mean over all
/// contributing terms.
pub fn angle_loss<'t>(
    features: &[Var<'t>],
    labels: &[u8],
    envs: &[usize],
    params: &AngleLossParams,
) -> Result<AngleLoss<'t>> {
    params.validate()?;
    let Some(first) = features.first() else {
        return Err(Error::InvalidArgument("angle_loss needs at least one modality".into()));
    };
    let n = labels.len();
    if envs.len() != n || features.iter().any(|f| f.shape().len() != 2 || f.shape()[0] != n) {
        return shape_err("angle_loss", format!("{} labels, {} envs, features {:?}", n, envs.len(), first.shape()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let mut distinct = envs.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(AngleLoss::NotApplicable);
    }
    let pairs = AnglePairs::new(labels, envs);
    let count = pairs.count(features.len());
    if count == 0 {
        return Ok(AngleLoss::NotApplicable);
    }
    let unit: Vec<Var<'t>> = features.iter().map(|f| f.normalize_rows()).collect::<Result<_>>()?;
    let mut terms: Vec<Var<'t>> = Vec::new();
    for z in &unit {
        let gram = z.matmul(&z.t()?)?;
        if !pairs.live.is_empty() {
            terms.push(sq_dev_sum(&gram.gather(&pairs.live)?, params.tau_l)?);
        }
        if !pairs.spoof.is_empty() {
            terms.push(sq_dev_sum(&gram.gather(&pairs.spoof)?, params.tau_s)?);
        }
    }
    if !pairs.same_label.is_empty() {
        let left: Vec<usize> = pairs.same_label.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.same_label.iter().map(|p| p.1).collect();
        for i in 0..unit.len() {
            for j in i + 1..unit.len() {
                let c = row_dots(&unit[i], &unit[j])?;
                terms.push(c.gather(&left)?.sub(&c.gather(&right)?)?.square()?.sum()?);
            }
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(AngleLoss::Value(total.scale(1.0 / count as f64)?))
}

/// Mean softmax cross-entropy of `(B, C)` logits.
pub fn ce_loss<'t>(logits: &Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return shape_err("ce_loss", format!("logits {s:?} for {} labels", labels.len()));
    }
    if labels.iter().any(|&y| y as usize >= s[1]) {
        return Err(Error::InvalidArgument(format!("label out of range for {} classes", s[1])));
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * s[1] + y as usize).collect();
    logits.log_softmax_rows()?.gather(&idx)?.mean()?.scale(-1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mi: f64,
    pub lambda_angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mi: 0.1, lambda_angle: 0.3 }
    }
}

/// `ce + lambda_mi * mi + lambda_angle * angle`; a missing term is dropped.
pub fn total_loss<'t>(
    ce: &Var<'t>,
    mi: Option<&Var<'t>>,
    angle: &AngleLoss<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    if weights.lambda_mi < 0.0 || weights.lambda_angle < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss coefficients must be non-negative, got {} and {}",
            weights.lambda_mi, weights.lambda_angle
        )));
    }
    let mut total = *ce;
    if let Some(mi) = mi {
        if weights.lambda_mi != 0.0 {
            total = total.add(&mi.scale(weights.lambda_mi)?)?;
        }
    }
    if let (Some(a), true) = (angle.value(), weights.lambda_angle != 0.0) {
        total = total.add(&a.scale(weights.lambda_angle)?)?;
    }
    Ok(total)
}

/// Convenience for plain numbers: the total on a throwaway tape.
pub fn total_value(ce: f64, mi: f64, angle: Option<f64>, weights: &LossWeights) -> Result<f64> {
    let tape = Tape::new();
    let c = tape.leaf(Tensor::scalar(ce));
    let m = tape.leaf(Tensor::scalar(mi));
    let a = match angle {
        Some(a) => AngleLoss::Value(tape.leaf(Tensor::scalar(a))),
        None => AngleLoss::NotApplicable,
    };
    total_loss(&c, Some(&m), &a, weights)?.item()
}
