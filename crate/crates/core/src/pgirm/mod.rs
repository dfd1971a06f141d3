//! MI-guided gradient surgery, per-environment hyperplanes with the
//! projected-gradient update, and mean-hyperplane scoring.

pub mod checkpoint;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Where gradient surgery is applied during backpropagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReGradMode {
    /// On the two input streams of every MIM module.
    #[default]
    PerModule,
    /// Once per modality pair on the patch-embedding outputs, using MI tokens
    /// averaged over layers.
    Accumulated,
    Disabled,
}

/// Which of the surgery rules fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// `g1 . g2 < 0`, `mi1 <= mi2`
    ConflictFirstWeaker,
    /// `g1 . g2 > 0`, `mi1 <= mi2`
    AgreeFirstWeaker,
    /// `g1 . g2 < 0`, `mi1 > mi2`
    ConflictSecondWeaker,
    /// `g1 . g2 > 0`, `mi1 > mi2`
    AgreeSecondWeaker,
    /// `g1 . g2 == 0`
    Orthogonal,
    /// A projection needed a zero norm; the plain sum was returned.
    Degenerate,
}

/// Gradient modulation by MI-token intensity. `mi1`, `mi2` are reliability
/// weights in (0, 1).
pub fn regrad(g1: &Tensor, g2: &Tensor, mi1: f64, mi2: f64) -> Result<(Tensor, Branch)> {
    if g1.shape() != g2.shape() {
        return shape_err("regrad", format!("{:?} vs {:?}", g1.shape(), g2.shape()));
    }
    if !g1.is_finite() || !g2.is_finite() || !mi1.is_finite() || !mi2.is_finite() {
        return Err(Error::NonFinite { op: "regrad" });
    }
    let dot = g1.dot(g2)?;
    let plain_sum = || {
        let mut s = g1.clone();
        s.add_assign_raw(g2);
        s
    };
    if dot == 0.0 {
        let mut out = g1.clone();
        out.axpy(mi1.max(mi2), g2)?;
        return Ok((out, Branch::Orthogonal));
    }
    let first_weaker = mi1 <= mi2;
    let denom = if first_weaker { g1.dot(g1)? } else { g2.dot(g2)? };
    if denom == 0.0 || !denom.is_finite() {
        log::warn!("regrad: zero-norm projection, falling back to g1 + g2");
        return Ok((plain_sum(), Branch::Degenerate));
    }
    let r = dot / denom;
    let out = match (dot < 0.0, first_weaker) {
        (true, true) => {
            // g1 + r g1 mi2
            g1.scaled(1.0 + r * mi2)
        }
        (false, true) => {
            // g1 + (g2 - r g1) mi2
            let mut o = g1.scaled(1.0 - r * mi2);
            o.axpy(mi2, g2)?;
            o
        }
        (true, false) => {
            // r g2 mi1 + g2
            g2.scaled(1.0 + r * mi1)
        }
        (false, false) => {
            // (g1 - r g2) mi1 + g2
            let mut o = g2.scaled(1.0 - r * mi1);
            o.axpy(mi1, g1)?;
            o
        }
    };
    let branch = match (dot < 0.0, first_weaker) {
        (true, true) => Branch::ConflictFirstWeaker,
        (false, true) => Branch::AgreeFirstWeaker,
        (true, false) => Branch::ConflictSecondWeaker,
        (false, false) => Branch::AgreeSecondWeaker,
    };
    Ok((out.ensure_finite("regrad")?, branch))
}

/// Applies surgery to a stream pair in place: the stream with the weaker
/// squashed MI token receives the modulated gradient, the stronger one keeps
/// its own. Ties count the first stream as weaker.
pub fn regrad_pair(g1: &mut Tensor, g2: &mut Tensor, raw_mi1: f64, raw_mi2: f64) -> Branch {
    let (mi1, mi2) = (squash(raw_mi1), squash(raw_mi2));
    match regrad(g1, g2, mi1, mi2) {
        Ok((out, branch)) => {
            if mi1 <= mi2 {
                *g1 = out;
            } else {
                *g2 = out;
            }
            branch
        }
        Err(e) => {
            log::warn!("regrad skipped: {e}");
            Branch::Degenerate
        }
    }
}

/// Maps a raw MI token to (0, 1).
pub fn squash(raw: f64) -> f64 {
    crate::tensor::sigmoid(raw)
}

/// One classifier `beta_e` (weights then bias) per training environment.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperplaneSet {
    envs: Vec<usize>,
    betas: Vec<Tensor>,
}

impl HyperplaneSet {
    pub fn new(envs: Vec<usize>, betas: Vec<Tensor>) -> Result<Self> {
        if envs.len() != betas.len() {
            return shape_err("HyperplaneSet", format!("{} envs, {} betas", envs.len(), betas.len()));
        }
        if let Some(b0) = betas.first() {
            if betas.iter().any(|b| b.shape() != b0.shape() || b.ndim() != 1) {
                return shape_err("HyperplaneSet", "betas must share one 1-D shape");
            }
        }
        let mut sorted = envs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != envs.len() {
            return Err(Error::InvalidArgument("duplicate environment id".into()));
        }
        Ok(Self { envs, betas })
    }

    /// All-zero hyperplanes for features of width `dim`.
    pub fn zeros(envs: Vec<usize>, dim: usize) -> Self {
        let betas = envs.iter().map(|_| Tensor::zeros(&[dim + 1])).collect();
        Self { envs, betas }
    }

    pub fn envs(&self) -> &[usize] {
        &self.envs
    }

    pub fn betas(&self) -> &[Tensor] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Width of each beta, including the bias entry.
    pub fn width(&self) -> usize {
        self.betas.first().map_or(0, Tensor::numel)
    }

    pub fn index_of(&self, env: usize) -> Option<usize> {
        self.envs.iter().position(|&e| e == env)
    }

    /// Arithmetic mean of the betas, computed on every call.
    pub fn mean(&self) -> Result<Tensor> {
        let Some(first) = self.betas.first() else {
            return Err(Error::InvalidArgument("empty hyperplane set".into()));
        };
        let mut acc = Tensor::zeros(first.shape());
        for b in &self.betas {
            acc.add_assign_raw(b);
        }
        Ok(acc.scaled(1.0 / self.betas.len() as f64))
    }

    /// Largest Euclidean distance between any two betas.
    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.betas.len() {
            for j in i + 1..self.betas.len() {
                best = best.max(distance(&self.betas[i], &self.betas[j]));
            }
        }
        best
    }
}

pub fn distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(1/|E|) sum_e beta_e . [feature; 1]`; higher means more live.
pub fn inference_score(feature: &Tensor, betas: &HyperplaneSet) -> Result<f64> {
    if betas.is_empty() {
        return Err(Error::InvalidArgument("empty hyperplane set".into()));
    }
    if feature.numel() + 1 != betas.width() {
        return shape_err(
            "inference_score",
            format!("feature width {} vs beta width {}", feature.numel(), betas.width()),
        );
    }
    let mean = betas.mean()?;
    let d = feature.numel();
    let w = &mean.data()[..d];
    Ok(w.iter().zip(feature.data()).map(|(a, b)| a * b).sum::<f64>() + mean.data()[d])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgIrmConfig {
    pub alpha: f64,
    /// Projection is inactive while `epoch <= t_alpha`.
    pub t_alpha: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for PgIrmConfig {
    fn default() -> Self {
        Self { alpha: 0.9, t_alpha: 5, lr: 5e-4, epochs: 50 }
    }
}

impl PgIrmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.t_alpha >= self.epochs {
            return Err(Error::Config(format!(
                "t_alpha ({}) must be below the epoch count ({})",
                self.t_alpha, self.epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// `alpha'` for a given epoch.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch > self.t_alpha {
            self.alpha
        } else {
            1.0
        }
    }
}

/// What happened to one environment's beta in a step.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRecord {
    pub env: usize,
    /// Environment whose current beta was the projection target.
    pub target: Option<usize>,
    pub alpha: f64,
    /// `||beta_tilde - beta_target||` before mixing.
    pub tilde_distance: f64,
    /// `||beta_new - beta_target||`.
    pub new_distance: f64,
}

/// One projected-gradient update of every beta. `grads[k]` belongs to
/// `betas.envs()[k]`. Targets are chosen among the pre-step betas.
pub fn pgirm_step(
    betas: &HyperplaneSet,
    grads: &[Tensor],
    lr: f64,
    alpha: f64,
) -> Result<(HyperplaneSet, Vec<ProjectionRecord>)> {
    if grads.len() != betas.len() {
        return shape_err("pgirm_step", format!("{} grads for {} betas", grads.len(), betas.len()));
    }
    let mut out = Vec::with_capacity(betas.len());
    let mut records = Vec::with_capacity(betas.len());
    for (k, (beta, g)) in betas.betas.iter().zip(grads).enumerate() {
        if g.shape() != beta.shape() {
            return shape_err("pgirm_step", format!("grad {:?} for beta {:?}", g.shape(), beta.shape()));
        }
        let mut tilde = beta.clone();
        tilde.axpy(-lr, g)?;
        let target = (0..betas.len())
            .filter(|&j| j != k)
            .map(|j| (j, distance(&tilde, &betas.betas[j])))
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            });
        match target {
            Some((j, dist)) => {
                let mut new = tilde.scaled(alpha);
                new.axpy(1.0 - alpha, &betas.betas[j])?;
                records.push(ProjectionRecord {
                    env: betas.envs[k],
                    target: Some(betas.envs[j]),
                    alpha,
                    tilde_distance: dist,
                    new_distance: distance(&new, &betas.betas[j]),
                });
                out.push(new);
            }
            None => {
                records.push(ProjectionRecord {
                    env: betas.envs[k],
                    target: None,
                    alpha: 1.0,
                    tilde_distance: 0.0,
                    new_distance: 0.0,
                });
                out.push(tilde);
            }
        }
    }
    Ok((HyperplaneSet { envs: betas.envs.clone(), betas: out }, records))
}
