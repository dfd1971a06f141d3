use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::log_mean_exp;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, ParamGroup, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// `f(x, y) = w2 . relu(W1 [x; y] + b1) + b2`.
#[derive(Clone, Debug)]
pub struct MineCritic {
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    k: usize,
}

impl MineCritic {
    pub fn new(k: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "critic.l1", 2 * k, hidden, true, ParamGroup::Head, rng);
        let l2 = Linear::new(&mut store, "critic.l2", hidden, 1, true, ParamGroup::Head, rng);
        Self { store, l1, l2, k }
    }

    /// Scores `(n, 1)` for the row pairs of `x` and `y`, both `(n, k)`.
    pub fn scores<'t>(&self, p: &[Var<'t>], x: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
        self.l2.forward(p, &self.l1.forward(p, &x.concat_cols(y)?)?.relu()?)
    }

    /// Donsker-Varadhan bound `E_joint[f] - log E_marginal[exp f]`.
    pub fn bound<'t>(&self, p: &[Var<'t>], x: &Var<'t>, y: &Var<'t>, perm: &[usize]) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let joint = self.scores(p, x, y)?.mean()?;
        let marginal = self.scores(p, x, &y.permute_rows(perm)?)?.reshape(&[n])?;
        joint.sub(&log_mean_exp(&marginal)?)
    }

    /// The bound on fixed data with no training, as a plain number.
    pub fn evaluate(&self, x: &Tensor, y: &Tensor, perm: &[usize]) -> Result<f64> {
        self.evaluate_multi(x, y, std::slice::from_ref(&perm.to_vec()))
    }

    /// The bound with the marginal expectation averaged over all pairs
    /// produced by several shuffles.
    pub fn evaluate_multi(&self, x: &Tensor, y: &Tensor, perms: &[Vec<usize>]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let n = x.shape()[0];
        let joint = self.scores(&p, &xv, &yv)?.mean()?.item()?;
        let mut marginal = Vec::with_capacity(n * perms.len());
        for perm in perms {
            let s = self.scores(&p, &xv, &yv.permute_rows(perm)?)?;
            marginal.extend_from_slice(s.value().data());
        }
        let m = marginal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = m + (marginal.iter().map(|v| (v - m).exp()).sum::<f64>() / marginal.len() as f64).ln();
        let v = joint - lme;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "mine_estimate" });
        }
        Ok(v)
    }
}

/// Adam on a list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Full-data bound is recorded every this many steps.
    pub eval_every: usize,
    /// Shuffles pooled for the marginal term of the final estimate.
    pub eval_shuffles: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 512, hidden: 64, lr: 2e-3, eval_every: 100, eval_shuffles: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MineReport {
    /// Final bound on the full data, in nats.
    pub estimate: f64,
    /// `(step, bound on the full data)` at every evaluation point.
    pub trajectory: Vec<(usize, f64)>,
}

/// Trains `critic` by ascending the DV bound on minibatches of `(x, y)` and
/// reports the bound on the full data.
pub fn mine_estimate(
    x: &Tensor,
    y: &Tensor,
    critic: &mut MineCritic,
    config: &MineConfig,
    rng: &mut Rng,
) -> Result<MineReport> {
    if x.shape() != y.shape() || x.ndim() != 2 || x.shape()[1] != critic.k {
        return shape_err("mine_estimate", format!("{:?} vs {:?}", x.shape(), y.shape()));
    }
    let n = x.shape()[0];
    if n < 64 {
        return Err(Error::InvalidArgument(format!("mine_estimate needs N >= 64, got {n}")));
    }
    if config.steps == 0 || config.batch < 2 {
        return Err(Error::InvalidArgument("mine_estimate needs steps >= 1 and batch >= 2".into()));
    }
    let batch = config.batch.min(n);
    let k = critic.k;
    let mut adam = Adam::new(critic.store.values(), config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trajectory = Vec::new();
    for step in 1..=config.steps {
        if cursor + batch > n {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = rows(x, idx, k);
        let yb = rows(y, idx, k);
        let perm = rng::derangement(batch, rng);
        let grads = {
            let tape = Tape::new();
            let p = critic.store.bind(&tape);
            let loss = critic.bound(&p, &tape.leaf(xb), &tape.leaf(yb), &perm)?.scale(-1.0)?;
            let g = tape.backward(loss)?;
            p.iter().map(|v| g.wrt(v)).collect::<Vec<_>>()
        };
        // linear decay to a tenth of the base rate
        adam.lr = config.lr * (1.0 - 0.9 * (step - 1) as f64 / config.steps as f64);
        adam.step(critic.store.values_mut(), &grads);
        if step == config.steps {
            let perms: Vec<Vec<usize>> =
                (0..config.eval_shuffles.max(1)).map(|_| rng::derangement(n, rng)).collect();
            trajectory.push((step, critic.evaluate_multi(x, y, &perms)?));
        } else if config.eval_every > 0 && step % config.eval_every == 0 {
            let perm = rng::derangement(n, rng);
            trajectory.push((step, critic.evaluate(x, y, &perm)?));
        }
    }
    let estimate = trajectory.last().expect("final step is always evaluated").1;
    Ok(MineReport { estimate, trajectory })
}

fn rows(t: &Tensor, idx: &[usize], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * k..(i + 1) * k]);
    }
    Tensor::from_parts(vec![idx.len(), k], data)
}

/// `n` draws of a standard bivariate normal with correlation `rho`, as two
/// `(n, 1)` columns.
pub fn correlated_gaussians(n: usize, rho: f64, rng: &mut Rng) -> (Tensor, Tensor) {
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        xs.push(a);
        ys.push(rho * a + s * b);
    }
    (Tensor::from_parts(vec![n, 1], xs), Tensor::from_parts(vec![n, 1], ys))
}

/// `-0.5 ln(1 - rho^2)`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}
