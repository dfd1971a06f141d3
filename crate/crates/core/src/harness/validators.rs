//! Numerical identity checks: the Gaussian cosine expectation and the
//! contraction property of the projected hyperplane update.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::LinearModel;
use crate::par::{self, ExecMode};
use crate::pgirm::train::{fit, Samples, TrainConfig};
use crate::pgirm::{distance, pgirm_step, HyperplaneSet, PgIrmConfig};
use crate::rng::{self, Rng, RngExt};
use crate::tensor::Tensor;

/// Smallest sample count accepted by [`validate_cosine_expectation`].
pub const MIN_COSINE_SAMPLES: usize = 100_000;
const SHARD: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CosineCheck {
    pub monte_carlo: f64,
    pub analytic: f64,
    pub abs_error: f64,
}

/// Monte Carlo `E[cos theta]` for `theta ~ N(mu, sigma^2)` against
/// `exp(-sigma^2 / 2) cos(mu)`. Shards draw from their own streams and are
/// summed in order, so the estimate does not depend on `exec`.
pub fn validate_cosine_expectation(mu: f64, sigma: f64, n: usize, rng: &mut Rng, exec: ExecMode) -> Result<CosineCheck> {
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("need finite mu and sigma >= 0, got mu {mu}, sigma {sigma}")));
    }
    if n < MIN_COSINE_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_COSINE_SAMPLES} samples, got {n}")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let seed: u64 = rng.random();
    let shards = n.div_ceil(SHARD);
    let sums = par::map(exec, shards, |s| {
        let mut r = rng::stream(seed, s as u64);
        let len = SHARD.min(n - s * SHARD);
        (0..len).map(|_| normal.sample(&mut r).cos()).sum::<f64>()
    });
    let monte_carlo = sums.iter().sum::<f64>() / n as f64;
    let analytic = (-0.5 * sigma * sigma).exp() * mu.cos();
    Ok(CosineCheck { monte_carlo, analytic, abs_error: (monte_carlo - analytic).abs() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub steps: usize,
    /// Largest `| ||new - target|| - alpha ||tilde - target|| |` over all
    /// projection steps.
    pub max_contraction_error: f64,
    /// Whether every `alpha' = 1` step equalled the gradient step exactly.
    pub warmup_exact: bool,
    /// Final max pairwise beta distance of the short training runs.
    pub distance_alpha_half: f64,
    pub distance_alpha_near_one: f64,
}

impl ContractionCheck {
    pub fn passed(&self) -> bool {
        self.max_contraction_error <= 1e-12
            && self.warmup_exact
            && self.distance_alpha_half <= 0.5 * self.distance_alpha_near_one
    }
}

/// Plain vectors from `envs` environments: coordinate 0 predicts the label
/// everywhere, coordinate 1 predicts it with an environment-dependent sign.
pub fn conflicting_environments(n_per_env: usize, envs: usize, seed: u64) -> (Vec<Tensor>, Vec<u8>, Vec<usize>) {
    let mut rng = rng::seeded(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut es = Vec::new();
    for e in 0..envs {
        let sign = if e % 2 == 0 { 1.0 } else { -1.0 };
        for i in 0..n_per_env {
            let y = (i % 2) as u8;
            let s = if y == 1 { 1.0 } else { -1.0 };
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            xs.push(Tensor::vector(vec![0.5 * s + 0.5 * n1, 2.0 * sign * s + 0.5 * n2]));
            ys.push(y);
            es.push(e);
        }
    }
    (xs, ys, es)
}

/// Max pairwise beta distance after a short linear-model run at `alpha`.
pub fn alpha_run_distance(alpha: f64, seed: u64) -> Result<f64> {
    let (xs, ys, es) = conflicting_environments(40, 3, seed);
    let samples = Samples::new(xs.iter().collect(), ys, es)?;
    let mut model = LinearModel::new(2, 2, &mut rng::stream(seed, 1));
    let mut betas = HyperplaneSet::zeros(vec![0, 1, 2], 2);
    let cfg = TrainConfig {
        pgirm: PgIrmConfig { alpha, t_alpha: 1, lr: 0.1, epochs: 15 },
        batch_size: 24,
        weight_decay: 0.0,
        weights: LossWeights { lambda_mi: 0.0, lambda_angle: 0.0 },
        exec: ExecMode::Sequential,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &mut betas, &samples, None, &cfg, &mut rng::stream(seed, 2), |_| {})?;
    Ok(report.epochs.last().map_or(0.0, |e| e.beta_max_distance))
}

/// Random projection steps with `alpha' = alpha`, random warm-up steps with
/// `alpha' = 1`, and an `alpha = 0.5` against `alpha = 0.999` training run.
pub fn validate_pgirm_contraction(steps: usize, seed: u64) -> Result<ContractionCheck> {
    let mut rng = rng::seeded(seed);
    let mut max_err = 0.0f64;
    let mut warmup_exact = true;
    for _ in 0..steps {
        let envs = rng.random_range(2..6usize);
        let dim = rng.random_range(1..9usize);
        let betas: Vec<Tensor> = (0..envs).map(|_| Tensor::randn(&[dim], &mut rng)).collect();
        let grads: Vec<Tensor> = (0..envs).map(|_| Tensor::randn(&[dim], &mut rng)).collect();
        let set = HyperplaneSet::new((0..envs).collect(), betas)?;
        let lr = rng.random_range(1e-3..1.0);
        let alpha = rng.random_range(0.01..0.99);
        let (new, records) = pgirm_step(&set, &grads, lr, alpha)?;
        for (k, r) in records.iter().enumerate() {
            let target = r.target.and_then(|t| set.index_of(t)).expect("several environments");
            let measured = distance(&new.betas()[k], &set.betas()[target]);
            max_err = max_err.max((measured - alpha * r.tilde_distance).abs());
        }
        let (plain, _) = pgirm_step(&set, &grads, lr, 1.0)?;
        for k in 0..envs {
            let mut expect = set.betas()[k].clone();
            expect.axpy(-lr, &grads[k])?;
            let same = expect.data().iter().zip(plain.betas()[k].data()).all(|(a, b)| a.to_bits() == b.to_bits());
            warmup_exact &= same;
        }
    }
    Ok(ContractionCheck {
        steps,
        max_contraction_error: max_err,
        warmup_exact,
        distance_alpha_half: alpha_run_distance(0.5, seed)?,
        distance_alpha_near_one: alpha_run_distance(0.999, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_gaussian_is_exact() {
        let c = validate_cosine_expectation(0.0, 0.0, MIN_COSINE_SAMPLES, &mut rng::seeded(1), ExecMode::Parallel).unwrap();
        assert_eq!(c.monte_carlo, 1.0);
        assert_eq!(c.analytic, 1.0);
    }

    #[test]
    fn quarter_turn_has_zero_mean() {
        let n = 200_000;
        for sigma in [0.1, 1.0, 3.0] {
            let c = validate_cosine_expectation(std::f64::consts::FRAC_PI_2, sigma, n, &mut rng::seeded(2), ExecMode::Parallel)
                .unwrap();
            assert!(c.analytic.abs() < 1e-16);
            assert!(c.abs_error <= 3.0 / (n as f64).sqrt(), "{c:?}");
        }
    }

    #[test]
    fn estimate_matches_closed_form_and_mode() {
        let a = validate_cosine_expectation(0.3, 0.5, 300_000, &mut rng::seeded(3), ExecMode::Parallel).unwrap();
        let b = validate_cosine_expectation(0.3, 0.5, 300_000, &mut rng::seeded(3), ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        assert!((a.analytic - (-0.125f64).exp() * 0.3f64.cos()).abs() < 1e-15);
        assert!(a.abs_error < 3e-3, "{a:?}");
    }

    #[test]
    fn cosine_rejects_bad_input() {
        let mut rng = rng::seeded(4);
        assert!(validate_cosine_expectation(0.0, -0.1, MIN_COSINE_SAMPLES, &mut rng, ExecMode::Sequential).is_err());
        assert!(validate_cosine_expectation(0.0, 0.5, 10, &mut rng, ExecMode::Sequential).is_err());
        assert!(validate_cosine_expectation(f64::NAN, 0.5, MIN_COSINE_SAMPLES, &mut rng, ExecMode::Sequential).is_err());
    }

    #[test]
    fn contraction_check_passes() {
        let c = validate_pgirm_contraction(200, 9).unwrap();
        assert!(c.passed(), "{c:?}");
        assert!(c.distance_alpha_near_one > 0.05);
    }
}
