use dadm_core::mim::{correlated_gaussians, gaussian_mi, mine_estimate, MineConfig, MineCritic};
use dadm_core::rng;
use dadm_core::Tensor;

fn run(x: &Tensor, y: &Tensor, seed: u64, config: &MineConfig) -> (f64, Vec<(usize, f64)>) {
    let mut r = rng::stream(seed, 1);
    let mut critic = MineCritic::new(x.shape()[1], config.hidden, &mut r);
    let rep = mine_estimate(x, y, &mut critic, config, &mut r).unwrap();
    (rep.estimate, rep.trajectory)
}

#[test]
fn correlated_gaussian_estimate_sits_below_the_analytic_value() {
    let (x, y) = correlated_gaussians(8192, 0.8, &mut rng::seeded(0));
    let (est, _) = run(&x, &y, 0, &MineConfig::default());
    let truth = gaussian_mi(0.8);
    assert!((truth - 0.5108).abs() < 1e-4);
    assert!((0.35..=truth + 0.02).contains(&est), "estimate {est}");
}

#[test]
fn independent_variables_estimate_near_zero() {
    let (x, y) = correlated_gaussians(8192, 0.0, &mut rng::seeded(0));
    let (est, _) = run(&x, &y, 0, &MineConfig::default());
    assert!(est.abs() <= 0.05, "estimate {est}");
}

#[test]
fn identical_variables_grow_without_bound() {
    let x = Tensor::randn(&[8192, 1], &mut rng::seeded(5));
    let (est, traj) = run(&x, &x, 5, &MineConfig::default());
    assert!(est > 1.0, "estimate {est}");
    // trend check on quarter points
    let q: Vec<f64> = [400, 800, 1200, 1600, 2000]
        .iter()
        .map(|&s| traj.iter().find(|p| p.0 == s).unwrap().1)
        .collect();
    assert!(q.windows(2).all(|w| w[1] > w[0] - 0.05), "{q:?}");
    assert!(q[4] > q[0]);
}

#[test]
fn fixed_critic_never_beats_the_true_information() {
    // Train briefly, then freeze and evaluate on fresh draws.
    let truth = gaussian_mi(0.6);
    let (x, y) = correlated_gaussians(4096, 0.6, &mut rng::seeded(9));
    let mut r = rng::seeded(10);
    let mut critic = MineCritic::new(1, 32, &mut r);
    let cfg = MineConfig { steps: 300, ..MineConfig::default() };
    mine_estimate(&x, &y, &mut critic, &cfg, &mut r).unwrap();
    let vals: Vec<f64> = (0..20)
        .map(|_| {
            let (x, y) = correlated_gaussians(2048, 0.6, &mut r);
            let perm = rng::derangement(2048, &mut r);
            critic.evaluate(&x, &y, &perm).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    assert!(mean <= truth + 3.0 * sd / (vals.len() as f64).sqrt(), "mean {mean} sd {sd}");
    assert!(vals.iter().all(|&v| v <= truth + 3.0 * sd), "{vals:?}");
}
