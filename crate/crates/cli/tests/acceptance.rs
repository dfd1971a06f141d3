//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Everything runs inside one test so the criteria never compete for cores
//! and the runtime budgets measure one criterion at a time. Lines go straight
//! to stderr so they show up even when the harness captures output.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dadm_core::harness::protocol::{run_protocol, train_and_evaluate, evaluate, Protocol, ProtocolConfig};
use dadm_core::harness::validators::{validate_cosine_expectation, validate_pgirm_contraction};
use dadm_core::losses::{angle_loss, AngleLoss, AngleLossParams};
use dadm_core::mim::mi_loss_with_perm;
use dadm_core::model::ModelConfig;
use dadm_core::par::ExecMode;
use dadm_core::pgirm::checkpoint::Checkpoint;
use dadm_core::pgirm::{regrad, Branch};
use dadm_core::rng::{self, Rng, RngExt};
use dadm_core::synth::{self, Dataset, SynthSpec};
use dadm_core::{Error, Tape, Tensor};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn report(label: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let line = format!(
        "{} {label}: {} [{:.1}s]",
        if v.passed { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    v.passed
}

fn dadm(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dadm")).args(args).output().expect("run dadm");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let (code, stdout, stderr) = dadm(&["gradcheck", "--module", "all"]);
    let elapsed = start.elapsed();
    let checks = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count();
    let failed: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    let ok = code == 0 && failed.is_empty() && checks > 0 && elapsed <= Duration::from_secs(120);
    verdict(
        ok,
        format!("exit {code}, {checks} checks, {} failed, {:.1}s of 120s {}", failed.len(), elapsed.as_secs_f64(), stderr.trim()),
    )
}

fn mine_value(stdout: &str, key: &str) -> Option<f64> {
    stdout.lines().find(|l| l.starts_with(key))?.split_whitespace().nth(1)?.parse().ok()
}

fn mi_oracle() -> Verdict {
    let start = Instant::now();
    let (c1, corr, _) = dadm(&["mi-bench", "--rho", "0.8", "--n", "8192"]);
    let (c2, indep, _) = dadm(&["mi-bench", "--rho", "0", "--n", "8192"]);
    let elapsed = start.elapsed();
    let analytic = mine_value(&corr, "analytic").unwrap_or(f64::NAN);
    let est = mine_value(&corr, "mine").unwrap_or(f64::NAN);
    let zero = mine_value(&indep, "mine").unwrap_or(f64::NAN);
    let truth = -0.5 * (1.0f64 - 0.64).ln();
    let ok = c1 == 0
        && c2 == 0
        && (analytic - 0.5108).abs() < 5e-5
        && (0.35..=truth + 0.02).contains(&est)
        && zero.abs() <= 0.05
        && elapsed <= Duration::from_secs(60);
    verdict(
        ok,
        format!(
            "rho 0.8: {est:.4} in [0.35, {:.4}] (analytic {analytic:.4}); independent: {zero:.4}; {:.1}s of 60s",
            truth + 0.02,
            elapsed.as_secs_f64()
        ),
    )
}

fn token_loss(t1: &[f64], t2: &[f64], perm: &[usize]) -> f64 {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::vector(t1.to_vec()));
    let b = tape.leaf(Tensor::vector(t2.to_vec()));
    mi_loss_with_perm(&a, &b, perm).unwrap().item().unwrap()
}

fn dv_bound() -> Verdict {
    let mut rng = rng::seeded(31);
    let mut constant_max = 0.0f64;
    for c in [-3.5, 0.0, 0.25, 7.0, 1e3] {
        for n in [2, 17, 4096] {
            let perm = rng::derangement(n, &mut rng);
            constant_max = constant_max.max(token_loss(&vec![c; n], &vec![c; n], &perm).abs());
        }
    }
    let hand = token_loss(&[1.0, -1.0], &[1.0, -1.0], &[1, 0]);
    let n = 4096;
    let mut worst = f64::INFINITY;
    for _ in 0..10 {
        let t1 = Tensor::randn(&[n], &mut rng);
        let t2 = Tensor::randn(&[n], &mut rng);
        let perm = rng::derangement(n, &mut rng);
        // loss = -bound, so loss >= -0.05 says the bound on I = 0 is not
        // meaningfully positive
        worst = worst.min(token_loss(t1.data(), t2.data(), &perm));
    }
    let ok = constant_max == 0.0 && hand == 0.0 && worst >= -0.05;
    verdict(ok, format!("constant batches {constant_max:e}, hand example {hand:e}, worst independent loss {worst:.4} >= -0.05 over 10 batches of 4096"))
}

fn expected_branch(g1: &Tensor, g2: &Tensor, mi1: f64, mi2: f64) -> Branch {
    let dot = g1.dot(g2).unwrap();
    let conditions = [
        (dot < 0.0 && mi1 <= mi2, Branch::ConflictFirstWeaker),
        (dot > 0.0 && mi1 <= mi2, Branch::AgreeFirstWeaker),
        (dot < 0.0 && mi1 > mi2, Branch::ConflictSecondWeaker),
        (dot > 0.0 && mi1 > mi2, Branch::AgreeSecondWeaker),
        (dot == 0.0, Branch::Orthogonal),
    ];
    let hits: Vec<Branch> = conditions.iter().filter(|c| c.0).map(|c| c.1).collect();
    assert_eq!(hits.len(), 1, "case table is not exclusive");
    hits[0]
}

fn branch_pair(want: Branch, rng: &mut Rng) -> (Tensor, Tensor, f64, f64) {
    let n = rng.random_range(1..10usize);
    let g1 = Tensor::randn(&[n], rng);
    let mut g2 = Tensor::randn(&[n], rng);
    let conflict = matches!(want, Branch::ConflictFirstWeaker | Branch::ConflictSecondWeaker);
    if (g1.dot(&g2).unwrap() < 0.0) != conflict {
        g2 = g2.scaled(-1.0);
    }
    let (a, b) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let first_weaker = matches!(want, Branch::ConflictFirstWeaker | Branch::AgreeFirstWeaker);
    if first_weaker {
        (g1, g2, lo, hi)
    } else {
        (g1, g2, hi, lo)
    }
}

fn regrad_algebra() -> Verdict {
    let v = |x: &[f64]| Tensor::vector(x.to_vec());
    let ex1 = regrad(&v(&[1.0, 0.0]), &v(&[-2.0, 0.0]), 0.2, 0.5).unwrap();
    let ex2 = regrad(&v(&[1.0, 0.0]), &v(&[1.0, 1.0]), 0.2, 0.5).unwrap();
    let ex3 = regrad(&v(&[-2.0, 0.0]), &v(&[1.0, 0.0]), 0.5, 0.2).unwrap();
    let hand = ex1.0.data() == [0.0, 0.0]
        && ex1.1 == Branch::ConflictFirstWeaker
        && ex2.0.data() == [1.0, 0.5]
        && ex2.1 == Branch::AgreeFirstWeaker
        && ex3.0.data() == [0.0, 0.0]
        && ex3.1 == Branch::ConflictSecondWeaker;

    let mut rng = rng::seeded(41);
    let (mut branch_ok, mut homog, mut orth) = (true, 0.0f64, 0.0f64);
    let mut total = 0;
    for want in [Branch::ConflictFirstWeaker, Branch::AgreeFirstWeaker, Branch::ConflictSecondWeaker, Branch::AgreeSecondWeaker] {
        for _ in 0..1000 {
            let (g1, g2, mi1, mi2) = branch_pair(want, &mut rng);
            let (out, got) = regrad(&g1, &g2, mi1, mi2).unwrap();
            branch_ok &= got == want && expected_branch(&g1, &g2, mi1, mi2) == want;
            let c = rng.random_range(0.01..100.0);
            let (scaled, _) = regrad(&g1.scaled(c), &g2.scaled(c), mi1, mi2).unwrap();
            for (s, o) in scaled.data().iter().zip(out.data()) {
                homog = homog.max((s - c * o).abs() / (1.0 + (c * o).abs()));
            }
            if matches!(want, Branch::AgreeFirstWeaker | Branch::AgreeSecondWeaker) {
                // the weaker stream's gradient gets a component orthogonal to itself
                let weak = if want == Branch::AgreeFirstWeaker { &g1 } else { &g2 };
                let mut added = out.clone();
                added.axpy(-1.0, weak).unwrap();
                orth = orth.max(added.dot(weak).unwrap().abs() / (1.0 + weak.norm() * added.norm()));
            }
            total += 1;
        }
    }
    let ok = hand && branch_ok && homog <= 1e-10 && orth <= 1e-10;
    verdict(
        ok,
        format!("{total} pairs, branches exclusive and as expected: {branch_ok}, homogeneity err {homog:.1e}, orthogonality err {orth:.1e}, hand examples exact: {hand}"),
    )
}

fn contraction() -> Verdict {
    let c = validate_pgirm_contraction(1000, 0).unwrap();
    verdict(
        c.passed(),
        format!(
            "max contraction err {:.1e} over {} steps, warm-up bit-exact: {}, distance alpha 0.5 {:.4} <= half of alpha 0.999 {:.4}",
            c.max_contraction_error, c.steps, c.warmup_exact, c.distance_alpha_half, c.distance_alpha_near_one
        ),
    )
}

fn angle_value(feats: &[Tensor], labels: &[u8], envs: &[usize]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = feats.iter().map(|f| tape.leaf(f.clone())).collect();
    match angle_loss(&vars, labels, envs, &AngleLossParams::default()).unwrap() {
        AngleLoss::Value(v) => v.item().unwrap(),
        AngleLoss::NotApplicable => f64::NAN,
    }
}

/// Every same-label, cross-environment sample pair: per modality the squared
/// cosine deviation from tau, per modality pair the squared gap in cosines.
fn angle_brute_force(feats: &[Tensor], labels: &[u8], envs: &[usize]) -> f64 {
    let p = AngleLossParams::default();
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        dot / (x.iter().map(|a| a * a).sum::<f64>().sqrt() * y.iter().map(|a| a * a).sum::<f64>().sqrt())
    };
    let (mut sum, mut count) = (0.0, 0);
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            if envs[a] == envs[b] || labels[a] != labels[b] {
                continue;
            }
            let tau = if labels[a] == 1 { p.tau_l } else { p.tau_s };
            for f in feats {
                sum += (cos(f.row(a), f.row(b)) - tau).powi(2);
                count += 1;
            }
            for i in 0..feats.len() {
                for j in i + 1..feats.len() {
                    sum += (cos(feats[i].row(a), feats[j].row(a)) - cos(feats[i].row(b), feats[j].row(b))).powi(2);
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn random_rotation(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v = Tensor::randn(&[d], rng).data().to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    q
}

fn map_rows(t: &Tensor, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Tensor {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    Tensor::new(vec![n, d], (0..n).flat_map(|i| f(i, t.row(i))).collect()).unwrap()
}

fn angle_invariances() -> Verdict {
    let mut rng = rng::seeded(61);
    let n = 12;
    let d = 6;
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let envs: Vec<usize> = (0..n).map(|i| (i / 2) % 3).collect();

    // aligned: one unit vector shared by every live sample and modality;
    // spoofs at cosine tau_s to each other are not needed, so use lives only
    let u = Tensor::randn(&[d], &mut rng);
    let live_labels = vec![1u8; n];
    let aligned: Vec<Tensor> = (0..3).map(|_| map_rows(&Tensor::randn(&[n, d], &mut rng), |_, _| u.data().to_vec())).collect();
    let zero = angle_value(&aligned, &live_labels, &envs);

    let (mut scale_err, mut rot_err, mut brute_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let feats: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[n, d], &mut rng)).collect();
        let base = angle_value(&feats, &labels, &envs);
        brute_err = brute_err.max((base - angle_brute_force(&feats, &labels, &envs)).abs());
        let scales: Vec<f64> = (0..3 * n).map(|_| rng.random_range(1e-3..1e3)).collect();
        let scaled: Vec<Tensor> = feats
            .iter()
            .enumerate()
            .map(|(m, f)| map_rows(f, |i, r| r.iter().map(|x| x * scales[m * n + i]).collect()))
            .collect();
        scale_err = scale_err.max((angle_value(&scaled, &labels, &envs) - base).abs());
        let q = random_rotation(d, &mut rng);
        let rotated: Vec<Tensor> = feats
            .iter()
            .map(|f| map_rows(f, |_, r| q.iter().map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum()).collect()))
            .collect();
        rot_err = rot_err.max((angle_value(&rotated, &labels, &envs) - base).abs());
    }
    let ok = zero.abs() < 1e-12 && scale_err <= 1e-10 && rot_err <= 1e-10 && brute_err <= 1e-10;
    verdict(
        ok,
        format!("aligned {zero:.1e}, rescaling {scale_err:.1e}, rotation {rot_err:.1e}, brute force {brute_err:.1e} over 20 batches"),
    )
}

fn cosine_identity() -> Verdict {
    let c = validate_cosine_expectation(0.0, 0.5, 1_000_000, &mut rng::seeded(0), ExecMode::Parallel).unwrap();
    let analytic_ok = (c.analytic - 0.88250).abs() < 5e-6;
    let degenerate = validate_cosine_expectation(0.0, 0.0, 100_000, &mut rng::seeded(1), ExecMode::Parallel).unwrap();
    let quarter = validate_cosine_expectation(FRAC_PI_2, 0.5, 1_000_000, &mut rng::seeded(2), ExecMode::Parallel).unwrap();
    let ok = analytic_ok
        && c.abs_error <= 1e-3
        && degenerate.monte_carlo == 1.0
        && degenerate.analytic == 1.0
        && quarter.abs_error <= 3.0 / 1000.0;
    verdict(
        ok,
        format!(
            "sigma 0.5: monte carlo {:.5} vs analytic {:.5}, error {:.1e} <= 1e-3; sigma 0 exact; mu pi/2 error {:.1e}",
            c.monte_carlo, c.analytic, c.abs_error, quarter.abs_error
        ),
    )
}

// ---- directional experiment ----

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Variant {
    Full,
    Erm,
    NoAngle,
    NoMi,
    NoMim,
}

/// Reduced model and schedule shared by every variant; only the switches
/// named by the variant differ.
fn experiment_config(variant: Variant, seed: u64) -> ProtocolConfig {
    let mut c = ProtocolConfig { seed, test_envs: vec![3], ..ProtocolConfig::default() };
    c.model = ModelConfig { d: 8, layers: 2, feature_dim: 16, ..ModelConfig::default() };
    c.train.pgirm.lr = EXPERIMENT_LR;
    c.train.pgirm.epochs = EXPERIMENT_EPOCHS;
    c.train.pgirm.t_alpha = 2;
    match variant {
        Variant::Full => {}
        Variant::Erm => {
            c.train.weights.lambda_mi = 0.0;
            c.train.weights.lambda_angle = 0.0;
            c.train.pgirm.alpha = 0.9999;
            c.model.use_mim = false;
        }
        Variant::NoAngle => c.train.weights.lambda_angle = 0.0,
        Variant::NoMi => c.train.weights.lambda_mi = 0.0,
        Variant::NoMim => c.model.use_mim = false,
    }
    c
}

const EXPERIMENT_LR: f64 = 0.1;
const EXPERIMENT_EPOCHS: usize = 10;
const SEEDS: u64 = 5;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct Experiment {
    full: Vec<f64>,
    erm: Vec<f64>,
    no_angle: Vec<f64>,
    no_mi: Vec<f64>,
    /// Per seed, (fixed AUC, missing-depth AUC) of full DADM and of the no-MIM ablation.
    full_missing: Vec<(f64, f64)>,
    nomim_missing: Vec<(f64, f64)>,
    /// Time spent on the four variants the directional criterion compares.
    elapsed: Duration,
}

/// Held-out AUC with all modalities and with depth zeroed, plus the time
/// spent on the first.
fn held_out(config: &ProtocolConfig, data: &Dataset) -> (f64, f64, Duration) {
    let start = Instant::now();
    let (model, betas, report) = train_and_evaluate(config, data, &mut std::io::sink()).unwrap();
    let took = start.elapsed();
    let mut missing = config.clone();
    missing.protocol = Protocol::Missing;
    missing.missing = vec!["depth".into()];
    let m = evaluate(&model, &betas, &missing, data, report.train.val.threshold).unwrap();
    (report.test.auc, m.auc, took)
}

fn timed_auc(config: &ProtocolConfig, data: &Dataset, clock: &mut Duration) -> f64 {
    let start = Instant::now();
    let auc = run_protocol(config, data, &mut std::io::sink()).unwrap().test.auc;
    *clock += start.elapsed();
    auc
}

fn run_experiment(data: &Dataset) -> Experiment {
    let start = Instant::now();
    let mut e = Experiment {
        full: vec![],
        erm: vec![],
        no_angle: vec![],
        no_mi: vec![],
        full_missing: vec![],
        nomim_missing: vec![],
        elapsed: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let full = held_out(&experiment_config(Variant::Full, seed), data);
        e.elapsed += full.2;
        e.full.push(full.0);
        e.full_missing.push((full.0, full.1));
        e.erm.push(timed_auc(&experiment_config(Variant::Erm, seed), data, &mut e.elapsed));
        e.no_angle.push(timed_auc(&experiment_config(Variant::NoAngle, seed), data, &mut e.elapsed));
        e.no_mi.push(timed_auc(&experiment_config(Variant::NoMi, seed), data, &mut e.elapsed));
        let nomim = held_out(&experiment_config(Variant::NoMim, seed), data);
        e.nomim_missing.push((nomim.0, nomim.1));
        let _ = writeln!(
            std::io::stderr(),
            "  seed {seed}: full {:.4} erm {:.4} no-angle {:.4} no-mi {:.4}; missing depth full {:.4} no-mim {:.4} -> {:.4} [{:.0}s]",
            e.full[seed as usize],
            e.erm[seed as usize],
            e.no_angle[seed as usize],
            e.no_mi[seed as usize],
            full.1,
            e.nomim_missing[seed as usize].0,
            e.nomim_missing[seed as usize].1,
            start.elapsed().as_secs_f64()
        );
    }
    e
}

fn directional(e: &Experiment, budget: Duration) -> Verdict {
    let wins = e.full.iter().zip(&e.erm).filter(|(f, r)| *f - *r >= 0.03).count();
    let (mf, me, ma, mm) = (median(&e.full), median(&e.erm), median(&e.no_angle), median(&e.no_mi));
    let ok = wins >= 4 && ma < mf && mm < mf && e.elapsed <= budget;
    verdict(
        ok,
        format!(
            "full beats ERM by >= 0.03 on {wins}/5 seeds; median AUC full {mf:.4}, ERM {me:.4}, no angle {ma:.4}, no MI {mm:.4}; {:.0}s of {:.0}s",
            e.elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ),
    )
}

fn missing_depth(e: &Experiment) -> Verdict {
    let gap = |p: &(f64, f64)| p.0 - p.1;
    let better = e.full_missing.iter().zip(&e.nomim_missing).filter(|(f, n)| gap(f) < gap(n)).count();
    let fg: Vec<f64> = e.full_missing.iter().map(gap).collect();
    let ng: Vec<f64> = e.nomim_missing.iter().map(gap).collect();
    verdict(
        better >= 4,
        format!("missing depth costs DADM less than the no-MIM model on {better}/5 seeds; median AUC drop {:.4} vs {:.4}", median(&fg), median(&ng)),
    )
}

// ---- determinism and formats ----

fn tiny_config_toml(dir: &Path) -> std::path::PathBuf {
    let mut c = ProtocolConfig { seed: 5, ..ProtocolConfig::default() };
    c.model = ModelConfig { height: 16, width: 16, patch: 8, d: 4, layers: 1, feature_dim: 4, ..ModelConfig::default() };
    c.train.pgirm.epochs = 3;
    c.train.pgirm.t_alpha = 1;
    c.train.pgirm.lr = 0.05;
    c.train.batch_size = 16;
    let path = dir.join("tiny.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path
}

fn determinism_and_formats() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |cond: bool, what: &str| {
        if !cond {
            ok = false;
            notes.push(what.to_owned());
        }
    };

    let spec = SynthSpec { samples_per_env: 24, height: 16, width: 16, ..SynthSpec::default() };
    fs::write(p("spec.toml"), spec.to_toml().unwrap()).unwrap();
    for out in ["a.ds", "b.ds"] {
        let (code, _, _) = dadm(&["gen-data", "--spec", &s(&p("spec.toml")), "--out", &s(&p(out))]);
        check(code == 0, "gen-data exit code");
    }
    let ds_a = fs::read(p("a.ds")).unwrap();
    check(ds_a == fs::read(p("b.ds")).unwrap(), "dataset files differ");
    let direct = synth::generate(&spec, ExecMode::Sequential).unwrap();
    let read = synth::read_dataset(&p("a.ds")).unwrap();
    let same_bits = direct.records.iter().zip(&read.records).all(|(x, y)| {
        x.env == y.env
            && x.label == y.label
            && x.attack == y.attack
            && x.sample.presence == y.sample.presence
            && x.sample.images.iter().zip(&y.sample.images).all(|(u, v)| {
                u.shape() == v.shape() && u.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    });
    check(same_bits && direct.len() == read.len(), "dataset round trip is not exact");
    check(synth::to_bytes(&read).unwrap() == ds_a, "dataset re-encoding differs");

    let cfg = tiny_config_toml(dir.path());
    for (ckpt, run) in [("a.ckpt", "run_a"), ("b.ckpt", "run_b")] {
        let (code, _, err) = dadm(&["train", "--config", &s(&cfg), "--data", &s(&p("a.ds")), "--out", &s(&p(ckpt)), "--run-dir", &s(&p(run))]);
        check(code == 0, &format!("train exit code {code}: {err}"));
    }
    let ck_a = fs::read(p("a.ckpt")).unwrap_or_default();
    check(!ck_a.is_empty() && ck_a == fs::read(p("b.ckpt")).unwrap_or_default(), "checkpoints differ");
    let log_a = fs::read(p("run_a/train.jsonl")).unwrap_or_default();
    check(!log_a.is_empty() && log_a == fs::read(p("run_b/train.jsonl")).unwrap_or_default(), "logs differ");
    check(p("run_a/config.toml").exists() && p("run_a/report.json").exists(), "run directory incomplete");
    match Checkpoint::from_bytes(&ck_a) {
        Ok(c) => check(c.to_bytes().unwrap() == ck_a, "checkpoint re-encoding differs"),
        Err(e) => check(false, &format!("checkpoint does not parse: {e}")),
    }
    let (code, out, _) = dadm(&["eval", "--ckpt", &s(&p("a.ckpt")), "--data", &s(&p("a.ds"))]);
    check(code == 0 && out.contains("\"auc\""), "eval of saved checkpoint");

    let mut formats = 0;
    for (bytes, parse) in [
        (ds_a.clone(), (|b: &[u8]| synth::from_bytes(b).map(|_| ())) as fn(&[u8]) -> Result<(), Error>),
        (ck_a.clone(), |b: &[u8]| Checkpoint::from_bytes(b).map(|_| ())),
    ] {
        for pos in 0..8.min(bytes.len()) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x5a;
            if matches!(parse(&bad), Err(Error::Format(_))) {
                formats += 1;
            }
        }
        if matches!(parse(&bytes[..bytes.len() - 3]), Err(Error::Format(_))) {
            formats += 1;
        }
    }
    check(formats == 18, &format!("{formats}/18 corruptions gave format errors"));
    let mut bad = ck_a.clone();
    bad[0] ^= 0xff;
    fs::write(p("bad.ckpt"), &bad).unwrap();
    let (code, _, err) = dadm(&["eval", "--ckpt", &s(&p("bad.ckpt")), "--data", &s(&p("a.ds"))]);
    check(code == 2 && err.contains("format error"), "cli on corrupted checkpoint");
    let (code, _, _) = dadm(&["train", "--bogus"]);
    check(code == 2, "unknown flag exit code");

    let detail = if ok {
        format!("datasets, checkpoints and logs byte-identical; round trips exact; {formats}/18 corruptions rejected as format errors")
    } else {
        notes.join("; ")
    };
    verdict(ok, detail)
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(report("criterion 1 (gradient integrity)", gradient_integrity));
    passed.push(report("criterion 2 (MI oracle)", mi_oracle));
    passed.push(report("criterion 3 (DV bound validity)", dv_bound));
    passed.push(report("criterion 4 (ReGrad algebra)", regrad_algebra));
    passed.push(report("criterion 5 (PG-IRM contraction)", contraction));
    passed.push(report("criterion 6 (angle-loss invariances)", angle_invariances));
    passed.push(report("criterion 7 (cosine identity)", cosine_identity));
    let start = Instant::now();
    let data = synth::generate(&SynthSpec::default(), ExecMode::Parallel).unwrap();
    let generation = start.elapsed();
    let experiment = run_experiment(&data);
    let budget = Duration::from_secs(30 * 60).saturating_sub(generation);
    passed.push(report("criterion 8 (directional synthetic results)", || directional(&experiment, budget)));
    passed.push(report("criterion 9 (determinism and formats)", determinism_and_formats));
    // Reported with its honest verdict but not one of the nine gates.
    report("supplementary (missing-depth ablation)", || missing_depth(&experiment));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    let _ = writeln!(std::io::stderr(), "acceptance: {}/9 criteria passed", 9 - failed.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
