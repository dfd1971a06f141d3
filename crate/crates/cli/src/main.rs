//! `dadm`: data generation, training, evaluation and numerical checks.
//!
//! Exit codes: 0 success, 1 a check or validation failed, 2 bad usage or
//! unusable input.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dadm_core::harness::gradchecks::{self, CheckModule};
use dadm_core::harness::protocol::{
    checkpoint_meta, evaluate, read_checkpoint_meta, train_and_evaluate, Protocol, ProtocolConfig,
};
use dadm_core::harness::validators::{validate_cosine_expectation, validate_pgirm_contraction};
use dadm_core::mim::{correlated_gaussians, gaussian_mi, mine_estimate, MineConfig, MineCritic};
use dadm_core::model::DadmModel;
use dadm_core::par::ExecMode;
use dadm_core::pgirm::checkpoint::Checkpoint;
use dadm_core::rng;
use dadm_core::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "dadm", version, about = "Multi-modal anti-spoofing experiments on synthetic environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// TOML dataset spec; the default spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train under a protocol, evaluate the held-out environments and save a checkpoint.
    Train {
        /// TOML protocol config; the default config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run directory for the config echo, log and report [default: <out>.run].
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score held-out environments with a saved checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Test-time protocol; defaults to the one the checkpoint was trained with.
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        /// Modalities removed under the missing protocol, comma separated.
        #[arg(long, value_delimiter = ',')]
        missing: Option<Vec<String>>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_module)]
        module: CheckModule,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Estimate the mutual information of a bivariate Gaussian with MINE.
    MiBench {
        #[arg(long, default_value_t = 0.8)]
        rho: f64,
        #[arg(long, default_value_t = 8192)]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the Gaussian cosine expectation and the hyperplane contraction.
    ValidateIdentities {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "fixed" => Ok(Protocol::Fixed),
        "missing" => Ok(Protocol::Missing),
        "flexible" => Ok(Protocol::Flexible),
        "limited" => Ok(Protocol::Limited),
        _ => Err(format!("unknown protocol {s:?} (fixed, missing, flexible, limited)")),
    }
}

fn parse_module(s: &str) -> Result<CheckModule, String> {
    s.parse().map_err(|e: dadm_core::Error| e.to_string())
}

/// A failed check (exit 1) or an unusable input (exit 2).
enum Failure {
    Check(String),
    Input(String),
}

impl From<dadm_core::Error> for Failure {
    fn from(e: dadm_core::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn gen_data(spec: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = match spec {
        Some(p) => SynthSpec::from_toml(&read_text(&p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synth::generate(&spec, ExecMode::Parallel)?;
    synth::write_dataset(&data, out)?;
    println!("wrote {} records from {} environments to {}", data.len(), spec.n_envs(), out.display());
    Ok(())
}

fn train(config: Option<PathBuf>, data: &Path, out: &Path, run_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => ProtocolConfig::from_toml(&read_text(&p)?)?,
        None => ProtocolConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = synth::read_dataset(data)?;
    let dir = run_dir.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".run");
        PathBuf::from(p)
    });
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut log = BufWriter::new(File::create(dir.join("train.jsonl"))?);
    let (model, betas, report) = train_and_evaluate(&cfg, &dataset, &mut log)?;
    log.flush()?;
    let ckpt = model.to_checkpoint(&betas, &checkpoint_meta(&cfg, &report.train)?)?;
    ckpt.write(out)?;
    fs::write(dir.join("report.json"), json(&report))?;
    println!(
        "run {} seed {}: held-out AUC {:.4}, HTER {:.4} at validation threshold {:.4} (held-out EER {:.4}, diagnostic)",
        report.run_id, report.seed, report.test.auc, report.test.hter, report.test.threshold, report.test.eer
    );
    println!("checkpoint {}, run directory {}", out.display(), dir.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, protocol: Option<Protocol>, missing: Option<Vec<String>>) -> Result<(), Failure> {
    let ckpt = Checkpoint::read(ckpt)?;
    let (mut cfg, threshold) = read_checkpoint_meta(&ckpt.meta)?;
    let (model, betas) = DadmModel::from_checkpoint(&ckpt)?;
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    if let Some(m) = missing {
        cfg.missing = m;
    }
    cfg.validate()?;
    let dataset = synth::read_dataset(data)?;
    let metrics = evaluate(&model, &betas, &cfg, &dataset, threshold)?;
    println!("{}", json(&metrics));
    Ok(())
}

fn gradcheck(module: CheckModule, seed: u64) -> Result<(), Failure> {
    let outcomes = gradchecks::run(module, seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} gradient checks", outcomes.len())));
    }
    println!("{} gradient checks passed", outcomes.len());
    Ok(())
}

fn mi_bench(rho: f64, n: usize, steps: usize, seed: u64) -> Result<(), Failure> {
    if !(-1.0 < rho && rho < 1.0) {
        return Err(Failure::Input(format!("rho must lie in (-1, 1), got {rho}")));
    }
    let (x, y) = correlated_gaussians(n, rho, &mut rng::seeded(seed));
    let config = MineConfig { steps, ..MineConfig::default() };
    let mut r = rng::stream(seed, 1);
    let mut critic = MineCritic::new(1, config.hidden, &mut r);
    let report = mine_estimate(&x, &y, &mut critic, &config, &mut r)?;
    println!("analytic {:.4} nats", gaussian_mi(rho));
    println!("mine     {:.4} nats", report.estimate);
    Ok(())
}

fn validate_identities(n: usize, seed: u64) -> Result<(), Failure> {
    let mut failures = Vec::new();
    let mut rng = rng::seeded(seed);
    let cases = [
        (0.0, 0.0, 0.0),
        (0.0, 0.5, 1e-3),
        (std::f64::consts::FRAC_PI_2, 0.5, 3.0 / (n as f64).sqrt()),
    ];
    for (mu, sigma, tol) in cases {
        let c = validate_cosine_expectation(mu, sigma, n, &mut rng, ExecMode::Parallel)?;
        let ok = c.abs_error <= tol;
        println!(
            "{} E[cos theta], theta ~ N({mu:.4}, {sigma}^2): monte carlo {:.6}, analytic {:.6}, error {:.2e} (tol {tol:.1e})",
            if ok { "PASS" } else { "FAIL" },
            c.monte_carlo,
            c.analytic,
            c.abs_error
        );
        if !ok {
            failures.push(format!("cosine expectation at mu {mu}, sigma {sigma}"));
        }
    }
    let c = validate_pgirm_contraction(1000, seed)?;
    println!(
        "{} hyperplane contraction: {} steps, max error {:.2e}, warm-up steps exact: {}, distance alpha 0.5 {:.4} vs alpha 0.999 {:.4}",
        if c.passed() { "PASS" } else { "FAIL" },
        c.steps,
        c.max_contraction_error,
        c.warmup_exact,
        c.distance_alpha_half,
        c.distance_alpha_near_one
    );
    if !c.passed() {
        failures.push("hyperplane contraction".into());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join(", ")))
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out, seed } => gen_data(spec, &out, seed),
        Command::Train { config, data, out, run_dir, seed } => train(config, &data, &out, run_dir, seed),
        Command::Eval { ckpt, data, protocol, missing } => eval(&ckpt, &data, protocol, missing),
        Command::Gradcheck { module, seed } => gradcheck(module, seed),
        Command::MiBench { rho, n, steps, seed } => mi_bench(rho, n, steps, seed),
        Command::ValidateIdentities { n, seed } => validate_identities(n, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
