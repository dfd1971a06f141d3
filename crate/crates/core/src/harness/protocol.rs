//! Leave-environment-out evaluation protocols.
//!
//! A run trains on the source environments (minus a stratified validation
//! split), keeps the epoch with the best validation AUC, picks the decision
//! threshold that minimizes HTER on the validation split and applies it to
//! the held-out environments.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{compute_metrics, MetricsReport, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::model::{DadmModel, ImageSample, ModelConfig, SubstituteMode, MODALITIES};
use crate::pgirm::train::{draw_contexts, fit, predict, EpochStats, SampleContext, Samples, TrainConfig, Validation};
use crate::pgirm::HyperplaneSet;
use crate::rng::{self, Rng};
use crate::synth::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// All modalities in both phases.
    #[default]
    Fixed,
    /// The configured modalities are zero-substituted at test time only.
    Missing,
    /// Every modality is dropped at random in both phases; learnable substitutes.
    Flexible,
    /// Training uses only the configured source environments.
    Limited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub test_envs: Vec<usize>,
    /// Source environments for `limited`. Ignored otherwise; an empty list
    /// means every environment not under test.
    pub source_envs: Vec<usize>,
    /// Modality names absent at test time under `missing`.
    pub missing: Vec<String>,
    pub drop_prob: f64,
    /// Share of each source environment and class held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Fixed,
            test_envs: vec![3],
            source_envs: Vec::new(),
            missing: vec!["depth".into()],
            drop_prob: 0.3,
            val_fraction: 0.2,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

// rng streams of one run
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VAL_CTX: u64 = 3;
const STREAM_TEST_CTX: u64 = 4;

impl ProtocolConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.test_envs.is_empty() {
            return Err(Error::Config("at least one test environment is required".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop probability must lie in [0, 1], got {}", self.drop_prob)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        self.missing_mask()?;
        self.effective_train().validate()
    }

    fn missing_mask(&self) -> Result<[bool; 3]> {
        let mut mask = [false; 3];
        for name in &self.missing {
            let m = MODALITIES
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::Config(format!("unknown modality {name:?}")))?;
            mask[m] = true;
        }
        if self.protocol == Protocol::Missing && mask.iter().all(|&m| m) {
            return Err(Error::Config("cannot remove every modality".into()));
        }
        Ok(mask)
    }

    /// The model as trained under this protocol.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.protocol == Protocol::Flexible {
            m.substitute = SubstituteMode::Learnable;
        }
        m
    }

    /// The training settings as used under this protocol; only `flexible`
    /// drops modalities while training.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.drop_prob = if self.protocol == Protocol::Flexible { self.drop_prob } else { 0.0 };
        t
    }

    /// Checks the split against the environments present in `data`.
    pub fn split_envs(&self, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
        let present = data.env_ids();
        for e in &self.test_envs {
            if !present.contains(e) {
                return Err(Error::Config(format!("test environment {e} is not in the dataset {present:?}")));
            }
        }
        let sources: Vec<usize> = if self.protocol == Protocol::Limited && !self.source_envs.is_empty() {
            for e in &self.source_envs {
                if !present.contains(e) {
                    return Err(Error::Config(format!("source environment {e} is not in the dataset {present:?}")));
                }
                if self.test_envs.contains(e) {
                    return Err(Error::Config(format!("environment {e} is both source and test")));
                }
            }
            let mut s = self.source_envs.clone();
            s.sort_unstable();
            s.dedup();
            s
        } else {
            present.iter().copied().filter(|e| !self.test_envs.contains(e)).collect()
        };
        if sources.is_empty() {
            return Err(Error::Config("no source environment left for training".into()));
        }
        let mut test = self.test_envs.clone();
        test.sort_unstable();
        test.dedup();
        Ok((sources, test))
    }

    /// Contexts for held-out samples.
    pub fn test_contexts(&self, n: usize) -> Result<Vec<SampleContext>> {
        let regrad = self.train.regrad;
        Ok(match self.protocol {
            Protocol::Fixed | Protocol::Limited => vec![SampleContext { drop: [false; 3], regrad }; n],
            Protocol::Missing => vec![SampleContext { drop: self.missing_mask()?, regrad }; n],
            Protocol::Flexible => {
                draw_contexts(n, self.drop_prob, regrad, &mut rng::stream(self.seed, STREAM_TEST_CTX))
            }
        })
    }

    fn val_contexts(&self, n: usize) -> Vec<SampleContext> {
        let p = if self.protocol == Protocol::Flexible { self.drop_prob } else { 0.0 };
        draw_contexts(n, p, self.train.regrad, &mut rng::stream(self.seed, STREAM_VAL_CTX))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub run_id: String,
    #[serde(flatten)]
    pub stats: EpochStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub source_envs: Vec<usize>,
    pub test_envs: Vec<usize>,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    /// Metrics on the validation split at its own min-HTER threshold.
    pub val: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub run_id: String,
    pub seed: u64,
    pub config: ProtocolConfig,
    pub train: TrainSummary,
    /// Held-out metrics at the validation threshold. `test.eer` is the
    /// held-out equal error rate, a diagnostic that peeks at test labels.
    pub test: MetricsReport,
    pub wall_time_s: f64,
}

/// Deterministic id of a (config, dataset) pair.
pub fn run_id(config: &ProtocolConfig, data: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?);
    for r in &data.records {
        h.update((r.env as u64).to_le_bytes());
        h.update([r.label]);
        h.update((r.attack.map_or(u64::MAX, |a| a as u64)).to_le_bytes());
        h.update(r.sample.presence.map(u8::from));
        for img in &r.sample.images {
            for &v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Indices of `data` in `envs`, split per (environment, label) into
/// training and validation parts.
fn stratified_split(data: &Dataset, envs: &[usize], val_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &e in envs {
        for label in [0u8, 1] {
            let mut idx: Vec<usize> =
                (0..data.len()).filter(|&i| data.records[i].env == e && data.records[i].label == label).collect();
            idx.shuffle(rng);
            let k = ((idx.len() as f64) * val_fraction).round() as usize;
            let k = if idx.len() >= 2 { k.clamp(1, idx.len() - 1) } else { 0 };
            val.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn samples<'a>(data: &'a Dataset, idx: &[usize]) -> Result<Samples<'a, ImageSample>> {
    Samples::new(
        idx.iter().map(|&i| &data.records[i].sample).collect(),
        idx.iter().map(|&i| data.records[i].label).collect(),
        idx.iter().map(|&i| data.records[i].env).collect(),
    )
}

/// Trains under `config`, writing one JSON line per epoch to `log`.
pub fn train_protocol(
    config: &ProtocolConfig,
    data: &Dataset,
    log: &mut dyn Write,
) -> Result<(DadmModel, HyperplaneSet, TrainSummary)> {
    config.validate()?;
    let (sources, test_envs) = config.split_envs(data)?;
    let id = run_id(config, data)?;
    let train_cfg = config.effective_train();
    let mut model = DadmModel::new(config.effective_model(), &mut rng::stream(config.seed, STREAM_INIT))?;
    let mut betas = HyperplaneSet::zeros(sources.clone(), config.model.feature_dim);

    let (train_idx, val_idx) =
        stratified_split(data, &sources, config.val_fraction, &mut rng::stream(config.seed, STREAM_SPLIT));
    let train = samples(data, &train_idx)?;
    let val = Validation { samples: samples(data, &val_idx)?, ctxs: config.val_contexts(val_idx.len()) };
    let mut log_err = None;
    let report = fit(
        &mut model,
        &mut betas,
        &train,
        Some(&val),
        &train_cfg,
        &mut rng::stream(config.seed, STREAM_TRAIN),
        |stats| {
            let rec = LogRecord { run_id: id.clone(), stats: stats.clone() };
            let line = serde_json::to_string(&rec).expect("log records serialize");
            if log_err.is_none() {
                if let Err(e) = writeln!(log, "{line}") {
                    log_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let val_scores = predict(&model, &betas, &val.samples.inputs, &val.ctxs, train_cfg.exec)?;
    let val_metrics = compute_metrics(&val_scores, &val.samples.labels, ThresholdPolicy::MinHter)?;
    let summary = TrainSummary {
        run_id: id,
        source_envs: sources,
        test_envs,
        epochs: report.epochs,
        best_epoch: report.best_epoch,
        val: val_metrics,
    };
    Ok((model, betas, summary))
}

/// Scores the configured test environments under the protocol's test-time
/// modality rules.
pub fn evaluate(
    model: &DadmModel,
    betas: &HyperplaneSet,
    config: &ProtocolConfig,
    data: &Dataset,
    threshold: f64,
) -> Result<MetricsReport> {
    let (_, test_envs) = config.split_envs(data)?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| test_envs.contains(&data.records[i].env)).collect();
    let test = samples(data, &idx)?;
    let ctxs = config.test_contexts(idx.len())?;
    let scores = predict(model, betas, &test.inputs, &ctxs, config.train.exec)?;
    compute_metrics(&scores, &test.labels, ThresholdPolicy::Fixed(threshold))
}

/// Trains, then evaluates the held-out environments at the validation
/// threshold. The trained model and hyperplanes come back with the report.
pub fn train_and_evaluate(
    config: &ProtocolConfig,
    data: &Dataset,
    log: &mut dyn Write,
) -> Result<(DadmModel, HyperplaneSet, ProtocolReport)> {
    let start = Instant::now();
    let (model, betas, train) = train_protocol(config, data, log)?;
    let test = evaluate(&model, &betas, config, data, train.val.threshold)?;
    let report = ProtocolReport {
        run_id: train.run_id.clone(),
        seed: config.seed,
        config: config.clone(),
        train,
        test,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, betas, report))
}

pub fn run_protocol(config: &ProtocolConfig, data: &Dataset, log: &mut dyn Write) -> Result<ProtocolReport> {
    Ok(train_and_evaluate(config, data, log)?.2)
}

/// Checkpoint metadata keys written by [`checkpoint_meta`].
pub const META_CONFIG: &str = "protocol_config";
pub const META_THRESHOLD: &str = "threshold";
pub const META_RUN_ID: &str = "run_id";

pub fn checkpoint_meta(config: &ProtocolConfig, summary: &TrainSummary) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    // single-line JSON: meta values cannot hold newlines
    meta.insert(META_CONFIG.into(), serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?);
    // shortest round-trip formatting keeps the threshold exact
    meta.insert(META_THRESHOLD.into(), format!("{:?}", summary.val.threshold));
    meta.insert(META_RUN_ID.into(), summary.run_id.clone());
    Ok(meta)
}

/// Config and threshold stored by [`checkpoint_meta`].
pub fn read_checkpoint_meta(meta: &BTreeMap<String, String>) -> Result<(ProtocolConfig, f64)> {
    let cfg = meta.get(META_CONFIG).ok_or_else(|| Error::Format(format!("checkpoint has no {META_CONFIG}")))?;
    let thr = meta.get(META_THRESHOLD).ok_or_else(|| Error::Format(format!("checkpoint has no {META_THRESHOLD}")))?;
    let threshold = thr.parse::<f64>().map_err(|_| Error::Format(format!("bad threshold {thr:?}")))?;
    let cfg: ProtocolConfig = serde_json::from_str(cfg).map_err(|e| Error::Format(format!("bad {META_CONFIG}: {e}")))?;
    Ok((cfg, threshold))
}

#[cfg(test)]
mod tests;
