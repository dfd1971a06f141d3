//! Minibatch training.
//!
//! Each sample runs forward on its own tape (in parallel when enabled). The
//! batch-level losses are then built on a small head tape over the stacked
//! per-sample outputs; its gradients seed one backward pass per sample tape.
//! Parameter gradients are summed in sample order, so the result does not
//! depend on the execution mode.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{pgirm_step, inference_score, HyperplaneSet, PgIrmConfig, ReGradMode};
use crate::error::{shape_err, Error, Result};
use crate::harness::metrics::auc;
use crate::losses::{angle_loss, ce_loss, total_loss, AngleLoss, AngleLossParams, LossWeights};
use crate::mim::{layer_mi_loss, TokenPair};
use crate::nn::{ParamGroup, ParamStore};
use crate::par::{self, ExecMode};
use crate::rng::{self, Rng, RngExt};
use crate::tensor::{NodeId, Tape, Tensor, Var};

/// Per-sample switches for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleContext {
    /// Modalities to treat as absent on top of the record's own flags.
    pub drop: [bool; 3],
    pub regrad: ReGradMode,
}

/// What one forward pass exposes to the batch-level losses.
#[derive(Clone, Debug)]
pub struct SampleOutputs<'t> {
    /// Fused feature `(d_f)`.
    pub fused: Var<'t>,
    /// Per-modality top-level features, each `(d)`.
    pub modality: Vec<Var<'t>>,
    /// Per layer, the scalar MI tokens of each modality pair.
    pub tokens: Vec<[(Var<'t>, Var<'t>); 3]>,
}

pub trait FeatureModel: Sync {
    type Input: Sync;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn feature_dim(&self) -> usize;
    /// Whether the optimizer may change parameters of `group`.
    fn trainable(&self, group: ParamGroup) -> bool;
    fn forward_sample<'t>(
        &self,
        p: &[Var<'t>],
        input: &Self::Input,
        ctx: &SampleContext,
    ) -> Result<SampleOutputs<'t>>;

    /// Fused feature value for one sample.
    fn features(&self, input: &Self::Input, ctx: &SampleContext) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store().bind(&tape);
        Ok(self.forward_sample(&p, input, ctx)?.fused.value())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pgirm: PgIrmConfig,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub angle: AngleLossParams,
    pub regrad: ReGradMode,
    /// Per-modality drop probability during training (flexible protocol).
    pub drop_prob: f64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pgirm: PgIrmConfig::default(),
            batch_size: 32,
            weight_decay: 1e-3,
            weights: LossWeights::default(),
            angle: AngleLossParams::default(),
            regrad: ReGradMode::default(),
            drop_prob: 0.0,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pgirm.validate()?;
        self.angle.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.weight_decay < 0.0 || self.weights.lambda_mi < 0.0 || self.weights.lambda_angle < 0.0 {
            return Err(Error::Config("weight decay and loss coefficients must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop probability must lie in [0, 1], got {}", self.drop_prob)));
        }
        Ok(())
    }
}

/// Labelled samples drawn from several environments.
#[derive(Clone, Debug)]
pub struct Samples<'a, I> {
    pub inputs: Vec<&'a I>,
    pub labels: Vec<u8>,
    pub envs: Vec<usize>,
}

impl<'a, I> Samples<'a, I> {
    pub fn new(inputs: Vec<&'a I>, labels: Vec<u8>, envs: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() || inputs.len() != envs.len() {
            return shape_err(
                "Samples",
                format!("{} inputs, {} labels, {} envs", inputs.len(), labels.len(), envs.len()),
            );
        }
        Ok(Self { inputs, labels, envs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Distinct environment ids in ascending order.
    pub fn env_ids(&self) -> Vec<usize> {
        let mut e = self.envs.clone();
        e.sort_unstable();
        e.dedup();
        e
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BatchStats {
    pub ce: f64,
    pub mi: Option<f64>,
    pub angle: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub alpha: f64,
    pub ce: f64,
    pub mi: Option<f64>,
    pub angle: Option<f64>,
    pub total: f64,
    pub beta_max_distance: f64,
    pub val_auc: Option<f64>,
}

/// Everything a forward pass left on a sample tape that the second phase needs.
struct SampleRun {
    tape: Tape,
    num_params: usize,
    outputs: Vec<NodeId>,
    fused: Tensor,
    modality: Vec<Tensor>,
    tokens: Vec<f64>,
}

fn run_forward<M: FeatureModel>(model: &M, input: &M::Input, ctx: &SampleContext) -> Result<SampleRun> {
    let tape = Tape::new();
    let (num_params, outputs, fused, modality, tokens) = {
        let p = model.store().bind(&tape);
        let out = model.forward_sample(&p, input, ctx)?;
        let mut ids = vec![out.fused.id()];
        ids.extend(out.modality.iter().map(Var::id));
        let mut tokens = Vec::new();
        for layer in &out.tokens {
            for (a, b) in layer {
                ids.push(a.id());
                ids.push(b.id());
                tokens.push(a.item()?);
                tokens.push(b.item()?);
            }
        }
        let modality = out.modality.iter().map(Var::value).collect();
        (p.len(), ids, out.fused.value(), modality, tokens)
    };
    Ok(SampleRun { tape, num_params, outputs, fused, modality, tokens })
}

/// Gradient of `sum_k <output_k, seed_k>` with respect to every parameter.
fn run_backward(run: SampleRun, seeds: &[Tensor], trainable: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let tape = &run.tape;
    let mut surrogate: Option<Var<'_>> = None;
    for (&id, seed) in run.outputs.iter().zip(seeds) {
        let out = tape.var(id);
        let s = tape.leaf(seed.clone().reshape(&out.shape())?);
        let term = out.mul(&s)?.sum()?;
        surrogate = Some(match surrogate {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let surrogate = surrogate.ok_or_else(|| Error::InvalidArgument("sample produced no outputs".into()))?;
    let mut grads = tape.backward(surrogate)?;
    Ok((0..run.num_params)
        .map(|j| trainable[j].then(|| grads.take(j)))
        .collect())
}

fn stack_rows(rows: &[&Tensor]) -> Tensor {
    let width = rows.first().map_or(0, |r| r.numel());
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), width], data).expect("stacked rows")
}

fn row_of(t: &Tensor, i: usize) -> Tensor {
    Tensor::vector(t.row(i).to_vec())
}

/// Losses for one batch, built over stacked per-sample outputs.
struct HeadResult {
    stats: BatchStats,
    /// Per sample, one seed per recorded output.
    seeds: Vec<Vec<Tensor>>,
    beta_grads: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn head(
    runs: &[SampleRun],
    labels: &[u8],
    envs: &[usize],
    env_index: &[usize],
    betas: &HyperplaneSet,
    config: &TrainConfig,
    perm: &[usize],
) -> Result<HeadResult> {
    let n = runs.len();
    let e = betas.len();
    let tape = Tape::new();
    let fused = tape.leaf(stack_rows(&runs.iter().map(|r| &r.fused).collect::<Vec<_>>()));
    let num_mod = runs[0].modality.len();
    let modality: Vec<Var<'_>> = (0..num_mod)
        .map(|m| tape.leaf(stack_rows(&runs.iter().map(|r| &r.modality[m]).collect::<Vec<_>>())))
        .collect();
    let num_tok = runs[0].tokens.len();
    if runs.iter().any(|r| r.tokens.len() != num_tok || r.modality.len() != num_mod) {
        return shape_err("train_batch", "samples disagree on output layout");
    }
    let tokens: Vec<Var<'_>> = (0..num_tok)
        .map(|k| tape.leaf(Tensor::vector(runs.iter().map(|r| r.tokens[k]).collect())))
        .collect();
    let beta = tape.leaf(stack_rows(&betas.betas().iter().collect::<Vec<_>>()));

    let with_bias = fused.concat_cols(&tape.leaf(Tensor::ones(&[n, 1])))?;
    let all_scores = with_bias.matmul(&beta.t()?)?;
    let own: Vec<usize> = env_index.iter().enumerate().map(|(i, &k)| i * e + k).collect();
    let scores = all_scores.gather(&own)?.reshape(&[n, 1])?;
    let logits = tape.leaf(Tensor::zeros(&[n, 1])).concat_cols(&scores)?;
    let ce = ce_loss(&logits, labels)?;

    let mi = if num_tok > 0 && config.weights.lambda_mi > 0.0 {
        let layers: Vec<[TokenPair<'_>; 3]> = tokens
            .chunks(6)
            .map(|c| [(c[0], c[1]), (c[2], c[3]), (c[4], c[5])])
            .collect();
        Some(layer_mi_loss(&layers, perm)?)
    } else {
        None
    };
    let angle = if config.weights.lambda_angle > 0.0 && num_mod > 0 {
        angle_loss(&modality, labels, envs, &config.angle)?
    } else {
        AngleLoss::NotApplicable
    };
    let total = total_loss(&ce, mi.as_ref(), &angle, &config.weights)?;
    let stats = BatchStats {
        ce: ce.item()?,
        mi: mi.map(|v| v.item()).transpose()?,
        angle: angle.value().map(|v| v.item()).transpose()?,
        total: total.item()?,
    };

    let grads = tape.backward(total)?;
    let g_fused = grads.wrt(&fused);
    let g_mod: Vec<Tensor> = modality.iter().map(|v| grads.wrt(v)).collect();
    let g_tok: Vec<Tensor> = tokens.iter().map(|v| grads.wrt(v)).collect();
    let g_beta = grads.wrt(&beta);
    let seeds = (0..n)
        .map(|i| {
            let mut s = vec![row_of(&g_fused, i)];
            s.extend(g_mod.iter().map(|g| row_of(g, i)));
            s.extend(g_tok.iter().map(|g| Tensor::scalar(g.data()[i])));
            s
        })
        .collect();
    let beta_grads = (0..e).map(|k| row_of(&g_beta, k)).collect();
    Ok(HeadResult { stats, seeds, beta_grads })
}

/// A minibatch with one context per sample.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'b, 'a, I> {
    pub inputs: &'b [&'a I],
    pub labels: &'b [u8],
    pub envs: &'b [usize],
    pub ctxs: &'b [SampleContext],
}

impl<I> Batch<'_, '_, I> {
    fn check(&self, betas: &HyperplaneSet, feature_dim: usize) -> Result<Vec<usize>> {
        let n = self.inputs.len();
        if self.labels.len() != n || self.envs.len() != n || self.ctxs.len() != n {
            return shape_err("train_batch", "inputs, labels, envs and contexts differ in length");
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!("batch of {n} samples; need at least 2")));
        }
        if betas.len() >= 2 && self.envs.iter().all(|&e| e == self.envs[0]) {
            return Err(Error::InvalidArgument(format!(
                "minibatch drawn from a single environment ({}); batches must mix at least 2",
                self.envs[0]
            )));
        }
        if betas.width() != feature_dim + 1 {
            return shape_err(
                "train_batch",
                format!("beta width {} for feature width {feature_dim}", betas.width()),
            );
        }
        self.envs
            .iter()
            .map(|&e| {
                betas
                    .index_of(e)
                    .ok_or_else(|| Error::InvalidArgument(format!("no classifier for environment {e}")))
            })
            .collect()
    }
}

/// Loss values and gradients of one minibatch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub stats: BatchStats,
    /// Per parameter, `None` for frozen groups.
    pub params: Vec<Option<Tensor>>,
    /// Per environment, in hyperplane order.
    pub betas: Vec<Tensor>,
}

/// Total-loss gradients for a minibatch. `perm` pairs samples for the MI term.
pub fn batch_gradients<M: FeatureModel>(
    model: &M,
    betas: &HyperplaneSet,
    batch: &Batch<'_, '_, M::Input>,
    config: &TrainConfig,
    perm: &[usize],
) -> Result<BatchGradients> {
    let env_index = batch.check(betas, model.feature_dim())?;
    let n = batch.inputs.len();
    let runs = par::try_map(config.exec, n, |i| run_forward(model, batch.inputs[i], &batch.ctxs[i]))?;
    let head = head(&runs, batch.labels, batch.envs, &env_index, betas, config, perm)?;

    let trainable: Vec<bool> = model.store().groups().iter().map(|&g| model.trainable(g)).collect();
    let jobs: Vec<(SampleRun, Vec<Tensor>)> = runs.into_iter().zip(head.seeds).collect();
    let per_sample: Vec<Vec<Option<Tensor>>> =
        par::map_owned(config.exec, jobs, |(run, seeds)| run_backward(run, &seeds, &trainable))
            .into_iter()
            .collect::<Result<_>>()?;
    let params = model
        .store()
        .values()
        .iter()
        .enumerate()
        .map(|(j, v)| {
            trainable[j].then(|| {
                let mut g = Tensor::zeros(v.shape());
                for s in &per_sample {
                    if let Some(gs) = &s[j] {
                        g.add_assign_raw(gs);
                    }
                }
                g
            })
        })
        .collect();
    Ok(BatchGradients { stats: head.stats, params, betas: head.beta_grads })
}

/// Loss values of a minibatch without the per-sample backward passes.
pub fn batch_loss<M: FeatureModel>(
    model: &M,
    betas: &HyperplaneSet,
    batch: &Batch<'_, '_, M::Input>,
    config: &TrainConfig,
    perm: &[usize],
) -> Result<BatchStats> {
    let env_index = batch.check(betas, model.feature_dim())?;
    let runs = par::try_map(config.exec, batch.inputs.len(), |i| {
        run_forward(model, batch.inputs[i], &batch.ctxs[i])
    })?;
    Ok(head(&runs, batch.labels, batch.envs, &env_index, betas, config, perm)?.stats)
}

/// One optimization step on a minibatch. Shared weights take a gradient step
/// with decoupled weight decay; betas take a projected step.
pub fn train_batch<M: FeatureModel>(
    model: &mut M,
    betas: &mut HyperplaneSet,
    batch: &Batch<'_, '_, M::Input>,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<BatchStats> {
    let perm = rng::derangement(batch.inputs.len(), rng);
    let grads = batch_gradients(model, betas, batch, config, &perm)?;
    let lr = config.pgirm.lr;
    let decay = 1.0 - lr * config.weight_decay;
    for (value, g) in model.store_mut().values_mut().iter_mut().zip(&grads.params) {
        let Some(g) = g else { continue };
        *value = value.scaled(decay);
        value.axpy(-lr, g)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "weight update" });
        }
    }
    let (new_betas, _) = pgirm_step(betas, &grads.betas, lr, config.pgirm.alpha_at(epoch))?;
    *betas = new_betas;
    Ok(grads.stats)
}

/// Shuffled minibatches in which every batch mixes environments whenever the
/// data holds more than one. Each environment is spread evenly over the
/// epoch.
pub fn environment_batches(envs: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut ids = envs.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut queues: Vec<Vec<usize>> = ids
        .iter()
        .map(|&e| {
            let mut q: Vec<usize> = (0..envs.len()).filter(|&i| envs[i] == e).collect();
            q.shuffle(rng);
            q
        })
        .collect();
    // each environment is spread evenly over the epoch by its relative position
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(envs.len());
    for (e, q) in queues.iter().enumerate() {
        for (k, &i) in q.iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / q.len() as f64, e, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    queues.clear();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    // a short or single-environment tail joins the previous batch
    if batches.len() >= 2 {
        let last = batches.last().expect("non-empty");
        let mixed = last.iter().any(|&i| envs[i] != envs[last[0]]);
        if last.len() < 2 || (ids.len() >= 2 && !mixed) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
    }
    batches
}

/// Per-sample contexts with modalities dropped independently at `p`, keeping
/// at least one.
pub fn draw_contexts(n: usize, p: f64, regrad: ReGradMode, rng: &mut Rng) -> Vec<SampleContext> {
    (0..n)
        .map(|_| {
            let mut drop = [false; 3];
            if p > 0.0 {
                for d in &mut drop {
                    *d = rng.random::<f64>() < p;
                }
                if drop.iter().all(|&d| d) {
                    drop[rng.random_range(0..3)] = false;
                }
            }
            SampleContext { drop, regrad }
        })
        .collect()
}

/// Mean-hyperplane scores, one per input.
pub fn predict<M: FeatureModel>(
    model: &M,
    betas: &HyperplaneSet,
    inputs: &[&M::Input],
    ctxs: &[SampleContext],
    exec: ExecMode,
) -> Result<Vec<f64>> {
    if ctxs.len() != inputs.len() {
        return shape_err("predict", format!("{} contexts for {} inputs", ctxs.len(), inputs.len()));
    }
    par::try_map(exec, inputs.len(), |i| inference_score(&model.features(inputs[i], &ctxs[i])?, betas))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

/// Validation inputs with fixed per-sample contexts.
pub struct Validation<'a, I> {
    pub samples: Samples<'a, I>,
    pub ctxs: Vec<SampleContext>,
}

/// Runs `config.pgirm.epochs` epochs. With a validation split, the weights and
/// betas of the epoch with the best validation AUC are restored at the end.
pub fn fit<M: FeatureModel>(
    model: &mut M,
    betas: &mut HyperplaneSet,
    train: &Samples<'_, M::Input>,
    val: Option<&Validation<'_, M::Input>>,
    config: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<FitReport> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 training samples".into()));
    }
    let mut best: Option<(f64, usize, Vec<Tensor>, HyperplaneSet)> = None;
    let mut epochs = Vec::with_capacity(config.pgirm.epochs);
    for epoch in 0..config.pgirm.epochs {
        let batches = environment_batches(&train.envs, config.batch_size, rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut counts = (0usize, 0usize);
        for idx in &batches {
            let inputs: Vec<&M::Input> = idx.iter().map(|&i| train.inputs[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let envs: Vec<usize> = idx.iter().map(|&i| train.envs[i]).collect();
            let ctxs = draw_contexts(idx.len(), config.drop_prob, config.regrad, rng);
            let batch = Batch { inputs: &inputs, labels: &labels, envs: &envs, ctxs: &ctxs };
            let s = train_batch(model, betas, &batch, config, epoch, rng)?;
            sums.0 += s.ce;
            sums.3 += s.total;
            if let Some(m) = s.mi {
                sums.1 += m;
                counts.0 += 1;
            }
            if let Some(a) = s.angle {
                sums.2 += a;
                counts.1 += 1;
            }
        }
        let nb = batches.len() as f64;
        let val_auc = match val {
            Some(v) => {
                let scores = predict(model, betas, &v.samples.inputs, &v.ctxs, config.exec)?;
                Some(auc(&scores, &v.samples.labels)?)
            }
            None => None,
        };
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|b| a > b.0) {
                best = Some((a, epoch, model.store().values().to_vec(), betas.clone()));
            }
        }
        let stats = EpochStats {
            epoch,
            alpha: config.pgirm.alpha_at(epoch),
            ce: sums.0 / nb,
            mi: (counts.0 > 0).then(|| sums.1 / counts.0 as f64),
            angle: (counts.1 > 0).then(|| sums.2 / counts.1 as f64),
            total: sums.3 / nb,
            beta_max_distance: betas.max_pairwise_distance(),
            val_auc,
        };
        log::debug!("epoch {epoch}: total {:.5} ce {:.5}", stats.total, stats.ce);
        on_epoch(&stats);
        epochs.push(stats);
    }
    let (best_epoch, best_val_auc) = match best {
        Some((a, e, values, b)) => {
            for (dst, src) in model.store_mut().values_mut().iter_mut().zip(values) {
                *dst = src;
            }
            *betas = b;
            (Some(e), Some(a))
        }
        None => (None, None),
    };
    Ok(FitReport { epochs, best_epoch, best_val_auc })
}
