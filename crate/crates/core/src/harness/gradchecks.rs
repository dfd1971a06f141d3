//! Registered finite-difference checks, grouped by module.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{angle_loss, ce_loss, total_loss, AngleLoss, AngleLossParams, LossWeights};
use crate::mim::{mi_loss_with_perm, MimModule};
use crate::model::{DadmModel, ImageSample, ModelConfig};
use crate::nn::{CdcAdapter, CdcConv, EncoderBlock, LayerNorm, ParamGroup, ParamStore, PatchEmbed};
use crate::par::ExecMode;
use crate::pgirm::train::{batch_gradients, batch_loss, Batch, FeatureModel, SampleContext, TrainConfig};
use crate::pgirm::{HyperplaneSet, ReGradMode};
use crate::rng::{self, RngExt};
use crate::tensor::{grad_check_params, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL_SHALLOW: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Tensor,
    Nn,
    Mim,
    Losses,
    Model,
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "tensor" => Self::Tensor,
            "nn" => Self::Nn,
            "mim" => Self::Mim,
            "losses" => Self::Losses,
            "model" => Self::Model,
            other => return Err(Error::InvalidArgument(format!("unknown module {other:?}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: max rel err {:.3e} over {} point(s), tol {:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.max_rel_error,
            self.points,
            self.tol
        )
    }
}

type CheckFn = for<'t> fn(&[Var<'t>], u64) -> Result<Var<'t>>;

struct PrimitiveCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    f: CheckFn,
}

/// Contract a tensor-valued result to a scalar with fixed random weights.
pub(crate) fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = rng::seeded(seed);
    let c = y.tape().leaf(Tensor::randn(&y.shape(), &mut rng));
    y.mul(&c)?.sum()
}

const PRIMITIVES: &[PrimitiveCase] = &[
    PrimitiveCase { name: "add", shapes: &[&[3, 4], &[3, 4]], positive: false, f: |v, w| project(v[0].add(&v[1])?, w) },
    PrimitiveCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], positive: false, f: |v, w| project(v[0].sub(&v[1])?, w) },
    PrimitiveCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], positive: false, f: |v, w| project(v[0].mul(&v[1])?, w) },
    PrimitiveCase { name: "scale", shapes: &[&[5]], positive: false, f: |v, w| project(v[0].scale(-1.7)?, w) },
    PrimitiveCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], positive: false, f: |v, w| project(v[0].matmul(&v[1])?, w) },
    PrimitiveCase { name: "transpose", shapes: &[&[3, 4]], positive: false, f: |v, w| project(v[0].t()?, w) },
    PrimitiveCase { name: "reshape", shapes: &[&[3, 4]], positive: false, f: |v, w| project(v[0].reshape(&[2, 6])?, w) },
    PrimitiveCase { name: "conv2d", shapes: &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]], positive: false, f: |v, w| project(v[0].conv2d(&v[1], Some(&v[2]), 0.0)?, w) },
    PrimitiveCase { name: "conv2d_cdc", shapes: &[&[2, 2, 3, 4], &[2, 2, 3, 3]], positive: false, f: |v, w| project(v[0].conv2d(&v[1], None, 0.7)?, w) },
    PrimitiveCase { name: "sigmoid", shapes: &[&[6]], positive: false, f: |v, w| project(v[0].sigmoid()?, w) },
    PrimitiveCase { name: "relu", shapes: &[&[6]], positive: false, f: |v, w| project(v[0].relu()?, w) },
    PrimitiveCase { name: "gelu", shapes: &[&[6]], positive: false, f: |v, w| project(v[0].gelu()?, w) },
    PrimitiveCase { name: "exp", shapes: &[&[6]], positive: false, f: |v, w| project(v[0].exp()?, w) },
    PrimitiveCase { name: "log", shapes: &[&[6]], positive: true, f: |v, w| project(v[0].log()?, w) },
    PrimitiveCase { name: "mean", shapes: &[&[2, 3]], positive: false, f: |v, _| v[0].mean() },
    PrimitiveCase { name: "sum", shapes: &[&[2, 3]], positive: false, f: |v, _| v[0].sum()?.square() },
    PrimitiveCase { name: "concat_channels", shapes: &[&[1, 2, 2, 3], &[1, 1, 2, 3]], positive: false, f: |v, w| project(v[0].concat_channels(&v[1])?, w) },
    PrimitiveCase { name: "concat_cols", shapes: &[&[3, 2], &[3, 4]], positive: false, f: |v, w| project(v[0].concat_cols(&v[1])?, w) },
    PrimitiveCase { name: "concat_rows", shapes: &[&[2, 3], &[4, 3]], positive: false, f: |v, w| project(v[0].concat_rows(&v[1])?, w) },
    PrimitiveCase { name: "slice_rows", shapes: &[&[5, 3]], positive: false, f: |v, w| project(v[0].slice_rows(1, 4)?, w) },
    PrimitiveCase { name: "slice_channels", shapes: &[&[2, 4, 2, 2]], positive: false, f: |v, w| project(v[0].slice_channels(1, 3)?, w) },
    PrimitiveCase { name: "l2_norm", shapes: &[&[5]], positive: false, f: |v, _| v[0].l2_norm() },
    PrimitiveCase { name: "cosine", shapes: &[&[5], &[5]], positive: false, f: |v, _| v[0].cosine(&v[1]) },
    PrimitiveCase { name: "normalize_rows", shapes: &[&[3, 4]], positive: false, f: |v, w| project(v[0].normalize_rows()?, w) },
    PrimitiveCase { name: "softmax_rows", shapes: &[&[3, 4]], positive: false, f: |v, w| project(v[0].softmax_rows()?, w) },
    PrimitiveCase { name: "log_softmax_rows", shapes: &[&[3, 4]], positive: false, f: |v, w| project(v[0].log_softmax_rows()?, w) },
    PrimitiveCase { name: "layer_norm_rows", shapes: &[&[3, 5]], positive: false, f: |v, w| project(v[0].layer_norm_rows(1e-5)?, w) },
    PrimitiveCase { name: "broadcast_rows", shapes: &[&[4]], positive: false, f: |v, w| project(v[0].broadcast_rows(3)?, w) },
    PrimitiveCase { name: "repeat_channels", shapes: &[&[2, 1, 2, 3]], positive: false, f: |v, w| project(v[0].repeat_channels(3)?, w) },
    PrimitiveCase { name: "permute_rows", shapes: &[&[4, 2]], positive: false, f: |v, w| project(v[0].permute_rows(&[2, 0, 3, 1])?, w) },
    PrimitiveCase { name: "gather", shapes: &[&[3, 3]], positive: false, f: |v, w| project(v[0].gather(&[0, 4, 4, 8, 2])?, w) },
];

/// Every tape primitive at `points` random inputs.
pub fn tensor_checks(points: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (ci, case) in PRIMITIVES.iter().enumerate() {
        let mut rng = rng::stream(seed, ci as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| {
                    let t = Tensor::randn(s, &mut rng);
                    if case.positive {
                        t.map(|x| x.abs() + 0.2)
                    } else {
                        t
                    }
                })
                .collect();
            let w: u64 = rng.random();
            let f = case.f;
            let report = grad_check_params(|v| f(v, w), &inputs, None, STEP, TOL_SHALLOW)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(CheckOutcome {
            module: "tensor",
            name: case.name.to_string(),
            points,
            max_rel_error: worst,
            tol: TOL_SHALLOW,
            passed: worst <= TOL_SHALLOW,
        });
    }
    Ok(out)
}

fn outcome(module: &'static str, name: &str, points: usize, err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome { module, name: name.to_string(), points, max_rel_error: err, tol, passed: err <= tol }
}

/// Checks `f` against every parameter of `store` plus the extra `inputs`.
fn block_check<F>(module: &'static str, name: &str, store: &ParamStore, inputs: Vec<Tensor>, f: F) -> Result<CheckOutcome>
where
    F: for<'t> Fn(&[Var<'t>], &[Var<'t>]) -> Result<Var<'t>>,
{
    let np = store.len();
    let mut points = store.values().to_vec();
    points.extend(inputs);
    let report = grad_check_params(|v| f(&v[..np], &v[np..]), &points, None, STEP, TOL_SHALLOW)?;
    Ok(outcome(module, name, 1, report.max_rel_error, TOL_SHALLOW))
}

/// Patch embedding, CDC convolution, adapter, layer norm and encoder block.
pub fn nn_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 2, 4, 6, 2, 3, &mut rng)?;
    let image = Tensor::randn(&[2, 4, 6], &mut rng);
    let w: u64 = rng.random();
    out.push(block_check("nn", "patch_embed", &store, vec![image], |p, x| project(pe.forward(p, &x[0])?, w))?);

    for theta in [0.0, 0.7, 1.0] {
        let mut store = ParamStore::new();
        let conv = CdcConv::new(&mut store, "c", 3, 2, 3, theta, true, ParamGroup::Adapter, &mut rng)?;
        let x = Tensor::randn(&[1, 3, 4, 5], &mut rng);
        let w: u64 = rng.random();
        out.push(block_check("nn", &format!("cdc_conv(theta={theta})"), &store, vec![x], |p, x| {
            project(conv.forward(p, &x[0])?, w)
        })?);
    }

    let mut store = ParamStore::new();
    let adapter = CdcAdapter::new(&mut store, "a", 3, 0.7, &mut rng)?;
    let x = Tensor::randn(&[1, 3, 3, 3], &mut rng);
    let w: u64 = rng.random();
    out.push(block_check("nn", "cdc_adapter", &store, vec![x], |p, x| project(adapter.forward(p, &x[0])?, w))?);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4, ParamGroup::Backbone);
    for v in store.values_mut() {
        *v = Tensor::randn(v.shape(), &mut rng);
    }
    let x = Tensor::randn(&[3, 4], &mut rng);
    let w: u64 = rng.random();
    out.push(block_check("nn", "layer_norm", &store, vec![x], |p, x| project(ln.forward(p, &x[0])?, w))?);

    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "b", 4, (2, 2), 0.7, &mut rng)?;
    let x = Tensor::randn(&[5, 4], &mut rng);
    let w: u64 = rng.random();
    out.push(block_check("nn", "encoder_block", &store, vec![x], |p, x| project(block.forward(p, &x[0])?, w))?);
    Ok(out)
}

/// The MIM module forward, every output contracted into one scalar.
pub fn mim_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for theta in [0.0, 0.7] {
        let mut store = ParamStore::new();
        let mim = MimModule::new(&mut store, "m", 3, (2, 3), theta, &mut rng)?;
        let z1 = Tensor::randn(&[6, 3], &mut rng);
        let z2 = Tensor::randn(&[6, 3], &mut rng);
        let w: u64 = rng.random();
        out.push(block_check("mim", &format!("mim_forward(fuse_theta={theta})"), &store, vec![z1, z2], |p, z| {
            let o = mim.forward(p, &z[0], &z[1])?;
            let mut s = project(o.out1, w)?.add(&project(o.out2, w ^ 1)?)?;
            s = s.add(&project(o.aligned1, w ^ 2)?)?.add(&project(o.aligned2, w ^ 3)?)?;
            s = s.add(&project(o.mask1, w ^ 4)?)?.add(&project(o.mask2, w ^ 5)?)?;
            s.add(&o.mi1.scale(0.7)?)?.add(&o.mi2.scale(-1.3)?)
        })?);
    }
    Ok(out)
}

/// Token loss, angle loss, cross-entropy and the weighted total.
pub fn losses_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    let perm = rng::derangement(6, &mut rng);
    let tokens: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[6], &mut rng)).collect();
    let report = grad_check_params(
        |v| mi_loss_with_perm(&v[0], &v[1], &perm),
        &tokens[..2],
        None,
        STEP,
        TOL_SHALLOW,
    )?;
    out.push(outcome("losses", "mi_token_loss", 1, report.max_rel_error, TOL_SHALLOW));

    let feats: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[8, 4], &mut rng)).collect();
    let labels = [1u8, 0, 1, 0, 1, 1, 0, 0];
    let envs = [0usize, 0, 1, 1, 2, 2, 0, 1];
    let params = AngleLossParams::default();
    let report = grad_check_params(
        |v| match angle_loss(v, &labels, &envs, &params)? {
            AngleLoss::Value(x) => Ok(x),
            AngleLoss::NotApplicable => Err(Error::InvalidArgument("angle loss not applicable".into())),
        },
        &feats,
        None,
        STEP,
        TOL_SHALLOW,
    )?;
    out.push(outcome("losses", "angle_loss", 1, report.max_rel_error, TOL_SHALLOW));

    let logits = Tensor::randn(&[8, 2], &mut rng);
    let report = grad_check_params(|v| ce_loss(&v[0], &labels), std::slice::from_ref(&logits), None, STEP, TOL_SHALLOW)?;
    out.push(outcome("losses", "cross_entropy", 1, report.max_rel_error, TOL_SHALLOW));

    let mut points = vec![logits];
    points.extend(feats);
    points.extend(tokens[..2].iter().cloned());
    let weights = LossWeights::default();
    let report = grad_check_params(
        |v| {
            let ce = ce_loss(&v[0], &labels)?;
            let angle = angle_loss(&v[1..4], &labels, &envs, &params)?;
            let mi = mi_loss_with_perm(&v[4], &v[5], &perm)?;
            total_loss(&ce, Some(&mi), &angle, &weights)
        },
        &points,
        None,
        STEP,
        TOL_SHALLOW,
    )?;
    out.push(outcome("losses", "total_loss", 1, report.max_rel_error, TOL_SHALLOW));
    Ok(out)
}

/// Relative error with a `1e-6` floor. The end-to-end loss is O(1), so central
/// differences with step `1e-5` cannot resolve gradients much below that.
fn rel_err_floor(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the training gradients of a full minibatch loss (every parameter
/// gradient and every hyperplane gradient) against central differences on a
/// random `fraction` of the trainable weights and all hyperplane entries.
/// Gradient surgery must be disabled in `batch`.
pub fn model_check<M: FeatureModel + Clone>(
    model: &M,
    betas: &HyperplaneSet,
    batch: &Batch<'_, '_, M::Input>,
    config: &TrainConfig,
    perm: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<CheckOutcome> {
    if batch.ctxs.iter().any(|c| c.regrad != ReGradMode::Disabled) {
        return Err(Error::InvalidArgument("end-to-end check needs gradient surgery disabled".into()));
    }
    let analytic = batch_gradients(model, betas, batch, config, perm)?;
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (j, g) in analytic.params.iter().enumerate() {
        if let Some(g) = g {
            coords.extend((0..g.numel()).map(|k| (j, k)));
        }
    }
    let mut rng = rng::seeded(seed);
    let take = ((coords.len() as f64 * fraction).ceil() as usize).clamp(1, coords.len().max(1));
    let mut picked: Vec<(usize, usize)> =
        rand::seq::index::sample(&mut rng, coords.len(), take).into_iter().map(|i| coords[i]).collect();
    picked.sort_unstable();

    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for &(j, k) in &picked {
        let orig = work.store().values()[j].data()[k];
        work.store_mut().values_mut()[j].data_mut()[k] = orig + STEP;
        let up = batch_loss(&work, betas, batch, config, perm)?.total;
        work.store_mut().values_mut()[j].data_mut()[k] = orig - STEP;
        let down = batch_loss(&work, betas, batch, config, perm)?.total;
        work.store_mut().values_mut()[j].data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let a = analytic.params[j].as_ref().expect("picked from trainable").data()[k];
        worst = worst.max(rel_err_floor(a, fd));
    }
    let mut beta_points = 0;
    for e in 0..betas.len() {
        for k in 0..betas.width() {
            let mut shifted = betas.betas().to_vec();
            shifted[e].data_mut()[k] += STEP;
            let up = batch_loss(model, &HyperplaneSet::new(betas.envs().to_vec(), shifted.clone())?, batch, config, perm)?.total;
            shifted[e].data_mut()[k] -= 2.0 * STEP;
            let down = batch_loss(model, &HyperplaneSet::new(betas.envs().to_vec(), shifted)?, batch, config, perm)?.total;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err_floor(analytic.betas[e].data()[k], fd));
            beta_points += 1;
        }
    }
    Ok(outcome("model", "end_to_end", picked.len() + beta_points, worst, TOL_END_TO_END))
}

/// End-to-end check of the default model on a small two-environment batch.
pub fn model_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::seeded(seed);
    let config = ModelConfig::default();
    let model = DadmModel::new(config.clone(), &mut rng)?;
    let betas = HyperplaneSet::new(
        vec![0, 1],
        (0..2).map(|_| Tensor::randn(&[config.feature_dim + 1], &mut rng).scaled(0.5)).collect(),
    )?;
    let shape = [3, config.height, config.width];
    let samples: Vec<ImageSample> = (0..4)
        .map(|_| ImageSample { images: [0, 1, 2].map(|_| Tensor::randn(&shape, &mut rng)), presence: [true; 3] })
        .collect();
    let inputs: Vec<&ImageSample> = samples.iter().collect();
    let labels = [1u8, 0, 1, 0];
    let envs = [0usize, 0, 1, 1];
    let ctxs = [SampleContext { drop: [false; 3], regrad: ReGradMode::Disabled }; 4];
    let batch = Batch { inputs: &inputs, labels: &labels, envs: &envs, ctxs: &ctxs };
    let train = TrainConfig { exec: ExecMode::Parallel, ..TrainConfig::default() };
    Ok(vec![model_check(&model, &betas, &batch, &train, &[2, 3, 1, 0], 0.01, seed)?])
}

/// Every check registered for `module`.
pub fn run(module: CheckModule, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Tensor) {
        out.extend(tensor_checks(20, seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Nn) {
        out.extend(nn_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Mim) {
        out.extend(mim_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Losses) {
        out.extend(losses_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Model) {
        out.extend(model_checks(seed)?);
    }
    Ok(out)
}
