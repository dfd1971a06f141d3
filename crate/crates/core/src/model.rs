//! Three-branch RGB / depth / infrared encoder with MIM modules between
//! layers, a fused feature head, and substitutes for absent modalities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mim::MimModule;
use crate::nn::{EncoderBlock, Linear, ParamGroup, ParamId, ParamStore, PatchEmbed};
use crate::pgirm::checkpoint::Checkpoint;
use crate::pgirm::train::{FeatureModel, SampleContext, SampleOutputs};
use crate::pgirm::{regrad_pair, HyperplaneSet, ReGradMode};
use crate::rng::{self, Rng};
use crate::tensor::{Tensor, Var};

pub const MODALITIES: [&str; 3] = ["rgb", "depth", "ir"];

/// Modality pairs served by the three MIM modules of each layer.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MimMerge {
    /// MIM output replaces the patch tokens.
    #[default]
    Replace,
    /// MIM output is added to the patch tokens.
    Additive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubstituteMode {
    #[default]
    Zero,
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub adapter_theta: f64,
    pub fuse_theta: f64,
    pub use_mim: bool,
    pub merge: MimMerge,
    pub substitute: SubstituteMode,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            d: 16,
            layers: 4,
            feature_dim: 32,
            adapter_theta: 0.7,
            fuse_theta: 0.0,
            use_mim: true,
            merge: MimMerge::Replace,
            substitute: SubstituteMode::Zero,
            freeze_backbone: false,
        }
    }
}

/// Three `(3, H, W)` images and which of them were captured.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub images: [Tensor; 3],
    pub presence: [bool; 3],
}

#[derive(Clone, Debug)]
pub struct DadmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    embeds: Vec<PatchEmbed>,
    blocks: Vec<Vec<EncoderBlock>>,
    mims: Vec<Vec<MimModule>>,
    head: Linear,
    substitutes: Option<[ParamId; 3]>,
}

/// Forward activations kept for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace<'t> {
    pub outputs: SampleOutputs<'t>,
    /// Per layer, each modality's tokens after its encoder block and before
    /// any MIM module.
    pub pre_mim: Vec<[Var<'t>; 3]>,
    pub mim: Vec<Vec<crate::mim::MimOutput<'t>>>,
}

impl DadmModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.layers == 0 || config.d == 0 || config.feature_dim == 0 {
            return Err(Error::Config("layers, d and feature_dim must be positive".into()));
        }
        let mut store = ParamStore::new();
        let embeds = MODALITIES
            .iter()
            .map(|m| {
                PatchEmbed::new(&mut store, &format!("embed.{m}"), 3, config.height, config.width, config.patch, config.d, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = embeds[0].grid();
        let mut blocks = Vec::with_capacity(config.layers);
        let mut mims = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(
                MODALITIES
                    .iter()
                    .map(|m| EncoderBlock::new(&mut store, &format!("layer{l}.{m}"), config.d, grid, config.adapter_theta, rng))
                    .collect::<Result<Vec<_>>>()?,
            );
            if config.use_mim {
                mims.push(
                    PAIRS
                        .iter()
                        .map(|&(a, b)| {
                            let name = format!("layer{l}.mim.{}_{}", MODALITIES[a], MODALITIES[b]);
                            MimModule::new(&mut store, &name, config.d, grid, config.fuse_theta, rng)
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        let head = Linear::new(&mut store, "head", 3 * config.d, config.feature_dim, true, ParamGroup::Head, rng);
        let substitutes = (config.substitute == SubstituteMode::Learnable).then(|| {
            let shape = [3, config.height, config.width];
            [0, 1, 2].map(|m| store.add(format!("substitute.{}", MODALITIES[m]), Tensor::zeros(&shape), ParamGroup::Substitute))
        });
        Ok(Self { config, store, embeds, blocks, mims, head, substitutes })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.config.height, self.config.width]
    }

    /// Full forward pass with every intermediate the tests need.
    pub fn trace<'t>(&self, p: &[Var<'t>], input: &ImageSample, ctx: &SampleContext) -> Result<ForwardTrace<'t>> {
        let tape = p.first().ok_or_else(|| Error::InvalidArgument("no parameters bound".into()))?.tape();
        let present: [bool; 3] = [0, 1, 2].map(|m| input.presence[m] && !ctx.drop[m]);
        if present.iter().all(|&x| !x) {
            return Err(Error::InvalidArgument("all three modalities are absent".into()));
        }
        let shape = self.image_shape();
        let mut tokens = Vec::with_capacity(3);
        for m in 0..3 {
            let image = if present[m] {
                if input.images[m].shape() != shape {
                    return shape_err("dadm_forward", format!("{} image {:?}, expected {shape:?}", MODALITIES[m], input.images[m].shape()));
                }
                tape.leaf(input.images[m].clone())
            } else {
                match self.substitutes {
                    Some(ids) => p[ids[m].0],
                    None => tape.leaf(Tensor::zeros(&shape)),
                }
            };
            tokens.push(self.embeds[m].forward(p, &image)?);
        }

        let accumulated = self.config.use_mim && ctx.regrad == ReGradMode::Accumulated;
        let acc_hook = if accumulated {
            let (hooked, handle) = tape.grad_hook(
                &tokens,
                Box::new(|g: &mut [Tensor], s: &[f64]| {
                    for (a, b) in PAIRS {
                        let (lo, hi) = g.split_at_mut(b);
                        regrad_pair(&mut lo[a], &mut hi[0], s[a], s[b]);
                    }
                }),
            )?;
            tokens = hooked;
            Some(handle)
        } else {
            None
        };

        let n = tokens[0].shape()[0];
        let mut pre_mim = Vec::with_capacity(self.config.layers);
        let mut mim_out = Vec::with_capacity(self.config.layers);
        let mut token_pairs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let pre: Vec<Var<'t>> = (0..3).map(|m| self.blocks[l][m].forward(p, &tokens[m])).collect::<Result<_>>()?;
            pre_mim.push([pre[0], pre[1], pre[2]]);
            if !self.config.use_mim {
                tokens = pre;
                continue;
            }
            let patches: Vec<Var<'t>> = pre.iter().map(|t| t.slice_rows(1, n)).collect::<Result<_>>()?;
            let mut merged: Vec<Option<Var<'t>>> = vec![None; 3];
            let mut outs = Vec::with_capacity(3);
            let mut pairs = Vec::with_capacity(3);
            for (k, &(a, b)) in PAIRS.iter().enumerate() {
                let (za, zb, handle) = if ctx.regrad == ReGradMode::PerModule {
                    let (h, handle) = tape.grad_hook(
                        &[patches[a], patches[b]],
                        Box::new(|g: &mut [Tensor], s: &[f64]| {
                            let (x, y) = g.split_at_mut(1);
                            regrad_pair(&mut x[0], &mut y[0], s[0], s[1]);
                        }),
                    )?;
                    (h[0], h[1], Some(handle))
                } else {
                    (patches[a], patches[b], None)
                };
                let out = self.mims[l][k].forward(p, &za, &zb)?;
                if let Some(handle) = handle {
                    tape.bind_hook_scalars(handle, &[out.mi1, out.mi2])?;
                }
                for (m, o) in [(a, out.out1), (b, out.out2)] {
                    merged[m] = Some(match merged[m] {
                        Some(acc) => acc.add(&o)?,
                        None => o,
                    });
                }
                pairs.push((out.mi1, out.mi2));
                outs.push(out);
            }
            for m in 0..3 {
                let avg = merged[m].expect("every modality is in two pairs").scale(0.5)?;
                let next = match self.config.merge {
                    MimMerge::Replace => avg,
                    MimMerge::Additive => patches[m].add(&avg)?,
                };
                tokens[m] = pre[m].slice_rows(0, 1)?.concat_rows(&next)?;
            }
            token_pairs.push([pairs[0], pairs[1], pairs[2]]);
            mim_out.push(outs);
        }

        if let Some(handle) = acc_hook {
            // layer-averaged MI token of each modality over its two pairings
            let mut sums: Vec<Option<Var<'t>>> = vec![None; 3];
            for layer in &token_pairs {
                for (&(a, b), &(ta, tb)) in PAIRS.iter().zip(layer) {
                    for (m, t) in [(a, ta), (b, tb)] {
                        sums[m] = Some(match sums[m] {
                            Some(s) => s.add(&t)?,
                            None => t,
                        });
                    }
                }
            }
            let scale = 1.0 / (2 * token_pairs.len()) as f64;
            let avgs: Vec<Var<'t>> = sums.into_iter().map(|s| s.expect("non-empty").scale(scale)).collect::<Result<_>>()?;
            tape.bind_hook_scalars(handle, &avgs)?;
        }

        let cls: Vec<Var<'t>> = tokens.iter().map(|t| t.slice_rows(0, 1)).collect::<Result<_>>()?;
        let joined = cls[0].concat_cols(&cls[1])?.concat_cols(&cls[2])?;
        let fused = self
            .head
            .forward(p, &joined)?
            .normalize_rows()?
            .reshape(&[self.config.feature_dim])?;
        let modality = cls.iter().map(|c| c.reshape(&[self.config.d])).collect::<Result<_>>()?;
        Ok(ForwardTrace {
            outputs: SampleOutputs { fused, modality, tokens: token_pairs },
            pre_mim,
            mim: mim_out,
        })
    }

    /// Weights and hyperplanes as a checkpoint; the model configuration and
    /// `meta` entries go into the header.
    pub fn to_checkpoint(&self, betas: &HyperplaneSet, meta: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut m = meta.clone();
        m.insert(
            "model".into(),
            serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        );
        m.insert(
            "envs".into(),
            betas.envs().iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        let mut tensors: Vec<(String, Tensor)> =
            self.store.names().iter().cloned().zip(self.store.values().iter().cloned()).collect();
        for (e, b) in betas.envs().iter().zip(betas.betas()) {
            tensors.push((format!("beta.{e}"), b.clone()));
        }
        Ok(Checkpoint { meta: m, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, HyperplaneSet)> {
        let config: ModelConfig = serde_json::from_str(
            ckpt.meta.get("model").ok_or_else(|| Error::Format("checkpoint has no model entry".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad model config: {e}")))?;
        let mut model = Self::new(config, &mut rng::seeded(0))?;
        for (j, name) in model.store.names().to_vec().iter().enumerate() {
            let t = ckpt.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            model.store.set(ParamId(j), t.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        let envs_line = ckpt.meta.get("envs").map(String::as_str).unwrap_or("");
        let envs: Vec<usize> = if envs_line.is_empty() {
            Vec::new()
        } else {
            envs_line
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad environment list {envs_line:?}"))))
                .collect::<Result<_>>()?
        };
        let betas = envs
            .iter()
            .map(|e| ckpt.get(&format!("beta.{e}")).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks beta.{e}"))))
            .collect::<Result<Vec<_>>>()?;
        let set = HyperplaneSet::new(envs, betas)?;
        if !set.is_empty() && set.width() != model.config.feature_dim + 1 {
            return Err(Error::Format("beta width does not match the feature width".into()));
        }
        Ok((model, set))
    }
}

impl FeatureModel for DadmModel {
    type Input = ImageSample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => !self.config.freeze_backbone,
            ParamGroup::Substitute => self.config.substitute == SubstituteMode::Learnable,
            ParamGroup::Adapter | ParamGroup::Mim | ParamGroup::Head => true,
        }
    }

    fn forward_sample<'t>(&self, p: &[Var<'t>], input: &ImageSample, ctx: &SampleContext) -> Result<SampleOutputs<'t>> {
        Ok(self.trace(p, input, ctx)?.outputs)
    }
}

/// Affine features `x W + b` of plain vectors.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub store: ParamStore,
    map: Linear,
}

impl LinearModel {
    pub fn new(in_dim: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let map = Linear::new(&mut store, "map", in_dim, feature_dim, true, ParamGroup::Backbone, rng);
        Self { store, map }
    }
}

impl FeatureModel for LinearModel {
    type Input = Tensor;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn feature_dim(&self) -> usize {
        self.map.out_dim
    }

    fn trainable(&self, _group: ParamGroup) -> bool {
        true
    }

    fn forward_sample<'t>(&self, p: &[Var<'t>], input: &Tensor, _ctx: &SampleContext) -> Result<SampleOutputs<'t>> {
        let tape = p[0].tape();
        let x = tape.leaf(input.clone()).reshape(&[1, self.map.in_dim])?;
        let fused = self.map.forward(p, &x)?.reshape(&[self.map.out_dim])?;
        Ok(SampleOutputs { fused, modality: vec![fused], tokens: Vec::new() })
    }
}
