//! Differentiable building blocks: patch embedding, CDC convolutions, the
//! CDC adapter and a single-head pre-norm encoder block.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]. A forward pass binds the
//! whole store onto a tape once and every block indexes into that slice.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the network a parameter belongs to; drives freezing and
/// which tensors the optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Mim,
    Head,
    Substitute,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return shape_err(
                "ParamStore::set",
                format!("{} is {:?}, got {:?}", self.names[id.0], self.values[id.0].shape(), value.shape()),
            );
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Affine map on rows: `x (n, in) -> (n, out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[in_dim, out_dim], in_dim, rng),
            group,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), init_uniform(&[out_dim], in_dim, rng), group)
        });
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&p[self.weight.0])?;
        match self.bias {
            Some(b) => y.add(&p[b.0].broadcast_rows(y.shape()[0])?),
            None => Ok(y),
        }
    }
}

/// Same-padded, stride-1 convolution with a central-difference term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdcConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub theta: f64,
}

impl CdcConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        theta: f64,
        bias: bool,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        let fan_in = in_ch * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[out_ch, in_ch, k, k], fan_in, rng),
            group,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), init_uniform(&[out_ch], fan_in, rng), group)
        });
        Ok(Self { weight, bias, theta })
    }

    /// `x` is `(B, C, H, W)`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&p[self.weight.0], self.bias.map(|b| &p[b.0]), self.theta)
    }

    /// Single image `(C, H, W)` in, `(C', H, W)` out.
    pub fn forward_image<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 {
            return shape_err("cdc_forward", format!("expected (C, H, W), got {s:?}"));
        }
        let y = self.forward(p, &x.reshape(&[1, s[0], s[1], s[2]])?)?;
        let o = y.shape();
        y.reshape(&o[1..])
    }
}

/// Token rows `(h*w, d)` to a `(1, d, h, w)` grid.
pub fn tokens_to_grid<'t>(tokens: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return shape_err("tokens_to_grid", format!("{s:?} is not ({}, d)", h * w));
    }
    tokens.t()?.reshape(&[1, s[1], h, w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<'t>(grid: &Var<'t>) -> Result<Var<'t>> {
    let s = grid.shape();
    if s.len() != 4 || s[0] != 1 {
        return shape_err("grid_to_tokens", format!("expected (1, d, h, w), got {s:?}"));
    }
    grid.reshape(&[s[1], s[2] * s[3]])?.t()
}

/// Per-channel normalisation over the spatial plane of a `(1, C, H, W)` grid.
pub fn instance_norm<'t>(grid: &Var<'t>) -> Result<Var<'t>> {
    let s = grid.shape();
    if s.len() != 4 || s[0] != 1 {
        return shape_err("instance_norm", format!("expected (1, C, H, W), got {s:?}"));
    }
    grid.reshape(&[s[1], s[2] * s[3]])?
        .layer_norm_rows(LN_EPS)?
        .reshape(&s)
}

/// `x + conv2(gelu(conv1(x)))` on a `(1, d, h, w)` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdcAdapter {
    pub conv1: CdcConv,
    pub conv2: CdcConv,
}

impl CdcAdapter {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, theta: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv1: CdcConv::new(store, &format!("{name}.conv1"), d, d, 3, theta, false, ParamGroup::Adapter, rng)?,
            conv2: CdcConv::new(store, &format!("{name}.conv2"), d, d, 3, theta, false, ParamGroup::Adapter, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], grid: &Var<'t>) -> Result<Var<'t>> {
        let branch = self.conv2.forward(p, &self.conv1.forward(p, grid)?.gelu()?)?;
        grid.add(&branch)
    }
}

/// Row-wise layer norm with learned scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), group),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        x.layer_norm_rows(LN_EPS)?
            .mul(&p[self.gamma.0].broadcast_rows(n)?)?
            .add(&p[self.beta.0].broadcast_rows(n)?)
    }
}

/// Pre-norm transformer layer with single-head attention, plus a CDC adapter
/// applied residually to the patch tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub d: usize,
    pub grid: (usize, usize),
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: CdcAdapter,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        grid: (usize, usize),
        theta: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        Ok(Self {
            d,
            grid,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, g),
            wq: Linear::new(store, &format!("{name}.attn.q"), d, d, false, g, rng),
            wk: Linear::new(store, &format!("{name}.attn.k"), d, d, false, g, rng),
            wv: Linear::new(store, &format!("{name}.attn.v"), d, d, false, g, rng),
            wo: Linear::new(store, &format!("{name}.attn.o"), d, d, false, g, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, g),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, 4 * d, true, g, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * d, d, true, g, rng),
            adapter: CdcAdapter::new(store, &format!("{name}.adapter"), d, theta, rng)?,
        })
    }

    pub fn attention<'t>(&self, p: &[Var<'t>], h: &Var<'t>) -> Result<Var<'t>> {
        let q = self.wq.forward(p, h)?;
        let k = self.wk.forward(p, h)?;
        let v = self.wv.forward(p, h)?;
        let scores = q.matmul(&k.t()?)?.scale(1.0 / (self.d as f64).sqrt())?;
        self.wo.forward(p, &scores.softmax_rows()?.matmul(&v)?)
    }

    /// `tokens` is `(n, d)`: a class row, then `h*w` patch rows (or the class
    /// row alone, which skips the adapter).
    pub fn forward<'t>(&self, p: &[Var<'t>], tokens: &Var<'t>) -> Result<Var<'t>> {
        let s = tokens.shape();
        if s.len() != 2 || s[1] != self.d {
            return shape_err("encoder_block", format!("expected (n, {}), got {s:?}", self.d));
        }
        let n = s[0];
        let (gh, gw) = self.grid;
        if n != 1 && n != gh * gw + 1 {
            return shape_err("encoder_block", format!("{n} tokens for a {gh}x{gw} grid"));
        }
        let x = tokens.add(&self.attention(p, &self.ln1.forward(p, tokens)?)?)?;
        let mlp = self.fc2.forward(p, &self.fc1.forward(p, &self.ln2.forward(p, &x)?)?.gelu()?)?;
        let x = x.add(&mlp)?;
        if n == 1 {
            return Ok(x);
        }
        let cls = x.slice_rows(0, 1)?;
        let grid = tokens_to_grid(&x.slice_rows(1, n)?, gh, gw)?;
        let patches = grid_to_tokens(&self.adapter.forward(p, &grid)?)?;
        cls.concat_rows(&patches)
    }
}

/// Non-overlapping `P x P` patches projected to `d`, with a class row and
/// learned positional embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbed {
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub proj: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    gather: Vec<usize>,
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return shape_err(
                "patch_embed",
                format!("{height}x{width} image is not divisible into {patch}x{patch} patches"),
            );
        }
        let (gh, gw) = (height / patch, width / patch);
        let fan = channels * patch * patch;
        let proj = Linear::new(store, &format!("{name}.proj"), fan, d, true, ParamGroup::Backbone, rng);
        let pos = store.add(format!("{name}.pos"), init_uniform(&[gh * gw + 1, d], d, rng), ParamGroup::Backbone);
        let cls = store.add(format!("{name}.cls"), init_uniform(&[d], d, rng), ParamGroup::Backbone);
        let mut gather = Vec::with_capacity(gh * gw * fan);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..channels {
                    for y in 0..patch {
                        for x in 0..patch {
                            gather.push((c * height + py * patch + y) * width + px * patch + x);
                        }
                    }
                }
            }
        }
        Ok(Self { patch, channels, height, width, d, proj, pos, cls, gather })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Patch rows `(hw, C*P*P)` of an image `(C, H, W)`.
    pub fn patchify<'t>(&self, image: &Var<'t>) -> Result<Var<'t>> {
        let want = [self.channels, self.height, self.width];
        if image.shape() != want {
            return shape_err("patch_embed", format!("expected {want:?}, got {:?}", image.shape()));
        }
        image
            .gather(&self.gather)?
            .reshape(&[self.num_patches(), self.channels * self.patch * self.patch])
    }

    /// `(C, H, W)` image to `(hw + 1, d)` tokens.
    pub fn forward<'t>(&self, p: &[Var<'t>], image: &Var<'t>) -> Result<Var<'t>> {
        let patches = self.proj.forward(p, &self.patchify(image)?)?;
        let cls = p[self.cls.0].reshape(&[1, self.d])?;
        cls.concat_rows(&patches)?.add(&p[self.pos.0])
    }
}

#[cfg(test)]
mod tests;
