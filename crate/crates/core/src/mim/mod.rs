//! Mutual-information mask module, its Donsker-Varadhan style token loss,
//! and a MINE estimator used as an independent reference.

mod mine;

pub use mine::{
    correlated_gaussians, gaussian_mi, mine_estimate, Adam, MineConfig, MineCritic, MineReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{grid_to_tokens, instance_norm, tokens_to_grid, CdcConv, ParamGroup, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Var;

/// Masks two modality token streams from their fused features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimModule {
    pub d: usize,
    pub grid: (usize, usize),
    pub fuse: CdcConv,
    pub mg1: CdcConv,
    pub mg2: CdcConv,
    pub out1: CdcConv,
    pub out2: CdcConv,
}

/// Everything one module produces for one sample.
#[derive(Clone, Debug)]
pub struct MimOutput<'t> {
    /// `(1, 1, h, w)`, values in (0, 1).
    pub mask1: Var<'t>,
    pub mask2: Var<'t>,
    /// `(hw, d)`
    pub aligned1: Var<'t>,
    pub aligned2: Var<'t>,
    /// Scalar means of the aligned maps.
    pub mi1: Var<'t>,
    pub mi2: Var<'t>,
    /// `(hw, d)`
    pub out1: Var<'t>,
    pub out2: Var<'t>,
}

impl MimModule {
    /// `fuse_theta` = 0 gives a vanilla fusion conv; anything in (0, 1] a CDC one.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        grid: (usize, usize),
        fuse_theta: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Mim;
        Ok(Self {
            d,
            grid,
            fuse: CdcConv::new(store, &format!("{name}.fuse"), 2 * d, d, 3, fuse_theta, true, g, rng)?,
            // no bias: instance norm cancels it
            mg1: CdcConv::new(store, &format!("{name}.mg1"), d, d, 3, 0.0, false, g, rng)?,
            mg2: CdcConv::new(store, &format!("{name}.mg2"), d, 2, 1, 0.0, true, g, rng)?,
            out1: CdcConv::new(store, &format!("{name}.out1"), 2 * d, d, 1, 0.0, true, g, rng)?,
            out2: CdcConv::new(store, &format!("{name}.out2"), 2 * d, d, 1, 0.0, true, g, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], z1: &Var<'t>, z2: &Var<'t>) -> Result<MimOutput<'t>> {
        if z1.shape() != z2.shape() {
            return shape_err("mim_forward", format!("{:?} vs {:?}", z1.shape(), z2.shape()));
        }
        let (h, w) = self.grid;
        let g1 = tokens_to_grid(z1, h, w)?;
        let g2 = tokens_to_grid(z2, h, w)?;
        let fused = self.fuse.forward(p, &g1.concat_channels(&g2)?)?;
        let hidden = instance_norm(&self.mg1.forward(p, &fused)?)?.gelu()?;
        let masks = self.mg2.forward(p, &hidden)?.sigmoid()?;
        let mask1 = masks.slice_channels(0, 1)?;
        let mask2 = masks.slice_channels(1, 2)?;
        let a1 = mask1.repeat_channels(self.d)?.mul(&g1)?;
        let a2 = mask2.repeat_channels(self.d)?.mul(&g2)?;
        let out1 = self.out1.forward(p, &fused.concat_channels(&a1)?)?;
        let out2 = self.out2.forward(p, &fused.concat_channels(&a2)?)?;
        Ok(MimOutput {
            mi1: a1.mean()?,
            mi2: a2.mean()?,
            aligned1: grid_to_tokens(&a1)?,
            aligned2: grid_to_tokens(&a2)?,
            out1: grid_to_tokens(&out1)?,
            out2: grid_to_tokens(&out2)?,
            mask1,
            mask2,
        })
    }
}

/// `log(mean(exp(x)))` over a vector, with the maximum pulled out first.
pub fn log_mean_exp<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let m = x.with_value(|v| v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    Ok(x.add_scalar(-m)?.exp()?.mean()?.log()?.add_scalar(m)?)
}

/// Negative DV bound with the mean of the two tokens as the critic. `perm`
/// pairs `t1[i]` with `t2[perm[i]]` for the product-of-marginals term.
pub fn mi_loss_with_perm<'t>(t1: &Var<'t>, t2: &Var<'t>, perm: &[usize]) -> Result<Var<'t>> {
    let n = t1.numel();
    if t1.shape() != t2.shape() || t1.shape().len() != 1 {
        return shape_err("mi_loss", format!("{:?} vs {:?}", t1.shape(), t2.shape()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mi_loss needs a batch of at least 2, got {n}")));
    }
    let marginal = t1.add(&t2.permute_rows(perm)?)?.scale(0.5)?;
    // Both terms are taken relative to the marginal maximum; this keeps the
    // exponent bounded and makes constant batches give exactly zero.
    let m = marginal.with_value(|v| v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let joint = t1.add(t2)?.scale(0.5)?.add_scalar(-m)?.mean()?;
    let lme = marginal.add_scalar(-m)?.exp()?.mean()?.log()?;
    lme.sub(&joint)
}

/// As [`mi_loss_with_perm`], drawing a derangement from `rng`.
pub fn mi_loss<'t>(t1: &Var<'t>, t2: &Var<'t>, rng: &mut Rng) -> Result<Var<'t>> {
    let n = t1.numel();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mi_loss needs a batch of at least 2, got {n}")));
    }
    mi_loss_with_perm(t1, t2, &rng::derangement(n, rng))
}

/// Token batches of one MIM module: `(t1, t2)`, each `(B)`.
pub type TokenPair<'t> = (Var<'t>, Var<'t>);

/// Mean of the token loss over every layer and every modality pair.
pub fn layer_mi_loss<'t>(layers: &[[TokenPair<'t>; 3]], perm: &[usize]) -> Result<Var<'t>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("layer_mi_loss needs at least one layer".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for layer in layers {
        for (t1, t2) in layer {
            let l = mi_loss_with_perm(t1, t2, perm)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
    }
    total.expect("non-empty").scale(1.0 / (3 * layers.len()) as f64)
}
