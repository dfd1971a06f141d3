//! Synthetic tri-modal anti-spoofing data.
//!
//! Every modality image of a live sample carries a fixed low-frequency
//! template. A spoof of attack `k` swaps the template for an independent
//! field in modality `m` in proportion to the reliability `r[k][m]`, and
//! leaves a fixed attack signature at high frequencies, also scaled by `r`.
//! A per-sample "subject" field at mid frequencies is shared by the three
//! modalities. An environment may add a label-dependent "session" field
//! (lives plus, spoofs minus) that does not carry over to other
//! environments. Environment transforms (channel gain and bias, box blur,
//! sensor noise) run last, then values are rounded to `f32`.

mod format;


use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use format::{from_bytes, read_dataset, to_bytes, write_dataset, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::model::ImageSample;
use crate::par::{self, ExecMode};
use crate::rng::{self, Rng, RngExt};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    /// How strongly each modality (rgb, depth, ir) reveals the attack.
    pub reliability: [f64; 3],
}

/// Acquisition conditions of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvShift {
    /// Per image channel, applied to every modality.
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub blur_radius: usize,
    pub noise_sigma: f64,
    /// Relative frequency of each attack among this environment's spoofs;
    /// empty means uniform.
    pub attack_mix: Vec<f64>,
    /// Per modality, amplitude of a fixed field added to lives and
    /// subtracted from spoofs: capture conditions that differed between
    /// live and attack sessions of this environment.
    pub session_bias: [f64; 3],
}

impl Default for EnvShift {
    fn default() -> Self {
        Self { gain: [1.0; 3], bias: [0.0; 3], blur_radius: 0, noise_sigma: 0.0, attack_mix: Vec::new(), session_bias: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub envs: Vec<EnvShift>,
    pub samples_per_env: usize,
    pub height: usize,
    pub width: usize,
    pub attacks: Vec<AttackSpec>,
    /// Share of live samples in every environment.
    pub live_fraction: f64,
    /// Template amplitude is drawn uniformly from this range per sample.
    pub pattern_amplitude: [f64; 2],
    pub subject_scale: f64,
    pub signature_scale: f64,
    /// White texture noise added before the environment transforms.
    pub texture_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let attack = |name: &str, reliability| AttackSpec { name: name.into(), reliability };
        let env = |gain, bias, blur_radius, noise_sigma, mix: [f64; 3], session: f64| EnvShift {
            gain,
            bias,
            blur_radius,
            noise_sigma,
            attack_mix: mix.to_vec(),
            session_bias: [session, 0.0, 0.0],
        };
        Self {
            envs: vec![
                env([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0, 0.1, [0.7, 0.2, 0.1], 0.3),
                env([1.3, 0.9, 0.8], [0.3, -0.2, 0.1], 1, 0.2, [0.2, 0.7, 0.1], 0.3),
                env([0.7, 1.2, 1.1], [-0.2, 0.2, -0.3], 0, 0.3, [0.4, 0.4, 0.2], -0.3),
                env([1.1, 0.8, 1.3], [0.1, 0.3, -0.1], 1, 0.15, [0.1, 0.2, 0.7], -0.3),
            ],
            samples_per_env: 800,
            height: 32,
            width: 32,
            attacks: vec![
                attack("print", [0.6, 1.0, 0.9]),
                attack("replay", [0.7, 0.9, 0.5]),
                attack("mask3d", [0.9, 0.1, 0.8]),
            ],
            live_fraction: 0.5,
            pattern_amplitude: [0.3, 0.7],
            subject_scale: 1.0,
            signature_scale: 0.5,
            texture_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.envs.is_empty() {
            return bad("at least one environment is required".into());
        }
        if self.samples_per_env == 0 {
            return bad("zero samples requested".into());
        }
        if self.height < 2 || self.width < 2 {
            return bad(format!("image size {}x{} is too small", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.live_fraction) {
            return bad(format!("live fraction {} outside [0, 1]", self.live_fraction));
        }
        let spoofs = self.samples_per_env - live_count(self.samples_per_env, self.live_fraction);
        if spoofs > 0 && self.attacks.is_empty() {
            return bad("spoof samples requested but no attack types given".into());
        }
        for a in &self.attacks {
            if a.reliability.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return bad(format!("attack {:?}: reliabilities must lie in [0, 1]", a.name));
            }
        }
        let [lo, hi] = self.pattern_amplitude;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad(format!("bad pattern amplitude range {:?}", self.pattern_amplitude));
        }
        for (name, v) in [
            ("subject scale", self.subject_scale),
            ("signature scale", self.signature_scale),
            ("texture sigma", self.texture_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (e, env) in self.envs.iter().enumerate() {
            if !(env.noise_sigma.is_finite() && env.noise_sigma >= 0.0) {
                return bad(format!("env {e}: noise sigma must be non-negative"));
            }
            if env.gain.iter().chain(&env.bias).chain(&env.session_bias).any(|v| !v.is_finite()) {
                return bad(format!("env {e}: non-finite gain, bias or session bias"));
            }
            if !env.attack_mix.is_empty() {
                if env.attack_mix.len() != self.attacks.len() {
                    return bad(format!(
                        "env {e}: attack mix has {} weights for {} attacks",
                        env.attack_mix.len(),
                        self.attacks.len()
                    ));
                }
                if env.attack_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                    || env.attack_mix.iter().sum::<f64>() <= 0.0
                {
                    return bad(format!("env {e}: attack mix must be non-negative with a positive sum"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub env: usize,
    /// 1 live, 0 spoof.
    pub label: u8,
    /// Index into the spec's attacks; `None` for live samples.
    pub attack: Option<usize>,
    pub sample: ImageSample,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct environment ids in ascending order.
    pub fn env_ids(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.records.iter().map(|r| r.env).collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

fn live_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Splits `total` over `weights` by largest remainder (ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Separable cosine basis restricted to a frequency band, evaluated on the
/// pixel grid: `cos(pi (y + 1/2) u / H) cos(pi (x + 1/2) v / W)`.
struct Band {
    freqs: Vec<(usize, usize)>,
    cos_y: Vec<Vec<f64>>,
    cos_x: Vec<Vec<f64>>,
    h: usize,
    w: usize,
}

impl Band {
    /// Frequencies with `lo <= max(u, v) < hi`, excluding the constant term.
    fn new(h: usize, w: usize, lo: usize, hi: usize) -> Self {
        let hi_u = hi.min(h);
        let hi_v = hi.min(w);
        let mut freqs = Vec::new();
        for u in 0..hi_u {
            for v in 0..hi_v {
                if u.max(v) >= lo && (u, v) != (0, 0) {
                    freqs.push((u, v));
                }
            }
        }
        let table = |n: usize, f: usize| (0..n).map(|i| (PI * (i as f64 + 0.5) * f as f64 / n as f64).cos()).collect();
        Self {
            cos_y: (0..hi_u).map(|u| table(h, u)).collect(),
            cos_x: (0..hi_v).map(|v| table(w, v)).collect(),
            freqs,
            h,
            w,
        }
    }

    /// Random `(3, H, W)` field in this band with unit RMS.
    fn field(&self, rng: &mut Rng) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; 3 * plane];
        for c in 0..3 {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for &(u, v) in &self.freqs {
                let coef: f64 = StandardNormal.sample(rng);
                for (y, cy) in self.cos_y[u].iter().enumerate() {
                    let row = &mut dst[y * self.w..(y + 1) * self.w];
                    for (o, cx) in row.iter_mut().zip(&self.cos_x[v]) {
                        *o += coef * cy * cx;
                    }
                }
            }
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v /= rms);
        }
        out
    }
}

/// Fixed fields shared by the whole dataset.
struct Fields {
    low: Band,
    mid: Band,
    templates: [Vec<f64>; 3],
    /// Per attack, per modality.
    signatures: Vec<[Vec<f64>; 3]>,
    session: [Vec<f64>; 3],
}

const TEMPLATE_STREAM: u64 = u64::MAX;
const SIGNATURE_STREAM: u64 = u64::MAX - 1;
const LAYOUT_STREAM: u64 = u64::MAX - 2;
const SESSION_STREAM: u64 = u64::MAX - 3;

impl Fields {
    fn new(spec: &SynthSpec) -> Self {
        let (h, w) = (spec.height, spec.width);
        let low = Band::new(h, w, 0, 4);
        let mid = Band::new(h, w, 4, 8);
        let high = Band::new(h, w, 8, 16);
        let mut t = rng::stream(spec.seed, TEMPLATE_STREAM);
        let templates = [0, 1, 2].map(|_| low.field(&mut t));
        let mut s = rng::stream(spec.seed, SIGNATURE_STREAM);
        let signatures = spec.attacks.iter().map(|_| [0, 1, 2].map(|_| high.field(&mut s))).collect();
        let mut b = rng::stream(spec.seed, SESSION_STREAM);
        let session = [0, 1, 2].map(|_| mid.field(&mut b));
        Self { low, mid, templates, signatures, session }
    }
}

/// Which record slot holds which label and attack, per environment.
fn layout(spec: &SynthSpec) -> Vec<(usize, u8, Option<usize>)> {
    let mut rng = rng::stream(spec.seed, LAYOUT_STREAM);
    let n = spec.samples_per_env;
    let live = live_count(n, spec.live_fraction);
    let mut out = Vec::with_capacity(n * spec.envs.len());
    for (e, env) in spec.envs.iter().enumerate() {
        let mut slots: Vec<(u8, Option<usize>)> = vec![(1, None); live];
        if n > live {
            let weights = if env.attack_mix.is_empty() { vec![1.0; spec.attacks.len()] } else { env.attack_mix.clone() };
            for (k, c) in apportion(n - live, &weights).into_iter().enumerate() {
                slots.extend(std::iter::repeat_n((0, Some(k)), c));
            }
        }
        rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut rng);
        out.extend(slots.into_iter().map(|(y, a)| (e, y, a)));
    }
    out
}

fn box_blur(img: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; img.len()];
    for plane in img.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                tmp[y * w + x] = plane[y * w + x0..y * w + x1].iter().sum::<f64>() / (x1 - x0) as f64;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                plane[y * w + x] = (y0..y1).map(|yy| tmp[yy * w + x]).sum::<f64>() / (y1 - y0) as f64;
            }
        }
    }
}

fn render(spec: &SynthSpec, fields: &Fields, slot: (usize, u8, Option<usize>), rng: &mut Rng) -> Record {
    let (env_id, label, attack) = slot;
    let env = &spec.envs[env_id];
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let [lo, hi] = spec.pattern_amplitude;
    let amp = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let subject = fields.mid.field(rng);
    let session_sign = if label == 1 { 1.0 } else { -1.0 };
    let images = [0, 1, 2].map(|m| {
        let r = attack.map_or(0.0, |k| spec.attacks[k].reliability[m]);
        let replacement = if r > 0.0 { Some(fields.low.field(rng)) } else { None };
        let texture_seed: u64 = rng.random();
        let noise_seed: u64 = rng.random();
        let mut texture = rng::seeded(texture_seed);
        let mut noise = rng::seeded(noise_seed);
        let mut img = vec![0.0; 3 * plane];
        for (i, v) in img.iter_mut().enumerate() {
            let mut pattern = fields.templates[m][i];
            if let Some(q) = &replacement {
                pattern = (1.0 - r) * pattern + r * q[i];
            }
            let eps: f64 = StandardNormal.sample(&mut texture);
            *v = spec.subject_scale * subject[i] + amp * pattern + spec.texture_sigma * eps;
            if let Some(k) = attack {
                *v += r * spec.signature_scale * fields.signatures[k][m][i];
            }
            *v += session_sign * env.session_bias[m] * fields.session[m][i];
        }
        for (c, chan) in img.chunks_mut(plane).enumerate() {
            chan.iter_mut().for_each(|v| *v = env.gain[c] * *v + env.bias[c]);
        }
        box_blur(&mut img, h, w, env.blur_radius);
        for v in &mut img {
            let z: f64 = StandardNormal.sample(&mut noise);
            *v = (*v + env.noise_sigma * z) as f32 as f64;
        }
        img
    });
    let [a, b, c] = images;
    Record {
        env: env_id,
        label,
        attack,
        sample: ImageSample {
            images: [a, b, c].map(|d| Tensor::from_parts(vec![3, h, w], d)),
            presence: [true; 3],
        },
    }
}

/// The dataset described by `spec`; a pure function of the spec (seed
/// included) whatever the execution mode.
pub fn generate(spec: &SynthSpec, exec: ExecMode) -> Result<Dataset> {
    spec.validate()?;
    let fields = Fields::new(spec);
    let slots = layout(spec);
    let records = par::map(exec, slots.len(), |i| {
        render(spec, &fields, slots[i], &mut rng::stream(spec.seed, i as u64))
    });
    Ok(Dataset { records })
}
