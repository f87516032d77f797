//! High VAE, Low VAE, chVAE and pchVAE on a shared encoder trunk.
//!
//! Layout at image size `S` with `C = base_channels`:
//!
//! ```text
//! x (1,S,S) -> trunk: conv/2 -> conv/2           -> h (2C, S/4, S/4)
//! high:  h -> conv/2 -> conv/2 -> dense heads     -> mu1, logvar1 (z1_dim)
//!        z1 -> dense (2C,S/16,S/16) -> 4x convT*2 -> x_high (1,S,S)
//! low:   [h | up4(dense(z1))] -> conv3 heads      -> mu2, logvar2 (z2_channels, S/4, S/4)
//!        [z2 | up4(dense(z1))] -> conv3 -> 2x convT*2 -> x_low (1,S,S)
//! ```
//!
//! Resampling convolutions use kernel 4, stride 2, padding 1. Hidden layers
//! use SiLU; outputs are linear.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

const RESAMPLE_K: usize = 4;
const RESAMPLE_STRIDE: usize = 2;
const RESAMPLE_PAD: usize = 1;
const SAME_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Deep single branch with four up-sampling stages.
    High,
    /// Shallow single branch with two up-sampling stages.
    Low,
    /// Conditional hierarchical VAE: both branches, combined reconstruction only.
    Ch,
    /// Primary-components chVAE: adds the high-only reconstruction and the zero pass.
    Pch,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::High, Variant::Low, Variant::Ch, Variant::Pch];

    pub fn has_high(self) -> bool {
        !matches!(self, Variant::Low)
    }

    pub fn has_low(self) -> bool {
        !matches!(self, Variant::High)
    }

    /// Whether the low branch sees `z1`.
    pub fn conditioned(self) -> bool {
        matches!(self, Variant::Ch | Variant::Pch)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::High => "high",
            Variant::Low => "low",
            Variant::Ch => "ch",
            Variant::Pch => "pch",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(Variant::High),
            "low" => Ok(Variant::Low),
            "ch" => Ok(Variant::Ch),
            "pch" => Ok(Variant::Pch),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected high, low, ch or pch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub z1_dim: usize,
    pub z2_channels: usize,
    /// Channels of the projected `z1` map fed to the low branch.
    pub cond_channels: usize,
    pub variant: Variant,
    /// Re-encode a detached copy of `x_low` in the zero pass.
    pub term3_detached: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            base_channels: 16,
            z1_dim: 32,
            z2_channels: 4,
            cond_channels: 4,
            variant: Variant::Pch,
            term3_detached: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("z1_dim", self.z1_dim),
            ("z2_channels", self.z2_channels),
            ("cond_channels", self.cond_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be at least 2".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("image_size", self.image_size);
        kv.set("base_channels", self.base_channels);
        kv.set("z1_dim", self.z1_dim);
        kv.set("z2_channels", self.z2_channels);
        kv.set("cond_channels", self.cond_channels);
        kv.set("variant", self.variant);
        kv.set("term3_detached", self.term3_detached);
    }

    /// Overrides fields present in `kv`.
    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("image_size", &mut self.image_size)?;
        kv.read_into("base_channels", &mut self.base_channels)?;
        kv.read_into("z1_dim", &mut self.z1_dim)?;
        kv.read_into("z2_channels", &mut self.z2_channels)?;
        kv.read_into("cond_channels", &mut self.cond_channels)?;
        kv.read_into("variant", &mut self.variant)?;
        kv.read_into("term3_detached", &mut self.term3_detached)?;
        Ok(())
    }

    fn trunk_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Side length of the low-level latent grid.
    pub fn low_grid(&self) -> usize {
        self.image_size / 4
    }

    fn top_grid(&self) -> usize {
        self.image_size / 16
    }

    fn low_hidden(&self) -> usize {
        self.base_channels
    }
}

/// Latent statistics and draws of one forward pass; absent branches are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LatentDraw {
    pub mu1: Option<Var>,
    pub logvar1: Option<Var>,
    pub z1: Option<Var>,
    pub mu2: Option<Var>,
    pub logvar2: Option<Var>,
    pub z2: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub x_high: Option<Var>,
    pub x_low: Option<Var>,
    /// `x_high + x_low` for two-branch variants, otherwise the single branch output.
    pub x_combined: Var,
    /// High branch applied to `x_low` (pch only).
    pub x_zero: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub variant: Variant,
    pub draw: LatentDraw,
    pub recon: Reconstruction,
}

/// How latents are produced from posterior statistics.
pub enum Sampling<'a> {
    /// Reparameterized draw from the posterior.
    Draw(&'a mut SeedStream),
    /// Posterior mean.
    Mean,
}

impl Sampling<'_> {
    fn latent(&mut self, g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
        match self {
            Sampling::Draw(rng) => g.gaussian_sample(mu, logvar, rng),
            Sampling::Mean => Ok(mu),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ArchConfig,
    pub params: ParamStore,
}

/// `(name, shape, fan_in, gain)` for every parameter of a variant.
fn layout(cfg: &ArchConfig) -> Vec<(String, Vec<usize>, usize, f64)> {
    let c = cfg.base_channels;
    let t = cfg.trunk_channels();
    let top = cfg.top_grid();
    let flat_top = t * top * top;
    let p = cfg.cond_channels;
    let cond_flat = p * top * top;
    let lh = cfg.low_hidden();
    let k = RESAMPLE_K;
    let mut l: Vec<(String, Vec<usize>, usize, f64)> = Vec::new();
    let conv = |l: &mut Vec<_>, name: &str, out: usize, inp: usize, ks: usize, gain: f64| {
        l.push((format!("{name}.w"), vec![out, inp, ks, ks], inp * ks * ks, gain));
        l.push((format!("{name}.b"), vec![out], 0, 0.0));
    };
    // transposed: weight (in, out, k, k); each output sees in*k*k/stride^2 taps
    let conv_t = |l: &mut Vec<_>, name: &str, inp: usize, out: usize, gain: f64| {
        l.push((format!("{name}.w"), vec![inp, out, k, k], inp * k * k / 4, gain));
        l.push((format!("{name}.b"), vec![out], 0, 0.0));
    };
    let dense = |l: &mut Vec<_>, name: &str, out: usize, inp: usize, gain: f64| {
        l.push((format!("{name}.w"), vec![out, inp], inp, gain));
        l.push((format!("{name}.b"), vec![out], 0, 0.0));
    };
    conv(&mut l, "trunk.conv1", c, 1, k, 2.0);
    conv(&mut l, "trunk.conv2", t, c, k, 2.0);
    if cfg.variant.has_high() {
        conv(&mut l, "enc_high.conv1", t, t, k, 2.0);
        conv(&mut l, "enc_high.conv2", t, t, k, 2.0);
        dense(&mut l, "enc_high.mu", cfg.z1_dim, flat_top, 1.0);
        dense(&mut l, "enc_high.logvar", cfg.z1_dim, flat_top, 1.0);
        dense(&mut l, "dec_high.fc", flat_top, cfg.z1_dim, 2.0);
        conv_t(&mut l, "dec_high.up1", t, t, 2.0);
        conv_t(&mut l, "dec_high.up2", t, t, 2.0);
        conv_t(&mut l, "dec_high.up3", t, c, 2.0);
        conv_t(&mut l, "dec_high.up4", c, 1, 1.0);
    }
    if cfg.variant.has_low() {
        let cond = if cfg.variant.conditioned() { p } else { 0 };
        if cond > 0 {
            dense(&mut l, "enc_low.cond", cond_flat, cfg.z1_dim, 1.0);
            dense(&mut l, "dec_low.cond", cond_flat, cfg.z1_dim, 1.0);
        }
        conv(&mut l, "enc_low.mu", cfg.z2_channels, t + cond, SAME_K, 1.0);
        conv(&mut l, "enc_low.logvar", cfg.z2_channels, t + cond, SAME_K, 1.0);
        conv(&mut l, "dec_low.conv", lh, cfg.z2_channels + cond, SAME_K, 2.0);
        conv_t(&mut l, "dec_low.up1", lh, lh / 2, 2.0);
        conv_t(&mut l, "dec_low.up2", lh / 2, 1, 1.0);
    }
    l
}

impl Model {
    /// Fan-in scaled normal initialization; biases start at zero.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in, gain) in layout(&config) {
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                let sd = (gain / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| sd * rng.normal())
            };
            params.insert(name, t);
        }
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: ArchConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} variant expects {} tensors, found {}",
                config.variant,
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _, _) in &expected {
            let v = params.value(name).map_err(|_| {
                Error::CheckpointMismatch(format!("missing tensor {name:?} for {} variant", config.variant))
            })?;
            if v.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(&self.params, name)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    fn down(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(g, x, name, RESAMPLE_STRIDE, RESAMPLE_PAD)?;
        Ok(g.silu(y))
    }

    fn up(&self, g: &mut Graph, x: Var, name: &str, activate: bool) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        let y = g.conv_transpose2d(x, w, b, RESAMPLE_STRIDE, RESAMPLE_PAD)?;
        Ok(if activate { g.silu(y) } else { y })
    }

    fn dense(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        g.dense(x, w, b)
    }

    fn batch_of(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = self.config.image_size;
        match *g.shape(x) {
            [b, 1, h, w] if h == s && w == s => Ok(b),
            ref other => Err(Error::shape(
                "model",
                format!("expected input (B, 1, {s}, {s}), got {other:?}"),
            )),
        }
    }

    /// Shared first layers: `(B, 1, S, S) -> (B, 2C, S/4, S/4)`.
    pub fn encode_trunk(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.batch_of(g, x)?;
        let h = self.down(g, x, "trunk.conv1")?;
        self.down(g, h, "trunk.conv2")
    }

    /// High-level posterior `(mu1, logvar1)`, each `(B, z1_dim)`.
    pub fn encode_high(&self, g: &mut Graph, trunk: Var) -> Result<(Var, Var)> {
        self.require(self.config.variant.has_high(), "high-level encoder")?;
        let h = self.down(g, trunk, "enc_high.conv1")?;
        let h = self.down(g, h, "enc_high.conv2")?;
        let mu = self.dense(g, h, "enc_high.mu")?;
        let lv = self.dense(g, h, "enc_high.logvar")?;
        Ok((mu, lv))
    }

    /// `z1` projected to `(B, P, S/16, S/16)` and broadcast to the low grid.
    fn cond_map(&self, g: &mut Graph, z1: Var, name: &str) -> Result<Var> {
        let b = g.shape(z1)[0];
        let top = self.config.top_grid();
        let m = self.dense(g, z1, name)?;
        let m = g.reshape(m, &[b, self.config.cond_channels, top, top])?;
        g.upsample_nearest(m, 4)
    }

    /// Low-level posterior `(mu2, logvar2)`, each `(B, z2_channels, S/4, S/4)`.
    ///
    /// `z1` must be given exactly when the variant is conditioned.
    pub fn encode_low(&self, g: &mut Graph, trunk: Var, z1: Option<Var>) -> Result<(Var, Var)> {
        self.require(self.config.variant.has_low(), "low-level encoder")?;
        let input = self.with_condition(g, trunk, z1, "enc_low.cond")?;
        let mu = self.conv(g, input, "enc_low.mu", 1, 1)?;
        let lv = self.conv(g, input, "enc_low.logvar", 1, 1)?;
        Ok((mu, lv))
    }

    fn with_condition(&self, g: &mut Graph, x: Var, z1: Option<Var>, name: &str) -> Result<Var> {
        match (self.config.variant.conditioned(), z1) {
            (true, Some(z1)) => {
                let c = self.cond_map(g, z1, name)?;
                g.concat_channels(x, c)
            }
            (false, None) => Ok(x),
            (true, None) => Err(Error::Invalid(format!(
                "{} variant needs z1 for the low branch",
                self.config.variant
            ))),
            (false, Some(_)) => Err(Error::Invalid(format!(
                "{} variant has no z1 conditioning",
                self.config.variant
            ))),
        }
    }

    /// `(B, z1_dim) -> (B, 1, S, S)` through four up-sampling stages.
    pub fn decode_high(&self, g: &mut Graph, z1: Var) -> Result<Var> {
        self.require(self.config.variant.has_high(), "high-level decoder")?;
        let b = g.shape(z1)[0];
        let top = self.config.top_grid();
        let h = self.dense(g, z1, "dec_high.fc")?;
        let h = g.silu(h);
        let h = g.reshape(h, &[b, self.config.trunk_channels(), top, top])?;
        let h = self.up(g, h, "dec_high.up1", true)?;
        let h = self.up(g, h, "dec_high.up2", true)?;
        let h = self.up(g, h, "dec_high.up3", true)?;
        self.up(g, h, "dec_high.up4", false)
    }

    /// `z2 (B, z2_channels, S/4, S/4)` (plus `z1` when conditioned) `-> (B, 1, S, S)`.
    pub fn decode_low(&self, g: &mut Graph, z1: Option<Var>, z2: Var) -> Result<Var> {
        self.require(self.config.variant.has_low(), "low-level decoder")?;
        let input = self.with_condition(g, z2, z1, "dec_low.cond")?;
        let h = self.conv(g, input, "dec_low.conv", 1, 1)?;
        let h = g.silu(h);
        let h = self.up(g, h, "dec_low.up1", true)?;
        self.up(g, h, "dec_low.up2", false)
    }

    fn require(&self, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{} variant has no {what}", self.config.variant)))
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, sampling: &mut Sampling<'_>) -> Result<ForwardPass> {
        let variant = self.config.variant;
        let trunk = self.encode_trunk(g, x)?;
        let mut draw = LatentDraw {
            mu1: None,
            logvar1: None,
            z1: None,
            mu2: None,
            logvar2: None,
            z2: None,
        };

        let mut x_high = None;
        if variant.has_high() {
            let (mu, lv) = self.encode_high(g, trunk)?;
            let z1 = sampling.latent(g, mu, lv)?;
            draw.mu1 = Some(mu);
            draw.logvar1 = Some(lv);
            draw.z1 = Some(z1);
            x_high = Some(self.decode_high(g, z1)?);
        }

        let mut x_low = None;
        if variant.has_low() {
            let cond = if variant.conditioned() { draw.z1 } else { None };
            let (mu, lv) = self.encode_low(g, trunk, cond)?;
            let z2 = sampling.latent(g, mu, lv)?;
            draw.mu2 = Some(mu);
            draw.logvar2 = Some(lv);
            draw.z2 = Some(z2);
            x_low = Some(self.decode_low(g, cond, z2)?);
        }

        let x_combined = match (x_high, x_low) {
            (Some(h), Some(l)) => g.add(h, l)?,
            (Some(h), None) => h,
            (None, Some(l)) => l,
            (None, None) => unreachable!("every variant has at least one branch"),
        };

        let x_zero = match (variant, x_low) {
            (Variant::Pch, Some(low)) => {
                let input = if self.config.term3_detached { g.detach(low) } else { low };
                let t = self.encode_trunk(g, input)?;
                let (mu, lv) = self.encode_high(g, t)?;
                let z = sampling.latent(g, mu, lv)?;
                Some(self.decode_high(g, z)?)
            }
            _ => None,
        };

        Ok(ForwardPass {
            variant,
            draw,
            recon: Reconstruction {
                x_high,
                x_low,
                x_combined,
                x_zero,
            },
        })
    }

    /// Posterior-mean reconstructions of an image batch.
    pub fn reconstruct(&self, x: &Tensor) -> Result<ReconstructionTensors> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fp = self.forward(&mut g, xv, &mut Sampling::Mean)?;
        Ok(ReconstructionTensors::collect(&g, &fp.recon))
    }
}

/// Materialized [`Reconstruction`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionTensors {
    pub x_high: Option<Tensor>,
    pub x_low: Option<Tensor>,
    pub x_combined: Tensor,
    pub x_zero: Option<Tensor>,
}

impl ReconstructionTensors {
    pub fn collect(g: &Graph, r: &Reconstruction) -> Self {
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        ReconstructionTensors {
            x_high: get(r.x_high),
            x_low: get(r.x_low),
            x_combined: g.value(r.x_combined).clone(),
            x_zero: get(r.x_zero),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, size: usize) -> ArchConfig {
        ArchConfig {
            image_size: size,
            variant,
            ..ArchConfig::default()
        }
    }

    fn random_batch(b: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed);
        Tensor::from_fn(&[b, 1, s, s], |_| rng.normal())
    }

    fn zero_biases(m: &mut Model) {
        for (name, e) in m.params.iter_mut() {
            if name.ends_with(".b") {
                e.value.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn trunk_shape_and_determinism() {
        let m = Model::new(cfg(Variant::Pch, 32), 1).unwrap();
        let x = random_batch(3, 32, 2);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h = m.encode_trunk(&mut g, xv).unwrap();
            g.value(h).clone()
        };
        let h = run();
        assert_eq!(h.shape(), &[3, 32, 8, 8]);
        assert_eq!(h, run());
        let bits: Vec<u64> = h.data().iter().map(|v| v.to_bits()).collect();
        let again: Vec<u64> = run().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, again);

        let mut g = Graph::new();
        let bad = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        assert!(m.encode_trunk(&mut g, bad).is_err());
    }

    #[test]
    fn trunk_zero_input_is_bias_driven() {
        let mut m = Model::new(cfg(Variant::High, 32), 3).unwrap();
        for name in ["trunk.conv1.b", "trunk.conv2.b"] {
            m.params.get_mut(name).unwrap().value.data_mut().fill(0.25);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let h = m.encode_trunk(&mut g, x).unwrap();
        // first layer output is exactly the bias; the second is a deterministic function of it
        let h1 = g.value(Var::clone(&h)).clone();
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let h2 = m.encode_trunk(&mut g2, x2).unwrap();
        assert_eq!(&h1, g2.value(h2));
        assert!(h1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let m = Model::new(cfg(Variant::Pch, 32), 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_batch(2, 32, 5));
        let fp = m
            .forward(&mut g, x, &mut Sampling::Draw(&mut SeedStream::new(6)))
            .unwrap();
        let d = fp.draw;
        assert_eq!(g.shape(d.mu1.unwrap()), &[2, 32]);
        assert_eq!(g.shape(d.logvar1.unwrap()), &[2, 32]);
        assert_eq!(g.shape(d.z1.unwrap()), &[2, 32]);
        assert_eq!(g.shape(d.mu2.unwrap()), &[2, 4, 8, 8]);
        assert_eq!(g.shape(d.z2.unwrap()), &[2, 4, 8, 8]);
        for v in [
            fp.recon.x_high,
            fp.recon.x_low,
            Some(fp.recon.x_combined),
            fp.recon.x_zero,
        ] {
            let v = v.unwrap();
            assert_eq!(g.shape(v), &[2, 1, 32, 32]);
            assert!(g.value(v).is_finite());
        }
        // x_combined is the exact elementwise sum
        let (h, l, c) = (fp.recon.x_high.unwrap(), fp.recon.x_low.unwrap(), fp.recon.x_combined);
        for ((a, b), s) in g.value(h).data().iter().zip(g.value(l).data()).zip(g.value(c).data()) {
            assert_eq!(a + b, *s);
        }
    }

    #[test]
    fn variant_contracts() {
        let x = random_batch(2, 32, 7);
        for v in Variant::ALL {
            let m = Model::new(cfg(v, 32), 8).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fp = m
                .forward(&mut g, xv, &mut Sampling::Draw(&mut SeedStream::new(9)))
                .unwrap();
            let r = fp.recon;
            match v {
                Variant::High => {
                    assert!(r.x_low.is_none() && r.x_zero.is_none() && fp.draw.z2.is_none());
                    assert_eq!(r.x_combined, r.x_high.unwrap());
                }
                Variant::Low => {
                    assert!(r.x_high.is_none() && r.x_zero.is_none() && fp.draw.z1.is_none());
                    assert_eq!(r.x_combined, r.x_low.unwrap());
                }
                Variant::Ch => assert!(r.x_high.is_some() && r.x_low.is_some() && r.x_zero.is_none()),
                Variant::Pch => assert!(r.x_zero.is_some()),
            }
        }
    }

    #[test]
    fn pch_parameter_count_close_to_high() {
        let high = Model::new(cfg(Variant::High, 32), 0).unwrap().num_parameters();
        let pch = Model::new(cfg(Variant::Pch, 32), 0).unwrap().num_parameters();
        let ratio = pch as f64 / high as f64;
        assert!((1.0..=1.1).contains(&ratio), "pch {pch} / high {high} = {ratio}");
    }

    #[test]
    fn latent_geometry_is_shared() {
        let pch = cfg(Variant::Pch, 32);
        let m_pch = Model::new(pch.clone(), 0).unwrap();
        let m_high = Model::new(cfg(Variant::High, 32), 0).unwrap();
        let m_low = Model::new(cfg(Variant::Low, 32), 0).unwrap();
        let shape = |m: &Model, n: &str| m.params.value(n).unwrap().shape().to_vec();
        assert_eq!(shape(&m_pch, "enc_high.mu.w")[0], shape(&m_high, "enc_high.mu.w")[0]);
        assert_eq!(shape(&m_pch, "enc_low.mu.w")[0], shape(&m_low, "enc_low.mu.w")[0]);
    }

    #[test]
    fn zero_latents_and_biases_decode_to_zero() {
        let mut m = Model::new(cfg(Variant::Pch, 32), 10).unwrap();
        zero_biases(&mut m);
        let mut g = Graph::new();
        let z1 = g.constant(Tensor::zeros(&[2, 32]));
        let z2 = g.constant(Tensor::zeros(&[2, 4, 8, 8]));
        let xh = m.decode_high(&mut g, z1).unwrap();
        let xl = m.decode_low(&mut g, Some(z1), z2).unwrap();
        assert_eq!(g.shape(xh), &[2, 1, 32, 32]);
        assert!(g.value(xh).data().iter().all(|&v| v == 0.0));
        assert!(g.value(xl).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn low_decoder_conditioning_is_live() {
        let m = Model::new(cfg(Variant::Pch, 32), 11).unwrap();
        let mut g = Graph::new();
        let z2 = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let za = g.constant(Tensor::zeros(&[1, 32]));
        let zb = g.constant(Tensor::full(&[1, 32], 0.5));
        let a = m.decode_low(&mut g, Some(za), z2).unwrap();
        let b = m.decode_low(&mut g, Some(zb), z2).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
    }

    #[test]
    fn low_encoder_ignores_z1_when_conditioning_is_zeroed() {
        let mut m = Model::new(cfg(Variant::Pch, 32), 12).unwrap();
        for n in ["enc_low.cond.w", "enc_low.cond.b"] {
            m.params.get_mut(n).unwrap().value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_batch(1, 32, 13));
        let h = m.encode_trunk(&mut g, x).unwrap();
        let za = g.constant(Tensor::zeros(&[1, 32]));
        let zb = g.constant(Tensor::full(&[1, 32], 3.0));
        let (ma, _) = m.encode_low(&mut g, h, Some(za)).unwrap();
        let (mb, _) = m.encode_low(&mut g, h, Some(zb)).unwrap();
        assert_eq!(g.value(ma), g.value(mb));
        assert_eq!(g.shape(ma), &[1, 4, 8, 8]);
    }

    #[test]
    fn gradients_reach_trunk_and_z1_producer() {
        let m = Model::new(cfg(Variant::Pch, 32), 14).unwrap();
        let mut params = m.params.clone();
        let mut g = Graph::new();
        let x = g.constant(random_batch(2, 32, 15));
        let h = m.encode_trunk(&mut g, x).unwrap();
        let (mu1, _) = m.encode_high(&mut g, h).unwrap();
        let s = g.sum(mu1);
        g.backward(s, &mut params).unwrap();
        assert!(params.grad("trunk.conv1.w").unwrap().data().iter().any(|&v| v != 0.0));

        // mu2 depends on z1 through the conditioning map, so enc_high receives gradient
        params.zero_grads();
        let mut g = Graph::new();
        let x = g.constant(random_batch(2, 32, 15));
        let h = m.encode_trunk(&mut g, x).unwrap();
        let (mu1, lv1) = m.encode_high(&mut g, h).unwrap();
        let z1 = g.gaussian_sample(mu1, lv1, &mut SeedStream::new(1)).unwrap();
        let (mu2, _) = m.encode_low(&mut g, h, Some(z1)).unwrap();
        let sq = g.square(mu2);
        let s = g.sum(sq);
        g.backward(s, &mut params).unwrap();
        assert!(params.grad("enc_high.mu.w").unwrap().data().iter().any(|&v| v != 0.0));
        assert!(params.grad("dec_high.fc.w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let m = Model::new(cfg(Variant::Pch, 16), 16).unwrap();
        let x = random_batch(2, 16, 17);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut rng = SeedStream::new(18);
            let fp = m.forward(&mut g, xv, &mut Sampling::Draw(&mut rng)).unwrap();
            (
                g.value(fp.draw.z2.unwrap()).clone(),
                ReconstructionTensors::collect(&g, &fp.recon),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation_and_kv() {
        assert!(ArchConfig {
            image_size: 24,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ArchConfig {
            z1_dim: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let c = ArchConfig {
            variant: Variant::Low,
            z1_dim: 7,
            term3_detached: false,
            ..Default::default()
        };
        let mut kv = KeyValues::new();
        c.write_kv(&mut kv);
        let mut back = ArchConfig::default();
        back.read_kv(&kv).unwrap();
        assert_eq!(back, c);
        assert!("zzz".parse::<Variant>().is_err());
    }

    #[test]
    fn from_params_rejects_other_variant() {
        let high = Model::new(cfg(Variant::High, 32), 0).unwrap();
        assert!(Model::from_params(cfg(Variant::High, 32), high.params.clone()).is_ok());
        assert!(matches!(
            Model::from_params(cfg(Variant::Pch, 32), high.params.clone()),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(Model::from_params(cfg(Variant::High, 16), high.params).is_err());
    }
}
