//! Registration and segmentation U-Nets and their losses.

mod loss;

use std::fmt::Write as _;
use std::path::Path;

use atlas_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{Container, Entry};

pub use loss::{loss_ce, loss_ce_logits, loss_ncc, loss_reg, loss_smooth, ncc_value, LossTerms, NCC_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct RegNetConfig {
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub flow_init_scale: f32,
    pub ncc_window: usize,
    pub ce_weight: f32,
    pub smooth_weight: f32,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![16, 32, 32, 32],
            dec_channels: vec![32, 32, 32, 32, 16],
            leaky_slope: 0.2,
            flow_init_scale: 1e-5,
            ncc_window: 9,
            ce_weight: 2.0,
            smooth_weight: 1.0,
        }
    }
}

impl RegNetConfig {
    /// Two resolution levels, sized for 64x64 images on a CPU.
    pub fn desk() -> Self {
        Self {
            enc_channels: vec![16, 32],
            dec_channels: vec![32, 32, 16],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return Err(Error::Config("encoder needs positive channel counts".into()));
        }
        if self.dec_channels.len() < self.enc_channels.len() || self.dec_channels.contains(&0) {
            return Err(Error::Config(
                "decoder needs at least one positive width per encoder level".into(),
            ));
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ncc_window {} must be odd and at least 3",
                self.ncc_window
            )));
        }
        if !(self.ce_weight >= 0.0) || !(self.smooth_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.flow_init_scale >= 0.0) || !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("init scale and slope must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "enc_channels={}\ndec_channels={}\nleaky_slope={}\nflow_init_scale={}\nncc_window={}\nce_weight={}\nsmooth_weight={}\n",
            list(&self.enc_channels),
            list(&self.dec_channels),
            self.leaky_slope,
            self.flow_init_scale,
            self.ncc_window,
            self.ce_weight,
            self.smooth_weight
        )
    }

    /// Applies one `key=value` override; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value `{value}` for {key}"));
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|c| c.trim().parse().map_err(|_| bad()))
                .collect()
        };
        match key {
            "enc_channels" => self.enc_channels = list(value)?,
            "dec_channels" => self.dec_channels = list(value)?,
            "leaky_slope" => self.leaky_slope = value.parse().map_err(|_| bad())?,
            "flow_init_scale" => self.flow_init_scale = value.parse().map_err(|_| bad())?,
            "ncc_window" => self.ncc_window = value.parse().map_err(|_| bad())?,
            "ce_weight" => self.ce_weight = value.parse().map_err(|_| bad())?,
            "smooth_weight" => self.smooth_weight = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Output head of a [`UNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Two-channel displacement field, initialised near zero.
    Flow,
    /// One-channel foreground probability.
    Sigmoid,
}

impl Head {
    fn as_str(self) -> &'static str {
        match self {
            Head::Flow => "flow",
            Head::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Head::Flow),
            "sigmoid" => Ok(Head::Sigmoid),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Encoder/decoder trunk with skip connections and a 3x3 output head.
///
/// Each encoder level is a stride-2 3x3 convolution. The first `levels`
/// decoder convolutions are each followed by 2x upsampling and concatenation
/// with the matching encoder activation (the input itself at full
/// resolution); the remaining ones run at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: RegNetConfig,
    in_channels: usize,
    head: Head,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameters of a [`UNet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl UNet {
    pub fn new(config: RegNetConfig, in_channels: usize, head: Head, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, f, c, scale) in Self::layout(&config, in_channels, head) {
            let fan_in = (c * 9) as f32;
            let std = scale.unwrap_or((2.0 / fan_in).sqrt());
            let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
            let w: Vec<f32> = (0..f * c * 9).map(|_| normal.sample(&mut rng)).collect();
            names.push(format!("{name}.weight"));
            params.push(Tensor::new(&[f, c, 3, 3], w)?);
            names.push(format!("{name}.bias"));
            params.push(Tensor::zeros(&[f]));
        }
        Ok(Self {
            config,
            in_channels,
            head,
            names,
            params,
        })
    }

    /// `(name, out channels, in channels, init std override)` per conv.
    fn layout(
        config: &RegNetConfig,
        in_channels: usize,
        head: Head,
    ) -> Vec<(String, usize, usize, Option<f32>)> {
        let mut out = Vec::new();
        let mut c = in_channels;
        let mut skips = vec![in_channels];
        for (i, &f) in config.enc_channels.iter().enumerate() {
            out.push((format!("enc{i}"), f, c, None));
            c = f;
            skips.push(f);
        }
        skips.pop();
        let levels = config.levels();
        for (i, &f) in config.dec_channels.iter().enumerate() {
            out.push((format!("dec{i}"), f, c, None));
            c = f;
            if i < levels {
                c += skips[levels - 1 - i];
            }
        }
        match head {
            Head::Flow => out.push(("head".into(), 2, c, Some(config.flow_init_scale))),
            Head::Sigmoid => out.push(("head".into(), 1, c, None)),
        }
        out
    }

    pub fn config(&self) -> &RegNetConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Records the parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    /// Raw head output (before any sigmoid) for an `[N, in_channels, H, W]` input.
    ///
    /// Each input channel is standardized per sample before the first
    /// convolution. The input is treated as data: no gradient reaches it.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != self.in_channels {
            return Err(Error::InvalidShape(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let levels = self.config.levels();
        let factor = 1usize << levels;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidShape(format!(
                "spatial size {h}x{w} is not divisible by {factor}"
            )));
        }
        let input = tape.constant(standardize(tape.value(input)));
        let slope = self.config.leaky_slope;
        let v = &bound.vars;
        let mut k = 0;
        let mut conv = |tape: &mut Tape, x: Var, stride: usize| -> Result<Var> {
            let y = tape.conv2d(x, v[k], v[k + 1], stride, 1)?;
            k += 2;
            Ok(y)
        };

        let mut skips = vec![input];
        let mut x = input;
        for _ in 0..levels {
            let y = conv(tape, x, 2)?;
            x = tape.leaky_relu(y, slope);
            skips.push(x);
        }
        skips.pop();
        for i in 0..self.config.dec_channels.len() {
            let y = conv(tape, x, 1)?;
            x = tape.leaky_relu(y, slope);
            if i < levels {
                let up = tape.upsample2x(x)?;
                x = tape.concat(&[up, skips[levels - 1 - i]])?;
            }
        }
        conv(tape, x, 1)
    }

    /// Writes parameters and a `key=value` header into a container.
    pub fn to_container(&self, extra_header: &str) -> Container {
        let mut c = Container::new();
        let mut header = format!(
            "head={}\nin_channels={}\n{}",
            self.head.as_str(),
            self.in_channels,
            self.config.to_text()
        );
        header.push_str(extra_header);
        c.push(Entry::text(HEADER, &header));
        for (n, p) in self.names.iter().zip(&self.params) {
            c.push(Entry::f32(n.clone(), p.shape(), p.data().to_vec()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, Header)> {
        let header = Header::parse(c.get(HEADER)?.as_text()?)?;
        let mut config = RegNetConfig::default();
        for (k, v) in &header.pairs {
            config.set(k, v)?;
        }
        let head = Head::parse(header.require("head")?)?;
        let in_channels = header
            .require("in_channels")?
            .parse()
            .map_err(|_| Error::Config("bad in_channels".into()))?;
        let mut net = Self::new(config, in_channels, head, 0)?;
        for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
            let e = c.get(name)?;
            if e.dims_usize() != p.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "parameter {name} has dims {:?}, expected {:?}",
                        e.dims,
                        p.shape()
                    ),
                });
            }
            p.data_mut().copy_from_slice(e.as_f32()?);
        }
        Ok((net, header))
    }

    pub fn save(&self, path: &Path, extra_header: &str) -> Result<()> {
        self.to_container(extra_header).write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Header)> {
        Self::from_container(&Container::read(path)?)
    }
}

pub const HEADER: &str = "__header__";

/// Flat `key=value` text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    pub pairs: Vec<(String, String)>,
}

impl Header {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("header line `{line}` lacks `=`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("header lacks `{key}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Zero mean and unit variance per `(sample, channel)` plane; flat planes
/// are only centred.
pub fn standardize(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let shape = t.shape();
    let plane = shape[2..].iter().product::<usize>().max(1);
    for chunk in out.data_mut().chunks_mut(plane) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
    }
    out
}

/// Registration network: maps (moving, fixed) to a displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNet {
    pub unet: UNet,
}

impl RegNet {
    pub fn new(config: RegNetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(config, 2, Head::Flow, seed)?,
        })
    }

    pub fn config(&self) -> &RegNetConfig {
        self.unet.config()
    }

    /// Flow `[N,2,H,W]` (x then y displacement, pixels) taking `moving` onto `fixed`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, moving: Var, fixed: Var) -> Result<Var> {
        let input = tape.concat(&[moving, fixed])?;
        self.unet.forward(tape, bound, input)
    }

    /// Inference: returns the flow for `[N,1,H,W]` tensors.
    pub fn flow(&self, moving: &Tensor, fixed: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.unet.bind_frozen(&mut tape);
        let m = tape.constant(moving.clone());
        let f = tape.constant(fixed.clone());
        let out = self.forward(&mut tape, &bound, m, f)?;
        Ok(tape.value(out).clone())
    }
}

/// End-to-end segmentation network with the same trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub unet: UNet,
}

impl SegNet {
    pub fn new(config: RegNetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(config, 1, Head::Sigmoid, seed)?,
        })
    }

    pub fn config(&self) -> &RegNetConfig {
        self.unet.config()
    }

    /// Foreground probability `[N,1,H,W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, scan: Var) -> Result<Var> {
        let logits = self.logits(tape, bound, scan)?;
        Ok(tape.sigmoid(logits))
    }

    /// Pre-sigmoid output `[N,1,H,W]`.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, scan: Var) -> Result<Var> {
        self.unet.forward(tape, bound, scan)
    }

    pub fn predict(&self, scan: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.unet.bind_frozen(&mut tape);
        let s = tape.constant(scan.clone());
        let out = self.forward(&mut tape, &bound, s)?;
        Ok(tape.value(out).clone())
    }
}
