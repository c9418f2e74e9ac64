//! Differentiable building blocks: ConvBNAct, the multi-scale fusion atrous
//! block (MFACB), multi-scale attention fusion (MSA/MSAF), serial-parallel
//! atrous spatial pyramid pooling (SPASPP), and the two heads.
//!
//! Blocks own their parameters as [`Tensor`] leaves and expose
//! `collect_params` / `collect_buffers` for the optimizer and checkpoints.
//! Convolutions followed by batch norm carry no bias. Forward passes
//! validate channel contracts and return shape errors rather than panicking.

use crate::config::ConvLayerSpec;
use crate::error::{DsnetError, Result};
use crate::tensor::{Padding, Tensor};
use ndarray::{Array1, Array4, ArrayD, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Batch-norm behaviour switch: batch statistics (and running-average
/// updates) during training, frozen running averages at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// Conv2d + BatchNorm2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        with_bias: bool,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        let weight = Tensor::param(kaiming(
            rng,
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
        ));
        let bias = with_bias.then(|| Tensor::param(ArrayD::zeros(IxDyn(&[out_channels]))));
        Conv2d {
            weight,
            bias,
            stride,
            dilation,
            padding: Padding::Same,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4();
        if c != self.in_channels {
            return Err(DsnetError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok(x.conv2d(
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.dilation,
            self.padding,
        ))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Tensor::constant(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Tensor::constant(ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(DsnetError::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        match phase {
            Phase::Train => {
                let m = (n * h * w) as f64;
                let xd = x.data();
                let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let mut s = 0.0;
                    for item in 0..n {
                        for r in 0..h {
                            for cc in 0..w {
                                s += x4[(item, ch, r, cc)];
                            }
                        }
                    }
                    mean[ch] = s / m;
                    let mut sv = 0.0;
                    for item in 0..n {
                        for r in 0..h {
                            for cc in 0..w {
                                sv += (x4[(item, ch, r, cc)] - mean[ch]).powi(2);
                            }
                        }
                    }
                    var[ch] = sv / m;
                }
                drop(xd);
                // Running averages track the unbiased variance.
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mut rm = self.running_mean.to_array();
                let mut rv = self.running_var.to_array();
                for ch in 0..c {
                    rm[ch] = (1.0 - self.momentum) * rm[ch] + self.momentum * mean[ch];
                    rv[ch] = (1.0 - self.momentum) * rv[ch] + self.momentum * var[ch] * unbias;
                }
                self.running_mean.set_data(rm);
                self.running_var.set_data(rv);
                Ok(x.batch_norm(&self.gamma, &self.beta, &mean, &var, self.eps, true))
            }
            Phase::Eval => {
                let mean = self
                    .running_mean
                    .to_array()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let var = self
                    .running_var
                    .to_array()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                Ok(x.batch_norm(&self.gamma, &self.beta, &mean, &var, self.eps, false))
            }
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

/// Convolution + batch norm + optional rectifier, the unit every branch is
/// built from.
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBnAct {
    pub fn new(
        rng: &mut ChaCha8Rng,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        act: bool,
    ) -> ConvBnAct {
        ConvBnAct {
            conv: Conv2d::new(rng, kernel, in_channels, out_channels, stride, dilation, false),
            bn: BatchNorm2d::new(out_channels),
            act,
        }
    }

    pub fn from_spec(rng: &mut ChaCha8Rng, spec: &ConvLayerSpec) -> Result<ConvBnAct> {
        spec.validate()?;
        Ok(ConvBnAct::new(
            rng,
            spec.kernel,
            spec.in_channels,
            spec.out_channels,
            spec.stride,
            spec.dilation,
            true,
        ))
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, phase)?;
        Ok(if self.act { y.relu() } else { y })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.bn.collect_buffers(&format!("{prefix}.bn"), out);
    }
}

// ---------------------------------------------------------------------------
// MFACB
// ---------------------------------------------------------------------------

/// Multi-scale fusion atrous convolutional block configuration: serial 3x3
/// atrous taps (usually three), concatenation of every intermediate map, 1x1
/// compression to the last tap's width, then a residual connection.
#[derive(Debug, Clone)]
pub struct MfacbConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub rates: Vec<usize>,
}

impl MfacbConfig {
    pub fn new(in_channels: usize, channels: Vec<usize>, rates: Vec<usize>) -> Result<Self> {
        let cfg = MfacbConfig {
            in_channels,
            channels,
            rates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() > 3 {
            return Err(DsnetError::Validation(format!(
                "MFACB takes 1..=3 taps, got {}",
                self.channels.len()
            )));
        }
        if self.channels.len() != self.rates.len() {
            return Err(DsnetError::Validation(
                "MFACB channels and rates must have equal length".into(),
            ));
        }
        if self.rates.iter().any(|&r| r < 1) || self.channels.iter().any(|&c| c < 1) {
            return Err(DsnetError::Validation("MFACB rates/channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Geometry of the serial taps, as fed to the receptive-field analyzer.
    pub fn tap_specs(&self) -> Vec<ConvLayerSpec> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (&c, &r) in self.channels.iter().zip(&self.rates) {
            specs.push(ConvLayerSpec::new(3, r, cin, c));
            cin = c;
        }
        specs
    }
}

pub struct Mfacb {
    pub cfg: MfacbConfig,
    pub(crate) taps: Vec<ConvBnAct>,
    pub(crate) compress: ConvBnAct,
    projection: Option<ConvBnAct>,
}

impl Mfacb {
    pub fn new(rng: &mut ChaCha8Rng, cfg: MfacbConfig) -> Result<Mfacb> {
        cfg.validate()?;
        let mut taps = Vec::new();
        let mut cin = cfg.in_channels;
        for (&c, &r) in cfg.channels.iter().zip(&cfg.rates) {
            taps.push(ConvBnAct::new(rng, 3, cin, c, 1, r, true));
            cin = c;
        }
        let concat: usize = cfg.channels.iter().sum();
        let compress = ConvBnAct::new(rng, 1, concat, cfg.out_channels(), 1, 1, false);
        let projection = (cfg.in_channels != cfg.out_channels())
            .then(|| ConvBnAct::new(rng, 1, cfg.in_channels, cfg.out_channels(), 1, 1, false));
        Ok(Mfacb {
            cfg,
            taps,
            compress,
            projection,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4();
        if c != self.cfg.in_channels {
            return Err(DsnetError::Shape(format!(
                "MFACB expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        // Serial taps; every intermediate map joins the concatenation in
        // tap order (tap1, tap2, tap3): the compression conv's input layout
        // is part of the block contract.
        let mut intermediates = Vec::with_capacity(self.taps.len());
        let mut cur = x.clone();
        for tap in &self.taps {
            cur = tap.forward(&cur, phase)?;
            intermediates.push(cur.clone());
        }
        let merged = Tensor::concat_channels(&intermediates);
        let compressed = self.compress.forward(&merged, phase)?;
        let residual = match &self.projection {
            Some(p) => p.forward(x, phase)?,
            None => x.clone(),
        };
        Ok(compressed.add(&residual))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, tap) in self.taps.iter().enumerate() {
            tap.collect_params(&format!("{prefix}.tap{i}"), out);
        }
        self.compress.collect_params(&format!("{prefix}.compress"), out);
        if let Some(p) = &self.projection {
            p.collect_params(&format!("{prefix}.proj"), out);
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, tap) in self.taps.iter().enumerate() {
            tap.collect_buffers(&format!("{prefix}.tap{i}"), out);
        }
        self.compress.collect_buffers(&format!("{prefix}.compress"), out);
        if let Some(p) = &self.projection {
            p.collect_buffers(&format!("{prefix}.proj"), out);
        }
    }

    /// Zero the compression conv and its norm scale/shift; with matching
    /// widths the block then reproduces its input exactly.
    pub fn zero_compression(&self) {
        zero_tensor(&self.compress.conv.weight);
        zero_tensor(&self.compress.bn.gamma);
        zero_tensor(&self.compress.bn.beta);
    }
}

pub(crate) fn zero_tensor(t: &Tensor) {
    t.set_data(ArrayD::zeros(IxDyn(&t.shape())));
}

// ---------------------------------------------------------------------------
// MSA / MSAF
// ---------------------------------------------------------------------------

/// Multi-scale attention configuration: pooling grids for region attention
/// and the Gonv bottleneck ratio.
#[derive(Debug, Clone)]
pub struct MsaConfig {
    pub channels: usize,
    pub grids: Vec<usize>,
    pub reduction: usize,
}

impl MsaConfig {
    pub fn new(channels: usize) -> MsaConfig {
        MsaConfig {
            channels,
            grids: vec![1, 4, 8, 16],
            reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty()
            || self.grids[0] < 1
            || !self.grids.windows(2).all(|w| w[0] < w[1])
        {
            return Err(DsnetError::Validation(format!(
                "MSA grids must be ascending and >= 1, got {:?}",
                self.grids
            )));
        }
        if self.channels < 1 || self.reduction < 1 {
            return Err(DsnetError::Validation("MSA channels/reduction must be >= 1".into()));
        }
        Ok(())
    }
}

/// Channel compress-and-expand pair (1x1 conv, rectifier, 1x1 conv).
pub struct Gonv {
    pub(crate) reduce: Conv2d,
    pub(crate) expand: Conv2d,
}

impl Gonv {
    fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Gonv {
        let mid = (channels / reduction).max(1);
        Gonv {
            reduce: Conv2d::new(rng, 1, channels, mid, 1, 1, true),
            expand: Conv2d::new(rng, 1, mid, channels, 1, 1, true),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.expand.forward(&self.reduce.forward(x)?.relu())
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
        self.expand.collect_params(&format!("{prefix}.expand"), out);
    }

    fn zero(&self) {
        zero_tensor(&self.reduce.weight);
        zero_tensor(self.reduce.bias.as_ref().unwrap());
        zero_tensor(&self.expand.weight);
        zero_tensor(self.expand.bias.as_ref().unwrap());
    }
}

/// Multi-scale attention: pixel logits plus region logits over the pooling
/// grids, each branch with its own Gonv.
pub struct Msa {
    pub cfg: MsaConfig,
    pub(crate) pixel: Gonv,
    pub(crate) region: Vec<Gonv>,
}

impl Msa {
    pub fn new(rng: &mut ChaCha8Rng, cfg: MsaConfig) -> Result<Msa> {
        cfg.validate()?;
        let pixel = Gonv::new(rng, cfg.channels, cfg.reduction);
        let region = cfg
            .grids
            .iter()
            .map(|_| Gonv::new(rng, cfg.channels, cfg.reduction))
            .collect();
        Ok(Msa { cfg, pixel, region })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4();
        if c != self.cfg.channels {
            return Err(DsnetError::Shape(format!(
                "MSA expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Region-attention logits: for each grid, average-pool, Gonv, and
    /// broadcast back; grids larger than the feature map clamp to it.
    pub fn region_attention(&self, f_fuse: &Tensor) -> Result<Tensor> {
        self.check(f_fuse)?;
        let (_, _, h, w) = f_fuse.dims4();
        let mut acc: Option<Tensor> = None;
        for (gonv, &grid) in self.region.iter().zip(&self.cfg.grids) {
            let (gh, gw) = (grid.min(h), grid.min(w));
            let pooled = f_fuse.adaptive_avg_pool(gh, gw);
            let mapped = gonv.forward(&pooled)?;
            let spread = mapped.unpool_broadcast(h, w);
            acc = Some(match acc {
                Some(a) => a.add(&spread),
                None => spread,
            });
        }
        Ok(acc.expect("at least one grid"))
    }

    /// Pixel-attention logits: the Gonv applied pointwise.
    pub fn pixel_attention(&self, f_fuse: &Tensor) -> Result<Tensor> {
        self.check(f_fuse)?;
        self.pixel.forward(f_fuse)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.pixel.collect_params(&format!("{prefix}.pixel"), out);
        for (g, gonv) in self.region.iter().enumerate() {
            gonv.collect_params(&format!("{prefix}.region{g}"), out);
        }
    }

    /// Force every attention logit to zero (alpha becomes exactly 1/2).
    pub fn zero_weights(&self) {
        self.pixel.zero();
        for g in &self.region {
            g.zero();
        }
    }

    /// Shift the final pixel-expand bias; large values saturate alpha.
    pub fn inject_pixel_bias(&self, value: f64) {
        let b = self.pixel.expand.bias.as_ref().unwrap();
        b.set_data(ArrayD::from_elem(IxDyn(&b.shape()), value));
    }
}

/// Multi-scale attention fusion of the two branches:
/// fused = context + spatial, alpha = sigmoid(pixel + region),
/// out = context*alpha + spatial*(1 - alpha).
pub struct Msaf {
    pub msa: Msa,
}

impl Msaf {
    pub fn new(rng: &mut ChaCha8Rng, cfg: MsaConfig) -> Result<Msaf> {
        Ok(Msaf {
            msa: Msa::new(rng, cfg)?,
        })
    }

    pub fn forward(&self, f_context: &Tensor, f_spatial: &Tensor) -> Result<Tensor> {
        if f_context.shape() != f_spatial.shape() {
            return Err(DsnetError::Shape(format!(
                "MSAF inputs differ: {:?} vs {:?}",
                f_context.shape(),
                f_spatial.shape()
            )));
        }
        let alpha = self.attention(f_context, f_spatial)?;
        let one_minus = alpha.affine(-1.0, 1.0);
        Ok(f_context.mul(&alpha).add(&f_spatial.mul(&one_minus)))
    }

    /// The fusion weights alpha, elementwise in (0, 1).
    pub fn attention(&self, f_context: &Tensor, f_spatial: &Tensor) -> Result<Tensor> {
        let fused = f_context.add(f_spatial);
        let logits = self
            .msa
            .pixel_attention(&fused)?
            .add(&self.msa.region_attention(&fused)?);
        Ok(logits.sigmoid())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.msa.collect_params(&format!("{prefix}.msa"), out);
    }
}

/// Elementwise-sum fusion, the ablation baseline.
pub fn add_fuse(f_context: &Tensor, f_spatial: &Tensor) -> Result<Tensor> {
    if f_context.shape() != f_spatial.shape() {
        return Err(DsnetError::Shape(format!(
            "add fusion inputs differ: {:?} vs {:?}",
            f_context.shape(),
            f_spatial.shape()
        )));
    }
    Ok(f_context.add(f_spatial))
}

// ---------------------------------------------------------------------------
// SPASPP
// ---------------------------------------------------------------------------

/// Serial-parallel atrous spatial pyramid pooling configuration. The serial
/// 3x3 taps run at `width` channels (half the block width by default); all
/// intermediates plus the optional global and input branches concatenate
/// into a 1x1 compression, then a residual joins the input back in.
#[derive(Debug, Clone)]
pub struct SpasppConfig {
    pub channels: usize,
    pub width: usize,
    pub rates: Vec<usize>,
    pub include_global: bool,
    pub include_input: bool,
}

impl SpasppConfig {
    pub fn new(channels: usize, rates: Vec<usize>) -> SpasppConfig {
        SpasppConfig {
            channels,
            width: (channels / 2).max(1),
            rates,
            include_global: true,
            include_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || !self.rates.windows(2).all(|w| w[0] < w[1]) {
            return Err(DsnetError::Validation(format!(
                "SPASPP rates must be strictly increasing, got {:?}",
                self.rates
            )));
        }
        if self.channels < 1 || self.width < 1 {
            return Err(DsnetError::Validation("SPASPP channels/width must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct Spaspp {
    pub cfg: SpasppConfig,
    pub(crate) taps: Vec<ConvBnAct>,
    input_proj: Option<ConvBnAct>,
    global_proj: Option<ConvBnAct>,
    pub(crate) compress: ConvBnAct,
}

impl Spaspp {
    pub fn new(rng: &mut ChaCha8Rng, cfg: SpasppConfig) -> Result<Spaspp> {
        cfg.validate()?;
        let mut taps = Vec::new();
        let mut cin = cfg.channels;
        for &r in &cfg.rates {
            taps.push(ConvBnAct::new(rng, 3, cin, cfg.width, 1, r, true));
            cin = cfg.width;
        }
        let input_proj = cfg
            .include_input
            .then(|| ConvBnAct::new(rng, 1, cfg.channels, cfg.width, 1, 1, true));
        let global_proj = cfg
            .include_global
            .then(|| ConvBnAct::new(rng, 1, cfg.channels, cfg.width, 1, 1, true));
        let groups =
            cfg.rates.len() + usize::from(cfg.include_global) + usize::from(cfg.include_input);
        let compress = ConvBnAct::new(rng, 1, groups * cfg.width, cfg.channels, 1, 1, false);
        Ok(Spaspp {
            cfg,
            taps,
            input_proj,
            global_proj,
            compress,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        if c != self.cfg.channels {
            return Err(DsnetError::Shape(format!(
                "SPASPP expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        // Branch order is fixed: projected input, serial taps, global pool.
        let mut branches = Vec::new();
        if let Some(p) = &self.input_proj {
            branches.push(p.forward(x, phase)?);
        }
        let mut cur = x.clone();
        for tap in &self.taps {
            cur = tap.forward(&cur, phase)?;
            branches.push(cur.clone());
        }
        if let Some(g) = &self.global_proj {
            let pooled = x.adaptive_avg_pool(1, 1);
            let mapped = g.forward(&pooled, phase)?;
            branches.push(mapped.unpool_broadcast(h, w));
        }
        let merged = Tensor::concat_channels(&branches);
        let compressed = self.compress.forward(&merged, phase)?;
        Ok(compressed.add(x))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, tap) in self.taps.iter().enumerate() {
            tap.collect_params(&format!("{prefix}.tap{i}"), out);
        }
        if let Some(p) = &self.input_proj {
            p.collect_params(&format!("{prefix}.input_proj"), out);
        }
        if let Some(g) = &self.global_proj {
            g.collect_params(&format!("{prefix}.global_proj"), out);
        }
        self.compress.collect_params(&format!("{prefix}.compress"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, tap) in self.taps.iter().enumerate() {
            tap.collect_buffers(&format!("{prefix}.tap{i}"), out);
        }
        if let Some(p) = &self.input_proj {
            p.collect_buffers(&format!("{prefix}.input_proj"), out);
        }
        if let Some(g) = &self.global_proj {
            g.collect_buffers(&format!("{prefix}.global_proj"), out);
        }
        self.compress.collect_buffers(&format!("{prefix}.compress"), out);
    }

    pub fn zero_compression(&self) {
        zero_tensor(&self.compress.conv.weight);
        zero_tensor(&self.compress.bn.gamma);
        zero_tensor(&self.compress.bn.beta);
    }
}

// ---------------------------------------------------------------------------
// Heads and the dense spatial block
// ---------------------------------------------------------------------------

/// Dense 3x3 residual block of the spatial branch.
pub struct ResidualBlock {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
}

impl ResidualBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> ResidualBlock {
        ResidualBlock {
            conv1: ConvBnAct::new(rng, 3, channels, channels, 1, 1, true),
            conv2: ConvBnAct::new(rng, 3, channels, channels, 1, 1, false),
        }
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x, phase)?, phase)?;
        Ok(y.add(x).relu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect_buffers(&format!("{prefix}.conv1"), out);
        self.conv2.collect_buffers(&format!("{prefix}.conv2"), out);
    }
}

/// Segmentation head: 3x3 ConvBNAct to `head_channels`, 1x1 classifier,
/// bilinear upsample by `output_stride` back to input resolution.
pub struct SegHead {
    pub(crate) conv: ConvBnAct,
    pub(crate) classifier: Conv2d,
    pub output_stride: usize,
}

impl SegHead {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        head_channels: usize,
        num_classes: usize,
        output_stride: usize,
    ) -> SegHead {
        SegHead {
            conv: ConvBnAct::new(rng, 3, in_channels, head_channels, 1, 1, true),
            classifier: Conv2d::new(rng, 1, head_channels, num_classes, 1, 1, true),
            output_stride,
        }
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4();
        let y = self.classifier.forward(&self.conv.forward(x, phase)?)?;
        Ok(y.resize_bilinear(h * self.output_stride, w * self.output_stride))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.classifier.collect_params(&format!("{prefix}.classifier"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_buffers(&format!("{prefix}.conv"), out);
    }
}

/// Classification head: global average pool then a dense layer.
pub struct ClsHead {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    in_features: usize,
}

impl ClsHead {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, num_classes: usize) -> ClsHead {
        ClsHead {
            weight: Tensor::param(kaiming(rng, &[num_classes, in_features], in_features)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[num_classes]))),
            in_features,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4();
        if c != self.in_features {
            return Err(DsnetError::Shape(format!(
                "classification head expects {} channels, got {c}",
                self.in_features
            )));
        }
        Ok(x.spatial_mean2d().linear(&self.weight, &self.bias))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Convenience for tests and probes: a 4-d tensor seeded from a closure.
pub fn tensor4(n: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
    let len = n * c * h * w;
    let data: Vec<f64> = (0..len).map(f).collect();
    Tensor::constant(Array4::from_shape_vec((n, c, h, w), data).unwrap().into_dyn())
}

/// Uniform random 4-d tensor in [-1, 1) from a seeded generator.
pub fn randn4(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let len = n * c * h * w;
    let data: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::constant(Array4::from_shape_vec((n, c, h, w), data).unwrap().into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_bn_act_shapes() {
        let mut r = rng();
        // same padding, stride 1: spatial dims preserved, channels remapped
        let block = ConvBnAct::new(&mut r, 3, 32, 64, 1, 2, true);
        let x = randn4(&mut r, 1, 32, 16, 16);
        let y = block.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 64, 16, 16]);

        // stride 2 halves with ceil: 28 -> 14
        let stem = ConvBnAct::new(&mut r, 3, 3, 32, 2, 1, true);
        let x = randn4(&mut r, 1, 3, 28, 28);
        let y = stem.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 32, 14, 14]);
    }

    #[test]
    fn conv_bn_act_rejects_channel_mismatch() {
        let mut r = rng();
        let block = ConvBnAct::new(&mut r, 3, 32, 64, 1, 1, true);
        let x = randn4(&mut r, 1, 16, 8, 8);
        let err = block.forward(&x, Phase::Train).unwrap_err();
        assert!(matches!(err, DsnetError::Shape(_)), "{err}");
    }

    #[test]
    fn mfacb_output_shape_matches_last_tap() {
        let mut r = rng();
        let cfg = MfacbConfig::new(64, vec![64, 128, 128], vec![2, 2, 2]).unwrap();
        let block = Mfacb::new(&mut r, cfg).unwrap();
        let x = randn4(&mut r, 1, 64, 12, 12);
        let y = block.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 128, 12, 12]);
    }

    #[test]
    fn mfacb_zeroed_compression_is_identity() {
        let mut r = rng();
        let cfg = MfacbConfig::new(16, vec![16, 16, 16], vec![2, 3, 5]).unwrap();
        let block = Mfacb::new(&mut r, cfg).unwrap();
        block.zero_compression();
        let x = randn4(&mut r, 2, 16, 8, 8);
        let y = block.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.to_array(), x.to_array(), "residual identity must be bit-for-bit");
    }

    #[test]
    fn mfacb_concat_order_is_tap1_tap2_tap3() {
        // Pin the compression conv's input channel layout: route only
        // tap2's slice [4..8) through the weight and check the output
        // responds to tap2 alone.
        let mut r = rng();
        let cfg = MfacbConfig::new(4, vec![4, 4, 4], vec![1, 1, 1]).unwrap();
        let block = Mfacb::new(&mut r, cfg).unwrap();
        let x = randn4(&mut r, 1, 4, 6, 6);

        let mut w = ndarray::Array4::<f64>::zeros((4, 12, 1, 1));
        for co in 0..4 {
            w[(co, 4 + co, 0, 0)] = 1.0;
        }
        block.compress.conv.weight.set_data(w.into_dyn());

        let t1 = block.taps[0].forward(&x, Phase::Eval).unwrap();
        let t2 = block.taps[1].forward(&t1, Phase::Eval).unwrap();
        let y = block.forward(&x, Phase::Eval).unwrap();
        // Eval-mode norm stats are fresh (mean 0, var 1), so the selected
        // slice passes through the compression norm almost unchanged.
        let expected = t2.affine(1.0 / (1.0 + 1e-5f64).sqrt(), 0.0).add(&x);
        let diff = (&y.to_array() - &expected.to_array())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "concat order changed: diff {diff}");
    }

    #[test]
    fn msa_region_constant_input_gives_constant_logits() {
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 8,
            grids: vec![1, 4],
            reduction: 4,
        };
        let msa = Msa::new(&mut r, cfg).unwrap();
        // constant per channel
        let x = tensor4(1, 8, 12, 12, |i| (i / 144) as f64 * 0.3 - 1.0);
        let y = msa.region_attention(&x).unwrap();
        let yd = y.to_array();
        let y4 = yd.view().into_dimensionality::<Ix4>().unwrap();
        for ch in 0..8 {
            let v0 = y4[(0, ch, 0, 0)];
            for rr in 0..12 {
                for cc in 0..12 {
                    assert!((y4[(0, ch, rr, cc)] - v0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn msa_region_matches_bruteforce_on_4x4() {
        // Identity Gonv (weights forced) reduces region attention with one
        // grid to plain pool + broadcast; compare against a hand loop.
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 1,
            grids: vec![2],
            reduction: 1,
        };
        let msa = Msa::new(&mut r, cfg).unwrap();
        msa.region[0]
            .reduce
            .weight
            .set_data(ArrayD::ones(IxDyn(&[1, 1, 1, 1])));
        zero_tensor(msa.region[0].reduce.bias.as_ref().unwrap());
        msa.region[0]
            .expand
            .weight
            .set_data(ArrayD::ones(IxDyn(&[1, 1, 1, 1])));
        zero_tensor(msa.region[0].expand.bias.as_ref().unwrap());

        let vals: Vec<f64> = (0..16).map(|i| i as f64 + 1.0).collect(); // positive: relu transparent
        let x = tensor4(1, 1, 4, 4, |i| vals[i]);
        let y = msa.region_attention(&x).unwrap();
        let yd = y.to_array();
        for rr in 0..4 {
            for cc in 0..4 {
                let (r0, c0) = (rr / 2 * 2, cc / 2 * 2);
                let mean = (vals[r0 * 4 + c0]
                    + vals[r0 * 4 + c0 + 1]
                    + vals[(r0 + 1) * 4 + c0]
                    + vals[(r0 + 1) * 4 + c0 + 1])
                    / 4.0;
                assert!((yd[[0, 0, rr, cc]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_pixel_is_shift_equivariant() {
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 4,
            grids: vec![1],
            reduction: 2,
        };
        let msa = Msa::new(&mut r, cfg).unwrap();
        let x = randn4(&mut r, 1, 4, 6, 6);
        let xd = x.to_array();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut rolled = ndarray::Array4::<f64>::zeros((1, 4, 6, 6));
        for ch in 0..4 {
            for rr in 0..6 {
                for cc in 0..6 {
                    rolled[(0, ch, (rr + 1) % 6, (cc + 2) % 6)] = x4[(0, ch, rr, cc)];
                }
            }
        }
        let y = msa.pixel_attention(&x).unwrap().to_array();
        let y_roll = msa
            .pixel_attention(&Tensor::constant(rolled.into_dyn()))
            .unwrap()
            .to_array();
        let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
        let yr = y_roll.view().into_dimensionality::<Ix4>().unwrap();
        for ch in 0..4 {
            for rr in 0..6 {
                for cc in 0..6 {
                    assert!(
                        (y4[(0, ch, rr, cc)] - yr[(0, ch, (rr + 1) % 6, (cc + 2) % 6)]).abs()
                            < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn msaf_zero_logits_give_exact_mean() {
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 4,
            grids: vec![1, 2],
            reduction: 2,
        };
        let msaf = Msaf::new(&mut r, cfg).unwrap();
        msaf.msa.zero_weights();
        let a = randn4(&mut r, 1, 4, 8, 8);
        let b = randn4(&mut r, 1, 4, 8, 8);
        let y = msaf.forward(&a, &b).unwrap().to_array();
        let mean = (&a.to_array() + &b.to_array()) * 0.5;
        let diff = (&y - &mean).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn msaf_saturated_logits_select_context() {
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 4,
            grids: vec![1],
            reduction: 2,
        };
        let msaf = Msaf::new(&mut r, cfg).unwrap();
        msaf.msa.zero_weights();
        msaf.msa.inject_pixel_bias(50.0);
        let a = randn4(&mut r, 1, 4, 8, 8);
        let b = randn4(&mut r, 1, 4, 8, 8);
        let y = msaf.forward(&a, &b).unwrap().to_array();
        let diff = (&y - &a.to_array()).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-9, "max abs diff {diff}");
    }

    #[test]
    fn msaf_equal_inputs_are_fixed_points() {
        let mut r = rng();
        let cfg = MsaConfig {
            channels: 4,
            grids: vec![1, 2],
            reduction: 2,
        };
        let msaf = Msaf::new(&mut r, cfg).unwrap();
        let x = randn4(&mut r, 1, 4, 8, 8);
        let y = msaf.forward(&x, &x).unwrap().to_array();
        let xd = x.to_array();
        for (a, b) in y.iter().zip(xd.iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn add_fuse_basics() {
        let mut r = rng();
        let x = randn4(&mut r, 1, 3, 4, 4);
        let zero = Tensor::zeros(&[1, 3, 4, 4]);
        assert_eq!(add_fuse(&x, &zero).unwrap().to_array(), x.to_array());
        let doubled = add_fuse(&x, &x).unwrap().to_array();
        assert_eq!(doubled, &x.to_array() * 2.0);
        // and it is NOT the attention fusion in general
        let msaf =
            Msaf::new(&mut r, MsaConfig { channels: 3, grids: vec![1], reduction: 1 }).unwrap();
        let other = randn4(&mut r, 1, 3, 4, 4);
        let fused_add = add_fuse(&x, &other).unwrap().to_array();
        let fused_msaf = msaf.forward(&x, &other).unwrap().to_array();
        let diff = (&fused_add - &fused_msaf).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "attention fusion should differ from plain add");
    }

    #[test]
    fn spaspp_zeroed_compression_is_identity() {
        let mut r = rng();
        let cfg = SpasppConfig::new(16, vec![2, 4, 6]);
        let block = Spaspp::new(&mut r, cfg).unwrap();
        block.zero_compression();
        let x = randn4(&mut r, 1, 16, 8, 8);
        let y = block.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.to_array(), x.to_array());
    }

    #[test]
    fn spaspp_preserves_shape_and_counts_groups() {
        let mut r = rng();
        let cfg = SpasppConfig::new(32, vec![6, 12, 18, 24]);
        assert_eq!(
            cfg.rates.len() + usize::from(cfg.include_global) + usize::from(cfg.include_input),
            6
        );
        let block = Spaspp::new(&mut r, cfg).unwrap();
        let x = randn4(&mut r, 1, 32, 16, 16);
        let y = block.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 32, 16, 16]);
    }

    #[test]
    fn seg_head_upsamples_to_input_resolution() {
        let mut r = rng();
        let head = SegHead::new(&mut r, 16, 8, 5, 8);
        let x = randn4(&mut r, 1, 16, 4, 6);
        let y = head.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 32, 48]);

        let single = SegHead::new(&mut r, 16, 8, 1, 4);
        let y = single.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 16, 24]);
    }

    #[test]
    fn upsample_of_constant_map_is_constant() {
        let x = tensor4(1, 2, 3, 3, |i| if i < 9 { 1.5 } else { -0.25 });
        let y = x.resize_bilinear(24, 24);
        let yd = y.to_array();
        let y4 = yd.view().into_dimensionality::<Ix4>().unwrap();
        for rr in 0..24 {
            for cc in 0..24 {
                assert!((y4[(0, 0, rr, cc)] - 1.5).abs() < 1e-12);
                assert!((y4[(0, 1, rr, cc)] + 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_head_ignores_spatial_permutation() {
        let mut r = rng();
        let head = ClsHead::new(&mut r, 6, 10);
        let x = randn4(&mut r, 2, 6, 3, 3);
        let y = head.forward(&x).unwrap();
        assert_eq!(y.shape(), vec![2, 10]);

        // reverse the spatial positions (an honest permutation)
        let xd = x.to_array();
        let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
        let mut rev = ndarray::Array4::<f64>::zeros((2, 6, 3, 3));
        for item in 0..2 {
            for ch in 0..6 {
                for idx in 0..9 {
                    let (rr, cc) = (idx / 3, idx % 3);
                    let (pr, pc) = ((8 - idx) / 3, (8 - idx) % 3);
                    rev[(item, ch, pr, pc)] = x4[(item, ch, rr, cc)];
                }
            }
        }
        let y_rev = head.forward(&Tensor::constant(rev.into_dyn())).unwrap();
        let diff = (&y.to_array() - &y_rev.to_array()).mapv(f64::abs).sum();
        assert!(diff < 1e-12);

        // constant map: logits equal the linear map of channel means
        let c = tensor4(1, 6, 3, 3, |i| (i / 9) as f64 * 0.5);
        let y_c = head.forward(&c).unwrap();
        let means = ndarray::Array2::from_shape_fn((1, 6), |(_, ch)| ch as f64 * 0.5);
        let manual = Tensor::constant(means.into_dyn())
            .linear(&head.weight, &head.bias)
            .to_array();
        let diff = (&y_c.to_array() - &manual).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn stride_one_blocks_preserve_spatial_shape(
            n in 1usize..3,
            c in 1usize..5,
            h in 4usize..12,
            w in 4usize..12,
            seed in 0u64..1000,
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = randn4(&mut r, n, c, h, w);
            let mfacb = Mfacb::new(
                &mut r,
                MfacbConfig::new(c, vec![c, c + 1, c + 2], vec![1, 2, 3]).unwrap(),
            )
            .unwrap();
            let y = mfacb.forward(&x, Phase::Train).unwrap();
            proptest::prop_assert_eq!(y.shape(), vec![n, c + 2, h, w]);

            let msaf = Msaf::new(&mut r, MsaConfig { channels: c, grids: vec![1, 2], reduction: 2 }).unwrap();
            let y = msaf.forward(&x, &x.relu()).unwrap();
            proptest::prop_assert_eq!(y.shape(), vec![n, c, h, w]);

            let spaspp = Spaspp::new(&mut r, SpasppConfig::new(c, vec![2, 3])).unwrap();
            let y = spaspp.forward(&x, Phase::Train).unwrap();
            proptest::prop_assert_eq!(y.shape(), vec![n, c, h, w]);
        }
    }

    #[test]
    fn finite_inputs_stay_finite_through_every_block() {
        let mut r = rng();
        let x = randn4(&mut r, 2, 8, 8, 8);
        let mfacb = Mfacb::new(
            &mut r,
            MfacbConfig::new(8, vec![8, 16, 16], vec![2, 3, 5]).unwrap(),
        )
        .unwrap();
        let y = mfacb.forward(&x, Phase::Train).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        let msaf =
            Msaf::new(&mut r, MsaConfig { channels: 8, grids: vec![1, 4], reduction: 4 }).unwrap();
        let y = msaf.forward(&x, &x.relu()).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        let spaspp = Spaspp::new(&mut r, SpasppConfig::new(8, vec![2, 4])).unwrap();
        let y = spaspp.forward(&x, Phase::Train).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
