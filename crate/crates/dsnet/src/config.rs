//! Declarative model configuration: convolution geometry, dilation-schedule
//! notation, and the full network description that drives building, counting
//! and linting.
//!
//! Config files are flat TOML with an explicit `version` field. Unknown
//! fields are rejected so ablation diffs cannot silently typo a knob.

use crate::error::{DsnetError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const CONFIG_VERSION: u32 = 1;

/// Geometry of a single convolution, shared by the model builder and the
/// receptive-field analyzer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding_mode: PaddingMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Same,
    Valid,
}

impl ConvLayerSpec {
    pub fn new(kernel: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvLayerSpec {
            kernel,
            dilation,
            stride: 1,
            in_channels,
            out_channels,
            padding_mode: PaddingMode::Same,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Effective kernel extent `(k-1)*d + 1` in pixels.
    pub fn extent(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(DsnetError::Validation(format!(
                "kernel must be a positive odd integer, got {}",
                self.kernel
            )));
        }
        if self.dilation < 1 || self.stride < 1 {
            return Err(DsnetError::Validation(format!(
                "dilation and stride must be >= 1, got d={} s={}",
                self.dilation, self.stride
            )));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(DsnetError::Validation("channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ordered atrous-rate groups, e.g. `d2x6+d3x6+d5x4` = six rate-2 layers,
/// six rate-3 layers, four rate-5 layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationSchedule {
    pub groups: Vec<(usize, usize)>, // (rate, count)
}

impl DilationSchedule {
    pub fn new(groups: Vec<(usize, usize)>) -> Result<Self> {
        let s = DilationSchedule { groups };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(DsnetError::Validation("schedule has no groups".into()));
        }
        for &(rate, count) in &self.groups {
            if rate < 1 {
                return Err(DsnetError::Validation(format!(
                    "schedule rate must be >= 1, got {rate}"
                )));
            }
            if count < 1 {
                return Err(DsnetError::Validation(format!(
                    "schedule count must be >= 1, got {count} for rate {rate}"
                )));
            }
        }
        Ok(())
    }

    /// Total number of atrous layers.
    pub fn total_layers(&self) -> usize {
        self.groups.iter().map(|&(_, c)| c).sum()
    }

    /// Flat per-layer rate list in schedule order.
    pub fn rates(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_layers());
        for &(rate, count) in &self.groups {
            out.extend(std::iter::repeat(rate).take(count));
        }
        out
    }
}

/// Parse the `d<rate>x<count>(+...)` notation. The multiplication sign `×`
/// is accepted as an alias for ASCII `x`.
pub fn parse_schedule(text: &str) -> Result<DilationSchedule> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(DsnetError::Parse("empty schedule".into()));
    }
    let mut groups = Vec::new();
    for token in trimmed.split('+') {
        let tok = token.trim();
        let bad = || DsnetError::Parse(format!("malformed schedule token `{tok}`"));
        let rest = tok.strip_prefix('d').ok_or_else(bad)?;
        let (rate_s, count_s) = rest.split_once(['x', '×']).ok_or_else(bad)?;
        let rate: usize = rate_s.parse().map_err(|_| bad())?;
        let count: usize = count_s.parse().map_err(|_| bad())?;
        groups.push((rate, count));
    }
    DilationSchedule::new(groups)
}

impl fmt::Display for DilationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|&(r, c)| format!("d{r}x{c}"))
            .collect();
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for DilationSchedule {
    type Err = DsnetError;
    fn from_str(s: &str) -> Result<Self> {
        parse_schedule(s)
    }
}

impl Serialize for DilationSchedule {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DilationSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        parse_schedule(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Msaf,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextModule {
    Spaspp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dsnet,
    DsnetBase,
    /// Free-form sizing for desk-scale fixtures and ablations.
    Custom,
}

/// Full declarative description of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub variant: Variant,
    /// Width unit C; both branches start at 2C after the stem.
    pub base_channels: usize,
    /// Total stride accumulated before the branches split (power of two).
    pub stem_downsample: usize,
    /// Atrous-rate schedule of the context branch.
    pub schedule: DilationSchedule,
    /// Number of dense 3x3 residual blocks on the spatial branch.
    pub spatial_depth: usize,
    pub fusion_mode: FusionMode,
    /// 1-based context-group indices after which the branches fuse; the last
    /// entry must be the final group (that fusion feeds the head).
    pub fusion_points: Vec<usize>,
    pub context_module: ContextModule,
    pub spaspp_rates: Vec<usize>,
    /// Concatenate a 1x1-projected copy of the SPASPP input alongside the
    /// serial taps (reconstruction toggle).
    #[serde(default = "default_true")]
    pub spaspp_include_input: bool,
    /// Route each fused map to both branches (true) or to the spatial branch
    /// only (false).
    #[serde(default = "default_true")]
    pub bidirectional_fusion: bool,
    pub head_channels: usize,
    pub num_classes: usize,
    /// Pooling grids of the region-attention branch.
    pub grids: Vec<usize>,
    /// Bottleneck ratio of the Gonv compress/expand pair.
    pub gonv_reduction: usize,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// The lightweight segmentation network: C = 32, schedule
    /// d2x6+d3x6+d5x4, MSAF fusion at all three group boundaries, SPASPP.
    pub fn dsnet(num_classes: usize) -> ModelConfig {
        ModelConfig {
            version: CONFIG_VERSION,
            variant: Variant::Dsnet,
            base_channels: 32,
            stem_downsample: 8,
            schedule: parse_schedule("d2x6+d3x6+d5x4").unwrap(),
            spatial_depth: 9,
            fusion_mode: FusionMode::Msaf,
            fusion_points: vec![1, 2, 3],
            context_module: ContextModule::Spaspp,
            spaspp_rates: vec![6, 12, 18, 24],
            spaspp_include_input: true,
            bidirectional_fusion: true,
            head_channels: 128,
            num_classes,
            grids: vec![1, 4, 8, 16],
            gonv_reduction: 4,
        }
    }

    /// Deeper, wider variant: C = 64 with doubled schedule counts.
    pub fn dsnet_base(num_classes: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::DsnetBase,
            base_channels: 64,
            schedule: parse_schedule("d2x12+d3x12+d5x8").unwrap(),
            spatial_depth: 12,
            ..ModelConfig::dsnet(num_classes)
        }
    }

    /// Desk-scale configuration exercising every structural element (three
    /// fused groups, a two-conv trailing block, SPASPP) at trainable size.
    pub fn toy(num_classes: usize) -> ModelConfig {
        ModelConfig {
            version: CONFIG_VERSION,
            variant: Variant::Custom,
            base_channels: 8,
            stem_downsample: 8,
            schedule: parse_schedule("d2x3+d3x3+d5x2").unwrap(),
            spatial_depth: 3,
            fusion_mode: FusionMode::Msaf,
            fusion_points: vec![1, 2, 3],
            context_module: ContextModule::Spaspp,
            spaspp_rates: vec![2, 4, 6],
            spaspp_include_input: true,
            bidirectional_fusion: true,
            head_channels: 32,
            num_classes,
            grids: vec![1, 2, 4],
            gonv_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(DsnetError::Validation(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.base_channels < 1 {
            return Err(DsnetError::Validation("base_channels must be >= 1".into()));
        }
        match self.variant {
            Variant::Dsnet if self.base_channels != 32 => {
                return Err(DsnetError::Validation(
                    "variant dsnet fixes base_channels = 32; use variant custom to resize".into(),
                ));
            }
            Variant::DsnetBase if self.base_channels != 64 => {
                return Err(DsnetError::Validation(
                    "variant dsnet_base fixes base_channels = 64; use variant custom to resize"
                        .into(),
                ));
            }
            _ => {}
        }
        if !self.stem_downsample.is_power_of_two() || self.stem_downsample > 32 {
            return Err(DsnetError::Validation(format!(
                "stem_downsample must be a power of two <= 32, got {}",
                self.stem_downsample
            )));
        }
        self.schedule.validate()?;
        if self.spatial_depth < 1 {
            return Err(DsnetError::Validation("spatial_depth must be >= 1".into()));
        }
        let n_groups = self.schedule.groups.len();
        if self.fusion_points.is_empty() {
            return Err(DsnetError::Validation("fusion_points must not be empty".into()));
        }
        if !self.fusion_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(DsnetError::Validation(format!(
                "fusion_points must be strictly increasing, got {:?}",
                self.fusion_points
            )));
        }
        if self.fusion_points[0] < 1 || *self.fusion_points.last().unwrap() > n_groups {
            return Err(DsnetError::Validation(format!(
                "fusion_points {:?} out of range 1..={n_groups}",
                self.fusion_points
            )));
        }
        if *self.fusion_points.last().unwrap() != n_groups {
            return Err(DsnetError::Validation(format!(
                "the last fusion point must close the context branch (= {n_groups}); \
                 got {:?}",
                self.fusion_points
            )));
        }
        if matches!(self.variant, Variant::Dsnet | Variant::DsnetBase)
            && self.fusion_points.len() != 3
        {
            return Err(DsnetError::Validation(
                "dsnet variants use exactly three lateral fusions".into(),
            ));
        }
        if self.context_module == ContextModule::Spaspp {
            if self.spaspp_rates.is_empty() {
                return Err(DsnetError::Validation("spaspp_rates must not be empty".into()));
            }
            if !self.spaspp_rates.windows(2).all(|w| w[0] < w[1]) {
                return Err(DsnetError::Validation(format!(
                    "spaspp_rates must be strictly increasing, got {:?}",
                    self.spaspp_rates
                )));
            }
        }
        if self.head_channels < 1 || self.num_classes < 1 {
            return Err(DsnetError::Validation(
                "head_channels and num_classes must be >= 1".into(),
            ));
        }
        if self.grids.is_empty() || self.grids[0] < 1 || !self.grids.windows(2).all(|w| w[0] < w[1])
        {
            return Err(DsnetError::Validation(format!(
                "grids must be ascending and >= 1, got {:?}",
                self.grids
            )));
        }
        if self.gonv_reduction < 1 {
            return Err(DsnetError::Validation("gonv_reduction must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| DsnetError::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DsnetError::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        ModelConfig::from_toml(&text)
    }

    /// Apply a partial TOML table of field overrides (the ablation-variant
    /// mechanism). Unknown keys and invalid values fail like any config.
    pub fn with_overrides(&self, overrides: &toml::Table) -> Result<ModelConfig> {
        let mut table: toml::Table = toml::from_str(&self.to_toml())
            .map_err(|e| DsnetError::Parse(format!("config reserialize: {e}")))?;
        for (key, value) in overrides {
            table.insert(key.clone(), value.clone());
        }
        let text = toml::to_string(&table)
            .map_err(|e| DsnetError::Parse(format!("config merge: {e}")))?;
        ModelConfig::from_toml(&text)
    }
}
