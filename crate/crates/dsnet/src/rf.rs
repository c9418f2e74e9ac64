//! Receptive-field analysis and the atrous-convolution linter.
//!
//! Three layers of machinery, each checking the one above it:
//!
//! - [`receptive_field`]: exact integer RF bookkeeping along a conv chain,
//!   `rf_i = rf_{i-1} + (k_i - 1) * d_i * prod(s_j, j < i)`.
//! - [`empirical_rf`]: an impulse-response oracle that builds the chain with
//!   constant positive weights and measures the nonzero-gradient support of
//!   one output pixel on the input.
//! - [`padding_fraction`] and [`lint`]: the padding-dominance metric behind
//!   the dilation guidelines, with thresholds calibrated so small rates at
//!   pretraining resolution pass and oversized ones are flagged.

use crate::config::{ConvLayerSpec, FusionMode, ModelConfig, PaddingMode};
use crate::error::{DsnetError, Result};
use crate::plan::{BackboneShape, Mode};
use crate::tensor::{Padding, Tensor};
use ndarray::{Array4, ArrayD, Ix4, IxDyn};
use serde::Serialize;

// ---------------------------------------------------------------------------
// Analytic receptive field
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RfEntry {
    pub index: usize,
    /// Receptive field in input pixels after this layer.
    pub rf: usize,
    /// Stride accumulated up to and including this layer.
    pub cumulative_stride: usize,
    /// Effective kernel extent (k-1)*d + 1 of this layer.
    pub extent: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RfProfile {
    pub per_layer: Vec<RfEntry>,
}

impl RfProfile {
    pub fn final_rf(&self) -> usize {
        self.per_layer.last().map(|e| e.rf).unwrap_or(1)
    }

    pub fn rfs(&self) -> Vec<usize> {
        self.per_layer.iter().map(|e| e.rf).collect()
    }
}

/// Exact per-layer receptive fields of a serial conv chain.
pub fn receptive_field(chain: &[ConvLayerSpec]) -> RfProfile {
    receptive_field_from(chain, 1, 1)
}

/// Same bookkeeping but continuing from an existing `rf` and stride, for
/// chains appended to a known prefix (e.g. blocks after the stem).
pub fn receptive_field_from(chain: &[ConvLayerSpec], rf0: usize, stride0: usize) -> RfProfile {
    assert!(!chain.is_empty(), "receptive_field on empty chain");
    let mut rf = rf0;
    let mut stride = stride0;
    let mut per_layer = Vec::with_capacity(chain.len());
    for (index, spec) in chain.iter().enumerate() {
        rf += (spec.kernel - 1) * spec.dilation * stride;
        stride *= spec.stride;
        per_layer.push(RfEntry {
            index,
            rf,
            cumulative_stride: stride,
            extent: spec.extent(),
        });
    }
    RfProfile { per_layer }
}

// ---------------------------------------------------------------------------
// Impulse-response oracle
// ---------------------------------------------------------------------------

/// Measure the receptive field by construction: run the chain with constant
/// positive weights (no normalization), backpropagate from the centre output
/// pixel, and return the width of the nonzero-gradient support on the input.
/// Agrees with [`receptive_field`] whenever `probe_size` comfortably exceeds
/// the theoretical RF (no boundary clipping).
pub fn empirical_rf(chain: &[ConvLayerSpec], probe_size: usize) -> Result<usize> {
    if chain.is_empty() {
        return Err(DsnetError::Validation("empirical_rf on empty chain".into()));
    }
    for (i, spec) in chain.iter().enumerate() {
        spec.validate()?;
        if i > 0 && chain[i - 1].out_channels != spec.in_channels {
            return Err(DsnetError::Shape(format!(
                "chain channel mismatch between layer {} and {}",
                i - 1,
                i
            )));
        }
    }
    let cin = chain[0].in_channels;
    let input = Tensor::param(ArrayD::ones(IxDyn(&[1, cin, probe_size, probe_size])));
    let mut cur = input.clone();
    for spec in chain {
        // Constant positive weights, normalized so activations stay O(1).
        let fan = (spec.kernel * spec.kernel * spec.in_channels) as f64;
        let w = Tensor::constant(ArrayD::from_elem(
            IxDyn(&[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel]),
            1.0 / fan,
        ));
        let padding = match spec.padding_mode {
            PaddingMode::Same => Padding::Same,
            PaddingMode::Valid => Padding::Valid,
        };
        cur = cur.conv2d(&w, None, spec.stride, spec.dilation, padding);
    }
    let (_, _, oh, ow) = cur.dims4();
    cur.pixel_sum(oh / 2, ow / 2).backward();
    let grad = input.grad().expect("probe input gradient");
    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for ch in 0..cin {
        for r in 0..probe_size {
            for c in 0..probe_size {
                if g4[(0, ch, r, c)] != 0.0 {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
        }
    }
    if rmin == usize::MAX {
        return Err(DsnetError::Runtime("impulse probe produced no gradient".into()));
    }
    Ok((rmax - rmin + 1).max(cmax - cmin + 1))
}

// ---------------------------------------------------------------------------
// Padding fraction
// ---------------------------------------------------------------------------

/// Average fraction of kernel taps that land outside the unpadded feature
/// map, over all same-padded output positions of a square `feature_hw` map.
/// Inside-counts factor per axis, so the 2-d average is the product of 1-d
/// averages; the brute-force 2-d enumeration in the tests pins this.
pub fn padding_fraction(spec: &ConvLayerSpec, feature_hw: usize) -> Result<f64> {
    spec.validate()?;
    if feature_hw < 1 {
        return Err(DsnetError::Validation("feature size must be >= 1".into()));
    }
    if spec.padding_mode != PaddingMode::Same {
        return Err(DsnetError::Validation(
            "padding_fraction is defined for same padding".into(),
        ));
    }
    let k = spec.kernel;
    let avg_inside = axis_mean_inside(k, spec.dilation, spec.stride, feature_hw);
    Ok(1.0 - (avg_inside * avg_inside) / (k * k) as f64)
}

/// Mean over output positions of how many of the k taps fall inside [0, n).
fn axis_mean_inside(k: usize, dilation: usize, stride: usize, n: usize) -> f64 {
    let pad = ((k - 1) * dilation / 2) as isize;
    let out = n.div_ceil(stride);
    let mut total = 0usize;
    for o in 0..out {
        for t in 0..k {
            let pos = (o * stride + t * dilation) as isize - pad;
            if pos >= 0 && pos < n as isize {
                total += 1;
            }
        }
    }
    total as f64 / out as f64
}

// ---------------------------------------------------------------------------
// Lint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Disaster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Guideline {
    /// "Do not only use atrous convolutions": a dense branch must exist.
    AtrousOnly,
    /// Padding-dominated or oversized dilated kernels at pretrain size.
    AtrousDisaster,
    /// Plain additive fusion where attention fusion is available.
    Fusion,
}

#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub guideline: Guideline,
    pub location: String,
    pub message: String,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LintReport {
    pub pretrain_input: usize,
    pub findings: Vec<Finding>,
}

impl LintReport {
    pub fn has_disaster(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Disaster)
    }

    pub fn worst(&self) -> Option<Severity> {
        self.findings.iter().map(|f| f.severity).max()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "lint @ pretrain input {}x{}: {} finding(s)\n",
            self.pretrain_input,
            self.pretrain_input,
            self.findings.len()
        ));
        for f in &self.findings {
            let metric = f.metric.map(|m| format!(" [{m:.4}]")).unwrap_or_default();
            out.push_str(&format!(
                "  {:<8} {:<16} {:<24} {}{}\n",
                format!("{:?}", f.severity).to_lowercase(),
                format!("{:?}", f.guideline),
                f.location,
                f.message,
                metric
            ));
        }
        if self.findings.is_empty() {
            out.push_str("  clean: no findings\n");
        }
        out
    }
}

/// Padding-fraction cutoffs; chosen so rate 5 at 224/8 passes (0.224) while
/// rates 12 (0.490) and 15 (0.587) land beyond the disaster line.
#[derive(Debug, Clone, Copy)]
pub struct LintThresholds {
    pub warn: f64,
    pub disaster: f64,
}

impl Default for LintThresholds {
    fn default() -> Self {
        LintThresholds {
            warn: 0.25,
            disaster: 0.40,
        }
    }
}

/// One atrous layer as seen by the linter: its geometry and the square
/// feature size it runs on at pretraining resolution.
#[derive(Debug, Clone)]
pub struct LintLayer {
    pub location: String,
    pub spec: ConvLayerSpec,
    pub feature_hw: usize,
}

/// Guideline checks over a layer summary; the config path builds the
/// summary, tests may feed synthetic ones (e.g. a branch-free encoder).
pub fn lint_layers(
    layers: &[LintLayer],
    has_dense_branch: bool,
    fusion_mode: FusionMode,
    pretrain_input: usize,
    thresholds: LintThresholds,
) -> Result<LintReport> {
    let mut findings = Vec::new();
    if !has_dense_branch {
        findings.push(Finding {
            severity: Severity::Warn,
            guideline: Guideline::AtrousOnly,
            location: "model".into(),
            message: "no dense-convolution spatial branch; pair atrous layers with dense ones"
                .into(),
            metric: None,
        });
    }
    for layer in layers {
        if layer.spec.dilation <= 1 {
            continue;
        }
        let fraction = padding_fraction(&layer.spec, layer.feature_hw)?;
        let extent = layer.spec.extent();
        let oversized = extent > layer.feature_hw;
        let severity = if oversized || fraction > thresholds.disaster {
            Some(Severity::Disaster)
        } else if fraction > thresholds.warn {
            Some(Severity::Warn)
        } else {
            None
        };
        if let Some(severity) = severity {
            let message = if oversized {
                format!(
                    "kernel extent {extent} exceeds the {0}x{0} feature map; padded taps dominate",
                    layer.feature_hw
                )
            } else {
                format!(
                    "{:.1}% of kernel taps fall in padding on the {}x{} feature map",
                    fraction * 100.0,
                    layer.feature_hw,
                    layer.feature_hw
                )
            };
            findings.push(Finding {
                severity,
                guideline: Guideline::AtrousDisaster,
                location: layer.location.clone(),
                message,
                metric: Some(fraction),
            });
        }
    }
    if fusion_mode == FusionMode::Add {
        findings.push(Finding {
            severity: Severity::Info,
            guideline: Guideline::Fusion,
            location: "fusion".into(),
            message: "element-wise addition fuses the branches; attention fusion (msaf) \
                      weighs them adaptively"
                .into(),
            metric: None,
        });
    }
    Ok(LintReport {
        pretrain_input,
        findings,
    })
}

/// The atrous layers the encoder exposes to ImageNet-style pretraining:
/// context-branch taps at the post-stem stride. The context module is
/// excluded because the classification layout drops it.
pub fn pretrain_lint_layers(cfg: &ModelConfig, pretrain_input: usize) -> Result<Vec<LintLayer>> {
    let shape = BackboneShape::from_config(cfg, Mode::Classification)?;
    let feature = pretrain_input.div_ceil(cfg.stem_downsample).max(1);
    let mut layers = Vec::new();
    for (gi, group) in shape.groups.iter().enumerate() {
        for (bi, block) in group.blocks.iter().enumerate() {
            let mut cin = block.in_channels;
            for (ti, (&cout, &rate)) in
                block.tap_channels.iter().zip(&block.rates).enumerate()
            {
                layers.push(LintLayer {
                    location: format!("context.g{}.b{}.tap{}", gi + 1, bi, ti),
                    spec: ConvLayerSpec::new(3, rate, cin, cout),
                    feature_hw: feature,
                });
                cin = cout;
            }
        }
    }
    Ok(layers)
}

/// Run the three guideline checks against a model configuration at the
/// given pretraining input size (224 unless stated otherwise).
pub fn lint(cfg: &ModelConfig, pretrain_input: usize) -> Result<LintReport> {
    lint_with_thresholds(cfg, pretrain_input, LintThresholds::default())
}

pub fn lint_with_thresholds(
    cfg: &ModelConfig,
    pretrain_input: usize,
    thresholds: LintThresholds,
) -> Result<LintReport> {
    let layers = pretrain_lint_layers(cfg, pretrain_input)?;
    // spatial_depth >= 1 is a config invariant, so a configured model always
    // carries its dense branch.
    lint_layers(&layers, true, cfg.fusion_mode, pretrain_input, thresholds)
}

// ---------------------------------------------------------------------------
// Analyzer report (context-branch RF ledger + cost counts)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeRow {
    pub layer: String,
    pub rate: usize,
    pub extent: usize,
    /// RF relative to the branch entry (stride-1 bookkeeping on the shared
    /// feature resolution), the ledger the blocks are designed around.
    pub rf_branch: usize,
    /// RF at input resolution, stem included.
    pub rf_input: usize,
    pub padding_fraction_at_224: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub rows: Vec<AnalyzeRow>,
    pub total_params: u64,
    pub per_module_params: std::collections::BTreeMap<String, u64>,
    pub input_size: (usize, usize),
    pub macs: u64,
    pub flops: u64,
}

pub fn analyze(cfg: &ModelConfig, input_h: usize, input_w: usize) -> Result<AnalyzeReport> {
    use crate::plan::{count_params, CostModel};
    let shape = BackboneShape::from_config(cfg, Mode::Segmentation)?;

    let stem_specs: Vec<ConvLayerSpec> = shape
        .stem
        .iter()
        .map(|&(cin, cout, s)| ConvLayerSpec::new(3, 1, cin, cout).with_stride(s))
        .collect();
    let stem_profile = receptive_field(&stem_specs);
    let (stem_rf, stem_stride) = (
        stem_profile.final_rf(),
        stem_profile.per_layer.last().map(|e| e.cumulative_stride).unwrap_or(1),
    );

    let feature224 = 224usize.div_ceil(cfg.stem_downsample).max(1);
    let mut rows = Vec::new();
    let mut rf_branch = 1usize;
    let mut rf_input = stem_rf;
    for (gi, group) in shape.groups.iter().enumerate() {
        for (bi, block) in group.blocks.iter().enumerate() {
            let mut cin = block.in_channels;
            for (ti, (&cout, &rate)) in block.tap_channels.iter().zip(&block.rates).enumerate() {
                let spec = ConvLayerSpec::new(3, rate, cin, cout);
                rf_branch += (spec.kernel - 1) * spec.dilation;
                rf_input += (spec.kernel - 1) * spec.dilation * stem_stride;
                rows.push(AnalyzeRow {
                    layer: format!("context.g{}.b{}.tap{}", gi + 1, bi, ti),
                    rate,
                    extent: spec.extent(),
                    rf_branch,
                    rf_input,
                    padding_fraction_at_224: padding_fraction(&spec, feature224)?,
                });
                cin = cout;
            }
        }
    }
    if let Some(sp) = &shape.spaspp {
        let mut cin = sp.channels;
        for (i, &rate) in sp.rates.iter().enumerate() {
            let spec = ConvLayerSpec::new(3, rate, cin, sp.width);
            rf_branch += (spec.kernel - 1) * spec.dilation;
            rf_input += (spec.kernel - 1) * spec.dilation * stem_stride;
            rows.push(AnalyzeRow {
                layer: format!("spaspp.tap{i}"),
                rate,
                extent: spec.extent(),
                rf_branch,
                rf_input,
                padding_fraction_at_224: padding_fraction(&spec, feature224)?,
            });
            cin = sp.width;
        }
    }

    let report = count_params(cfg)?;
    let cost = CostModel::new(cfg, Mode::Segmentation)?;
    Ok(AnalyzeReport {
        rows,
        total_params: report.total_params,
        per_module_params: report.per_module,
        input_size: (input_h, input_w),
        macs: cost.macs_at(input_h, input_w),
        flops: cost.flops_at(input_h, input_w),
    })
}

impl AnalyzeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>4} {:>6} {:>9} {:>8} {:>10}\n",
            "layer", "rate", "extent", "rf@branch", "rf@input", "pad@224"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>4} {:>6} {:>9} {:>8} {:>10.4}\n",
                r.layer, r.rate, r.extent, r.rf_branch, r.rf_input, r.padding_fraction_at_224
            ));
        }
        out.push_str(&format!("\ntotal params      {}\n", self.total_params));
        for (m, p) in &self.per_module_params {
            out.push_str(&format!("  {m:<16} {p}\n"));
        }
        out.push_str(&format!(
            "macs @ {}x{}   {}\nflops (2*macs)    {}\n",
            self.input_size.0, self.input_size.1, self.macs, self.flops
        ));
        out
    }
}

/// Brute-force 2-d tap enumeration; the independent oracle the analytic
/// padding fraction is checked against.
pub fn padding_fraction_bruteforce(spec: &ConvLayerSpec, feature_hw: usize) -> f64 {
    let k = spec.kernel;
    let d = spec.dilation;
    let s = spec.stride;
    let n = feature_hw as isize;
    let pad = ((k - 1) * d / 2) as isize;
    let out = feature_hw.div_ceil(s);
    let mut outside = 0usize;
    let mut total = 0usize;
    for oh in 0..out {
        for ow in 0..out {
            for kh in 0..k {
                for kw in 0..k {
                    let ih = (oh * s + kh * d) as isize - pad;
                    let iw = (ow * s + kw * d) as isize - pad;
                    total += 1;
                    if ih < 0 || ih >= n || iw < 0 || iw >= n {
                        outside += 1;
                    }
                }
            }
        }
    }
    outside as f64 / total as f64
}

/// Build a conv chain as a plain tensor graph (constant weights as given),
/// used by tests probing padded forward behaviour.
pub fn chain_response(chain: &[ConvLayerSpec], input: &Array4<f64>) -> Result<ArrayD<f64>> {
    let mut cur = Tensor::constant(input.clone().into_dyn());
    for spec in chain {
        spec.validate()?;
        let fan = (spec.kernel * spec.kernel * spec.in_channels) as f64;
        let w = Tensor::constant(ArrayD::from_elem(
            IxDyn(&[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel]),
            1.0 / fan,
        ));
        cur = cur.conv2d(
            &w,
            None,
            spec.stride,
            spec.dilation,
            match spec.padding_mode {
                PaddingMode::Same => Padding::Same,
                PaddingMode::Valid => Padding::Valid,
            },
        );
    }
    Ok(cur.to_array())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_schedule;
    use proptest::prelude::*;

    fn spec(k: usize, d: usize) -> ConvLayerSpec {
        ConvLayerSpec::new(k, d, 1, 1)
    }

    #[test]
    fn mfacb_rate2_ledger() {
        let chain = vec![spec(3, 2), spec(3, 2), spec(3, 2)];
        assert_eq!(receptive_field(&chain).rfs(), vec![5, 9, 13]);
    }

    #[test]
    fn continuation_ledgers() {
        let cont = vec![spec(3, 3), spec(3, 3), spec(3, 3)];
        assert_eq!(receptive_field_from(&cont, 5, 1).rfs(), vec![11, 17, 23]);
        assert_eq!(receptive_field_from(&cont, 13, 1).rfs(), vec![19, 25, 31]);
    }

    #[test]
    fn pointwise_conv_keeps_rf_one() {
        assert_eq!(receptive_field(&[spec(1, 1)]).final_rf(), 1);
    }

    #[test]
    fn stride_chain_rf() {
        // 7x7 s2 then 3x3 d1 s1 -> 7 + 2*2 = 11
        let chain = vec![spec(7, 1).with_stride(2), spec(3, 1)];
        assert_eq!(receptive_field(&chain).final_rf(), 11);
        assert_eq!(empirical_rf(&chain, 41).unwrap(), 11);
    }

    #[test]
    fn empirical_matches_analytic_on_mfacb_taps() {
        let chain = vec![
            ConvLayerSpec::new(3, 2, 1, 2),
            ConvLayerSpec::new(3, 2, 2, 2),
            ConvLayerSpec::new(3, 2, 2, 1),
        ];
        for taps in 1..=3 {
            let sub = &chain[..taps];
            let rf = receptive_field(sub).final_rf();
            assert_eq!(empirical_rf(sub, 40).unwrap(), rf);
            assert_eq!(rf, [5, 9, 13][taps - 1]);
        }
    }

    #[test]
    fn empirical_rf_of_pointwise_is_one() {
        assert_eq!(empirical_rf(&[ConvLayerSpec::new(1, 3, 2, 2)], 9).unwrap(), 1);
    }

    #[test]
    fn padding_fraction_reference_values() {
        // 3x3 at the 28x28 feature size of 224/8.
        for (d, expect) in [(12, 0.4898), (5, 0.2239), (15, 0.5867)] {
            let got = padding_fraction(&spec(3, d), 28).unwrap();
            assert!((got - expect).abs() < 5e-5, "d={d}: {got} vs {expect}");
            let brute = padding_fraction_bruteforce(&spec(3, d), 28);
            assert!((got - brute).abs() < 1e-12, "analytic vs brute d={d}");
        }
        // extent overflow: (3-1)*15 + 1 = 31 > 28
        assert!(spec(3, 15).extent() > 28);
        assert_eq!(padding_fraction(&spec(1, 7), 28).unwrap(), 0.0);
    }

    #[test]
    fn padding_fraction_rejects_empty_feature() {
        assert!(padding_fraction(&spec(3, 2), 0).is_err());
    }

    #[test]
    fn lint_default_config_is_clean() {
        let report = lint(&ModelConfig::dsnet(19), 224).unwrap();
        assert!(
            !report.findings.iter().any(|f| f.severity >= Severity::Warn),
            "{}",
            report.render_text()
        );
    }

    #[test]
    fn lint_flags_rate15_schedule_as_disaster() {
        let mut cfg = ModelConfig::dsnet(19);
        cfg.schedule = parse_schedule("d2x3+d3x3+d15x10").unwrap();
        let report = lint(&cfg, 224).unwrap();
        let disasters: Vec<_> = report
            .findings
            .iter()
            .filter(|f| f.severity == Severity::Disaster)
            .collect();
        assert_eq!(disasters.len(), 10, "{}", report.render_text());
        assert!(report.has_disaster());
    }

    #[test]
    fn lint_rate12_is_disaster_by_fraction_alone() {
        // extent 25 <= 28, so only the padding fraction (0.49) can flag it.
        let mut cfg = ModelConfig::dsnet(19);
        cfg.schedule = parse_schedule("d2x3+d3x3+d12x10").unwrap();
        let report = lint(&cfg, 224).unwrap();
        assert!(report.has_disaster());
        for f in report.findings.iter().filter(|f| f.severity == Severity::Disaster) {
            assert!(f.metric.unwrap() > 0.40);
        }
    }

    #[test]
    fn lint_relaxes_at_larger_pretrain_input() {
        let mut cfg = ModelConfig::dsnet(19);
        cfg.schedule = parse_schedule("d2x3+d3x3+d12x10").unwrap();
        assert!(lint(&cfg, 224).unwrap().has_disaster());
        let relaxed = lint(&cfg, 512).unwrap();
        assert!(!relaxed.has_disaster(), "{}", relaxed.render_text());
    }

    #[test]
    fn lint_add_fusion_is_an_info_finding() {
        let mut cfg = ModelConfig::dsnet(19);
        cfg.fusion_mode = FusionMode::Add;
        let report = lint(&cfg, 224).unwrap();
        assert!(report
            .findings
            .iter()
            .any(|f| f.guideline == Guideline::Fusion && f.severity == Severity::Info));
        assert!(!report.has_disaster());
    }

    #[test]
    fn lint_atrous_only_fires_without_dense_branch() {
        let layers = pretrain_lint_layers(&ModelConfig::dsnet(19), 224).unwrap();
        let report =
            lint_layers(&layers, false, FusionMode::Msaf, 224, LintThresholds::default()).unwrap();
        assert!(report
            .findings
            .iter()
            .any(|f| f.guideline == Guideline::AtrousOnly));
    }

    #[test]
    fn severity_is_monotone_in_dilation() {
        // fraction(d) non-decreasing mirrors the pretraining rank 5 > 12 > 15.
        let f5 = padding_fraction(&spec(3, 5), 28).unwrap();
        let f12 = padding_fraction(&spec(3, 12), 28).unwrap();
        let f15 = padding_fraction(&spec(3, 15), 28).unwrap();
        assert!(f5 < f12 && f12 < f15);
    }

    #[test]
    fn analyze_rows_match_tap_ledger() {
        let report = analyze(&ModelConfig::dsnet(19), 2048, 1024).unwrap();
        let branch: Vec<usize> = report.rows.iter().map(|r| r.rf_branch).collect();
        assert_eq!(&branch[..6], &[5, 9, 13, 17, 21, 25]);
        // SPASPP taps appear after the schedule's 16 layers.
        assert_eq!(report.rows.len(), 16 + 4);
        assert!(report.rows.windows(2).all(|w| w[0].rf_branch <= w[1].rf_branch));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn analytic_equals_empirical_for_random_chains(
            layers in proptest::collection::vec(
                (prop_oneof![Just(1usize), Just(3), Just(5), Just(7)], 1usize..=6, 1usize..=2),
                1..4
            )
        ) {
            let chain: Vec<ConvLayerSpec> = layers
                .iter()
                .map(|&(k, d, s)| ConvLayerSpec::new(k, d, 1, 1).with_stride(s))
                .collect();
            let rf = receptive_field(&chain).final_rf();
            prop_assume!(rf < 64);
            let probe = 2 * rf + 17;
            prop_assert_eq!(empirical_rf(&chain, probe).unwrap(), rf);
        }

        #[test]
        fn padding_fraction_monotone_and_vanishing(
            d1 in 1usize..10,
            delta in 1usize..10,
            n in 8usize..64,
        ) {
            let lo = padding_fraction(&spec(3, d1), n).unwrap();
            let hi = padding_fraction(&spec(3, d1 + delta), n).unwrap();
            prop_assert!(hi >= lo - 1e-12);
            // grows toward zero as the feature map grows
            let big = padding_fraction(&spec(3, d1), n * 16).unwrap();
            prop_assert!(big <= lo + 1e-12);
        }
    }
}
