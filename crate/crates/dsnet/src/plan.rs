//! Structural plan of a network derived from its [`ModelConfig`].
//!
//! The plan is pure data: which convolutions exist, their shapes, and where
//! they run. The model builder materializes parameters from it, the cost
//! model counts learnable scalars and multiply-accumulates from it, and the
//! linter walks it for dilation findings. Keeping one source of truth means
//! a count can only disagree with the built model if a test catches it.
//!
//! Reconstruction rules for the parts a config does not pin down:
//!
//! - The stem is `log2(stem_downsample)` 3x3 stride-2 ConvBNAct layers,
//!   3 -> C -> ... -> 2C, so both branches start at width 2C.
//! - A schedule group of n layers becomes MFACB blocks of 3 taps, with a
//!   4-layer tail split 2+2 (and 2- or 1-tap blocks for short groups), so
//!   layer multiplicities match the schedule exactly.
//! - Context widths: every group ends at 4C except the last, which ends at
//!   8C; a group's first block carries the transition with tap channels
//!   `[in, out, out]`.
//! - The spatial branch stays at 2C; fusion nodes project 2C up to the
//!   context width, fuse there, and project back for the spatial branch.

use crate::config::{ContextModule, FusionMode, ModelConfig};
use crate::error::Result;
use serde::Serialize;
use std::collections::BTreeMap;

/// Whether the network ends in a segmentation head (with the context module)
/// or a classification head (encoder only, the pretraining layout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Segmentation,
    Classification,
}

/// One MFACB: serial atrous taps, concat, 1x1 compression, residual.
#[derive(Debug, Clone)]
pub struct MfacbShape {
    pub in_channels: usize,
    /// Output channels of each tap; the block's output width is the last.
    pub tap_channels: Vec<usize>,
    pub rates: Vec<usize>,
}

impl MfacbShape {
    pub fn out_channels(&self) -> usize {
        *self.tap_channels.last().unwrap()
    }
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels()
    }
    /// Width of the concatenated taps feeding the compression conv.
    pub fn concat_channels(&self) -> usize {
        self.tap_channels.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct GroupShape {
    pub rate: usize,
    pub blocks: Vec<MfacbShape>,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct SpasppShape {
    /// Input and output width (the residual forces them equal).
    pub channels: usize,
    /// Width of the serial taps and branch projections (channels / 2).
    pub width: usize,
    pub rates: Vec<usize>,
    pub include_global: bool,
    pub include_input: bool,
}

impl SpasppShape {
    /// Number of concatenated groups feeding the compression conv.
    pub fn concat_groups(&self) -> usize {
        self.rates.len() + usize::from(self.include_global) + usize::from(self.include_input)
    }
}

#[derive(Debug, Clone)]
pub struct FusionShape {
    /// Context-branch width at this node; the fusion runs at this width.
    pub width: usize,
    /// True when the fused map is projected back down for the spatial
    /// branch (every node except the final one, which feeds the head).
    pub emits_spatial: bool,
}

#[derive(Debug, Clone)]
pub struct BackboneShape {
    /// (cin, cout, stride) per stem conv.
    pub stem: Vec<(usize, usize, usize)>,
    pub branch_channels: usize,
    pub groups: Vec<GroupShape>,
    pub spatial_channels: usize,
    /// Dense residual blocks per spatial segment (one segment per fusion).
    pub spatial_segments: Vec<usize>,
    pub fusions: Vec<FusionShape>,
    pub spaspp: Option<SpasppShape>,
    pub head_in: usize,
}

/// Split a group's layer count into MFACB tap counts: blocks of three with a
/// 2+2 tail when the remainder is one layer short (4 -> [2, 2]).
pub fn tap_split(count: usize) -> Vec<usize> {
    let mut n = count;
    let mut out = Vec::new();
    while n > 4 {
        out.push(3);
        n -= 3;
    }
    match n {
        4 => out.extend([2, 2]),
        0 => {}
        rest => out.push(rest),
    }
    out
}

impl BackboneShape {
    pub fn from_config(cfg: &ModelConfig, mode: Mode) -> Result<BackboneShape> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let branch = 2 * c;

        let steps = cfg.stem_downsample.trailing_zeros() as usize;
        let stem = match steps {
            0 => vec![(3, branch, 1)],
            1 => vec![(3, branch, 2)],
            n => {
                let mut convs = vec![(3, c, 2)];
                convs.extend(std::iter::repeat((c, c, 2)).take(n - 2));
                convs.push((c, branch, 2));
                convs
            }
        };

        let n_groups = cfg.schedule.groups.len();
        let mut groups = Vec::with_capacity(n_groups);
        let mut in_ch = branch;
        for (gi, &(rate, count)) in cfg.schedule.groups.iter().enumerate() {
            let out_ch = if gi + 1 == n_groups { 8 * c } else { 4 * c };
            let mut blocks = Vec::new();
            let mut block_in = in_ch;
            for (bi, taps) in tap_split(count).into_iter().enumerate() {
                let tap_channels: Vec<usize> = (0..taps)
                    .map(|t| {
                        if bi == 0 && t == 0 && taps > 1 {
                            block_in
                        } else {
                            out_ch
                        }
                    })
                    .collect();
                let shape = MfacbShape {
                    in_channels: block_in,
                    tap_channels,
                    rates: vec![rate; taps],
                };
                block_in = shape.out_channels();
                blocks.push(shape);
            }
            groups.push(GroupShape {
                rate,
                blocks,
                out_channels: out_ch,
            });
            in_ch = out_ch;
        }

        let n_seg = cfg.fusion_points.len();
        let base = cfg.spatial_depth / n_seg;
        let rem = cfg.spatial_depth % n_seg;
        let spatial_segments: Vec<usize> =
            (0..n_seg).map(|i| base + usize::from(i < rem)).collect();

        let fusions: Vec<FusionShape> = cfg
            .fusion_points
            .iter()
            .enumerate()
            .map(|(i, &p)| FusionShape {
                width: groups[p - 1].out_channels,
                emits_spatial: i + 1 != n_seg,
            })
            .collect();

        let spaspp = match (mode, cfg.context_module) {
            (Mode::Segmentation, ContextModule::Spaspp) => Some(SpasppShape {
                channels: 8 * c,
                width: (8 * c / 2).max(1),
                rates: cfg.spaspp_rates.clone(),
                include_global: true,
                include_input: cfg.spaspp_include_input,
            }),
            _ => None,
        };

        Ok(BackboneShape {
            stem,
            branch_channels: branch,
            groups,
            spatial_channels: branch,
            spatial_segments,
            fusions,
            spaspp,
            head_in: 8 * c,
        })
    }
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Where a conv's output lives, for translating counts into MACs.
#[derive(Debug, Clone, Copy)]
pub enum Spatial {
    /// Dense feature map at `1/stride` of the input resolution.
    Dense { out_stride: usize },
    /// Pooled attention grid of at most `grid * grid` cells.
    Grid { grid: usize, feature_stride: usize },
    /// Single global-pool cell.
    Global,
}

#[derive(Debug, Clone)]
pub enum CountNode {
    Conv {
        kernel: usize,
        cin: usize,
        cout: usize,
        bias: bool,
        spatial: Spatial,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl CountNode {
    pub fn params(&self) -> u64 {
        match *self {
            CountNode::Conv {
                kernel,
                cin,
                cout,
                bias,
                ..
            } => (kernel * kernel * cin * cout + if bias { cout } else { 0 }) as u64,
            CountNode::BatchNorm { channels } => 2 * channels as u64,
            CountNode::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
        }
    }

    /// Multiply-accumulates at the given input resolution. Batch norm folds
    /// into the preceding conv at inference, so it contributes none.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match *self {
            CountNode::Conv {
                kernel,
                cin,
                cout,
                spatial,
                ..
            } => {
                let positions = match spatial {
                    Spatial::Dense { out_stride } => {
                        (h.div_ceil(out_stride) * w.div_ceil(out_stride)) as u64
                    }
                    Spatial::Grid {
                        grid,
                        feature_stride,
                    } => {
                        let fh = h.div_ceil(feature_stride).min(grid);
                        let fw = w.div_ceil(feature_stride).min(grid);
                        (fh * fw) as u64
                    }
                    Spatial::Global => 1,
                };
                (kernel * kernel * cin * cout) as u64 * positions
            }
            CountNode::BatchNorm { .. } => 0,
            CountNode::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
        }
    }
}

/// Static parameter and compute accounting for one configured network.
pub struct CostModel {
    nodes: Vec<(String, CountNode)>,
}

/// Learnable-scalar census with a per-module breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub total_params: u64,
    pub per_module: BTreeMap<String, u64>,
}

impl CostModel {
    pub fn new(cfg: &ModelConfig, mode: Mode) -> Result<CostModel> {
        let shape = BackboneShape::from_config(cfg, mode)?;
        let mut nodes: Vec<(String, CountNode)> = Vec::new();
        let stride = cfg.stem_downsample;

        fn conv_bn(
            nodes: &mut Vec<(String, CountNode)>,
            module: &str,
            kernel: usize,
            cin: usize,
            cout: usize,
            spatial: Spatial,
        ) {
            nodes.push((
                module.to_string(),
                CountNode::Conv {
                    kernel,
                    cin,
                    cout,
                    bias: false,
                    spatial,
                },
            ));
            nodes.push((module.to_string(), CountNode::BatchNorm { channels: cout }));
        }

        let mut out_stride = 1;
        for &(cin, cout, s) in &shape.stem {
            out_stride *= s;
            conv_bn(&mut nodes, "stem", 3, cin, cout, Spatial::Dense { out_stride });
        }
        let dense = Spatial::Dense { out_stride: stride };

        for (gi, group) in shape.groups.iter().enumerate() {
            let module = format!("context.g{}", gi + 1);
            for block in &group.blocks {
                let mut cin = block.in_channels;
                for &cout in &block.tap_channels {
                    conv_bn(&mut nodes, &module, 3, cin, cout, dense);
                    cin = cout;
                }
                conv_bn(
                    &mut nodes,
                    &module,
                    1,
                    block.concat_channels(),
                    block.out_channels(),
                    dense,
                );
                if block.needs_projection() {
                    conv_bn(
                        &mut nodes,
                        &module,
                        1,
                        block.in_channels,
                        block.out_channels(),
                        dense,
                    );
                }
            }
        }

        for (si, &blocks) in shape.spatial_segments.iter().enumerate() {
            let module = format!("spatial.s{}", si + 1);
            let ch = shape.spatial_channels;
            for _ in 0..blocks {
                conv_bn(&mut nodes, &module, 3, ch, ch, dense);
                conv_bn(&mut nodes, &module, 3, ch, ch, dense);
            }
        }

        for (fi, fusion) in shape.fusions.iter().enumerate() {
            let module = format!("fusion.f{}", fi + 1);
            let w = fusion.width;
            conv_bn(&mut nodes, &module, 1, shape.spatial_channels, w, dense);
            if cfg.fusion_mode == FusionMode::Msaf {
                let mid = (w / cfg.gonv_reduction).max(1);
                let gonv = |nodes: &mut Vec<(String, CountNode)>, spatial: Spatial| {
                    for (ci, co) in [(w, mid), (mid, w)] {
                        nodes.push((
                            module.clone(),
                            CountNode::Conv {
                                kernel: 1,
                                cin: ci,
                                cout: co,
                                bias: true,
                                spatial,
                            },
                        ));
                    }
                };
                gonv(&mut nodes, dense); // pixel attention
                for &g in &cfg.grids {
                    gonv(
                        &mut nodes,
                        Spatial::Grid {
                            grid: g,
                            feature_stride: stride,
                        },
                    );
                }
            }
            if fusion.emits_spatial {
                conv_bn(&mut nodes, &module, 1, w, shape.spatial_channels, dense);
            }
        }

        if let Some(sp) = &shape.spaspp {
            let module = "spaspp";
            let mut cin = sp.channels;
            for _ in &sp.rates {
                conv_bn(&mut nodes, module, 3, cin, sp.width, dense);
                cin = sp.width;
            }
            if sp.include_input {
                conv_bn(&mut nodes, module, 1, sp.channels, sp.width, dense);
            }
            if sp.include_global {
                conv_bn(&mut nodes, module, 1, sp.channels, sp.width, Spatial::Global);
            }
            conv_bn(
                &mut nodes,
                module,
                1,
                sp.concat_groups() * sp.width,
                sp.channels,
                dense,
            );
        }

        match mode {
            Mode::Segmentation => {
                conv_bn(&mut nodes, "head", 3, shape.head_in, cfg.head_channels, dense);
                nodes.push((
                    "head".to_string(),
                    CountNode::Conv {
                        kernel: 1,
                        cin: cfg.head_channels,
                        cout: cfg.num_classes,
                        bias: true,
                        spatial: dense,
                    },
                ));
            }
            Mode::Classification => {
                nodes.push((
                    "head".to_string(),
                    CountNode::Linear {
                        in_features: shape.head_in,
                        out_features: cfg.num_classes,
                    },
                ));
            }
        }

        Ok(CostModel { nodes })
    }

    pub fn param_report(&self) -> ParamReport {
        let mut per_module: BTreeMap<String, u64> = BTreeMap::new();
        for (module, node) in &self.nodes {
            *per_module.entry(module.clone()).or_insert(0) += node.params();
        }
        ParamReport {
            total_params: per_module.values().sum(),
            per_module,
        }
    }

    /// Multiply-accumulate count over conv/linear nodes at `h x w` input.
    pub fn macs_at(&self, h: usize, w: usize) -> u64 {
        self.nodes.iter().map(|(_, n)| n.macs(h, w)).sum()
    }

    /// FLOPs counted as two per multiply-accumulate.
    pub fn flops_at(&self, h: usize, w: usize) -> u64 {
        2 * self.macs_at(h, w)
    }
}

/// Count every learnable scalar of the configured segmentation network.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    Ok(CostModel::new(cfg, Mode::Segmentation)?.param_report())
}

/// MACs for one conv layer at the given output feature size.
pub fn conv_macs(kernel: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> u64 {
    (kernel * kernel * cin * cout * out_h * out_w) as u64
}
