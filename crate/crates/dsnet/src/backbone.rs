//! Assembly of the dual-branch network: a shared stem, the atrous context
//! branch and dense spatial branch at one resolution, lateral fusions at the
//! configured group boundaries, the context module, and a head.
//!
//! The layout comes from [`BackboneShape`], the same plan the static cost
//! model counts, so built parameters and counted parameters cannot drift
//! apart unnoticed.

use crate::blocks::{
    add_fuse, ClsHead, ConvBnAct, Mfacb, MfacbConfig, Msaf, MsaConfig, Phase, ResidualBlock,
    SegHead, Spaspp, SpasppConfig,
};
use crate::config::{FusionMode, ModelConfig};
use crate::error::{DsnetError, Result};
use crate::plan::{BackboneShape, CostModel, Mode};
use crate::tensor::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

enum FusionOp {
    Msaf(Msaf),
    Add,
}

/// One lateral connection: the spatial branch is projected up to the context
/// width, fused there, and (except at the final node) projected back down to
/// continue the spatial branch.
struct LateralFusion {
    spatial_proj: ConvBnAct,
    op: FusionOp,
    spatial_out: Option<ConvBnAct>,
}

pub struct DSNetModel {
    cfg: ModelConfig,
    mode: Mode,
    shape: BackboneShape,
    stem: Vec<ConvBnAct>,
    context: Vec<Vec<Mfacb>>,
    spatial: Vec<Vec<ResidualBlock>>,
    fusions: Vec<LateralFusion>,
    spaspp: Option<Spaspp>,
    seg_head: Option<SegHead>,
    cls_head: Option<ClsHead>,
}

impl DSNetModel {
    /// Materialize the configured architecture with seeded parameter init.
    /// Construction order is fixed, so a seed pins every initial weight.
    pub fn build(cfg: &ModelConfig, mode: Mode, seed: u64) -> Result<DSNetModel> {
        let shape = BackboneShape::from_config(cfg, mode)?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);

        let mut stem = Vec::new();
        for &(cin, cout, stride) in &shape.stem {
            stem.push(ConvBnAct::new(rng, 3, cin, cout, stride, 1, true));
        }

        let mut context = Vec::new();
        for group in &shape.groups {
            let mut blocks = Vec::new();
            for b in &group.blocks {
                blocks.push(Mfacb::new(
                    rng,
                    MfacbConfig::new(b.in_channels, b.tap_channels.clone(), b.rates.clone())?,
                )?);
            }
            context.push(blocks);
        }

        let mut spatial = Vec::new();
        for &count in &shape.spatial_segments {
            let mut blocks = Vec::new();
            for _ in 0..count {
                blocks.push(ResidualBlock::new(rng, shape.spatial_channels));
            }
            spatial.push(blocks);
        }

        let mut fusions = Vec::new();
        for f in &shape.fusions {
            let spatial_proj =
                ConvBnAct::new(rng, 1, shape.spatial_channels, f.width, 1, 1, false);
            let op = match cfg.fusion_mode {
                FusionMode::Msaf => FusionOp::Msaf(Msaf::new(
                    rng,
                    MsaConfig {
                        channels: f.width,
                        grids: cfg.grids.clone(),
                        reduction: cfg.gonv_reduction,
                    },
                )?),
                FusionMode::Add => FusionOp::Add,
            };
            let spatial_out = f
                .emits_spatial
                .then(|| ConvBnAct::new(rng, 1, f.width, shape.spatial_channels, 1, 1, false));
            fusions.push(LateralFusion {
                spatial_proj,
                op,
                spatial_out,
            });
        }

        let spaspp = match &shape.spaspp {
            Some(sp) => Some(Spaspp::new(
                rng,
                SpasppConfig {
                    channels: sp.channels,
                    width: sp.width,
                    rates: sp.rates.clone(),
                    include_global: sp.include_global,
                    include_input: sp.include_input,
                },
            )?),
            None => None,
        };

        let (seg_head, cls_head) = match mode {
            Mode::Segmentation => (
                Some(SegHead::new(
                    rng,
                    shape.head_in,
                    cfg.head_channels,
                    cfg.num_classes,
                    cfg.stem_downsample,
                )),
                None,
            ),
            Mode::Classification => {
                (None, Some(ClsHead::new(rng, shape.head_in, cfg.num_classes)))
            }
        };

        Ok(DSNetModel {
            cfg: cfg.clone(),
            mode,
            shape,
            stem,
            context,
            spatial,
            fusions,
            spaspp,
            seg_head,
            cls_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Segmentation logits (N, classes, H, W) or class logits (N, classes).
    pub fn forward(&self, image: &Tensor, phase: Phase) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4();
        if c != 3 {
            return Err(DsnetError::Shape(format!("expected 3 input channels, got {c}")));
        }
        let ds = self.cfg.stem_downsample;
        if h % ds != 0 || w % ds != 0 {
            return Err(DsnetError::Shape(format!(
                "input {h}x{w} must be divisible by the stem downsample factor {ds}"
            )));
        }

        let mut x = image.clone();
        for conv in &self.stem {
            x = conv.forward(&x, phase)?;
        }

        let mut context = x.clone();
        let mut spatial = x;
        let mut prev_group = 0usize;
        let mut fused = None;
        for (k, &point) in self.cfg.fusion_points.iter().enumerate() {
            for group in &self.context[prev_group..point] {
                for block in group {
                    context = block.forward(&context, phase)?;
                }
            }
            for block in &self.spatial[k] {
                spatial = block.forward(&spatial, phase)?;
            }
            let last = k + 1 == self.cfg.fusion_points.len();
            if last {
                if let Some(sp) = &self.spaspp {
                    context = sp.forward(&context, phase)?;
                }
            }
            let node = &self.fusions[k];
            let spatial_up = node.spatial_proj.forward(&spatial, phase)?;
            if context.shape() != spatial_up.shape() {
                return Err(DsnetError::Shape(format!(
                    "branch resolutions diverged at fusion {}: {:?} vs {:?}",
                    k + 1,
                    context.shape(),
                    spatial_up.shape()
                )));
            }
            let merged = match &node.op {
                FusionOp::Msaf(msaf) => msaf.forward(&context, &spatial_up)?,
                FusionOp::Add => add_fuse(&context, &spatial_up)?,
            };
            if let Some(down) = &node.spatial_out {
                spatial = down.forward(&merged, phase)?;
                if self.cfg.bidirectional_fusion {
                    context = merged.clone();
                }
            }
            fused = Some(merged);
            prev_group = point;
        }
        let fused = fused.expect("at least one fusion point");

        match self.mode {
            Mode::Segmentation => self.seg_head.as_ref().unwrap().forward(&fused, phase),
            Mode::Classification => self.cls_head.as_ref().unwrap().forward(&fused),
        }
    }

    /// Named learnable tensors in construction order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.stem.iter().enumerate() {
            conv.collect_params(&format!("stem.{i}"), &mut out);
        }
        for (g, group) in self.context.iter().enumerate() {
            for (b, block) in group.iter().enumerate() {
                block.collect_params(&format!("context.g{}.b{b}", g + 1), &mut out);
            }
        }
        for (s, seg) in self.spatial.iter().enumerate() {
            for (b, block) in seg.iter().enumerate() {
                block.collect_params(&format!("spatial.s{}.b{b}", s + 1), &mut out);
            }
        }
        for (f, node) in self.fusions.iter().enumerate() {
            let prefix = format!("fusion.f{}", f + 1);
            node.spatial_proj.collect_params(&format!("{prefix}.proj"), &mut out);
            if let FusionOp::Msaf(msaf) = &node.op {
                msaf.collect_params(&prefix, &mut out);
            }
            if let Some(down) = &node.spatial_out {
                down.collect_params(&format!("{prefix}.out"), &mut out);
            }
        }
        if let Some(sp) = &self.spaspp {
            sp.collect_params("spaspp", &mut out);
        }
        if let Some(h) = &self.seg_head {
            h.collect_params("head", &mut out);
        }
        if let Some(h) = &self.cls_head {
            h.collect_params("head", &mut out);
        }
        out
    }

    /// Named non-learnable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.stem.iter().enumerate() {
            conv.collect_buffers(&format!("stem.{i}"), &mut out);
        }
        for (g, group) in self.context.iter().enumerate() {
            for (b, block) in group.iter().enumerate() {
                block.collect_buffers(&format!("context.g{}.b{b}", g + 1), &mut out);
            }
        }
        for (s, seg) in self.spatial.iter().enumerate() {
            for (b, block) in seg.iter().enumerate() {
                block.collect_buffers(&format!("spatial.s{}.b{b}", s + 1), &mut out);
            }
        }
        for (f, node) in self.fusions.iter().enumerate() {
            let prefix = format!("fusion.f{}", f + 1);
            node.spatial_proj.collect_buffers(&format!("{prefix}.proj"), &mut out);
            if let Some(down) = &node.spatial_out {
                down.collect_buffers(&format!("{prefix}.out"), &mut out);
            }
        }
        if let Some(sp) = &self.spaspp {
            sp.collect_buffers("spaspp", &mut out);
        }
        if let Some(h) = &self.seg_head {
            h.collect_buffers("head", &mut out);
        }
        out
    }

    pub fn num_params(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.data().len() as u64)
            .sum()
    }

    /// Static multiply-accumulate count at the given input resolution.
    pub fn count_macs(&self, h: usize, w: usize) -> Result<u64> {
        Ok(CostModel::new(&self.cfg, self.mode)?.macs_at(h, w))
    }

    /// Static FLOP count (two per multiply-accumulate).
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        Ok(CostModel::new(&self.cfg, self.mode)?.flops_at(h, w))
    }

    /// Exposed for structural assertions in tests.
    pub fn backbone_shape(&self) -> &BackboneShape {
        &self.shape
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSNETCK1";

/// Serialize config, mode, parameters and batch-norm buffers as a versioned
/// flat name -> array map.
pub fn save_checkpoint(model: &DSNetModel, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    let cfg_text = model.cfg.to_toml();
    file.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    file.write_all(cfg_text.as_bytes())?;
    file.write_all(&[match model.mode {
        Mode::Segmentation => 0u8,
        Mode::Classification => 1u8,
    }])?;

    let mut entries = model.named_params();
    entries.extend(model.named_buffers());
    file.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        file.write_all(&(bytes.len() as u16).to_le_bytes())?;
        file.write_all(bytes)?;
        let data = tensor.data();
        let dims = data.shape();
        file.write_all(&[dims.len() as u8])?;
        for &d in dims {
            file.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in data.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Rebuild the model a checkpoint describes and restore its state. The
/// embedded config is validated and every stored array must match a tensor
/// of the same name and shape.
pub fn load_checkpoint(path: &Path) -> Result<DSNetModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        DsnetError::Data(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    let magic = read_exact::<8>(&mut file)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DsnetError::Data("not a checkpoint file (bad magic)".into()));
    }
    let cfg_len = u32::from_le_bytes(read_exact::<4>(&mut file)?) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    file.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| DsnetError::Data("checkpoint config is not valid utf-8".into()))?;
    let cfg = ModelConfig::from_toml(&cfg_text)?;
    let mode = match read_exact::<1>(&mut file)?[0] {
        0 => Mode::Segmentation,
        1 => Mode::Classification,
        other => {
            return Err(DsnetError::Data(format!("unknown checkpoint mode byte {other}")));
        }
    };

    let model = DSNetModel::build(&cfg, mode, 0)?;
    let mut slots: std::collections::HashMap<String, Tensor> = model
        .named_params()
        .into_iter()
        .chain(model.named_buffers())
        .collect();

    let n_entries = u32::from_le_bytes(read_exact::<4>(&mut file)?) as usize;
    let mut restored = 0usize;
    for _ in 0..n_entries {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut file)?) as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DsnetError::Data("checkpoint entry name is not utf-8".into()))?;
        let ndim = read_exact::<1>(&mut file)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(read_exact::<4>(&mut file)?) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut file)?));
        }
        let tensor = slots.remove(&name).ok_or_else(|| {
            DsnetError::Data(format!("checkpoint entry `{name}` does not match the model"))
        })?;
        if tensor.shape() != dims {
            return Err(DsnetError::Data(format!(
                "checkpoint entry `{name}` has shape {dims:?}, model expects {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
        restored += 1;
    }
    if !slots.is_empty() {
        let mut missing: Vec<&String> = slots.keys().collect();
        missing.sort();
        return Err(DsnetError::Data(format!(
            "checkpoint is missing {} tensors (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    debug_assert!(restored > 0);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::randn4;
    use ndarray::Array3;

    fn toy() -> ModelConfig {
        ModelConfig::toy(4)
    }

    #[test]
    fn forward_shapes_for_segmentation() {
        let model = DSNetModel::build(&toy(), Mode::Segmentation, 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut r, 1, 3, 32, 32);
        let y = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 32, 32]);
    }

    #[test]
    fn forward_rejects_indivisible_resolution() {
        let model = DSNetModel::build(&toy(), Mode::Segmentation, 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut r, 1, 3, 31, 32);
        let err = model.forward(&x, Phase::Train).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        assert!(err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn classification_mode_has_no_spaspp_and_emits_class_logits() {
        let model = DSNetModel::build(&toy(), Mode::Classification, 1).unwrap();
        assert!(model
            .named_params()
            .iter()
            .all(|(name, _)| !name.starts_with("spaspp")));
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut r, 2, 3, 32, 32);
        let y = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 4]);
    }

    #[test]
    fn built_params_match_static_count() {
        for cfg in [toy(), ModelConfig::dsnet(19)] {
            let model = DSNetModel::build(&cfg, Mode::Segmentation, 3).unwrap();
            let counted = crate::plan::count_params(&cfg).unwrap().total_params;
            assert_eq!(model.num_params(), counted, "cfg {:?}", cfg.variant);
        }
    }

    #[test]
    fn add_fusion_same_topology_without_attention_params() {
        let mut cfg = toy();
        cfg.fusion_mode = FusionMode::Add;
        let add = DSNetModel::build(&cfg, Mode::Segmentation, 1).unwrap();
        cfg.fusion_mode = FusionMode::Msaf;
        let msaf = DSNetModel::build(&cfg, Mode::Segmentation, 1).unwrap();
        let add_names: std::collections::HashSet<String> =
            add.named_params().into_iter().map(|(n, _)| n).collect();
        let msaf_names: std::collections::HashSet<String> =
            msaf.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(add_names.is_subset(&msaf_names));
        assert!(msaf_names
            .difference(&add_names)
            .all(|n| n.contains(".msa.")));
        // both still produce logits of the same shape
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut r, 1, 3, 32, 32);
        assert_eq!(
            add.forward(&x, Phase::Train).unwrap().shape(),
            msaf.forward(&x, Phase::Train).unwrap().shape()
        );
    }

    #[test]
    fn inference_is_deterministic() {
        let model = DSNetModel::build(&toy(), Mode::Segmentation, 9).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let x = randn4(&mut r, 1, 3, 32, 32);
        let a = model.forward(&x, Phase::Eval).unwrap().to_array();
        let b = model.forward(&x, Phase::Eval).unwrap().to_array();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let model = DSNetModel::build(&toy(), Mode::Segmentation, 2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let x = randn4(&mut r, 2, 3, 32, 32);
        let logits = model.forward(&x, Phase::Train).unwrap();
        let labels = Array3::from_shape_fn((2, 32, 32), |(n, h, w)| ((n + h + w) % 4) as u32);
        let (loss, _) = logits.cross_entropy_ignore(&labels, 255);
        loss.backward();
        for (name, p) in model.named_params() {
            let g = p.grad().unwrap_or_else(|| panic!("no grad buffer for {name}"));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "identically-zero gradient for {name}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = DSNetModel::build(&toy(), Mode::Segmentation, 21).unwrap();
        // push some state into the running stats
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let x = randn4(&mut r, 2, 3, 32, 32);
        model.forward(&x, Phase::Train).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored.config(), model.config());
        let y0 = model.forward(&x, Phase::Eval).unwrap().to_array();
        let y1 = restored.forward(&x, Phase::Eval).unwrap().to_array();
        assert_eq!(y0, y1);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
