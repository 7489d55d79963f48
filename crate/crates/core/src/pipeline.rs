//! End-to-end model: heatmap heads, alignment, query recovery, decoder,
//! losses, the two-stage training loop, evaluation, and checkpoints.
//!
//! Stage 1 trains the two single-modality heatmap heads against their
//! visibility-filtered targets. Stage 2 trains alignment, the fused head and
//! the decoder under the summed loss; the modal heads stay frozen unless
//! explicitly unfrozen. Every step is a fresh graph over one rendered scene
//! (optionally accumulated over a small batch), so a (seed, config) pair
//! fully determines the parameter trajectory.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::decoder::{self, DecoderNodes, DecoderOutput, DecoderParams};
use crate::dqr::{
    assemble_queries, build_fusion_mask, recover_modal_queries, select_topk_peaks, FusionMask,
    QueryCandidate, QuerySet, Source,
};
use crate::error::{Error, Result};
use crate::numerics::adam::Adam;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;
use crate::objective::{
    detection_loss, gaussian_focal_loss, gaussian_gt_map, hungarian_match, matching_cost_matrix,
    total_loss, GtBox, GtHeatmap, MatchWeights,
};
use crate::sfa::{self, SfaNodes, SfaParams};
use crate::synth::{
    generate_scene, gt_subsets, BucketRecall, ConflictConfig, GridConfig, Scene, SynthKit,
};

/// Model-intrinsic shape and behavior knobs; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// BEV feature channels C.
    pub channels: usize,
    pub n_classes: usize,
    /// Cost-volume window (even).
    pub q: usize,
    pub flow_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Query budget: fused peaks, recovered LiDAR, recovered camera.
    pub k_fused: usize,
    pub k_lidar: usize,
    pub k_camera: usize,
    /// Local-peak window for query selection (odd).
    pub peak_window: usize,
    /// Ablation switch: skip flow estimation and fuse the raw features.
    pub freeze_flow: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            n_classes: 3,
            q: 4,
            flow_hidden: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            k_fused: 10,
            k_lidar: 5,
            k_camera: 5,
            peak_window: 3,
            freeze_flow: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels {} must be positive and even",
                self.channels
            )));
        }
        if self.n_heads == 0 || self.channels % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.n_heads
            )));
        }
        if self.q == 0 || self.q % 2 != 0 {
            return Err(Error::Config(format!("q {} must be positive and even", self.q)));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.flow_hidden == 0 || self.ffn_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("hidden sizes and layer count must be positive".into()));
        }
        if self.k_fused == 0 {
            return Err(Error::Config("k_fused must be at least 1".into()));
        }
        if self.peak_window % 2 == 0 {
            return Err(Error::Config(format!(
                "peak_window {} must be odd",
                self.peak_window
            )));
        }
        Ok(())
    }
}

/// 3x3 conv head: C -> N_c logits, sigmoid applied in forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvHead {
    fn init(c: usize, nc: usize, rng: &mut Rng) -> ConvHead {
        let std = (1.0 / (9.0 * c as f64)).sqrt();
        ConvHead {
            w: Tensor::from_fn(&[3, 3, c, nc], |_| rng.normal(0.0, std)),
            // Bias so sigmoid starts near the 0.1 background prior, which
            // keeps the focal loss from exploding on the first steps.
            b: Tensor::full(&[nc], (0.1f64 / 0.9).ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub head_lidar: ConvHead,
    pub head_camera: ConvHead,
    pub head_fused: ConvHead,
    pub sfa: SfaParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
        config.validate()?;
        let c = config.channels;
        Ok(ModelParams {
            config: *config,
            head_lidar: ConvHead::init(c, config.n_classes, rng),
            head_camera: ConvHead::init(c, config.n_classes, rng),
            head_fused: ConvHead::init(c, config.n_classes, rng),
            sfa: SfaParams::init(c, config.q, config.flow_hidden, rng),
            decoder: DecoderParams::init(
                config.n_layers,
                config.n_heads,
                c,
                config.ffn_dim,
                config.n_classes,
                rng,
            )?,
        })
    }

    /// Canonical registry: every trainable tensor exactly once, in a fixed
    /// order shared by binding, the optimizer, and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("head_lidar.w".into(), &self.head_lidar.w),
            ("head_lidar.b".into(), &self.head_lidar.b),
            ("head_camera.w".into(), &self.head_camera.w),
            ("head_camera.b".into(), &self.head_camera.b),
            ("head_fused.w".into(), &self.head_fused.w),
            ("head_fused.b".into(), &self.head_fused.b),
            ("sfa.flow_w1".into(), &self.sfa.flow_w1),
            ("sfa.flow_b1".into(), &self.sfa.flow_b1),
            ("sfa.flow_w2".into(), &self.sfa.flow_w2),
            ("sfa.flow_b2".into(), &self.sfa.flow_b2),
            ("sfa.fuse_w".into(), &self.sfa.fuse_w),
            ("sfa.fuse_b".into(), &self.sfa.fuse_b),
            ("decoder.cls_w".into(), &self.decoder.cls_w),
            ("decoder.cls_b".into(), &self.decoder.cls_b),
            ("decoder.box_w".into(), &self.decoder.box_w),
            ("decoder.box_b".into(), &self.decoder.box_b),
        ];
        for (i, l) in self.decoder.layers.iter().enumerate() {
            out.push((format!("decoder.l{i}.self_wq"), &l.self_wq));
            out.push((format!("decoder.l{i}.self_wk"), &l.self_wk));
            out.push((format!("decoder.l{i}.self_wv"), &l.self_wv));
            out.push((format!("decoder.l{i}.self_wo"), &l.self_wo));
            out.push((format!("decoder.l{i}.cross_wq"), &l.cross_wq));
            out.push((format!("decoder.l{i}.cross_wk"), &l.cross_wk));
            out.push((format!("decoder.l{i}.cross_wv"), &l.cross_wv));
            out.push((format!("decoder.l{i}.cross_wo"), &l.cross_wo));
            out.push((format!("decoder.l{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("decoder.l{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("decoder.l{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("decoder.l{i}.ffn_b2"), &l.ffn_b2));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("head_lidar.w".into(), &mut self.head_lidar.w),
            ("head_lidar.b".into(), &mut self.head_lidar.b),
            ("head_camera.w".into(), &mut self.head_camera.w),
            ("head_camera.b".into(), &mut self.head_camera.b),
            ("head_fused.w".into(), &mut self.head_fused.w),
            ("head_fused.b".into(), &mut self.head_fused.b),
            ("sfa.flow_w1".into(), &mut self.sfa.flow_w1),
            ("sfa.flow_b1".into(), &mut self.sfa.flow_b1),
            ("sfa.flow_w2".into(), &mut self.sfa.flow_w2),
            ("sfa.flow_b2".into(), &mut self.sfa.flow_b2),
            ("sfa.fuse_w".into(), &mut self.sfa.fuse_w),
            ("sfa.fuse_b".into(), &mut self.sfa.fuse_b),
            ("decoder.cls_w".into(), &mut self.decoder.cls_w),
            ("decoder.cls_b".into(), &mut self.decoder.cls_b),
            ("decoder.box_w".into(), &mut self.decoder.box_w),
            ("decoder.box_b".into(), &mut self.decoder.box_b),
        ];
        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            out.push((format!("decoder.l{i}.self_wq"), &mut l.self_wq));
            out.push((format!("decoder.l{i}.self_wk"), &mut l.self_wk));
            out.push((format!("decoder.l{i}.self_wv"), &mut l.self_wv));
            out.push((format!("decoder.l{i}.self_wo"), &mut l.self_wo));
            out.push((format!("decoder.l{i}.cross_wq"), &mut l.cross_wq));
            out.push((format!("decoder.l{i}.cross_wk"), &mut l.cross_wk));
            out.push((format!("decoder.l{i}.cross_wv"), &mut l.cross_wv));
            out.push((format!("decoder.l{i}.cross_wo"), &mut l.cross_wo));
            out.push((format!("decoder.l{i}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("decoder.l{i}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("decoder.l{i}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("decoder.l{i}.ffn_b2"), &mut l.ffn_b2));
        }
        out
    }
}

/// Which parameter groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Stage 1: the two single-modality heatmap heads.
    ModalHeads,
    /// Stage 2: alignment, fused head, decoder; modal heads optional.
    Full { unfreeze_modal_heads: bool },
    /// Inference: nothing trainable.
    Frozen,
}

fn stage_trains(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::Frozen => false,
        Stage::ModalHeads => name.starts_with("head_lidar.") || name.starts_with("head_camera."),
        Stage::Full {
            unfreeze_modal_heads,
        } => {
            if name.starts_with("head_lidar.") || name.starts_with("head_camera.") {
                unfreeze_modal_heads
            } else {
                true
            }
        }
    }
}

/// Registry names updated by `stage`, in canonical order.
pub fn trainable_names(params: &ModelParams, stage: Stage) -> Vec<String> {
    params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| stage_trains(stage, n))
        .map(|(n, _)| n)
        .collect()
}

/// Tape handles for every parameter, plus a name -> node index for
/// gradient collection.
pub struct BoundModel {
    pub head_lidar: (NodeId, NodeId),
    pub head_camera: (NodeId, NodeId),
    pub head_fused: (NodeId, NodeId),
    pub sfa: SfaNodes,
    pub decoder: DecoderNodes,
    pub by_name: HashMap<String, NodeId>,
}

impl BoundModel {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }
}

/// Bind every parameter as a tape leaf (trainability per `stage`).
/// `overrides` substitutes pre-existing nodes for chosen names, which lets
/// finite-difference checks probe individual parameters.
pub fn bind_model(
    tape: &mut Tape,
    params: &ModelParams,
    stage: Stage,
    overrides: &[(&str, NodeId)],
) -> Result<BoundModel> {
    let over: HashMap<&str, NodeId> = overrides.iter().copied().collect();
    let mut by_name = HashMap::new();
    {
        let mut bind = |tape: &mut Tape, name: &str, t: &Tensor| -> NodeId {
            let id = match over.get(name) {
                Some(&id) => id,
                None => tape.leaf(t.clone(), stage_trains(stage, name)),
            };
            by_name.insert(name.to_string(), id);
            id
        };
        for (name, t) in params.named_tensors() {
            bind(tape, &name, t);
        }
    }
    let get = |name: &str| -> NodeId { by_name[name] };
    let mut layers = Vec::with_capacity(params.decoder.layers.len());
    for i in 0..params.decoder.layers.len() {
        layers.push(crate::decoder::DecoderLayerNodes {
            self_wq: get(&format!("decoder.l{i}.self_wq")),
            self_wk: get(&format!("decoder.l{i}.self_wk")),
            self_wv: get(&format!("decoder.l{i}.self_wv")),
            self_wo: get(&format!("decoder.l{i}.self_wo")),
            cross_wq: get(&format!("decoder.l{i}.cross_wq")),
            cross_wk: get(&format!("decoder.l{i}.cross_wk")),
            cross_wv: get(&format!("decoder.l{i}.cross_wv")),
            cross_wo: get(&format!("decoder.l{i}.cross_wo")),
            ffn_w1: get(&format!("decoder.l{i}.ffn_w1")),
            ffn_b1: get(&format!("decoder.l{i}.ffn_b1")),
            ffn_w2: get(&format!("decoder.l{i}.ffn_w2")),
            ffn_b2: get(&format!("decoder.l{i}.ffn_b2")),
        });
    }
    Ok(BoundModel {
        head_lidar: (get("head_lidar.w"), get("head_lidar.b")),
        head_camera: (get("head_camera.w"), get("head_camera.b")),
        head_fused: (get("head_fused.w"), get("head_fused.b")),
        sfa: SfaNodes {
            flow_w1: get("sfa.flow_w1"),
            flow_b1: get("sfa.flow_b1"),
            flow_w2: get("sfa.flow_w2"),
            flow_b2: get("sfa.flow_b2"),
            fuse_w: get("sfa.fuse_w"),
            fuse_b: get("sfa.fuse_b"),
        },
        decoder: DecoderNodes {
            layers,
            cls_w: get("decoder.cls_w"),
            cls_b: get("decoder.cls_b"),
            box_w: get("decoder.box_w"),
            box_b: get("decoder.box_b"),
            n_heads: params.decoder.n_heads,
        },
        by_name,
    })
}

fn heatmap_head(tape: &mut Tape, feature: NodeId, head: (NodeId, NodeId)) -> Result<NodeId> {
    let logits = tape.conv2d(feature, head.0, head.1)?;
    Ok(tape.sigmoid(logits))
}

/// The discrete choices of one forward pass: query cells, the fusion mask,
/// and the degenerate-recovery flags. Re-using a structure freezes the
/// piecewise region so finite differences see a smooth function.
#[derive(Debug, Clone)]
pub struct ForwardStructure {
    pub fused_cands: Vec<QueryCandidate>,
    pub lidar_cands: Vec<QueryCandidate>,
    pub camera_cands: Vec<QueryCandidate>,
    pub mask: FusionMask,
    pub degenerate_lidar: bool,
    pub degenerate_camera: bool,
}

pub struct ForwardOutput {
    pub heat_lidar: NodeId,
    pub heat_camera: NodeId,
    pub heat_fused: NodeId,
    pub fused: NodeId,
    /// (lidar flow, camera flow); absent when flow is frozen off.
    pub flows: Option<(NodeId, NodeId)>,
    /// (aligned lidar, aligned camera); raw features when flow is off.
    pub aligned: (NodeId, NodeId),
    pub queries: QuerySet,
    pub dec: DecoderOutput,
    pub structure: ForwardStructure,
}

/// One differentiable pass: modal heads on raw features, alignment+fusion,
/// fused head, query selection and recovery, decoder.
pub fn forward(
    tape: &mut Tape,
    lidar: NodeId,
    camera: NodeId,
    bound: &BoundModel,
    cfg: &ModelConfig,
    frozen: Option<&ForwardStructure>,
) -> Result<ForwardOutput> {
    let shape = tape.value(lidar).shape().to_vec();
    let (x, y) = (shape[0], shape[1]);
    let heat_lidar = heatmap_head(tape, lidar, bound.head_lidar)?;
    let heat_camera = heatmap_head(tape, camera, bound.head_camera)?;

    let (fused, flows, aligned) = if cfg.freeze_flow {
        let fused = sfa::fuse(tape, lidar, camera, &bound.sfa)?;
        (fused, None, (lidar, camera))
    } else {
        let out = sfa::align_and_fuse(
            tape,
            lidar,
            camera,
            heat_lidar,
            heat_camera,
            cfg.q,
            &bound.sfa,
        )?;
        (
            out.fused,
            Some((out.flow_lidar, out.flow_camera)),
            (out.aligned_lidar, out.aligned_camera),
        )
    };
    let heat_fused = heatmap_head(tape, fused, bound.head_fused)?;

    let structure = match frozen {
        Some(s) => s.clone(),
        None => {
            let fused_cands = select_topk_peaks(
                tape.value(heat_fused),
                cfg.k_fused,
                cfg.peak_window,
                Source::Fused,
            )?;
            let mask = build_fusion_mask(&fused_cands, x, y)?;
            let (lidar_cands, degenerate_lidar) = if cfg.k_lidar > 0 {
                let r = recover_modal_queries(
                    tape.value(heat_lidar),
                    &mask,
                    cfg.k_lidar,
                    cfg.peak_window,
                    Source::Lidar,
                )?;
                (r.candidates, r.degenerate)
            } else {
                (Vec::new(), false)
            };
            let (camera_cands, degenerate_camera) = if cfg.k_camera > 0 {
                let r = recover_modal_queries(
                    tape.value(heat_camera),
                    &mask,
                    cfg.k_camera,
                    cfg.peak_window,
                    Source::Camera,
                )?;
                (r.candidates, r.degenerate)
            } else {
                (Vec::new(), false)
            };
            ForwardStructure {
                fused_cands,
                lidar_cands,
                camera_cands,
                mask,
                degenerate_lidar,
                degenerate_camera,
            }
        }
    };

    // Recovered queries read the raw modality features: the whole point is
    // to consult evidence before fusion dissolved it.
    let queries = assemble_queries(
        tape,
        &structure.fused_cands,
        &structure.lidar_cands,
        &structure.camera_cands,
        fused,
        lidar,
        camera,
    )?;
    let dec = decoder::decode(tape, &queries, fused, &bound.decoder)?;
    Ok(ForwardOutput {
        heat_lidar,
        heat_camera,
        heat_fused,
        fused,
        flows,
        aligned,
        queries,
        dec,
        structure,
    })
}

/// Ground-truth maps for one scene: fused covers everything, the modal maps
/// cover only what that sensor perceives.
pub struct SceneTargets {
    pub fused: GtHeatmap,
    pub lidar: GtHeatmap,
    pub camera: GtHeatmap,
    pub boxes: Vec<GtBox>,
}

pub fn scene_targets(scene: &Scene, grid: &GridConfig) -> Result<SceneTargets> {
    Ok(SceneTargets {
        fused: gaussian_gt_map(&scene.gt_boxes_all(), grid.x, grid.y, grid.n_classes)?,
        lidar: gaussian_gt_map(
            &scene.gt_boxes_lidar_visible(),
            grid.x,
            grid.y,
            grid.n_classes,
        )?,
        camera: gaussian_gt_map(
            &scene.gt_boxes_camera_visible(),
            grid.x,
            grid.y,
            grid.n_classes,
        )?,
        boxes: scene.gt_boxes_all(),
    })
}

pub struct LossNodes {
    pub total: NodeId,
    pub l_det: NodeId,
    pub l_fused: NodeId,
    pub l_lidar: NodeId,
    pub l_camera: NodeId,
}

/// Stage-2 objective: detection loss via min-cost matching plus the three
/// heatmap losses, modal ones masked by the fusion mask.
pub fn build_losses(
    tape: &mut Tape,
    fwd: &ForwardOutput,
    targets: &SceneTargets,
    weights: MatchWeights,
) -> Result<LossNodes> {
    let shape = tape.value(fwd.heat_fused).shape().to_vec();
    let (x, y) = (shape[0], shape[1]);
    let l_fused = gaussian_focal_loss(tape, fwd.heat_fused, &targets.fused, None)?;
    let l_lidar =
        gaussian_focal_loss(tape, fwd.heat_lidar, &targets.lidar, Some(&fwd.structure.mask))?;
    let l_camera = gaussian_focal_loss(
        tape,
        fwd.heat_camera,
        &targets.camera,
        Some(&fwd.structure.mask),
    )?;
    let cost = matching_cost_matrix(&fwd.dec.boxes, &targets.boxes, x, y, weights);
    let assignment = hungarian_match(&cost)?;
    let l_det = detection_loss(
        tape,
        Some(fwd.dec.class_logits),
        Some(fwd.dec.loss_vec),
        &targets.boxes,
        &assignment,
        x,
        y,
        weights,
    )?;
    let total = total_loss(tape, l_det, l_fused, l_lidar, l_camera)?;
    Ok(LossNodes {
        total,
        l_det,
        l_fused,
        l_lidar,
        l_camera,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub conflict: ConflictConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub n_scenes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub unfreeze_modal_heads: bool,
    pub weights: MatchWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            conflict: ConflictConfig::default(),
            stage1_steps: 300,
            stage2_steps: 600,
            n_scenes: 200,
            batch_size: 1,
            lr: 3e-3,
            seed: 0,
            unfreeze_modal_heads: false,
            weights: MatchWeights {
                cls: 1.0,
                l1: 0.25,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grid.validate()?;
        self.conflict.validate()?;
        if self.grid.n_classes != self.model.n_classes {
            return Err(Error::Config(format!(
                "grid has {} classes, model expects {}",
                self.grid.n_classes, self.model.n_classes
            )));
        }
        if self.n_scenes == 0 || self.batch_size == 0 {
            return Err(Error::Config("scene count and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.grid.x < self.model.q || self.grid.y < self.model.q {
            return Err(Error::Config(format!(
                "grid {}x{} smaller than alignment window q={}",
                self.grid.x, self.grid.y, self.model.q
            )));
        }
        Ok(())
    }
}

/// Per-step loss record; stage-1 rows leave the unused terms at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub l_det: f64,
    pub l_fused: f64,
    pub l_lidar: f64,
    pub l_camera: f64,
    pub total: f64,
}

pub struct TrainResult {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
}

/// Deterministic per-scene seed, decorrelated from the master seed.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    Rng::with_stream(master, index).next_u64()
}

/// Seeds for the training pool: stream indexes 1_000_000 + i.
pub fn train_scene_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| scene_seed(master, 1_000_000 + i)).collect()
}

/// Seeds for evaluation pools: stream indexes 2_000_000 + i.
pub fn eval_scene_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| scene_seed(master, 2_000_000 + i)).collect()
}

fn check_finite(step: usize, stage: u8, terms: &[(&str, f64)]) -> Result<()> {
    if terms.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail: Vec<String> = terms.iter().map(|(n, v)| format!("{n}={v}")).collect();
    Err(Error::Numerical(format!(
        "stage {stage} diverged at step {step}: {}",
        detail.join(" ")
    )))
}

/// Accumulate `tape` gradients for `names` into `acc`.
fn collect_grads(
    tape: &Tape,
    bound: &BoundModel,
    names: &[String],
    acc: &mut [Option<Tensor>],
) -> Result<()> {
    for (slot, name) in acc.iter_mut().zip(names) {
        let node = bound
            .node(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if let Some(g) = tape.grad(node) {
            match slot {
                None => *slot = Some(g.clone()),
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok(())
}

fn apply_update(
    params: &mut ModelParams,
    names: &[String],
    adam: &mut Adam,
    mut grads: Vec<Option<Tensor>>,
    batch: usize,
) -> Result<()> {
    if batch > 1 {
        let inv = 1.0 / batch as f64;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut().iter_mut() {
                *v *= inv;
            }
        }
    }
    let mut tensors: Vec<Tensor> = Vec::with_capacity(names.len());
    {
        let named = params.named_tensors();
        let by_name: HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        for n in names {
            tensors.push((*by_name[n.as_str()]).clone());
        }
    }
    adam.step(&mut tensors, &grads)?;
    let mut updated: HashMap<&str, Tensor> = names
        .iter()
        .map(|n| n.as_str())
        .zip(tensors)
        .collect();
    for (name, t) in params.named_tensors_mut() {
        if let Some(new) = updated.remove(name.as_str()) {
            *t = new;
        }
    }
    Ok(())
}

/// Two-stage training; see module docs. Returns updated parameters and the
/// full per-step loss history.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, 17);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    let mut history = Vec::new();
    train_into(&mut params, cfg, &mut history)?;
    Ok(TrainResult { params, history })
}

/// Training loop over pre-initialized parameters (lets callers warm-start).
pub fn train_into(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    history: &mut Vec<StepRecord>,
) -> Result<()> {
    cfg.validate()?;
    let kit = SynthKit::new(cfg.grid, cfg.model.channels, cfg.seed)?;
    let scene_seeds = train_scene_seeds(cfg.seed, cfg.n_scenes);

    // Stage 1: modal heatmap heads, unmasked per-modality focal losses.
    if cfg.stage1_steps > 0 {
        let names = trainable_names(params, Stage::ModalHeads);
        let shapes: Vec<Vec<usize>> = {
            let named = params.named_tensors();
            let by: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            names.iter().map(|n| by[n.as_str()].shape().to_vec()).collect()
        };
        let mut adam = Adam::new(cfg.lr, &shapes);
        for step in 0..cfg.stage1_steps {
            let mut acc: Vec<Option<Tensor>> = vec![None; names.len()];
            let (mut lp_sum, mut li_sum) = (0.0, 0.0);
            for b in 0..cfg.batch_size {
                let idx = (step * cfg.batch_size + b) % scene_seeds.len();
                let scene = generate_scene(scene_seeds[idx], &cfg.grid, &cfg.conflict);
                let (bev_l, tgt_l) = kit.render_lidar(&scene)?;
                let (bev_c, tgt_c) = kit.render_camera(&scene, &cfg.conflict)?;
                let mut tape = Tape::new();
                let bound = bind_model(&mut tape, params, Stage::ModalHeads, &[])?;
                let lidar = tape.constant(bev_l.into_tensor());
                let camera = tape.constant(bev_c.into_tensor());
                let h_p = heatmap_head(&mut tape, lidar, bound.head_lidar)?;
                let h_i = heatmap_head(&mut tape, camera, bound.head_camera)?;
                let l_p = gaussian_focal_loss(&mut tape, h_p, &tgt_l, None)?;
                let l_i = gaussian_focal_loss(&mut tape, h_i, &tgt_c, None)?;
                let loss = tape.add(l_p, l_i)?;
                let (lp, li) = (tape.value(l_p).item(), tape.value(l_i).item());
                check_finite(step, 1, &[("L_HP", lp), ("L_HI", li)])?;
                lp_sum += lp;
                li_sum += li;
                tape.backward(loss)?;
                collect_grads(&tape, &bound, &names, &mut acc)?;
            }
            apply_update(params, &names, &mut adam, acc, cfg.batch_size)?;
            let inv = 1.0 / cfg.batch_size as f64;
            history.push(StepRecord {
                stage: 1,
                step,
                l_det: 0.0,
                l_fused: 0.0,
                l_lidar: lp_sum * inv,
                l_camera: li_sum * inv,
                total: (lp_sum + li_sum) * inv,
            });
        }
    }

    // Stage 2: everything conflict-related under the summed loss.
    if cfg.stage2_steps > 0 {
        let stage = Stage::Full {
            unfreeze_modal_heads: cfg.unfreeze_modal_heads,
        };
        let names = trainable_names(params, stage);
        let shapes: Vec<Vec<usize>> = {
            let named = params.named_tensors();
            let by: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            names.iter().map(|n| by[n.as_str()].shape().to_vec()).collect()
        };
        let mut adam = Adam::new(cfg.lr, &shapes);
        for step in 0..cfg.stage2_steps {
            let mut acc: Vec<Option<Tensor>> = vec![None; names.len()];
            let mut sums = [0.0f64; 5]; // det, fused, lidar, camera, total
            for b in 0..cfg.batch_size {
                let idx = (step * cfg.batch_size + b) % scene_seeds.len();
                let scene = generate_scene(scene_seeds[idx], &cfg.grid, &cfg.conflict);
                let targets = scene_targets(&scene, &cfg.grid)?;
                let (bev_l, _) = kit.render_lidar(&scene)?;
                let (bev_c, _) = kit.render_camera(&scene, &cfg.conflict)?;
                let mut tape = Tape::new();
                let bound = bind_model(&mut tape, params, stage, &[])?;
                let lidar = tape.constant(bev_l.into_tensor());
                let camera = tape.constant(bev_c.into_tensor());
                let fwd = forward(&mut tape, lidar, camera, &bound, &cfg.model, None)?;
                let losses = build_losses(&mut tape, &fwd, &targets, cfg.weights)?;
                let vals = [
                    tape.value(losses.l_det).item(),
                    tape.value(losses.l_fused).item(),
                    tape.value(losses.l_lidar).item(),
                    tape.value(losses.l_camera).item(),
                    tape.value(losses.total).item(),
                ];
                check_finite(
                    step,
                    2,
                    &[
                        ("L_det", vals[0]),
                        ("L_HF", vals[1]),
                        ("L_HP", vals[2]),
                        ("L_HI", vals[3]),
                    ],
                )?;
                for (s, v) in sums.iter_mut().zip(vals) {
                    *s += v;
                }
                tape.backward(losses.total)?;
                collect_grads(&tape, &bound, &names, &mut acc)?;
            }
            apply_update(params, &names, &mut adam, acc, cfg.batch_size)?;
            let inv = 1.0 / cfg.batch_size as f64;
            history.push(StepRecord {
                stage: 2,
                step,
                l_det: sums[0] * inv,
                l_fused: sums[1] * inv,
                l_lidar: sums[2] * inv,
                l_camera: sums[3] * inv,
                total: sums[4] * inv,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalThresholds {
    /// Center-distance radii (cells) for AP.
    pub radii: Vec<f64>,
    /// Confidence floor for bucket-recall accounting.
    pub conf_bucket: f64,
    /// Center-distance radius for bucket recalls.
    pub bucket_radius: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            radii: vec![1.0, 2.0, 4.0],
            conf_bucket: 0.3,
            bucket_radius: 2.0,
        }
    }
}

/// One scored detection flattened out of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub cls: usize,
    pub conf: f64,
    pub center: (f64, f64),
}

/// One ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPoint {
    pub scene: usize,
    pub cls: usize,
    pub center: (f64, f64),
}

/// All-point average precision for one class at one center-distance radius.
/// Detections match greedily in confidence order against the nearest
/// unclaimed ground truth of the class in the same scene. Returns None when
/// the class has no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GtPoint],
    cls: usize,
    radius: f64,
) -> Option<f64> {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].cls == cls).collect();
    if gt_idx.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].cls == cls).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .conf
            .partial_cmp(&dets[a].conf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for &gi in &gt_idx {
            if claimed[gi] || gts[gi].scene != d.scene {
                continue;
            }
            let g = &gts[gi];
            let dist = ((d.center.0 - g.center.0).powi(2) + (d.center.1 - g.center.1).powi(2))
                .sqrt();
            if dist <= radius && best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                claimed[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // Precision-recall curve with the usual right-to-left envelope.
    let n_gt = gt_idx.len() as f64;
    let mut cum_tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        points.push((cum_tp as f64 / n_gt, cum_tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut k = 0;
    while k < points.len() {
        let recall = points[k].0;
        // Envelope: best precision achieved at this recall or beyond.
        let max_p = points[k..].iter().fold(0.0f64, |m, &(_, p)| m.max(p));
        ap += (recall - prev_recall) * max_p;
        prev_recall = recall;
        while k < points.len() && points[k].0 == recall {
            k += 1;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over every (class-with-gt, radius) AP.
    pub map: f64,
    /// AP per class per radius; NaN where a class has no ground truth.
    pub per_class_ap: Vec<Vec<f64>>,
    pub buckets: BucketRecall,
    /// Mean center distance over min-cost matched pairs, if any matched.
    pub center_err: Option<f64>,
    pub n_scenes: usize,
}

/// Render, forward and score `scenes` with frozen parameters.
pub fn evaluate(
    params: &ModelParams,
    kit: &SynthKit,
    scenes: &[Scene],
    conflict: &ConflictConfig,
    th: &EvalThresholds,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one scene".into()));
    }
    let grid = kit.grid;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut buckets = BucketRecall::default();
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    for (sidx, scene) in scenes.iter().enumerate() {
        let (bev_l, _) = kit.render_lidar(scene)?;
        let (bev_c, _) = kit.render_camera(scene, conflict)?;
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, params, Stage::Frozen, &[])?;
        let lidar = tape.constant(bev_l.into_tensor());
        let camera = tape.constant(bev_c.into_tensor());
        let fwd = forward(&mut tape, lidar, camera, &bound, &params.config, None)?;
        for b in &fwd.dec.boxes {
            let (cls, conf) = b.best_real_class();
            dets.push(Detection {
                scene: sidx,
                cls,
                conf,
                center: b.center,
            });
        }
        for o in &scene.objects {
            gts.push(GtPoint {
                scene: sidx,
                cls: o.cls,
                center: o.center,
            });
        }
        buckets.merge(&gt_subsets(scene, &fwd.dec.boxes, th.conf_bucket, th.bucket_radius));
        let boxes = scene.gt_boxes_all();
        let cost = matching_cost_matrix(
            &fwd.dec.boxes,
            &boxes,
            grid.x,
            grid.y,
            MatchWeights::default(),
        );
        let assignment = hungarian_match(&cost)?;
        for &(pi, gi) in &assignment.pairs {
            let p = &fwd.dec.boxes[pi];
            let g = &boxes[gi];
            err_sum +=
                ((p.center.0 - g.cx).powi(2) + (p.center.1 - g.cy).powi(2)).sqrt();
            err_n += 1;
        }
    }
    let mut per_class_ap = vec![vec![f64::NAN; th.radii.len()]; grid.n_classes];
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for cls in 0..grid.n_classes {
        for (ri, &r) in th.radii.iter().enumerate() {
            if let Some(ap) = average_precision(&dets, &gts, cls, r) {
                per_class_ap[cls][ri] = ap;
                ap_sum += ap;
                ap_n += 1;
            }
        }
    }
    Ok(EvalReport {
        map: if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 },
        per_class_ap,
        buckets,
        center_err: if err_n == 0 {
            None
        } else {
            Some(err_sum / err_n as f64)
        },
        n_scenes: scenes.len(),
    })
}

/// Materialized per-scene maps for image dumps.
pub struct SceneMaps {
    pub heat_lidar: Tensor,
    pub heat_camera: Tensor,
    pub heat_fused: Tensor,
    /// Absent when flow is frozen off.
    pub flow_lidar: Option<Tensor>,
    pub flow_camera: Option<Tensor>,
}

/// One frozen forward pass, returning the heatmaps and flow fields as plain
/// tensors.
pub fn infer_scene_maps(
    params: &ModelParams,
    kit: &SynthKit,
    scene: &Scene,
    conflict: &ConflictConfig,
) -> Result<SceneMaps> {
    let (bev_l, _) = kit.render_lidar(scene)?;
    let (bev_c, _) = kit.render_camera(scene, conflict)?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params, Stage::Frozen, &[])?;
    let lidar = tape.constant(bev_l.into_tensor());
    let camera = tape.constant(bev_c.into_tensor());
    let fwd = forward(&mut tape, lidar, camera, &bound, &params.config, None)?;
    Ok(SceneMaps {
        heat_lidar: tape.value(fwd.heat_lidar).clone(),
        heat_camera: tape.value(fwd.heat_camera).clone(),
        heat_fused: tape.value(fwd.heat_fused).clone(),
        flow_lidar: fwd.flows.map(|(l, _)| tape.value(l).clone()),
        flow_camera: fwd.flows.map(|(_, c)| tape.value(c).clone()),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ECFK";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (all integers little-endian):
///   magic "ECFK" | version u32 | 12 config words u32
///   (channels, n_classes, q, flow_hidden, n_layers, n_heads, ffn_dim,
///    k_fused, k_lidar, k_camera, peak_window, freeze_flow)
///   | tensor count u32 | per tensor: name_len u16, name bytes,
///   ndim u8, dims u32 each, data f64 LE.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &params.config;
    for v in [
        c.channels,
        c.n_classes,
        c.q,
        c.flow_hidden,
        c.n_layers,
        c.n_heads,
        c.ffn_dim,
        c.k_fused,
        c.k_lidar,
        c.k_camera,
        c.peak_window,
        c.freeze_flow as usize,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut words = [0usize; 12];
    for w in &mut words {
        *w = r.u32()? as usize;
    }
    let config = ModelConfig {
        channels: words[0],
        n_classes: words[1],
        q: words[2],
        flow_hidden: words[3],
        n_layers: words[4],
        n_heads: words[5],
        ffn_dim: words[6],
        k_fused: words[7],
        k_lidar: words[8],
        k_camera: words[9],
        peak_window: words[10],
        freeze_flow: words[11] != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let count = r.u32()? as usize;
    let mut stored: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let t = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor {name}: {e}")))?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    // Rebuild the structure, then overwrite every tensor from the file;
    // name sets must match exactly.
    let mut params = ModelParams::init(&config, &mut Rng::new(0))?;
    let expected = params.named_tensors().len();
    if stored.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} tensors, model has {expected}",
            stored.len()
        )));
    }
    for (name, t) in params.named_tensors_mut() {
        let new = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if new.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?} vs expected {:?}",
                new.shape(),
                t.shape()
            )));
        }
        *t = new;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::GradCheck;

    fn small_model() -> ModelConfig {
        ModelConfig {
            channels: 8,
            n_classes: 3,
            q: 2,
            flow_hidden: 6,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            k_fused: 4,
            k_lidar: 2,
            k_camera: 2,
            peak_window: 3,
            freeze_flow: false,
        }
    }

    fn small_grid() -> GridConfig {
        GridConfig {
            x: 16,
            y: 16,
            cell_size: 0.5,
            n_classes: 3,
        }
    }

    fn small_train_config() -> TrainConfig {
        TrainConfig {
            model: small_model(),
            grid: small_grid(),
            conflict: ConflictConfig::default(),
            stage1_steps: 2,
            stage2_steps: 2,
            n_scenes: 3,
            batch_size: 1,
            lr: 1e-2,
            seed: 11,
            unfreeze_modal_heads: false,
            weights: MatchWeights::default(),
        }
    }

    fn rendered_pair(seed: u64, grid: &GridConfig, kit: &SynthKit) -> (Tensor, Tensor, Scene) {
        let conflict = ConflictConfig::default();
        let scene = generate_scene(seed, grid, &conflict);
        let (l, _) = kit.render_lidar(&scene).unwrap();
        let (c, _) = kit.render_camera(&scene, &conflict).unwrap();
        (l.into_tensor(), c.into_tensor(), scene)
    }

    #[test]
    fn registry_names_are_unique_and_stable() {
        let params =
            ModelParams::init(&small_model(), &mut Rng::new(1)).unwrap();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 16 + 12 * params.decoder.layers.len());
        let mut_names: Vec<String> = {
            let mut p = params.clone();
            p.named_tensors_mut().into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(names, mut_names);
    }

    #[test]
    fn forward_shape_contract_holds() {
        let model = small_model();
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let params = ModelParams::init(&model, &mut Rng::new(2)).unwrap();
        let (l, c, _) = rendered_pair(7, &grid, &kit);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Stage::Frozen, &[]).unwrap();
        let lidar = tape.constant(l);
        let camera = tape.constant(c);
        let fwd = forward(&mut tape, lidar, camera, &bound, &model, None).unwrap();
        for h in [fwd.heat_lidar, fwd.heat_camera, fwd.heat_fused] {
            assert_eq!(tape.value(h).shape(), &[16, 16, 3]);
            assert!(tape.value(h).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let want_k = model.k_fused + model.k_lidar + model.k_camera;
        assert_eq!(fwd.queries.len(), want_k);
        assert_eq!(fwd.dec.boxes.len(), want_k);
        assert_eq!(tape.value(fwd.fused).shape(), &[16, 16, 8]);
    }

    #[test]
    fn fresh_params_alignment_is_identity() {
        let model = small_model();
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let params = ModelParams::init(&model, &mut Rng::new(3)).unwrap();
        let (l, c, _) = rendered_pair(9, &grid, &kit);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Stage::Frozen, &[]).unwrap();
        let lidar = tape.constant(l);
        let camera = tape.constant(c);
        let fwd = forward(&mut tape, lidar, camera, &bound, &model, None).unwrap();
        // Zero-initialized flow output layer -> exact identity warp.
        assert_eq!(tape.value(fwd.aligned.0), tape.value(lidar));
        assert_eq!(tape.value(fwd.aligned.1), tape.value(camera));
        let (fl, fc) = fwd.flows.unwrap();
        assert!(tape.value(fl).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(fc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_init_equals_concat_fusion_baseline_bitwise() {
        let model = small_model();
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let params = ModelParams::init(&model, &mut Rng::new(4)).unwrap();
        let (l, c, _) = rendered_pair(13, &grid, &kit);
        let run = |freeze: bool| -> (Tensor, Vec<crate::decoder::BoxPred>) {
            let mut m = model;
            m.freeze_flow = freeze;
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &params, Stage::Frozen, &[]).unwrap();
            let lidar = tape.constant(l.clone());
            let camera = tape.constant(c.clone());
            let fwd = forward(&mut tape, lidar, camera, &bound, &m, None).unwrap();
            (tape.value(fwd.heat_fused).clone(), fwd.dec.boxes)
        };
        let (h_sfa, boxes_sfa) = run(false);
        let (h_frozen, boxes_frozen) = run(true);
        assert_eq!(h_sfa, h_frozen);
        assert_eq!(boxes_sfa, boxes_frozen);
    }

    #[test]
    fn no_dqr_config_reduces_to_fused_queries_only() {
        let mut model = small_model();
        model.k_lidar = 0;
        model.k_camera = 0;
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let params = ModelParams::init(&model, &mut Rng::new(5)).unwrap();
        let (l, c, _) = rendered_pair(15, &grid, &kit);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, Stage::Frozen, &[]).unwrap();
        let lidar = tape.constant(l);
        let camera = tape.constant(c);
        let fwd = forward(&mut tape, lidar, camera, &bound, &model, None).unwrap();
        assert_eq!(fwd.queries.len(), model.k_fused);
        assert!(fwd
            .dec
            .boxes
            .iter()
            .all(|b| b.source == Source::Fused));
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let model = small_model();
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let params = ModelParams::init(&model, &mut Rng::new(6)).unwrap();
        // Randomize the zero-initialized flow output layer so the flow path
        // carries gradient signal worth checking.
        let mut params = params;
        let mut rng = Rng::new(60);
        params.sfa.flow_w2 = Tensor::from_fn(
            &params.sfa.flow_w2.shape().to_vec(),
            |_| rng.normal(0.0, 0.02),
        );
        let conflict = ConflictConfig::default();
        let scene = generate_scene(19, &grid, &conflict);
        let targets = scene_targets(&scene, &grid).unwrap();
        let (bev_l, _) = kit.render_lidar(&scene).unwrap();
        let (bev_c, _) = kit.render_camera(&scene, &conflict).unwrap();
        let (lt, ct) = (bev_l.into_tensor(), bev_c.into_tensor());

        // Freeze the discrete structure from a baseline pass.
        let structure = {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &params, Stage::Frozen, &[]).unwrap();
            let lidar = tape.constant(lt.clone());
            let camera = tape.constant(ct.clone());
            forward(&mut tape, lidar, camera, &bound, &model, None)
                .unwrap()
                .structure
        };

        let probe_names = [
            "head_lidar.w",
            "head_fused.w",
            "sfa.fuse_w",
            "sfa.flow_w2",
            "decoder.cls_w",
            "decoder.box_w",
            "decoder.l0.self_wq",
            "decoder.l0.ffn_w1",
        ];
        let by: HashMap<String, Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let inputs: Vec<Tensor> = probe_names.iter().map(|n| by[*n].clone()).collect();
        let check = GradCheck {
            max_probes_per_input: 4,
            ..GradCheck::default()
        };
        let report = check
            .run(&inputs, |tape, ids| {
                let overrides: Vec<(&str, NodeId)> = probe_names
                    .iter()
                    .copied()
                    .zip(ids.iter().copied())
                    .collect();
                let bound = bind_model(tape, &params, Stage::Frozen, &overrides)?;
                let lidar = tape.constant(lt.clone());
                let camera = tape.constant(ct.clone());
                let fwd = forward(tape, lidar, camera, &bound, &model, Some(&structure))?;
                Ok(build_losses(tape, &fwd, &targets, MatchWeights::default())?.total)
            })
            .unwrap();
        assert!(
            report.passed(check.rel_tol),
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn every_trainable_parameter_receives_gradient() {
        let model = small_model();
        let grid = small_grid();
        let kit = SynthKit::new(grid, model.channels, 5).unwrap();
        let mut params = ModelParams::init(&model, &mut Rng::new(7)).unwrap();
        let mut rng = Rng::new(70);
        params.sfa.flow_w2 = Tensor::from_fn(
            &params.sfa.flow_w2.shape().to_vec(),
            |_| rng.normal(0.0, 0.02),
        );
        let conflict = ConflictConfig::default();
        let scene = generate_scene(23, &grid, &conflict);
        let targets = scene_targets(&scene, &grid).unwrap();
        let (bev_l, _) = kit.render_lidar(&scene).unwrap();
        let (bev_c, _) = kit.render_camera(&scene, &conflict).unwrap();
        let stage = Stage::Full {
            unfreeze_modal_heads: true,
        };
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, stage, &[]).unwrap();
        let lidar = tape.constant(bev_l.into_tensor());
        let camera = tape.constant(bev_c.into_tensor());
        let fwd = forward(&mut tape, lidar, camera, &bound, &model, None).unwrap();
        let losses = build_losses(&mut tape, &fwd, &targets, MatchWeights::default()).unwrap();
        tape.backward(losses.total).unwrap();
        for name in trainable_names(&params, stage) {
            let node = bound.node(&name).unwrap();
            let g = tape.grad(node);
            assert!(g.is_some(), "no gradient for {name}");
        }
        for name in ["head_fused.w", "sfa.fuse_w", "decoder.cls_w", "head_lidar.w"] {
            let g = tape.grad(bound.node(name).unwrap()).unwrap();
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "gradient for {name} is identically zero"
            );
        }
    }

    #[test]
    fn zero_step_training_returns_initialized_params() {
        let mut cfg = small_train_config();
        cfg.stage1_steps = 0;
        cfg.stage2_steps = 0;
        let result = train(&cfg).unwrap();
        assert!(result.history.is_empty());
        let mut rng = Rng::with_stream(cfg.seed, 17);
        let want = ModelParams::init(&cfg.model, &mut rng).unwrap();
        assert_eq!(result.params, want);
    }

    #[test]
    fn training_replays_bit_identically() {
        let cfg = small_train_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), cfg.stage1_steps + cfg.stage2_steps);
        assert!(a.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn stage2_leaves_modal_heads_bit_identical() {
        let mut cfg = small_train_config();
        cfg.stage1_steps = 0;
        cfg.stage2_steps = 3;
        let mut rng = Rng::with_stream(cfg.seed, 17);
        let init = ModelParams::init(&cfg.model, &mut rng).unwrap();
        let got = train(&cfg).unwrap().params;
        assert_eq!(got.head_lidar, init.head_lidar);
        assert_eq!(got.head_camera, init.head_camera);
        assert_ne!(got.head_fused, init.head_fused);
        assert_ne!(got.decoder, init.decoder);
    }

    #[test]
    fn stage1_loss_decreases_on_fixed_scenes() {
        let mut cfg = small_train_config();
        cfg.stage1_steps = 40;
        cfg.stage2_steps = 0;
        cfg.n_scenes = 4;
        cfg.lr = 1e-2;
        let result = train(&cfg).unwrap();
        let first = result.history.first().unwrap().total;
        let last = result.history.last().unwrap().total;
        assert!(
            last < first,
            "heatmap loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn average_precision_matches_hand_computed_fixture() {
        // Two GTs; detections at conf .9 (hit), .8 (miss), .7 (hit).
        let gts = vec![
            GtPoint {
                scene: 0,
                cls: 0,
                center: (4.0, 4.0),
            },
            GtPoint {
                scene: 1,
                cls: 0,
                center: (8.0, 8.0),
            },
        ];
        let dets = vec![
            Detection {
                scene: 0,
                cls: 0,
                conf: 0.9,
                center: (4.3, 4.0),
            },
            Detection {
                scene: 0,
                cls: 0,
                conf: 0.8,
                center: (12.0, 12.0),
            },
            Detection {
                scene: 1,
                cls: 0,
                conf: 0.7,
                center: (8.0, 8.5),
            },
        ];
        let ap = average_precision(&dets, &gts, 0, 2.0).unwrap();
        // PR points: (0.5, 1), (0.5, 1/2), (1, 2/3); envelope -> 0.5*1 + 0.5*(2/3).
        let want = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((ap - want).abs() < 1e-12, "{ap} vs {want}");
        // Perfect detections at every GT: AP 1. No detections: AP 0.
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                scene: g.scene,
                cls: 0,
                conf: 1.0,
                center: g.center,
            })
            .collect();
        assert_eq!(average_precision(&perfect, &gts, 0, 2.0), Some(1.0));
        assert_eq!(average_precision(&[], &gts, 0, 2.0), Some(0.0));
        // Class without ground truth: undefined.
        assert_eq!(average_precision(&dets, &gts, 2, 2.0), None);
    }

    #[test]
    fn evaluate_is_deterministic_and_rejects_empty() {
        let cfg = small_train_config();
        let result = train(&cfg).unwrap();
        let kit = SynthKit::new(cfg.grid, cfg.model.channels, cfg.seed).unwrap();
        let scenes: Vec<Scene> = eval_scene_seeds(cfg.seed, 3)
            .into_iter()
            .map(|s| generate_scene(s, &cfg.grid, &cfg.conflict))
            .collect();
        let th = EvalThresholds::default();
        let a = evaluate(&result.params, &kit, &scenes, &cfg.conflict, &th).unwrap();
        let b = evaluate(&result.params, &kit, &scenes, &cfg.conflict, &th).unwrap();
        assert_eq!(a, b);
        assert!(a.map >= 0.0 && a.map <= 1.0);
        assert!(evaluate(&result.params, &kit, &[], &cfg.conflict, &th).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = small_train_config();
        let trained = train(&cfg).unwrap().params;
        save_checkpoint(&path, &trained).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(trained, loaded);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(&small_model(), &mut Rng::new(8)).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'E';
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn scene_seed_streams_are_disjoint() {
        let train = train_scene_seeds(5, 50);
        let eval = eval_scene_seeds(5, 50);
        for t in &train {
            assert!(!eval.contains(t));
        }
        assert_eq!(train, train_scene_seeds(5, 50));
    }
}
