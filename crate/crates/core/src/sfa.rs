//! Flow-based alignment of the two modality feature maps.
//!
//! Miscalibration shows up as the same object occupying different cells in
//! the LiDAR and camera BEV maps. Alignment measures local cross-modal
//! similarity between the class heatmaps (cost volumes), regresses one flow
//! field per modality from a shared conv block, warps both feature maps by
//! their flows, and fuses the aligned pair with a 3x3 conv.
//!
//! The flow head's output layer starts at zero, so a freshly initialized
//! block is exactly the identity on both features and training departs from
//! the no-alignment baseline.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Flow-estimation and fusion conv parameters.
///
/// The flow block is conv3x3(2C + 2q*q -> hidden) + relu + conv3x3(hidden -> 4);
/// output channels 0..2 displace the LiDAR map, 2..4 the camera map. The fuse
/// conv is conv3x3(2C -> C) over the concatenated aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct SfaParams {
    pub flow_w1: Tensor,
    pub flow_b1: Tensor,
    pub flow_w2: Tensor,
    pub flow_b2: Tensor,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
}

/// Tape handles for one bound instance of [`SfaParams`].
#[derive(Debug, Clone, Copy)]
pub struct SfaNodes {
    pub flow_w1: NodeId,
    pub flow_b1: NodeId,
    pub flow_w2: NodeId,
    pub flow_b2: NodeId,
    pub fuse_w: NodeId,
    pub fuse_b: NodeId,
}

impl SfaParams {
    /// Fresh parameters for feature width `c`, window `q`, flow hidden width
    /// `hidden`. The flow output layer is zero so initial flow is identically
    /// zero.
    pub fn init(c: usize, q: usize, hidden: usize, rng: &mut Rng) -> SfaParams {
        let cin_flow = 2 * c + 2 * q * q;
        let std1 = (2.0 / (9.0 * cin_flow as f64)).sqrt();
        let std_fuse = (1.0 / (9.0 * 2.0 * c as f64)).sqrt();
        SfaParams {
            flow_w1: Tensor::from_fn(&[3, 3, cin_flow, hidden], |_| rng.normal(0.0, std1)),
            flow_b1: Tensor::zeros(&[hidden]),
            flow_w2: Tensor::zeros(&[3, 3, hidden, 4]),
            flow_b2: Tensor::zeros(&[4]),
            fuse_w: Tensor::from_fn(&[3, 3, 2 * c, c], |_| rng.normal(0.0, std_fuse)),
            fuse_b: Tensor::zeros(&[c]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SfaNodes {
        SfaNodes {
            flow_w1: tape.leaf(self.flow_w1.clone(), trainable),
            flow_b1: tape.leaf(self.flow_b1.clone(), trainable),
            flow_w2: tape.leaf(self.flow_w2.clone(), trainable),
            flow_b2: tape.leaf(self.flow_b2.clone(), trainable),
            fuse_w: tape.leaf(self.fuse_w.clone(), trainable),
            fuse_b: tape.leaf(self.fuse_b.clone(), trainable),
        }
    }
}

/// Everything one alignment pass produces, kept for inspection and masking.
#[derive(Debug, Clone, Copy)]
pub struct SfaOutput {
    pub cost_lidar: NodeId,
    pub cost_camera: NodeId,
    pub flow_lidar: NodeId,
    pub flow_camera: NodeId,
    pub aligned_lidar: NodeId,
    pub aligned_camera: NodeId,
    pub fused: NodeId,
}

/// Cross-modal cost volumes over a q x q window:
/// cost_lidar(i,j)[o(m,n)] = <heat_lidar(i,j), heat_camera(i+m, j+n)> and symmetrically for
/// cost_camera, with out-of-grid neighbors contributing zero.
pub fn compute_cost_volumes(
    tape: &mut Tape,
    heat_lidar: NodeId,
    heat_camera: NodeId,
    q: usize,
) -> Result<(NodeId, NodeId)> {
    let cost_lidar = tape.cost_volume(heat_lidar, heat_camera, q)?;
    let cost_camera = tape.cost_volume(heat_camera, heat_lidar, q)?;
    Ok((cost_lidar, cost_camera))
}

/// Regress both flow fields from the shared conv block applied to
/// concat(lidar, cost_lidar, camera, cost_camera).
pub fn estimate_flow(
    tape: &mut Tape,
    lidar: NodeId,
    cost_lidar: NodeId,
    camera: NodeId,
    cost_camera: NodeId,
    nodes: &SfaNodes,
) -> Result<(NodeId, NodeId)> {
    let cin_have = tape.value(lidar).shape()[2] * 2
        + tape.value(cost_lidar).shape()[2]
        + tape.value(cost_camera).shape()[2];
    let cin_want = tape.value(nodes.flow_w1).shape()[2];
    if cin_have != cin_want {
        return Err(Error::Shape(format!(
            "flow block expects {cin_want} input channels, inputs concatenate to {cin_have}"
        )));
    }
    let cat = tape.concat_last(&[lidar, cost_lidar, camera, cost_camera])?;
    let h = tape.conv2d(cat, nodes.flow_w1, nodes.flow_b1)?;
    let h = tape.relu(h);
    let out = tape.conv2d(h, nodes.flow_w2, nodes.flow_b2)?;
    let flow_lidar = tape.slice_last(out, 0, 2)?;
    let flow_camera = tape.slice_last(out, 2, 2)?;
    Ok((flow_lidar, flow_camera))
}

/// Gather-warp: out(p) = bilinear read of `feature` at p + flow(p).
pub fn warp(tape: &mut Tape, feature: NodeId, flow: NodeId) -> Result<NodeId> {
    tape.warp(feature, flow)
}

/// Fuse the aligned pair: conv3x3 over their channel concatenation.
pub fn fuse(
    tape: &mut Tape,
    aligned_lidar: NodeId,
    aligned_camera: NodeId,
    nodes: &SfaNodes,
) -> Result<NodeId> {
    let cat = tape.concat_last(&[aligned_lidar, aligned_camera])?;
    tape.conv2d(cat, nodes.fuse_w, nodes.fuse_b)
}

/// Full alignment pass: cost volumes from the heatmaps, flows, warps, fusion.
pub fn align_and_fuse(
    tape: &mut Tape,
    lidar: NodeId,
    camera: NodeId,
    heat_lidar: NodeId,
    heat_camera: NodeId,
    q: usize,
    nodes: &SfaNodes,
) -> Result<SfaOutput> {
    let (cost_lidar, cost_camera) = compute_cost_volumes(tape, heat_lidar, heat_camera, q)?;
    let (flow_lidar, flow_camera) = estimate_flow(tape, lidar, cost_lidar, camera, cost_camera, nodes)?;
    let aligned_lidar = warp(tape, lidar, flow_lidar)?;
    let aligned_camera = warp(tape, camera, flow_camera)?;
    let fused = fuse(tape, aligned_lidar, aligned_camera, nodes)?;
    Ok(SfaOutput {
        cost_lidar,
        cost_camera,
        flow_lidar,
        flow_camera,
        aligned_lidar,
        aligned_camera,
        fused,
    })
}
