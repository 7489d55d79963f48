//! Set-prediction decoder over the unified queries.
//!
//! Each layer runs multi-head self-attention among the queries, cross-
//! attention against every fused-map cell (cell feature + its positional
//! encoding serves as both key and value), and a two-layer FFN, all with
//! residual connections and no normalization layers. Two linear heads then
//! emit class logits (real classes plus one background channel) and six raw
//! box numbers per query.
//!
//! Raw box outputs are (dx, dy, log w, log l, sin, cos): centers are the
//! query cell plus the offset, sizes go through exp so they stay positive,
//! and the heading pair is kept raw in the loss path and renormalized only
//! when a caller extracts an angle.

use std::io::Write as _;
use std::path::Path;

use crate::dqr::{positional_encoding, QuerySet, Source};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_wq: Tensor,
    pub self_wk: Tensor,
    pub self_wv: Tensor,
    pub self_wo: Tensor,
    pub cross_wq: Tensor,
    pub cross_wk: Tensor,
    pub cross_wv: Tensor,
    pub cross_wo: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
    /// [C, N_c + 1]; the extra column is the background channel.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    /// [C, 6] -> (dx, dy, log w, log l, sin, cos).
    pub box_w: Tensor,
    pub box_b: Tensor,
    pub n_heads: usize,
}

impl DecoderParams {
    /// `dim` must divide evenly into `n_heads` heads.
    pub fn init(
        n_layers: usize,
        n_heads: usize,
        dim: usize,
        ffn_dim: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<DecoderParams> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {n_heads} heads"
            )));
        }
        let attn_std = (1.0 / dim as f64).sqrt();
        let ffn1_std = (2.0 / dim as f64).sqrt();
        let ffn2_std = (1.0 / ffn_dim as f64).sqrt();
        let mat = |r: usize, c: usize, std: f64, rng: &mut Rng| {
            Tensor::from_fn(&[r, c], |_| rng.normal(0.0, std))
        };
        let layers = (0..n_layers)
            .map(|_| DecoderLayerParams {
                self_wq: mat(dim, dim, attn_std, rng),
                self_wk: mat(dim, dim, attn_std, rng),
                self_wv: mat(dim, dim, attn_std, rng),
                self_wo: mat(dim, dim, attn_std, rng),
                cross_wq: mat(dim, dim, attn_std, rng),
                cross_wk: mat(dim, dim, attn_std, rng),
                cross_wv: mat(dim, dim, attn_std, rng),
                cross_wo: mat(dim, dim, attn_std, rng),
                ffn_w1: mat(dim, ffn_dim, ffn1_std, rng),
                ffn_b1: Tensor::zeros(&[ffn_dim]),
                ffn_w2: mat(ffn_dim, dim, ffn2_std, rng),
                ffn_b2: Tensor::zeros(&[dim]),
            })
            .collect();
        // Heading bias (0, 1): unit heading before any training.
        let mut box_b = Tensor::zeros(&[6]);
        box_b.data_mut()[5] = 1.0;
        Ok(DecoderParams {
            layers,
            cls_w: mat(dim, n_classes + 1, 0.01, rng),
            cls_b: Tensor::zeros(&[n_classes + 1]),
            box_w: mat(dim, 6, 0.01, rng),
            box_b,
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.cls_w.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.cls_w.shape()[1] - 1
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DecoderNodes {
        DecoderNodes {
            layers: self
                .layers
                .iter()
                .map(|l| DecoderLayerNodes {
                    self_wq: tape.leaf(l.self_wq.clone(), trainable),
                    self_wk: tape.leaf(l.self_wk.clone(), trainable),
                    self_wv: tape.leaf(l.self_wv.clone(), trainable),
                    self_wo: tape.leaf(l.self_wo.clone(), trainable),
                    cross_wq: tape.leaf(l.cross_wq.clone(), trainable),
                    cross_wk: tape.leaf(l.cross_wk.clone(), trainable),
                    cross_wv: tape.leaf(l.cross_wv.clone(), trainable),
                    cross_wo: tape.leaf(l.cross_wo.clone(), trainable),
                    ffn_w1: tape.leaf(l.ffn_w1.clone(), trainable),
                    ffn_b1: tape.leaf(l.ffn_b1.clone(), trainable),
                    ffn_w2: tape.leaf(l.ffn_w2.clone(), trainable),
                    ffn_b2: tape.leaf(l.ffn_b2.clone(), trainable),
                })
                .collect(),
            cls_w: tape.leaf(self.cls_w.clone(), trainable),
            cls_b: tape.leaf(self.cls_b.clone(), trainable),
            box_w: tape.leaf(self.box_w.clone(), trainable),
            box_b: tape.leaf(self.box_b.clone(), trainable),
            n_heads: self.n_heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerNodes {
    pub self_wq: NodeId,
    pub self_wk: NodeId,
    pub self_wv: NodeId,
    pub self_wo: NodeId,
    pub cross_wq: NodeId,
    pub cross_wk: NodeId,
    pub cross_wv: NodeId,
    pub cross_wo: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
}

#[derive(Debug, Clone)]
pub struct DecoderNodes {
    pub layers: Vec<DecoderLayerNodes>,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
    pub box_w: NodeId,
    pub box_b: NodeId,
    pub n_heads: usize,
}

/// One decoded box in grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPred {
    /// (cx, cy) in cell coordinates: query cell + regressed offset.
    pub center: (f64, f64),
    /// (w, l) in cells, positive by the exp mapping.
    pub size: (f64, f64),
    /// Raw (sin, cos) as regressed; see [`BoxPred::unit_heading`].
    pub heading: (f64, f64),
    /// N_c + 1 logits; the last channel is background.
    pub class_logits: Vec<f64>,
    pub source: Source,
    pub query_pos: (usize, usize),
}

impl BoxPred {
    /// Heading renormalized onto the unit circle; a vanishing raw pair
    /// falls back to (0, 1) rather than dividing by zero.
    pub fn unit_heading(&self) -> (f64, f64) {
        let (s, c) = self.heading;
        let n = (s * s + c * c).sqrt();
        if n < 1e-12 {
            (0.0, 1.0)
        } else {
            (s / n, c / n)
        }
    }

    pub fn theta(&self) -> f64 {
        let (s, c) = self.unit_heading();
        s.atan2(c)
    }

    /// Softmax over all N_c + 1 channels.
    pub fn class_probs(&self) -> Vec<f64> {
        let max = self
            .class_logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.class_logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.iter().map(|e| e / denom).collect()
    }

    /// Best REAL class (background excluded) and its probability.
    pub fn best_real_class(&self) -> (usize, f64) {
        let probs = self.class_probs();
        let nc = probs.len() - 1;
        let mut best = 0;
        for cls in 1..nc {
            if probs[cls] > probs[best] {
                best = cls;
            }
        }
        (best, probs[best])
    }
}

/// Multi-head attention with queries from `q_in` and keys/values from
/// `kv_in`. Returns the output rows and one softmax matrix per head.
fn multi_head_attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    n_heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let dim = tape.value(q_in).shape()[1];
    if dim % n_heads != 0 {
        return Err(Error::Shape(format!(
            "attention dim {dim} not divisible by {n_heads} heads"
        )));
    }
    let head_dim = dim / n_heads;
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    let mut attns = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_last(q, h * head_dim, head_dim)?;
        let kh = tape.slice_last(k, h * head_dim, head_dim)?;
        let vh = tape.slice_last(v, h * head_dim, head_dim)?;
        let kt = tape.transpose2d(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax_last(scores)?;
        attns.push(attn);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_last(&head_outs)?;
    let out = tape.matmul(cat, wo)?;
    Ok((out, attns))
}

/// Decoder forward pass artifacts. `boxes` are plain values read off the
/// tape; the node handles stay live for loss construction.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub boxes: Vec<BoxPred>,
    /// [K, N_c + 1] logits.
    pub class_logits: NodeId,
    /// [K, 6] raw head outputs (dx, dy, log w, log l, sin, cos).
    pub box_raw: NodeId,
    /// [K, 6] loss-space predictions (cx/X, cy/Y, w/X, l/Y, sin, cos).
    pub loss_vec: NodeId,
    /// Softmax matrices of every attention in evaluation order.
    pub attention: Vec<NodeId>,
}

/// Run the decoder over an assembled query set against the fused map.
pub fn decode(
    tape: &mut Tape,
    queries: &QuerySet,
    fused: NodeId,
    nodes: &DecoderNodes,
) -> Result<DecoderOutput> {
    let fshape = tape.value(fused).shape().to_vec();
    let (x, y, c) = (fshape[0], fshape[1], fshape[2]);
    let dim = tape.value(nodes.cls_w).shape()[0];
    if c != dim {
        return Err(Error::Shape(format!(
            "fused map has {c} channels, decoder expects {dim}"
        )));
    }
    if tape.value(queries.features).shape()[1] != dim {
        return Err(Error::Shape(format!(
            "query features width {} vs decoder dim {dim}",
            tape.value(queries.features).shape()[1]
        )));
    }
    let k_total = queries.len();

    // Cross-attention memory: every fused cell plus its positional encoding,
    // used as both keys and values.
    let flat = tape.reshape(fused, &[x * y, c])?;
    let mut pe = Tensor::zeros(&[x * y, c]);
    for i in 0..x {
        for j in 0..y {
            let enc = positional_encoding((i, j), c, x, y)?;
            pe.data_mut()[(i * y + j) * c..(i * y + j + 1) * c].copy_from_slice(&enc);
        }
    }
    let pe = tape.constant(pe);
    let memory = tape.add(flat, pe)?;

    let mut h = queries.features;
    let mut attention = Vec::new();
    for layer in &nodes.layers {
        let (sa, mut a) = multi_head_attention(
            tape,
            h,
            h,
            layer.self_wq,
            layer.self_wk,
            layer.self_wv,
            layer.self_wo,
            nodes.n_heads,
        )?;
        attention.append(&mut a);
        h = tape.add(h, sa)?;
        let (ca, mut a) = multi_head_attention(
            tape,
            h,
            memory,
            layer.cross_wq,
            layer.cross_wk,
            layer.cross_wv,
            layer.cross_wo,
            nodes.n_heads,
        )?;
        attention.append(&mut a);
        h = tape.add(h, ca)?;
        let f1 = tape.matmul(h, layer.ffn_w1)?;
        let f1 = tape.add_rowvec(f1, layer.ffn_b1)?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, layer.ffn_w2)?;
        let f2 = tape.add_rowvec(f2, layer.ffn_b2)?;
        h = tape.add(h, f2)?;
    }

    let class_logits = {
        let m = tape.matmul(h, nodes.cls_w)?;
        tape.add_rowvec(m, nodes.cls_b)?
    };
    let box_raw = {
        let m = tape.matmul(h, nodes.box_w)?;
        tape.add_rowvec(m, nodes.box_b)?
    };

    // Loss-space vector, built in-graph so regression stays differentiable.
    let cells = Tensor::from_fn(&[k_total, 2], |idx| {
        let q = &queries.candidates[idx / 2];
        if idx % 2 == 0 {
            q.pos.0 as f64
        } else {
            q.pos.1 as f64
        }
    });
    let cells = tape.constant(cells);
    let offsets = tape.slice_last(box_raw, 0, 2)?;
    let centers = tape.add(cells, offsets)?;
    let cx = tape.slice_last(centers, 0, 1)?;
    let cx = tape.mul_scalar(cx, 1.0 / x as f64);
    let cy = tape.slice_last(centers, 1, 1)?;
    let cy = tape.mul_scalar(cy, 1.0 / y as f64);
    let log_w = tape.slice_last(box_raw, 2, 1)?;
    let w = tape.exp(log_w);
    let w = tape.mul_scalar(w, 1.0 / x as f64);
    let log_l = tape.slice_last(box_raw, 3, 1)?;
    let l = tape.exp(log_l);
    let l = tape.mul_scalar(l, 1.0 / y as f64);
    let heading = tape.slice_last(box_raw, 4, 2)?;
    let loss_vec = tape.concat_last(&[cx, cy, w, l, heading])?;

    let nc1 = tape.value(class_logits).shape()[1];
    let mut boxes = Vec::with_capacity(k_total);
    for (r, cand) in queries.candidates.iter().enumerate() {
        let raw = &tape.value(box_raw).data()[r * 6..(r + 1) * 6];
        let logits = tape.value(class_logits).data()[r * nc1..(r + 1) * nc1].to_vec();
        boxes.push(BoxPred {
            center: (cand.pos.0 as f64 + raw[0], cand.pos.1 as f64 + raw[1]),
            size: (raw[2].exp(), raw[3].exp()),
            heading: (raw[4], raw[5]),
            class_logits: logits,
            source: cand.source,
            query_pos: cand.pos,
        });
    }
    Ok(DecoderOutput {
        boxes,
        class_logits,
        box_raw,
        loss_vec,
        attention,
    })
}

/// Dump predictions as CSV rows
/// `source,cx,cy,w,l,theta,class,confidence`.
pub fn write_boxes_csv(path: &Path, boxes: &[BoxPred]) -> Result<()> {
    let mut out = String::from("source,cx,cy,w,l,theta,class,confidence\n");
    for b in boxes {
        let (cls, conf) = b.best_real_class();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            b.source.tag(),
            b.center.0,
            b.center.1,
            b.size.0,
            b.size.1,
            b.theta(),
            cls,
            conf
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
