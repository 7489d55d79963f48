//! Training objective: Gaussian ground-truth maps, penalty-reduced focal
//! loss over heatmaps, min-cost set matching, and the detection loss.
//!
//! Heatmap supervision follows the center-heatmap recipe: each box splats a
//! Gaussian on its class channel whose radius comes from the overlap-based
//! rule (min_overlap 0.1, floored at 2), overlaps combine by max, and the
//! focal loss treats gt==1 cells as positives with everything else as
//! distance-discounted negatives. Single-modality heatmap losses take the
//! fusion mask so that cells claimed by fused queries become pure-negative
//! targets.

use crate::decoder::BoxPred;
use crate::dqr::FusionMask;
use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Default weight on the classification term of cost and loss.
pub const DEFAULT_CLS_WEIGHT: f64 = 1.0;
/// Default weight on the L1 box term of cost and loss.
pub const DEFAULT_BOX_WEIGHT: f64 = 0.25;

/// One annotated box in cell units, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub cls: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

impl GtBox {
    /// (cx/X, cy/Y, w/X, l/Y, sin, cos) — the regression space.
    pub fn normalized_vec(&self, x: usize, y: usize) -> [f64; 6] {
        [
            self.cx / x as f64,
            self.cy / y as f64,
            self.w / x as f64,
            self.l / y as f64,
            self.theta.sin(),
            self.theta.cos(),
        ]
    }
}

/// Ground-truth heatmap: exactly 1.0 at annotated centers, max of the
/// per-box Gaussians elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GtHeatmap {
    data: Tensor,
}

impl GtHeatmap {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Overlap-based Gaussian radius: the smallest of the three quadratic-rule
/// radii guaranteeing IoU >= `min_overlap` for corner shifts up to r.
pub fn gaussian_radius(w: f64, l: f64, min_overlap: f64) -> f64 {
    let (width, height) = (w, l);

    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * c1).sqrt();
    let r1 = (b1 + sq1) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let sq2 = (b2 * b2 - 16.0 * c2).sqrt();
    let r2 = (b2 + sq2) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).sqrt();
    let r3 = (b3 + sq3) / (2.0 * a3);

    r1.min(r2).min(r3)
}

/// Integer splat radius: truncated overlap radius at min_overlap 0.1,
/// never below 2.
pub fn splat_radius(w: f64, l: f64) -> usize {
    let r = gaussian_radius(w, l, 0.1).trunc();
    (r.max(0.0) as usize).max(2)
}

/// Build the [X, Y, N_c] ground-truth map. Out-of-grid Gaussian tails are
/// clipped; overlapping splats combine by elementwise max.
pub fn gaussian_gt_map(boxes: &[GtBox], x: usize, y: usize, nc: usize) -> Result<GtHeatmap> {
    let mut data = Tensor::zeros(&[x, y, nc]);
    for b in boxes {
        if b.cls >= nc {
            return Err(Error::InvalidArgument(format!(
                "box class {} out of range for {nc} channels",
                b.cls
            )));
        }
        if b.cx < 0.0 || b.cy < 0.0 || b.cx >= x as f64 || b.cy >= y as f64 {
            return Err(Error::InvalidArgument(format!(
                "box center ({}, {}) outside the {x}x{y} grid",
                b.cx, b.cy
            )));
        }
        let (ci, cj) = (b.cx.floor() as usize, b.cy.floor() as usize);
        let r = splat_radius(b.w, b.l) as isize;
        let sigma = (2.0 * r as f64 + 1.0) / 6.0;
        let denom = 2.0 * sigma * sigma;
        for di in -r..=r {
            for dj in -r..=r {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 || i >= x as isize || j >= y as isize {
                    continue;
                }
                let g = (-((di * di + dj * dj) as f64) / denom).exp();
                let cur = data.at3(i as usize, j as usize, b.cls);
                if g > cur {
                    data.set3(i as usize, j as usize, b.cls, g);
                }
            }
        }
        data.set3(ci, cj, b.cls, 1.0); // center is exact, not exp(-0)=1 by luck
    }
    Ok(GtHeatmap { data })
}

/// Penalty-reduced focal loss, alpha=2 / beta=4, normalized by the number
/// of gt==1 cells (at least 1). A mask multiplies gt first, so masked
/// peaks turn into pure-negative targets and leave the normalizer.
///
/// Rejects predictions containing exact 0 or 1 (log-domain violation).
pub fn gaussian_focal_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &GtHeatmap,
    mask: Option<&FusionMask>,
) -> Result<NodeId> {
    let shape = tape.value(pred).shape().to_vec();
    gt.data.require_shape(&shape, "focal gt map")?;
    if tape.value(pred).data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Numerical(
            "focal loss needs predictions strictly inside (0,1)".into(),
        ));
    }
    let nc = shape[2];
    let effective = match mask {
        Some(m) => {
            let b = m.broadcast(nc);
            b.require_shape(&shape, "broadcast fusion mask")?;
            let mut t = gt.data.clone();
            for (v, w) in t.data_mut().iter_mut().zip(b.data()) {
                *v *= w;
            }
            t
        }
        None => gt.data.clone(),
    };
    let mut peaks = 0usize;
    let mut pos_w = Tensor::zeros(&shape);
    let mut neg_w = Tensor::zeros(&shape);
    for (idx, &g) in effective.data().iter().enumerate() {
        if g == 1.0 {
            peaks += 1;
            pos_w.data_mut()[idx] = 1.0;
        } else {
            let d = 1.0 - g;
            neg_w.data_mut()[idx] = d * d * d * d;
        }
    }
    let norm = peaks.max(1) as f64;

    let pos_w = tape.constant(pos_w);
    let neg_w = tape.constant(neg_w);
    let ln_p = tape.ln(pred);
    let one_minus_p = {
        let n = tape.mul_scalar(pred, -1.0);
        tape.add_scalar(n, 1.0)
    };
    let ln_1mp = tape.ln(one_minus_p);
    let pos_sq = tape.mul(one_minus_p, one_minus_p)?;
    let pos_term = {
        let t = tape.mul(pos_sq, ln_p)?;
        tape.mul(t, pos_w)?
    };
    let neg_sq = tape.mul(pred, pred)?;
    let neg_term = {
        let t = tape.mul(neg_sq, ln_1mp)?;
        tape.mul(t, neg_w)?
    };
    let total = {
        let s = tape.add(pos_term, neg_term)?;
        tape.sum_all(s)
    };
    Ok(tape.mul_scalar(total, -1.0 / norm))
}

/// Weights for the matching cost and detection loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: DEFAULT_CLS_WEIGHT,
            l1: DEFAULT_BOX_WEIGHT,
        }
    }
}

/// Pairwise cost: cls_weight * (1 - prob of the GT class) plus
/// l1_weight * L1 distance in the normalized regression space.
pub fn matching_cost(
    pred: &BoxPred,
    gt: &GtBox,
    x: usize,
    y: usize,
    weights: MatchWeights,
) -> f64 {
    let probs = pred.class_probs();
    let p_cls = probs[gt.cls];
    let pv = [
        pred.center.0 / x as f64,
        pred.center.1 / y as f64,
        pred.size.0 / x as f64,
        pred.size.1 / y as f64,
        pred.heading.0,
        pred.heading.1,
    ];
    let gv = gt.normalized_vec(x, y);
    let l1: f64 = pv.iter().zip(&gv).map(|(a, b)| (a - b).abs()).sum();
    weights.cls * (1.0 - p_cls) + weights.l1 * l1
}

/// Full [P, G] cost matrix for matching.
pub fn matching_cost_matrix(
    preds: &[BoxPred],
    gts: &[GtBox],
    x: usize,
    y: usize,
    weights: MatchWeights,
) -> Tensor {
    Tensor::from_fn(&[preds.len(), gts.len()], |idx| {
        let (p, g) = (idx / gts.len(), idx % gts.len());
        matching_cost(&preds[p], &gts[g], x, y, weights)
    })
}

/// Min-cost pairing. `pairs` is sorted ascending by prediction index;
/// unmatched predictions are implicitly background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn empty() -> Assignment {
        Assignment { pairs: Vec::new() }
    }

    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let g = cost.shape()[1];
        self.pairs.iter().map(|&(p, gt)| cost.data()[p * g + gt]).sum()
    }
}

/// Square assignment via the shortest-augmenting-path algorithm with
/// potentials. Returns col-of-row. O(n^3).
fn square_assignment(a: &[Vec<f64>], n: usize) -> Vec<usize> {
    // 1-indexed internals; p[j] = row matched to column j.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum total cost of matching min(P,G) pairs, with `forced` pairs fixed
/// and their rows/columns removed from the residual problem.
fn min_cost_with_forced(cost: &Tensor, forced: &[(usize, usize)]) -> f64 {
    let (p, g) = (cost.shape()[0], cost.shape()[1]);
    let mut fixed = 0.0;
    let mut row_used = vec![false; p];
    let mut col_used = vec![false; g];
    for &(r, c) in forced {
        fixed += cost.data()[r * g + c];
        row_used[r] = true;
        col_used[c] = true;
    }
    let rows: Vec<usize> = (0..p).filter(|&r| !row_used[r]).collect();
    let cols: Vec<usize> = (0..g).filter(|&c| !col_used[c]).collect();
    let want = p.min(g) - forced.len();
    if want == 0 {
        return fixed;
    }
    // Pad to square with zeros: every pad row/col absorbs one partner at a
    // constant price, so the real sub-matching stays min-cost.
    let n = rows.len().max(cols.len());
    let mut a = vec![vec![0.0; n]; n];
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            a[ri][ci] = cost.data()[r * g + c];
        }
    }
    let row_to_col = square_assignment(&a, n);
    let mut total = fixed;
    for ri in 0..rows.len() {
        total += a[ri][row_to_col[ri]]; // pad cells are zero
    }
    total
}

/// Min-cost rectangular matching of min(P,G) pairs. Among co-optimal
/// assignments, returns the lexicographically smallest sorted pair list,
/// found by greedily forcing the smallest (p, g) pair that still permits an
/// optimal completion.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    cost.require_rank(2, "matching cost matrix")?;
    if !cost.is_finite() {
        return Err(Error::Numerical("matching cost matrix not finite".into()));
    }
    let (p, g) = (cost.shape()[0], cost.shape()[1]);
    let want = p.min(g);
    if want == 0 {
        return Ok(Assignment::empty());
    }
    let best = min_cost_with_forced(cost, &[]);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut forced: Vec<(usize, usize)> = Vec::with_capacity(want);
    let (mut from_p, mut from_g) = (0usize, 0usize);
    while forced.len() < want {
        let mut advanced = false;
        'scan: for pi in from_p..p {
            if forced.iter().any(|&(fp, _)| fp == pi) {
                continue;
            }
            let g_start = if pi == from_p { from_g } else { 0 };
            for gi in g_start..g {
                if forced.iter().any(|&(_, fg)| fg == gi) {
                    continue;
                }
                forced.push((pi, gi));
                if min_cost_with_forced(cost, &forced) <= best + tol {
                    from_p = pi;
                    from_g = gi + 1;
                    advanced = true;
                    break 'scan;
                }
                forced.pop();
            }
        }
        if !advanced {
            // Cannot happen for finite costs: some completion always exists.
            return Err(Error::Numerical(
                "matching failed to complete an optimal assignment".into(),
            ));
        }
    }
    forced.sort_unstable();
    Ok(Assignment { pairs: forced })
}

/// Detection loss: gamma=2 softmax focal classification over every
/// prediction (unmatched rows target the background channel, the last one)
/// plus L1 regression over matched pairs in normalized box space. Terms are
/// averaged over predictions / matched pairs respectively, then combined as
/// cls_weight * L_cls + l1_weight * L_box.
pub fn detection_loss(
    tape: &mut Tape,
    class_logits: Option<NodeId>,
    loss_vec: Option<NodeId>,
    gts: &[GtBox],
    assignment: &Assignment,
    x: usize,
    y: usize,
    weights: MatchWeights,
) -> Result<NodeId> {
    let (class_logits, loss_vec) = match (class_logits, loss_vec) {
        (Some(c), Some(v)) => (c, v),
        _ => {
            if assignment.pairs.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            return Err(Error::InvalidArgument(
                "assignment refers to predictions but none were given".into(),
            ));
        }
    };
    let shape = tape.value(class_logits).shape().to_vec();
    let (n_pred, nc1) = (shape[0], shape[1]);
    let background = nc1 - 1;
    tape.value(loss_vec).require_shape(&[n_pred, 6], "prediction loss vectors")?;
    let mut gt_of_pred = vec![background; n_pred];
    let mut seen_p = vec![false; n_pred];
    let mut seen_g = vec![false; gts.len()];
    for &(pi, gi) in &assignment.pairs {
        if pi >= n_pred || gi >= gts.len() || seen_p[pi] || seen_g[gi] {
            return Err(Error::InvalidArgument(format!(
                "bad assignment pair ({pi}, {gi})"
            )));
        }
        seen_p[pi] = true;
        seen_g[gi] = true;
        gt_of_pred[pi] = gts[gi].cls;
    }

    // Classification: -(1 - p_t)^2 ln p_t averaged over predictions.
    let probs = tape.softmax_last(class_logits)?;
    let one_hot = Tensor::from_fn(&[n_pred, nc1], |idx| {
        if idx % nc1 == gt_of_pred[idx / nc1] {
            1.0
        } else {
            0.0
        }
    });
    let one_hot = tape.constant(one_hot);
    let picked = tape.mul(probs, one_hot)?;
    let p_t = tape.sum_last(picked)?;
    let ln_pt = tape.ln(p_t);
    let one_minus = {
        let n = tape.mul_scalar(p_t, -1.0);
        tape.add_scalar(n, 1.0)
    };
    let focal_w = tape.mul(one_minus, one_minus)?;
    let cls_terms = tape.mul(focal_w, ln_pt)?;
    let cls_sum = tape.sum_all(cls_terms);
    let l_cls = tape.mul_scalar(cls_sum, -1.0 / n_pred.max(1) as f64);

    // Regression: mean over matched pairs of the 6-component L1.
    let l_box = if assignment.pairs.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(pi, _)| pi).collect();
        let picked = tape.gather_rows(loss_vec, &rows)?;
        let targets = Tensor::from_fn(&[rows.len(), 6], |idx| {
            let (r, c) = (idx / 6, idx % 6);
            gts[assignment.pairs[r].1].normalized_vec(x, y)[c]
        });
        let targets = tape.constant(targets);
        let diff = tape.sub(picked, targets)?;
        let ad = tape.abs(diff);
        let s = tape.sum_all(ad);
        tape.mul_scalar(s, 1.0 / assignment.pairs.len() as f64)
    };

    let l_cls = tape.mul_scalar(l_cls, weights.cls);
    let l_box = tape.mul_scalar(l_box, weights.l1);
    tape.add(l_cls, l_box)
}

/// Total loss: plain sum of the detection loss and the three heatmap losses.
pub fn total_loss(
    tape: &mut Tape,
    l_det: NodeId,
    l_fused: NodeId,
    l_lidar: NodeId,
    l_camera: NodeId,
) -> Result<NodeId> {
    let a = tape.add(l_det, l_fused)?;
    let b = tape.add(a, l_lidar)?;
    tape.add(b, l_camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqr::Source;
    use crate::numerics::gradcheck::GradCheck;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;

    fn mk_box(cls: usize, cx: f64, cy: f64, w: f64, l: f64, theta: f64) -> GtBox {
        GtBox {
            cls,
            cx,
            cy,
            w,
            l,
            theta,
        }
    }

    fn mk_pred(cx: f64, cy: f64, w: f64, l: f64, theta: f64, logits: Vec<f64>) -> BoxPred {
        BoxPred {
            center: (cx, cy),
            size: (w, l),
            heading: (theta.sin(), theta.cos()),
            class_logits: logits,
            source: Source::Fused,
            query_pos: (0, 0),
        }
    }

    #[test]
    fn gt_map_center_is_exactly_one() {
        let b = mk_box(1, 7.3, 9.8, 2.0, 4.0, 0.3);
        let map = gaussian_gt_map(&[b], 16, 16, 3).unwrap();
        assert_eq!(map.data().at3(7, 9, 1), 1.0);
        assert_eq!(map.data().at3(7, 9, 0), 0.0);
    }

    #[test]
    fn gt_map_empty_boxes_all_zero() {
        let map = gaussian_gt_map(&[], 8, 8, 2).unwrap();
        assert!(map.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gt_map_tail_matches_direct_gaussian() {
        // Box small enough that the floor kicks in: r = 2, sigma = 5/6.
        let b = mk_box(0, 8.0, 8.0, 1.0, 1.0, 0.0);
        assert_eq!(splat_radius(1.0, 1.0), 2);
        let map = gaussian_gt_map(&[b], 16, 16, 1).unwrap();
        let sigma: f64 = 5.0 / 6.0;
        let expect = (-4.0 / (2.0 * sigma * sigma)).exp();
        assert!((map.data().at3(10, 8, 0) - expect).abs() < 1e-12);
        assert!((map.data().at3(8, 6, 0) - expect).abs() < 1e-12);
        // Off-grid tails clip silently.
        let edge = mk_box(0, 0.4, 0.4, 1.0, 1.0, 0.0);
        gaussian_gt_map(&[edge], 16, 16, 1).unwrap();
    }

    #[test]
    fn gt_map_overlaps_combine_by_max() {
        let a = mk_box(0, 6.0, 6.0, 1.0, 1.0, 0.0);
        let b = mk_box(0, 8.0, 6.0, 1.0, 1.0, 0.0);
        let both = gaussian_gt_map(&[a, b], 16, 16, 1).unwrap();
        let ma = gaussian_gt_map(&[a], 16, 16, 1).unwrap();
        let mb = gaussian_gt_map(&[b], 16, 16, 1).unwrap();
        for i in 0..both.data().numel() {
            let want = ma.data().data()[i].max(mb.data().data()[i]);
            assert_eq!(both.data().data()[i], want);
        }
    }

    #[test]
    fn gt_map_rejects_bad_boxes() {
        assert!(gaussian_gt_map(&[mk_box(3, 4.0, 4.0, 1.0, 1.0, 0.0)], 8, 8, 3).is_err());
        assert!(gaussian_gt_map(&[mk_box(0, 9.0, 4.0, 1.0, 1.0, 0.0)], 8, 8, 3).is_err());
    }

    #[test]
    fn radius_rule_matches_independent_quadratics() {
        // Solve the three constraint quadratics directly for one size.
        let (w, h, ov) = (10.0f64, 20.0f64, 0.1f64);
        // inside-shift: r^2 - (w+h) r + wh(1-ov)/(1+ov) >= 0, small root ignored
        let r1 = {
            let b = w + h;
            let c = w * h * (1.0 - ov) / (1.0 + ov);
            (b + (b * b - 4.0 * c).sqrt()) / 2.0
        };
        let r2 = {
            let b = 2.0 * (w + h);
            let c = (1.0 - ov) * w * h;
            (b + (b * b - 16.0 * c).sqrt()) / 2.0
        };
        let r3 = {
            let a = 4.0 * ov;
            let b = -2.0 * ov * (w + h);
            let c = (ov - 1.0) * w * h;
            (b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
        };
        let want = r1.min(r2).min(r3);
        assert!((gaussian_radius(10.0, 20.0, 0.1) - want).abs() < 1e-12);
        assert_eq!(splat_radius(10.0, 20.0), want.trunc() as usize);
        // Tiny boxes hit the floor, bigger boxes grow.
        assert_eq!(splat_radius(0.5, 0.5), 2);
        assert!(splat_radius(20.0, 40.0) > splat_radius(4.0, 8.0));
    }

    #[test]
    fn focal_single_cell_half_prediction() {
        let gt = GtHeatmap {
            data: Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
        };
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap());
        let loss = gaussian_focal_loss(&mut tape, pred, &gt, None).unwrap();
        let want = 0.25 * std::f64::consts::LN_2;
        assert!((tape.value(loss).item() - want).abs() < 1e-15);
    }

    #[test]
    fn focal_perfect_prediction_limit() {
        let b = mk_box(0, 4.0, 4.0, 1.0, 1.0, 0.0);
        let gt = gaussian_gt_map(&[b], 8, 8, 1).unwrap();
        let eps = 1e-7;
        let near = Tensor::from_fn(&[8, 8, 1], |idx| {
            if gt.data().data()[idx] == 1.0 {
                1.0 - eps
            } else {
                eps
            }
        });
        let mut tape = Tape::new();
        let pred = tape.constant(near);
        let loss = gaussian_focal_loss(&mut tape, pred, &gt, None).unwrap();
        assert!(tape.value(loss).item() < 1e-4);
    }

    #[test]
    fn focal_rejects_exact_zero_or_one() {
        let gt = GtHeatmap {
            data: Tensor::zeros(&[2, 2, 1]),
        };
        let mut tape = Tape::new();
        let bad0 = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.5, 0.0, 0.5, 0.5]).unwrap());
        assert!(matches!(
            gaussian_focal_loss(&mut tape, bad0, &gt, None),
            Err(Error::Numerical(_))
        ));
        let bad1 = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.5, 1.0, 0.5, 0.5]).unwrap());
        assert!(gaussian_focal_loss(&mut tape, bad1, &gt, None).is_err());
    }

    #[test]
    fn focal_all_ones_mask_is_bitwise_noop() {
        let mut rng = Rng::new(3);
        let boxes = [mk_box(0, 5.0, 5.0, 2.0, 3.0, 0.1), mk_box(1, 2.0, 7.0, 1.0, 1.0, 0.9)];
        let gt = gaussian_gt_map(&boxes, 10, 10, 2).unwrap();
        let pred_t = Tensor::from_fn(&[10, 10, 2], |_| 0.001 + 0.998 * rng.uniform());
        let mask = FusionMask::new(Tensor::full(&[10, 10], 1.0)).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(pred_t);
        let plain = gaussian_focal_loss(&mut tape, pred, &gt, None).unwrap();
        let masked = gaussian_focal_loss(&mut tape, pred, &gt, Some(&mask)).unwrap();
        assert_eq!(
            tape.value(plain).item().to_bits(),
            tape.value(masked).item().to_bits()
        );
    }

    #[test]
    fn focal_masked_peak_becomes_pure_negative() {
        let b = mk_box(0, 4.0, 4.0, 1.0, 1.0, 0.0);
        let gt = gaussian_gt_map(&[b], 8, 8, 1).unwrap();
        let mut mask_t = Tensor::full(&[8, 8], 1.0);
        mask_t.set2(4, 4, 0.0);
        // Zero out the full splat so masked-call and hand-zeroed-call agree.
        let mut zeroed = gt.data().clone();
        for i in 0..8 {
            for j in 0..8 {
                if mask_t.at2(i, j) == 0.0 {
                    zeroed.set3(i, j, 0, 0.0);
                }
            }
        }
        let mask = FusionMask::new(mask_t).unwrap();
        let hand = GtHeatmap { data: zeroed };
        let mut rng = Rng::new(9);
        let pred_t = Tensor::from_fn(&[8, 8, 1], |_| 0.001 + 0.998 * rng.uniform());
        let mut tape = Tape::new();
        let pred = tape.constant(pred_t);
        let masked = gaussian_focal_loss(&mut tape, pred, &gt, Some(&mask)).unwrap();
        let direct = gaussian_focal_loss(&mut tape, pred, &hand, None).unwrap();
        assert_eq!(
            tape.value(masked).item().to_bits(),
            tape.value(direct).item().to_bits()
        );
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let b = mk_box(0, 3.0, 3.0, 1.5, 2.0, 0.2);
        let gt = gaussian_gt_map(&[b], 6, 6, 1).unwrap();
        let mut rng = Rng::new(21);
        let pred = Tensor::from_fn(&[6, 6, 1], |_| 0.05 + 0.9 * rng.uniform());
        let check = GradCheck::default();
        let report = check
            .run(&[pred], |tape, ids| gaussian_focal_loss(tape, ids[0], &gt, None))
            .unwrap();
        assert!(report.passed(check.rel_tol), "{:?}", report.worst);
    }

    #[test]
    fn matching_cost_zero_for_exact_match() {
        let gt = mk_box(1, 5.0, 6.0, 2.0, 4.0, 0.4);
        // Logit gap big enough that softmax saturates to exactly 1.0.
        let pred = mk_pred(5.0, 6.0, 2.0, 4.0, 0.4, vec![-500.0, 0.0, -500.0, -500.0]);
        let c = matching_cost(&pred, &gt, 16, 16, MatchWeights::default());
        assert_eq!(c, 0.0);
    }

    #[test]
    fn matching_cost_prefers_higher_class_prob() {
        let gt = mk_box(0, 5.0, 6.0, 2.0, 4.0, 0.4);
        let hi = mk_pred(5.0, 6.0, 2.0, 4.0, 0.4, vec![2.1972, 0.0, 0.0, 0.0]); // ~0.9 softmax-ish
        let lo = mk_pred(5.0, 6.0, 2.0, 4.0, 0.4, vec![-2.1972, 0.0, 0.0, 0.0]);
        let w = MatchWeights::default();
        assert!(matching_cost(&hi, &gt, 16, 16, w) < matching_cost(&lo, &gt, 16, 16, w));
    }

    #[test]
    fn matching_cost_matches_independent_formula() {
        let mut rng = Rng::new(33);
        for _ in 0..20 {
            let gt = mk_box(
                rng.below(3),
                rng.uniform() * 15.0,
                rng.uniform() * 15.0,
                0.5 + rng.uniform() * 3.0,
                0.5 + rng.uniform() * 5.0,
                rng.normal(0.0, 1.0),
            );
            let pred = mk_pred(
                rng.uniform() * 15.0,
                rng.uniform() * 15.0,
                0.5 + rng.uniform() * 3.0,
                0.5 + rng.uniform() * 5.0,
                rng.normal(0.0, 1.0),
                (0..4).map(|_| rng.normal(0.0, 1.0)).collect(),
            );
            let got = matching_cost(&pred, &gt, 16, 16, MatchWeights::default());
            // Recompute with separate arithmetic.
            let exps: Vec<f64> = pred.class_logits.iter().map(|l| l.exp()).collect();
            let p = exps[gt.cls] / exps.iter().sum::<f64>();
            let mut l1 = (pred.center.0 - gt.cx).abs() / 16.0
                + (pred.center.1 - gt.cy).abs() / 16.0
                + (pred.size.0 - gt.w).abs() / 16.0
                + (pred.size.1 - gt.l).abs() / 16.0;
            l1 += (pred.heading.0 - gt.theta.sin()).abs();
            l1 += (pred.heading.1 - gt.theta.cos()).abs();
            let want = 1.0 * (1.0 - p) + 0.25 * l1;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn hungarian_identity_and_small_cases() {
        let diag = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 0.0 } else { 1.0 });
        let a = hungarian_match(&diag).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost(&diag), 0.0);

        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&m), 2.0);

        let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(hungarian_match(&empty).unwrap().pairs.is_empty());
    }

    #[test]
    fn hungarian_ties_resolve_lexicographically() {
        let flat = Tensor::full(&[2, 3], 1.0);
        let a = hungarian_match(&flat).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        // A tie where lexicographic order disagrees with greedy row scanning:
        // both diagonals cost 2.
        let m = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(hungarian_match(&m).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    /// Exhaustive matching over injective maps of the smaller side.
    fn brute_force(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
        let (p, g) = (cost.shape()[0], cost.shape()[1]);
        let want = p.min(g);
        let mut best = (f64::INFINITY, Vec::new());
        fn rec(
            cost: &Tensor,
            p: usize,
            g: usize,
            want: usize,
            next_p: usize,
            used_g: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            total: f64,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if cur.len() == want {
                let better = total < best.0 - 1e-12
                    || (total < best.0 + 1e-12 && cur.as_slice() < best.1.as_slice());
                if better {
                    *best = (total.min(best.0), cur.clone());
                }
                return;
            }
            if next_p >= p || p - next_p < want - cur.len() {
                return;
            }
            // Either skip this prediction (only legal if enough rows remain)
            rec(cost, p, g, want, next_p + 1, used_g, cur, total, best);
            for gi in 0..g {
                if used_g[gi] {
                    continue;
                }
                used_g[gi] = true;
                cur.push((next_p, gi));
                rec(
                    cost,
                    p,
                    g,
                    want,
                    next_p + 1,
                    used_g,
                    cur,
                    total + cost.data()[next_p * g + gi],
                    best,
                );
                cur.pop();
                used_g[gi] = false;
            }
        }
        let mut used = vec![false; g];
        let mut cur = Vec::new();
        rec(cost, p, g, want, 0, &mut used, &mut cur, 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = Rng::new(77);
        for trial in 0..100 {
            let p = 1 + (rng.below(8)).min(7);
            let g = 1 + (rng.below(8)).min(7);
            let cost = Tensor::from_fn(&[p, g], |_| rng.uniform() * 10.0);
            let got = hungarian_match(&cost).unwrap();
            let (best_total, best_pairs) = brute_force(&cost);
            let got_total = got.total_cost(&cost);
            assert!(
                (got_total - best_total).abs() < 1e-9,
                "trial {trial}: {got_total} vs {best_total}"
            );
            assert_eq!(got.pairs, best_pairs, "trial {trial} ({p}x{g})");
        }
    }

    #[test]
    fn detection_loss_empty_is_zero() {
        let mut tape = Tape::new();
        let l = detection_loss(
            &mut tape,
            None,
            None,
            &[],
            &Assignment::empty(),
            8,
            8,
            MatchWeights::default(),
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn detection_loss_exact_box_has_zero_regression() {
        let gt = mk_box(0, 4.0, 4.0, 2.0, 2.0, 0.0);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![8.0, -8.0, -8.0]).unwrap());
        let lv = Tensor::new(
            vec![1, 6],
            gt.normalized_vec(8, 8).to_vec(),
        )
        .unwrap();
        let lv = tape.constant(lv);
        let pairs = Assignment {
            pairs: vec![(0, 0)],
        };
        let with_l1 = detection_loss(
            &mut tape,
            Some(logits),
            Some(lv),
            &[gt],
            &pairs,
            8,
            8,
            MatchWeights::default(),
        )
        .unwrap();
        let no_l1 = detection_loss(
            &mut tape,
            Some(logits),
            Some(lv),
            &[gt],
            &pairs,
            8,
            8,
            MatchWeights {
                cls: 1.0,
                l1: 0.0,
            },
        )
        .unwrap();
        assert_eq!(
            tape.value(with_l1).item(),
            tape.value(no_l1).item()
        );
    }

    #[test]
    fn detection_loss_matches_hand_computation() {
        // Two predictions, one GT: pred 0 matched to gt 0, pred 1 background.
        let gt = mk_box(0, 4.0, 4.0, 2.0, 2.0, 0.0);
        let mut tape = Tape::new();
        // Uniform logits: every class prob = 1/3.
        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        // Prediction vector off by +0.1 in normalized cx only.
        let mut v = gt.normalized_vec(8, 8).to_vec();
        v[0] += 0.1;
        let mut rows = v.clone();
        rows.extend_from_slice(&[0.0; 6]);
        let lv = tape.constant(Tensor::new(vec![2, 6], rows).unwrap());
        let a = Assignment {
            pairs: vec![(0, 0)],
        };
        let l = detection_loss(
            &mut tape,
            Some(logits),
            Some(lv),
            &[gt],
            &a,
            8,
            8,
            MatchWeights::default(),
        )
        .unwrap();
        let p = 1.0f64 / 3.0;
        let focal = -(1.0 - p) * (1.0 - p) * p.ln(); // same for both rows
        let want = 1.0 * focal + 0.25 * 0.1;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_rejects_bad_pairs() {
        let gt = mk_box(0, 4.0, 4.0, 2.0, 2.0, 0.0);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        let lv = tape.constant(Tensor::zeros(&[2, 6]));
        for pairs in [vec![(5usize, 0usize)], vec![(0, 3)], vec![(0, 0), (0, 0)]] {
            let a = Assignment { pairs };
            assert!(detection_loss(
                &mut tape,
                Some(logits),
                Some(lv),
                &[gt],
                &a,
                8,
                8,
                MatchWeights::default()
            )
            .is_err());
        }
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        let gts = [mk_box(0, 4.0, 4.0, 2.0, 2.0, 0.3), mk_box(1, 2.0, 6.0, 1.0, 3.0, -0.5)];
        let a = Assignment {
            pairs: vec![(0, 1), (2, 0)],
        };
        let mut rng = Rng::new(41);
        let logits = Tensor::from_fn(&[3, 3], |_| rng.normal(0.0, 1.0));
        let lv = Tensor::from_fn(&[3, 6], |_| rng.normal(0.0, 0.5));
        let check = GradCheck::default();
        let report = check
            .run(&[logits, lv], |tape, ids| {
                detection_loss(
                    tape,
                    Some(ids[0]),
                    Some(ids[1]),
                    &gts,
                    &a,
                    8,
                    8,
                    MatchWeights::default(),
                )
            })
            .unwrap();
        assert!(report.passed(check.rel_tol), "{:?}", report.worst);
    }

    #[test]
    fn total_loss_sums_terms() {
        let mut tape = Tape::new();
        let terms: Vec<NodeId> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| tape.constant(Tensor::scalar(v)))
            .collect();
        let t = total_loss(&mut tape, terms[0], terms[1], terms[2], terms[3]).unwrap();
        assert_eq!(tape.value(t).item(), 10.0);
    }

    #[test]
    fn total_loss_gradient_is_sum_of_term_gradients() {
        let mut rng = Rng::new(55);
        let x = Tensor::from_fn(&[4], |_| 0.2 + rng.uniform());
        let check = GradCheck::default();
        let report = check
            .run(&[x], |tape, ids| {
                let a = tape.sum_all(ids[0]);
                let sq = tape.mul(ids[0], ids[0])?;
                let b = tape.sum_all(sq);
                let e = tape.exp(ids[0]);
                let c = tape.sum_all(e);
                let ln = tape.ln(ids[0]);
                let d = tape.sum_all(ln);
                total_loss(tape, a, b, c, d)
            })
            .unwrap();
        assert!(report.passed(check.rel_tol), "{:?}", report.worst);
    }

    proptest! {
        #[test]
        fn prop_hungarian_beats_random_valid_assignments(
            seed in 0u64..500,
            p in 1usize..6,
            g in 1usize..6,
        ) {
            let mut rng = Rng::new(seed);
            let cost = Tensor::from_fn(&[p, g], |_| rng.uniform() * 5.0);
            let best = hungarian_match(&cost).unwrap().total_cost(&cost);
            // Sample a few arbitrary valid assignments; none may beat it.
            for _ in 0..10 {
                let mut cols: Vec<usize> = (0..g).collect();
                // Fisher-Yates with the kit RNG.
                for i in (1..g).rev() {
                    let j = rng.below(i + 1);
                    cols.swap(i, j);
                }
                let mut rows: Vec<usize> = (0..p).collect();
                for i in (1..p).rev() {
                    let j = rng.below(i + 1);
                    rows.swap(i, j);
                }
                let total: f64 = rows
                    .iter()
                    .zip(&cols)
                    .take(p.min(g))
                    .map(|(&r, &c)| cost.data()[r * g + c])
                    .sum();
                prop_assert!(best <= total + 1e-9);
            }
        }

        #[test]
        fn prop_focal_loss_non_negative(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let boxes = [mk_box(rng.below(2),
                               1.0 + rng.uniform() * 6.0,
                               1.0 + rng.uniform() * 6.0,
                               0.5 + rng.uniform() * 2.0,
                               0.5 + rng.uniform() * 2.0,
                               rng.normal(0.0, 1.0))];
            let gt = gaussian_gt_map(&boxes, 8, 8, 2).unwrap();
            let pred_t = Tensor::from_fn(&[8, 8, 2], |_| 0.001 + 0.998 * rng.uniform());
            let mut tape = Tape::new();
            let pred = tape.constant(pred_t);
            let loss = gaussian_focal_loss(&mut tape, pred, &gt, None).unwrap();
            prop_assert!(tape.value(loss).item() >= 0.0);
        }
    }
}
