//! Recovery of object queries that dissolved during fusion.
//!
//! A box visible to only one sensor can vanish from the fused heatmap while
//! still peaking in its own modality's heatmap. Query selection therefore
//! runs three times: top-k peaks of the fused heatmap first, then peaks of
//! each single-modality heatmap with the already-claimed cells masked out,
//! so single-modality evidence is rescued without duplicating fused picks.
//!
//! All selection here is discrete and deterministic; gradients flow only
//! through the feature values the chosen cells read.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Which map a query was selected from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Fused,
    Lidar,
    Camera,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Fused => "F",
            Source::Lidar => "L",
            Source::Camera => "C",
        }
    }
}

/// One selected heatmap cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryCandidate {
    /// Grid cell (row i, column j).
    pub pos: (usize, usize),
    pub cls: usize,
    /// Heatmap value at selection time.
    pub score: f64,
    pub source: Source,
}

/// Binary grid, zero exactly at cells claimed by fused queries.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMask {
    data: Tensor,
}

impl FusionMask {
    pub fn new(data: Tensor) -> Result<FusionMask> {
        data.require_rank(2, "fusion mask")?;
        for &v in data.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "fusion mask value {v} is not binary"
                )));
            }
        }
        Ok(FusionMask { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.data.at2(i, j) == 0.0
    }

    pub fn zero_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// The mask repeated across `nc` class channels, for heatmap-shaped
    /// elementwise products.
    pub fn broadcast(&self, nc: usize) -> Tensor {
        let (x, y) = (self.data.shape()[0], self.data.shape()[1]);
        Tensor::from_fn(&[x, y, nc], |idx| self.data.data()[idx / nc])
    }
}

/// Ordering contract shared by every selection: score descending, ties by
/// (class, i, j) ascending. Scores are finite by heatmap construction.
fn rank(a: &QueryCandidate, b: &QueryCandidate) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("heatmap scores are finite")
        .then(a.cls.cmp(&b.cls))
        .then(a.pos.0.cmp(&b.pos.0))
        .then(a.pos.1.cmp(&b.pos.1))
}

/// True when cell (i,j) of class channel `cls` is maximal over its
/// window x window neighborhood (window truncated at borders, ties count).
fn is_local_peak(h: &Tensor, i: usize, j: usize, cls: usize, window: usize) -> bool {
    let (x, y) = (h.shape()[0], h.shape()[1]);
    let r = (window / 2) as isize;
    let v = h.at3(i, j, cls);
    for di in -r..=r {
        let ni = i as isize + di;
        if ni < 0 || ni >= x as isize {
            continue;
        }
        for dj in -r..=r {
            let nj = j as isize + dj;
            if nj < 0 || nj >= y as isize {
                continue;
            }
            if h.at3(ni as usize, nj as usize, cls) > v {
                return false;
            }
        }
    }
    true
}

/// Exactly `k` candidates from a heatmap. Local maxima have membership
/// priority; the best non-peak cells fill remaining slots only when peaks
/// run short. The returned list is then ordered by score descending, so a
/// high-scoring fill may precede a weak peak.
pub fn select_topk_peaks(
    h: &Tensor,
    k: usize,
    window: usize,
    source: Source,
) -> Result<Vec<QueryCandidate>> {
    h.require_rank(3, "peak selection")?;
    if k < 1 {
        return Err(Error::InvalidArgument("peak selection needs k >= 1".into()));
    }
    if window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "peak window {window} must be odd"
        )));
    }
    let (x, y, nc) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if k > x * y * nc {
        return Err(Error::InvalidArgument(format!(
            "k={k} exceeds cell count {}",
            x * y * nc
        )));
    }
    let mut peaks = Vec::new();
    let mut rest = Vec::new();
    for cls in 0..nc {
        for i in 0..x {
            for j in 0..y {
                let cand = QueryCandidate {
                    pos: (i, j),
                    cls,
                    score: h.at3(i, j, cls),
                    source,
                };
                if is_local_peak(h, i, j, cls, window) {
                    peaks.push(cand);
                } else {
                    rest.push(cand);
                }
            }
        }
    }
    peaks.sort_by(rank);
    rest.sort_by(rank);
    peaks.extend(rest);
    peaks.truncate(k);
    peaks.sort_by(rank);
    Ok(peaks)
}

/// All-ones grid with zeros at the distinct spatial positions of `claimed`.
pub fn build_fusion_mask(claimed: &[QueryCandidate], x: usize, y: usize) -> Result<FusionMask> {
    let mut data = Tensor::full(&[x, y], 1.0);
    for c in claimed {
        let (i, j) = c.pos;
        if i >= x || j >= y {
            return Err(Error::InvalidArgument(format!(
                "candidate at ({i},{j}) outside {x}x{y} grid"
            )));
        }
        data.set2(i, j, 0.0);
    }
    FusionMask::new(data)
}

/// Result of masked selection on one single-modality heatmap.
#[derive(Debug, Clone)]
pub struct RecoveredQueries {
    pub candidates: Vec<QueryCandidate>,
    /// Set when eligible (unmasked) cells ran out and slots were filled from
    /// masked cells at score zero.
    pub degenerate: bool,
}

/// Top-k peaks of `h` with masked cells zeroed and excluded. Masked cells
/// re-enter only to pad the count when everything eligible is exhausted;
/// such fills carry score 0 and flip the degenerate flag.
pub fn recover_modal_queries(
    h: &Tensor,
    mask: &FusionMask,
    k: usize,
    window: usize,
    source: Source,
) -> Result<RecoveredQueries> {
    h.require_rank(3, "masked peak selection")?;
    let (x, y, nc) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if mask.data().shape() != [x, y] {
        return Err(Error::Shape(format!(
            "mask {:?} vs heatmap {:?}",
            mask.data().shape(),
            h.shape()
        )));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("peak selection needs k >= 1".into()));
    }
    if k > x * y * nc {
        return Err(Error::InvalidArgument(format!(
            "k={k} exceeds cell count {}",
            x * y * nc
        )));
    }
    let zeroed = Tensor::from_fn(&[x, y, nc], |idx| {
        let cell = idx / nc;
        h.data()[idx] * mask.data().data()[cell]
    });
    let mut eligible_peaks = Vec::new();
    let mut eligible_rest = Vec::new();
    let mut masked = Vec::new();
    for cls in 0..nc {
        for i in 0..x {
            for j in 0..y {
                let cand = QueryCandidate {
                    pos: (i, j),
                    cls,
                    score: zeroed.at3(i, j, cls),
                    source,
                };
                if mask.is_masked(i, j) {
                    masked.push(cand);
                } else if is_local_peak(&zeroed, i, j, cls, window) {
                    eligible_peaks.push(cand);
                } else {
                    eligible_rest.push(cand);
                }
            }
        }
    }
    eligible_peaks.sort_by(rank);
    eligible_rest.sort_by(rank);
    masked.sort_by(rank);
    let eligible_count = eligible_peaks.len() + eligible_rest.len();
    let mut candidates = eligible_peaks;
    candidates.extend(eligible_rest);
    candidates.extend(masked);
    candidates.truncate(k);
    candidates.sort_by(rank);
    Ok(RecoveredQueries {
        candidates,
        degenerate: k > eligible_count,
    })
}

/// Sinusoidal cell encoding. The first C/2 slots encode i/X, the last C/2
/// encode j/Y, each as interleaved sin/cos over a geometric frequency ladder
/// with base 10000. Parameter-free and bounded by 1 in magnitude.
pub fn positional_encoding(
    pos: (usize, usize),
    c: usize,
    x: usize,
    y: usize,
) -> Result<Vec<f64>> {
    if c % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding width {c} must be even"
        )));
    }
    if x == 0 || y == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let half = c / 2;
    let mut out = vec![0.0; c];
    let axes = [(pos.0 as f64 / x as f64, 0), (pos.1 as f64 / y as f64, half)];
    for (u, base) in axes {
        for s in 0..half {
            let t = (s / 2) as f64;
            let freq = 10000f64.powf(-2.0 * t / half as f64);
            let angle = 2.0 * std::f64::consts::PI * u * freq;
            out[base + s] = if s % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(out)
}

/// Unified query set: candidate metadata plus an on-tape feature matrix.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Fused queries first, then recovered lidar, then recovered camera.
    pub candidates: Vec<QueryCandidate>,
    /// [K_total, C]; row order matches `candidates`.
    pub features: NodeId,
    pub k_fused: usize,
    pub k_lidar: usize,
    pub k_camera: usize,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn gather_with_encoding(
    tape: &mut Tape,
    feature: NodeId,
    cands: &[QueryCandidate],
) -> Result<Option<NodeId>> {
    if cands.is_empty() {
        return Ok(None);
    }
    let shape = tape.value(feature).shape().to_vec();
    let (x, y, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(feature, &[x * y, c])?;
    let rows: Vec<usize> = cands.iter().map(|q| q.pos.0 * y + q.pos.1).collect();
    let picked = tape.gather_rows(flat, &rows)?;
    let mut pe = Tensor::zeros(&[cands.len(), c]);
    for (r, q) in cands.iter().enumerate() {
        let enc = positional_encoding(q.pos, c, x, y)?;
        pe.data_mut()[r * c..(r + 1) * c].copy_from_slice(&enc);
    }
    let pe = tape.constant(pe);
    Ok(Some(tape.add(picked, pe)?))
}

/// Build the unified query set: each query's feature is its source map's
/// cell vector plus the positional encoding of that cell. Fused queries
/// sample the fused map; recovered queries sample their own raw modality
/// map, preserving the evidence fusion lost.
pub fn assemble_queries(
    tape: &mut Tape,
    fused_cands: &[QueryCandidate],
    lidar_cands: &[QueryCandidate],
    camera_cands: &[QueryCandidate],
    fused: NodeId,
    lidar: NodeId,
    camera: NodeId,
) -> Result<QuerySet> {
    for (cands, want) in [
        (fused_cands, Source::Fused),
        (lidar_cands, Source::Lidar),
        (camera_cands, Source::Camera),
    ] {
        if let Some(bad) = cands.iter().find(|q| q.source != want) {
            return Err(Error::InvalidArgument(format!(
                "candidate tagged {} in the {} list",
                bad.source.tag(),
                want.tag()
            )));
        }
    }
    let mut parts = Vec::new();
    for (feature, cands) in [(fused, fused_cands), (lidar, lidar_cands), (camera, camera_cands)] {
        if let Some(node) = gather_with_encoding(tape, feature, cands)? {
            parts.push(node);
        }
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("query set would be empty".into()));
    }
    let features = tape.concat_rows(&parts)?;
    let mut candidates = fused_cands.to_vec();
    candidates.extend_from_slice(lidar_cands);
    candidates.extend_from_slice(camera_cands);
    Ok(QuerySet {
        candidates,
        features,
        k_fused: fused_cands.len(),
        k_lidar: lidar_cands.len(),
        k_camera: camera_cands.len(),
    })
}

/// Dump a query list as CSV rows `source,i,j,cls,score`.
pub fn write_queries_csv(path: &Path, queries: &[QueryCandidate]) -> Result<()> {
    let mut out = String::from("source,i,j,cls,score\n");
    for q in queries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            q.source.tag(),
            q.pos.0,
            q.pos.1,
            q.cls,
            q.score
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;

    fn rand_heat(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform())
    }

    /// Independent selection oracle: repeated linear extraction instead of
    /// sorting, peaks exhausted before non-peaks.
    fn oracle_topk(h: &Tensor, k: usize, window: usize) -> Vec<(usize, usize, usize)> {
        let (x, y, nc) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let mut cells: Vec<(usize, usize, usize, f64, bool)> = Vec::new();
        for cls in 0..nc {
            for i in 0..x {
                for j in 0..y {
                    let mut peak = true;
                    let r = (window / 2) as isize;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (ni, nj) = (i as isize + di, j as isize + dj);
                            if ni < 0 || nj < 0 || ni >= x as isize || nj >= y as isize {
                                continue;
                            }
                            if h.at3(ni as usize, nj as usize, cls) > h.at3(i, j, cls) {
                                peak = false;
                            }
                        }
                    }
                    cells.push((cls, i, j, h.at3(i, j, cls), peak));
                }
            }
        }
        let mut member: Vec<(usize, usize, usize, f64)> = Vec::new();
        for phase_peak in [true, false] {
            while member.len() < k {
                let mut best: Option<usize> = None;
                for (idx, c) in cells.iter().enumerate() {
                    if c.4 != phase_peak {
                        continue;
                    }
                    best = match best {
                        None => Some(idx),
                        Some(b) => {
                            let (bc, bi, bj, bs, _) = cells[b];
                            let (cc, cci, ccj, cs, _) = *c;
                            if cs > bs || (cs == bs && (cc, cci, ccj) < (bc, bi, bj)) {
                                Some(idx)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
                match best {
                    Some(idx) => {
                        let c = cells.remove(idx);
                        member.push((c.0, c.1, c.2, c.3));
                    }
                    None => break,
                }
            }
        }
        // Final order is score-descending over the chosen membership.
        member.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap()
                .then((a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)))
        });
        member.into_iter().map(|(c, i, j, _)| (c, i, j)).collect()
    }

    #[test]
    fn single_center_maximum() {
        let mut h = Tensor::full(&[3, 3, 1], 0.1);
        h.set3(1, 1, 0, 0.9);
        let got = select_topk_peaks(&h, 1, 3, Source::Fused).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].pos, (1, 1));
        assert_eq!(got[0].cls, 0);
        assert_eq!(got[0].score, 0.9);
    }

    #[test]
    fn uniform_heatmap_breaks_ties_lexicographically() {
        let h = Tensor::full(&[3, 3, 2], 0.5);
        let got = select_topk_peaks(&h, 2, 3, Source::Fused).unwrap();
        assert_eq!(got[0].pos, (0, 0));
        assert_eq!(got[0].cls, 0);
        assert_eq!(got[1].pos, (0, 1));
        assert_eq!(got[1].cls, 0);
    }

    #[test]
    fn matches_extraction_oracle() {
        for seed in 0..5 {
            let h = rand_heat(seed, &[8, 8, 2]);
            let got = select_topk_peaks(&h, 5, 3, Source::Fused).unwrap();
            let want = oracle_topk(&h, 5, 3);
            let got_keys: Vec<_> = got.iter().map(|q| (q.cls, q.pos.0, q.pos.1)).collect();
            assert_eq!(got_keys, want, "seed {seed}");
        }
    }

    #[test]
    fn rejects_oversized_k_and_even_window() {
        let h = Tensor::full(&[2, 2, 1], 0.5);
        assert!(select_topk_peaks(&h, 5, 3, Source::Fused).is_err());
        assert!(select_topk_peaks(&h, 1, 2, Source::Fused).is_err());
    }

    #[test]
    fn mask_zero_count_is_distinct_positions() {
        let mk = |i, j| QueryCandidate {
            pos: (i, j),
            cls: 0,
            score: 0.5,
            source: Source::Fused,
        };
        assert_eq!(build_fusion_mask(&[], 4, 4).unwrap().zero_count(), 0);
        let mask = build_fusion_mask(&[mk(0, 0), mk(2, 3)], 4, 4).unwrap();
        assert_eq!(mask.zero_count(), 2);
        assert!(mask.is_masked(0, 0));
        assert!(mask.is_masked(2, 3));
        // Same position claimed under two classes collapses to one zero.
        let mut dup = mk(1, 1);
        dup.cls = 1;
        let mask = build_fusion_mask(&[mk(1, 1), dup, mk(1, 1)], 4, 4).unwrap();
        assert_eq!(mask.zero_count(), 1);
    }

    #[test]
    fn all_ones_mask_recovers_plain_selection() {
        let h = rand_heat(7, &[6, 6, 2]);
        let mask = build_fusion_mask(&[], 6, 6).unwrap();
        let rec = recover_modal_queries(&h, &mask, 4, 3, Source::Lidar).unwrap();
        assert!(!rec.degenerate);
        let plain = select_topk_peaks(&h, 4, 3, Source::Lidar).unwrap();
        assert_eq!(rec.candidates, plain);
    }

    #[test]
    fn masking_global_maximum_promotes_runner_up() {
        let mut h = Tensor::full(&[5, 5, 1], 0.05);
        h.set3(1, 1, 0, 0.9); // global max
        h.set3(3, 3, 0, 0.7); // runner-up, outside (1,1)'s window
        let best = QueryCandidate {
            pos: (1, 1),
            cls: 0,
            score: 0.9,
            source: Source::Fused,
        };
        let mask = build_fusion_mask(&[best], 5, 5).unwrap();
        let rec = recover_modal_queries(&h, &mask, 1, 3, Source::Camera).unwrap();
        assert!(!rec.degenerate);
        assert_eq!(rec.candidates[0].pos, (3, 3));
        assert_eq!(rec.candidates[0].score, 0.7);
    }

    #[test]
    fn fully_masked_grid_degenerates_to_zero_scores() {
        let h = rand_heat(9, &[3, 3, 1]);
        let all: Vec<QueryCandidate> = (0..3)
            .flat_map(|i| {
                (0..3).map(move |j| QueryCandidate {
                    pos: (i, j),
                    cls: 0,
                    score: 1.0,
                    source: Source::Fused,
                })
            })
            .collect();
        let mask = build_fusion_mask(&all, 3, 3).unwrap();
        let rec = recover_modal_queries(&h, &mask, 4, 3, Source::Lidar).unwrap();
        assert!(rec.degenerate);
        assert_eq!(rec.candidates.len(), 4);
        assert!(rec.candidates.iter().all(|q| q.score == 0.0));
        // Zero-score fills keep the lexicographic contract.
        assert_eq!(rec.candidates[0].pos, (0, 0));
        assert_eq!(rec.candidates[1].pos, (0, 1));
    }

    #[test]
    fn strong_unmasked_peak_is_always_recovered() {
        let mut h = rand_heat(11, &[6, 6, 2]);
        for v in h.data_mut().iter_mut() {
            *v *= 0.5; // cap the noise
        }
        h.set3(4, 2, 1, 0.95);
        let claimed = QueryCandidate {
            pos: (0, 0),
            cls: 0,
            score: 0.5,
            source: Source::Fused,
        };
        let mask = build_fusion_mask(&[claimed], 6, 6).unwrap();
        let rec = recover_modal_queries(&h, &mask, 1, 3, Source::Lidar).unwrap();
        assert_eq!(rec.candidates[0].pos, (4, 2));
        assert_eq!(rec.candidates[0].cls, 1);
    }

    #[test]
    fn encoding_zero_cell_is_alternating_zero_one() {
        let pe = positional_encoding((0, 0), 8, 16, 16).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_is_injective_on_a_grid() {
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                let pe = positional_encoding((i, j), 32, 16, 16).unwrap();
                let bits: Vec<u64> = pe.iter().map(|v| v.to_bits()).collect();
                assert!(!seen.contains(&bits), "cells collide at ({i},{j})");
                seen.push(bits);
            }
        }
    }

    #[test]
    fn encoding_bounded_and_rejects_odd_width() {
        for i in 0..8 {
            for j in 0..8 {
                let pe = positional_encoding((i, j), 10, 8, 8).unwrap();
                assert!(pe.iter().all(|v| v.abs() <= 1.0));
            }
        }
        assert!(positional_encoding((0, 0), 7, 8, 8).is_err());
    }

    fn mk_cand(i: usize, j: usize, cls: usize, score: f64, source: Source) -> QueryCandidate {
        QueryCandidate {
            pos: (i, j),
            cls,
            score,
            source,
        }
    }

    #[test]
    fn queries_without_recovered_sets_are_fused_only() {
        let mut tape = Tape::new();
        let c = 4usize;
        let f = tape.constant(rand_heat(13, &[4, 4, c]));
        let l = tape.constant(rand_heat(14, &[4, 4, c]));
        let cam = tape.constant(rand_heat(15, &[4, 4, c]));
        let fused = vec![
            mk_cand(1, 1, 0, 0.9, Source::Fused),
            mk_cand(2, 3, 1, 0.8, Source::Fused),
        ];
        let qs = assemble_queries(&mut tape, &fused, &[], &[], f, l, cam).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs.k_fused, 2);
        assert_eq!(qs.k_lidar, 0);
        assert_eq!(qs.k_camera, 0);
        assert_eq!(tape.value(qs.features).shape(), &[2, c]);
    }

    #[test]
    fn zero_features_give_pure_encodings() {
        let mut tape = Tape::new();
        let c = 8usize;
        let z = tape.constant(Tensor::zeros(&[4, 4, c]));
        let fused = vec![mk_cand(2, 1, 0, 0.9, Source::Fused)];
        let qs = assemble_queries(&mut tape, &fused, &[], &[], z, z, z).unwrap();
        let want = positional_encoding((2, 1), c, 4, 4).unwrap();
        assert_eq!(tape.value(qs.features).data(), &want[..]);
    }

    #[test]
    fn query_features_are_cell_vector_plus_encoding() {
        let c = 6usize;
        let bf = rand_heat(17, &[5, 5, c]);
        let bl = rand_heat(18, &[5, 5, c]);
        let bc = rand_heat(19, &[5, 5, c]);
        let mut tape = Tape::new();
        let nf = tape.constant(bf.clone());
        let node_l = tape.constant(bl.clone());
        let node_c = tape.constant(bc.clone());
        let fused = vec![mk_cand(3, 2, 0, 0.9, Source::Fused)];
        let lidar = vec![mk_cand(1, 4, 1, 0.7, Source::Lidar)];
        let camera = vec![mk_cand(0, 0, 0, 0.6, Source::Camera)];
        let qs =
            assemble_queries(&mut tape, &fused, &lidar, &camera, nf, node_l, node_c).unwrap();
        assert_eq!(qs.len(), 3);
        let rows = tape.value(qs.features);
        for (r, (map, pos)) in [(&bf, (3usize, 2usize)), (&bl, (1, 4)), (&bc, (0, 0))]
            .into_iter()
            .enumerate()
        {
            let pe = positional_encoding(pos, c, 5, 5).unwrap();
            for ch in 0..c {
                let want = map.at3(pos.0, pos.1, ch) + pe[ch];
                assert!((rows.data()[r * c + ch] - want).abs() < 1e-15);
            }
        }
        // Source ordering and tags.
        assert_eq!(qs.candidates[0].source, Source::Fused);
        assert_eq!(qs.candidates[1].source, Source::Lidar);
        assert_eq!(qs.candidates[2].source, Source::Camera);
    }

    #[test]
    fn assemble_rejects_mistagged_lists() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 3, 4]));
        let wrong = vec![mk_cand(0, 0, 0, 0.5, Source::Lidar)];
        assert!(assemble_queries(&mut tape, &wrong, &[], &[], z, z, z).is_err());
    }

    #[test]
    fn recovered_positions_avoid_claimed_cells() {
        for seed in 0..10 {
            let hf = rand_heat(100 + seed, &[8, 8, 3]);
            let hl = rand_heat(200 + seed, &[8, 8, 3]);
            let fused = select_topk_peaks(&hf, 10, 3, Source::Fused).unwrap();
            let mask = build_fusion_mask(&fused, 8, 8).unwrap();
            let rec = recover_modal_queries(&hl, &mask, 5, 3, Source::Lidar).unwrap();
            assert!(!rec.degenerate);
            let claimed: Vec<(usize, usize)> = fused.iter().map(|q| q.pos).collect();
            for q in &rec.candidates {
                assert!(!claimed.contains(&q.pos), "seed {seed}: {:?}", q.pos);
            }
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.csv");
        let qs = vec![
            mk_cand(1, 2, 0, 0.75, Source::Fused),
            mk_cand(3, 4, 2, 0.25, Source::Camera),
        ];
        write_queries_csv(&path, &qs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "source,i,j,cls,score");
        assert_eq!(lines[1], "F,1,2,0,0.75");
        assert_eq!(lines[2], "C,3,4,2,0.25");
    }

    proptest! {
        #[test]
        fn prop_mask_build_is_idempotent(seed in 0u64..200) {
            let h = rand_heat(seed, &[6, 6, 2]);
            let cands = select_topk_peaks(&h, 8, 3, Source::Fused).unwrap();
            let a = build_fusion_mask(&cands, 6, 6).unwrap();
            let b = build_fusion_mask(&cands, 6, 6).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prop_scores_non_increasing_within_source(seed in 0u64..200, k in 1usize..12) {
            let h = rand_heat(seed, &[6, 6, 2]);
            let cands = select_topk_peaks(&h, k, 3, Source::Fused).unwrap();
            prop_assert_eq!(cands.len(), k);
            for w in cands.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn prop_selection_count_is_exact(seed in 0u64..100, k in 1usize..30) {
            let h = rand_heat(seed, &[5, 5, 2]);
            let cands = select_topk_peaks(&h, k, 3, Source::Fused).unwrap();
            prop_assert_eq!(cands.len(), k);
        }
    }
}
