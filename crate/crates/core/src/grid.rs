//! BEV-space domain types and coordinate conventions.
//!
//! A grid position (x, y) indexes (row i, column j). Flow fields displace the
//! sampling SOURCE: warped(p) reads from p + flow(p) (gather semantics).
//! Samples outside [0, X-1] x [0, Y-1] read zeros rather than clamping, so
//! warped-in nonexistent content stays silent instead of smearing the border.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::bilinear_at;
use crate::numerics::tensor::Tensor;

/// Dense BEV feature map [X, Y, C] plus the metric size of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    data: Tensor,
    cell_size: f64,
}

impl BevFeature {
    /// `q` is the alignment window the grid must accommodate; the channel
    /// count must be even so the positional encoding can split it.
    pub fn new(data: Tensor, cell_size: f64, q: usize) -> Result<BevFeature> {
        data.require_rank(3, "bev feature")?;
        let (x, y, c) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        if x < q || y < q {
            return Err(Error::Shape(format!(
                "bev feature {x}x{y} smaller than alignment window q={q}"
            )));
        }
        if c % 2 != 0 {
            return Err(Error::Shape(format!(
                "bev feature channel count {c} must be even"
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell_size {cell_size} must be positive"
            )));
        }
        Ok(BevFeature { data, cell_size })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Per-class center heatmap [X, Y, N_c]. Head outputs live strictly inside
/// (0,1); ground-truth targets may touch 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    data: Tensor,
}

impl Heatmap {
    pub fn new(data: Tensor) -> Result<Heatmap> {
        data.require_rank(3, "heatmap")?;
        for &v in data.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numerical(format!(
                    "heatmap value {v} outside [0,1]"
                )));
            }
        }
        Ok(Heatmap { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Per-cell displacement [X, Y, 2] in cell units; channel 0 moves along x
/// (rows), channel 1 along y (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<FlowField> {
        data.require_rank(3, "flow field")?;
        if data.shape()[2] != 2 {
            return Err(Error::Shape(format!(
                "flow field needs 2 channels, got {}",
                data.shape()[2]
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numerical("flow field has non-finite values".into()));
        }
        Ok(FlowField { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }
}

/// Cross-modal matching costs [X, Y, q*q]; see [`offset_to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    data: Tensor,
    q: usize,
}

impl CostVolume {
    pub fn new(data: Tensor, q: usize) -> Result<CostVolume> {
        data.require_rank(3, "cost volume")?;
        if data.shape()[2] != q * q {
            return Err(Error::Shape(format!(
                "cost volume has {} channels, expected q*q = {}",
                data.shape()[2],
                q * q
            )));
        }
        Ok(CostVolume { data, q })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn q(&self) -> usize {
        self.q
    }
}

/// Flat channel index of window offset (m, n), m and n in [-q/2, q/2).
/// q must be even; the window is integer-valued only in that case.
pub fn offset_to_flat(m: isize, n: isize, q: usize) -> Result<usize> {
    let half = (q / 2) as isize;
    if q == 0 || q % 2 != 0 {
        return Err(Error::InvalidArgument(format!("window q={q} must be even")));
    }
    if m < -half || m >= half || n < -half || n >= half {
        return Err(Error::InvalidArgument(format!(
            "offset ({m},{n}) outside [-{half},{half})"
        )));
    }
    Ok(((m + half) as usize) * q + (n + half) as usize)
}

/// Inverse of [`offset_to_flat`].
pub fn flat_to_offset(o: usize, q: usize) -> Result<(isize, isize)> {
    if q == 0 || q % 2 != 0 {
        return Err(Error::InvalidArgument(format!("window q={q} must be even")));
    }
    if o >= q * q {
        return Err(Error::InvalidArgument(format!(
            "flat offset {o} outside q*q = {}",
            q * q
        )));
    }
    let half = (q / 2) as isize;
    Ok(((o / q) as isize - half, (o % q) as isize - half))
}

/// Bilinear read of a [X, Y, C] tensor at a continuous position. Corners
/// outside the grid contribute zero; integer positions return the cell
/// vector unchanged.
pub fn bilinear_sample(feature: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    feature.require_rank(3, "bilinear_sample")?;
    let mut out = vec![0.0; feature.shape()[2]];
    bilinear_at(feature, x, y, &mut out);
    Ok(out)
}

/// Write one channel of a [X, Y, C] tensor as an ASCII PGM (P2) image,
/// min-max scaled to 0..=255. A constant channel writes as all zeros.
pub fn write_channel_pgm(path: &Path, tensor: &Tensor, channel: usize) -> Result<()> {
    tensor.require_rank(3, "pgm dump")?;
    let (x, y, c) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
    if channel >= c {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of {c}"
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..x {
        for j in 0..y {
            let v = tensor.at3(i, j, channel);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut body = String::new();
    // PGM rows are image rows: row i of the grid, columns j left to right.
    for i in 0..x {
        for j in 0..y {
            let v = tensor.at3(i, j, channel);
            let g = if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            if j > 0 {
                body.push(' ');
            }
            body.push_str(&g.to_string());
        }
        body.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P2\n{y} {x}\n255\n{body}").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Dump every channel of a [X, Y, C] tensor as `<stem>_c<k>.pgm` next to
/// `stem`; returns the written paths.
pub fn write_all_channels_pgm(stem: &Path, tensor: &Tensor) -> Result<Vec<std::path::PathBuf>> {
    tensor.require_rank(3, "pgm dump")?;
    let mut paths = Vec::new();
    for ch in 0..tensor.shape()[2] {
        let mut name = stem
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(&format!("_c{ch}.pgm"));
        let path = stem.with_file_name(name);
        write_channel_pgm(&path, tensor, ch)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn offset_round_trip_all_window_slots() {
        for q in [2usize, 4, 6] {
            let half = (q / 2) as isize;
            for m in -half..half {
                for n in -half..half {
                    let o = offset_to_flat(m, n, q).unwrap();
                    assert_eq!(flat_to_offset(o, q).unwrap(), (m, n));
                }
            }
        }
    }

    #[test]
    fn offset_rejects_odd_window_and_out_of_range() {
        assert!(offset_to_flat(0, 0, 3).is_err());
        assert!(offset_to_flat(2, 0, 4).is_err());
        assert!(flat_to_offset(16, 4).is_err());
    }

    #[test]
    fn sample_at_integer_cell_is_identity() {
        let mut rng = Rng::new(3);
        let t = Tensor::from_fn(&[4, 5, 3], |_| rng.normal(0.0, 1.0));
        for i in 0..4 {
            for j in 0..5 {
                let got = bilinear_sample(&t, i as f64, j as f64).unwrap();
                for ch in 0..3 {
                    assert_eq!(got[ch], t.at3(i, j, ch));
                }
            }
        }
    }

    #[test]
    fn sample_center_of_two_by_two() {
        let t = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let got = bilinear_sample(&t, 0.5, 0.5).unwrap();
        assert!((got[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sample_matches_four_corner_oracle() {
        let mut rng = Rng::new(5);
        let t = Tensor::from_fn(&[6, 6, 2], |_| rng.normal(0.0, 1.0));
        for _ in 0..20 {
            let x = rng.uniform() * 7.0 - 0.5;
            let y = rng.uniform() * 7.0 - 0.5;
            let got = bilinear_sample(&t, x, y).unwrap();
            // Standalone four-corner formula.
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for ch in 0..2 {
                let read = |ci: f64, cj: f64| -> f64 {
                    let (ci, cj) = (ci as isize, cj as isize);
                    if ci < 0 || ci >= 6 || cj < 0 || cj >= 6 {
                        0.0
                    } else {
                        t.at3(ci as usize, cj as usize, ch)
                    }
                };
                let want = read(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + read(x0, y0 + 1.0) * (1.0 - fx) * fy
                    + read(x0 + 1.0, y0) * fx * (1.0 - fy)
                    + read(x0 + 1.0, y0 + 1.0) * fx * fy;
                assert!((got[ch] - want).abs() < 1e-12, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn sample_fully_outside_is_zero() {
        let t = Tensor::full(&[3, 3, 2], 5.0);
        assert_eq!(bilinear_sample(&t, -2.0, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(bilinear_sample(&t, 1.0, 9.5).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bev_feature_validates_window_and_channels() {
        let ok = Tensor::zeros(&[4, 4, 2]);
        assert!(BevFeature::new(ok.clone(), 0.5, 4).is_ok());
        assert!(BevFeature::new(ok.clone(), 0.5, 6).is_err());
        assert!(BevFeature::new(Tensor::zeros(&[4, 4, 3]), 0.5, 4).is_err());
        assert!(BevFeature::new(ok, 0.0, 4).is_err());
    }

    #[test]
    fn heatmap_rejects_out_of_range_values() {
        assert!(Heatmap::new(Tensor::full(&[2, 2, 1], 0.5)).is_ok());
        assert!(Heatmap::new(Tensor::full(&[2, 2, 1], 1.5)).is_err());
        assert!(Heatmap::new(Tensor::full(&[2, 2, 1], -0.1)).is_err());
    }

    #[test]
    fn pgm_dump_round_trips_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(
            vec![2, 3, 1],
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0],
        )
        .unwrap();
        let path = dir.path().join("h.pgm");
        write_channel_pgm(&path, &t, 0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut it = text.split_ascii_whitespace();
        assert_eq!(it.next(), Some("P2"));
        assert_eq!(it.next(), Some("3")); // width = Y
        assert_eq!(it.next(), Some("2")); // height = X
        assert_eq!(it.next(), Some("255"));
        let vals: Vec<u32> = it.map(|s| s.parse().unwrap()).collect();
        assert_eq!(vals, vec![0, 128, 255, 64, 191, 255]);
    }

    #[test]
    fn pgm_dump_constant_channel_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::full(&[2, 2, 1], 3.0);
        let path = dir.path().join("flat.pgm");
        write_channel_pgm(&path, &t, 0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let vals: Vec<u32> = text
            .split_ascii_whitespace()
            .skip(4)
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(vals, vec![0, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn prop_offset_round_trip(o in 0usize..16) {
            let (m, n) = flat_to_offset(o, 4).unwrap();
            prop_assert_eq!(offset_to_flat(m, n, 4).unwrap(), o);
        }

        /// Perturbing the position by d moves a single-channel sample by at
        /// most 2*d*(max adjacent cell difference).
        #[test]
        fn prop_bilinear_is_lipschitz(
            seed in 0u64..1000,
            x in 0.0f64..5.0,
            y in 0.0f64..5.0,
            dx in -0.01f64..0.01,
            dy in -0.01f64..0.01,
        ) {
            let mut rng = Rng::new(seed);
            let t = Tensor::from_fn(&[6, 6, 1], |_| rng.uniform());
            let mut max_diff = 0.0f64;
            for i in 0..6usize {
                for j in 0..6usize {
                    if i + 1 < 6 {
                        max_diff = max_diff.max((t.at3(i, j, 0) - t.at3(i + 1, j, 0)).abs());
                    }
                    if j + 1 < 6 {
                        max_diff = max_diff.max((t.at3(i, j, 0) - t.at3(i, j + 1, 0)).abs());
                    }
                    // Border cells neighbor implicit zeros.
                    if i == 0 || i == 5 || j == 0 || j == 5 {
                        max_diff = max_diff.max(t.at3(i, j, 0).abs());
                    }
                }
            }
            let a = bilinear_sample(&t, x, y).unwrap()[0];
            let b = bilinear_sample(&t, x + dx, y + dy).unwrap()[0];
            let bound = 2.0 * (dx.abs() + dy.abs()) * max_diff + 1e-12;
            prop_assert!((a - b).abs() <= bound, "moved {} > bound {}", (a - b).abs(), bound);
        }
    }
}
