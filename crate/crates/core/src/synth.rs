//! Synthetic conflict-scene benchmark.
//!
//! Stands in for real encoders: each scene is a handful of non-overlapping
//! rotated boxes with class-dependent size priors. The LiDAR render stamps a
//! fixed per-class template over each visible footprint with amplitude
//! decaying by distance from the virtual ego at grid center; the camera
//! render does the same but displaces every stamp radially by a Gaussian
//! depth error and duplicates it along the ray with geometrically decaying,
//! normalized weights. Visibility flags inject the two conflict families:
//! LiDAR drops distant small objects, the camera occludes objects outright.
//!
//! Everything is a pure function of (seed, grid, conflict config): same
//! inputs, bit-identical outputs.

use std::io::Write as _;
use std::path::Path;

use crate::decoder::BoxPred;
use crate::error::{Error, Result};
use crate::grid::BevFeature;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::objective::{gaussian_gt_map, GtBox, GtHeatmap};

const STREAM_SCENE: u64 = 1;
const STREAM_LIDAR: u64 = 2;
const STREAM_CAMERA: u64 = 3;

/// Geometric decay ratio between consecutive smear copies.
const SMEAR_DECAY: f64 = 0.6;

/// Grid geometry and label space shared by generation and rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub x: usize,
    pub y: usize,
    pub cell_size: f64,
    pub n_classes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x: 64,
            y: 64,
            cell_size: 0.5,
            n_classes: 3,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x < 8 || self.y < 8 {
            return Err(Error::Config(format!(
                "grid {}x{} too small (need at least 8x8)",
                self.x, self.y
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 / 2.0, self.y as f64 / 2.0)
    }
}

/// Conflict injection knobs. Zeroing everything (smear_len 1) produces
/// perfectly agreeing modalities up to noise and templates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictConfig {
    /// Probability a distant small-class object is invisible to LiDAR.
    pub p_lidar_drop_small: f64,
    /// Camera radial error scale, in cells of displacement per cell of
    /// distance from the ego.
    pub depth_sigma: f64,
    /// Number of duplicated camera stamps along the ray (>= 1).
    pub smear_len: usize,
    /// Probability an object is invisible to the camera.
    pub p_cam_occlude: f64,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        ConflictConfig {
            p_lidar_drop_small: 0.5,
            depth_sigma: 0.08,
            smear_len: 3,
            p_cam_occlude: 0.15,
        }
    }
}

impl ConflictConfig {
    pub fn none() -> ConflictConfig {
        ConflictConfig {
            p_lidar_drop_small: 0.0,
            depth_sigma: 0.0,
            smear_len: 1,
            p_cam_occlude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_lidar_drop_small", self.p_lidar_drop_small),
            ("p_cam_occlude", self.p_cam_occlude),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if !(self.depth_sigma >= 0.0) {
            return Err(Error::Config("depth_sigma must be >= 0".into()));
        }
        if self.smear_len == 0 {
            return Err(Error::Config("smear_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    /// (cx, cy) in cells.
    pub center: (f64, f64),
    /// (w, l): lateral / along-heading extents in cells, both >= 1.
    pub size: (f64, f64),
    pub heading: f64,
    pub cls: usize,
    /// Distance in cells from the virtual ego at grid center.
    pub dist: f64,
}

impl SceneObject {
    pub fn gt_box(&self) -> GtBox {
        GtBox {
            cls: self.cls,
            cx: self.center.0,
            cy: self.center.1,
            w: self.size.0,
            l: self.size.1,
            theta: self.heading,
        }
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let (dx, dy) = (self.heading.cos(), self.heading.sin());
        let (px, py) = (-dy, dx);
        let (hw, hl) = (self.size.0 / 2.0, self.size.1 / 2.0);
        let mut out = [(0.0, 0.0); 4];
        for (k, (sl, sw)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .enumerate()
        {
            out[k] = (
                self.center.0 + sl * hl * dx + sw * hw * px,
                self.center.1 + sl * hl * dy + sw * hw * py,
            );
        }
        out
    }
}

/// Separating-axis overlap test for two rotated rectangles.
fn rects_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for r in [a, b] {
        let (dx, dy) = (r.heading.cos(), r.heading.sin());
        for axis in [(dx, dy), (-dy, dx)] {
            let proj = |cs: &[(f64, f64); 4]| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &(x, y) in cs {
                    let p = x * axis.0 + y * axis.1;
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Per-object: LiDAR perceives it.
    pub vis_p: Vec<bool>,
    /// Per-object: camera perceives it.
    pub vis_i: Vec<bool>,
    pub seed: u64,
}

/// Visibility pattern of one object; objects invisible to both modalities
/// fall outside every bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Both,
    LidarOnly,
    CameraOnly,
}

impl Scene {
    pub fn gt_boxes_all(&self) -> Vec<GtBox> {
        self.objects.iter().map(|o| o.gt_box()).collect()
    }

    pub fn gt_boxes_lidar_visible(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .zip(&self.vis_p)
            .filter(|(_, &v)| v)
            .map(|(o, _)| o.gt_box())
            .collect()
    }

    pub fn gt_boxes_camera_visible(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .zip(&self.vis_i)
            .filter(|(_, &v)| v)
            .map(|(o, _)| o.gt_box())
            .collect()
    }

    pub fn bucket(&self, idx: usize) -> Option<Bucket> {
        match (self.vis_p[idx], self.vis_i[idx]) {
            (true, true) => Some(Bucket::Both),
            (true, false) => Some(Bucket::LidarOnly),
            (false, true) => Some(Bucket::CameraOnly),
            (false, false) => None,
        }
    }
}

/// (w range, l range) per prior slot; classes cycle through large, medium,
/// small.
const SIZE_PRIORS: [((f64, f64), (f64, f64)); 3] = [
    ((2.5, 4.0), (5.0, 7.0)),
    ((1.5, 2.5), (2.5, 4.0)),
    ((1.0, 1.8), (1.0, 1.8)),
];

fn is_small_class(cls: usize) -> bool {
    cls % 3 == 2
}

/// Draw 3-12 non-overlapping objects with class-dependent size priors, then
/// the visibility flags. Object layout depends only on (seed, grid):
/// changing the conflict config changes flags, never geometry.
pub fn generate_scene(seed: u64, grid: &GridConfig, conflict: &ConflictConfig) -> Scene {
    let mut rng = Rng::with_stream(seed, STREAM_SCENE);
    let target = 3 + rng.below(10);
    let (ex, ey) = grid.center();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    for _ in 0..target {
        for _attempt in 0..1000 {
            let cls = rng.below(grid.n_classes);
            let ((w_lo, w_hi), (l_lo, l_hi)) = SIZE_PRIORS[cls % 3];
            let w = w_lo + rng.uniform() * (w_hi - w_lo);
            let l = l_lo + rng.uniform() * (l_hi - l_lo);
            let heading = rng.uniform() * std::f64::consts::TAU - std::f64::consts::PI;
            // Keep the whole rotated box inside the grid via its half-diagonal.
            let margin = 0.5 * (w * w + l * l).sqrt();
            if 2.0 * margin >= grid.x as f64 || 2.0 * margin >= grid.y as f64 {
                continue;
            }
            let cx = margin + rng.uniform() * (grid.x as f64 - 2.0 * margin);
            let cy = margin + rng.uniform() * (grid.y as f64 - 2.0 * margin);
            let cand = SceneObject {
                center: (cx, cy),
                size: (w, l),
                heading,
                cls,
                dist: ((cx - ex).powi(2) + (cy - ey).powi(2)).sqrt(),
            };
            if objects.iter().all(|o| !rects_overlap(o, &cand)) {
                objects.push(cand);
                break;
            }
        }
    }
    // Flags are drawn after placement, two uniforms per object, so the same
    // seed yields the same draws under every conflict config.
    let near = (grid.x.min(grid.y) as f64) / 4.0;
    let mut vis_p = Vec::with_capacity(objects.len());
    let mut vis_i = Vec::with_capacity(objects.len());
    for o in &objects {
        let u_p = rng.uniform();
        let u_i = rng.uniform();
        let dropped =
            is_small_class(o.cls) && o.dist >= near && u_p < conflict.p_lidar_drop_small;
        vis_p.push(!dropped);
        vis_i.push(!(u_i < conflict.p_cam_occlude));
    }
    Scene {
        objects,
        vis_p,
        vis_i,
        seed,
    }
}

/// Integer cells whose centers fall inside the rotated box; never empty (a
/// degenerate rasterization keeps the center cell). Cells may be
/// out-of-grid; stamping clips them.
fn footprint_cells(cx: f64, cy: f64, w: f64, l: f64, heading: f64) -> Vec<(isize, isize)> {
    let (dx, dy) = (heading.cos(), heading.sin());
    let half_diag = 0.5 * (w * w + l * l).sqrt();
    let i_lo = (cx - half_diag - 1.0).floor() as isize;
    let i_hi = (cx + half_diag + 1.0).ceil() as isize;
    let j_lo = (cy - half_diag - 1.0).floor() as isize;
    let j_hi = (cy + half_diag + 1.0).ceil() as isize;
    let mut cells = Vec::new();
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let (ox, oy) = (i as f64 + 0.5 - cx, j as f64 + 0.5 - cy);
            let along = ox * dx + oy * dy;
            let lateral = -ox * dy + oy * dx;
            if along.abs() <= l / 2.0 && lateral.abs() <= w / 2.0 {
                cells.push((i, j));
            }
        }
    }
    if cells.is_empty() {
        cells.push((cx.floor() as isize, cy.floor() as isize));
    }
    cells
}

/// Per-class, per-modality template vectors plus render settings.
#[derive(Debug, Clone)]
pub struct SynthKit {
    pub grid: GridConfig,
    pub channels: usize,
    /// i.i.d. noise level added to every rendered cell; tests may zero it.
    pub noise_sd: f64,
    lidar_templates: Vec<Vec<f64>>,
    camera_templates: Vec<Vec<f64>>,
}

impl SynthKit {
    /// Templates are unit-L2 vectors drawn once from the kit seed.
    pub fn new(grid: GridConfig, channels: usize, seed: u64) -> Result<SynthKit> {
        grid.validate()?;
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} must be positive and even"
            )));
        }
        let mut rng = Rng::with_stream(seed, 0);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..channels).map(|_| rng.normal(0.0, 1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                })
                .collect()
        };
        let lidar_templates = draw(grid.n_classes);
        let camera_templates = draw(grid.n_classes);
        Ok(SynthKit {
            grid,
            channels,
            noise_sd: 0.05,
            lidar_templates,
            camera_templates,
        })
    }

    fn noise_map(&self, rng: &mut Rng) -> Tensor {
        let (x, y, c) = (self.grid.x, self.grid.y, self.channels);
        if self.noise_sd == 0.0 {
            return Tensor::zeros(&[x, y, c]);
        }
        let sd = self.noise_sd;
        Tensor::from_fn(&[x, y, c], |_| rng.normal(0.0, sd))
    }

    /// Amplitude decay with ego distance.
    fn amplitude(&self, dist: f64) -> f64 {
        (-dist / (self.grid.x.min(self.grid.y) as f64 / 2.0)).exp()
    }

    fn stamp(
        &self,
        map: &mut Tensor,
        cells: &[(isize, isize)],
        shift: (isize, isize),
        weight: f64,
        template: &[f64],
    ) {
        let (x, y, c) = (
            self.grid.x as isize,
            self.grid.y as isize,
            self.channels,
        );
        for &(i, j) in cells {
            let (i, j) = (i + shift.0, j + shift.1);
            if i < 0 || j < 0 || i >= x || j >= y {
                continue;
            }
            let base = ((i as usize) * self.grid.y + j as usize) * c;
            for (k, t) in template.iter().enumerate() {
                map.data_mut()[base + k] += weight * t;
            }
        }
    }

    /// LiDAR branch: template stamps over the footprints of LiDAR-visible
    /// objects plus i.i.d. noise; the target map covers the same objects.
    pub fn render_lidar(&self, scene: &Scene) -> Result<(BevFeature, GtHeatmap)> {
        let mut rng = Rng::with_stream(scene.seed, STREAM_LIDAR);
        let mut map = self.noise_map(&mut rng);
        for (o, &vis) in scene.objects.iter().zip(&scene.vis_p) {
            if !vis {
                continue;
            }
            let cells = footprint_cells(o.center.0, o.center.1, o.size.0, o.size.1, o.heading);
            let amp = self.amplitude(o.dist);
            self.stamp(&mut map, &cells, (0, 0), amp, &self.lidar_templates[o.cls]);
        }
        let target = gaussian_gt_map(
            &scene.gt_boxes_lidar_visible(),
            self.grid.x,
            self.grid.y,
            self.grid.n_classes,
        )?;
        Ok((
            BevFeature::new(map, self.grid.cell_size, 0)?,
            target,
        ))
    }

    /// Camera branch: stamps displaced radially by a per-object Gaussian
    /// depth error, duplicated `smear_len` times at unit radial spacing with
    /// normalized geometric weights - amplitude is conserved across
    /// smear_len for interior objects.
    pub fn render_camera(
        &self,
        scene: &Scene,
        conflict: &ConflictConfig,
    ) -> Result<(BevFeature, GtHeatmap)> {
        conflict.validate()?;
        let mut rng = Rng::with_stream(scene.seed, STREAM_CAMERA);
        let mut map = self.noise_map(&mut rng);
        let (ex, ey) = self.grid.center();
        let decay_norm: f64 = (0..conflict.smear_len).map(|t| SMEAR_DECAY.powi(t as i32)).sum();
        for (o, &vis) in scene.objects.iter().zip(&scene.vis_i) {
            if !vis {
                continue;
            }
            let delta = rng.normal(0.0, conflict.depth_sigma * o.dist);
            let (ux, uy) = if o.dist > 1e-9 {
                ((o.center.0 - ex) / o.dist, (o.center.1 - ey) / o.dist)
            } else {
                (0.0, 0.0)
            };
            let cx = o.center.0 + delta * ux;
            let cy = o.center.1 + delta * uy;
            // One rasterization per object; copies translate the same cell
            // set so every copy stamps an identical count of cells.
            let cells = footprint_cells(cx, cy, o.size.0, o.size.1, o.heading);
            let amp = self.amplitude(o.dist);
            for t in 0..conflict.smear_len {
                let shift = (
                    (t as f64 * ux).round() as isize,
                    (t as f64 * uy).round() as isize,
                );
                let w = amp * SMEAR_DECAY.powi(t as i32) / decay_norm;
                self.stamp(&mut map, &cells, shift, w, &self.camera_templates[o.cls]);
            }
        }
        let target = gaussian_gt_map(
            &scene.gt_boxes_camera_visible(),
            self.grid.x,
            self.grid.y,
            self.grid.n_classes,
        )?;
        Ok((
            BevFeature::new(map, self.grid.cell_size, 0)?,
            target,
        ))
    }

    #[cfg(test)]
    fn copy_lidar_templates_to_camera(&mut self) {
        self.camera_templates = self.lidar_templates.clone();
    }
}

/// Hit/total counter for one visibility bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BucketCount {
    pub total: usize,
    pub hit: usize,
}

impl BucketCount {
    pub fn recall(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.hit as f64 / self.total as f64)
        }
    }
}

/// Recall accounting over visibility buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BucketRecall {
    pub both: BucketCount,
    pub lidar_only: BucketCount,
    pub camera_only: BucketCount,
}

impl BucketRecall {
    pub fn merge(&mut self, other: &BucketRecall) {
        for (a, b) in [
            (&mut self.both, other.both),
            (&mut self.lidar_only, other.lidar_only),
            (&mut self.camera_only, other.camera_only),
        ] {
            a.total += b.total;
            a.hit += b.hit;
        }
    }
}

/// Per-object coverage: a GT counts as hit when any prediction with
/// confidence >= `conf_thresh` has its center within `radius` cells.
/// Class-agnostic on purpose - this measures whether anything looked there.
pub fn gt_subsets(
    scene: &Scene,
    preds: &[BoxPred],
    conf_thresh: f64,
    radius: f64,
) -> BucketRecall {
    let mut out = BucketRecall::default();
    for (idx, o) in scene.objects.iter().enumerate() {
        let Some(bucket) = scene.bucket(idx) else {
            continue;
        };
        let hit = preds.iter().any(|p| {
            let (_, conf) = p.best_real_class();
            let d = ((p.center.0 - o.center.0).powi(2) + (p.center.1 - o.center.1).powi(2))
                .sqrt();
            conf >= conf_thresh && d <= radius
        });
        let slot = match bucket {
            Bucket::Both => &mut out.both,
            Bucket::LidarOnly => &mut out.lidar_only,
            Bucket::CameraOnly => &mut out.camera_only,
        };
        slot.total += 1;
        if hit {
            slot.hit += 1;
        }
    }
    out
}

/// One object per line: `cls cx cy w l theta vis_p vis_i`.
pub fn scene_to_text(scene: &Scene) -> String {
    let mut out = String::new();
    for (idx, o) in scene.objects.iter().enumerate() {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            o.cls,
            o.center.0,
            o.center.1,
            o.size.0,
            o.size.1,
            o.heading,
            scene.vis_p[idx] as u8,
            scene.vis_i[idx] as u8,
        ));
    }
    out
}

/// Inverse of [`scene_to_text`]; `dist` is recomputed from the grid, the
/// seed is not represented in the format and comes back as 0.
pub fn scene_from_text(text: &str, grid: &GridConfig) -> Result<Scene> {
    let (ex, ey) = grid.center();
    let mut objects = Vec::new();
    let mut vis_p = Vec::new();
    let mut vis_i = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::InvalidArgument(format!(
                "scene line {}: expected 8 fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::InvalidArgument(format!("scene line {}: bad {what}", ln + 1))
        };
        let cls: usize = fields[0].parse().map_err(|_| bad("class"))?;
        let nums: Vec<f64> = fields[1..6]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("number"))?;
        let flag = |s: &str, what: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        vis_p.push(flag(fields[6], "vis_p flag")?);
        vis_i.push(flag(fields[7], "vis_i flag")?);
        objects.push(SceneObject {
            center: (nums[0], nums[1]),
            size: (nums[2], nums[3]),
            heading: nums[4],
            cls,
            dist: ((nums[0] - ex).powi(2) + (nums[1] - ey).powi(2)).sqrt(),
        });
    }
    Ok(Scene {
        objects,
        vis_p,
        vis_i,
        seed: 0,
    })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(scene_to_text(scene).as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
