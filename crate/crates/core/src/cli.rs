//! Command implementations behind the binary: key=value run configuration,
//! artifact writing (checkpoints, CSV logs, PGM dumps), and the train /
//! eval / ablate / selftest / gen-scenes entry points.
//!
//! Every command is deterministic given (seed, config); re-running
//! overwrites its outputs byte-identically.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::check;
use crate::error::{Error, Result};
use crate::grid::write_channel_pgm;
use crate::numerics::tensor::Tensor;
use crate::pipeline::{
    evaluate, eval_scene_seeds, infer_scene_maps, load_checkpoint, save_checkpoint, train,
    train_scene_seeds, EvalReport, EvalThresholds, ModelParams, TrainConfig, TrainResult,
};
use crate::synth::{generate_scene, scene_from_text, scene_to_text, Scene, SynthKit};

/// Fully resolved run settings: training (model, grid, conflict) plus the
/// evaluation pool and thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval_scenes: usize,
    pub thresholds: EvalThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            eval_scenes: 50,
            thresholds: EvalThresholds::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for key {key} (want true/false)"
        ))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "grid.x" => t.grid.x = parse_num(key, value)?,
            "grid.y" => t.grid.y = parse_num(key, value)?,
            "grid.cell_size" => t.grid.cell_size = parse_num(key, value)?,
            "grid.n_classes" => {
                t.grid.n_classes = parse_num(key, value)?;
                t.model.n_classes = t.grid.n_classes;
            }
            "model.channels" => t.model.channels = parse_num(key, value)?,
            "model.q" => t.model.q = parse_num(key, value)?,
            "model.flow_hidden" => t.model.flow_hidden = parse_num(key, value)?,
            "model.n_layers" => t.model.n_layers = parse_num(key, value)?,
            "model.n_heads" => t.model.n_heads = parse_num(key, value)?,
            "model.ffn_dim" => t.model.ffn_dim = parse_num(key, value)?,
            "model.k_fused" => t.model.k_fused = parse_num(key, value)?,
            "model.k_lidar" => t.model.k_lidar = parse_num(key, value)?,
            "model.k_camera" => t.model.k_camera = parse_num(key, value)?,
            "model.peak_window" => t.model.peak_window = parse_num(key, value)?,
            "model.freeze_flow" => t.model.freeze_flow = parse_bool(key, value)?,
            "conflict.p_lidar_drop_small" => {
                t.conflict.p_lidar_drop_small = parse_num(key, value)?
            }
            "conflict.depth_sigma" => t.conflict.depth_sigma = parse_num(key, value)?,
            "conflict.smear_len" => t.conflict.smear_len = parse_num(key, value)?,
            "conflict.p_cam_occlude" => t.conflict.p_cam_occlude = parse_num(key, value)?,
            "train.stage1_steps" => t.stage1_steps = parse_num(key, value)?,
            "train.stage2_steps" => t.stage2_steps = parse_num(key, value)?,
            "train.n_scenes" => t.n_scenes = parse_num(key, value)?,
            "train.batch_size" => t.batch_size = parse_num(key, value)?,
            "train.lr" => t.lr = parse_num(key, value)?,
            "train.seed" => t.seed = parse_num(key, value)?,
            "train.unfreeze_modal_heads" => {
                t.unfreeze_modal_heads = parse_bool(key, value)?
            }
            "train.cls_weight" => t.weights.cls = parse_num(key, value)?,
            "train.l1_weight" => t.weights.l1 = parse_num(key, value)?,
            "eval.n_scenes" => self.eval_scenes = parse_num(key, value)?,
            "eval.radii" => {
                let radii: Result<Vec<f64>> = value
                    .split(',')
                    .map(|p| parse_num::<f64>(key, p))
                    .collect();
                let radii = radii?;
                if radii.is_empty() {
                    return Err(Error::Config("eval.radii needs at least one radius".into()));
                }
                self.thresholds.radii = radii;
            }
            "eval.conf_bucket" => self.thresholds.conf_bucket = parse_num(key, value)?,
            "eval.bucket_radius" => self.thresholds.bucket_radius = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse key=value lines over the defaults. Blank lines and `#` comments
    /// are skipped; unknown keys are errors.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", ln + 1))
            })?;
            cfg.apply(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    /// Serialize every key in a fixed order; round-trips through
    /// [`RunConfig::parse_str`] exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let radii: Vec<String> = self.thresholds.radii.iter().map(|r| r.to_string()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("grid.x", t.grid.x.to_string());
        kv("grid.y", t.grid.y.to_string());
        kv("grid.cell_size", t.grid.cell_size.to_string());
        kv("grid.n_classes", t.grid.n_classes.to_string());
        kv("model.channels", t.model.channels.to_string());
        kv("model.q", t.model.q.to_string());
        kv("model.flow_hidden", t.model.flow_hidden.to_string());
        kv("model.n_layers", t.model.n_layers.to_string());
        kv("model.n_heads", t.model.n_heads.to_string());
        kv("model.ffn_dim", t.model.ffn_dim.to_string());
        kv("model.k_fused", t.model.k_fused.to_string());
        kv("model.k_lidar", t.model.k_lidar.to_string());
        kv("model.k_camera", t.model.k_camera.to_string());
        kv("model.peak_window", t.model.peak_window.to_string());
        kv("model.freeze_flow", t.model.freeze_flow.to_string());
        kv(
            "conflict.p_lidar_drop_small",
            t.conflict.p_lidar_drop_small.to_string(),
        );
        kv("conflict.depth_sigma", t.conflict.depth_sigma.to_string());
        kv("conflict.smear_len", t.conflict.smear_len.to_string());
        kv("conflict.p_cam_occlude", t.conflict.p_cam_occlude.to_string());
        kv("train.stage1_steps", t.stage1_steps.to_string());
        kv("train.stage2_steps", t.stage2_steps.to_string());
        kv("train.n_scenes", t.n_scenes.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.seed", t.seed.to_string());
        kv(
            "train.unfreeze_modal_heads",
            t.unfreeze_modal_heads.to_string(),
        );
        kv("train.cls_weight", t.weights.cls.to_string());
        kv("train.l1_weight", t.weights.l1.to_string());
        kv("eval.n_scenes", self.eval_scenes.to_string());
        kv("eval.radii", radii.join(","));
        kv("eval.conf_bucket", self.thresholds.conf_bucket.to_string());
        kv("eval.bucket_radius", self.thresholds.bucket_radius.to_string());
        out
    }

    /// Write the fully resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.resolved.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        v.to_string()
    }
}

fn train_log_csv(result: &TrainResult) -> String {
    let mut out = String::from("step,L_det,L_HF,L_HP,L_HI,total\n");
    for (row, rec) in result.history.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row,
            fmt_f64(rec.l_det),
            fmt_f64(rec.l_fused),
            fmt_f64(rec.l_lidar),
            fmt_f64(rec.l_camera),
            fmt_f64(rec.total)
        ));
    }
    out
}

fn metrics_csv(report: &EvalReport, th: &EvalThresholds) -> String {
    let mut out = String::from("metric,value\n");
    let mut kv = |k: String, v: String| out.push_str(&format!("{k},{v}\n"));
    kv("map".into(), fmt_f64(report.map));
    for (cls, row) in report.per_class_ap.iter().enumerate() {
        for (ri, ap) in row.iter().enumerate() {
            kv(format!("ap_c{cls}_r{}", th.radii[ri]), fmt_f64(*ap));
        }
    }
    for (name, b) in [
        ("both", &report.buckets.both),
        ("lidar_only", &report.buckets.lidar_only),
        ("camera_only", &report.buckets.camera_only),
    ] {
        kv(
            format!("recall_{name}"),
            fmt_f64(b.recall().unwrap_or(f64::NAN)),
        );
        kv(format!("hits_{name}"), b.hit.to_string());
        kv(format!("total_{name}"), b.total.to_string());
    }
    kv(
        "center_err".into(),
        fmt_f64(report.center_err.unwrap_or(f64::NAN)),
    );
    kv("n_scenes".into(), report.n_scenes.to_string());
    out
}

/// Train under `cfg`, writing checkpoint, per-step loss CSV and the
/// resolved config into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let result = train(&cfg.train)?;
    write_file(&out.join("train_log.csv"), &train_log_csv(&result))?;
    save_checkpoint(&out.join("model.ckpt"), &result.params)?;
    println!(
        "trained {} + {} steps; artifacts in {}",
        cfg.train.stage1_steps,
        cfg.train.stage2_steps,
        out.display()
    );
    Ok(())
}

fn eval_pool(cfg: &RunConfig) -> Vec<Scene> {
    eval_scene_seeds(cfg.train.seed, cfg.eval_scenes)
        .into_iter()
        .map(|s| generate_scene(s, &cfg.train.grid, &cfg.train.conflict))
        .collect()
}

fn flow_magnitude(flow: &Tensor) -> Tensor {
    let (x, y) = (flow.shape()[0], flow.shape()[1]);
    Tensor::from_fn(&[x, y, 1], |idx| {
        let (i, j) = (idx / y, idx % y);
        (flow.at3(i, j, 0).powi(2) + flow.at3(i, j, 1).powi(2)).sqrt()
    })
}

fn dump_scene_pgms(
    dir: &Path,
    idx: usize,
    params: &ModelParams,
    kit: &SynthKit,
    scene: &Scene,
    cfg: &RunConfig,
) -> Result<usize> {
    let maps = infer_scene_maps(params, kit, scene, &cfg.train.conflict)?;
    let mut written = 0;
    for (tag, map) in [
        ("heat_lidar", &maps.heat_lidar),
        ("heat_camera", &maps.heat_camera),
        ("heat_fused", &maps.heat_fused),
    ] {
        for cls in 0..cfg.train.grid.n_classes {
            let path = dir.join(format!("scene{idx:03}_{tag}_c{cls}.pgm"));
            write_channel_pgm(&path, map, cls)?;
            written += 1;
        }
    }
    for (tag, flow) in [("flow_lidar", &maps.flow_lidar), ("flow_camera", &maps.flow_camera)] {
        if let Some(f) = flow {
            let path = dir.join(format!("scene{idx:03}_{tag}.pgm"));
            write_channel_pgm(&path, &flow_magnitude(f), 0)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Evaluate a checkpoint on the config's evaluation pool; optionally dump
/// per-scene heatmap and flow-magnitude PGMs.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: &RunConfig,
    out: &Path,
    dump_heatmaps: bool,
) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    if params.config != cfg.train.model {
        return Err(Error::Config(format!(
            "checkpoint model config {:?} does not match run config {:?}",
            params.config, cfg.train.model
        )));
    }
    cfg.train.validate()?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let kit = SynthKit::new(cfg.train.grid, cfg.train.model.channels, cfg.train.seed)?;
    let scenes = eval_pool(cfg);
    let report = evaluate(&params, &kit, &scenes, &cfg.train.conflict, &cfg.thresholds)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&report, &cfg.thresholds))?;
    if dump_heatmaps {
        let dir = out.join("dumps");
        ensure_dir(&dir)?;
        for (idx, scene) in scenes.iter().enumerate() {
            dump_scene_pgms(&dir, idx, &params, &kit, scene, cfg)?;
        }
    }
    println!(
        "evaluated {} scenes: mAP {}",
        report.n_scenes,
        fmt_f64(report.map)
    );
    Ok(())
}

/// Write the train and eval scene pools as plain text fixtures.
pub fn cmd_gen_scenes(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    let train_dir = out.join("train");
    let eval_dir = out.join("eval");
    ensure_dir(&train_dir)?;
    ensure_dir(&eval_dir)?;
    cfg.write_resolved(out)?;
    for (dir, seeds) in [
        (&train_dir, train_scene_seeds(cfg.train.seed, cfg.train.n_scenes)),
        (&eval_dir, eval_scene_seeds(cfg.train.seed, cfg.eval_scenes)),
    ] {
        for (i, seed) in seeds.into_iter().enumerate() {
            let scene = generate_scene(seed, &cfg.train.grid, &cfg.train.conflict);
            write_file(&dir.join(format!("scene_{i:04}.txt")), &scene_to_text(&scene))?;
        }
    }
    println!(
        "wrote {} train + {} eval scenes under {}",
        cfg.train.n_scenes,
        cfg.eval_scenes,
        out.display()
    );
    Ok(())
}

/// Parse a scene fixture back; used by tools and tests.
pub fn read_scene_file(path: &Path, cfg: &RunConfig) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_text(&text, &cfg.train.grid)
}

/// Run every verification suite and format the report table. The boolean is
/// the overall verdict.
pub fn selftest_report(seed: u64, cases_per_op: usize, graph_instances: usize) -> Result<(String, bool)> {
    let reports = check::run_all(seed, cases_per_op, graph_instances)?;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>6} {:>12}  verdict\n",
        "suite", "cases", "max_err"
    ));
    let mut all = true;
    for r in &reports {
        all &= r.passed;
        out.push_str(&format!(
            "{:<22} {:>6} {:>12.3e}  {}\n",
            r.name,
            r.cases,
            r.max_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out.push_str(&format!(
        "{} of {} suites passed\n",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    ));
    Ok((out, all))
}

pub fn cmd_selftest(seed: u64) -> Result<()> {
    let (table, ok) = selftest_report(seed, 20, 20)?;
    print!("{table}");
    if ok {
        Ok(())
    } else {
        Err(Error::Numerical("selftest failed".into()))
    }
}

/// Worker cap: ECFUSION_THREADS if set, otherwise 4.
pub fn worker_cap() -> usize {
    std::env::var("ECFUSION_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AblateCell {
    sfa: bool,
    dqr: bool,
}

impl AblateCell {
    fn name(&self) -> String {
        format!(
            "sfa={},dqr={}",
            if self.sfa { "on" } else { "off" },
            if self.dqr { "on" } else { "off" }
        )
    }

    fn dir_name(&self) -> String {
        format!(
            "sfa_{}_dqr_{}",
            if self.sfa { "on" } else { "off" },
            if self.dqr { "on" } else { "off" }
        )
    }

    fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.train.model.freeze_flow = !self.sfa;
        if !self.dqr {
            out.train.model.k_lidar = 0;
            out.train.model.k_camera = 0;
        }
        out
    }
}

fn parse_axes(grid: &str) -> Result<Vec<AblateCell>> {
    let mut ablate_sfa = false;
    let mut ablate_dqr = false;
    for part in grid.split(',') {
        match part.trim() {
            "sfa" => ablate_sfa = true,
            "dqr" => ablate_dqr = true,
            "" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis {other:?} (want sfa and/or dqr)"
                )))
            }
        }
    }
    if !ablate_sfa && !ablate_dqr {
        return Err(Error::Config("ablation grid needs at least one axis".into()));
    }
    let sfa_states: &[bool] = if ablate_sfa { &[false, true] } else { &[true] };
    let dqr_states: &[bool] = if ablate_dqr { &[false, true] } else { &[true] };
    let mut cells = Vec::new();
    for &sfa in sfa_states {
        for &dqr in dqr_states {
            cells.push(AblateCell { sfa, dqr });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
struct AblateRow {
    cell: String,
    seed: u64,
    map: f64,
    recall_both: f64,
    recall_lidar_only: f64,
    recall_camera_only: f64,
    recall_unique: f64,
    center_err: f64,
}

/// One ablation job: train a cell variant at one seed, evaluate, write the
/// run's artifacts under its own directory.
fn ablate_job(cell: AblateCell, seed: u64, base: &RunConfig, out: &Path) -> Result<AblateRow> {
    let mut cfg = cell.apply(base);
    cfg.train.seed = seed;
    let dir = out.join(cell.dir_name()).join(format!("seed{seed}"));
    ensure_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let result = train(&cfg.train)?;
    write_file(&dir.join("train_log.csv"), &train_log_csv(&result))?;
    save_checkpoint(&dir.join("model.ckpt"), &result.params)?;
    let kit = SynthKit::new(cfg.train.grid, cfg.train.model.channels, cfg.train.seed)?;
    let scenes = eval_pool(&cfg);
    let report = evaluate(
        &result.params,
        &kit,
        &scenes,
        &cfg.train.conflict,
        &cfg.thresholds,
    )?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&report, &cfg.thresholds))?;
    let unique_hit = report.buckets.lidar_only.hit + report.buckets.camera_only.hit;
    let unique_total = report.buckets.lidar_only.total + report.buckets.camera_only.total;
    Ok(AblateRow {
        cell: cell.name(),
        seed,
        map: report.map,
        recall_both: report.buckets.both.recall().unwrap_or(f64::NAN),
        recall_lidar_only: report.buckets.lidar_only.recall().unwrap_or(f64::NAN),
        recall_camera_only: report.buckets.camera_only.recall().unwrap_or(f64::NAN),
        recall_unique: if unique_total == 0 {
            f64::NAN
        } else {
            unique_hit as f64 / unique_total as f64
        },
        center_err: report.center_err.unwrap_or(f64::NAN),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len() as f64;
    (mean, var.sqrt())
}

/// Train and evaluate the ablation grid over `n_seeds` seeds (master seed,
/// master+1, ...). Cells run on up to [`worker_cap`] threads; the summary
/// is reduced in a fixed order regardless of scheduling.
pub fn cmd_ablate(cfg: &RunConfig, grid: &str, n_seeds: usize, out: &Path) -> Result<()> {
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    cfg.train.validate()?;
    let cells = parse_axes(grid)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let jobs: Vec<(AblateCell, u64)> = cells
        .iter()
        .flat_map(|&c| (0..n_seeds as u64).map(move |i| (c, cfg.train.seed + i)))
        .collect();
    let results: Mutex<Vec<Option<Result<AblateRow>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = worker_cap().min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (cell, seed) = jobs[i];
                let row = ablate_job(cell, seed, cfg, out);
                results.lock().expect("ablate worker poisoned")[i] = Some(row);
            });
        }
    });
    let rows: Vec<AblateRow> = results
        .into_inner()
        .expect("ablate results poisoned")
        .into_iter()
        .map(|slot| slot.expect("ablate job not run"))
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from(
        "cell,seed,map,recall_both,recall_lidar_only,recall_camera_only,recall_unique,center_err\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.cell,
            r.seed,
            fmt_f64(r.map),
            fmt_f64(r.recall_both),
            fmt_f64(r.recall_lidar_only),
            fmt_f64(r.recall_camera_only),
            fmt_f64(r.recall_unique),
            fmt_f64(r.center_err)
        ));
    }
    for cell in &cells {
        let name = cell.name();
        let of_cell: Vec<&AblateRow> = rows.iter().filter(|r| r.cell == name).collect();
        for (stat, pick) in [("mean", 0usize), ("stddev", 1)] {
            let stats: Vec<(f64, f64)> = [
                of_cell.iter().map(|r| r.map).collect::<Vec<_>>(),
                of_cell.iter().map(|r| r.recall_both).collect(),
                of_cell.iter().map(|r| r.recall_lidar_only).collect(),
                of_cell.iter().map(|r| r.recall_camera_only).collect(),
                of_cell.iter().map(|r| r.recall_unique).collect(),
                of_cell.iter().map(|r| r.center_err).collect(),
            ]
            .iter()
            .map(|vals| mean_std(vals))
            .collect();
            let take = |i: usize| if pick == 0 { stats[i].0 } else { stats[i].1 };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                name,
                stat,
                fmt_f64(take(0)),
                fmt_f64(take(1)),
                fmt_f64(take(2)),
                fmt_f64(take(3)),
                fmt_f64(take(4)),
                fmt_f64(take(5))
            ));
        }
    }
    write_file(&out.join("summary.csv"), &csv)?;
    println!(
        "ablation grid: {} cells x {} seeds -> {}",
        cells.len(),
        n_seeds,
        out.join("summary.csv").display()
    );
    Ok(())
}
