use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use num_complex::Complex64;
use pcrnn::archive::Archive;
use pcrnn::data::{slices_from_archive, slices_to_archive, volume_norms, IntensityScale, Slice};
use pcrnn::fourier::{fft2c, ComplexImage};
use pcrnn::model::{init_params, PcrnnParams};
use pcrnn::objectives::{mean_metrics, metrics, Metrics, SsimConfig};
use pcrnn::recon::{evaluate_image, reconstruct as run_method, Method, Reconstructor};
use pcrnn::trainer::{load_checkpoint, load_params, save_params, train as run_training, History, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, Split};
use crate::error::{CliError, CliResult};
use crate::io::{create_dir, load_image_dir, quantize, save_image, write_file, write_png16, ImageMeta, Manifest};

/// Largest accepted relative sampled-column mismatch of an emitted PC-RNN image.
pub const DC_TOLERANCE: f64 = 1e-5;
pub const GROUND_TRUTH_DIR: &str = "ground_truth";

fn manifest_config(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Writes `train.pcrn`, `val.pcrn` and `test.pcrn` plus a manifest.
pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    cfg.validate()?;
    create_dir(out)?;
    let mut manifest = Manifest::new("simulate", cfg.seed, manifest_config(cfg)?);
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let slices = cfg.build_split(split)?;
        counts.insert(split.name(), slices.len());
        let archive = slices_to_archive(&slices, json!({ "split": split.name(), "seed": cfg.seed }))?;
        let path = out.join(format!("{}.pcrn", split.name()));
        archive.save(&path)?;
        manifest.record(out, &path)?;
    }
    manifest.summary = json!({ "slices": counts });
    manifest.save(out)?;
    Ok(manifest)
}

pub fn load_split(cfg: &RunConfig, split: Split, data_dir: Option<&Path>) -> CliResult<Vec<Slice>> {
    match data_dir.or(cfg.dataset_dir.as_deref()) {
        Some(dir) => Ok(slices_from_archive(&Archive::load(&dir.join(format!("{}.pcrn", split.name())))?)?),
        None => cfg.build_split(split),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best: Option<Metrics>,
    pub history: History,
}

/// Trains from scratch, or resumes from `cfg.checkpoint` when set.
pub fn train(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>) -> CliResult<TrainSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let model_cfg = cfg.model_config()?;
    let state = match &cfg.checkpoint {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if state.params.config != model_cfg {
                return Err(CliError::CheckpointMismatch(path.display().to_string()));
            }
            state
        }
        None => TrainState::new(init_params(&model_cfg, cfg.seed), cfg.seed),
    };
    let train_set = load_split(cfg, Split::Train, data_dir)?;
    let val_set = load_split(cfg, Split::Val, data_dir)?;
    let outcome = run_training(state, &train_set, &val_set, &cfg.train_config(Some(out.to_path_buf())))?;
    save_params(&out.join("final.ckpt"), &outcome.state.params, cfg.seed)?;
    write_file(&out.join("history.csv"), outcome.history.to_csv())?;
    let summary = TrainSummary {
        steps: outcome.state.step(),
        epochs: outcome.state.epoch,
        best_epoch: outcome.best.as_ref().map(|b| b.0),
        best: outcome.best.as_ref().map(|b| b.1),
        history: outcome.history,
    };
    write_file(&out.join("history.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut manifest = Manifest::new("train", cfg.seed, manifest_config(cfg)?);
    for name in ["final.ckpt", "best.ckpt", "last.ckpt", "history.csv", "history.json"] {
        let path = out.join(name);
        if path.exists() {
            manifest.record(out, &path)?;
        }
    }
    manifest.summary = json!({ "steps": summary.steps, "best_epoch": summary.best_epoch, "best": summary.best });
    manifest.save(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub id: String,
    pub volume_id: String,
    pub method: String,
    pub accel: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl SliceRow {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            psnr: self.psnr,
            ssim: self.ssim,
            nmse: self.nmse,
        }
    }
}

pub fn write_rows(path: &Path, rows: &[SliceRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows(path: &Path) -> CliResult<Vec<SliceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SliceRow>, _>>()?)
}

fn slice_accel(cfg: &RunConfig, slice: &Slice) -> u32 {
    slice.acquisition.mask.spec().map_or(cfg.acceleration, |s| s.acceleration)
}

pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<PcrnnParams> {
    let path = checkpoint
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| CliError::Config("method pcrnn needs a checkpoint".into()))?;
    let params = load_params(path)?;
    let expected = cfg.model_config()?;
    if params.config != expected {
        return Err(CliError::CheckpointMismatch(format!(
            "{} holds {:?} with channels {:?}, config asks for {:?} with channels {:?}",
            path.display(),
            params.config.task,
            params.config.modules.each_ref().map(|m| m.resblock_channels),
            expected.task,
            expected.modules.each_ref().map(|m| m.resblock_channels),
        )));
    }
    Ok(params)
}

/// Reconstructs a split with `cfg.method`, writing `<out>/<method>/`,
/// `<out>/ground_truth/`, PC-RNN stages as `<out>/pcrnn_x{1,2,3}/`, and
/// `metrics_<method>.csv`.
pub fn reconstruct(
    cfg: &RunConfig,
    out: &Path,
    data_dir: Option<&Path>,
    split: Split,
    checkpoint: Option<&Path>,
) -> CliResult<Vec<SliceRow>> {
    cfg.validate()?;
    create_dir(out)?;
    let slices = load_split(cfg, split, data_dir)?;
    let params;
    let reconstructor = match cfg.method {
        Method::ZeroFilled => Reconstructor::ZeroFilled,
        Method::Cs => Reconstructor::Cs(cfg.cs),
        Method::Pcrnn => {
            params = load_model(cfg, checkpoint)?;
            Reconstructor::Pcrnn(&params)
        }
    };
    let method = cfg.method.name();
    let norms = volume_norms(&slices, IntensityScale::Original);
    let mut rows = Vec::with_capacity(slices.len());
    let mut manifest = Manifest::new("reconstruct", cfg.seed, manifest_config(cfg)?);
    for slice in &slices {
        let rec = run_method(slice, &reconstructor)?;
        if cfg.method == Method::Pcrnn {
            let labels = ["x1", "x2", "x3", "x_hat"];
            for (label, &error) in labels.iter().zip(&rec.dc_errors(slice)?) {
                if !(error <= DC_TOLERANCE) {
                    return Err(CliError::DataConsistency {
                        id: slice.id(),
                        image: label.to_string(),
                        error,
                    });
                }
            }
        }
        let target = slice.target_magnitude() * slice.norm_scale;
        let scale = target.iter().cloned().fold(0.0, f64::max);
        let accel = slice_accel(cfg, slice);
        let meta = |label: &str| ImageMeta {
            slice_id: slice.id(),
            volume_id: slice.volume_id.clone(),
            slice_index: slice.slice_index,
            label: label.to_string(),
            acceleration: accel,
            png_scale: scale,
        };
        let image = rec.magnitude();
        let mut written = vec![save_image(&out.join(GROUND_TRUTH_DIR), &target, &meta(GROUND_TRUTH_DIR))?];
        written.push(save_image(&out.join(method), &image, &meta(method))?);
        if let Some(stages) = rec.stage_magnitudes() {
            for (k, stage) in stages.iter().enumerate() {
                let label = format!("pcrnn_x{}", k + 1);
                written.push(save_image(&out.join(&label), stage, &meta(&label))?);
            }
        }
        for path in written {
            manifest.record(out, &path)?;
        }
        let m = evaluate_image(&image, slice, norms[&slice.volume_id], &SsimConfig::default())?;
        rows.push(SliceRow {
            id: slice.id(),
            volume_id: slice.volume_id.clone(),
            method: method.to_string(),
            accel,
            psnr: m.psnr,
            ssim: m.ssim,
            nmse: m.nmse,
        });
    }
    let csv_path = out.join(format!("metrics_{method}.csv"));
    write_rows(&csv_path, &rows)?;
    manifest.record(out, &csv_path)?;
    manifest.summary = json!({ "method": method, "split": split.name(), "mean": mean_metrics(&rows.iter().map(SliceRow::metrics).collect::<Vec<_>>()) });
    write_file(&out.join(format!("manifest_{method}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SliceRow>,
    pub mean: Metrics,
    pub volumes: BTreeMap<String, Metrics>,
}

/// Metrics of every prediction sidecar in `pred` against the matching
/// ground-truth sidecar in `gt`.
pub fn evaluate(pred: &Path, gt: &Path, out: Option<&Path>) -> CliResult<EvalReport> {
    let preds = load_image_dir(pred)?;
    let gts = load_image_dir(gt)?;
    let missing_pred: Vec<String> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let missing_gt: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(CliError::IdMismatch {
            missing_pred,
            missing_gt,
        });
    }
    let mut norms: BTreeMap<&str, f64> = BTreeMap::new();
    for (image, meta) in gts.values() {
        *norms.entry(meta.volume_id.as_str()).or_insert(0.0) += image.iter().map(|v| v * v).sum::<f64>();
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (id, (image, meta)) in &preds {
        let (target, gt_meta) = &gts[id];
        if image.dim() != target.dim() {
            return Err(CliError::ImageShape {
                id: id.clone(),
                pred: image.dim(),
                gt: target.dim(),
            });
        }
        let m = metrics(image.view(), target.view(), norms[gt_meta.volume_id.as_str()], &SsimConfig::default())?;
        rows.push(SliceRow {
            id: id.clone(),
            volume_id: gt_meta.volume_id.clone(),
            method: meta.label.clone(),
            accel: meta.acceleration,
            psnr: m.psnr,
            ssim: m.ssim,
            nmse: m.nmse,
        });
    }
    let all: Vec<Metrics> = rows.iter().map(SliceRow::metrics).collect();
    let mean = mean_metrics(&all).ok_or_else(|| CliError::MissingImages(pred.display().to_string()))?;
    let mut by_volume: BTreeMap<String, Vec<Metrics>> = BTreeMap::new();
    for r in &rows {
        by_volume.entry(r.volume_id.clone()).or_default().push(r.metrics());
    }
    let volumes = by_volume
        .into_iter()
        .map(|(k, v)| (k, mean_metrics(&v).expect("non-empty")))
        .collect();
    let report = EvalReport { rows, mean, volumes };
    if let Some(out) = out {
        create_dir(out)?;
        write_rows(&out.join("metrics.csv"), &report.rows)?;
        write_file(&out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
        write_file(&out.join("table.md"), metrics_table(&report.rows))?;
    }
    Ok(report)
}

/// Mean PSNR and SSIM per method and acceleration, one row per method and
/// one column per acceleration and metric.
pub fn metrics_table(rows: &[SliceRow]) -> String {
    let mut accels: Vec<u32> = rows.iter().map(|r| r.accel).collect();
    accels.sort_unstable();
    accels.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = String::from("| Method |");
    let mut rule = String::from("|---|");
    for a in &accels {
        out.push_str(&format!(" {a}X PSNR | {a}X SSIM |"));
        rule.push_str("---|---|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for m in methods {
        out.push_str(&format!("| {m} |"));
        for &a in &accels {
            let group: Vec<Metrics> = rows
                .iter()
                .filter(|r| r.method == m && r.accel == a)
                .map(SliceRow::metrics)
                .collect();
            match mean_metrics(&group) {
                Some(g) => out.push_str(&format!(" {:.2} | {:.4} |", g.psnr, g.ssim)),
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

const PANEL_METHODS: [&str; 3] = ["zero_filled", "cs", "pcrnn"];
const SEPARATOR: usize = 2;

fn check_zoom(zoom: [usize; 4], (h, w): (usize, usize)) -> CliResult<()> {
    let [r, c, zh, zw] = zoom;
    if zh == 0 || zw == 0 || r + zh > h || c + zw > w {
        return Err(CliError::ZoomOutOfBounds {
            window: zoom,
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Nearest-neighbour enlargement of the zoom window to the full tile size.
fn zoomed(image: &Array2<f64>, zoom: [usize; 4]) -> Array2<f64> {
    let (h, w) = image.dim();
    let [r, c, zh, zw] = zoom;
    Array2::from_shape_fn((h, w), |(i, j)| image[[r + i * zh / h, c + j * zw / w]])
}

/// Tiles side by side with white separators; a second row shows the zoom
/// window of each tile when given.
pub fn compose_panel(tiles: &[&Array2<f64>], scale: f64, zoom: Option<[usize; 4]>) -> CliResult<Array2<u16>> {
    let (h, w) = tiles.first().map(|t| t.dim()).ok_or_else(|| CliError::MissingImages("panel".into()))?;
    if let Some(z) = zoom {
        check_zoom(z, (h, w))?;
    }
    let rows = if zoom.is_some() { 2 } else { 1 };
    let n = tiles.len();
    let mut panel = Array2::from_elem((rows * h + (rows - 1) * SEPARATOR, n * w + (n - 1) * SEPARATOR), u16::MAX);
    for (k, tile) in tiles.iter().enumerate() {
        if tile.dim() != (h, w) {
            return Err(CliError::ImageShape {
                id: format!("panel tile {k}"),
                pred: tile.dim(),
                gt: (h, w),
            });
        }
        let c0 = k * (w + SEPARATOR);
        panel.slice_mut(s![0..h, c0..c0 + w]).assign(&quantize(tile, scale));
        if let Some(z) = zoom {
            let r0 = h + SEPARATOR;
            panel.slice_mut(s![r0..r0 + h, c0..c0 + w]).assign(&quantize(&zoomed(tile, z), scale));
        }
    }
    Ok(panel)
}

/// Energy of `image - reference` outside the central quarter of k-space.
pub fn high_frequency_residual(image: &Array2<f64>, reference: &Array2<f64>) -> CliResult<f64> {
    let residual = (image - reference).mapv(|v| Complex64::new(v, 0.0));
    let k = fft2c(&ComplexImage::new(residual)?)?;
    let (h, w) = k.shape();
    let (r0, c0) = (h / 4, w / 4);
    let total: f64 = k.data().iter().map(|z| z.norm_sqr()).sum();
    let centre: f64 = k.data().slice(s![r0..r0 + h / 2, c0..c0 + w / 2]).iter().map(|z| z.norm_sqr()).sum();
    Ok(total - centre)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseToFineRow {
    pub id: String,
    pub accel: u32,
    pub hf_x1: f64,
    pub hf_x2: f64,
    pub hf_x3: f64,
    pub x3_not_worse: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: Vec<SliceRow>,
    pub panels: Vec<PathBuf>,
    pub strips: Vec<PathBuf>,
    pub coarse_to_fine: Vec<CoarseToFineRow>,
    /// Share of slices whose `x3` high-frequency residual is at most `x1`'s.
    pub coarse_to_fine_fraction: Option<f64>,
}

/// Builds comparison panels, stage strips, the metrics table and the
/// coarse-to-fine check from one or more `reconstruct` output directories.
pub fn report(inputs: &[PathBuf], out: &Path, zoom: Option<[usize; 4]>) -> CliResult<ReportSummary> {
    create_dir(out)?;
    let mut summary = ReportSummary {
        rows: Vec::new(),
        panels: Vec::new(),
        strips: Vec::new(),
        coarse_to_fine: Vec::new(),
        coarse_to_fine_fraction: None,
    };
    for input in inputs {
        let gt_dir = input.join(GROUND_TRUTH_DIR);
        let gts = load_image_dir(&gt_dir)?;
        let mut methods = BTreeMap::new();
        for m in PANEL_METHODS {
            let dir = input.join(m);
            if dir.is_dir() {
                summary.rows.extend(evaluate(&dir, &gt_dir, None)?.rows);
                methods.insert(m, load_image_dir(&dir)?);
            }
        }
        if methods.is_empty() {
            return Err(CliError::MissingImages(format!("no method directories in {}", input.display())));
        }
        let stage_dirs: Vec<PathBuf> = (1..=3).map(|k| input.join(format!("pcrnn_x{k}"))).collect();
        let stages = if stage_dirs.iter().all(|d| d.is_dir()) {
            Some(stage_dirs.iter().map(|d| load_image_dir(d)).collect::<CliResult<Vec<_>>>()?)
        } else {
            None
        };
        for (id, (gt, meta)) in &gts {
            let mut tiles = vec![gt];
            for images in methods.values() {
                let (img, _) = images.get(id).ok_or_else(|| CliError::MissingImages(id.clone()))?;
                tiles.push(img);
            }
            let scale = meta.png_scale;
            let zoom = zoom.or_else(|| {
                let (h, w) = gt.dim();
                Some([h / 4, w / 4, h / 2, w / 2])
            });
            let panel = compose_panel(&tiles, scale, zoom)?;
            let path = out.join(format!("panel_{}x_{id}.png", meta.acceleration));
            write_png16(&path, &panel)?;
            summary.panels.push(path);

            if let (Some(stages), Some(pcrnn)) = (&stages, methods.get("pcrnn")) {
                let s: Vec<&Array2<f64>> = stages
                    .iter()
                    .map(|m| m.get(id).map(|v| &v.0).ok_or_else(|| CliError::MissingImages(id.clone())))
                    .collect::<CliResult<_>>()?;
                let fin = &pcrnn.get(id).ok_or_else(|| CliError::MissingImages(id.clone()))?.0;
                let strip = compose_panel(&[s[0], s[1], s[2], fin, gt], scale, None)?;
                let path = out.join(format!("strip_{}x_{id}.png", meta.acceleration));
                write_png16(&path, &strip)?;
                summary.strips.push(path);
                let hf = [
                    high_frequency_residual(s[0], gt)?,
                    high_frequency_residual(s[1], gt)?,
                    high_frequency_residual(s[2], gt)?,
                ];
                summary.coarse_to_fine.push(CoarseToFineRow {
                    id: id.clone(),
                    accel: meta.acceleration,
                    hf_x1: hf[0],
                    hf_x2: hf[1],
                    hf_x3: hf[2],
                    x3_not_worse: hf[2] <= hf[0],
                });
            }
        }
    }
    if !summary.coarse_to_fine.is_empty() {
        let ok = summary.coarse_to_fine.iter().filter(|r| r.x3_not_worse).count();
        summary.coarse_to_fine_fraction = Some(ok as f64 / summary.coarse_to_fine.len() as f64);
        let mut w = csv::Writer::from_path(out.join("coarse_to_fine.csv"))?;
        for r in &summary.coarse_to_fine {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(out, e))?;
    }
    write_rows(&out.join("report_metrics.csv"), &summary.rows)?;
    write_file(&out.join("table.md"), metrics_table(&summary.rows))?;
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
