//! End-to-end static-map estimation: heuristics, guided instance selection,
//! masked training and evaluation, with every intermediate written to disk.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! static_maps/<name>.png           final static maps (1 = static)
//! heuristics/<stem>_{sfm,residual,bound,combined}.png
//! residuals/<stem>.hugr
//! training/partial_<fold>.csv, training/final.csv
//! field.hugf, renders/<name>.png
//! report.json, summary.txt, timing.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{View, ViewDataset};
use crate::field::{render_image, residuals_from_field, train, TrainConfig, VoxelField};
use crate::geometry::Aabb;
use crate::heuristics::{
    combine, residual_bound, residual_heuristic, sfm_heuristic, static_feature_points, HeuristicMap,
    HeuristicThresholds, Preset, ResidualMap,
};
use crate::metrics::{
    image_scores, mean_image_scores, mean_segmentation_scores, segmentation_scores, ImageScores, SegmentationScores,
};
use crate::raster::{check_dims, BinaryMask, RasterError};
use crate::segmentation::{
    BuiltinSegmenter, RemoteBackend, SegmenterBackend, DEFAULT_GRID_RESOLUTION, DEFAULT_K, DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MIN_SIZE,
};
use crate::sfm::SparseReconstruction;
use crate::synth::SCENE_HALF_EXTENT;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    SfmHeuristic,
    PartialTraining,
    ResidualHeuristic,
    InstanceSegmentation,
    StaticMap,
    FinalTraining,
    Rendering,
    Evaluation,
    Output,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::SfmHeuristic => "sfm-heuristic",
            Stage::PartialTraining => "partial-training",
            Stage::ResidualHeuristic => "residual-heuristic",
            Stage::InstanceSegmentation => "instance-segmentation",
            Stage::StaticMap => "static-map",
            Stage::FinalTraining => "final-training",
            Stage::Rendering => "rendering",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}{}: {source}", image.as_ref().map(|i| format!(" [{i}]")).unwrap_or_default())]
    Stage {
        stage: Stage,
        image: Option<String>,
        #[source]
        source: BoxError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Stage { stage, .. } => *stage,
        }
    }
}

fn at<E: Into<BoxError>>(stage: Stage, image: Option<&str>) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage,
        image: image.map(str::to_string),
        source: e.into(),
    }
}

/// Union of the instance masks whose overlap ratio `|m ∩ H| / |m|` reaches
/// `t_m`; empty masks are skipped.
pub fn guided_static_map(h: &HeuristicMap, instance_masks: &[BinaryMask], t_m: f64) -> Result<BinaryMask, RasterError> {
    let kept = kept_instances(h, instance_masks, t_m)?;
    let mut out = BinaryMask::zeros(h.mask.width(), h.mask.height());
    for i in kept {
        out = out.union(&instance_masks[i])?;
    }
    Ok(out)
}

/// Indices of the instance masks selected by [`guided_static_map`].
pub fn kept_instances(h: &HeuristicMap, instance_masks: &[BinaryMask], t_m: f64) -> Result<Vec<usize>, RasterError> {
    if !(t_m > 0.0 && t_m <= 1.0) {
        return Err(RasterError::Invalid(format!("t_m = {t_m} not in (0, 1]")));
    }
    let mut kept = Vec::new();
    for (i, m) in instance_masks.iter().enumerate() {
        check_dims(h.mask.dims(), m.dims())?;
        let size = m.count_ones();
        if size == 0 {
            continue;
        }
        if m.overlap(&h.mask)? as f64 / size as f64 >= t_m {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmenterConfig {
    Builtin {
        #[serde(default = "default_k")]
        k: f64,
        #[serde(default = "default_min_size")]
        min_size: usize,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_k() -> f64 {
    DEFAULT_K
}

fn default_min_size() -> usize {
    DEFAULT_MIN_SIZE
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig::Builtin {
            k: DEFAULT_K,
            min_size: DEFAULT_MIN_SIZE,
        }
    }
}

impl SegmenterConfig {
    pub fn build(&self) -> Result<Box<dyn SegmenterBackend>, BoxError> {
        Ok(match self {
            SegmenterConfig::Builtin { k, min_size } => {
                if !(*k > 0.0) || *min_size == 0 {
                    return Err("builtin segmenter needs k > 0 and min_size ≥ 1".into());
                }
                Box::new(BuiltinSegmenter::new(*k, *min_size))
            }
            SegmenterConfig::Remote { endpoint, max_in_flight } => {
                Box::new(RemoteBackend::with_limit(endpoint.clone(), *max_in_flight))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmenterConfig::Builtin { .. } => "builtin",
            SegmenterConfig::Remote { .. } => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Grid resolution of the final field.
    pub resolution: usize,
    /// Grid resolution of the partial fields behind the residual maps.
    pub partial_resolution: usize,
    pub half_extent: f64,
    pub init_density: f64,
    pub render_samples: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            partial_resolution: 48,
            half_extent: SCENE_HALF_EXTENT,
            init_density: 0.0,
            render_samples: 64,
        }
    }
}

impl FieldConfig {
    pub fn initial_field(&self, resolution: usize) -> Result<VoxelField, BoxError> {
        Ok(VoxelField::new(
            [resolution; 3],
            Aabb::cube(self.half_extent),
            self.init_density,
            [0.0; 3],
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Name of the threshold preset the thresholds came from, if any.
    pub preset: Option<String>,
    pub thresholds: HeuristicThresholds,
    pub segmenter: SegmenterConfig,
    pub grid_resolution: u32,
    pub field: FieldConfig,
    pub partial: TrainConfig,
    /// Residuals of each training view come from a partial field trained
    /// without it, with views split into this many folds by index (capped
    /// at the view count, which makes it leave-one-out). One fold trains a
    /// single partial field on every view.
    pub residual_folds: usize,
    /// `None` skips final training and test-view rendering.
    pub final_train: Option<TrainConfig>,
    pub output_dir: PathBuf,
    pub write_intermediates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Some(Preset::Kubric.name().to_string()),
            thresholds: Preset::Kubric.thresholds(),
            segmenter: SegmenterConfig::default(),
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            field: FieldConfig::default(),
            partial: TrainConfig {
                iterations: 300,
                lr_final: 2000.0,
                ..TrainConfig::default()
            },
            residual_folds: 16,
            final_train: Some(TrainConfig::default()),
            output_dir: PathBuf::from("hugs_out"),
            write_intermediates: true,
        }
    }
}

impl PipelineConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset.name().to_string()),
            thresholds: preset.thresholds(),
            ..Self::default()
        }
    }

    /// Seeds partial training with `seed` and final training with `seed + 1`.
    pub fn set_seed(&mut self, seed: u64) {
        self.partial.seed = seed;
        if let Some(f) = &mut self.final_train {
            f.seed = seed.wrapping_add(1);
        }
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        self.thresholds.validate()?;
        self.partial.validate()?;
        if let Some(f) = &self.final_train {
            f.validate()?;
        }
        if self.grid_resolution == 0 {
            return Err("grid_resolution must be at least 1".into());
        }
        if self.residual_folds == 0 {
            return Err("residual_folds must be at least 1".into());
        }
        if self.field.resolution.min(self.field.partial_resolution) < 2 || self.field.render_samples == 0 || !(self.field.half_extent > 0.0) {
            return Err("field needs resolution ≥ 2, render_samples ≥ 1 and a positive extent".into());
        }
        Ok(())
    }

    /// Reads a sectioned `key = value` file. Paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = at(Stage::Config, None);
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return Err(err(format!("{}: {e}", path.display()))),
        };
        let file: ConfigFile = match toml::from_str(&text) {
            Ok(f) => f,
            Err(e) => return Err(at(Stage::Config, None)(format!("{}: {e}", path.display()))),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        file.into_config(base).map_err(at(Stage::Config, None))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    heuristics: HeuristicsSection,
    segmenter: Option<SegmenterConfig>,
    grid_resolution: Option<u32>,
    field: Option<FieldConfig>,
    partial: Option<TrainSection>,
    #[serde(rename = "final")]
    final_train: Option<TrainSection>,
    output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HeuristicsSection {
    preset: Option<String>,
    t_sfm: Option<f64>,
    t_cr: Option<f64>,
    t_m: Option<f64>,
    group_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    folds: Option<usize>,
    enabled: Option<bool>,
    iterations: Option<usize>,
    batch_rays: Option<usize>,
    lr_initial: Option<f64>,
    lr_final: Option<f64>,
    momentum: Option<f64>,
    samples_per_ray: Option<usize>,
}

impl TrainSection {
    fn apply(&self, base: &mut TrainConfig) {
        let TrainSection {
            iterations,
            batch_rays,
            lr_initial,
            lr_final,
            momentum,
            samples_per_ray,
            ..
        } = *self;
        base.iterations = iterations.unwrap_or(base.iterations);
        base.batch_rays = batch_rays.unwrap_or(base.batch_rays);
        base.lr_initial = lr_initial.unwrap_or(base.lr_initial);
        base.lr_final = lr_final.unwrap_or(base.lr_final);
        base.momentum = momentum.unwrap_or(base.momentum);
        base.samples_per_ray = samples_per_ray.unwrap_or(base.samples_per_ray);
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    intermediates: Option<bool>,
}

impl ConfigFile {
    fn into_config(self, base: &Path) -> Result<PipelineConfig, BoxError> {
        let mut cfg = match &self.heuristics.preset {
            Some(p) => PipelineConfig::with_preset(p.parse::<Preset>()?),
            None => PipelineConfig::default(),
        };
        let h = &self.heuristics;
        let overridden = h.t_sfm.is_some() || h.t_cr.is_some() || h.t_m.is_some() || h.group_size.is_some();
        if overridden {
            cfg.preset = h.preset.clone().map(|p| format!("{p} (overridden)"));
        }
        if let Some(v) = h.t_sfm {
            cfg.thresholds.t_sfm = v;
        }
        if let Some(v) = h.t_cr {
            cfg.thresholds.t_cr = v;
        }
        if let Some(v) = h.t_m {
            cfg.thresholds.t_m = v;
        }
        if let Some(v) = h.group_size {
            cfg.thresholds.group_size = v;
        }
        if let Some(s) = self.segmenter {
            cfg.segmenter = s;
        }
        if let Some(g) = self.grid_resolution {
            cfg.grid_resolution = g;
        }
        if let Some(f) = self.field {
            cfg.field = f;
        }
        if let Some(p) = &self.partial {
            if p.enabled.is_some() {
                return Err("[partial] has no `enabled` key".into());
            }
            cfg.residual_folds = p.folds.unwrap_or(cfg.residual_folds);
            p.apply(&mut cfg.partial);
        }
        if let Some(f) = &self.final_train {
            if f.folds.is_some() {
                return Err("[final] has no `folds` key".into());
            }
            if f.enabled == Some(false) {
                cfg.final_train = None;
            } else {
                let mut t = cfg.final_train.take().unwrap_or_default();
                f.apply(&mut t);
                cfg.final_train = Some(t);
            }
        }
        if let Some(d) = self.output.dir {
            cfg.output_dir = base.join(d);
        }
        if let Some(i) = self.output.intermediates {
            cfg.write_intermediates = i;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    /// Paths relative to the output directory.
    pub static_map: String,
    pub intermediates: BTreeMap<String, String>,
    pub in_reconstruction: bool,
    pub static_points: usize,
    pub instances: usize,
    pub kept_instances: usize,
    pub static_fraction: f64,
    pub scores: Option<SegmentationScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub name: String,
    pub render: String,
    pub scores: ImageScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub preset: Option<String>,
    pub t_sfm: f64,
    pub t_cr: f64,
    pub t_m: f64,
    pub group_size: usize,
    pub segmenter: String,
    pub grid_resolution: u32,
    pub residual_folds: usize,
    pub field_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub header: ReportHeader,
    pub images: Vec<ImageReport>,
    pub segmentation: Option<SegmentationScores>,
    pub field_checkpoint: Option<String>,
    pub renders: Vec<RenderReport>,
    pub rendering: Option<ImageScores>,
    /// Wall-clock seconds per stage; also written to `timing.json` rather
    /// than `report.json` so reports stay reproducible.
    #[serde(skip)]
    pub timing: BTreeMap<String, f64>,
}

impl PipelineReport {
    pub fn summary(&self) -> String {
        let h = &self.header;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "preset {} | t_sfm {} t_cr {} t_m {} group {} | segmenter {} grid {}",
            h.preset.as_deref().unwrap_or("custom"),
            h.t_sfm,
            h.t_cr,
            h.t_m,
            h.group_size,
            h.segmenter,
            h.grid_resolution
        );
        for im in &self.images {
            let _ = write!(
                s,
                "{:<16} static {:>6.2}%  points {:>4}  instances {:>3}/{:<3}",
                im.name,
                100.0 * im.static_fraction,
                im.static_points,
                im.kept_instances,
                im.instances
            );
            if let Some(sc) = im.scores {
                let _ = write!(s, "  mIoU {:.4}  F1 {:.4}", sc.miou, sc.f1);
            }
            if !im.in_reconstruction {
                s.push_str("  (not in reconstruction)");
            }
            s.push('\n');
        }
        if let Some(sc) = self.segmentation {
            let _ = writeln!(s, "mean mIoU {:.4}  F1 {:.4}  transient IoU {:.4}", sc.miou, sc.f1, sc.transient_iou);
        }
        for r in &self.renders {
            let _ = writeln!(s, "{:<16} PSNR {:.3} dB  SSIM {:.4}", r.name, r.scores.psnr, r.scores.ssim);
        }
        if let Some(sc) = self.rendering {
            let _ = writeln!(s, "mean PSNR {:.3} dB  SSIM {:.4}", sc.psnr, sc.ssim);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

fn write_mask(out: &Path, rel: &str, mask: &BinaryMask, image: &str, stage: Stage) -> Result<(), PipelineError> {
    mask.save_png(&out.join(rel)).map_err(at(stage, Some(image)))
}

struct Prepared {
    static_points: Vec<[f64; 2]>,
    in_reconstruction: bool,
    h_sfm: HeuristicMap,
}

/// Residual maps for every training view, cross-fitted over `folds`.
pub fn partial_residuals(
    dataset: &ViewDataset,
    cfg: &PipelineConfig,
    mut on_trace: impl FnMut(usize, &crate::field::LossTrace),
) -> Result<Vec<ResidualMap>, PipelineError> {
    let train_views = dataset.train_views();
    let init = cfg
        .field
        .initial_field(cfg.field.partial_resolution)
        .map_err(at(Stage::PartialTraining, None))?;
    let samples = cfg.field.render_samples;
    if cfg.residual_folds <= 1 || train_views.len() < 2 {
        let out = train(&init, dataset, None, &cfg.partial).map_err(at(Stage::PartialTraining, None))?;
        on_trace(0, &out.trace);
        return residuals_from_field(&out.field, dataset, samples).map_err(at(Stage::ResidualHeuristic, None));
    }
    let folds = cfg.residual_folds.min(train_views.len());
    let mut residuals: Vec<Option<ResidualMap>> = vec![None; train_views.len()];
    for k in 0..folds {
        let subset: Vec<View> = train_views
            .iter()
            .enumerate()
            .filter(|(i, _)| i % folds != k)
            .map(|(_, v)| (*v).clone())
            .collect();
        let subset = ViewDataset { views: subset };
        let tc = TrainConfig {
            seed: cfg.partial.seed.wrapping_add(k as u64),
            ..cfg.partial.clone()
        };
        let out = train(&init, &subset, None, &tc).map_err(at(Stage::PartialTraining, None))?;
        on_trace(k, &out.trace);
        for (i, v) in train_views.iter().enumerate().filter(|(i, _)| i % folds == k) {
            let rendered = render_image(&out.field, &v.camera, &v.pose, samples).map_err(at(Stage::ResidualHeuristic, Some(&v.name)))?;
            residuals[i] = Some(crate::heuristics::residual_map(&rendered, &v.image).map_err(at(Stage::ResidualHeuristic, Some(&v.name)))?);
        }
    }
    Ok(residuals.into_iter().map(|r| r.expect("every view is held out once")).collect())
}

/// Runs the whole pipeline over the training views of `dataset`, writing
/// results under `cfg.output_dir`.
pub fn run_pipeline(dataset: &ViewDataset, recon: &SparseReconstruction, cfg: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    cfg.validate().map_err(at(Stage::Config, None))?;
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(at(Stage::Output, None))?;
    let backend = cfg.segmenter.build().map_err(at(Stage::Config, None))?;
    let train_views = dataset.train_views();
    if train_views.is_empty() {
        return Err(at(Stage::Config, None)("dataset has no training views"));
    }
    let th = cfg.thresholds;
    let mut timing = BTreeMap::new();

    let t = Instant::now();
    let prepared: Vec<Prepared> = train_views
        .par_iter()
        .map(|v| {
            let err = |e: crate::heuristics::HeuristicError| at(Stage::SfmHeuristic, Some(&v.name))(e);
            let (static_points, in_reconstruction) = match recon.image_by_name(&v.name) {
                Some(rec) => {
                    let cam = recon.camera_of(rec);
                    if (cam.width, cam.height) != v.image.dims() {
                        return Err(at(Stage::SfmHeuristic, Some(&v.name))(format!(
                            "reconstruction camera is {}x{}, image is {}x{}",
                            cam.width,
                            cam.height,
                            v.image.width(),
                            v.image.height()
                        )));
                    }
                    (static_feature_points(recon, rec.image_id, th.t_sfm).map_err(err)?, true)
                }
                None => {
                    log::warn!("{} is not in the reconstruction; its SfM heuristic is empty", v.name);
                    (Vec::new(), false)
                }
            };
            let h_sfm = sfm_heuristic(&v.image, &static_points, backend.as_ref(), th.group_size).map_err(err)?;
            Ok(Prepared {
                static_points,
                in_reconstruction,
                h_sfm,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    timing.insert("sfm_heuristic".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut traces = Vec::new();
    let residuals = partial_residuals(dataset, cfg, |k, trace| traces.push((k, trace.to_csv())))?;
    timing.insert("partial_training".into(), t.elapsed().as_secs_f64());
    if cfg.write_intermediates {
        for (k, csv) in &traces {
            crate::raster::write_file(&out.join(format!("training/partial_{k}.csv")), csv.as_bytes())
                .map_err(at(Stage::Output, None))?;
        }
    }

    let t = Instant::now();
    let per_image: Vec<(ImageReport, BinaryMask)> = train_views
        .par_iter()
        .zip(prepared.par_iter())
        .zip(residuals.par_iter())
        .map(|((v, prep), r)| {
            let name = v.name.as_str();
            let s = stem(name);
            let h_cr = residual_heuristic(r);
            let h_bound = residual_bound(r, th.t_cr).map_err(at(Stage::ResidualHeuristic, Some(name)))?;
            let h = combine(&prep.h_sfm, &h_cr, &h_bound).map_err(at(Stage::ResidualHeuristic, Some(name)))?;
            let instances = backend
                .segment_instances(&v.image, cfg.grid_resolution)
                .map_err(at(Stage::InstanceSegmentation, Some(name)))?;
            let kept = kept_instances(&h, &instances, th.t_m).map_err(at(Stage::StaticMap, Some(name)))?;
            let static_map = guided_static_map(&h, &instances, th.t_m).map_err(at(Stage::StaticMap, Some(name)))?;

            let mut intermediates = BTreeMap::new();
            if cfg.write_intermediates {
                for (key, map) in [("sfm", &prep.h_sfm), ("residual", &h_cr), ("bound", &h_bound), ("combined", &h)] {
                    let rel = format!("heuristics/{s}_{key}.png");
                    write_mask(out, &rel, &map.mask, name, Stage::Output)?;
                    intermediates.insert(key.to_string(), rel);
                }
                let rel = format!("residuals/{s}.hugr");
                r.save(&out.join(&rel)).map_err(at(Stage::Output, Some(name)))?;
                intermediates.insert("residual_values".to_string(), rel);
            }
            let rel = format!("static_maps/{s}.png");
            write_mask(out, &rel, &static_map, name, Stage::Output)?;
            let scores = match &v.gt_static {
                Some(gt) => Some(segmentation_scores(&static_map, gt).map_err(at(Stage::Evaluation, Some(name)))?),
                None => None,
            };
            Ok((
                ImageReport {
                    name: v.name.clone(),
                    static_map: rel,
                    intermediates,
                    in_reconstruction: prep.in_reconstruction,
                    static_points: prep.static_points.len(),
                    instances: instances.iter().filter(|m| !m.is_all_zero()).count(),
                    kept_instances: kept.len(),
                    static_fraction: static_map.fraction_ones(),
                    scores,
                },
                static_map,
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    timing.insert("static_maps".into(), t.elapsed().as_secs_f64());

    let (images, maps): (Vec<ImageReport>, Vec<BinaryMask>) = per_image.into_iter().unzip();
    let seg: Vec<SegmentationScores> = images.iter().filter_map(|i| i.scores).collect();
    let mut report = PipelineReport {
        header: ReportHeader {
            preset: cfg.preset.clone(),
            t_sfm: th.t_sfm,
            t_cr: th.t_cr,
            t_m: th.t_m,
            group_size: th.group_size,
            segmenter: cfg.segmenter.name().to_string(),
            grid_resolution: cfg.grid_resolution,
            residual_folds: cfg.residual_folds,
            field_resolution: cfg.field.resolution,
        },
        images,
        segmentation: mean_segmentation_scores(&seg),
        field_checkpoint: None,
        renders: Vec::new(),
        rendering: None,
        timing: BTreeMap::new(),
    };

    if let Some(final_cfg) = &cfg.final_train {
        let t = Instant::now();
        let init = cfg
            .field
            .initial_field(cfg.field.resolution)
            .map_err(at(Stage::FinalTraining, None))?;
        let trained = train(&init, dataset, Some(&maps), final_cfg).map_err(at(Stage::FinalTraining, None))?;
        timing.insert("final_training".into(), t.elapsed().as_secs_f64());
        trained.field.save(&out.join("field.hugf")).map_err(at(Stage::Output, None))?;
        trained
            .trace
            .save_csv(&out.join("training/final.csv"))
            .map_err(at(Stage::Output, None))?;
        report.field_checkpoint = Some("field.hugf".into());

        let t = Instant::now();
        for v in dataset.test() {
            let img = render_image(&trained.field, &v.camera, &v.pose, cfg.field.render_samples)
                .map_err(at(Stage::Rendering, Some(&v.name)))?;
            let rel = format!("renders/{}.png", stem(&v.name));
            img.save_png(&out.join(&rel)).map_err(at(Stage::Output, Some(&v.name)))?;
            let scores = image_scores(&img, &v.image).map_err(at(Stage::Evaluation, Some(&v.name)))?;
            report.renders.push(RenderReport {
                name: v.name.clone(),
                render: rel,
                scores,
            });
        }
        let all: Vec<ImageScores> = report.renders.iter().map(|r| r.scores).collect();
        report.rendering = mean_image_scores(&all);
        timing.insert("rendering".into(), t.elapsed().as_secs_f64());
    }

    report.timing = timing;
    let write = |rel: &str, bytes: &[u8]| crate::raster::write_file(&out.join(rel), bytes).map_err(at(Stage::Output, None));
    write("report.json", report.to_json().as_bytes())?;
    write("summary.txt", report.summary().as_bytes())?;
    let timing_json = serde_json::to_string_pretty(&report.timing).expect("timing serializes");
    write("timing.json", timing_json.as_bytes())?;
    Ok(report)
}
