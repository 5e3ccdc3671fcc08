use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hugs_core::dataset::{Split, ViewDataset};
use hugs_core::field::{render_image, train, TrainConfig, VoxelField};
use hugs_core::geometry::Aabb;
use hugs_core::heuristics::{
    combine, residual_bound, residual_heuristic, residual_map, sfm_heuristic, static_feature_points, HeuristicKind,
    HeuristicMap, HeuristicThresholds, ResidualMap,
};
use hugs_core::metrics::{
    image_scores, mean_image_scores, mean_segmentation_scores, segmentation_scores, threshold_sweep,
};
use hugs_core::pipeline::{run_pipeline, PipelineConfig, SegmenterConfig};
use hugs_core::raster::{BinaryMask, Image};
use hugs_core::segmentation::{BuiltinSegmenter, RemoteBackend, SegmenterBackend, DEFAULT_MAX_IN_FLIGHT};
use hugs_core::sfm::{parse_reconstruction, write_reconstruction, ModelFormat, SparseReconstruction};
use hugs_core::synth::{generate_reconstruction, generate_scene, write_dataset, SceneSpec, SCENE_HALF_EXTENT};

use crate::visualize;
use crate::{
    Cli, Command, EvalCommand, HeuristicCommand, MaskArgs, RenderArgs, SceneKind, SegmenterArg, SegmenterArgs,
    SfmCommand, SplitArg, SweepArgs, SynthArgs, TrainArgs, VisualizeCommand,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed).context("synth"),
        Command::Sfm(c) => sfm(c).context("sfm"),
        Command::Heuristic(c) => heuristic(c).context("heuristic"),
        Command::Mask(a) => mask(a, cli.seed).context("mask"),
        Command::Train(a) => train_cmd(a, cli.seed).context("train"),
        Command::Render(a) => render(a).context("render"),
        Command::Eval(c) => eval(c).context("eval"),
        Command::Visualize(c) => visualize_cmd(c).context("visualize"),
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let mut spec = match a.preset {
        SceneKind::Default => SceneSpec::with_distractor(seed),
        SceneKind::Clean => SceneSpec::clean(seed),
    };
    spec.resolution = a.resolution;
    let dataset = generate_scene(&spec)?;
    let recon = generate_reconstruction(&dataset, &spec, a.points)?;
    write_dataset(&a.out, &dataset, &recon)?;
    println!(
        "wrote {} train + {} test views ({}x{}), {} points to {}",
        dataset.train().count(),
        dataset.test().count(),
        spec.resolution,
        spec.resolution,
        recon.points3d().len(),
        a.out.display()
    );
    Ok(())
}

fn load_recon(dir: &Path, format: ModelFormat) -> Result<SparseReconstruction> {
    parse_reconstruction(dir, format).with_context(|| format!("reading sparse model {}", dir.display()))
}

fn sfm(c: &SfmCommand) -> Result<()> {
    match c {
        SfmCommand::Parse {
            input,
            format,
            out,
            out_format,
        } => {
            let recon = load_recon(input, (*format).into())?;
            println!(
                "{} cameras, {} images, {} points",
                recon.cameras().len(),
                recon.image_count(),
                recon.points3d().len()
            );
            if let Some(out) = out {
                write_reconstruction(&recon, out, (*out_format).into())?;
                println!("wrote {}", out.display());
            }
        }
        SfmCommand::Inspect { input, format, t_sfm } => {
            let recon = load_recon(input, (*format).into())?;
            let tracks: usize = recon.points3d().values().map(|p| p.track.len()).sum();
            let mean_track = tracks as f64 / recon.points3d().len().max(1) as f64;
            println!(
                "{} cameras, {} images, {} points, mean track length {:.3}",
                recon.cameras().len(),
                recon.image_count(),
                recon.points3d().len(),
                mean_track
            );
            println!("image_id,name,features,triangulated,static");
            for (id, im) in recon.images() {
                let triangulated = im.features.iter().filter(|f| f.point3d_id.is_some()).count();
                let stat = static_feature_points(&recon, *id, *t_sfm)?.len();
                println!("{id},{},{},{triangulated},{stat}", im.name, im.features.len());
            }
        }
        SfmCommand::Sweep(a) => sweep(a)?,
    }
    Ok(())
}

pub(crate) fn sweep(a: &SweepArgs) -> Result<()> {
    if a.steps < 2 {
        bail!("--steps must be at least 2");
    }
    let recon = load_recon(&a.input, ModelFormat::Auto)?;
    let mut gt = BTreeMap::new();
    for im in recon.images().values() {
        let path = a.gt.join(&im.name);
        if path.is_file() {
            gt.insert(im.name.clone(), BinaryMask::load_png(&path)?);
        }
    }
    if gt.is_empty() {
        bail!("no ground-truth masks in {} match model image names", a.gt.display());
    }
    let thresholds: Vec<f64> = (0..a.steps).map(|i| i as f64 / (a.steps - 1) as f64).collect();
    let csv = threshold_sweep(&recon, &gt, &thresholds)?.to_csv();
    write_or_print(a.out.as_deref(), &csv)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            create_parent(p)?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn file_name(p: &Path) -> Result<String> {
    p.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| anyhow!("{} has no file name", p.display()))
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

fn backend(args: &SegmenterArgs) -> Result<Box<dyn SegmenterBackend>> {
    Ok(match args.segmenter {
        SegmenterArg::Builtin => Box::new(BuiltinSegmenter::default()),
        SegmenterArg::Remote => {
            let endpoint = args
                .endpoint
                .clone()
                .ok_or_else(|| anyhow!("--segmenter remote needs --endpoint or HUGS_REMOTE_ENDPOINT"))?;
            Box::new(RemoteBackend::new(endpoint))
        }
    })
}

pub(crate) fn static_points_for(recon: &SparseReconstruction, name: &str, t_sfm: f64) -> Result<Vec<[f64; 2]>> {
    let rec = recon
        .image_by_name(name)
        .ok_or_else(|| anyhow!("image {name} is not in the reconstruction"))?;
    Ok(static_feature_points(recon, rec.image_id, t_sfm)?)
}

fn heuristic(c: &HeuristicCommand) -> Result<()> {
    match c {
        HeuristicCommand::Sfm {
            image,
            recon,
            name,
            t_sfm,
            group_size,
            segmenter,
            out,
        } => {
            let img = Image::load_png(image)?;
            let recon = load_recon(recon, ModelFormat::Auto)?;
            let name = match name {
                Some(n) => n.clone(),
                None => file_name(image)?,
            };
            let points = static_points_for(&recon, &name, *t_sfm)?;
            let h = sfm_heuristic(&img, &points, backend(segmenter)?.as_ref(), *group_size)?;
            h.mask.save_png(out)?;
            println!("{} static points, {:.2}% pixels marked", points.len(), 100.0 * h.mask.fraction_ones());
        }
        HeuristicCommand::Residual {
            residual,
            rendered,
            reference,
            t_cr,
            out,
        } => {
            let r = match (residual, rendered, reference) {
                (Some(p), _, _) => ResidualMap::load(p)?,
                (None, Some(a), Some(b)) => residual_map(&Image::load_png(a)?, &Image::load_png(b)?)?,
                _ => bail!("give --residual or both --rendered and --reference"),
            };
            let h_cr = residual_heuristic(&r);
            let h_bound = residual_bound(&r, *t_cr)?;
            std::fs::create_dir_all(out)?;
            h_cr.mask.save_png(&out.join("residual.png"))?;
            h_bound.mask.save_png(&out.join("bound.png"))?;
            r.save(&out.join("residual.hugr"))?;
            println!(
                "mean residual {:.6}; residual map {:.2}%, bound {:.2}% pixels marked",
                r.mean(),
                100.0 * h_cr.mask.fraction_ones(),
                100.0 * h_bound.mask.fraction_ones()
            );
        }
        HeuristicCommand::Combine {
            sfm,
            residual,
            bound,
            out,
        } => {
            let load = |p: &PathBuf, kind| -> Result<HeuristicMap> { Ok(HeuristicMap::new(kind, BinaryMask::load_png(p)?)) };
            let h = combine(
                &load(sfm, HeuristicKind::Sfm)?,
                &load(residual, HeuristicKind::Residual)?,
                &load(bound, HeuristicKind::ResidualBound)?,
            )?;
            h.mask.save_png(out)?;
            println!("{:.2}% pixels marked", 100.0 * h.mask.fraction_ones());
        }
    }
    Ok(())
}

fn mask(a: &MaskArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = a.preset {
        let preset: hugs_core::heuristics::Preset = p.into();
        cfg.preset = Some(preset.name().to_string());
        cfg.thresholds = HeuristicThresholds {
            group_size: cfg.thresholds.group_size,
            ..preset.thresholds()
        };
    }
    match a.segmenter {
        Some(SegmenterArg::Builtin) => cfg.segmenter = SegmenterConfig::default(),
        Some(SegmenterArg::Remote) => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| anyhow!("--segmenter remote needs --endpoint or HUGS_REMOTE_ENDPOINT"))?;
            cfg.segmenter = SegmenterConfig::Remote {
                endpoint,
                max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            };
        }
        None => {}
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    } else if a.config.is_none() {
        bail!("--out is required without a config file");
    }
    if a.no_intermediates {
        cfg.write_intermediates = false;
    }
    if a.no_train {
        cfg.final_train = None;
    }
    cfg.set_seed(seed);

    let dataset = ViewDataset::load(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let recon_dir = a.recon.clone().unwrap_or_else(|| a.dataset.join("sparse"));
    let recon = load_recon(&recon_dir, ModelFormat::Auto)?;
    let report = run_pipeline(&dataset, &recon, &cfg)?;
    print!("{}", report.summary());
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let dataset = ViewDataset::load(&a.dataset)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        iterations: a.iterations.unwrap_or(d.iterations),
        batch_rays: a.batch_rays.unwrap_or(d.batch_rays),
        lr_initial: a.lr_initial.unwrap_or(d.lr_initial),
        lr_final: a.lr_final.unwrap_or(d.lr_final),
        samples_per_ray: a.samples.unwrap_or(d.samples_per_ray),
        seed,
        ..d
    };
    let masks = match &a.masks {
        Some(dir) => Some(
            dataset
                .train()
                .map(|v| {
                    let p = dir.join(format!("{}.png", stem(&v.name)));
                    BinaryMask::load_png(&p).with_context(|| format!("static map for {}", v.name))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let init = VoxelField::new([a.resolution; 3], Aabb::cube(SCENE_HALF_EXTENT), 0.0, [0.0; 3])?;
    let out = train(&init, &dataset, masks.as_deref(), &cfg)?;
    create_parent(&a.out)?;
    out.field.save(&a.out)?;
    if let Some(p) = &a.loss_csv {
        out.trace.save_csv(p)?;
    }
    let last = out.trace.losses.last().copied().unwrap_or(f64::NAN);
    println!("{} iterations, final loss {:.6}, wrote {}", cfg.iterations, last, a.out.display());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let field = VoxelField::load(&a.field)?;
    let dataset = ViewDataset::load(&a.dataset)?;
    std::fs::create_dir_all(&a.out)?;
    let mut n = 0;
    for v in &dataset.views {
        let wanted = match a.split {
            SplitArg::All => true,
            SplitArg::Train => v.split == Split::Train,
            SplitArg::Test => v.split == Split::Test,
        };
        if !wanted {
            continue;
        }
        let img = render_image(&field, &v.camera, &v.pose, a.samples)?;
        img.save_png(&a.out.join(format!("{}.png", stem(&v.name))))?;
        n += 1;
    }
    println!("rendered {n} views to {}", a.out.display());
    Ok(())
}

/// PNG files of `pred` paired with same-named files of `gt`.
fn paired_files(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNG files in {}", pred.display());
    }
    names
        .into_iter()
        .map(|n| {
            let g = gt.join(&n);
            if !g.is_file() {
                bail!("no reference for {n} in {}", gt.display());
            }
            Ok((n.clone(), pred.join(&n), g))
        })
        .collect()
}

fn eval(c: &EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Masks { pred, gt, json } => {
            let mut per = BTreeMap::new();
            for (name, p, g) in paired_files(pred, gt)? {
                let s = segmentation_scores(&BinaryMask::load_png(&p)?, &BinaryMask::load_png(&g)?)
                    .with_context(|| name.clone())?;
                println!("{name:<16} mIoU {:.4}  F1 {:.4}  transient IoU {:.4}", s.miou, s.f1, s.transient_iou);
                per.insert(name, s);
            }
            let all: Vec<_> = per.values().copied().collect();
            let mean = mean_segmentation_scores(&all).expect("at least one pair");
            println!("mean mIoU {:.4}  F1 {:.4}  transient IoU {:.4}", mean.miou, mean.f1, mean.transient_iou);
            if let Some(j) = json {
                let doc = serde_json::json!({ "images": per, "mean": mean });
                write_or_print(Some(j), &serde_json::to_string_pretty(&doc)?)?;
            }
        }
        EvalCommand::Images { pred, gt, json } => {
            let mut per = BTreeMap::new();
            for (name, p, g) in paired_files(pred, gt)? {
                let s = image_scores(&Image::load_png(&p)?, &Image::load_png(&g)?).with_context(|| name.clone())?;
                println!("{name:<16} PSNR {:.3} dB  SSIM {:.4}", s.psnr, s.ssim);
                per.insert(name, s);
            }
            let all: Vec<_> = per.values().copied().collect();
            let mean = mean_image_scores(&all).expect("at least one pair");
            println!("mean PSNR {:.3} dB  SSIM {:.4}", mean.psnr, mean.ssim);
            if let Some(j) = json {
                let doc = serde_json::json!({ "images": per, "mean": mean });
                write_or_print(Some(j), &serde_json::to_string_pretty(&doc)?)?;
            }
        }
    }
    Ok(())
}

fn visualize_cmd(c: &VisualizeCommand) -> Result<()> {
    match c {
        VisualizeCommand::Mask { image, mask, out } => {
            let img = visualize::mask_overlay(&Image::load_png(image)?, &BinaryMask::load_png(mask)?)?;
            create_parent(out)?;
            img.save_png(out)?;
        }
        VisualizeCommand::Points {
            image,
            recon,
            name,
            t_sfm,
            out,
        } => {
            let img = Image::load_png(image)?;
            let recon = load_recon(recon, ModelFormat::Auto)?;
            let name = match name {
                Some(n) => n.clone(),
                None => file_name(image)?,
            };
            let points = static_points_for(&recon, &name, *t_sfm)?;
            create_parent(out)?;
            visualize::point_overlay(&img, &points).save_png(out)?;
            println!("marked {} points", points.len());
        }
        VisualizeCommand::Sweep(a) => sweep(a)?,
    }
    Ok(())
}
