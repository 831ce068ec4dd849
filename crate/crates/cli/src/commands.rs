//! Command implementations behind the subcommand dispatch.

use crate::config::*;
use crate::pipeline::{build_model, clip_dirs, write_provenance, Clip};
use anyhow::{bail, Result};
use worldgen_core::controlnet::{Modality, SpatiotemporalControlMap};
use worldgen_core::denoiser::TextEmbedding;
use worldgen_core::diffusion::{sample_video, train_branch, NoiseSchedule, Sampler, TrainConfig, TrainItem};
use worldgen_core::extractors::{
    bilateral_blur_video, canny_edges_video, depth_normalize, gray_to_rgb, hdmap_rasterize,
    lidar_project, luma, seg_recolor,
};
use worldgen_core::metrics::{
    blur_ssim, depth_sirmse, diversity_score, edge_f1_on_maps, mask_miou, reprojection_error,
    ConvFeatureExtractor, MetricReport,
};
use worldgen_core::parinfer::{bench_scaling, ParallelModel};
use worldgen_core::rng::RngStream;
use worldgen_core::synth::{
    extract_depth_by_color, extract_masks_by_color, random_corpus_specs, synth_scene, write_clip,
};
use worldgen_core::tensor::Tensor;
use worldgen_core::upscaler::{bicubic_upscale, degrade, plan_tiles, tiled_denoise};
use worldgen_core::weightmaps::{build_control_map, recipe_presets};
use worldgen_core::{checkpoint, Result as CoreResult};

// ── synth ────────────────────────────────────────────────────────────

pub fn cmd_synth(cfg: &SynthConfig, config_bytes: &[u8]) -> Result<()> {
    let specs = random_corpus_specs(cfg.clips, cfg.extents, cfg.seed);
    for spec in &specs {
        let rendered = synth_scene(spec)?;
        write_clip(&cfg.out_dir.join(&spec.name), spec, &rendered)?;
    }
    write_provenance(&cfg.out_dir, "synth", config_bytes, &[cfg.seed])?;
    println!("synth: wrote {} clips under {}", specs.len(), cfg.out_dir.display());
    Ok(())
}

// ── extract ──────────────────────────────────────────────────────────

pub fn cmd_extract(cfg: &ExtractConfig, config_bytes: &[u8]) -> Result<()> {
    let dirs = clip_dirs(&cfg.corpus_dir)?;
    for dir in &dirs {
        let clip = Clip::load(dir)?;
        let (t, h, w) = clip.spec.extents;
        for &modality in &cfg.modalities {
            let control = match modality {
                Modality::Vis => bilateral_blur_video(&clip.video, cfg.blur_sigma_s, cfg.blur_sigma_r)?,
                Modality::Edge => {
                    let edges = canny_edges_video(&luma(&clip.video)?, cfg.canny_low, cfg.canny_high)?;
                    gray_to_rgb(&edges)?
                }
                Modality::Depth => gray_to_rgb(&depth_normalize(&clip.depth)?)?,
                Modality::Seg => {
                    let (video, palette) = seg_recolor(&clip.masks, cfg.seg_seed)?;
                    let palette_json: Vec<serde_json::Value> = palette
                        .iter()
                        .map(|(id, c)| serde_json::json!({"id": id, "color": c}))
                        .collect();
                    std::fs::write(
                        dir.join("seg_palette.json"),
                        serde_json::to_string_pretty(&palette_json)?,
                    )?;
                    video
                }
                Modality::Hdmap => hdmap_rasterize(
                    &clip.scene.map_elements,
                    &clip.scene.boxes,
                    &clip.scene.camera,
                    t,
                    h,
                    w,
                )?,
                Modality::Lidar => lidar_project(
                    &clip.scene.lidar_scans,
                    &clip.scene.boxes,
                    &clip.scene.camera,
                    t,
                    h,
                    w,
                )?,
            };
            control.save(&clip.control_path(modality))?;
        }
    }
    write_provenance(&cfg.corpus_dir, "extract", config_bytes, &[cfg.seg_seed])?;
    println!(
        "extract: wrote {:?} controls for {} clips",
        cfg.modalities.iter().map(|m| m.name()).collect::<Vec<_>>(),
        dirs.len()
    );
    Ok(())
}

// ── train-branch ─────────────────────────────────────────────────────

pub fn cmd_train_branch(cfg: &TrainBranchConfig, config_bytes: &[u8]) -> Result<()> {
    let model = build_model(&cfg.model)?;
    let dirs = clip_dirs(&cfg.corpus_dir)?;
    let mut items = Vec::new();
    for dir in &dirs {
        let clip = Clip::load(dir)?;
        let control = clip.load_control(cfg.modality)?;
        let vg = model.tokenizer.tokenize(&clip.video)?;
        let cg = model.tokenizer.tokenize(&control)?;
        items.push(TrainItem {
            video_tokens: vg.flat_tokens(),
            control_tokens: cg.flat_tokens(),
            text: TextEmbedding::from_prompt(&clip.prompt(), &model.base),
            grid: vg.grid_extents(),
        });
    }
    let mut branch =
        worldgen_core::controlnet::ControlBranch::new(&model.base, cfg.modality, cfg.branch_seed);
    let tcfg = TrainConfig { lr: cfg.lr, sigma_min: cfg.sigma_min, sigma_max: cfg.sigma_max };
    let mut rng = RngStream::new(cfg.seed);
    let losses = train_branch(&mut branch, &model.base, &items, &tcfg, cfg.steps, &mut rng)?;
    checkpoint::save_branch(&cfg.out_dir, &branch, &model.base.cfg)?;
    std::fs::write(cfg.out_dir.join("losses.json"), serde_json::to_string(&losses)?)?;
    write_provenance(&cfg.out_dir, "train-branch", config_bytes, &[cfg.seed])?;
    let head: f32 = losses.iter().take(8).sum::<f32>() / losses.len().min(8) as f32;
    let tail: f32 = losses.iter().rev().take(8).sum::<f32>() / losses.len().min(8) as f32;
    println!(
        "train-branch[{}]: {} steps on {} clips, loss {head:.4} -> {tail:.4}",
        cfg.modality.name(),
        cfg.steps,
        items.len()
    );
    Ok(())
}

// ── generate ─────────────────────────────────────────────────────────

pub fn cmd_generate(cfg: &GenerateConfig, config_bytes: &[u8]) -> Result<()> {
    let model = build_model(&cfg.model)?;
    let branches: Vec<worldgen_core::controlnet::ControlBranch> = cfg
        .branches
        .iter()
        .map(|dir| checkpoint::load_branch(dir).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let dirs = clip_dirs(&cfg.corpus_dir)?;
    let mut generated = 0usize;
    for dir in &dirs {
        let clip = Clip::load(dir)?;
        if !cfg.clips.is_empty() && !cfg.clips.contains(&clip.name) {
            continue;
        }
        let template = model.tokenizer.tokenize(&clip.video)?;
        let mut controls = Vec::new();
        for branch in &branches {
            let control = clip.load_control(branch.modality)?;
            controls.push(model.tokenizer.tokenize(&control)?.flat_tokens());
        }
        let map = match &cfg.map {
            None => None,
            Some(MapSource::Path(path)) => {
                let weights = Tensor::load(path)?;
                Some(SpatiotemporalControlMap::new(
                    branches.iter().map(|b| b.modality).collect(),
                    weights,
                )?)
            }
            Some(MapSource::Preset(preset)) => {
                let recipe = recipe_presets(preset)?;
                let build = build_control_map(&clip.masks, &clip.labeling, &recipe)?;
                // Select the rows for the attached branches, in order.
                let selected = select_map_modalities(
                    &build.normalized,
                    &branches.iter().map(|b| b.modality).collect::<Vec<_>>(),
                )?;
                Some(selected)
            }
        };
        let sampler = Sampler::new(
            &model.base,
            branches.iter().collect(),
            controls,
            map.as_ref(),
            &template,
        )?;
        let prompt = cfg.prompt.clone().unwrap_or_else(|| clip.prompt());
        let out_clip = cfg.out_dir.join(&clip.name);
        std::fs::create_dir_all(&out_clip)?;
        for &seed in &cfg.seeds {
            let video = sample_video(
                &sampler,
                &model.tokenizer,
                &template,
                &prompt,
                &cfg.schedule,
                &cfg.guidance,
                seed,
            )?;
            video.clamp01().save(&out_clip.join(format!("gen_{seed}.tensor")))?;
            generated += 1;
        }
    }
    write_provenance(&cfg.out_dir, "generate", config_bytes, &cfg.seeds)?;
    println!(
        "generate: {generated} videos ({} branches{})",
        branches.len(),
        if branches.is_empty() { ", base model" } else { "" }
    );
    Ok(())
}

/// Restrict a built map to the modalities of the attached branches.
fn select_map_modalities(
    map: &SpatiotemporalControlMap,
    wanted: &[Modality],
) -> CoreResult<SpatiotemporalControlMap> {
    let (t, y, x) = map.extents();
    let sites = t * y * x;
    let mut weights = Tensor::zeros(&[wanted.len(), t, y, x]);
    for (wi, m) in wanted.iter().enumerate() {
        if let Some(si) = map.modalities.iter().position(|mm| mm == m) {
            weights.data[wi * sites..(wi + 1) * sites]
                .copy_from_slice(&map.weights.data[si * sites..(si + 1) * sites]);
        }
    }
    SpatiotemporalControlMap::new(wanted.to_vec(), weights)
}

// ── weightmap ────────────────────────────────────────────────────────

pub fn cmd_weightmap(cfg: &WeightmapConfig, config_bytes: &[u8]) -> Result<()> {
    let clip = Clip::load(&cfg.clip_dir)?;
    let recipe = recipe_presets(&cfg.preset)?;
    let build = build_control_map(&clip.masks, &clip.labeling, &recipe)?;
    build.raw.weights.save(&cfg.out_raw)?;
    build.normalized.weights.save(&cfg.out_normalized)?;
    if let Some(parent) = cfg.out_normalized.parent() {
        write_provenance(parent, "weightmap", config_bytes, &[])?;
    }
    println!(
        "weightmap[{}]: raw -> {}, normalized -> {}",
        cfg.preset,
        cfg.out_raw.display(),
        cfg.out_normalized.display()
    );
    Ok(())
}

// ── upscale ──────────────────────────────────────────────────────────

pub struct UpscaleFlags {
    pub grid: (usize, usize),
    pub overlap_px: usize,
    pub scale: usize,
    pub steps: usize,
    pub seed: u64,
}

pub fn cmd_upscale(cfg: &UpscaleFileConfig, flags: &UpscaleFlags, config_bytes: &[u8]) -> Result<()> {
    if flags.scale != 2 && flags.scale != 4 {
        bail!("scale must be 2 or 4, got {}", flags.scale);
    }
    if flags.overlap_px % worldgen_core::tokenizer::SPATIAL_FACTOR != 0 {
        bail!(
            "overlap must be a multiple of {} pixels (one latent cell)",
            worldgen_core::tokenizer::SPATIAL_FACTOR
        );
    }
    let model = build_model(&cfg.model)?;
    let mut video = Tensor::load(&cfg.input)?;
    if let Some(dcfg) = &cfg.degrade_first {
        video = degrade(&video, dcfg, flags.seed)?;
    }
    let up = bicubic_upscale(&video, flags.scale)?;
    let grid = model.tokenizer.tokenize(&up)?;
    let (tp, yp, xp) = grid.grid_extents();
    let d = grid.latent_dim();
    let plan = plan_tiles(
        (yp, xp),
        flags.grid,
        flags.overlap_px / worldgen_core::tokenizer::SPATIAL_FACTOR,
    )?;

    // img2img tail: start from noised tokens of the bicubic upscale and walk
    // a short schedule down, averaging tiles at every step.
    let schedule = NoiseSchedule {
        sigma_min: 0.02,
        sigma_max: cfg.start_sigma,
        steps: flags.steps,
        rho: 7.0,
    };
    schedule.validate()?;
    let sigmas = schedule.sigmas();
    let mut rng = RngStream::new(flags.seed);
    let mut x = grid.tokens.clone();
    for v in x.data.iter_mut() {
        *v += cfg.start_sigma * rng.next_normal();
    }
    let text = TextEmbedding::from_prompt(&cfg.prompt, &model.base);
    for (i, &sigma) in sigmas.iter().enumerate() {
        let sigma_next = if i + 1 < sigmas.len() { sigmas[i + 1] } else { 0.0 };
        let dsigma = sigma_next - sigma;
        let mut denoiser = |tile: &Tensor, s: f32| {
            let (tt, th, tw, td) = (tile.shape[0], tile.shape[1], tile.shape[2], tile.shape[3]);
            let flat = tile.reshape(&[tt * th * tw, td])?;
            let (n, _) = model.base.denoise_base(&flat, s, &text, (tt, th, tw))?;
            let mut out = tile.clone();
            for (v, nv) in out.data.iter_mut().zip(n.data.iter()) {
                *v += dsigma * nv;
            }
            Ok(out)
        };
        x = tiled_denoise(&x, sigma, &plan, &mut denoiser)?;
    }
    let out_grid = grid.with_flat_tokens(&x.reshape(&[tp * yp * xp, d])?)?;
    let result = model.tokenizer.detokenize(&out_grid)?.clamp01();
    result.save(&cfg.out)?;
    if let Some(parent) = cfg.out.parent() {
        write_provenance(parent, "upscale", config_bytes, &[flags.seed])?;
    }
    println!(
        "upscale: {} -> {} ({}x, {:?} grid, overlap {} px, {} steps)",
        cfg.input.display(),
        cfg.out.display(),
        flags.scale,
        flags.grid,
        flags.overlap_px,
        flags.steps
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn cmd_eval(cfg: &EvalConfig, config_bytes: &[u8]) -> Result<()> {
    let dirs = clip_dirs(&cfg.corpus_dir)?;
    let mut sample_ids = Vec::new();
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut diversity_ids = Vec::new();
    let mut diversity_vals = Vec::new();
    let extractor = ConvFeatureExtractor::new(0xD1CE);

    for dir in &dirs {
        let clip = Clip::load(dir)?;
        let gen_clip_dir = cfg.gen_dir.join(&clip.name);
        if !gen_clip_dir.is_dir() {
            continue;
        }
        let mut gen_files: Vec<std::path::PathBuf> = std::fs::read_dir(&gen_clip_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension().is_some_and(|e| e == "tensor")
                    && p.file_stem().is_some_and(|s| s.to_string_lossy().starts_with("gen_"))
            })
            .collect();
        gen_files.sort();
        if gen_files.is_empty() {
            continue;
        }
        let fg_mask = cfg.fg_bg_split.then(|| region_mask(&clip, true));
        let bg_mask = cfg.fg_bg_split.then(|| region_mask(&clip, false));
        let mut clip_videos = Vec::new();
        for path in &gen_files {
            let gen = Tensor::load(path)?;
            let id = format!("{}/{}", clip.name, path.file_stem().unwrap().to_string_lossy());
            sample_ids.push(id);
            rows.push(eval_one(cfg, &clip, &gen, fg_mask.as_ref(), bg_mask.as_ref())?);
            clip_videos.push(gen);
        }
        if cfg.diversity && clip_videos.len() >= 2 {
            let mut dist = |a: &Tensor, b: &Tensor| extractor.distance(a, b);
            diversity_ids.push(clip.name.clone());
            diversity_vals.push(Some(diversity_score(&clip_videos, &mut dist)?));
        }
    }
    if rows.is_empty() {
        bail!("no generated videos found under {}", cfg.gen_dir.display());
    }

    let mut report = MetricReport::new(sample_ids);
    let columns: Vec<(&str, fn(&EvalRow) -> Option<f32>)> = vec![
        ("blur_ssim", |r| r.blur_ssim),
        ("edge_f1", |r| r.edge_f1),
        ("depth_sirmse", |r| r.depth_sirmse),
        ("mask_miou", |r| r.mask_miou),
        ("reproj_l1", |r| r.reproj_l1),
        ("blur_ssim_fg", |r| r.blur_ssim_fg),
        ("blur_ssim_bg", |r| r.blur_ssim_bg),
        ("edge_f1_fg", |r| r.edge_f1_fg),
        ("depth_sirmse_fg", |r| r.depth_sirmse_fg),
        ("depth_sirmse_bg", |r| r.depth_sirmse_bg),
    ];
    for (name, get) in columns {
        let values: Vec<Option<f32>> = rows.iter().map(get).collect();
        if values.iter().any(|v| v.is_some()) {
            report.add_column(name, values)?;
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    report.save_json(&cfg.out_dir.join("report.json"))?;
    report.save_csv(&cfg.out_dir.join("report.csv"))?;
    let markdown = report.to_markdown(&[("this run", &report)]);
    std::fs::write(cfg.out_dir.join("report.md"), markdown)?;

    if cfg.diversity && !diversity_ids.is_empty() {
        let mut div = MetricReport::new(diversity_ids);
        div.add_column("diversity", diversity_vals)?;
        div.save_json(&cfg.out_dir.join("diversity.json"))?;
        div.save_csv(&cfg.out_dir.join("diversity.csv"))?;
    }
    write_provenance(&cfg.out_dir, "eval", config_bytes, &[])?;
    for c in &report.columns {
        println!(
            "eval: {} = {}",
            c.name,
            c.mean.map_or("absent".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

struct EvalRow {
    blur_ssim: Option<f32>,
    edge_f1: Option<f32>,
    depth_sirmse: Option<f32>,
    mask_miou: Option<f32>,
    reproj_l1: Option<f32>,
    blur_ssim_fg: Option<f32>,
    blur_ssim_bg: Option<f32>,
    edge_f1_fg: Option<f32>,
    depth_sirmse_fg: Option<f32>,
    depth_sirmse_bg: Option<f32>,
}

/// (T, Y, X) 0/1 mask of the labeled foreground (or its complement).
fn region_mask(clip: &Clip, fg: bool) -> Tensor {
    let (t, h, w) = clip.masks.extents;
    let mut mask = Tensor::zeros(&[t, h, w]);
    for m in &clip.masks.masks {
        if clip.labeling.labels.get(&m.object_id) == Some(&worldgen_core::weightmaps::RegionLabel::Fg) {
            for (i, &inside) in m.mask.iter().enumerate() {
                if inside {
                    mask.data[i] = 1.0;
                }
            }
        }
    }
    if !fg {
        for v in mask.data.iter_mut() {
            *v = 1.0 - *v;
        }
    }
    mask
}

fn ok_or_absent<T>(r: worldgen_core::Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(worldgen_core::CoreError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn eval_one(
    cfg: &EvalConfig,
    clip: &Clip,
    gen: &Tensor,
    fg_mask: Option<&Tensor>,
    bg_mask: Option<&Tensor>,
) -> Result<EvalRow> {
    let palette = clip.palette();
    let thresholds = (cfg.canny_low, cfg.canny_high);

    let blur = ok_or_absent(blur_ssim(&clip.video, gen, cfg.blur_sigma_s, cfg.blur_sigma_r, None))?;
    let ref_edges = canny_edges_video(&luma(&clip.video)?, thresholds.0, thresholds.1)?;
    let gen_edges = canny_edges_video(&luma(gen)?, thresholds.0, thresholds.1)?;
    let f1 = ok_or_absent(edge_f1_on_maps(&ref_edges, &gen_edges, None))?;
    let gen_depth = extract_depth_by_color(gen, &palette, clip.spec.background, clip.spec.background_depth)?;
    let sirmse = ok_or_absent(depth_sirmse(&clip.depth, &gen_depth, None))?;
    let gen_masks = extract_masks_by_color(gen, &palette, clip.spec.background)?;
    let miou = ok_or_absent(mask_miou(&clip.masks, &gen_masks))?;
    let reproj = if cfg.reprojection {
        ok_or_absent(reprojection_error(
            gen,
            &clip.depth,
            &clip.scene.camera,
            &clip.scene.boxes,
            cfg.reprojection_stride,
        ))?
    } else {
        None
    };

    let mut row = EvalRow {
        blur_ssim: blur,
        edge_f1: f1,
        depth_sirmse: sirmse,
        mask_miou: miou,
        reproj_l1: reproj,
        blur_ssim_fg: None,
        blur_ssim_bg: None,
        edge_f1_fg: None,
        depth_sirmse_fg: None,
        depth_sirmse_bg: None,
    };
    if let (Some(fg), Some(bg)) = (fg_mask, bg_mask) {
        row.blur_ssim_fg =
            ok_or_absent(blur_ssim(&clip.video, gen, cfg.blur_sigma_s, cfg.blur_sigma_r, Some(fg)))?;
        row.blur_ssim_bg =
            ok_or_absent(blur_ssim(&clip.video, gen, cfg.blur_sigma_s, cfg.blur_sigma_r, Some(bg)))?;
        row.edge_f1_fg = ok_or_absent(edge_f1_on_maps(&ref_edges, &gen_edges, Some(fg)))?;
        row.depth_sirmse_fg = ok_or_absent(depth_sirmse(&clip.depth, &gen_depth, Some(fg)))?;
        row.depth_sirmse_bg = ok_or_absent(depth_sirmse(&clip.depth, &gen_depth, Some(bg)))?;
    }
    Ok(row)
}

// ── bench ────────────────────────────────────────────────────────────

pub struct BenchFlags {
    pub workers: Vec<usize>,
    pub steps: usize,
    pub seed: u64,
    pub out_csv: std::path::PathBuf,
}

pub fn cmd_bench(cfg: &BenchFileConfig, flags: &BenchFlags, config_bytes: &[u8]) -> Result<()> {
    let model = build_model(&cfg.model)?;
    let (t, h, w) = cfg.extents;
    let template = model.tokenizer.tokenize(&Tensor::zeros(&[t, h, w, 3]))?;
    let s = template.num_tokens();
    let pmodel = ParallelModel {
        base: &model.base,
        branches: vec![],
        controls: vec![],
        token_weights: Tensor::zeros(&[0, s]),
    };
    let schedule = NoiseSchedule { steps: flags.steps, ..Default::default() };
    let result = bench_scaling(
        &pmodel,
        &model.tokenizer,
        &template,
        &cfg.prompt,
        &schedule,
        &cfg.guidance,
        flags.seed,
        &flags.workers,
        cfg.repeats,
    )?;
    // Scaling must never change results.
    for (i, video) in result.videos.iter().enumerate().skip(1) {
        let diff = video.max_abs_diff(&result.videos[0]);
        if diff > 1e-5 {
            bail!("worker count {} changed the output by {diff}", result.workers[i]);
        }
    }
    if let Some(parent) = flags.out_csv.parent() {
        std::fs::create_dir_all(parent)?;
        write_provenance(parent, "bench", config_bytes, &[flags.seed])?;
    }
    std::fs::write(&flags.out_csv, result.to_csv())?;
    println!("bench: S = {s} tokens");
    print!("{}", result.to_csv());
    for (w, speedup) in result.workers.iter().zip(result.speedups()) {
        println!("speedup @ {w} workers: {speedup:.2}x");
    }
    Ok(())
}
