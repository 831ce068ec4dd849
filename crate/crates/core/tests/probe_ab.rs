use std::time::Instant;
use worldgen_core::controlnet::{ControlBranch, Modality, SpatiotemporalControlMap};
use worldgen_core::denoiser::{DiTConfig, DiTParams, TextEmbedding};
use worldgen_core::diffusion::{
    sample_video, train_branch, GuidanceConfig, NoiseSchedule, Sampler, TrainConfig, TrainItem,
};
use worldgen_core::extractors::{bilateral_blur_video, depth_normalize, gray_to_rgb, seg_recolor};
use worldgen_core::metrics::{blur_ssim, depth_sirmse, mask_miou, pearson_corr};
use worldgen_core::rng::RngStream;
use worldgen_core::synth::{extract_depth_by_color, extract_masks_by_color, random_corpus_specs, synth_scene};
use worldgen_core::tensor::Tensor;
use worldgen_core::tokenizer::{Tokenizer, TokenizerConfig};

fn acc_cfg() -> DiTConfig {
    DiTConfig { num_blocks: 5, num_heads: 4, model_dim: 32, text_dim: 16, sigma_dim: 8, cond_blocks: 3 }
}


fn sweep_specs(count: usize, extents: (usize, usize, usize)) -> Vec<worldgen_core::synth::SceneSpec> {
    use worldgen_core::synth::{ObjectSpec, SceneSpec};
    use worldgen_core::weightmaps::RegionLabel;
    (0..count)
        .map(|i| {
            let mut rng = RngStream::new(0xABCD + i as u64);
            let (_, h, w) = extents;
            let mk = |id: u32, color: [f32; 3], depth: f32, rng: &mut RngStream| {
                let size = (16 + (rng.next_u64() % 5) as usize, 16 + (rng.next_u64() % 5) as usize);
                let vy = (rng.next_u64() % 2) as f32;
                let vx = (rng.next_u64() % 2) as f32;
                let max_y = h - size.0 - (vy as usize * 8) - 1;
                let max_x = w - size.1 - (vx as usize * 8) - 1;
                ObjectSpec {
                    id,
                    phrase: if id == 1 { "red crate".into() } else { "blue panel".into() },
                    color,
                    depth,
                    start: ((rng.next_u64() % (max_y as u64 + 1)) as f32,
                            (rng.next_u64() % (max_x as u64 + 1)) as f32),
                    velocity: (vy, vx),
                    size,
                    label: RegionLabel::Fg,
                }
            };
            SceneSpec {
                name: format!("sweep_{i:03}"),
                extents,
                background: [0.55, 0.55, 0.5],
                background_depth: 12.0,
                objects: vec![
                    mk(1, [0.85, 0.15, 0.1], 3.0, &mut rng),
                    mk(2, [0.1, 0.3, 0.85], 4.0, &mut rng),
                ],
                seed: i as u64,
            }
        })
        .collect()
}

#[test]
#[ignore]
fn probe_ab_and_sweep() {
    let t0 = Instant::now();
    let cfg = acc_cfg();
    let base = DiTParams::init(cfg, 77).unwrap();
    let tk = Tokenizer::new(TokenizerConfig { latent_dim: 32, seed: 9 }).unwrap();
    let extents = (9usize, 48usize, 48usize);
    let specs = random_corpus_specs(20, extents, 1234);
    let clips: Vec<_> = specs.iter().map(|s| (s, synth_scene(s).unwrap())).collect();
    println!("[{:?}] corpus built", t0.elapsed());

    // Controls per clip.
    let seg_controls: Vec<Tensor> = clips
        .iter()
        .map(|(_, r)| seg_recolor(&r.masks, 5).unwrap().0)
        .collect();
    let vis_controls: Vec<Tensor> = clips
        .iter()
        .map(|(_, r)| bilateral_blur_video(&r.video, 2.0, 0.1).unwrap())
        .collect();
    let depth_controls: Vec<Tensor> = clips
        .iter()
        .map(|(_, r)| gray_to_rgb(&depth_normalize(&r.depth).unwrap()).unwrap())
        .collect();
    println!("[{:?}] controls extracted", t0.elapsed());

    let items = |controls: &[Tensor]| -> Vec<TrainItem> {
        clips
            .iter()
            .zip(controls.iter())
            .map(|((spec, r), c)| {
                let vg = tk.tokenize(&r.video).unwrap();
                let cg = tk.tokenize(c).unwrap();
                TrainItem {
                    video_tokens: vg.flat_tokens(),
                    control_tokens: cg.flat_tokens(),
                    text: TextEmbedding::from_prompt(&format!("scene {}", spec.name), &base),
                    grid: vg.grid_extents(),
                }
            })
            .collect()
    };

    let tcfg = TrainConfig { lr: 0.05, sigma_min: 0.25, sigma_max: 8.0 };
    let train = |modality: Modality, controls: &[Tensor], steps: usize, seed: u64| -> ControlBranch {
        let mut branch = ControlBranch::new(&base, modality, seed);
        let its = items(controls);
        let mut rng = RngStream::new(seed ^ 0xFEED);
        let losses = train_branch(&mut branch, &base, &its, &tcfg, steps, &mut rng).unwrap();
        println!(
            "trained {modality}: loss {:.4} -> {:.4}",
            losses[..8].iter().sum::<f32>() / 8.0,
            losses[losses.len() - 8..].iter().sum::<f32>() / 8.0
        );
        branch
    };

    let seg_branch = train(Modality::Seg, &seg_controls, 2500, 100);
    println!("[{:?}] seg trained", t0.elapsed());

    let schedule = NoiseSchedule { sigma_min: 0.08, sigma_max: 6.0, steps: 24, rho: 7.0 };
    let guidance = GuidanceConfig { scale: 1.0, negative_prompt: String::new() };

    // A/B: mIoU of branch-generated vs base-generated.
    let mut base_wins = 0;
    let mut branch_wins = 0;
    let mut base_scores = Vec::new();
    let mut branch_scores = Vec::new();
    for (i, (spec, r)) in clips.iter().enumerate() {
        let template = tk.tokenize(&r.video).unwrap();
        let prompt = format!("scene {}", spec.name);
        let ctokens = tk.tokenize(&seg_controls[i]).unwrap().flat_tokens();
        let branch_sampler =
            Sampler::new(&base, vec![&seg_branch], vec![ctokens], None, &template).unwrap();
        let base_sampler = Sampler::new(&base, vec![], vec![], None, &template).unwrap();
        let seed = 9000 + i as u64;
        let gv = sample_video(&branch_sampler, &tk, &template, &prompt, &schedule, &guidance, seed)
            .unwrap()
            .clamp01();
        let bv = sample_video(&base_sampler, &tk, &template, &prompt, &schedule, &guidance, seed)
            .unwrap()
            .clamp01();
        let palette = r.palette.clone();
        let score = |video: &Tensor| -> f32 {
            let masks = extract_masks_by_color(video, &palette, spec.background).unwrap();
            mask_miou(&r.masks, &masks).unwrap_or(0.0)
        };
        let (gs, bs) = (score(&gv), score(&bv));
        branch_scores.push(gs);
        base_scores.push(bs);
        if gs > bs {
            branch_wins += 1;
        } else {
            base_wins += 1;
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    println!(
        "[{:?}] A/B: branch mIoU {:.4} vs base {:.4} (branch wins {branch_wins}, base {base_wins})",
        t0.elapsed(),
        mean(&branch_scores),
        mean(&base_scores)
    );

    // Sweep: vis FG weight vs FG Blur-SSIM, depth FG weight vs FG si-RMSE.
    let vis_branch = train(Modality::Vis, &vis_controls, 2500, 200);
    let depth_branch = train(Modality::Depth, &depth_controls, 2500, 300);
    println!("[{:?}] vis+depth trained", t0.elapsed());

    let sspecs = sweep_specs(8, extents);
    let sclips: Vec<_> = sspecs.iter().map(|s| (s, synth_scene(s).unwrap())).collect();
    let s_vis: Vec<Tensor> = sclips.iter().map(|(_, r)| bilateral_blur_video(&r.video, 2.0, 0.1).unwrap()).collect();
    let s_depth: Vec<Tensor> = sclips.iter().map(|(_, r)| gray_to_rgb(&depth_normalize(&r.depth).unwrap()).unwrap()).collect();
    let weights = [0.0f32, 0.333, 0.5];
    for (name, branch, controls) in [
        ("vis", &vis_branch, &s_vis),
        ("depth", &depth_branch, &s_depth),
    ] {
        let mut ys = Vec::new();
        for &wv in &weights {
            let mut acc = Vec::new();
            for (i, (spec, r)) in sclips.iter().enumerate() {
                let template = tk.tokenize(&r.video).unwrap();
                // FG mask from labeled objects.
                let (t, h, w) = spec.extents;
                let mut fgm = Tensor::zeros(&[t, h, w]);
                for m in &r.masks.masks {
                    if r.labeling.labels[&m.object_id] == worldgen_core::weightmaps::RegionLabel::Fg {
                        for (p, &ins) in m.mask.iter().enumerate() {
                            if ins {
                                fgm.data[p] = 1.0;
                            }
                        }
                    }
                }
                let mut map_w = Tensor::zeros(&[1, t, h, w]);
                for (p, &v) in fgm.data.iter().enumerate() {
                    map_w.data[p] = if v != 0.0 { wv } else { 0.0 };
                }
                let map = SpatiotemporalControlMap::new(vec![branch.modality], map_w).unwrap();
                let ctokens = tk.tokenize(&controls[i]).unwrap().flat_tokens();
                let sampler =
                    Sampler::new(&base, vec![branch], vec![ctokens], Some(&map), &template).unwrap();
                for seed_k in 0..2u64 {
                    let gv = sample_video(
                        &sampler,
                        &tk,
                        &template,
                        &format!("scene {}", spec.name),
                        &schedule,
                        &guidance,
                        7000 + i as u64 * 10 + seed_k,
                    )
                    .unwrap()
                    .clamp01();
                    let v = match name {
                        "vis" => blur_ssim(&r.video, &gv, 2.0, 0.1, Some(&fgm)).unwrap(),
                        _ => {
                            let gd = extract_depth_by_color(&gv, &r.palette, spec.background, spec.background_depth)
                                .unwrap();
                            depth_sirmse(&r.depth, &gd, Some(&fgm)).unwrap()
                        }
                    };
                    acc.push(v);
                }
            }
            ys.push(mean(&acc));
        }
        let r = pearson_corr(&weights, &ys).unwrap();
        println!(
            "[{:?}] sweep {name}: metric at weights {weights:?} = {ys:?}; pearson {r:.3}",
            t0.elapsed()
        );
    }
    println!("total {:?}", t0.elapsed());
}
