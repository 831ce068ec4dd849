use worldgen_core::controlnet::{fused_denoise, ControlBranch, Modality};
use worldgen_core::denoiser::{DiTConfig, DiTParams, TextEmbedding};
use worldgen_core::diffusion::{
    add_noise, sample_video, train_branch, GuidanceConfig, NoiseSchedule, Sampler, TrainConfig, TrainItem,
};
use worldgen_core::extractors::seg_recolor;
use worldgen_core::rng::RngStream;
use worldgen_core::synth::{random_corpus_specs, synth_scene};
use worldgen_core::tensor::Tensor;
use worldgen_core::tokenizer::{Tokenizer, TokenizerConfig};

fn mse(a: &Tensor, b: &Tensor) -> f32 {
    a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / a.numel() as f32
}

#[test]
#[ignore]
fn probe_reconstruction() {
    let cfg = DiTConfig { num_blocks: 5, num_heads: 4, model_dim: 32, text_dim: 16, sigma_dim: 8, cond_blocks: 3 };
    let base = DiTParams::init(cfg, 77).unwrap();
    let tk = Tokenizer::new(TokenizerConfig { latent_dim: 32, seed: 9 }).unwrap();
    let specs = random_corpus_specs(20, (9, 48, 48), 1234);
    let clips: Vec<_> = specs.iter().map(|s| (s, synth_scene(s).unwrap())).collect();
    let seg_controls: Vec<Tensor> =
        clips.iter().map(|(_, r)| seg_recolor(&r.masks, 5).unwrap().0).collect();
    let items: Vec<TrainItem> = clips
        .iter()
        .zip(seg_controls.iter())
        .map(|((spec, r), c)| {
            let vg = tk.tokenize(&r.video).unwrap();
            TrainItem {
                video_tokens: vg.flat_tokens(),
                control_tokens: tk.tokenize(c).unwrap().flat_tokens(),
                text: TextEmbedding::from_prompt(&format!("scene {}", spec.name), &base),
                grid: vg.grid_extents(),
            }
        })
        .collect();
    let mut branch = ControlBranch::new(&base, Modality::Seg, 100);
    let tcfg = TrainConfig { lr: 0.05, sigma_min: 0.4, sigma_max: 20.0 };
    let mut rng = RngStream::new(0xFEED);
    let losses = train_branch(&mut branch, &base, &items, &tcfg, 1500, &mut rng).unwrap();
    println!("loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);

    // (a) One-step reconstruction at several sigmas, clip 0.
    let (spec, r) = &clips[0];
    let item = &items[0];
    let s = item.video_tokens.shape[0];
    let token_var = {
        let m = item.video_tokens.mean();
        item.video_tokens.data.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / (s as f32 * 32.0)
    };
    println!("token variance ~ {token_var:.4}");
    let tw = Tensor::ones(&[1, s]);
    for sigma in [0.5f32, 1.0, 2.0, 5.0, 20.0] {
        let mut nrng = RngStream::new(42);
        let (x_sigma, _eps) = add_noise(&item.video_tokens, sigma, &mut nrng).unwrap();
        let n_hat = fused_denoise(
            &base, &[&branch], &x_sigma, sigma, &item.text, &[item.control_tokens.clone()], &tw, item.grid,
        )
        .unwrap();
        let mut x0_hat = x_sigma.clone();
        for (v, n) in x0_hat.data.iter_mut().zip(n_hat.data.iter()) {
            *v -= sigma * n;
        }
        println!(
            "sigma {sigma:>5}: one-step recon MSE {:.5} (token scale, target var {token_var:.4})",
            mse(&x0_hat, &item.video_tokens)
        );
    }

    // (b) Full sampling trajectory against the clip tokens.
    let template = tk.tokenize(&r.video).unwrap();
    let schedule = NoiseSchedule { sigma_min: 0.05, sigma_max: 20.0, steps: 10, rho: 7.0 };
    println!("sigmas: {:?}", schedule.sigmas());
    let guidance = GuidanceConfig { scale: 1.0, negative_prompt: String::new() };
    let sampler = Sampler::new(
        &base,
        vec![&branch],
        vec![item.control_tokens.clone()],
        None,
        &template,
    )
    .unwrap();
    let gv = sample_video(&sampler, &tk, &template, "scene clip_000", &schedule, &guidance, 9000)
        .unwrap()
        .clamp01();
    println!("sampled-video MSE vs original video: {:.5}", mse(&gv, &r.video));
    let base_sampler = Sampler::new(&base, vec![], vec![], None, &template).unwrap();
    let bv = sample_video(&base_sampler, &tk, &template, "scene clip_000", &schedule, &guidance, 9000)
        .unwrap()
        .clamp01();
    println!("base-video MSE vs original video:    {:.5}", mse(&bv, &r.video));
    let _ = spec;

    // (c) Manual Euler loop with diagnostics.
    let mut xrng = RngStream::new(9000);
    let mut x = Tensor::zeros(&[s, 32]);
    xrng.fill_normal(&mut x.data, 0.0, 1.0);
    let sigmas = schedule.sigmas();
    for v in x.data.iter_mut() {
        *v *= sigmas[0];
    }
    for (i, &sigma) in sigmas.iter().enumerate() {
        let n_hat = fused_denoise(
            &base, &[&branch], &x, sigma, &item.text, &[item.control_tokens.clone()], &tw, item.grid,
        )
        .unwrap();
        let sigma_next = if i + 1 < sigmas.len() { sigmas[i + 1] } else { 0.0 };
        for (v, n) in x.data.iter_mut().zip(n_hat.data.iter()) {
            *v += (sigma_next - sigma) * n;
        }
        let dist = mse(&x, &item.video_tokens);
        let norm = (x.data.iter().map(|v| v * v).sum::<f32>() / x.numel() as f32).sqrt();
        println!("step {i:>2} sigma {sigma:>7.3} -> {sigma_next:>7.3}: rms(x) {norm:.4}, MSE to x0 {dist:.5}");
    }
}
