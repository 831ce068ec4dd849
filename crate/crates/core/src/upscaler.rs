//! Patch-based tiled denoising with overlap averaging, plus the synthetic
//! degradation pipeline used to make low-quality training inputs.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

// ── Tile planning ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TileRect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct TilePlan {
    pub extents: (usize, usize),
    pub grid: (usize, usize),
    pub overlap: usize,
    pub tile: (usize, usize),
    /// Row-major tile order; merging always follows this order.
    pub rects: Vec<TileRect>,
    /// Per-pixel coverage counts.
    pub coverage: Vec<u32>,
}

/// Equal-sized tiles over (height, width): adjacent tiles share `overlap`
/// pixels. Requires (extent + (grid-1)*overlap) divisible by grid on each
/// axis; the error suggests padded extents otherwise.
pub fn plan_tiles(extents: (usize, usize), grid: (usize, usize), overlap: usize) -> Result<TilePlan> {
    let (h, w) = extents;
    let (gr, gc) = grid;
    if gr == 0 || gc == 0 || h == 0 || w == 0 {
        return Err(CoreError::Plan("empty grid or frame".into()));
    }
    let fit = |ext: usize, g: usize| -> std::result::Result<usize, usize> {
        let total = ext + (g - 1) * overlap;
        if total % g == 0 {
            Ok(total / g)
        } else {
            // Smallest padded extent that divides evenly.
            let mut padded = ext + 1;
            while (padded + (g - 1) * overlap) % g != 0 {
                padded += 1;
            }
            Err(padded)
        }
    };
    let (th, tw) = match (fit(h, gr), fit(w, gc)) {
        (Ok(th), Ok(tw)) => (th, tw),
        (a, b) => {
            let ph = a.err().unwrap_or(h);
            let pw = b.err().unwrap_or(w);
            return Err(CoreError::Plan(format!(
                "extents ({h}, {w}) do not tile into {gr}x{gc} with overlap {overlap}; \
                 nearest padded extents: ({ph}, {pw})"
            )));
        }
    };
    // With three or more tiles on an axis, an overlap wider than the stride
    // would triple-cover pixels; coverage is contractually in {1, 2, 4}.
    if (gr > 2 && th < 2 * overlap) || (gc > 2 && tw < 2 * overlap) {
        return Err(CoreError::Plan(format!(
            "overlap {overlap} exceeds half the tile ({th}x{tw}); coverage would leave {{1,2,4}}"
        )));
    }
    let mut rects = Vec::with_capacity(gr * gc);
    let mut coverage = vec![0u32; h * w];
    for r in 0..gr {
        for c in 0..gc {
            let y0 = r * (th - overlap);
            let x0 = c * (tw - overlap);
            rects.push(TileRect { y0, x0, h: th, w: tw });
            for y in y0..y0 + th {
                for x in x0..x0 + tw {
                    coverage[y * w + x] += 1;
                }
            }
        }
    }
    if coverage.iter().any(|&c| c == 0) {
        return Err(CoreError::Plan("tiles do not cover the frame".into()));
    }
    Ok(TilePlan { extents, grid, overlap, tile: (th, tw), rects, coverage })
}

// ── Tiled denoising ──────────────────────────────────────────────────

/// One sigma step of patch-based denoising on a (T, Y, X, C) latent: the
/// denoiser runs independently on each spatial tile (full temporal extent),
/// and overlapping pixels take the arithmetic mean over covering tiles,
/// accumulated in fixed tile order.
pub fn tiled_denoise(
    x: &Tensor,
    sigma: f32,
    plan: &TilePlan,
    denoiser: &mut dyn FnMut(&Tensor, f32) -> Result<Tensor>,
) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, C) latent, got {:?}", x.shape)));
    }
    let (t, h, w, ch) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if (h, w) != plan.extents {
        return Err(CoreError::Plan(format!(
            "plan extents {:?} do not match latent ({h}, {w})",
            plan.extents
        )));
    }
    let mut acc = vec![0.0f32; x.numel()];
    for rect in &plan.rects {
        let mut tile = Tensor::zeros(&[t, rect.h, rect.w, ch]);
        for ft in 0..t {
            for y in 0..rect.h {
                for xx in 0..rect.w {
                    let src = ((ft * h + rect.y0 + y) * w + rect.x0 + xx) * ch;
                    let dst = ((ft * rect.h + y) * rect.w + xx) * ch;
                    tile.data[dst..dst + ch].copy_from_slice(&x.data[src..src + ch]);
                }
            }
        }
        let out = denoiser(&tile, sigma)?;
        if out.shape != tile.shape {
            return Err(CoreError::Shape(format!(
                "denoiser changed tile shape: {:?} -> {:?}",
                tile.shape, out.shape
            )));
        }
        for ft in 0..t {
            for y in 0..rect.h {
                for xx in 0..rect.w {
                    let dst = ((ft * h + rect.y0 + y) * w + rect.x0 + xx) * ch;
                    let src = ((ft * rect.h + y) * rect.w + xx) * ch;
                    for cc in 0..ch {
                        acc[dst + cc] += out.data[src + cc];
                    }
                }
            }
        }
    }
    let mut result = Tensor::zeros(&x.shape);
    for ft in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let cov = plan.coverage[y * w + xx] as f32;
                let base = ((ft * h + y) * w + xx) * ch;
                for cc in 0..ch {
                    result.data[base + cc] = acc[base + cc] / cov;
                }
            }
        }
    }
    Ok(result)
}

// ── Degradation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeConfig {
    /// Gaussian blur sigma; non-positive skips the blur.
    pub blur_sigma: f32,
    /// Downscale factor (2 or 4).
    pub scale: usize,
    /// Additive Gaussian noise sigma; non-positive skips.
    pub noise_sigma: f32,
    /// 8x8 block-DCT quantization step; non-positive skips.
    pub dct_quant: f32,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig { blur_sigma: 1.0, scale: 2, noise_sigma: 0.03, dct_quant: 0.05 }
    }
}

/// Seeded corruption pipeline: Gaussian blur, bicubic downscale, additive
/// Gaussian noise, 8x8 block-DCT quantization.
pub fn degrade(video: &Tensor, cfg: &DegradeConfig, seed: u64) -> Result<Tensor> {
    if video.rank() != 4 || video.shape[3] != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, 3) video, got {:?}", video.shape)));
    }
    if cfg.scale != 2 && cfg.scale != 4 {
        return Err(CoreError::Config(format!("scale must be 2 or 4, got {}", cfg.scale)));
    }
    let (t, h, w) = (video.shape[0], video.shape[1], video.shape[2]);
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(CoreError::Shape(format!(
            "extents ({h}, {w}) not divisible by scale {}",
            cfg.scale
        )));
    }
    let (oh, ow) = (h / cfg.scale, w / cfg.scale);
    if cfg.dct_quant > 0.0 && (oh % 8 != 0 || ow % 8 != 0) {
        return Err(CoreError::Shape(format!(
            "downscaled extents ({oh}, {ow}) must be divisible by 8 for DCT quantization"
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut out = Tensor::zeros(&[t, oh, ow, 3]);
    for f in 0..t {
        // Per-channel planes.
        for c in 0..3usize {
            let mut plane = vec![0.0f32; h * w];
            for i in 0..h * w {
                plane[i] = video.data[(f * h * w + i) * 3 + c];
            }
            if cfg.blur_sigma > 0.0 {
                plane = crate::extractors::canny::gaussian_smooth(&plane, h, w, cfg.blur_sigma);
            }
            let mut small = bicubic_downscale(&plane, h, w, cfg.scale);
            if cfg.noise_sigma > 0.0 {
                for v in small.iter_mut() {
                    *v += cfg.noise_sigma * rng.next_normal();
                }
            }
            if cfg.dct_quant > 0.0 {
                dct_quantize_plane(&mut small, oh, ow, cfg.dct_quant);
            }
            for i in 0..oh * ow {
                out.data[(f * oh * ow + i) * 3 + c] = small[i];
            }
        }
    }
    Ok(out)
}

/// Separable Catmull-Rom bicubic resampling to (h/scale, w/scale), sampling
/// at destination pixel centers with clamp-to-edge.
pub fn bicubic_downscale(plane: &[f32], h: usize, w: usize, scale: usize) -> Vec<f32> {
    let (oh, ow) = (h / scale, w / scale);
    // Horizontal pass.
    let mut tmp = vec![0.0f32; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let src = (ox as f32 + 0.5) * scale as f32 - 0.5;
            tmp[y * ow + ox] = cubic_sample_row(&plane[y * w..(y + 1) * w], src);
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; oh * ow];
    let mut column = vec![0.0f32; h];
    for ox in 0..ow {
        for y in 0..h {
            column[y] = tmp[y * ow + ox];
        }
        for oy in 0..oh {
            let src = (oy as f32 + 0.5) * scale as f32 - 0.5;
            out[oy * ow + ox] = cubic_sample_row(&column, src);
        }
    }
    out
}

fn catmull_rom(t: f32) -> f32 {
    let a = -0.5f32;
    let t = t.abs();
    if t < 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_sample_row(row: &[f32], src: f32) -> f32 {
    let base = src.floor() as i64;
    let frac = src - base as f32;
    let mut acc = 0.0f32;
    let mut wsum = 0.0f32;
    for k in -1i64..=2 {
        let idx = (base + k).clamp(0, row.len() as i64 - 1) as usize;
        let wgt = catmull_rom(k as f32 - frac);
        acc += wgt * row[idx];
        wsum += wgt;
    }
    acc / wsum
}

/// Quantize the DCT-II coefficients of each 8x8 block to multiples of `q`.
fn dct_quantize_plane(plane: &mut [f32], h: usize, w: usize, q: f32) {
    let mut block = [[0.0f32; 8]; 8];
    let mut coef = [[0.0f32; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + i) * w + bx + j];
                }
            }
            // Forward DCT-II (orthonormal).
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0f32;
                    for (i, row) in block.iter().enumerate() {
                        for (j, &x) in row.iter().enumerate() {
                            acc += x
                                * (((2 * i + 1) as f32 * u as f32 * std::f32::consts::PI / 16.0).cos())
                                * (((2 * j + 1) as f32 * v as f32 * std::f32::consts::PI / 16.0).cos());
                        }
                    }
                    let au = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
                    let av = if v == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
                    let c = au * av * acc;
                    coef[u][v] = (c / q).round() * q;
                }
            }
            // Inverse.
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = 0.0f32;
                    for (u, row) in coef.iter().enumerate() {
                        for (v, &cuv) in row.iter().enumerate() {
                            let au = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
                            let av = if v == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
                            acc += au
                                * av
                                * cuv
                                * (((2 * i + 1) as f32 * u as f32 * std::f32::consts::PI / 16.0).cos())
                                * (((2 * j + 1) as f32 * v as f32 * std::f32::consts::PI / 16.0).cos());
                        }
                    }
                    plane[(by + i) * w + bx + j] = acc;
                }
            }
        }
    }
}

/// Bicubic upscale of a (T, Y, X, 3) video by an integer factor (destination
/// pixel centers sampled back into the source).
pub fn bicubic_upscale(video: &Tensor, scale: usize) -> Result<Tensor> {
    if video.rank() != 4 || video.shape[3] != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, 3) video, got {:?}", video.shape)));
    }
    let (t, h, w) = (video.shape[0], video.shape[1], video.shape[2]);
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(&[t, oh, ow, 3]);
    for f in 0..t {
        for c in 0..3usize {
            let mut plane = vec![0.0f32; h * w];
            for i in 0..h * w {
                plane[i] = video.data[(f * h * w + i) * 3 + c];
            }
            // Horizontal then vertical cubic resampling to the larger grid.
            let mut tmp = vec![0.0f32; h * ow];
            for y in 0..h {
                for ox in 0..ow {
                    let src = (ox as f32 + 0.5) / scale as f32 - 0.5;
                    tmp[y * ow + ox] = cubic_sample_row(&plane[y * w..(y + 1) * w], src);
                }
            }
            let mut column = vec![0.0f32; h];
            for ox in 0..ow {
                for y in 0..h {
                    column[y] = tmp[y * ow + ox];
                }
                for oy in 0..oh {
                    let src = (oy as f32 + 0.5) / scale as f32 - 0.5;
                    out.data[((f * oh + oy) * ow + ox) * 3 + c] = cubic_sample_row(&column, src);
                }
            }
        }
    }
    Ok(out)
}
