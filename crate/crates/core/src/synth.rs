//! Synthetic corpus generation: deterministic moving-rectangle scenes with
//! exact per-pixel depth, per-object masks, FG/BG labels, derived LiDAR
//! point sets (depth-image back-projection), and map polylines. Ground truth
//! by construction stands in for external perception models.

use crate::error::{CoreError, Result};
use crate::extractors::scene::{
    BoxKeyframe, BoxTrack, CameraIntrinsics, CameraModel, LidarScan, MapElement, MapElementKind,
    Pose, SceneFile, SegMask, SegMaskSet,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::weightmaps::{RegionLabel, RegionLabeling};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub phrase: String,
    pub color: [f32; 3],
    /// Metric depth of the (fronto-parallel) rectangle.
    pub depth: f32,
    /// Top-left corner at frame 0, in pixels.
    pub start: (f32, f32),
    /// Pixels per frame.
    pub velocity: (f32, f32),
    /// (height, width) in pixels.
    pub size: (usize, usize),
    pub label: RegionLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    /// (T, Y, X).
    pub extents: (usize, usize, usize),
    pub background: [f32; 3],
    pub background_depth: f32,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl ObjectSpec {
    /// Integer pixel rectangle (y0, x0) at frame `t`.
    fn position(&self, t: usize) -> (i64, i64) {
        let y = self.start.0 + self.velocity.0 * t as f32;
        let x = self.start.1 + self.velocity.1 * t as f32;
        (y.round() as i64, x.round() as i64)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.extents;
        if t == 0 || h == 0 || w == 0 {
            return Err(CoreError::Input("empty scene extents".into()));
        }
        if self.background_depth <= 0.0 {
            return Err(CoreError::Input("background depth must be positive".into()));
        }
        for o in &self.objects {
            if o.depth <= 0.0 {
                return Err(CoreError::Input(format!("object {} has non-positive depth", o.id)));
            }
            for f in 0..t {
                let (y, x) = o.position(f);
                if y < 0 || x < 0 || y + o.size.0 as i64 > h as i64 || x + o.size.1 as i64 > w as i64 {
                    return Err(CoreError::Input(format!(
                        "object {} leaves the frame at t={f} (pos {y},{x})",
                        o.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Default pinhole camera for these extents (identity pose each frame).
    pub fn camera(&self) -> CameraModel {
        let (t, h, w) = self.extents;
        CameraModel {
            intrinsics: CameraIntrinsics {
                fx: w.max(h) as f32,
                fy: w.max(h) as f32,
                cx: (w as f32 - 1.0) / 2.0,
                cy: (h as f32 - 1.0) / 2.0,
            },
            poses: vec![Pose::identity(); t],
            fps: 30.0,
        }
    }
}

/// Everything the renderer produces for one clip.
pub struct RenderedScene {
    pub video: Tensor,
    pub depth: Tensor,
    pub masks: SegMaskSet,
    pub labeling: RegionLabeling,
    pub scene: SceneFile,
    /// id -> (phrase, color, depth) for color-based re-extraction.
    pub palette: Vec<(u32, String, [f32; 3], f32)>,
}

/// Render a scene: nearer rectangles occlude farther ones; masks are the
/// visible pixels of each object; LiDAR scans are back-projected from the
/// depth image at 10 Hz; map polylines outline each rectangle.
pub fn synth_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let (t, h, w) = spec.extents;
    let camera = spec.camera();
    let mut video = Tensor::zeros(&[t, h, w, 3]);
    let mut depth = Tensor::filled(&[t, h, w], spec.background_depth);
    let mut owner: Vec<Option<u32>> = vec![None; t * h * w];

    // Far to near, so closer objects overwrite.
    let mut order: Vec<&ObjectSpec> = spec.objects.iter().collect();
    order.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());

    for f in 0..t {
        for px in 0..h * w {
            let base = (f * h * w + px) * 3;
            video.data[base..base + 3].copy_from_slice(&spec.background);
        }
        for o in &order {
            let (y0, x0) = o.position(f);
            for dy in 0..o.size.0 {
                for dx in 0..o.size.1 {
                    let (y, x) = (y0 as usize + dy, x0 as usize + dx);
                    let idx = (f * h + y) * w + x;
                    video.data[idx * 3..idx * 3 + 3].copy_from_slice(&o.color);
                    depth.data[idx] = o.depth;
                    owner[idx] = Some(o.id);
                }
            }
        }
    }

    // Visible masks.
    let masks = SegMaskSet {
        extents: (t, h, w),
        masks: spec
            .objects
            .iter()
            .map(|o| SegMask {
                object_id: o.id,
                phrase: o.phrase.clone(),
                mask: owner.iter().map(|own| *own == Some(o.id)).collect(),
            })
            .collect(),
    };
    masks.validate()?;

    let labeling = RegionLabeling {
        labels: spec.objects.iter().map(|o| (o.id, o.label)).collect(),
    };

    // Box tracks for moving objects, keyframed at every frame time.
    let mut boxes = Vec::new();
    for o in &spec.objects {
        if o.velocity == (0.0, 0.0) {
            continue;
        }
        let keyframes = (0..t)
            .map(|f| {
                let (y0, x0) = o.position(f);
                let uc = x0 as f32 + (o.size.1 as f32 - 1.0) / 2.0;
                let vc = y0 as f32 + (o.size.0 as f32 - 1.0) / 2.0;
                let center = camera.back_project(f, uc, vc, o.depth).unwrap();
                BoxKeyframe {
                    timestamp: camera.frame_time(f),
                    center,
                    size: [
                        o.size.1 as f32 * o.depth / camera.intrinsics.fx,
                        o.size.0 as f32 * o.depth / camera.intrinsics.fy,
                        0.2,
                    ],
                    yaw: 0.0,
                }
            })
            .collect();
        boxes.push(BoxTrack { object_id: o.id, keyframes });
    }

    // LiDAR: back-project every visible pixel (stride 2) of each 10 Hz frame.
    let mut lidar_scans = Vec::new();
    let mut f = 0usize;
    while f < t {
        let mut points = Vec::new();
        let mut dynamic_ids = Vec::new();
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let idx = (f * h + y) * w + x;
                let z = depth.data[idx];
                points.push(camera.back_project(f, x as f32, y as f32, z)?);
                let dyn_id = match owner[idx] {
                    Some(id) => {
                        let obj = spec.objects.iter().find(|o| o.id == id).unwrap();
                        if obj.velocity == (0.0, 0.0) {
                            0
                        } else {
                            id
                        }
                    }
                    None => 0,
                };
                dynamic_ids.push(dyn_id);
            }
        }
        lidar_scans.push(LidarScan { timestamp: camera.frame_time(f), points, dynamic_ids });
        f += 3; // 30 fps frames, 10 Hz scans
    }

    // Map polylines: rectangle outlines at frame 0 (world coordinates).
    let map_elements = spec
        .objects
        .iter()
        .map(|o| {
            let (y0, x0) = o.position(0);
            let corners_px = [
                (x0 as f32, y0 as f32),
                (x0 as f32 + o.size.1 as f32 - 1.0, y0 as f32),
                (x0 as f32 + o.size.1 as f32 - 1.0, y0 as f32 + o.size.0 as f32 - 1.0),
                (x0 as f32, y0 as f32 + o.size.0 as f32 - 1.0),
                (x0 as f32, y0 as f32),
            ];
            let polyline = corners_px
                .iter()
                .map(|&(u, v)| camera.back_project(0, u, v, o.depth).unwrap())
                .collect();
            MapElement {
                kind: if o.velocity == (0.0, 0.0) {
                    MapElementKind::RoadBoundary
                } else {
                    MapElementKind::LaneLine
                },
                polyline,
            }
        })
        .collect();

    let scene = SceneFile { camera, lidar_scans, boxes, map_elements };
    scene.validate()?;

    let palette = spec
        .objects
        .iter()
        .map(|o| (o.id, o.phrase.clone(), o.color, o.depth))
        .collect();

    Ok(RenderedScene { video, depth, masks, labeling, scene, palette })
}

// ── Corpus-level generation ──────────────────────────────────────────

const PHRASES: [&str; 8] = [
    "red crate", "blue panel", "green block", "yellow sign",
    "orange cone", "purple bin", "teal board", "white tile",
];

/// Deterministic random scene specs: 1-3 rectangles per clip with fixed
/// per-id colors, integer velocities, and in-frame trajectories.
pub fn random_corpus_specs(
    count: usize,
    extents: (usize, usize, usize),
    master_seed: u64,
) -> Vec<SceneSpec> {
    let (t, h, w) = extents;
    (0..count)
        .map(|i| {
            let mut rng = RngStream::new(master_seed).substream(i as u64);
            let n_objects = 1 + (rng.next_u64() % 2) as usize;
            let mut objects = Vec::new();
            for oi in 0..n_objects {
                let id = oi as u32 + 1;
                // Consistent color per object id across the corpus, so the
                // control-to-appearance mapping is learnable.
                let color = match id {
                    1 => [0.85, 0.15, 0.1],
                    2 => [0.1, 0.3, 0.85],
                    _ => [0.1, 0.8, 0.2],
                };
                let size = (
                    h / 3 + (rng.next_u64() % (h as u64 / 6)) as usize,
                    w / 3 + (rng.next_u64() % (w as u64 / 6)) as usize,
                );
                // Integer velocity small enough to stay inside.
                let vy = (rng.next_u64() % 2) as f32;
                let vx = (rng.next_u64() % 2) as f32;
                let max_y = h - size.0 - (vy as usize * (t - 1)) - 1;
                let max_x = w - size.1 - (vx as usize * (t - 1)) - 1;
                let start = (
                    (rng.next_u64() % (max_y as u64 + 1)) as f32,
                    (rng.next_u64() % (max_x as u64 + 1)) as f32,
                );
                objects.push(ObjectSpec {
                    id,
                    phrase: PHRASES[(id as usize - 1) % PHRASES.len()].to_string(),
                    color,
                    depth: 2.0 + id as f32,
                    start,
                    velocity: (vy, vx),
                    size,
                    label: if oi == 0 { RegionLabel::Fg } else { RegionLabel::Bg },
                });
            }
            SceneSpec {
                name: format!("clip_{i:03}"),
                extents,
                background: [0.55, 0.55, 0.5],
                background_depth: 12.0,
                objects,
                seed: master_seed ^ i as u64,
            }
        })
        .collect()
}

// ── Color-keyed re-extraction (toy perception stand-ins) ────────────

/// Assign each pixel to the nearest palette color (objects + background);
/// returns per-object masks with the corpus phrases. This is the segmenter
/// stand-in used to evaluate generated videos on the synthetic corpus.
pub fn extract_masks_by_color(
    video: &Tensor,
    palette: &[(u32, String, [f32; 3], f32)],
    background: [f32; 3],
) -> Result<SegMaskSet> {
    if video.rank() != 4 || video.shape[3] != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, 3), got {:?}", video.shape)));
    }
    let (t, h, w) = (video.shape[0], video.shape[1], video.shape[2]);
    let sites = t * h * w;
    let mut assignment: Vec<Option<u32>> = Vec::with_capacity(sites);
    for px in 0..sites {
        let p = &video.data[px * 3..px * 3 + 3];
        let mut best_id = None;
        let mut best = dist2(p, &background);
        for (id, _, color, _) in palette {
            let d = dist2(p, color);
            if d < best {
                best = d;
                best_id = Some(*id);
            }
        }
        assignment.push(best_id);
    }
    Ok(SegMaskSet {
        extents: (t, h, w),
        masks: palette
            .iter()
            .map(|(id, phrase, _, _)| SegMask {
                object_id: *id,
                phrase: phrase.clone(),
                mask: assignment.iter().map(|a| *a == Some(*id)).collect(),
            })
            .collect(),
    })
}

/// Depth proxy for generated videos: nearest palette color decides the
/// pixel's depth (objects at their spec depth, the rest at background depth).
pub fn extract_depth_by_color(
    video: &Tensor,
    palette: &[(u32, String, [f32; 3], f32)],
    background: [f32; 3],
    background_depth: f32,
) -> Result<Tensor> {
    if video.rank() != 4 || video.shape[3] != 3 {
        return Err(CoreError::Shape(format!("expected (T, Y, X, 3), got {:?}", video.shape)));
    }
    let (t, h, w) = (video.shape[0], video.shape[1], video.shape[2]);
    let mut depth = Tensor::zeros(&[t, h, w]);
    for px in 0..t * h * w {
        let p = &video.data[px * 3..px * 3 + 3];
        let mut best_depth = background_depth;
        let mut best = dist2(p, &background);
        for (_, _, color, z) in palette {
            let d = dist2(p, color);
            if d < best {
                best = d;
                best_depth = *z;
            }
        }
        depth.data[px] = best_depth;
    }
    Ok(depth)
}

fn dist2(a: &[f32], b: &[f32; 3]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..3 {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

// ── Corpus file layout ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub id: u32,
    pub phrase: String,
    pub file: String,
}

/// Write one rendered clip under `dir`: video/depth tensors, per-object mask
/// tensors with a JSON index, labels, scene JSON, and the spec itself.
pub fn write_clip(dir: &Path, spec: &SceneSpec, rendered: &RenderedScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    rendered.video.save(&dir.join("video.tensor"))?;
    rendered.depth.save(&dir.join("depth.tensor"))?;
    let mut index = Vec::new();
    for m in &rendered.masks.masks {
        let file = format!("masks/obj_{}.tensor", m.object_id);
        let data: Vec<f32> = m.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (t, h, w) = rendered.masks.extents;
        Tensor::new(vec![t, h, w], data)?.save(&dir.join(&file))?;
        index.push(MaskIndexEntry { id: m.object_id, phrase: m.phrase.clone(), file });
    }
    std::fs::write(dir.join("masks.json"), serde_json::to_string_pretty(&index)?)?;
    rendered.labeling.save(&dir.join("labels.json"))?;
    rendered.scene.save(&dir.join("scene.json"))?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

/// Read a clip's mask set back from its directory.
pub fn read_masks(dir: &Path) -> Result<SegMaskSet> {
    let index: Vec<MaskIndexEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("masks.json"))?)?;
    let mut masks = Vec::new();
    let mut extents = None;
    for e in &index {
        let t = Tensor::load(&dir.join(&e.file))?;
        if t.rank() != 3 {
            return Err(CoreError::Shape(format!("mask {:?} is not (T, Y, X)", t.shape)));
        }
        extents = Some((t.shape[0], t.shape[1], t.shape[2]));
        masks.push(SegMask {
            object_id: e.id,
            phrase: e.phrase.clone(),
            mask: t.data.iter().map(|&v| v != 0.0).collect(),
        });
    }
    let extents = extents.ok_or_else(|| CoreError::Input("clip has no masks".into()))?;
    let set = SegMaskSet { extents, masks };
    set.validate()?;
    Ok(set)
}
