//! HD-map rasterization: project typed 3D polylines and tracked 3D boxes
//! through the per-frame camera and draw 1-pixel raster lines, color-coded by
//! element type.

use super::scene::{BoxTrack, CameraModel, MapElement, BOX_WIREFRAME_COLOR};
use crate::error::Result;
use crate::tensor::Tensor;

const NEAR_PLANE: f32 = 1e-3;

/// Rasterize map elements and interpolated box wireframes over `t_frames`
/// frames of extents (height, width). Elements behind the camera are clipped.
pub fn hdmap_rasterize(
    elements: &[MapElement],
    boxes: &[BoxTrack],
    camera: &CameraModel,
    t_frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    camera.validate()?;
    let mut video = Tensor::zeros(&[t_frames, height, width, 3]);
    for f in 0..t_frames {
        camera.pose(f)?; // fail early on missing pose
        let frame_base = f * height * width * 3;
        for element in elements {
            let color = element.kind.color();
            for pair in element.polyline.windows(2) {
                draw_world_segment(
                    &mut video.data[frame_base..],
                    camera,
                    f,
                    pair[0],
                    pair[1],
                    color,
                    height,
                    width,
                )?;
            }
        }
        let t_time = camera.frame_time(f);
        for track in boxes {
            track.validate()?;
            let pose = track.pose_at(t_time);
            let size = track.size_at(t_time);
            let (hx, hy, hz) = (size[0] / 2.0, size[1] / 2.0, size[2] / 2.0);
            let corners: Vec<[f32; 3]> = (0..8)
                .map(|i| {
                    let sx = if i & 1 == 0 { -hx } else { hx };
                    let sy = if i & 2 == 0 { -hy } else { hy };
                    let sz = if i & 4 == 0 { -hz } else { hz };
                    pose.apply([sx, sy, sz])
                })
                .collect();
            const EDGES: [(usize, usize); 12] = [
                (0, 1), (1, 3), (3, 2), (2, 0), // bottom
                (4, 5), (5, 7), (7, 6), (6, 4), // top
                (0, 4), (1, 5), (2, 6), (3, 7), // verticals
            ];
            for (a, b) in EDGES {
                draw_world_segment(
                    &mut video.data[frame_base..],
                    camera,
                    f,
                    corners[a],
                    corners[b],
                    BOX_WIREFRAME_COLOR,
                    height,
                    width,
                )?;
            }
        }
    }
    Ok(video)
}

/// Clip a world segment to the near plane, project, and rasterize.
#[allow(clippy::too_many_arguments)]
fn draw_world_segment(
    frame: &mut [f32],
    camera: &CameraModel,
    f: usize,
    a: [f32; 3],
    b: [f32; 3],
    color: [f32; 3],
    height: usize,
    width: usize,
) -> Result<()> {
    let pose = camera.pose(f)?;
    let ca = pose.apply(a);
    let cb = pose.apply(b);
    let (ca, cb) = match clip_near(ca, cb) {
        Some(seg) => seg,
        None => return Ok(()), // entirely behind the camera
    };
    let k = &camera.intrinsics;
    let pa = (k.fx * ca[0] / ca[2] + k.cx, k.fy * ca[1] / ca[2] + k.cy);
    let pb = (k.fx * cb[0] / cb[2] + k.cx, k.fy * cb[1] / cb[2] + k.cy);
    if let Some(((x0, y0), (x1, y1))) = clip_to_rect(pa, pb, width as f32, height as f32) {
        draw_line(frame, x0, y0, x1, y1, color, height, width);
    }
    Ok(())
}

/// Clip a camera-space segment against z = NEAR_PLANE.
fn clip_near(a: [f32; 3], b: [f32; 3]) -> Option<([f32; 3], [f32; 3])> {
    let (za, zb) = (a[2], b[2]);
    if za < NEAR_PLANE && zb < NEAR_PLANE {
        return None;
    }
    if za >= NEAR_PLANE && zb >= NEAR_PLANE {
        return Some((a, b));
    }
    let t = (NEAR_PLANE - za) / (zb - za);
    let cross = [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        NEAR_PLANE,
    ];
    if za < NEAR_PLANE {
        Some((cross, b))
    } else {
        Some((a, cross))
    }
}

/// Liang-Barsky clip of a pixel-space segment to the frame rectangle.
fn clip_to_rect(a: (f32, f32), b: (f32, f32), w: f32, h: f32) -> Option<((f32, f32), (f32, f32))> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0 = 0.0f32;
    let mut t1 = 1.0f32;
    let checks = [
        (-dx, a.0),            // left: x >= 0
        (dx, w - 1.0 - a.0),   // right
        (-dy, a.1),            // top
        (dy, h - 1.0 - a.1),   // bottom
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return None;
                }
                t0 = t0.max(r);
            } else {
                if r < t0 {
                    return None;
                }
                t1 = t1.min(r);
            }
        }
    }
    Some(((a.0 + t0 * dx, a.1 + t0 * dy), (a.0 + t1 * dx, a.1 + t1 * dy)))
}

/// Bresenham raster of a clipped segment.
fn draw_line(frame: &mut [f32], x0: f32, y0: f32, x1: f32, y1: f32, color: [f32; 3], height: usize, width: usize) {
    let (mut x0, mut y0) = (x0.round() as i64, y0.round() as i64);
    let (x1, y1) = (x1.round() as i64, y1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && x0 < width as i64 && y0 >= 0 && y0 < height as i64 {
            let base = (y0 as usize * width + x0 as usize) * 3;
            frame[base..base + 3].copy_from_slice(&color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
