use rayon::prelude::*;

use super::scene::SimScene;
use crate::geometry::{DepthMap, ImageBuf, Observation, RgbImage};

pub const BACKGROUND_RGB: [u8; 3] = [24, 24, 28];

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub depth: DepthMap,
    /// Primitive index + 1 per pixel; 0 is background.
    pub instance: ImageBuf<u32>,
    pub sub_label: ImageBuf<u32>,
}

impl GroundTruthFrame {
    /// Pixels showing primitive `index`.
    pub fn pixels_of(&self, index: usize) -> Vec<(u32, u32)> {
        let want = index as u32 + 1;
        let w = self.instance.width;
        self.instance
            .data
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == want)
            .map(|(i, _)| ((i as u32) % w, (i as u32) / w))
            .collect()
    }
}

/// Flat color for a category, stable across runs.
pub fn category_color(category: &str) -> [u8; 3] {
    let mut h: u32 = 0x811c9dc5;
    for b in category.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x01000193);
    }
    [64 + (h & 0xbf) as u8, 64 + ((h >> 8) & 0xbf) as u8, 64 + ((h >> 16) & 0xbf) as u8]
}

/// Casts one ray per pixel and keeps the nearest primitive hit.
pub fn render(scene: &SimScene) -> (Observation, GroundTruthFrame) {
    let intr = scene.intrinsics;
    let cam = scene.camera_pose();
    let (w, h) = (intr.width, intr.height);
    let origin = cam.translation;
    let colors: Vec<[u8; 3]> = scene.primitives.iter().map(|p| p.color.unwrap_or_else(|| category_color(&p.category))).collect();

    let rows: Vec<Vec<(f64, u32, u32, [u8; 3])>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    // Unnormalized direction with unit camera-z, so t is z-depth.
                    let dir = cam.transform_vector(&intr.unproject(u as f64, v as f64));
                    let mut best: Option<(f64, usize, u32)> = None;
                    for (i, p) in scene.primitives.iter().enumerate() {
                        if let Some((t, label)) = p.ray_hit(&origin, &dir) {
                            if best.is_none_or(|(bt, _, _)| t < bt) {
                                best = Some((t, i, label));
                            }
                        }
                    }
                    match best {
                        Some((t, i, label)) => (t, i as u32 + 1, label, colors[i]),
                        None => (0.0, 0, 0, BACKGROUND_RGB),
                    }
                })
                .collect()
        })
        .collect();

    let n = (w * h) as usize;
    let mut depth = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    let mut sub_label = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(n);
    for (t, id, label, c) in rows.into_iter().flatten() {
        depth.push(t);
        instance.push(id);
        sub_label.push(label);
        rgb.push(c);
    }
    let depth = DepthMap { width: w, height: h, data: depth };
    let gt = GroundTruthFrame {
        depth: depth.clone(),
        instance: ImageBuf { width: w, height: h, data: instance },
        sub_label: ImageBuf { width: w, height: h, data: sub_label },
    };
    let rgb = RgbImage { width: w, height: h, data: rgb };
    let obs = Observation::new(rgb, depth, intr, cam, 0).expect("renderer produces consistent frames");
    (obs, gt)
}
