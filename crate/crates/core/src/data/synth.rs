//! Seeded synthetic aerial road scenes.
//!
//! Roads are thick polylines running between opposite image borders over a
//! mottled background. Optional dark blobs centred on road pixels stand in
//! for tree shadows; they darken the image but the mask still marks the road
//! underneath. A low-contrast mode paints roads close to the background
//! colour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub min_roads: usize,
    pub max_roads: usize,
    pub min_width: f64,
    pub max_width: f64,
    /// Road-fraction cap: the first road that would exceed it is dropped and
    /// no further roads are drawn. The first road is always kept.
    pub max_road_fraction: f64,
    pub occlusion_probability: f64,
    pub max_occluders: usize,
    pub low_contrast_probability: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_roads: 1,
            max_roads: 4,
            min_width: 2.0,
            max_width: 8.0,
            max_road_fraction: 0.2,
            occlusion_probability: 0.5,
            max_occluders: 3,
            low_contrast_probability: 0.2,
        }
    }
}

impl SynthParams {
    /// A scene without any road.
    pub fn empty() -> Self {
        Self {
            min_roads: 0,
            max_roads: 0,
            ..Default::default()
        }
    }
}

fn point_on_side(rng: &mut ChaCha8Rng, side: usize, n: f64) -> (f64, f64) {
    let t = rng.random_range(0.1 * n..0.9 * n);
    match side {
        0 => (t, 0.0),
        1 => (n, t),
        2 => (t, n),
        _ => (0.0, t),
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Deterministic in `seed`. `size` must be a multiple of 32 and at least 32.
pub fn synth_road_sample(seed: u64, size: usize, params: &SynthParams) -> Result<Sample> {
    if size < 32 || size % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic sample size must be a positive multiple of 32, got {size}"
        )));
    }
    if params.min_roads > params.max_roads || params.min_width > params.max_width {
        return Err(Error::InvalidArgument(
            "synthetic parameter ranges are inverted".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size;
    let nf = n as f64;
    let plane = n * n;

    // Background: base colour, a few soft colour fields, pixel noise.
    let base = [
        rng.random_range(0.22..0.42),
        rng.random_range(0.30..0.50),
        rng.random_range(0.18..0.34),
    ];
    let fields: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(3..7))
        .map(|_| {
            let cx = rng.random_range(0.0..nf);
            let cy = rng.random_range(0.0..nf);
            let r = rng.random_range(0.1 * nf..0.4 * nf);
            let tint = [
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.12..0.12),
            ];
            (cx, cy, r, tint)
        })
        .collect();
    let mut image = vec![0.0f64; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                let mut v = base[c];
                for (cx, cy, r, tint) in &fields {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    v += tint[c] * (-d2 / (2.0 * r * r)).exp();
                }
                v += rng.random_range(-0.04..0.04);
                image[c * plane + y * n + x] = v;
            }
        }
    }

    // Roads.
    let mut mask = vec![0u8; plane];
    let road_count = rng.random_range(params.min_roads..=params.max_roads);
    let cap = (params.max_road_fraction * plane as f64).floor() as usize;
    let mut painted = 0usize;
    for _ in 0..road_count {
        let side = rng.random_range(0..4usize);
        let start = point_on_side(&mut rng, side, nf);
        let end = point_on_side(&mut rng, (side + 2) % 4, nf);
        let mut pts = vec![start];
        for _ in 0..rng.random_range(0..3usize) {
            pts.push((
                rng.random_range(0.15 * nf..0.85 * nf),
                rng.random_range(0.15 * nf..0.85 * nf),
            ));
        }
        pts.push(end);
        // Keep interior points ordered along the main direction so roads do not fold back.
        let horizontal = side % 2 == 1;
        let key = |p: &(f64, f64)| if horizontal { p.0 } else { p.1 };
        let last = pts.len() - 1;
        pts[1..last].sort_by(|a, b| key(a).total_cmp(&key(b)));
        if key(&pts[0]) > key(&pts[last]) {
            pts[1..last].reverse();
        }

        let width = if params.max_width > params.min_width {
            rng.random_range(params.min_width..=params.max_width)
        } else {
            params.min_width
        };
        let low_contrast = rng.random_bool(params.low_contrast_probability.clamp(0.0, 1.0));
        let shade = rng.random_range(0.55..0.75);
        let covered: Vec<usize> = (0..plane)
            .filter(|&i| {
                let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let d = pts
                    .windows(2)
                    .map(|s| dist_to_segment(px, py, s[0], s[1]))
                    .fold(f64::INFINITY, f64::min);
                d <= width / 2.0
            })
            .collect();
        let fresh = covered.iter().filter(|&&i| mask[i] == 0).count();
        // A road that would push the mask past the cap is dropped, and no more are tried.
        if painted > 0 && painted + fresh > cap {
            break;
        }
        painted += fresh;
        for i in covered {
            mask[i] = 1;
            for c in 0..3 {
                let v = if low_contrast {
                    base[c] + 0.08
                } else {
                    shade + 0.03 * (c as f64 - 1.0)
                };
                image[c * plane + i] = v + rng.random_range(-0.02..0.02);
            }
        }
    }

    // Shadows across roads; the mask keeps the road.
    let road_pixels: Vec<usize> = (0..plane).filter(|&i| mask[i] == 1).collect();
    if !road_pixels.is_empty()
        && params.max_occluders > 0
        && rng.random_bool(params.occlusion_probability.clamp(0.0, 1.0))
    {
        for _ in 0..rng.random_range(1..=params.max_occluders) {
            let centre = road_pixels[rng.random_range(0..road_pixels.len())];
            let (cx, cy) = ((centre % n) as f64 + 0.5, (centre / n) as f64 + 0.5);
            let r = rng.random_range(3.0..10.0);
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                        let i = y * n + x;
                        image[i] *= 0.35;
                        image[plane + i] = image[plane + i] * 0.45 + 0.03;
                        image[2 * plane + i] *= 0.35;
                    }
                }
            }
        }
    }

    Ok(Sample {
        height: n,
        width: n,
        image: image.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let p = SynthParams::default();
        assert_eq!(
            synth_road_sample(9, 64, &p).unwrap(),
            synth_road_sample(9, 64, &p).unwrap()
        );
        assert_ne!(
            synth_road_sample(9, 64, &p).unwrap().image,
            synth_road_sample(10, 64, &p).unwrap().image
        );
    }

    #[test]
    fn empty_scene_has_no_road() {
        let s = synth_road_sample(3, 64, &SynthParams::empty()).unwrap();
        assert_eq!(s.road_pixels(), 0);
    }

    #[test]
    fn size_validation() {
        assert!(synth_road_sample(0, 48, &SynthParams::default()).is_err());
        assert!(synth_road_sample(0, 0, &SynthParams::default()).is_err());
    }

    #[test]
    fn pixel_ranges() {
        let s = synth_road_sample(1, 32, &SynthParams::default()).unwrap();
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.iter().all(|&m| m <= 1));
    }
}
