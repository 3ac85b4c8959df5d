//! Procedural glyph pool: a CI-friendly stand-in for handwritten digits.
//!
//! Each class has a deterministic 28x28 binary prototype chosen so that no
//! two prototypes can be confused under rotations up to +-75 degrees:
//! classes differ by blob count, topology, or scale rather than by
//! orientation alone. Samples are the prototype plus Gaussian pixel noise,
//! clamped to [0, 1].

use super::BasePool;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const GLYPH_SIDE: usize = 28;
pub const MAX_CLASSES: usize = 10;

/// Minimum pairwise Hamming distance between class prototypes.
pub const MIN_PROTOTYPE_DISTANCE: usize = 40;

fn disk(px: &mut [f64], cx: f64, cy: f64, r: f64) {
    let s = GLYPH_SIDE;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r * r {
                px[y * s + x] = 1.0;
            }
        }
    }
}

fn ring(px: &mut [f64], cx: f64, cy: f64, r_in: f64, r_out: f64) {
    let s = GLYPH_SIDE;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 >= r_in * r_in && d2 <= r_out * r_out {
                px[y * s + x] = 1.0;
            }
        }
    }
}

fn bar(px: &mut [f64], cx: f64, cy: f64, half_w: f64, half_h: f64) {
    let s = GLYPH_SIDE;
    for y in 0..s {
        for x in 0..s {
            if (x as f64 - cx).abs() <= half_w && (y as f64 - cy).abs() <= half_h {
                px[y * s + x] = 1.0;
            }
        }
    }
}

fn frame(px: &mut [f64], cx: f64, cy: f64, inner: f64, outer: f64) {
    let s = GLYPH_SIDE;
    for y in 0..s {
        for x in 0..s {
            let d = (x as f64 - cx).abs().max((y as f64 - cy).abs());
            if d >= inner && d <= outer {
                px[y * s + x] = 1.0;
            }
        }
    }
}

/// The deterministic binary prototype for `class`.
pub fn prototype(class: usize) -> Vec<f64> {
    let mut px = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
    let c = (GLYPH_SIDE as f64 - 1.0) / 2.0;
    match class {
        0 => disk(&mut px, c, c, 9.0),
        1 => disk(&mut px, c, c, 4.5),
        2 => ring(&mut px, c, c, 5.0, 9.0),
        3 => {
            disk(&mut px, c - 6.0, c, 3.5);
            disk(&mut px, c + 6.0, c, 3.5);
        }
        4 => {
            for i in 0..3 {
                let a = std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                disk(&mut px, c + 7.0 * a.cos(), c - 7.0 * a.sin(), 3.0);
            }
        }
        5 => bar(&mut px, c, c, 10.0, 2.5),
        6 => {
            bar(&mut px, c, c, 8.0, 2.0);
            bar(&mut px, c, c, 2.0, 8.0);
        }
        7 => frame(&mut px, c, c, 5.5, 8.0),
        8 => bar(&mut px, c, c, 5.5, 5.5),
        9 => {
            for (sx, sy) in [(-5.5, -5.5), (5.5, -5.5), (-5.5, 5.5), (5.5, 5.5)] {
                disk(&mut px, c + sx, c + sy, 2.5);
            }
        }
        _ => unreachable!("glyph classes are capped at {MAX_CLASSES}"),
    }
    px
}

/// Builds a labeled pool of `classes * per_class` noisy glyph images.
pub fn synth_glyphs(
    classes: usize,
    per_class: usize,
    noise_sigma: f64,
    rng: &mut SeedStream,
) -> Result<BasePool> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::Parameter(format!(
            "glyph classes must be in 1..={MAX_CLASSES}, got {classes}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Parameter("noise_sigma must be non-negative".into()));
    }
    let protos: Vec<Vec<f64>> = (0..classes).map(prototype).collect();
    for a in 0..classes {
        for b in a + 1..classes {
            let hamming = protos[a]
                .iter()
                .zip(&protos[b])
                .filter(|(x, y)| x != y)
                .count();
            if hamming < MIN_PROTOTYPE_DISTANCE {
                return Err(Error::Data(format!(
                    "glyph prototypes {a} and {b} differ in only {hamming} pixels"
                )));
            }
        }
    }
    let px_per_image = GLYPH_SIDE * GLYPH_SIDE;
    let mut images = Vec::with_capacity(classes * per_class * px_per_image);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..per_class {
            for &p in proto {
                let v = if noise_sigma > 0.0 {
                    (p + noise_sigma * rng.normal()).clamp(0.0, 1.0)
                } else {
                    p
                };
                images.push(v);
            }
            labels.push(class);
        }
    }
    Ok(BasePool {
        h: GLYPH_SIDE,
        w: GLYPH_SIDE,
        images,
        labels,
        class_count: classes,
    })
}
