use rand::Rng as _;

use crate::data::LabeledImages;
use crate::error::Result;
use crate::nn::Tensor;
use crate::rng::{rng_from, tag};

pub const GLYPH_SIZE: usize = 28;
pub const GLYPH_CLASSES: usize = 10;

type Pt = (f64, f64);

/// Stroke primitives in a unit box: x right, y down, roughly [-0.6, 0.6] x [-1, 1].
enum Stroke {
    Line(Pt, Pt),
    /// center, radii, start and end angle in degrees (y down, so -90 is the top).
    Arc(Pt, Pt, f64, f64),
}

fn strokes(class: usize) -> Vec<Stroke> {
    use Stroke::*;
    match class {
        0 => vec![Arc((0.0, 0.0), (0.55, 0.95), 0.0, 360.0)],
        1 => vec![Line((0.1, -1.0), (0.1, 1.0)), Line((-0.3, -0.65), (0.1, -1.0))],
        2 => vec![
            Arc((0.0, -0.45), (0.5, 0.5), 180.0, 390.0),
            Line((0.43, -0.2), (-0.55, 1.0)),
            Line((-0.55, 1.0), (0.6, 1.0)),
        ],
        3 => vec![
            Arc((0.0, -0.5), (0.48, 0.48), -160.0, 90.0),
            Arc((0.0, 0.48), (0.52, 0.52), -90.0, 160.0),
        ],
        4 => vec![
            Line((0.3, -1.0), (-0.6, 0.35)),
            Line((-0.6, 0.35), (0.6, 0.35)),
            Line((0.3, -1.0), (0.3, 1.0)),
        ],
        5 => vec![
            Line((0.55, -1.0), (-0.45, -1.0)),
            Line((-0.45, -1.0), (-0.5, -0.1)),
            Arc((0.0, 0.42), (0.55, 0.55), -125.0, 150.0),
        ],
        6 => vec![
            Arc((0.0, 0.45), (0.5, 0.5), 0.0, 360.0),
            Line((-0.5, 0.4), (0.35, -1.0)),
        ],
        7 => vec![Line((-0.55, -1.0), (0.6, -1.0)), Line((0.6, -1.0), (-0.15, 1.0))],
        8 => vec![
            Arc((0.0, -0.53), (0.4, 0.45), 0.0, 360.0),
            Arc((0.0, 0.48), (0.52, 0.5), 0.0, 360.0),
        ],
        9 => vec![
            Arc((0.0, -0.45), (0.5, 0.5), 0.0, 360.0),
            Line((0.5, -0.4), (0.25, 1.0)),
        ],
        _ => unreachable!("glyph class out of range"),
    }
}

fn polyline(stroke: &Stroke) -> Vec<(Pt, Pt)> {
    match *stroke {
        Stroke::Line(a, b) => vec![(a, b)],
        Stroke::Arc(c, r, from, to) => {
            let pieces = (((to - from).abs() / 12.0).ceil() as usize).max(2);
            let at = |i: usize| {
                let t = (from + (to - from) * i as f64 / pieces as f64).to_radians();
                (c.0 + r.0 * t.cos(), c.1 + r.1 * t.sin())
            };
            (0..pieces).map(|i| (at(i), at(i + 1))).collect()
        }
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders `n_per_class` jittered samples of each of the ten glyph classes,
/// ordered class-major.
pub fn synth_glyphs(seed: u64, n_per_class: usize) -> Result<LabeledImages> {
    let mut rng = rng_from(seed, &[tag("glyphs")]);
    let n = n_per_class * GLYPH_CLASSES;
    let px = GLYPH_SIZE * GLYPH_SIZE;
    let mut data = vec![0f32; n * px];
    let mut labels = Vec::with_capacity(n);
    let center = (GLYPH_SIZE as f64 - 1.0) / 2.0;
    for class in 0..GLYPH_CLASSES {
        let segments: Vec<(Pt, Pt)> = strokes(class).iter().flat_map(polyline).collect();
        for _ in 0..n_per_class {
            let scale = 8.5 * rng.gen_range(0.9..1.1);
            let aspect = rng.gen_range(0.9..1.1);
            let shear = rng.gen_range(-0.2..0.2);
            let (tilt_sin, tilt_cos) = rng.gen_range(-15f64..15.0).to_radians().sin_cos();
            let shift = (rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0));
            let half_width = rng.gen_range(0.7..1.3);
            let amplitude = rng.gen_range(0.7..=1.0);
            let placed: Vec<(Pt, Pt)> = segments
                .iter()
                .map(|&(a, b)| {
                    let map = |p: Pt| {
                        let (x, y) = (p.0 * aspect + shear * p.1, p.1);
                        let (x, y) = (tilt_cos * x - tilt_sin * y, tilt_sin * x + tilt_cos * y);
                        (center + shift.0 + scale * x, center + shift.1 + scale * y)
                    };
                    (map(a), map(b))
                })
                .collect();
            let img = &mut data[labels.len() * px..(labels.len() + 1) * px];
            for y in 0..GLYPH_SIZE {
                for x in 0..GLYPH_SIZE {
                    let p = (x as f64, y as f64);
                    let d = placed
                        .iter()
                        .map(|&(a, b)| segment_distance(p, a, b))
                        .fold(f64::INFINITY, f64::min);
                    // smoothstep edge about 3 px wide, like a scanned pen stroke
                    let t = ((half_width + 1.5 - d) / 3.0).clamp(0.0, 1.0);
                    let cover = t * t * (3.0 - 2.0 * t);
                    img[y * GLYPH_SIZE + x] = (amplitude * cover) as f32;
                }
            }
            labels.push(class);
        }
    }
    LabeledImages::new(
        Tensor::new(vec![n, 1, GLYPH_SIZE, GLYPH_SIZE], data)?,
        labels,
        GLYPH_CLASSES,
    )
}
