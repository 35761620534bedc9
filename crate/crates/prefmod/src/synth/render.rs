//! Deterministic renderer: striped HSV background plus SDF-drawn subjects
//! with antialiased edges. Every style dimension leaves a measurable,
//! closed-form trace for the oracle estimators.

use super::{Count, Prompt, Shape, StyleParams};
#[cfg(test)]
use super::Position;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CANVAS_CHANNELS: usize = 3;

/// Background value (HSV "V") before stripe modulation.
pub const BG_VALUE: f64 = 1.0;
/// Peak-to-trough stripe depth of the background value channel.
pub const STRIPE_DEPTH: f64 = 0.3;
/// Subject fill (a dark gray; estimators split fg/bg on the value channel).
pub const FG_COLOR: [f64; 3] = [0.12, 0.12, 0.12];
/// Antialiasing width in pixels.
pub const AA_WIDTH: f64 = 1.0;
/// Subject placement jitter amplitude in pixels (uniform, +/-).
pub const JITTER_PX: f64 = 0.35;

/// Subject half-size as a fraction of the canvas side, per copy count.
pub fn subject_half_size(side: usize, count: Count) -> f64 {
    let frac = match count {
        Count::One => 0.17,
        Count::Two => 0.135,
        Count::Three => 0.105,
    };
    frac * side as f64
}

/// Vertical centers of the subject copies, as fractions of the height.
pub fn copy_centers(count: Count) -> &'static [f64] {
    match count {
        Count::One => &[0.5],
        Count::Two => &[0.30, 0.70],
        Count::Three => &[0.18, 0.50, 0.82],
    }
}

/// Background value channel at a given row: 1 at freq 0, sinusoidal stripes
/// otherwise. Exact; the oracle reconstructs it from the detected class.
pub fn stripe_value(row: usize, height: usize, texture_freq: u8) -> f64 {
    if texture_freq == 0 {
        BG_VALUE
    } else {
        let phase = std::f64::consts::TAU * texture_freq as f64 * (row as f64 + 0.5) / height as f64;
        BG_VALUE * (1.0 - STRIPE_DEPTH * 0.5 * (1.0 - phase.cos()))
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / c).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / c + 2.0) / 6.0
    } else {
        ((r - g) / c + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    (h, s, max)
}

// ── Signed distance functions ────────────────────────────────────────

fn sdf_circle(px: f64, py: f64, s: f64) -> f64 {
    (px * px + py * py).sqrt() - s
}

/// Rounded box; at rc = s it degenerates to a circle of radius s.
fn sdf_rounded_box(px: f64, py: f64, hx: f64, hy: f64, rc: f64) -> f64 {
    let qx = px.abs() - (hx - rc);
    let qy = py.abs() - (hy - rc);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - rc
}

/// Equilateral triangle pointing up (apex toward smaller y), corner-rounded
/// by insetting the exact SDF and dilating back.
fn sdf_triangle(px: f64, py: f64, s: f64, roundness: f64) -> f64 {
    let k = 3.0f64.sqrt();
    // Half side length sized so the height spans roughly the +/- s box.
    let r_full = 2.0 * s / k;
    let inradius = r_full / k;
    let rc = roundness * 0.8 * inradius;
    let r = r_full - k * rc;
    // Exact equilateral-triangle SDF (y up), so flip the canvas y axis.
    let mut x = px.abs() - r;
    let mut y = -py + r / k;
    if x + k * y > 0.0 {
        let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
        x = nx;
        y = ny;
    }
    x -= x.clamp(-2.0 * r, 0.0);
    let d = -(x * x + y * y).sqrt() * y.signum();
    d - rc
}

/// Union of two rounded bars.
fn sdf_cross(px: f64, py: f64, s: f64, roundness: f64) -> f64 {
    let bar = 0.42 * s;
    let rc = roundness * 0.9 * bar;
    let horium = sdf_rounded_box(px, py, s, bar, rc);
    let vert = sdf_rounded_box(px, py, bar, s, rc);
    horium.min(vert)
}

/// Signed distance of one subject copy; negative inside.
pub fn shape_sdf(shape: Shape, roundness: f64, px: f64, py: f64, s: f64) -> f64 {
    match shape {
        Shape::Circle => sdf_circle(px, py, s),
        Shape::Square => sdf_rounded_box(px, py, s, s, roundness * s),
        Shape::Triangle => sdf_triangle(px, py, s, roundness),
        Shape::Cross => sdf_cross(px, py, s, roundness),
    }
}

fn coverage_of(d: f64) -> f64 {
    (0.5 - d / AA_WIDTH).clamp(0.0, 1.0)
}

/// Subject coverage map for a content prompt: `count` copies of `shape`
/// centered at `cx` (pixels), with per-copy vertical layout.
pub fn subject_coverage(
    side: usize,
    shape: Shape,
    count: Count,
    roundness: f64,
    cx: f64,
    cy_offsets: &[f64],
) -> Vec<f64> {
    let s = subject_half_size(side, count);
    let centers = copy_centers(count);
    let mut cov = vec![0.0; side * side];
    for (k, &cy_frac) in centers.iter().enumerate() {
        let cy = cy_frac * side as f64 + cy_offsets.get(k).copied().unwrap_or(0.0);
        for y in 0..side {
            for x in 0..side {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let d = shape_sdf(shape, roundness, px, py, s);
                let c = coverage_of(d);
                let cell = &mut cov[y * side + x];
                *cell = f64::max(*cell, c);
            }
        }
    }
    cov
}

/// Canonical coverage template for a prompt at a given horizontal center,
/// rendered at mid roundness with no jitter. Used by the content oracle.
pub fn template_coverage(side: usize, shape: Shape, count: Count, cx: f64) -> Vec<f64> {
    subject_coverage(side, shape, count, 0.5, cx, &[])
}

/// Render a prompt in a style. Deterministic in (prompt, style, seed);
/// the seed only drives sub-pixel placement jitter. Empty prompts render
/// background only. Output is `[3, side, side]` in [-1, 1].
pub fn render(prompt: &Prompt, style: &StyleParams, seed: u64, side: usize) -> Tensor {
    debug_assert!(style.valid(), "invalid style {style:?}");
    let mut rng = Rng::seed_from(seed);
    let jx = rng.uniform(-JITTER_PX, JITTER_PX);

    let mut rgb = vec![0.0; 3 * side * side];
    for y in 0..side {
        let v = stripe_value(y, side, style.texture_freq);
        let row_color = hsv_to_rgb(style.hue, style.saturation, v);
        for x in 0..side {
            for ch in 0..3 {
                rgb[ch * side * side + y * side + x] = row_color[ch];
            }
        }
    }

    if let Prompt::Content {
        shape,
        count,
        position,
    } = prompt
    {
        let cy_offsets: Vec<f64> = copy_centers(*count)
            .iter()
            .map(|_| rng.uniform(-JITTER_PX, JITTER_PX))
            .collect();
        let cx = (position.anchor() + style.offset) * side as f64 + jx;
        let cov = subject_coverage(side, *shape, *count, style.roundness, cx, &cy_offsets);
        for y in 0..side {
            for x in 0..side {
                let c = cov[y * side + x];
                if c > 0.0 {
                    for ch in 0..3 {
                        let idx = ch * side * side + y * side + x;
                        rgb[idx] = rgb[idx] * (1.0 - c) + FG_COLOR[ch] * c;
                    }
                }
            }
        }
    }

    let data: Vec<f64> = rgb.iter().map(|&v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)).collect();
    Tensor::new(vec![CANVAS_CHANNELS, side, side], data).unwrap()
}

/// Convert a `[3, H, W]` image in [-1, 1] back to per-pixel RGB in [0, 1].
pub fn image_to_rgb01(image: &Tensor) -> (usize, usize, Vec<[f64; 3]>) {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        out.push([
            (d[i] + 1.0) / 2.0,
            (d[plane + i] + 1.0) / 2.0,
            (d[2 * plane + i] + 1.0) / 2.0,
        ]);
    }
    (h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style(hue: f64, sat: f64, round: f64, tex: u8, off: f64) -> StyleParams {
        StyleParams {
            hue,
            saturation: sat,
            roundness: round,
            texture_freq: tex,
            offset: off,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let p = Prompt::new(Shape::Cross, Count::Two, Position::Right);
        let s = style(0.61, 0.75, 0.4, 2, 0.05);
        let a = render(&p, &s, 1234, 16);
        let b = render(&p, &s, 1234, 16);
        assert!(a.bits_eq(&b));
        let c = render(&p, &s, 1235, 16);
        assert!(!a.bits_eq(&c), "different seeds should move the jitter");
    }

    #[test]
    fn flat_red_background_before_subject() {
        // hue 0, saturation 1, no stripes: every background pixel is pure red.
        let s = style(0.0, 1.0, 0.5, 0, 0.0);
        let img = render(&Prompt::Empty, &s, 7, 16);
        let (h, w, rgb) = image_to_rgb01(&img);
        assert_eq!((h, w), (16, 16));
        for px in rgb {
            assert!((px[0] - 1.0).abs() < 1e-12);
            assert!(px[1].abs() < 1e-12);
            assert!(px[2].abs() < 1e-12);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(h, s, v) in &[(0.0, 1.0, 1.0), (0.33, 0.5, 0.8), (0.91, 0.2, 0.7)] {
            let [r, g, b] = hsv_to_rgb(h, s, v);
            let (h2, s2, v2) = rgb_to_hsv(r, g, b);
            assert!((h - h2).abs() < 1e-12 || (h - h2).abs() > 1.0 - 1e-12);
            assert!((s - s2).abs() < 1e-12);
            assert!((v - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn square_at_full_roundness_matches_circle() {
        for &(px, py) in &[(0.0, 0.0), (1.5, 2.0), (-3.0, 0.5), (2.2, -2.2)] {
            let sq = shape_sdf(Shape::Square, 1.0, px, py, 2.5);
            let ci = shape_sdf(Shape::Circle, 1.0, px, py, 2.5);
            assert!((sq - ci).abs() < 1e-12);
        }
    }

    #[test]
    fn image_values_in_range() {
        let p = Prompt::new(Shape::Triangle, Count::Three, Position::Left);
        let s = style(0.8, 0.9, 0.1, 3, -0.1);
        let img = render(&p, &s, 99, 16);
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}

