//! Closed-form estimators over rendered images: style recovery, prompt
//! consistency, and a multi-scale perceptual distance.
//!
//! The estimators only see pixels. Style recovery works in two passes:
//! a rough background mask gives the stripe class, the stripe class gives
//! the exact background value per row, and from that a sub-pixel subject
//! coverage map is reconstructed for the geometric estimates.

use super::render::{
    image_to_rgb01, rgb_to_hsv, shape_sdf, stripe_value, subject_half_size,
    template_coverage, FG_COLOR, STRIPE_DEPTH,
};
use super::{Count, Position, Prompt, Shape, StyleParams};
use crate::tensor::Tensor;

/// Background pixels for the first, rough pass.
const ROUGH_BG_MAXC: f64 = 0.6;
/// Pixels this covered or more form the component mask.
const MASK_COV: f64 = 0.5;
/// Color statistics only use pixels this clean.
const COLOR_COV_MAX: f64 = 0.02;
/// Minimum total coverage (in pixels) before geometry is estimated.
const MIN_SUBJECT_COV: f64 = 1.0;
/// Stripe amplitude threshold: half the renderer's amplitude.
const TEX_AMP_THRESHOLD: f64 = STRIPE_DEPTH / 2.0 * 0.5;
/// Smallest subject half-size (pixels) with measurable corner softness.
const MIN_ROUNDNESS_HALF_SIZE: f64 = 2.0;

/// Fixed 9-prompt evaluation set covering all counts and positions.
pub static EVAL_PROMPTS: [Prompt; 9] = [
    Prompt::Content { shape: Shape::Circle, count: Count::One, position: Position::Left },
    Prompt::Content { shape: Shape::Circle, count: Count::Two, position: Position::Center },
    Prompt::Content { shape: Shape::Circle, count: Count::Three, position: Position::Right },
    Prompt::Content { shape: Shape::Square, count: Count::One, position: Position::Center },
    Prompt::Content { shape: Shape::Square, count: Count::Two, position: Position::Right },
    Prompt::Content { shape: Shape::Square, count: Count::Three, position: Position::Left },
    Prompt::Content { shape: Shape::Triangle, count: Count::One, position: Position::Right },
    Prompt::Content { shape: Shape::Triangle, count: Count::Two, position: Position::Left },
    Prompt::Content { shape: Shape::Triangle, count: Count::Three, position: Position::Center },
];

/// Style estimate recovered from pixels alone. Geometric dimensions are
/// `None` when the image carries no signal for them (no subject, or a
/// circle, whose corners say nothing about corner softness).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatedStyle {
    pub hue: f64,
    pub saturation: f64,
    pub texture_freq: u8,
    pub roundness: Option<f64>,
    pub offset: Option<f64>,
}

impl EstimatedStyle {
    /// Mean normalized error against a ground-truth style, averaged over
    /// the dimensions the estimate could measure.
    pub fn error_against(&self, truth: &StyleParams) -> f64 {
        let hue_raw = (self.hue - truth.hue).abs();
        let mut total = hue_raw.min(1.0 - hue_raw) / 0.5
            + (self.saturation - truth.saturation).abs() / 0.8
            + (self.texture_freq as f64 - truth.texture_freq as f64).abs() / 3.0;
        let mut dims = 3.0;
        if let Some(r) = self.roundness {
            total += (r - truth.roundness).abs();
            dims += 1.0;
        }
        if let Some(o) = self.offset {
            total += (o - truth.offset).abs() / 0.5;
            dims += 1.0;
        }
        total / dims
    }

    /// Distance between two estimates over their mutually available
    /// dimensions.
    pub fn distance_between(&self, other: &EstimatedStyle) -> f64 {
        let hue_raw = (self.hue - other.hue).abs();
        let mut total = hue_raw.min(1.0 - hue_raw) / 0.5
            + (self.saturation - other.saturation).abs() / 0.8
            + (self.texture_freq as f64 - other.texture_freq as f64).abs() / 3.0;
        let mut dims = 3.0;
        if let (Some(a), Some(b)) = (self.roundness, other.roundness) {
            total += (a - b).abs();
            dims += 1.0;
        }
        if let (Some(a), Some(b)) = (self.offset, other.offset) {
            total += (a - b).abs() / 0.5;
            dims += 1.0;
        }
        total / dims
    }
}

// ── Shared pixel analysis ────────────────────────────────────────────

struct Analysis {
    side: usize,
    maxc: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    texture_freq: u8,
    /// Reconstructed subject coverage per pixel.
    coverage: Vec<f64>,
    coverage_total: f64,
}

fn analyze(image: &Tensor) -> Analysis {
    let (h, w, rgb) = image_to_rgb01(image);
    debug_assert_eq!(h, w, "canvas is square");
    let side = h;
    let maxc: Vec<f64> = rgb.iter().map(|p| p[0].max(p[1]).max(p[2])).collect();

    // Pass 1: rough background rows -> stripe class.
    let mut profile = Vec::with_capacity(side);
    for y in 0..side {
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in 0..side {
            let v = maxc[y * side + x];
            if v >= ROUGH_BG_MAXC {
                sum += v;
                n += 1;
            }
        }
        profile.push(if n > 0 { Some(sum / n as f64) } else { None });
    }
    let texture_freq = classify_texture(&profile, side);

    // Pass 2: exact background value per row -> coverage reconstruction.
    let fg_v = FG_COLOR[0].max(FG_COLOR[1]).max(FG_COLOR[2]);
    let mut coverage = vec![0.0; side * side];
    let mut coverage_total = 0.0;
    for y in 0..side {
        let v_bg = stripe_value(y, side, texture_freq);
        for x in 0..side {
            let c = ((v_bg - maxc[y * side + x]) / (v_bg - fg_v)).clamp(0.0, 1.0);
            coverage[y * side + x] = c;
            coverage_total += c;
        }
    }

    Analysis {
        side,
        maxc,
        rgb,
        texture_freq,
        coverage,
        coverage_total,
    }
}

/// Spectral peak of the background row profile over the candidate stripe
/// frequencies, with a null class when no frequency carries real amplitude.
fn classify_texture(profile: &[Option<f64>], side: usize) -> u8 {
    let rows: Vec<(f64, f64)> = profile
        .iter()
        .enumerate()
        .filter_map(|(r, v)| v.map(|p| (r as f64 + 0.5, p)))
        .collect();
    if rows.len() < 4 {
        return 0;
    }
    let mean = rows.iter().map(|(_, p)| p).sum::<f64>() / rows.len() as f64;
    let mut best = (0u8, 0.0);
    for f in 1..=3u8 {
        let (mut cs, mut sn) = (0.0, 0.0);
        for &(r, p) in &rows {
            let phase = std::f64::consts::TAU * f as f64 * r / side as f64;
            cs += (p - mean) * phase.cos();
            sn += (p - mean) * phase.sin();
        }
        let amp = 2.0 * (cs * cs + sn * sn).sqrt() / rows.len() as f64;
        if amp > best.1 {
            best = (f, amp);
        }
    }
    if best.1 >= TEX_AMP_THRESHOLD {
        best.0
    } else {
        0
    }
}

/// 4-connected components of the thresholded coverage mask, largest first.
fn components(coverage: &[f64], side: usize) -> Vec<Vec<usize>> {
    let mask: Vec<bool> = coverage.iter().map(|&c| c >= MASK_COV).collect();
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut queue = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(i) = queue.pop() {
            comp.push(i);
            let (y, x) = (i / side, i % side);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < side {
                push(i + 1);
            }
            if y > 0 {
                push(i - side);
            }
            if y + 1 < side {
                push(i + side);
            }
        }
        comps.push(comp);
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

/// Coverage-weighted centroid of one component.
fn centroid(coverage: &[f64], side: usize, comp: &[usize]) -> (f64, f64) {
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &i in comp {
        let c = coverage[i];
        w += c;
        sx += c * ((i % side) as f64 + 0.5);
        sy += c * ((i / side) as f64 + 0.5);
    }
    if w > 0.0 {
        (sx / w, sy / w)
    } else {
        (side as f64 / 2.0, side as f64 / 2.0)
    }
}

/// Candidate subject template: one copy per detected component center.
fn candidate_template(
    side: usize,
    shape: Shape,
    rho: f64,
    half_size: f64,
    centers: &[(f64, f64)],
) -> Vec<f64> {
    let mut cov = vec![0.0; side * side];
    for &(cx, cy) in centers {
        for y in 0..side {
            for x in 0..side {
                let d = shape_sdf(shape, rho, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, half_size);
                let c = (0.5 - d).clamp(0.0, 1.0);
                let cell = &mut cov[y * side + x];
                *cell = f64::max(*cell, c);
            }
        }
    }
    cov
}

/// Joint shape and roundness fit: the corner pixels are the only thing
/// that distinguishes the roundness candidates, so maximizing template
/// correlation over (shape, roundness) reads the corner occupancy of the
/// detected components directly.
fn fit_shape_roundness(
    analysis: &Analysis,
    centers: &[(f64, f64)],
    half_size: f64,
) -> (Shape, Option<f64>) {
    let side = analysis.side;
    let mut best = (Shape::Circle, 0.5, f64::NEG_INFINITY);
    let mut best_scores = [0.0f64; 11];
    let mut circle_score = f64::NEG_INFINITY;
    for shape in Shape::ALL {
        let mut scores = [0.0f64; 11];
        let mut shape_best = f64::NEG_INFINITY;
        for k in 0..=10 {
            let rho = k as f64 / 10.0;
            let tmpl = candidate_template(side, shape, rho, half_size, centers);
            scores[k] = ncc(&analysis.coverage, &tmpl);
            shape_best = shape_best.max(scores[k]);
            if shape == Shape::Circle {
                let first = scores[0]; // circles are identical at every roundness
                for slot in scores.iter_mut().skip(1) {
                    *slot = first;
                }
                break;
            }
        }
        if shape == Shape::Circle {
            circle_score = shape_best;
        }
        if shape_best > best.2 {
            let k_best = (0..=10).max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap()).unwrap();
            best = (shape, k_best as f64 / 10.0, shape_best);
            best_scores = scores;
        }
    }
    let (shape, coarse, best_score) = best;
    if shape == Shape::Circle {
        return (shape, None);
    }
    // Corner radii differ by at most a pixel on subjects this small; under
    // one pixel of antialiasing that is below measurement resolution.
    if half_size < MIN_ROUNDNESS_HALF_SIZE {
        return (shape, None);
    }
    // A cornered fit that barely beats the circle template is circle
    // ambiguous; corner softness is then unmeasurable.
    if best_score - circle_score < 0.003 {
        return (Shape::Circle, None);
    }
    // When the score landscape is flat the canvas cannot resolve corner
    // softness for this subject; report no measurement rather than noise.
    let range = best_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - best_scores.iter().copied().fold(f64::INFINITY, f64::min);
    if range < 0.012 {
        return (shape, None);
    }
    // refine around the coarse optimum
    let mut fine = (coarse, f64::NEG_INFINITY);
    let lo = (coarse - 0.1).max(0.0);
    let hi = (coarse + 0.1).min(1.0);
    let mut rho = lo;
    while rho <= hi + 1e-9 {
        let tmpl = candidate_template(side, shape, rho, half_size, centers);
        let score = ncc(&analysis.coverage, &tmpl);
        if score > fine.1 {
            fine = (rho, score);
        }
        rho += 0.02;
    }
    (shape, Some(fine.0))
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

// ── Public estimators ────────────────────────────────────────────────

/// Recover style parameters from an image.
pub fn estimate_style(image: &Tensor) -> EstimatedStyle {
    let analysis = analyze(image);
    let side = analysis.side;

    // Color statistics over clean background pixels, chroma-weighted
    // circular mean for hue.
    let (mut cw_cos, mut cw_sin, mut sat_sum, mut sat_n) = (0.0, 0.0, 0.0, 0.0);
    let mut any_clean = false;
    for i in 0..side * side {
        if analysis.coverage[i] <= COLOR_COV_MAX && analysis.maxc[i] >= ROUGH_BG_MAXC {
            any_clean = true;
            let [r, g, b] = analysis.rgb[i];
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let chroma = s * v;
            cw_cos += chroma * (std::f64::consts::TAU * h).cos();
            cw_sin += chroma * (std::f64::consts::TAU * h).sin();
            sat_sum += s;
            sat_n += 1.0;
        }
    }
    if !any_clean {
        // Arbitrary image with no recognizable background: fall back to
        // chroma-weighted stats over everything.
        for i in 0..side * side {
            let [r, g, b] = analysis.rgb[i];
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let chroma = s * v;
            cw_cos += chroma * (std::f64::consts::TAU * h).cos();
            cw_sin += chroma * (std::f64::consts::TAU * h).sin();
            sat_sum += s;
            sat_n += 1.0;
        }
    }
    let hue = if cw_cos == 0.0 && cw_sin == 0.0 {
        0.0
    } else {
        (cw_sin.atan2(cw_cos) / std::f64::consts::TAU).rem_euclid(1.0)
    };
    let saturation = if sat_n > 0.0 { sat_sum / sat_n } else { 0.0 };

    if analysis.coverage_total < MIN_SUBJECT_COV {
        return EstimatedStyle {
            hue,
            saturation,
            texture_freq: analysis.texture_freq,
            roundness: None,
            offset: None,
        };
    }

    // Offset: coverage-weighted centroid column, snapped to the nearest
    // position anchor.
    let mut cx = 0.0;
    for y in 0..side {
        for x in 0..side {
            cx += analysis.coverage[y * side + x] * (x as f64 + 0.5);
        }
    }
    cx /= analysis.coverage_total;
    let x_frac = cx / side as f64;
    let anchor = [0.25, 0.5, 0.75]
        .into_iter()
        .min_by(|a, b| {
            (a - x_frac)
                .abs()
                .partial_cmp(&(b - x_frac).abs())
                .unwrap()
        })
        .unwrap();
    let offset = Some((x_frac - anchor).clamp(-0.25, 0.25));

    // Roundness: joint (shape, roundness) template fit on the detected
    // components. Circles carry no corner signal, so they yield None.
    let comps = components(&analysis.coverage, side);
    let roundness = if comps.is_empty() {
        None
    } else {
        let count_class = match comps.len() {
            1 => Count::One,
            2 => Count::Two,
            _ => Count::Three,
        };
        let centers: Vec<(f64, f64)> = comps
            .iter()
            .take(3)
            .map(|c| centroid(&analysis.coverage, side, c))
            .collect();
        let half_size = subject_half_size(side, count_class);
        let (_shape, rho) = fit_shape_roundness(&analysis, &centers, half_size);
        rho
    };

    EstimatedStyle {
        hue,
        saturation,
        texture_freq: analysis.texture_freq,
        roundness,
        offset,
    }
}

/// Template-correlation score of an image against its prompt, times an
/// exact-count factor. 1.0 is a perfect match.
pub fn content_check(image: &Tensor, prompt: &Prompt) -> f64 {
    let analysis = analyze(image);
    let side = analysis.side;
    let Prompt::Content {
        shape,
        count,
        position,
    } = prompt
    else {
        // An empty prompt asks for background only.
        return (1.0 - analysis.coverage_total / (side * side) as f64).clamp(0.0, 1.0);
    };

    // Correlate against the canonical template, searching sub-pixel shifts
    // inside the legal offset band so composition style is not punished.
    let anchor_px = position.anchor() * side as f64;
    let band = 0.125 * side as f64;
    let steps = 17;
    let mut best_ncc = 0.0f64;
    for k in 0..steps {
        let delta = -band + 2.0 * band * k as f64 / (steps - 1) as f64;
        let tmpl = template_coverage(side, *shape, *count, anchor_px + delta);
        best_ncc = best_ncc.max(ncc(&analysis.coverage, &tmpl));
    }

    let found = components(&analysis.coverage, side).len();
    let count_factor = if found == count.as_usize() { 1.0 } else { 0.5 };
    (best_ncc * count_factor).clamp(0.0, 1.0)
}

/// Mean absolute difference over a fixed multi-scale stack: full
/// resolution, 2x and 4x average-pooled.
pub fn perceptual_distance(a: &Tensor, b: &Tensor) -> crate::tensor::Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "perceptual_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut total = 0.0;
    for factor in [1usize, 2, 4] {
        let pa = avg_pool(a.data(), c, h, w, factor);
        let pb = avg_pool(b.data(), c, h, w, factor);
        let mad = pa
            .iter()
            .zip(pb.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / pa.len() as f64;
        total += mad;
    }
    Ok(total / 3.0)
}

fn avg_pool(data: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return data.to_vec();
    }
    let ph = h / factor;
    let pw = w / factor;
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[ch * h * w + (y * factor + dy) * w + (x * factor + dx)];
                    }
                }
                out[ch * ph * pw + y * pw + x] = acc / (factor * factor) as f64;
            }
        }
    }
    out
}

/// Count the connected subject components (used by tests and the count
/// factor of the content score).
pub fn component_count(image: &Tensor) -> usize {
    let analysis = analyze(image);
    components(&analysis.coverage, analysis.side).len()
}

/// Subject coverage reconstruction, exposed for tests.
pub fn coverage_map(image: &Tensor) -> Vec<f64> {
    analyze(image).coverage
}
