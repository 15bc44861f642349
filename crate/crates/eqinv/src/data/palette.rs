//! Environment color palettes.
//!
//! Colors double as environment labels, so they must stay separable after
//! augmentation noise: pairwise distance at least 0.3 in RGB space. They
//! must also be interchangeable: diagnostics compare how each color group
//! behaves, so no color may be intrinsically special. The palette is a
//! regular polygon around mid-gray in the plane orthogonal to (1,1,1);
//! every vertex then sees the identical profile of distances (and dot
//! products) to the rest of the palette, and a color-blind similarity
//! measure cannot prefer one color over another by construction.

use std::f64::consts::TAU;

/// Chroma radius of the polygon. Large enough that adjacent vertices stay
/// at least 0.3 apart for up to 12 colors, small enough that channels stay
/// inside [0, 1] with headroom for additive augmentation noise.
const RADIUS: f64 = 0.59;

/// Fixed rotation that keeps vertices away from channel-coordinate
/// symmetries (exact channel ties at specific angles).
const PHASE: f64 = 0.35;

/// Regular `num_colors`-gon of radius [`RADIUS`] centered at (0.5, 0.5, 0.5)
/// in the plane orthogonal to (1,1,1).
pub fn default_palette(num_colors: usize) -> Vec<[f64; 3]> {
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    (0..num_colors)
        .map(|c| {
            let theta = TAU * c as f64 / num_colors as f64 + PHASE;
            let (sin, cos) = theta.sin_cos();
            [
                0.5 + RADIUS * (cos * u[0] + sin * v[0]),
                0.5 + RADIUS * (cos * u[1] + sin * v[1]),
                0.5 + RADIUS * (cos * u[2] + sin * v[2]),
            ]
        })
        .collect()
}

/// Smallest pairwise euclidean distance between palette entries.
pub fn min_pairwise_distance(palette: &[[f64; 3]]) -> f64 {
    let mut min = f64::INFINITY;
    for (i, a) in palette.iter().enumerate() {
        for b in palette.iter().skip(i + 1) {
            let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            min = min.min(d.sqrt());
        }
    }
    min
}

/// Component of `rgb` orthogonal to the gray axis (1,1,1). Tinting scales a
/// color by mean glyph intensity; the chroma direction survives that scaling
/// as well as global brightness shifts, so it is the robust color signature.
pub fn chroma(rgb: [f64; 3]) -> [f64; 3] {
    let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    [rgb[0] - mean, rgb[1] - mean, rgb[2] - mean]
}

/// Palette index whose chroma direction best matches `rgb`'s.
pub fn nearest_by_chroma(palette: &[[f64; 3]], rgb: [f64; 3]) -> usize {
    let target = chroma(rgb);
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, color) in palette.iter().enumerate() {
        let ch = chroma(*color);
        let norm = (ch[0] * ch[0] + ch[1] * ch[1] + ch[2] * ch[2]).sqrt().max(1e-12);
        let dot = (target[0] * ch[0] + target[1] * ch[1] + target[2] * ch[2]) / norm;
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palettes_are_separable() {
        for c in 2..=12 {
            let palette = default_palette(c);
            assert_eq!(palette.len(), c);
            assert!(
                min_pairwise_distance(&palette) >= 0.3,
                "palette for {c} colors too tight: {}",
                min_pairwise_distance(&palette)
            );
        }
    }

    #[test]
    fn every_color_sees_the_same_distance_profile() {
        // Vertex transitivity: sorted distances from color i to the rest of
        // the palette match color 0's. Any asymmetry here would make one
        // color systematically closer to a uniform color mix than another,
        // which the environment diagnostics would misread as bias.
        for c in 2..=12 {
            let palette = default_palette(c);
            let profile = |i: usize| -> Vec<f64> {
                let mut d: Vec<f64> = (0..c)
                    .filter(|j| *j != i)
                    .map(|j| {
                        let (a, b) = (palette[i], palette[j]);
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                            .sqrt()
                    })
                    .collect();
                d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                d
            };
            let base = profile(0);
            for i in 1..c {
                for (x, y) in profile(i).iter().zip(&base) {
                    assert!((x - y).abs() < 1e-12, "color {i} profile differs");
                }
            }
        }
    }

    #[test]
    fn mean_dot_to_the_palette_is_color_independent() {
        let palette = default_palette(10);
        let mean_dot = |i: usize| -> f64 {
            palette
                .iter()
                .map(|b| {
                    let a = palette[i];
                    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
                })
                .sum::<f64>()
                / palette.len() as f64
        };
        let base = mean_dot(0);
        for i in 1..10 {
            assert!((mean_dot(i) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn chroma_recovery_is_exact_and_scale_invariant() {
        let palette = default_palette(10);
        for (i, color) in palette.iter().enumerate() {
            assert_eq!(nearest_by_chroma(&palette, *color), i);
            let dimmed = [color[0] * 0.2, color[1] * 0.2, color[2] * 0.2];
            assert_eq!(nearest_by_chroma(&palette, dimmed), i);
        }
    }

    #[test]
    fn channels_stay_in_unit_range() {
        for c in 2..=12 {
            for rgb in default_palette(c) {
                for v in rgb {
                    assert!((0.0..=1.0).contains(&v), "channel {v} out of range");
                }
            }
        }
    }
}
