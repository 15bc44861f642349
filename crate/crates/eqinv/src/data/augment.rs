//! View augmentation for contrastive pretraining.
//!
//! Geometry and pixel noise only: random shift (up to 10% of the side),
//! random scale (0.9 to 1.1), and additive Gaussian noise (sigma 0.02),
//! clipped back to [0, 1]. Color channels are never permuted or jittered;
//! color carries the environment signal, and an augmentation that touched
//! it would erase exactly the bias this pipeline is built to expose.
//!
//! The draw order is fixed (shift x, shift y, scale, then per-pixel noise
//! channel-major), and every transform is parameterized so that all-zero
//! random draws reproduce the input exactly.

use rand_core::RngCore;

use crate::rng;

const MAX_SHIFT_FRACTION: f64 = 0.1;
const SCALE_JITTER: f64 = 0.1;
const NOISE_SIGMA: f64 = 0.02;

/// Augment one `[3 × side × side]` image (channel-major, values in [0, 1]).
pub fn augment(image: &[f32], side: usize, rng: &mut impl RngCore) -> Vec<f64> {
    debug_assert_eq!(image.len(), 3 * side * side);
    let tx = MAX_SHIFT_FRACTION * side as f64 * rng::symmetric_f64(rng);
    let ty = MAX_SHIFT_FRACTION * side as f64 * rng::symmetric_f64(rng);
    let scale = 1.0 + SCALE_JITTER * rng::symmetric_f64(rng);

    let center = (side as f64 - 1.0) / 2.0;
    let plane = side * side;
    let mut out = vec![0.0; 3 * plane];
    for ch in 0..3 {
        let src_plane = &image[ch * plane..(ch + 1) * plane];
        let dst_plane = &mut out[ch * plane..(ch + 1) * plane];
        for i in 0..side {
            let sy = (i as f64 - ty - center) / scale + center;
            for j in 0..side {
                let sx = (j as f64 - tx - center) / scale + center;
                let value = bilinear(src_plane, side, sx, sy);
                let noisy = value + NOISE_SIGMA * rng::gaussian_f64(rng);
                dst_plane[i * side + j] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Bilinear sample with zero padding outside the image.
fn bilinear(plane: &[f32], side: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= side as f64 || yi >= side as f64 {
            0.0
        } else {
            f64::from(plane[yi as usize * side + xi as usize])
        }
    };
    let v00 = fetch(x0, y0);
    let v10 = fetch(x0 + 1.0, y0);
    let v01 = fetch(x0, y0 + 1.0);
    let v11 = fetch(x0 + 1.0, y0 + 1.0);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, BiasedDatasetSpec, Split};

    /// RngCore that always returns zero: augmentation must be the identity.
    struct ZeroRng;
    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand_core::Error> {
            dest.fill(0);
            Ok(())
        }
    }

    fn sample_image() -> (Vec<f32>, usize) {
        let spec = BiasedDatasetSpec::sized(3, 4, 32, 0.9, 5);
        let data = generate(&spec).unwrap();
        let idx = data.indices_of(Split::Train)[1];
        (data.image(idx).to_vec(), data.image_side)
    }

    #[test]
    fn zero_randomness_is_identity() {
        let (img, side) = sample_image();
        let out = augment(&img, side, &mut ZeroRng);
        for (o, i) in out.iter().zip(&img) {
            assert_eq!(*o, f64::from(*i));
        }
    }

    #[test]
    fn two_views_of_one_image_differ() {
        let (img, side) = sample_image();
        let mut rng = crate::rng::stream(9, &["augment-test"]);
        let a = augment(&img, side, &mut rng);
        let b = augment(&img, side, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let (img, side) = sample_image();
        let mut rng = crate::rng::stream(10, &["augment-test"]);
        for _ in 0..20 {
            let out = augment(&img, side, &mut rng);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mean_color_identity_survives_augmentation() {
        // The environment signal is the chroma direction of the mean pixel
        // color; geometry and mild noise must not move it to another
        // palette entry.
        let (img, side) = sample_image();
        let palette = crate::data::palette::default_palette(3);
        let plane = side * side;
        let mean = |buf: &[f64]| -> [f64; 3] {
            let mut m = [0.0; 3];
            for ch in 0..3 {
                m[ch] = buf[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
            }
            m
        };
        let base: Vec<f64> = img.iter().map(|v| f64::from(*v)).collect();
        let want = crate::data::palette::nearest_by_chroma(&palette, mean(&base));
        let mut rng = crate::rng::stream(11, &["augment-test"]);
        for _ in 0..1000 {
            let out = augment(&img, side, &mut rng);
            assert_eq!(crate::data::palette::nearest_by_chroma(&palette, mean(&out)), want);
        }
    }
}
